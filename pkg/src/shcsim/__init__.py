"""Quantized massive-MIMO uplink combining: stochastic solver and benchmarks."""

from .channel import (ChannelProcessConfig, ChannelSample, ChannelStream,
                      UserGeometry, draw_channel, drop_users, evolve_channel,
                      pathloss_db, pathloss_gain, ula_steering)
from .config import ExperimentConfig
from .frontend import (Codebook, DesignPoint, QuantizerModel, SelectionMatrix,
                       SystemModel, average_rate, dft_codebook, instantaneous_rate,
                       quantization_noise_cov, quantizer_params, sinr, user_rates,
                       user_rates_batch)
from .solver import (DualState, FeasibleBox, SolveTrace, StepSchedules,
                     SubproblemError, SurrogateState, default_schedules, rate_gradient,
                     round_selection, run_rssca, smooth_update, solve_feasibility,
                     solve_subproblem, surrogate_value, update_surrogate)
from .baselines import SchemeSpec, mm_select, mrc_combiner, random_select, run_baseline, zf_combiner
from .harness import (ExperimentResult, feasibility_experiment, op_count_report,
                      pilot_overhead_report, run_convergence, sweep)

__version__ = "0.1.0"
