"""Experiment orchestration: convergence traces, scheme sweeps, robustness.

Every run is a pure function of (config, scheme, seed): user geometry,
training, burn-in, and held-out evaluation channels come from labeled
substreams of one root seed, with disjoint frame offsets, so schemes at the
same point share identical training frames and evaluation stays out of
sample.  Heavy experiments fan out over a process pool sized by cfg.jobs.
"""

from __future__ import annotations

import dataclasses
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import instrumentation
from .baselines import SchemeSpec, mm_select, run_baseline, zf_combiner
from .channel import (ChannelStream, UserGeometry, assert_disjoint_frames,
                      drop_users, write_samples_csv, _label_key)
from .config import SCHEME_IDS, ExperimentConfig
from .frontend import DesignPoint, SystemModel, rf_combiner, user_rates, user_rates_batch
from .solver import SolveTrace, SubproblemError, build_system, dbm

_TRAIN_OFFSET = 0
_EVAL_OFFSET = 1_000_000
_DELAYED_OFFSET = 2_000_000

_AXIS_FIELDS = {"users": "K", "antennas": "M", "bits": "q"}


def _root_stream(cfg: ExperimentConfig, seed: int, label: str,
                 geometry: UserGeometry, frame_offset: int) -> ChannelStream:
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(_label_key(label),))
    return ChannelStream(seq, geometry, cfg.channel, cfg.M, frame_offset=frame_offset)


def build_streams(cfg: ExperimentConfig, seed: int):
    """Geometry plus (train, eval) channel streams for one run instance."""
    geo_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(_label_key("geometry"),)))
    geometry = drop_users(geo_rng, cfg.K)
    train = _root_stream(cfg, seed, "train", geometry, _TRAIN_OFFSET)
    held_out = _root_stream(cfg, seed, "eval", geometry, _EVAL_OFFSET)
    return geometry, train, held_out


def evaluate_design(x: DesignPoint, system: SystemModel, eval_stream: ChannelStream,
                    count: int) -> np.ndarray:
    """Held-out per-user average rates over ``count`` fresh realizations."""
    batch = np.stack([system.codebook.beamspace(eval_stream.draw().matrix)
                      for _ in range(count)])
    return user_rates_batch(x, batch, system).mean(axis=0)


@dataclass
class RunRecord:
    """One (scheme, seed) run: achieved power, held-out rates, feasibility."""

    scheme: str
    seed: int
    config_hash: str
    power_mw: float = float("nan")
    power_dbm: float = float("nan")
    rates: list = field(default_factory=list)
    feasible: bool = False
    error: str | None = None
    trace: SolveTrace | None = None

    def as_row(self) -> dict:
        return {
            "scheme": self.scheme,
            "seed": self.seed,
            "power_dbm": self.power_dbm,
            "feasible": int(self.feasible),
            "config_hash": self.config_hash,
            "error": self.error or "",
        }


@dataclass
class ExperimentResult:
    """Aggregate over seed replications at one configuration point."""

    scheme: str
    axis_name: str | None
    axis_value: float | None
    config_hash: str
    records: list = field(default_factory=list)
    trace_paths: list = field(default_factory=list)

    @property
    def replications(self) -> int:
        return len(self.records)

    @property
    def completed(self) -> list:
        return [r for r in self.records if r.error is None]

    @property
    def feasible_records(self) -> list:
        return [r for r in self.completed if r.feasible]

    @property
    def feasible_fraction(self) -> float:
        if not self.records:
            return 0.0
        return len(self.feasible_records) / len(self.records)

    def mean_power_mw(self, feasible_only: bool = True) -> float:
        recs = self.feasible_records if feasible_only else self.completed
        if not recs:
            return float("nan")
        return float(np.mean([r.power_mw for r in recs]))

    def mean_power_dbm(self, feasible_only: bool = True) -> float:
        return dbm(self.mean_power_mw(feasible_only))

    def mean_rates(self) -> np.ndarray:
        recs = self.completed
        if not recs:
            return np.array([])
        return np.mean([r.rates for r in recs], axis=0)

    def summary(self) -> dict:
        return {
            "scheme": self.scheme,
            "axis_name": self.axis_name,
            "axis_value": self.axis_value,
            "config_hash": self.config_hash,
            "replications": self.replications,
            "completed": len(self.completed),
            "feasible_fraction": self.feasible_fraction,
            "mean_power_dbm_feasible": self.mean_power_dbm(),
            "mean_rates": [float(v) for v in self.mean_rates()],
            "errors": [r.error for r in self.records if r.error],
        }


def run_single(cfg: ExperimentConfig, scheme: str, seed: int,
               keep_trace: bool = True, x0: DesignPoint | None = None) -> RunRecord:
    """One full optimization run plus held-out evaluation."""
    record = RunRecord(scheme=scheme, seed=seed, config_hash=cfg.config_hash())
    try:
        geometry, train, held_out = build_streams(cfg, seed)
        system = build_system(cfg)
        if x0 is not None and scheme == "shc":
            from .solver import run_rssca
            x, trace = run_rssca(cfg, train, x0=x0, system=system)
        else:
            x, trace = run_baseline(SchemeSpec.of(scheme), cfg, train)
        rates = evaluate_design(x, system, held_out, cfg.eval_samples)
        assert_disjoint_frames(train, held_out)
        record.power_mw = float(x.powers.sum())
        record.power_dbm = dbm(record.power_mw)
        record.rates = [float(v) for v in rates]
        record.feasible = bool(np.all(rates >= cfg.targets_vector()
                                      - cfg.feasibility_tolerance))
        if keep_trace:
            record.trace = trace
    except (SubproblemError, ValueError, np.linalg.LinAlgError) as err:
        record.error = f"{type(err).__name__}: {err}"
    return record


def _pool_job(payload):
    cfg_dict, scheme, seed, keep_trace = payload
    cfg = ExperimentConfig.from_dict(cfg_dict)
    return run_single(cfg, scheme, seed, keep_trace=keep_trace)


def _run_many(cfg: ExperimentConfig, jobs: list, keep_trace: bool = False) -> list:
    """Execute (cfg, scheme, seed) jobs, in-process or over a pool."""
    if cfg.jobs <= 1 or len(jobs) <= 1:
        return [run_single(point_cfg, scheme, seed, keep_trace=keep_trace)
                for point_cfg, scheme, seed in jobs]
    if any(point_cfg.schedules is not None for point_cfg, _, _ in jobs):
        raise ValueError("custom schedule callables cannot cross process "
                         "boundaries; run with jobs=1")
    payloads = [(point_cfg.to_dict(), scheme, seed, keep_trace)
                for point_cfg, scheme, seed in jobs]
    with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
        return list(pool.map(_pool_job, payloads))


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def run_convergence(cfg: ExperimentConfig, out_dir=None,
                    dump_channels: bool = False,
                    x0: DesignPoint | None = None) -> ExperimentResult:
    """Replicated optimization runs with per-iteration traces."""
    if cfg.scheme != "shc":
        raise ValueError("convergence experiment requires the shc scheme")
    result = ExperimentResult(scheme="shc", axis_name=None, axis_value=None,
                              config_hash=cfg.config_hash())
    seeds = range(cfg.seed, cfg.seed + cfg.replications)
    if x0 is not None:
        records = [run_single(cfg, "shc", s, keep_trace=True, x0=x0) for s in seeds]
    else:
        records = _run_many(cfg, [(cfg, "shc", s) for s in seeds], keep_trace=True)
    for record in records:
        result.records.append(record)
        if out_dir and record.trace is not None:
            os.makedirs(out_dir, exist_ok=True)
            path = os.path.join(out_dir, f"trace_seed{record.seed}.csv")
            record.trace.write_csv(path, config_hash=result.config_hash,
                                   seed=record.seed)
            result.trace_paths.append(path)
    if dump_channels and out_dir:
        _, train, _ = build_streams(cfg, cfg.seed)
        samples = train.draw_many(cfg.L_f)
        write_samples_csv(samples, os.path.join(out_dir, "channels.csv"))
    if out_dir:
        _write_result_json(out_dir, "converge", cfg, [result.summary()])
        _write_gnuplot(out_dir, "trace")
    return result


def sweep(cfg: ExperimentConfig, axis: str, values) -> list[ExperimentResult]:
    """All schemes at each axis value with common seeds; returns one
    aggregate per (value, scheme)."""
    if axis not in _AXIS_FIELDS:
        raise ValueError(f"axis must be one of {sorted(_AXIS_FIELDS)}")
    field_name = _AXIS_FIELDS[axis]
    results = []
    for value in values:
        point_cfg = cfg.replace(**{field_name: int(value)})
        seeds = range(cfg.seed, cfg.seed + cfg.replications)
        jobs = [(point_cfg, scheme, seed) for scheme in SCHEME_IDS for seed in seeds]
        records = _run_many(cfg, jobs)
        by_scheme = {scheme: ExperimentResult(
            scheme=scheme, axis_name=axis, axis_value=float(value),
            config_hash=point_cfg.config_hash()) for scheme in SCHEME_IDS}
        for record in records:
            by_scheme[record.scheme].records.append(record)
        results.extend(by_scheme[scheme] for scheme in SCHEME_IDS)
    return results


def write_sweep_csv(results: list, path) -> None:
    """Tidy rows: one record per (axis value, scheme, seed)."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "axis_value", "scheme", "seed", "power_dbm",
                         "feasible", "config_hash", "error"])
        for result in results:
            for record in result.records:
                row = record.as_row()
                writer.writerow([result.axis_name, result.axis_value,
                                 row["scheme"], row["seed"], repr(row["power_dbm"]),
                                 row["feasible"], row["config_hash"], row["error"]])


def feasibility_experiment(cfg: ExperimentConfig, delayed: bool = False) -> float:
    """Fraction of seeded instances whose held-out average rates meet every
    per-user target (within the configured tolerance).

    Rates are averaged over >= 500 independent evaluation realizations.  With
    ``delayed`` the contender emulates instantaneous-CSI operation: each
    evaluation slot designs its own combiner and powers from an autoregressive
    delayed channel sample and is scored on the evolved true channel.
    """
    if cfg.eval_samples < 500:
        raise ValueError("feasibility experiment needs >= 500 evaluation realizations")
    seeds = list(range(cfg.seed, cfg.seed + cfg.replications))
    if delayed:
        flags = [_delayed_instance_feasible(cfg, s) for s in seeds]
    else:
        records = _run_many(cfg, [(cfg, "shc", s) for s in seeds])
        flags = [r.error is None and r.feasible for r in records]
    return float(np.mean(flags))


def _power_control(x: DesignPoint, beamspace_h: np.ndarray, system: SystemModel,
                   target_sinr: np.ndarray, p_max: float, iters: int = 60) -> np.ndarray:
    """Capped fixed-point power control hitting per-user SINR targets.

    Standard interference-function iteration p <- min(p_max, p * target/SINR),
    run on one fixed channel; the quantization noise re-enters through the
    power-dependent covariance each round.
    """
    p = np.full(x.powers.size, p_max)
    work = x.copy()
    for _ in range(iters):
        work.powers = p
        rates = user_rates(work, beamspace_h, system)
        sinr = np.expm1(rates * np.log(2.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(sinr > 0.0, target_sinr / np.maximum(sinr, 1e-300), np.inf)
        p_new = np.minimum(p * scale, p_max)
        if np.allclose(p_new, p, rtol=1e-12, atol=1e-15):
            p = p_new
            break
        p = p_new
    return p


def _delayed_instance_feasible(cfg: ExperimentConfig, seed: int) -> bool:
    """Average rates of the per-slot delayed-CSI contender on one instance."""
    geometry, _, _ = build_streams(cfg, seed)
    system = build_system(cfg)
    stream = _root_stream(cfg, seed, "delayed", geometry, _DELAYED_OFFSET)
    targets = cfg.targets_vector()
    target_sinr = 2.0 ** targets - 1.0
    acc = np.zeros(cfg.K)
    for _ in range(cfg.eval_samples):
        meas = stream.draw()
        true = stream.evolve(meas)
        selection = mm_select(system.codebook, [meas], cfg.S).matrix
        U = rf_combiner(system.codebook, selection)
        heff = system.gain * (U.conj().T @ meas.matrix)
        try:
            V, W = zf_combiner(heff)
        except ValueError:
            V = np.eye(cfg.S, dtype=complex)
            W = heff / np.linalg.norm(heff, axis=0, keepdims=True)
        x = DesignPoint(powers=np.full(cfg.K, cfg.p_max_mw), selection=selection,
                        combiner=V, beamformers=W)
        meas_beam = system.codebook.beamspace(meas.matrix)
        x.powers = _power_control(x, meas_beam, system, target_sinr, cfg.p_max_mw)
        acc += user_rates(x, system.codebook.beamspace(true.matrix), system)
    rates = acc / cfg.eval_samples
    return bool(np.all(rates >= targets - cfg.feasibility_tolerance))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PilotOverhead:
    statistical_pilots: int
    instantaneous_pilots: int
    ratio: float


def pilot_overhead_report(L_c: int, L_f: int, L_s: int, M: int, K: int) -> PilotOverhead:
    """Pilot cost of statistical adaptation (K*M per convergence frame)
    against per-slot instantaneous adaptation (K*M per slot)."""
    if min(L_c, L_f, L_s, M, K) <= 0:
        raise ValueError("all pilot-overhead arguments must be positive")
    return PilotOverhead(
        statistical_pilots=K * M * L_c,
        instantaneous_pilots=K * M * L_f * L_s,
        ratio=L_c / (L_f * L_s),
    )


def convergence_frame(trace: SolveTrace, window: int = 10, rel_tol: float = 0.02) -> int:
    """First frame count after which the trailing objective window is flat."""
    vals = np.array([r.objective_mw for r in trace.records])
    for end in range(window, len(vals) + 1):
        chunk = vals[end - window:end]
        if np.ptp(chunk) < rel_tol * abs(chunk[-1]):
            return end
    return len(vals)


_NOMINAL_ORDERS = {
    "shc": "(N^3 S^3 + N^2 S^4 + N S^4 + S^2 K^2) log(1/eps) + S^2 K + S(N K + K^2)",
    "mm": "(4 S^2 K^2 + 4 S K^3) log(1/eps) + S^2 K + S K^2",
    "random": "(4 S^2 K^2 + 4 S K^3) log(1/eps) + S^2 K + S K^2",
    "zf": "(N^3 S^3 + N^2 S^3 K + N S^3 + S^2 K^2) log(1/eps) + S(K^2 + N K) + K^3",
    "mrc": "(N^3 S^3 + N^2 S^3 K + N S^3 + S^2 K^2) log(1/eps) + S(K^2 + M K + N K)",
}


def op_count_report(cfg: ExperimentConfig, iterations: int | None = None) -> dict:
    """Empirical kernel counts per scheme next to nominal complexity orders.

    Counts floating-point-dominant kernel invocations (rate evaluations,
    gradient evaluations, dual inner solves) over an instrumented run; the
    juxtaposition is a trend check, not an equality claim.
    """
    iters = cfg.L_f if iterations is None else int(iterations)
    report = {}
    for scheme in SCHEME_IDS:
        if iters == 0:
            counters = instrumentation.OpCounters()
        else:
            run_cfg = cfg.replace(scheme=scheme, L_f=iters,
                                  rounding_polish_frames=0, replications=1)
            geometry, train, _ = build_streams(run_cfg, cfg.seed)
            counters = instrumentation.OpCounters()
            with instrumentation.counting(counters):
                run_baseline(SchemeSpec.of(scheme), run_cfg, train)
        entry = counters.as_dict()
        entry["per_iteration_flops"] = (counters.flops / iters) if iters else 0.0
        entry["nominal_order"] = _NOMINAL_ORDERS[scheme]
        report[scheme] = entry
    return report


# ---------------------------------------------------------------------------
# output plumbing
# ---------------------------------------------------------------------------

def _write_result_json(out_dir, command: str, cfg: ExperimentConfig, results) -> None:
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "results": results,
    }
    with open(os.path.join(out_dir, "result.json"), "w") as fh:
        json.dump(payload, fh, indent=2, default=float)


_GNUPLOT_SNIPPETS = {
    "trace": (
        "set datafile separator comma\n"
        "set key autotitle columnhead\n"
        "set xlabel 'iteration'\n"
        "plot 'trace_seed0.csv' using 1:2 with lines title 'objective [dBm]', \\\n"
        "     'trace_seed0.csv' using 1:3 with lines title 'max constraint'\n"
    ),
    "sweep": (
        "set datafile separator comma\n"
        "set key autotitle columnhead\n"
        "set xlabel 'axis value'\n"
        "set ylabel 'power [dBm]'\n"
        "plot 'sweep.csv' using 2:5 with points title 'runs'\n"
    ),
}


def _write_gnuplot(out_dir, kind: str) -> None:
    with open(os.path.join(out_dir, f"{kind}.gp"), "w") as fh:
        fh.write(_GNUPLOT_SNIPPETS[kind])
