"""Experiment configuration: one flat record shared by solver and harness.

Configs load from a YAML key/value file and any key can be overridden from
the command line.  Every result row is stamped with a short hash of the
numeric content so outputs are traceable to their exact configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import yaml

from .channel import ChannelProcessConfig
from .solver import StepSchedules

SCHEME_IDS = ("shc", "mm", "random", "zf", "mrc")


@dataclass
class ExperimentConfig:
    """System dimensions, targets, run lengths, and solver knobs."""

    M: int = 64                # receive antennas
    S: int = 12                # RF chains
    N: int = 16                # codebook size
    K: int = 12                # users
    q: int = 3                 # quantizer bits per real dimension
    sigma2_dbm: float = -94.0  # noise power
    p_max_dbm: float = 10.0    # per-user transmit power cap
    gamma_targets: float | list = 1.0  # per-user rate targets, bps/Hz
    L_f: int = 150             # optimization frames per run
    eval_samples: int = 500    # held-out evaluation sample count
    seed: int = 0              # base seed
    replications: int = 20     # seeds per configuration point
    scheme: str = "shc"
    tau: float = 1e-2          # surrogate strong-convexity constant
    sample_capacity: int | None = None  # defaults to the run horizon
    recursive_rates: bool = False       # constant-memory rate averaging
    rounding_polish_frames: int = 30    # frames re-optimized after rounding
    burnin_samples: int = 100           # samples for baseline statistics
    feasibility_tolerance: float = 0.05  # bps/Hz slack when judging a run feasible
    jobs: int = 1
    dual_settings: dict | None = None
    channel: ChannelProcessConfig = field(default_factory=ChannelProcessConfig)
    schedules: StepSchedules | None = None  # None -> default schedules

    def __post_init__(self):
        if not (self.S <= self.N <= self.M):
            raise ValueError(f"need S <= N <= M, got S={self.S}, N={self.N}, M={self.M}")
        if self.K > self.S:
            raise ValueError(f"need K <= S, got K={self.K}, S={self.S}")
        if self.q < 1:
            raise ValueError("quantizer bits must be >= 1")
        if self.L_f < 1:
            raise ValueError("L_f must be >= 1")
        if self.eval_samples < 100:
            raise ValueError("eval_samples must be >= 100")
        if self.scheme not in SCHEME_IDS:
            raise ValueError(f"scheme must be one of {SCHEME_IDS}")

    @property
    def sigma2(self) -> float:
        """Noise power in linear mW."""
        return 10.0 ** (self.sigma2_dbm / 10.0)

    @property
    def p_max_mw(self) -> float:
        return 10.0 ** (self.p_max_dbm / 10.0)

    def targets_vector(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.gamma_targets, dtype=float),
                               (self.K,)).copy()

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- serialization ------------------------------------------------------

    _CHANNEL_KEYS = ("path_count", "ar_coefficient", "pathloss_offset_db",
                     "pathloss_slope")

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name in ("channel", "schedules"):
                continue
            out[f.name] = getattr(self, f.name)
        out["channel"] = {k: getattr(self.channel, k) for k in self._CHANNEL_KEYS}
        out["schedules"] = "default" if self.schedules is None else "custom"
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        channel_data = data.pop("channel", {}) or {}
        data.pop("schedules", None)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(channel=ChannelProcessConfig(**channel_data), **data)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        return cls.from_dict(data)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, default=repr)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]
