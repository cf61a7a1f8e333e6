"""Geometric multipath uplink channel generation.

Narrowband multi-user channels seen by a base station with a half-wavelength
uniform linear array (ULA): per-user large-scale pathloss, a finite number of
planar-wave paths with complex Gaussian gains, and an optional first-order
autoregressive evolution across frames for delayed-CSI studies.

All randomness flows through explicit ``numpy.random.Generator`` objects, so
the full sample stream is a pure function of (seed, geometry, config).
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

CELL_RADIUS_M = 200.0
MIN_USER_DISTANCE_M = 35.0
PATHLOSS_OFFSET_DB = 30.6
PATHLOSS_SLOPE_DB_PER_DECADE = 36.7


def pathloss_db(distance_m, offset_db=PATHLOSS_OFFSET_DB, slope=PATHLOSS_SLOPE_DB_PER_DECADE):
    """Large-scale pathloss in dB at distance ``distance_m`` (meters).

    offset_db + slope * log10(d); raises for nonpositive distances.
    """
    d = np.asarray(distance_m, dtype=float)
    if np.any(d <= 0.0):
        raise ValueError("pathloss distance must be positive")
    out = offset_db + slope * np.log10(d)
    return float(out) if np.isscalar(distance_m) else out


def pathloss_gain(distance_m, offset_db=PATHLOSS_OFFSET_DB, slope=PATHLOSS_SLOPE_DB_PER_DECADE):
    """Linear power gain beta = 10**(-pathloss_db/10)."""
    return 10.0 ** (-np.asarray(pathloss_db(distance_m, offset_db, slope)) / 10.0)


def ula_steering(antenna_count: int, sine_angle: float) -> np.ndarray:
    """Unit-norm ULA array response for a half-wavelength element spacing.

    Element m carries phase -pi*m*sine_angle, m = 0..antenna_count-1, and the
    vector is scaled by 1/sqrt(antenna_count) so it has unit Euclidean norm.
    """
    if antenna_count < 1:
        raise ValueError("antenna_count must be >= 1")
    if abs(sine_angle) > 1.0:
        raise ValueError(f"sine_angle must lie in [-1, 1], got {sine_angle}")
    m = np.arange(antenna_count)
    return np.exp(-1j * np.pi * m * sine_angle) / np.sqrt(antenna_count)


@dataclass(frozen=True)
class UserGeometry:
    """Fixed per-user link distances for one experiment instance."""

    distances_m: np.ndarray
    cell_radius_m: float = CELL_RADIUS_M

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.distances_m, dtype=float))
        object.__setattr__(self, "distances_m", d)
        if d.ndim != 1 or d.size == 0:
            raise ValueError("distances_m must be a nonempty 1-D array")
        if np.any(d <= 0.0) or np.any(d > self.cell_radius_m):
            raise ValueError(f"user distances must lie in (0, {self.cell_radius_m}] m")

    @property
    def user_count(self) -> int:
        return int(self.distances_m.size)

    @property
    def gains(self) -> np.ndarray:
        """Linear pathloss gains beta_k for all users."""
        return pathloss_gain(self.distances_m)


def drop_users(rng: np.random.Generator, user_count: int,
               r_min: float = MIN_USER_DISTANCE_M,
               r_max: float = CELL_RADIUS_M) -> UserGeometry:
    """Drop users area-uniformly in the annulus [r_min, r_max]."""
    if not (0.0 < r_min < r_max):
        raise ValueError("need 0 < r_min < r_max")
    u = rng.random(user_count)
    d = np.sqrt(u * (r_max**2 - r_min**2) + r_min**2)
    return UserGeometry(distances_m=d, cell_radius_m=r_max)


@dataclass(frozen=True)
class ChannelProcessConfig:
    """Knobs of the multipath generator and its frame-to-frame evolution."""

    path_count: int = 8
    ar_coefficient: float = 0.9
    pathloss_offset_db: float = PATHLOSS_OFFSET_DB
    pathloss_slope: float = PATHLOSS_SLOPE_DB_PER_DECADE
    element_spacing_wavelengths: float = 0.5  # fixed half-wavelength ULA

    def __post_init__(self):
        if self.path_count < 1:
            raise ValueError("path_count must be >= 1")
        if not (0.0 <= self.ar_coefficient <= 1.0):
            raise ValueError("ar_coefficient must lie in [0, 1]")
        if self.element_spacing_wavelengths != 0.5:
            raise ValueError("only half-wavelength element spacing is supported")


@dataclass(frozen=True)
class ChannelSample:
    """One uplink narrowband channel matrix (antennas x users) for one frame."""

    matrix: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        h = np.asarray(self.matrix, dtype=complex)
        object.__setattr__(self, "matrix", h)
        if h.ndim != 2:
            raise ValueError("channel matrix must be 2-D (antennas x users)")
        if not np.all(np.isfinite(h.view(float))):
            raise ValueError("channel matrix contains non-finite entries")
        if self.frame_index < 0:
            raise ValueError("frame_index must be nonnegative")

    @property
    def antenna_count(self) -> int:
        return self.matrix.shape[0]

    @property
    def user_count(self) -> int:
        return self.matrix.shape[1]


def draw_channel(rng: np.random.Generator, geometry: UserGeometry,
                 cfg: ChannelProcessConfig, antenna_count: int,
                 frame_index: int = 0) -> ChannelSample:
    """Draw one multipath channel sample.

    Column k is sqrt(beta_k) * sqrt(M/P) * sum_p alpha_p * a(sin_p) with P
    paths per user, alpha_p standard complex Gaussian, sin_p uniform on
    [-1, 1), independently per user and per call.  E||h_k||^2 = beta_k * M.

    Draw order is fixed (sines first, then gains) so streams replay exactly.
    """
    K = geometry.user_count
    P = cfg.path_count
    M = antenna_count
    sines = rng.uniform(-1.0, 1.0, size=(K, P))
    alphas = (rng.standard_normal((K, P)) + 1j * rng.standard_normal((K, P))) / np.sqrt(2.0)
    beta = pathloss_gain(geometry.distances_m, cfg.pathloss_offset_db, cfg.pathloss_slope)
    # (M, K, P) stack of steering vectors, already 1/sqrt(M)-normalized
    m = np.arange(M)
    steer = np.exp(-1j * np.pi * m[:, None, None] * sines[None, :, :]) / np.sqrt(M)
    h = np.einsum("mkp,kp->mk", steer, alphas) * np.sqrt(M / P)
    h *= np.sqrt(beta)[None, :]
    return ChannelSample(matrix=h, frame_index=frame_index)


def evolve_channel(prev: ChannelSample, rng: np.random.Generator,
                   geometry: UserGeometry, cfg: ChannelProcessConfig) -> ChannelSample:
    """One autoregressive step: rho*H + sqrt(1-rho^2)*innovation.

    The innovation is a fresh ``draw_channel`` output, so the per-entry
    second moment is preserved for any rho in [0, 1].
    """
    if prev.user_count != geometry.user_count:
        raise ValueError(
            f"sample has {prev.user_count} users but geometry has {geometry.user_count}")
    rho = cfg.ar_coefficient
    innov = draw_channel(rng, geometry, cfg, prev.antenna_count)
    h = rho * prev.matrix + np.sqrt(max(0.0, 1.0 - rho * rho)) * innov.matrix
    return ChannelSample(matrix=h, frame_index=prev.frame_index + 1)


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "big")


class ChannelStream:
    """Seeded per-frame sample source with frame-range bookkeeping.

    Splitting with :meth:`split` derives an independent child stream from the
    same root entropy and a label, with a disjoint frame-index offset, so
    training / burn-in / evaluation samples never alias.
    """

    def __init__(self, seed, geometry: UserGeometry, cfg: ChannelProcessConfig,
                 antenna_count: int, frame_offset: int = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._seed_seq = seed
        else:
            self._seed_seq = np.random.SeedSequence(seed)
        self._rng = np.random.default_rng(self._seed_seq)
        self.geometry = geometry
        self.cfg = cfg
        self.antenna_count = antenna_count
        self.frame_offset = frame_offset
        self.frames_drawn = 0

    def draw(self) -> ChannelSample:
        sample = draw_channel(self._rng, self.geometry, self.cfg,
                              self.antenna_count,
                              frame_index=self.frame_offset + self.frames_drawn)
        self.frames_drawn += 1
        return sample

    def draw_many(self, count: int) -> list[ChannelSample]:
        return [self.draw() for _ in range(count)]

    def evolve(self, prev: ChannelSample) -> ChannelSample:
        """AR-evolve ``prev`` using this stream's generator (delayed-CSI use)."""
        sample = evolve_channel(prev, self._rng, self.geometry, self.cfg)
        self.frames_drawn += 1
        return sample

    @property
    def frame_range(self) -> range:
        return range(self.frame_offset, self.frame_offset + self.frames_drawn)

    def split(self, label: str, frame_offset: int) -> "ChannelStream":
        entropy = self._seed_seq.entropy
        child = np.random.SeedSequence(entropy=entropy, spawn_key=(_label_key(label),))
        return ChannelStream(child, self.geometry, self.cfg,
                             self.antenna_count, frame_offset=frame_offset)

    def derive_rng(self, label: str) -> np.random.Generator:
        """Independent generator tied to this stream's root entropy."""
        child = np.random.SeedSequence(entropy=self._seed_seq.entropy,
                                       spawn_key=(_label_key(label),))
        return np.random.default_rng(child)


def assert_disjoint_frames(*streams: ChannelStream) -> None:
    """Raise if any two streams have overlapping frame-index ranges."""
    ranges = [s.frame_range for s in streams]
    for i in range(len(ranges)):
        for j in range(i + 1, len(ranges)):
            a, b = ranges[i], ranges[j]
            if len(a) and len(b) and a.start < b.stop and b.start < a.stop:
                raise AssertionError(f"channel frame ranges overlap: {a} vs {b}")


def write_samples_csv(samples, path) -> None:
    """Debug dump of channel samples as (frame_index, row, col, re, im) rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "row", "col", "re", "im"])
        for sample in samples:
            h = sample.matrix
            for r in range(h.shape[0]):
                for c in range(h.shape[1]):
                    writer.writerow([sample.frame_index, r, c,
                                     repr(h[r, c].real), repr(h[r, c].imag)])
