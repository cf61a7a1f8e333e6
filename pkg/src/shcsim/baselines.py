"""Comparison schemes: constrained variants of the stochastic run.

Each baseline freezes designated variable blocks and lets the solver adapt
the rest.  Beam selection for MM comes from a magnitude score over burn-in
samples, RANDOM draws it uniformly; ZF and MRC fix the digital stage from
the burn-in mean of the effective channel and keep selection and powers free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .channel import ChannelStream
from .config import ExperimentConfig
from .frontend import Codebook, DesignPoint, SelectionMatrix, default_start, rf_combiner
from .solver import ConfigurationError, SolveTrace, build_system, run_rssca

_FROZEN_BLOCKS = {
    "shc": frozenset(),
    "mm": frozenset({"c"}),
    "random": frozenset({"c"}),
    "zf": frozenset({"v", "w"}),
    "mrc": frozenset({"v", "w"}),
}


@dataclass(frozen=True)
class SchemeSpec:
    """Identifier plus the variable blocks the scheme keeps fixed."""

    scheme_id: str
    frozen_blocks: frozenset

    def __post_init__(self):
        if self.scheme_id not in _FROZEN_BLOCKS:
            raise ValueError(f"unknown scheme {self.scheme_id!r}")
        if self.frozen_blocks != _FROZEN_BLOCKS[self.scheme_id]:
            raise ValueError(
                f"{self.scheme_id} must freeze {sorted(_FROZEN_BLOCKS[self.scheme_id])}")

    @classmethod
    def of(cls, scheme_id: str) -> "SchemeSpec":
        return cls(scheme_id=scheme_id, frozen_blocks=_FROZEN_BLOCKS[scheme_id])


def mm_select(codebook: Codebook, samples, chain_count: int) -> SelectionMatrix:
    """Pick the highest-magnitude codewords.

    Scores each codeword by the sample mean of ||d_n^H H||^2 and assigns the
    top ``chain_count`` codewords to chains in descending score order.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("mm_select needs at least one channel sample")
    N = codebook.size
    if N < chain_count:
        raise ConfigurationError(f"codebook of {N} cannot feed {chain_count} chains")
    scores = np.zeros(N)
    for sample in samples:
        proj = codebook.beamspace(sample.matrix)  # (N, K)
        scores += np.sum(np.abs(proj) ** 2, axis=1)
    scores /= len(samples)
    order = np.argsort(-scores, kind="stable")[:chain_count]
    matrix = np.zeros((N, chain_count))
    matrix[order, np.arange(chain_count)] = 1.0
    return SelectionMatrix(matrix, relaxed=False).validate()


def random_select(rng: np.random.Generator, codebook_size: int,
                  chain_count: int) -> SelectionMatrix:
    """Assign each chain a distinct codeword uniformly at random."""
    if codebook_size < chain_count:
        raise ConfigurationError(
            f"codebook of {codebook_size} cannot feed {chain_count} chains")
    rows = rng.choice(codebook_size, size=chain_count, replace=False)
    matrix = np.zeros((codebook_size, chain_count))
    matrix[rows, np.arange(chain_count)] = 1.0
    return SelectionMatrix(matrix, relaxed=False).validate()


def zf_combiner(effective_channel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Interference-nulling digital stage for a fixed effective channel.

    V is the identity and W holds the conjugate-transposed left pseudo-inverse
    of the (chains x users) effective channel, so W^H Heff = I.
    """
    Heff = np.asarray(effective_channel, dtype=complex)
    S, K = Heff.shape
    if K > S:
        raise ValueError("effective channel must have at least as many chains as users")
    sv = np.linalg.svd(Heff, compute_uv=False)
    if sv[-1] <= max(S, K) * np.finfo(float).eps * sv[0]:
        _, _, piv = scipy.linalg.qr(Heff, pivoting=True)
        rank = int(np.sum(sv > max(S, K) * np.finfo(float).eps * sv[0]))
        raise ValueError(
            f"effective channel is rank deficient; dependent columns {sorted(piv[rank:])}")
    W = Heff @ np.linalg.inv(Heff.conj().T @ Heff)
    return np.eye(S, dtype=complex), W


def mrc_combiner(effective_channel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Matched-filter digital stage: unit-norm effective-channel columns."""
    Heff = np.asarray(effective_channel, dtype=complex)
    S, _ = Heff.shape
    norms = np.linalg.norm(Heff, axis=0)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise ValueError(f"effective channel has zero columns {zero.tolist()}")
    return np.eye(S, dtype=complex), Heff / norms[None, :]


def _burnin_effective_mean(codebook: Codebook, selection: np.ndarray,
                           samples, gain: float) -> np.ndarray:
    """Burn-in mean of the quantizer-scaled effective channel (S x K)."""
    U = rf_combiner(codebook, selection)
    acc = None
    for sample in samples:
        eff = gain * (U.conj().T @ sample.matrix)
        acc = eff if acc is None else acc + eff
    return acc / len(samples)


def run_baseline(spec: SchemeSpec, cfg: ExperimentConfig,
                 channel_stream: ChannelStream) -> tuple[DesignPoint, SolveTrace]:
    """Run one scheme: freeze its designated blocks, optimize the rest.

    Burn-in samples (for MM scoring and the ZF/MRC effective-channel mean)
    come from an independent substream so every scheme consumes the same
    training frames.  The random selection is seeded from the same substream.
    """
    system = build_system(cfg)
    x0 = default_start(cfg.K, cfg.N, cfg.S, cfg.p_max_mw)

    if spec.scheme_id == "shc":
        return run_rssca(cfg, channel_stream, system=system)

    burnin_stream = channel_stream.split("burnin", frame_offset=100_000)
    if spec.scheme_id in ("mm", "zf", "mrc"):
        burnin = burnin_stream.draw_many(cfg.burnin_samples)
        selection = mm_select(system.codebook, burnin, cfg.S)
    else:  # random
        selection = random_select(channel_stream.derive_rng("random-selection"),
                                  cfg.N, cfg.S)

    x0.selection = selection.matrix.copy()
    if spec.scheme_id in ("zf", "mrc"):
        heff = _burnin_effective_mean(system.codebook, selection.matrix, burnin,
                                      system.gain)
        V, W = zf_combiner(heff) if spec.scheme_id == "zf" else mrc_combiner(heff)
        x0.combiner = V
        x0.beamformers = W

    return run_rssca(cfg, channel_stream, frozen_blocks=spec.frozen_blocks,
                     x0=x0, system=system)
