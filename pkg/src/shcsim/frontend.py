"""Quantized hybrid receive chain.

Models the uplink path: DFT-codebook analog combining through a beam
selection matrix, low-resolution ADCs under the additive-quantization-noise
model (a scalar gain plus uncorrelated Gaussian noise whose covariance
follows from the input power), then a digital combiner and per-user receive
beamformers.  Provides per-user SINR, instantaneous/average rates, and fast
batched rate evaluation in the beamspace domain.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .channel import ChannelSample, ula_steering

LN2 = float(np.log(2.0))

# Minimum mean-squared distortion of an optimal scalar quantizer for a
# unit-variance Gaussian input, per real dimension, indexed by bit width.
# Re-derived by the Lloyd-Max oracle in the test suite before freezing.
LLOYD_MAX_DISTORTION = {
    1: 0.3634,
    2: 0.1175,
    3: 0.03454,
    4: 0.009497,
    5: 0.002499,
}
_HIGH_RATE_COEFF = np.pi * np.sqrt(3.0) / 2.0


@dataclass(frozen=True)
class Codebook:
    """Analog combining codebook with unit-norm columns."""

    matrix: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.matrix, dtype=complex)
        object.__setattr__(self, "matrix", d)
        if d.ndim != 2:
            raise ValueError("codebook must be a 2-D matrix")
        norms = np.linalg.norm(d, axis=0)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("codebook columns must have unit norm")

    @property
    def antenna_count(self) -> int:
        return self.matrix.shape[0]

    @property
    def size(self) -> int:
        return self.matrix.shape[1]

    @cached_property
    def gram(self) -> np.ndarray:
        """Cached D^H D, reused by every quantization-noise evaluation."""
        return self.matrix.conj().T @ self.matrix

    def beamspace(self, h: np.ndarray) -> np.ndarray:
        """Project channel columns onto the codebook: D^H h."""
        return self.matrix.conj().T @ h


def dft_codebook(antenna_count: int, size: int) -> Codebook:
    """Uniform sine-domain beam grid: column n steers to -1 + (2n+1)/size.

    The half-step offset covers [-1, 1) symmetrically; for size equal to the
    antenna count the columns form a unitary DFT basis.
    """
    if size < 1 or size > antenna_count:
        raise ValueError(f"need 1 <= size <= antenna_count, got size={size}, M={antenna_count}")
    cols = [ula_steering(antenna_count, -1.0 + (2 * n + 1) / size) for n in range(size)]
    return Codebook(matrix=np.stack(cols, axis=1))


@dataclass(frozen=True)
class QuantizerModel:
    """Scalar ADC pair under the additive-quantization-noise abstraction."""

    bits: int
    distortion: float  # normalized MSE rho
    gain: float        # 1 - rho

    def __post_init__(self):
        if abs(self.gain - (1.0 - self.distortion)) > 1e-15:
            raise ValueError("quantizer gain must equal 1 - distortion")
        if not (0.0 < self.gain < 1.0):
            raise ValueError("quantizer gain must lie strictly in (0, 1)")


def quantizer_params(bits: int) -> QuantizerModel:
    """Distortion/gain of an optimal ``bits``-bit scalar quantizer.

    Tabulated Lloyd-Max values for bits <= 5, the high-rate approximation
    (pi*sqrt(3)/2) * 2**(-2q) beyond that.
    """
    if int(bits) != bits or bits <= 0:
        raise ValueError(f"quantizer bit width must be a positive integer, got {bits}")
    bits = int(bits)
    if bits <= 5:
        rho = LLOYD_MAX_DISTORTION[bits]
    else:
        rho = _HIGH_RATE_COEFF * 2.0 ** (-2 * bits)
    return QuantizerModel(bits=bits, distortion=rho, gain=1.0 - rho)


@dataclass
class SelectionMatrix:
    """Codeword-to-chain assignment, relaxed (entries in [0,1]) or binary."""

    matrix: np.ndarray
    relaxed: bool = True

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.ndim != 2:
            raise ValueError("selection matrix must be 2-D (codewords x chains)")

    def validate(self, atol: float = 1e-9) -> "SelectionMatrix":
        c = self.matrix
        if np.any(c < -atol) or np.any(c > 1.0 + atol):
            raise ValueError("selection entries must lie in [0, 1]")
        if not self.relaxed:
            if not np.all((np.abs(c) <= atol) | (np.abs(c - 1.0) <= atol)):
                raise ValueError("binary selection entries must be 0 or 1")
            if not np.allclose(c.sum(axis=0), 1.0, atol=atol):
                raise ValueError("each chain must select exactly one codeword")
            if np.any(c.sum(axis=1) > 1.0 + atol):
                raise ValueError("each codeword may serve at most one chain")
        return self


def block_sizes(user_count: int, codebook_size: int, chain_count: int) -> tuple[int, int, int, int]:
    """Lengths of the stacked blocks (p, c, v, w)."""
    return (user_count,
            codebook_size * chain_count,
            chain_count * chain_count,
            chain_count * user_count)


def block_slices(user_count: int, codebook_size: int, chain_count: int) -> dict[str, slice]:
    """Index ranges of the p/c/v/w blocks inside a stacked design vector."""
    sizes = block_sizes(user_count, codebook_size, chain_count)
    bounds = np.cumsum((0,) + sizes)
    names = ("p", "c", "v", "w")
    return {name: slice(int(bounds[i]), int(bounds[i + 1])) for i, name in enumerate(names)}


@dataclass
class DesignPoint:
    """All optimization variables of the receive design.

    Stacking convention (used everywhere a flat vector is exchanged):
    ``[powers; vec(selection); vec(combiner); vec(beamformers)]`` with
    column-major (Fortran) vectorization, powers and selection real-valued.
    """

    powers: np.ndarray       # (K,) real, linear mW
    selection: np.ndarray    # (N, S) real in [0, 1] (binary at final output)
    combiner: np.ndarray     # (S, S) complex
    beamformers: np.ndarray  # (S, K) complex

    def __post_init__(self):
        self.powers = np.asarray(self.powers, dtype=float)
        self.selection = np.asarray(self.selection, dtype=float)
        self.combiner = np.asarray(self.combiner, dtype=complex)
        self.beamformers = np.asarray(self.beamformers, dtype=complex)
        K = self.powers.size
        N, S = self.selection.shape
        if self.combiner.shape != (S, S):
            raise ValueError("combiner must be (chains x chains)")
        if self.beamformers.shape != (S, K):
            raise ValueError("beamformers must be (chains x users)")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(user_count, codebook_size, chain_count)."""
        return (int(self.powers.size),
                int(self.selection.shape[0]), int(self.selection.shape[1]))

    def stack(self) -> np.ndarray:
        """Flatten to the documented [p; c; v; w] complex vector."""
        return np.concatenate([
            self.powers.astype(complex),
            self.selection.ravel(order="F").astype(complex),
            self.combiner.ravel(order="F"),
            self.beamformers.ravel(order="F"),
        ])

    @classmethod
    def unstack(cls, vec: np.ndarray, user_count: int, codebook_size: int,
                chain_count: int) -> "DesignPoint":
        sl = block_slices(user_count, codebook_size, chain_count)
        return cls(
            powers=vec[sl["p"]].real.copy(),
            selection=vec[sl["c"]].real.reshape((codebook_size, chain_count), order="F").copy(),
            combiner=vec[sl["v"]].reshape((chain_count, chain_count), order="F").copy(),
            beamformers=vec[sl["w"]].reshape((chain_count, user_count), order="F").copy(),
        )

    def copy(self) -> "DesignPoint":
        return DesignPoint(self.powers.copy(), self.selection.copy(),
                           self.combiner.copy(), self.beamformers.copy())

    def selection_matrix(self, relaxed: bool = True) -> SelectionMatrix:
        return SelectionMatrix(self.selection.copy(), relaxed=relaxed).validate()

    def to_json(self, path) -> None:
        """Warm-start file: flat [re, im] pairs in stacking order plus dims."""
        K = self.powers.size
        N, S = self.selection.shape
        vec = self.stack()
        payload = {
            "user_count": K, "codebook_size": N, "chain_count": S,
            "stacked": [[float(z.real), float(z.imag)] for z in vec],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def from_json(cls, path) -> "DesignPoint":
        with open(path) as fh:
            payload = json.load(fh)
        vec = np.array([complex(re, im) for re, im in payload["stacked"]])
        return cls.unstack(vec, payload["user_count"], payload["codebook_size"],
                           payload["chain_count"])


@dataclass(frozen=True)
class SystemModel:
    """Static receive-side context: codebook, quantizer, noise power (mW)."""

    codebook: Codebook
    quantizer: QuantizerModel
    sigma2: float

    def __post_init__(self):
        if self.sigma2 < 0.0:
            raise ValueError("noise power must be nonnegative")

    @property
    def gain(self) -> float:
        return self.quantizer.gain


def rf_combiner(codebook: Codebook, selection: np.ndarray) -> np.ndarray:
    """Effective analog combiner U = D C."""
    return codebook.matrix @ selection


def quantization_noise_cov(U: np.ndarray, H: np.ndarray, powers: np.ndarray,
                           sigma2: float, gain: float) -> np.ndarray:
    """Covariance of the additive quantization noise for a fixed channel.

    gain*(1-gain) * Diag(U^H H P H^H U + sigma2 * U^H U), where Diag zeroes
    the off-diagonal entries.  Always diagonal, real, nonnegative.
    """
    U = np.asarray(U, dtype=complex)
    H = np.asarray(H, dtype=complex)
    p = np.asarray(powers, dtype=float)
    if U.shape[0] != H.shape[0] or H.shape[1] != p.size:
        raise ValueError("dimension mismatch between combiner, channel, and powers")
    G = U.conj().T @ H  # (S, K)
    diag_sig = np.einsum("sk,k,sk->s", G, p, G.conj()).real
    diag_noise = sigma2 * np.einsum("ms,ms->s", U.conj(), U).real
    diag = gain * (1.0 - gain) * (diag_sig + diag_noise)
    assert np.all(diag >= -1e-12), "quantization noise covariance went negative"
    return np.diag(np.maximum(diag, 0.0))


def sinr(x: DesignPoint, sample: ChannelSample, system: SystemModel, k: int) -> float:
    """Per-user SINR through the quantized hybrid chain.

    Direct evaluation of the ratio: desired power over interference plus
    combined thermal noise plus quantization noise, all after the analog
    combiner, quantizer gain, digital combiner, and beamformer for user k.
    Returns 0 when the numerator is 0 and +inf if only the denominator
    vanishes (reachable only with zero noise, unit gain, single user).
    """
    H = sample.matrix
    gamma = system.gain
    U = rf_combiner(system.codebook, x.selection)
    T = x.combiner.conj().T @ (gamma * U.conj().T)  # (S, M)
    wk = x.beamformers[:, k]
    row = wk.conj() @ T  # (M,)
    gains = np.abs(row @ H) ** 2  # (K,)
    signal = x.powers[k] * gains[k]
    interference = float(np.dot(x.powers, gains) - x.powers[k] * gains[k])
    noise = system.sigma2 * float(np.vdot(row, row).real)
    Rq = quantization_noise_cov(U, H, x.powers, system.sigma2, gamma)
    u = x.combiner @ wk
    quant = float((u.conj() @ Rq @ u).real)
    denom = interference + noise + quant
    if signal == 0.0:
        return 0.0
    if denom <= 0.0:
        return float("inf")
    return float(signal / denom)


def instantaneous_rate(x: DesignPoint, sample: ChannelSample, system: SystemModel,
                       k: int) -> float:
    """Achievable rate log2(1 + SINR_k) in bps/Hz."""
    return float(np.log2(1.0 + sinr(x, sample, system, k)))


def average_rate(x: DesignPoint, samples, system: SystemModel, k: int) -> float:
    """Monte Carlo average of the instantaneous rate over channel samples."""
    samples = list(samples)
    if not samples:
        raise ValueError("average_rate needs at least one channel sample")
    return float(np.mean([instantaneous_rate(x, s, system, k) for s in samples]))


def _link_terms(x: DesignPoint, beamspace_h: np.ndarray, system: SystemModel):
    """Total and desired powers at each beamformer output.

    ``beamspace_h`` is D^H H, shaped (N, K) or batched (L, N, K).  Returns
    (total, desired) per user, where total covers signal + interference +
    thermal noise + quantization noise and rate_k = log2(total/(total-desired)).
    """
    gamma = system.gain
    sigma2 = system.sigma2
    C = x.selection
    p = x.powers
    G = np.einsum("ns,...nk->...sk", C, beamspace_h)
    Aq = np.einsum("...nk,k,...mk->...nm", beamspace_h, p, beamspace_h.conj())
    Aq = Aq + sigma2 * system.codebook.gram
    Mq = np.einsum("ns,...nm,mt->...st", C, Aq, C)
    diag = np.einsum("...ss->...s", Mq).real
    UW = x.combiner @ x.beamformers  # (S, K) columns u_k = V w_k
    quad_full = np.einsum("sk,...st,tk->...k", UW.conj(), Mq, UW).real
    quad_diag = np.einsum("...s,sk->...k", diag, np.abs(UW) ** 2)
    total = gamma * gamma * quad_full + gamma * (1.0 - gamma) * quad_diag
    phi = np.einsum("...sk,sk->...k", G.conj(), UW)  # g_k^H u_k
    desired = p * gamma * gamma * np.abs(phi) ** 2
    return total, desired


def _rates_from_terms(total: np.ndarray, desired: np.ndarray) -> np.ndarray:
    rest = total - desired
    out = np.zeros_like(total)
    pos = desired > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(pos & (rest > 0.0), total / np.where(rest > 0.0, rest, 1.0), 1.0)
        out = np.where(pos & (rest > 0.0), np.log2(ratio), out)
    out = np.where(pos & (rest <= 0.0), np.inf, out)
    return out


def user_rates(x: DesignPoint, beamspace_h: np.ndarray, system: SystemModel) -> np.ndarray:
    """Instantaneous rates of all users for one beamspace channel (N, K)."""
    total, desired = _link_terms(x, beamspace_h, system)
    return _rates_from_terms(total, desired)


def user_rates_batch(x: DesignPoint, beamspace_batch: np.ndarray,
                     system: SystemModel) -> np.ndarray:
    """Instantaneous rates, all users, batch of beamspace channels (L, N, K)."""
    total, desired = _link_terms(x, beamspace_batch, system)
    return _rates_from_terms(total, desired)


def default_start(user_count: int, codebook_size: int, chain_count: int,
                  p_max_mw) -> DesignPoint:
    """Interior starting design: half power, uniform selection, identity stages."""
    p_max = np.broadcast_to(np.asarray(p_max_mw, dtype=float), (user_count,))
    return DesignPoint(
        powers=p_max / 2.0,
        selection=np.full((codebook_size, chain_count), 1.0 / codebook_size),
        combiner=np.eye(chain_count, dtype=complex),
        beamformers=np.eye(chain_count, user_count, dtype=complex),
    )
