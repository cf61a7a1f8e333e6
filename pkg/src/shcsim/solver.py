"""Stochastic power minimization under per-user average-rate constraints.

The engine alternates three ingredients, one channel sample per frame:

* strongly convex per-user surrogates of the rate-deficit constraints,
  built from a running sample-average of rates and a recursively tracked
  stochastic gradient;
* convex subproblems over the relaxed, coordinate-decoupled design box,
  solved in the Lagrange dual where the minimizer is available per
  coordinate in closed form (a feasibility variant certifies whether the
  power-minimization subproblem admits a solution);
* a diminishing-step convex combination of iterates, followed at
  termination by rounding the relaxed beam selection to a valid binary
  assignment (one codeword per chain, each codeword used at most once).

Complex blocks use the conjugate (Wirtinger) gradient convention: eta is
the stacked vector with r(x + d) ~ r(x) + Re[eta^H d] for admissible d.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, TYPE_CHECKING

import numpy as np
import scipy.optimize

from . import instrumentation
from .channel import ChannelSample
from .frontend import (
    LN2,
    DesignPoint,
    SelectionMatrix,
    SystemModel,
    block_slices,
    default_start,
    dft_codebook,
    quantizer_params,
    user_rates,
    user_rates_batch,
)

if TYPE_CHECKING:  # pragma: no cover
    from .config import ExperimentConfig

BLOCK_NAMES = ("p", "c", "v", "w")


class ConfigurationError(ValueError):
    """Invalid dimension/capacity/schedule combination."""


class SubproblemError(RuntimeError):
    """Dual ascent failed to certify a solution; carries the best iterate."""

    def __init__(self, message: str, best_point: DesignPoint | None = None,
                 info: dict | None = None):
        super().__init__(message)
        self.best_point = best_point
        self.info = info or {}


# ---------------------------------------------------------------------------
# step-size schedules
# ---------------------------------------------------------------------------

@dataclass
class StepSchedules:
    """Iterate and gradient-tracking step sequences alpha(l), beta(l)."""

    alpha: Callable[[int], float]
    beta: Callable[[int], float]

    def validate(self, horizon: int) -> "StepSchedules":
        """Numeric checks over the run horizon: both sequences in (0, 1] and
        nonincreasing, with alpha/beta decreasing toward 0."""
        ls = np.arange(max(horizon, 2))
        a = np.array([self.alpha(int(l)) for l in ls])
        b = np.array([self.beta(int(l)) for l in ls])
        if np.any(a <= 0.0) or np.any(a > 1.0) or np.any(b <= 0.0) or np.any(b > 1.0):
            raise ConfigurationError("step sizes must lie in (0, 1]")
        if np.any(np.diff(a) > 1e-12) or np.any(np.diff(b) > 1e-12):
            raise ConfigurationError("step sizes must be nonincreasing")
        ratio = a / b
        if horizon >= 10 and not ratio[-1] < ratio[0]:
            raise ConfigurationError("alpha/beta must decrease toward 0 over the horizon")
        return self


def default_schedules() -> StepSchedules:
    """alpha(l) = 5/(5+l), beta(l) = (1+l)^(-2/3)."""
    return StepSchedules(alpha=lambda l: 5.0 / (5.0 + l),
                         beta=lambda l: (1.0 + l) ** (-2.0 / 3.0))


# ---------------------------------------------------------------------------
# rate gradients
# ---------------------------------------------------------------------------

def _chain_workspace(x: DesignPoint, beamspace_h: np.ndarray, system: SystemModel):
    """Shared per-(x, sample) quantities for rates and gradients."""
    gamma = system.gain
    sigma2 = system.sigma2
    C = x.selection
    p = x.powers
    G = C.T @ beamspace_h                                    # (S, K)
    Aq = (beamspace_h * p) @ beamspace_h.conj().T + sigma2 * system.codebook.gram
    AqC = Aq @ C                                             # (N, S)
    Mq = C.T @ AqC                                           # (S, S)
    MF = gamma * gamma * Mq
    idx = np.arange(Mq.shape[0])
    MF[idx, idx] += gamma * (1.0 - gamma) * np.diag(Mq)
    UW = x.combiner @ x.beamformers                          # (S, K)
    total = np.einsum("sk,st,tk->k", UW.conj(), MF, UW).real
    phi = np.einsum("sk,sk->k", G.conj(), UW)                # g_k^H u_k
    desired = p * gamma * gamma * np.abs(phi) ** 2
    return dict(gamma=gamma, sigma2=sigma2, C=C, p=p, G=G, Aq=Aq, AqC=AqC,
                MF=MF, UW=UW, total=total, phi=phi, desired=desired)


def rate_gradients(x: DesignPoint, beamspace_h: np.ndarray,
                   system: SystemModel) -> np.ndarray:
    """Stacked rate gradients eta_k for all users, shape (K, n).

    Chain rule through the full quantized link, including the dependence of
    the quantization-noise covariance on both the powers and the selection.
    Real blocks (p, c) carry plain partials; complex blocks (v, w) carry
    2 * d/d(conj), so first-order changes are Re[eta^H dx].
    """
    if system.sigma2 <= 0.0:
        raise ValueError("rate gradients require positive noise power")
    K, N, S = x.dims
    ws = _chain_workspace(x, beamspace_h, system)
    gamma, C, p = ws["gamma"], ws["C"], ws["p"]
    G, Aq, AqC, MF, UW, phi = ws["G"], ws["Aq"], ws["AqC"], ws["MF"], ws["UW"], ws["phi"]
    total, desired = ws["total"], ws["desired"]
    rest = total - desired
    if np.any(total <= 0.0) or np.any(rest <= 0.0):
        raise ValueError("degenerate design point: zero received power at some user")

    g2 = gamma * gamma
    gq = gamma * (1.0 - gamma)
    absG2 = np.abs(G) ** 2                                   # (S, K)
    PhiAll = G.conj().T @ UW                                 # (K, K): g_i^H u_k
    ReAqC = AqC.real                                         # (N, S), C real
    Vh = x.combiner.conj().T
    instrumentation.tally("gradient_evals", 1,
                          flops=float(K * (K + N * S + S * S + S * K)))

    sl = block_slices(K, N, S)
    n = sl["w"].stop
    out = np.zeros((K, n), dtype=complex)
    for k in range(K):
        u = UW[:, k]
        w = x.beamformers[:, k]
        au2 = np.abs(u) ** 2
        # p block
        dT_p = g2 * np.abs(PhiAll[:, k]) ** 2 + gq * (absG2.T @ au2)
        dD_p = np.zeros(K)
        dD_p[k] = g2 * np.abs(phi[k]) ** 2
        # c block
        ACu = Aq @ (C @ u)                                   # (N,)
        gT_C = 2.0 * g2 * np.real(np.outer(ACu, u.conj())) + 2.0 * gq * ReAqC * au2[None, :]
        gD_C = 2.0 * p[k] * g2 * np.real(np.outer(phi[k] * beamspace_h[:, k], u.conj()))
        # v block
        MFu = MF @ u
        gT_V = 2.0 * np.outer(MFu, w.conj())
        gD_V = 2.0 * p[k] * g2 * phi[k] * np.outer(G[:, k], w.conj())
        # w block (only column k of W enters user k's rate)
        gT_w = 2.0 * (Vh @ MFu)
        gD_w = 2.0 * p[k] * g2 * phi[k] * (Vh @ G[:, k])

        inv_t = 1.0 / total[k]
        inv_e = 1.0 / rest[k]
        out[k, sl["p"]] = (dT_p * inv_t - (dT_p - dD_p) * inv_e) / LN2
        out[k, sl["c"]] = ((gT_C * inv_t - (gT_C - gD_C) * inv_e) / LN2).ravel(order="F")
        out[k, sl["v"]] = ((gT_V * inv_t - (gT_V - gD_V) * inv_e) / LN2).ravel(order="F")
        gw = np.zeros((S, K), dtype=complex)
        gw[:, k] = (gT_w * inv_t - (gT_w - gD_w) * inv_e) / LN2
        out[k, sl["w"]] = gw.ravel(order="F")
    return out


def rate_gradient(x: DesignPoint, sample: ChannelSample, system: SystemModel,
                  k: int) -> np.ndarray:
    """Stacked gradient of user k's instantaneous rate at x for one sample."""
    beamspace_h = system.codebook.beamspace(sample.matrix)
    return rate_gradients(x, beamspace_h, system)[k]


# ---------------------------------------------------------------------------
# surrogate state
# ---------------------------------------------------------------------------

@dataclass
class SurrogateState:
    """Per-user quadratic surrogate models around the current iterate.

    Holds the recursively tracked constraint gradients kappa_k (gradients of
    target-minus-rate), the rate sample averages at the anchor point, the
    strong-convexity constants, and the retained beamspace channel samples.
    """

    system: SystemModel
    targets: np.ndarray            # (K,) rate targets, bps/Hz
    convexity: np.ndarray          # (K,) tau_k > 0
    beta: Callable[[int], float]
    capacity: int
    recursive_rates: bool = False
    frozen_mask: np.ndarray | None = None  # (n,) bool, True = coordinate frozen
    schedule_offset: int = 0       # subtracted from the beta schedule index
    iteration: int = 0
    anchor: DesignPoint | None = None
    anchor_vec: np.ndarray | None = None
    tracked_gradients: np.ndarray | None = None  # (K, n)
    sample_avg_rates: np.ndarray | None = None   # (K,)
    _store: np.ndarray | None = None             # (capacity, N, K) beamspace

    def __post_init__(self):
        self.targets = np.atleast_1d(np.asarray(self.targets, dtype=float))
        self.convexity = np.atleast_1d(np.asarray(self.convexity, dtype=float))
        if np.any(self.convexity <= 0.0):
            raise ConfigurationError("convexity constants must be positive")

    @property
    def user_count(self) -> int:
        return self.targets.size

    def stored_beamspace(self) -> np.ndarray:
        return self._store[: self.iteration]


def update_surrogate(state: SurrogateState, x_l: DesignPoint,
                     sample: ChannelSample) -> SurrogateState:
    """Absorb one channel sample at the current iterate.

    Appends the sample, re-averages all stored instantaneous rates at x_l,
    and blends the new stochastic constraint gradient (negated rate gradient)
    into the tracked gradients with the current beta step.
    """
    K, N, S = x_l.dims
    if state.tracked_gradients is None:
        n = block_slices(K, N, S)["w"].stop
        state.tracked_gradients = np.zeros((K, n), dtype=complex)
        state._store = np.empty((state.capacity, N, K), dtype=complex)
    if state.iteration >= state.capacity:
        raise ConfigurationError(
            f"sample store capacity {state.capacity} exceeded at frame {state.iteration}")
    beamspace_h = state.system.codebook.beamspace(sample.matrix)
    state._store[state.iteration] = beamspace_h
    schedule_index = max(state.iteration - state.schedule_offset, 0)
    state.iteration += 1

    if state.recursive_rates:
        rates_new = user_rates(x_l, beamspace_h, state.system)
        instrumentation.tally("rate_evals", 1)
        b = state.beta(schedule_index)
        if state.sample_avg_rates is None or schedule_index == 0:
            state.sample_avg_rates = rates_new
        else:
            state.sample_avg_rates = (1.0 - b) * state.sample_avg_rates + b * rates_new
    else:
        batch = state.stored_beamspace()
        rates = user_rates_batch(x_l, batch, state.system)
        instrumentation.tally("rate_evals", batch.shape[0])
        state.sample_avg_rates = rates.mean(axis=0)

    eta = rate_gradients(x_l, beamspace_h, state.system)
    g = -eta
    if state.frozen_mask is not None:
        g[:, state.frozen_mask] = 0.0
    b = state.beta(schedule_index)
    state.tracked_gradients = (1.0 - b) * state.tracked_gradients + b * g
    state.anchor = x_l.copy()
    state.anchor_vec = x_l.stack()
    return state


def surrogate_values(state: SurrogateState, x: DesignPoint) -> np.ndarray:
    """All K surrogate constraint values at x."""
    return _surrogate_values_vec(state, x.stack())


def _surrogate_values_vec(state: SurrogateState, xvec: np.ndarray) -> np.ndarray:
    d = xvec - state.anchor_vec
    lin = (state.tracked_gradients.conj() @ d).real
    nd2 = float(np.vdot(d, d).real)
    return state.targets - state.sample_avg_rates + lin + state.convexity * nd2


def surrogate_value(state: SurrogateState, k: int, x: DesignPoint) -> float:
    """Surrogate constraint value for user k at x."""
    return float(surrogate_values(state, x)[k])


# ---------------------------------------------------------------------------
# dual subproblem machinery
# ---------------------------------------------------------------------------

@dataclass
class DualState:
    """Multipliers of the convex subproblems.

    rate_multipliers and row_multipliers are nonnegative; the column-sum
    constraint is an equality so its multipliers are sign-free.
    """

    rate_multipliers: np.ndarray    # (K,)
    row_multipliers: np.ndarray     # (N,)
    column_multipliers: np.ndarray  # (S,)

    @classmethod
    def zeros(cls, K: int, N: int, S: int) -> "DualState":
        return cls(np.zeros(K), np.zeros(N), np.zeros(S))

    def copy(self) -> "DualState":
        return DualState(self.rate_multipliers.copy(), self.row_multipliers.copy(),
                         self.column_multipliers.copy())


@dataclass
class FeasibleBox:
    """Coordinate-decoupled relaxed feasible set.

    Powers in [0, p_max], selection entries in [0, 1], digital combiner and
    beamformers unconstrained.  The selection coupling constraints (column
    sums equal one, row sums at most one) are handled by multipliers, not
    here.  Frozen coordinates are pinned to the anchor's values.
    """

    p_max: np.ndarray
    frozen_mask: np.ndarray | None = None


@dataclass
class SubproblemSettings:
    subgradient_iters: int = 60
    max_iters: int = 5000
    step_scale: float = 1.0
    tolerance: float = 1e-7
    constraint_tol: float = 1e-6
    gap_tol: float = 1e-6
    polish: bool = True
    polish_maxiter: int = 400


def project_scalar_quadratic(a: float, b: complex, lower: float | None,
                             upper: float | None) -> complex:
    """Minimize a*|x|^2 + Re[b*x] over a box (or all of C when unbounded).

    The unconstrained minimizer is -conj(b)/(2a); with bounds the problem is
    real and the minimizer is clamped.
    """
    if a <= 0.0:
        raise ValueError("quadratic coefficient must be positive")
    xstar = -np.conj(b) / (2.0 * a)
    if lower is None and upper is None:
        return xstar
    return complex(min(max(xstar.real, lower), upper))


class _QuadraticDual:
    """Per-coordinate closed-form inner minimizer of the subproblem Lagrangian.

    For multipliers (lam, mu, delta) the Lagrangian separates per coordinate
    into a*|x_t - anchor_t|^2 + Re[kbar_t^* (x_t - anchor_t)] + ell_t*x_t with
    a = sum_k lam_k tau_k, kbar = sum_k lam_k kappa_k, and ell carrying the
    power objective weight and the selection coupling terms mu_i + delta_j.
    """

    A_MIN = 1e-13
    BAD_VALUE = -1e100

    def __init__(self, state: SurrogateState, box: FeasibleBox, objective_weight: float):
        K, N, S = state.anchor.dims
        self.K, self.N, self.S = K, N, S
        self.sl = block_slices(K, N, S)
        self.n = self.sl["w"].stop
        self.anchor = state.anchor_vec
        self.kappa = state.tracked_gradients
        self.const = state.targets - state.sample_avg_rates
        self.tau = state.convexity
        self.p_max = np.broadcast_to(np.asarray(box.p_max, dtype=float), (K,))
        self.objective_weight = objective_weight
        mask = box.frozen_mask
        if mask is None and state.frozen_mask is not None:
            mask = state.frozen_mask
        self.frozen = mask
        self._flops_per_eval = float((K + 2) * self.n)

    def theta_split(self, theta: np.ndarray):
        K, N = self.K, self.N
        return theta[:K], theta[K:K + N], theta[K + N:]

    def evaluate(self, lam: np.ndarray, mu: np.ndarray, delta: np.ndarray):
        """Closed-form inner minimum: returns (x, fhat, dual_value, grads)."""
        instrumentation.tally("dual_inner_evals", 1, flops=self._flops_per_eval)
        K, N, S = self.K, self.N, self.S
        sl = self.sl
        a = float(lam @ self.tau)
        kbar = lam @ self.kappa
        ell_c = (mu[:, None] + delta[None, :]).ravel(order="F")

        x = self.anchor.copy()
        degenerate = a < self.A_MIN
        if not degenerate:
            inv2a = 0.5 / a
            xp = self.anchor[sl["p"]].real - (kbar[sl["p"]].real + self.objective_weight) * inv2a
            xc = self.anchor[sl["c"]].real - (kbar[sl["c"]].real + ell_c) * inv2a
            x[sl["p"]] = np.clip(xp, 0.0, self.p_max)
            x[sl["c"]] = np.clip(xc, 0.0, 1.0)
            x[sl["v"]] = self.anchor[sl["v"]] - kbar[sl["v"]] * inv2a
            x[sl["w"]] = self.anchor[sl["w"]] - kbar[sl["w"]] * inv2a
            bad = False
        else:
            # Linear inner problem: pick box endpoints by the sign of the
            # linear coefficient, keep the anchor on ties.  Unbounded blocks
            # with a nonzero coefficient make the dual value -inf.
            lin_p = kbar[sl["p"]].real + self.objective_weight
            xp = np.where(lin_p > 0.0, 0.0,
                          np.where(lin_p < 0.0, self.p_max, self.anchor[sl["p"]].real))
            lin_c = kbar[sl["c"]].real + ell_c
            xc = np.where(lin_c > 0.0, 0.0,
                          np.where(lin_c < 0.0, 1.0, self.anchor[sl["c"]].real))
            x[sl["p"]] = xp
            x[sl["c"]] = xc
            lin_vw = np.concatenate([kbar[sl["v"]], kbar[sl["w"]]])
            bad = bool(np.max(np.abs(lin_vw), initial=0.0) > 1e-12)
        if self.frozen is not None:
            x[self.frozen] = self.anchor[self.frozen]

        d = x - self.anchor
        lin_terms = (self.kappa.conj() @ d).real
        nd2 = float(np.vdot(d, d).real)
        fhat = self.const + lin_terms + self.tau * nd2

        c_mat = x[sl["c"]].real.reshape((N, S), order="F")
        row_resid = c_mat.sum(axis=1) - 1.0
        col_resid = c_mat.sum(axis=0) - 1.0
        primal_obj = self.objective_weight * float(x[sl["p"]].real.sum())
        value = primal_obj + float(lam @ fhat) + float(mu @ row_resid) + float(delta @ col_resid)
        if degenerate and bad:
            value = self.BAD_VALUE
        return x, fhat, value, (fhat, row_resid, col_resid)


def _project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u * np.arange(1, v.size + 1) > css)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _subgradient_ascent(dual: _QuadraticDual, theta0: np.ndarray, iters: int,
                        step_scale: float, tolerance: float, simplex: bool):
    """Projected subgradient ascent with diminishing steps s0/sqrt(t)."""
    K, N = dual.K, dual.N
    theta = theta0.copy()
    best_val = -np.inf
    best_theta = theta.copy()
    evals = 0
    for t in range(1, iters + 1):
        lam, mu, delta = dual.theta_split(theta)
        _, _, val, (g_lam, g_mu, g_delta) = dual.evaluate(lam, mu, delta)
        evals += 1
        if val > best_val:
            best_val = val
            best_theta = theta.copy()
        step = step_scale / math.sqrt(t)
        new = theta.copy()
        new[:K] = new[:K] + step * g_lam
        if simplex:
            new[:K] = _project_simplex(new[:K])
        else:
            new[:K] = np.maximum(new[:K], 0.0)
        new[K:K + N] = np.maximum(new[K:K + N] + step * g_mu, 0.0)
        new[K + N:] = new[K + N:] + step * g_delta
        moved = np.linalg.norm(new - theta) / step
        theta = new
        if moved < tolerance:
            break
    return best_theta, best_val, evals


def solve_subproblem(state: SurrogateState, box: FeasibleBox,
                     warm: DualState | None = None,
                     settings: SubproblemSettings | None = None):
    """Minimize total power subject to all surrogate constraints over the box.

    Dual ascent: a short projected-subgradient phase localizes the
    multipliers, then a quasi-Newton polish (bound-constrained) drives the
    dual gradient to zero; the primal point is recovered from the closed-form
    inner minimizer.  Strong duality of the convex subproblem makes the
    recovered point optimal once the duality gap and constraint violations
    are below tolerance.

    Returns a result object with the design point, multipliers, objective,
    and certification diagnostics.  Raises SubproblemError (carrying the best
    iterate) if certification fails after retries.
    """
    settings = settings or SubproblemSettings()
    dual = _QuadraticDual(state, box, objective_weight=1.0)
    K, N, S = dual.K, dual.N, dual.S
    if warm is not None:
        theta0 = np.concatenate([warm.rate_multipliers, warm.row_multipliers,
                                 warm.column_multipliers])
    else:
        theta0 = np.zeros(K + N + S)

    total_evals = 0

    def negdual(theta):
        lam, mu, delta = dual.theta_split(theta)
        _, _, val, (g_lam, g_mu, g_delta) = dual.evaluate(lam, mu, delta)
        return -val, -np.concatenate([g_lam, g_mu, g_delta])

    bounds = [(0.0, None)] * (K + N) + [(None, None)] * S

    theta, best_val, evals = _subgradient_ascent(
        dual, theta0, settings.subgradient_iters, settings.step_scale,
        settings.tolerance, simplex=False)
    total_evals += evals

    attempts = 0
    while True:
        if settings.polish:
            res = scipy.optimize.minimize(
                negdual, theta, jac=True, method="L-BFGS-B", bounds=bounds,
                options=dict(maxiter=settings.polish_maxiter, ftol=1e-16,
                             gtol=1e-12, maxcor=30))
            total_evals += int(res.nfev)
            if -res.fun >= best_val:
                theta = res.x
                best_val = -res.fun
        lam, mu, delta = dual.theta_split(theta)
        x, fhat, dual_value, _ = dual.evaluate(lam, mu, delta)
        total_evals += 1
        objective = float(x[dual.sl["p"]].real.sum())
        violation = float(np.max(fhat, initial=0.0))
        gap = abs(objective - dual_value) / max(1.0, abs(objective))
        certified = violation <= settings.constraint_tol and gap <= settings.gap_tol
        if certified or attempts >= 2:
            break
        attempts += 1
        # escalate: long diminishing-step phase from the best multipliers
        extra = min(settings.max_iters, 1500 * attempts)
        theta, best_val, evals = _subgradient_ascent(
            dual, theta, extra, settings.step_scale / (2.0 ** attempts),
            settings.tolerance, simplex=False)
        total_evals += evals

    point = DesignPoint.unstack(x, K, N, S)
    result = SubproblemSolution(
        point=point,
        multipliers=DualState(lam.copy(), mu.copy(), delta.copy()),
        objective=objective,
        dual_value=float(dual_value),
        max_violation=violation,
        duality_gap=float(gap),
        iterations=total_evals,
    )
    if not certified:
        raise SubproblemError(
            f"dual ascent not certified: violation={violation:.3e}, gap={gap:.3e}",
            best_point=point, info=result.__dict__)
    return result


def solve_feasibility(state: SurrogateState, box: FeasibleBox,
                      warm: DualState | None = None,
                      settings: SubproblemSettings | None = None):
    """Minimize the worst surrogate constraint value over the box.

    Same dual machinery with the rate multipliers confined to the probability
    simplex (the scalar slack's stationarity) and no power objective weight.
    The returned slack certifies the power subproblem: nonpositive means it
    is feasible.
    """
    settings = settings or SubproblemSettings()
    dual = _QuadraticDual(state, box, objective_weight=0.0)
    K, N, S = dual.K, dual.N, dual.S
    if warm is not None and warm.rate_multipliers.sum() > 0:
        lam0 = _project_simplex(warm.rate_multipliers)
        theta0 = np.concatenate([lam0, warm.row_multipliers, warm.column_multipliers])
    else:
        theta0 = np.concatenate([np.full(K, 1.0 / K), np.zeros(N), np.zeros(S)])

    theta, best_val, total_evals = _subgradient_ascent(
        dual, theta0, settings.subgradient_iters, settings.step_scale,
        settings.tolerance, simplex=True)

    def negdual(theta):
        lam, mu, delta = dual.theta_split(theta)
        _, _, val, (g_lam, g_mu, g_delta) = dual.evaluate(lam, mu, delta)
        return -val, -np.concatenate([g_lam, g_mu, g_delta])

    if settings.polish:
        constraints = [{"type": "eq",
                        "fun": lambda t: t[:K].sum() - 1.0,
                        "jac": lambda t: np.concatenate([np.ones(K), np.zeros(N + S)])}]
        bounds = [(0.0, 1.0)] * K + [(0.0, None)] * N + [(None, None)] * S
        res = scipy.optimize.minimize(
            negdual, theta, jac=True, method="SLSQP", bounds=bounds,
            constraints=constraints,
            options=dict(maxiter=settings.polish_maxiter, ftol=1e-14))
        total_evals += int(res.nit)
        if -res.fun >= best_val and np.isfinite(res.fun):
            lam = _project_simplex(res.x[:K])
            theta = np.concatenate([lam, np.maximum(res.x[K:K + N], 0.0), res.x[K + N:]])
            best_val = -res.fun

    lam, mu, delta = dual.theta_split(theta)
    x, fhat, dual_value, _ = dual.evaluate(lam, mu, delta)
    total_evals += 1
    xi = float(np.max(fhat))
    point = DesignPoint.unstack(x, K, N, S)
    return FeasibilitySolution(
        xi=xi,
        point=point,
        multipliers=DualState(lam.copy(), mu.copy(), delta.copy()),
        dual_value=float(dual_value),
        iterations=total_evals,
    )


@dataclass
class SubproblemSolution:
    point: DesignPoint
    multipliers: DualState
    objective: float
    dual_value: float
    max_violation: float
    duality_gap: float
    iterations: int


@dataclass
class FeasibilitySolution:
    xi: float
    point: DesignPoint
    multipliers: DualState
    dual_value: float
    iterations: int


# ---------------------------------------------------------------------------
# iterate update and binary rounding
# ---------------------------------------------------------------------------

def smooth_update(x_l: DesignPoint, x_bar: DesignPoint, alpha: float) -> DesignPoint:
    """Convex combination (1-alpha)*x_l + alpha*x_bar, blockwise."""
    return DesignPoint(
        powers=(1.0 - alpha) * x_l.powers + alpha * x_bar.powers,
        selection=(1.0 - alpha) * x_l.selection + alpha * x_bar.selection,
        combiner=(1.0 - alpha) * x_l.combiner + alpha * x_bar.combiner,
        beamformers=(1.0 - alpha) * x_l.beamformers + alpha * x_bar.beamformers,
    )


def _bisect_threshold(column: np.ndarray, available: np.ndarray) -> int:
    """Find the row that survives thresholding a relaxed selection column.

    Bisects the threshold in [0, 1] until exactly one available entry exceeds
    it; falls back to the first maximum when ties make that count
    unreachable (all remaining mass equal or zero).
    """
    masked = np.where(available, column, -np.inf)
    lo, hi = 0.0, 1.0
    for _ in range(60):
        eps = 0.5 * (lo + hi)
        count = int(np.sum(masked > eps))
        if count == 1:
            break
        if count > 1:
            lo = eps
        else:
            hi = eps
    above = masked > eps
    if int(above.sum()) == 1:
        return int(np.argmax(above))
    return int(np.argmax(masked))


def round_selection(c_relaxed: np.ndarray) -> SelectionMatrix:
    """Round a relaxed selection to a valid binary assignment.

    Per column, a bisected threshold keeps exactly one codeword.  When two
    chains claim the same codeword, the larger relaxed value wins and the
    loser re-thresholds with that codeword excluded, until the assignment
    satisfies both coupling constraints.
    """
    c = np.asarray(c_relaxed, dtype=float)
    if c.ndim != 2:
        raise ValueError("selection must be 2-D (codewords x chains)")
    N, S = c.shape
    if N < S:
        raise ConfigurationError(
            f"cannot assign {S} chains distinct codewords from a codebook of {N}")
    if np.any(c < -1e-9) or np.any(c > 1.0 + 1e-9):
        raise ValueError("relaxed selection entries must lie in [0, 1]")
    c = np.clip(c, 0.0, 1.0)

    available = np.ones((N, S), dtype=bool)
    chosen = np.array([_bisect_threshold(c[:, j], available[:, j]) for j in range(S)])
    while True:
        rows, counts = np.unique(chosen, return_counts=True)
        conflicts = rows[counts > 1]
        if conflicts.size == 0:
            break
        for row in conflicts:
            claimants = np.nonzero(chosen == row)[0]
            winner = claimants[np.argmax(c[row, claimants])]
            for j in claimants:
                if j == winner:
                    continue
                available[row, j] = False
                chosen[j] = _bisect_threshold(c[:, j], available[:, j])

    out = np.zeros((N, S))
    out[chosen, np.arange(S)] = 1.0
    return SelectionMatrix(out, relaxed=False).validate()


# ---------------------------------------------------------------------------
# the main loop
# ---------------------------------------------------------------------------

@dataclass
class TraceRecord:
    iteration: int
    objective_mw: float
    objective_dbm: float
    max_constraint: float
    feasibility_mode: bool
    dual_iters: int


@dataclass
class SolveTrace:
    """Per-iteration progress log of one optimization run."""

    records: list[TraceRecord] = field(default_factory=list)

    def append(self, record: TraceRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ValueError("trace iterations must be strictly increasing")
        for v in (record.objective_mw, record.objective_dbm, record.max_constraint):
            if not np.isfinite(v):
                raise ValueError("trace records must be finite")
        self.records.append(record)

    @property
    def objectives_dbm(self) -> np.ndarray:
        return np.array([r.objective_dbm for r in self.records])

    @property
    def max_constraints(self) -> np.ndarray:
        return np.array([r.max_constraint for r in self.records])

    def write_csv(self, path, config_hash: str = "", seed: int | None = None) -> None:
        import csv as _csv

        with open(path, "w", newline="") as fh:
            writer = _csv.writer(fh)
            header = ["iteration", "objective_dbm_sum", "max_constraint",
                      "feasibility_mode", "dual_iters"]
            if config_hash:
                header += ["seed", "config_hash"]
            writer.writerow(header)
            for r in self.records:
                row = [r.iteration, repr(r.objective_dbm), repr(r.max_constraint),
                       int(r.feasibility_mode), r.dual_iters]
                if config_hash:
                    row += [seed, config_hash]
                writer.writerow(row)


def dbm(power_mw: float) -> float:
    return 10.0 * np.log10(max(power_mw, 1e-30))


def _frozen_mask_from_blocks(frozen_blocks, K: int, N: int, S: int) -> np.ndarray | None:
    if not frozen_blocks:
        return None
    bad = set(frozen_blocks) - set(BLOCK_NAMES)
    if bad:
        raise ConfigurationError(f"unknown frozen blocks: {sorted(bad)}")
    sl = block_slices(K, N, S)
    mask = np.zeros(sl["w"].stop, dtype=bool)
    for name in frozen_blocks:
        mask[sl[name]] = True
    return mask


def _assert_in_box(x: DesignPoint, p_max: np.ndarray, tol: float = 1e-9) -> None:
    if np.any(x.powers < -tol) or np.any(x.powers > p_max + tol):
        raise AssertionError("power iterate left the feasible box")
    if np.any(x.selection < -tol) or np.any(x.selection > 1.0 + tol):
        raise AssertionError("selection iterate left the feasible box")


def build_system(cfg: "ExperimentConfig") -> SystemModel:
    """Receive-side context from an experiment configuration."""
    return SystemModel(codebook=dft_codebook(cfg.M, cfg.N),
                       quantizer=quantizer_params(cfg.q),
                       sigma2=cfg.sigma2)


def run_rssca(cfg: "ExperimentConfig", channel_stream, *,
              frozen_blocks=(), x0: DesignPoint | None = None,
              system: SystemModel | None = None):
    """Full stochastic run: one channel sample per frame, surrogate update,
    feasibility check, power subproblem (or feasibility step), smoothed
    iterate update; at termination the relaxed beam selection is rounded to
    a binary assignment (optionally followed by a short re-optimization of
    the remaining blocks with the selection frozen).

    Returns (DesignPoint with binary selection, SolveTrace).
    """
    K, N, S = cfg.K, cfg.N, cfg.S
    if not (S <= N <= cfg.M) or K > S:
        raise ConfigurationError(
            f"need K <= S <= N <= M, got K={K}, S={S}, N={N}, M={cfg.M}")
    system = system or build_system(cfg)
    schedules = cfg.schedules or default_schedules()
    polish_frames = int(getattr(cfg, "rounding_polish_frames", 0))
    horizon = cfg.L_f + polish_frames
    schedules.validate(horizon)
    p_max = np.broadcast_to(np.asarray(cfg.p_max_mw, dtype=float), (K,))
    targets = np.broadcast_to(np.asarray(cfg.gamma_targets, dtype=float), (K,)).copy()
    tau = np.broadcast_to(np.asarray(cfg.tau, dtype=float), (K,)).copy()
    capacity = cfg.sample_capacity or horizon
    if capacity < horizon and not cfg.recursive_rates:
        raise ConfigurationError(
            f"sample capacity {capacity} below run horizon {horizon}")

    x = (x0 or default_start(K, N, S, p_max)).copy()
    frozen = _frozen_mask_from_blocks(frozen_blocks, K, N, S)
    settings = SubproblemSettings(**(cfg.dual_settings or {}))
    state = SurrogateState(system=system, targets=targets, convexity=tau,
                           beta=schedules.beta, capacity=capacity,
                           recursive_rates=cfg.recursive_rates,
                           frozen_mask=frozen)
    trace = SolveTrace()
    warm_feas: DualState | None = None
    warm_power: DualState | None = None
    box = FeasibleBox(p_max=p_max, frozen_mask=frozen)

    def one_frame(l: int, alpha_l: float, x: DesignPoint) -> DesignPoint:
        nonlocal warm_feas, warm_power
        sample = channel_stream.draw()
        update_surrogate(state, x, sample)
        feas = solve_feasibility(state, box, warm=warm_feas, settings=settings)
        warm_feas = feas.multipliers
        dual_iters = feas.iterations
        took_feasibility = feas.xi > 0.0
        if took_feasibility:
            x_bar = feas.point
        else:
            try:
                sol = solve_subproblem(state, box, warm=warm_power, settings=settings)
            except SubproblemError as err:
                raise SubproblemError(f"frame {l}: {err}", err.best_point, err.info) from err
            warm_power = sol.multipliers
            dual_iters += sol.iterations
            x_bar = sol.point
        x_next = smooth_update(x, x_bar, alpha_l)
        _assert_in_box(x_next, p_max)
        power = float(x_next.powers.sum())
        trace.append(TraceRecord(
            iteration=l,
            objective_mw=power,
            objective_dbm=dbm(power),
            max_constraint=float(np.max(_surrogate_values_vec(state, x_next.stack()))),
            feasibility_mode=took_feasibility,
            dual_iters=dual_iters,
        ))
        instrumentation.tally("iterations", 1)
        return x_next

    for l in range(cfg.L_f):
        x = one_frame(l, schedules.alpha(l), x)

    rounded = round_selection(x.selection)
    x.selection = rounded.matrix

    if polish_frames > 0 and "c" not in frozen_blocks:
        # Re-adapt the unfrozen blocks to the binary selection; both schedule
        # indices restart so the first polish frame fully refreshes the
        # tracked gradients at the rounded point.
        polish_frozen = set(frozen_blocks) | {"c"}
        mask = _frozen_mask_from_blocks(polish_frozen, K, N, S)
        state.frozen_mask = mask
        box = FeasibleBox(p_max=p_max, frozen_mask=mask)
        state.schedule_offset = cfg.L_f
        warm_feas = None
        warm_power = None
        for j in range(polish_frames):
            x = one_frame(cfg.L_f + j, schedules.alpha(j), x)

    x.selection = round_selection(x.selection).matrix
    x.selection_matrix(relaxed=False)  # assert final invariants
    return x, trace
