"""Lyapunov feedback control of the decision model.

The Lyapunov function is

    V(rho) = sum_r sigma_r p_r - eps/2 * sum_r p_r**2,    p_r = <b_r|rho|b_r>

and the controller picks ``u`` in ``[-u_bar, u_bar]`` minimizing the exact
conditional expectation of ``V`` after one interaction, where the
expectation runs over the interval length, the Kraus outcome and the
action measurement.

Reported values subtract ``min_r(sigma_r) - eps/2`` so that ``V`` is zero
at the target basis state (``raw=True`` gives the unshifted value).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.linalg import expm
from scipy.optimize import linprog

from .discretization import EXACT, PAPER, ActionProjectors, _check_mode, build_kraus, check_validity
from .errors import InfeasibleWeights, ValidationError
from .model import DecisionModel, basis_state, build_generator, build_hamiltonian, build_Pi, validate_belief

COUPLING_KINDS = ("rate_gain", "belief_tilt")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IntervalDistribution:
    """pmf of the interaction interval length over ``{1, ..., T_max}``."""

    probs: tuple

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValidationError("interval pmf must be a non-empty vector")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValidationError(f"interval pmf must be nonnegative and sum to 1, got {p.tolist()}")
        object.__setattr__(self, "probs", tuple(float(x) for x in p))

    @classmethod
    def uniform(cls, t_max: int) -> "IntervalDistribution":
        return cls(tuple([1.0 / t_max] * t_max))

    @classmethod
    def point(cls, tau: int) -> "IntervalDistribution":
        p = [0.0] * tau
        p[-1] = 1.0
        return cls(tuple(p))

    @property
    def t_max(self) -> int:
        return len(self.probs)

    @property
    def support(self) -> list[tuple[int, float]]:
        return [(t + 1, p) for t, p in enumerate(self.probs) if p > 0]

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.t_max, p=self.probs)) + 1


@dataclass(frozen=True)
class LyapunovSpec:
    sigma: tuple
    epsilon: float
    target: int  # zero-based basis index

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=float)
        if s.ndim != 1 or np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ValidationError("sigma must be a finite nonnegative vector")
        if not self.epsilon > 0:
            raise ValidationError(f"epsilon must be strictly positive, got {self.epsilon}")
        if not 0 <= self.target < s.size:
            raise ValidationError(f"target index {self.target} out of range for d={s.size}")
        object.__setattr__(self, "sigma", tuple(float(x) for x in s))

    @property
    def sigma_array(self) -> np.ndarray:
        return np.asarray(self.sigma)

    @property
    def offset(self) -> float:
        """Value subtracted from the raw function so its minimum over states is zero."""
        return min(self.sigma) - 0.5 * self.epsilon

    def vertex_values(self, raw: bool = True) -> np.ndarray:
        v = self.sigma_array - 0.5 * self.epsilon
        return v if raw else v - self.offset

    def to_dict(self) -> dict:
        return {"sigma": list(self.sigma), "epsilon": self.epsilon, "target": self.target}

    @classmethod
    def from_dict(cls, data: dict) -> "LyapunovSpec":
        return cls(tuple(data["sigma"]), float(data["epsilon"]), int(data["target"]))


@dataclass(frozen=True)
class ControlCoupling:
    """How the control ``u`` enters the cognitive rate matrix.

    ``rate_gain`` (default)
        ``gamma^u = cosh(gain * u) * gamma``: the signal intensity speeds up
        every cognitive transition; even in ``u``.
    ``belief_tilt``
        ``eta^u(s) ~ eta(s) exp(u g_s)`` feeds the belief part of the rate
        matrix; ``g`` defaults to the centered state index.
    """

    kind: str = "rate_gain"
    bound: float = 1.0
    gain: float = 1.0
    tilt: tuple | None = None

    def __post_init__(self):
        if self.kind not in COUPLING_KINDS:
            raise ValidationError(f"coupling kind must be one of {COUPLING_KINDS}, got {self.kind!r}")
        if not self.bound > 0:
            raise ValidationError(f"control bound must be positive, got {self.bound}")
        if self.tilt is not None:
            object.__setattr__(self, "tilt", tuple(float(x) for x in self.tilt))

    def tilt_vector(self, n: int) -> np.ndarray:
        if self.tilt is None:
            return np.arange(n) - (n - 1) / 2.0
        g = np.asarray(self.tilt)
        if g.size != n:
            raise ValidationError(f"tilt vector must have length n={n}, got {g.size}")
        return g

    def is_null(self, n: int) -> bool:
        if self.kind == "rate_gain":
            return self.gain == 0
        return bool(np.all(self.tilt_vector(n) == self.tilt_vector(n)[0]))


def _belief_rates(Pi_T: np.ndarray, eta: np.ndarray, phi: float, m: int) -> np.ndarray:
    """``(1-phi) Pi^T + phi K(eta)^T`` for ``eta`` of shape (..., n)."""
    n = eta.shape[-1]
    eye = np.eye(m)
    kt = eta[..., :, None, None, None] * eye[None, :, None, :]
    kt = np.broadcast_to(kt, eta.shape[:-1] + (n, m, n, m)).reshape(eta.shape[:-1] + (n * m, n * m))
    return (1.0 - phi) * Pi_T + phi * kt


@dataclass(frozen=True)
class ControlledModel:
    """Decision model plus belief, coupling and time step: everything the controller needs."""

    decision: DecisionModel
    eta: tuple
    coupling: ControlCoupling = field(default_factory=ControlCoupling)
    dt: float = 0.01
    mode: str = PAPER

    def __post_init__(self):
        e = validate_belief(self.eta, self.decision.dims.n)
        object.__setattr__(self, "eta", tuple(float(x) for x in e))
        _check_mode(self.mode)
        if not self.dt > 0:
            raise ValidationError(f"dt must be positive, got {self.dt}")

    @property
    def dims(self):
        return self.decision.dims

    @property
    def alpha(self) -> float:
        return self.decision.params.alpha

    @property
    def proj(self) -> ActionProjectors:
        return ActionProjectors(self.dims)

    def with_eta(self, eta) -> "ControlledModel":
        return replace(self, eta=tuple(eta))

    @cached_property
    def _Pi_T(self) -> np.ndarray:
        return build_Pi(self.decision.choice_probs(), self.dims).T

    def gamma_batch(self, u, eta=None) -> np.ndarray:
        """Rate matrices for an array of controls; ``eta`` may carry leading batch dims."""
        u = np.asarray(u, dtype=float)
        eta = np.asarray(self.eta if eta is None else eta, dtype=float)
        phi = self.decision.params.phi
        if self.coupling.kind == "rate_gain":
            base = _belief_rates(self._Pi_T, eta, phi, self.dims.m)
            lead = eta.shape[:-1]
            scale = np.cosh(self.coupling.gain * u)
            return scale[..., None, None] * base.reshape(lead + (1,) * (u.ndim - len(lead)) + base.shape[-2:])
        g = self.coupling.tilt_vector(self.dims.n)
        lead = eta.shape[:-1]
        e = eta.reshape(lead + (1,) * (u.ndim - len(lead)) + eta.shape[-1:])
        logits = np.log(np.clip(e, 1e-300, None)) + u[..., None] * g
        logits = np.where(e > 0, logits, -np.inf)
        logits = logits - logits.max(axis=-1, keepdims=True)
        w = np.exp(logits)
        return _belief_rates(self._Pi_T, w / w.sum(axis=-1, keepdims=True), phi, self.dims.m)

    def gamma(self, u: float = 0.0) -> np.ndarray:
        return self.gamma_batch(np.asarray(float(u)))

    def gamma_derivatives(self, u: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Closed-form ``(gamma, d gamma/du, d^2 gamma/du^2)`` at ``u``."""
        phi = self.decision.params.phi
        eta = np.asarray(self.eta)
        if self.coupling.kind == "rate_gain":
            k = self.coupling.gain
            base = _belief_rates(self._Pi_T, eta, phi, self.dims.m)
            return math.cosh(k * u) * base, k * math.sinh(k * u) * base, k * k * math.cosh(k * u) * base
        g = self.coupling.tilt_vector(self.dims.n)
        w = eta * np.exp(u * g)
        e = w / w.sum()
        mean = e @ g
        var = e @ (g - mean) ** 2
        d1 = e * (g - mean)
        d2 = e * ((g - mean) ** 2 - var)
        zero = np.zeros_like(self._Pi_T)
        return (
            _belief_rates(self._Pi_T, e, phi, self.dims.m),
            _belief_rates(zero, d1, phi, self.dims.m),
            _belief_rates(zero, d2, phi, self.dims.m),
        )

    def generator(self, u: float = 0.0):
        return build_generator(self.decision.params, self.gamma(u), self.dims)

    def kraus(self, u: float, T: int, mode: str | None = None):
        return build_kraus(self.generator(u), T, self.dt, mode or self.mode, u=u)

    def check_validity(self, t_max: int) -> None:
        """Validity bound at the worst case over ``u`` in ``{-u_bar, 0, u_bar}`` and ``T = t_max``."""
        for u in (-self.coupling.bound, 0.0, self.coupling.bound):
            check_validity(self.generator(u), t_max, self.dt)


# ---------------------------------------------------------------------------
# Lyapunov function and its exact conditional expectation
# ---------------------------------------------------------------------------


def lyapunov_value(spec: LyapunovSpec, rho, raw: bool = False) -> float:
    p = np.real(np.diagonal(np.asarray(rho)))
    v = float(spec.sigma_array @ p - 0.5 * spec.epsilon * (p @ p))
    return v if raw else v - spec.offset


def lyapunov_batch(spec: LyapunovSpec, rhos, raw: bool = False) -> np.ndarray:
    p = np.real(np.diagonal(np.asarray(rhos), axis1=-2, axis2=-1))
    v = p @ spec.sigma_array - 0.5 * spec.epsilon * np.sum(p * p, axis=-1)
    return v if raw else v - spec.offset


class ExpectationKernel:
    """Vectorized exact ``E[V(rho_next) | rho, u]``.

    Jump branches collapse onto basis states, so their contribution only
    needs the populations of ``rho``.  The no-jump branch needs the diagonal
    of ``M_0 rho M_0^dag``; ``M_0`` depends on ``u`` only through the
    diagonal outflow rates, so the ``rho``-dependent factors are computed
    once by :meth:`prepare` and reused for every candidate control.
    """

    def __init__(self, model: ControlledModel, piT: IntervalDistribution, mode: str | None = None):
        self.model = model
        self.piT = piT
        self.mode = _check_mode(mode or model.mode)
        self.alpha = model.alpha
        self.H = (1.0 - self.alpha) * build_hamiltonian(model.dims)
        self.masks = model.proj.masks.astype(float)
        self.d = model.dims.d
        self._ops = {}
        for tau, _ in piT.support:
            h = tau * model.dt
            if self.mode == EXACT:
                self._ops[tau] = expm(-1j * self.H * h)
            else:
                self._ops[tau] = np.eye(self.d) - 1j * h * self.H

    def prepare(self, rho) -> dict:
        """``rho``-only factors of the no-jump weights, keyed by interval length."""
        rho = np.asarray(rho, dtype=complex)
        prep = {"pop": np.real(np.diagonal(rho, axis1=-2, axis2=-1))}
        for tau, A in self._ops.items():
            if self.mode == PAPER:
                Ar = A @ rho
                prep[tau] = (
                    np.real(np.einsum("...ij,...ij->...i", Ar, A.conj())),
                    np.real(np.diagonal(Ar, axis1=-2, axis2=-1)),
                )
            else:
                prep[tau] = np.real(np.einsum("ij,...jk,ik->...ijk", A, rho, A.conj()))
        return prep

    def _stay_weights(self, prep, tau, decay):
        h = tau * self.model.dt
        if self.mode == PAPER:
            quad, lin = prep[tau]
            return quad - h * decay * lin + 0.25 * h * h * decay * decay * prep["pop"]
        s = np.sqrt(np.clip(1.0 - h * decay, 0.0, None))
        return np.einsum("...ijk,...j,...k->...i", prep[tau], s, s)

    def evaluate(self, rho, gam, sigma, epsilon: float, prep: dict | None = None) -> np.ndarray:
        """Expected raw ``V`` for batched ``rho`` (..., d, d) and rates ``gam`` (..., d, d)."""
        if prep is None:
            prep = self.prepare(rho)
        sigma = np.asarray(sigma, dtype=float)
        pop = prep["pop"]
        vert = sigma - 0.5 * epsilon
        decay = self.alpha * gam.sum(axis=-2)
        inflow = np.einsum("...ab,...b->...a", gam, pop)
        total = 0.0
        for tau, weight in self.piT.support:
            h = tau * self.model.dt
            jump_to = h * self.alpha * inflow
            w = self._stay_weights(prep, tau, decay)
            wa = w[..., None, :] * self.masks
            pa = wa.sum(axis=-1)
            lin = wa @ sigma
            quad = np.sum(wa * wa, axis=-1)
            safe = np.where(pa > 0, pa, 1.0)
            stay_v = np.sum(np.where(pa > 0, lin - 0.5 * epsilon * quad / safe, 0.0), axis=-1)
            val = jump_to @ vert + stay_v
            if self.mode == PAPER:
                val = val / (jump_to.sum(axis=-1) + pa.sum(axis=-1))
            total = total + weight * val
        return total

    def __call__(self, rho, u, spec: LyapunovSpec, eta=None, prep: dict | None = None) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        gam = self.model.gamma_batch(u, eta)
        return self.evaluate(rho, gam, spec.sigma_array, spec.epsilon, prep) - spec.offset


def expected_V(rho, u: float, spec: LyapunovSpec, model: ControlledModel, piT: IntervalDistribution,
               mode: str | None = None, raw: bool = False) -> float:
    """Exact enumeration over interval length, Kraus outcome and measured action."""
    rho = np.asarray(rho, dtype=complex)
    proj = model.proj
    gen = model.generator(u)
    total = 0.0
    for tau, w in piT.support:
        ks = build_kraus(gen, tau, model.dt, mode or model.mode, u=u)
        weights = np.real(np.einsum("kij,jl,kil->k", ks.ops, rho, ks.ops.conj()))
        z = weights.sum() if ks.mode == PAPER else 1.0
        acc = 0.0
        for M, wk in zip(ks.ops, weights):
            if wk <= 0:
                continue
            mid = M @ rho @ M.conj().T
            for a in range(model.dims.m):
                post = proj.project(mid, a)
                q = float(np.real(np.trace(post)))
                if q <= 0:
                    continue
                acc += q * lyapunov_value(spec, post / q, raw=True)
        total += w * acc / z
    return total if raw else total - spec.offset


# ---------------------------------------------------------------------------
# Feedback law
# ---------------------------------------------------------------------------

TIE_TOL = 1e-12
GOLDEN_ITERS = 30
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def control_grid(bound: float, grid_size: int) -> np.ndarray:
    if grid_size < 3 or grid_size % 2 == 0:
        raise ValidationError(f"grid_size must be odd and >= 3, got {grid_size}")
    grid = np.linspace(-bound, bound, grid_size)
    grid[grid_size // 2] = 0.0
    return grid


def _grid_winner(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Index of the tie-broken minimum along the last axis.

    Ties (within ``TIE_TOL``) prefer ``u = 0``, then the smallest ``|u|``,
    then the negative sign.
    """
    best = values.min(axis=-1, keepdims=True)
    tied = values <= best + TIE_TOL
    # rank: |u| ascending, negative before positive
    order = np.lexsort((grid >= 0, np.abs(grid)))
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    score = np.where(tied, rank, order.size + 1)
    return np.argmin(score, axis=-1)


def _golden(f, lo, hi, iters=GOLDEN_ITERS):
    """Vectorized golden-section search; ``f`` maps an array of points to values."""
    a, b = np.array(lo, dtype=float), np.array(hi, dtype=float)
    c = b - _INV_PHI * (b - a)
    e = a + _INV_PHI * (b - a)
    fc, fe = f(c), f(e)
    for _ in range(iters):
        left = fc < fe
        a = np.where(left, a, c)
        b = np.where(left, e, b)
        c_new = np.where(left, b - _INV_PHI * (b - a), e)
        e_new = np.where(left, c, a + _INV_PHI * (b - a))
        fnew = f(np.where(left, c_new, e_new))
        fc, fe = np.where(left, fnew, fe), np.where(left, fc, fnew)
        c, e = c_new, e_new
    return np.where(fc < fe, c, e), np.minimum(fc, fe)


def select_control_batch(kernel: ExpectationKernel, rhos, spec: LyapunovSpec, grid: np.ndarray,
                         eta=None, refine: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Argmin control for a batch of states; returns ``(u, E[V])`` per state.

    ``eta`` (batch, n) gives each state its own belief; ``None`` uses the model's.
    """
    rhos = np.asarray(rhos, dtype=complex)
    B = rhos.shape[0]
    bound = float(np.max(np.abs(grid)))
    etab = None if eta is None else np.asarray(eta, dtype=float)
    u_grid = np.broadcast_to(grid, (B, grid.size))
    prep = kernel.prepare(rhos)
    grid_prep = {k: (tuple(x[:, None] for x in v) if isinstance(v, tuple) else v[:, None]) for k, v in prep.items()}
    vals = kernel(None, u_grid, spec, etab, grid_prep)
    idx = _grid_winner(vals, grid)
    u_best = grid[idx]
    v_best = vals[np.arange(B), idx]
    if not refine:
        return u_best.copy(), v_best
    step = grid[1] - grid[0]
    lo = np.clip(u_best - step, -bound, bound)
    hi = np.clip(u_best + step, -bound, bound)

    def f(x):
        return kernel(None, x, spec, etab, prep)

    x, fx = _golden(f, lo, hi)
    better = fx < v_best - TIE_TOL
    return np.where(better, x, u_best), np.where(better, fx, v_best)


def select_control(rho, spec: LyapunovSpec, model: ControlledModel, piT: IntervalDistribution,
                   grid_size: int = 41, mode: str | None = None) -> float:
    """``argmin_u E[V(rho_next) | rho, u]`` over ``[-u_bar, u_bar]``: grid search plus golden-section refinement."""
    grid = control_grid(model.coupling.bound, grid_size)
    kernel = ExpectationKernel(model, piT, mode)
    u, _ = select_control_batch(kernel, np.asarray(rho, dtype=complex)[None], spec, grid)
    return float(u[0])


# ---------------------------------------------------------------------------
# Weight selection
# ---------------------------------------------------------------------------


@dataclass
class CurvatureReport:
    h: float
    curvature: np.ndarray  # per basis state
    slope: np.ndarray
    target: int

    def sign_ok(self, delta: float = 1e-6) -> bool:
        c = self.curvature
        others = np.delete(c, self.target)
        return bool(c[self.target] >= delta and np.all(others <= -delta))

    def violations(self, delta: float = 1e-6) -> list[str]:
        out = []
        for r, c in enumerate(self.curvature):
            if r == self.target and c < delta:
                out.append(f"target r={r}: curvature {c:.3e} < {delta:.1e}")
            elif r != self.target and c > -delta:
                out.append(f"r={r}: curvature {c:.3e} > -{delta:.1e}")
        return out

    def to_dict(self) -> dict:
        return {"h": self.h, "target": self.target, "curvature": self.curvature.tolist(),
                "slope": self.slope.tolist()}


def curvature_report(spec: LyapunovSpec, model: ControlledModel, piT: IntervalDistribution,
                     h: float = 1e-3, mode: str | None = None) -> CurvatureReport:
    """Central second differences of ``u -> E[V | |b_r><b_r|, u]`` at ``u = 0`` for every ``r``."""
    d = model.dims.d
    rhos = np.array([basis_state(r, d) for r in range(d)])
    kernel = ExpectationKernel(model, piT, mode)
    us = np.array([-h, 0.0, h])
    vals = kernel(rhos[:, None], np.broadcast_to(us, (d, 3)), spec)
    curv = (vals[:, 2] - 2 * vals[:, 1] + vals[:, 0]) / h**2
    slope = (vals[:, 2] - vals[:, 0]) / (2 * h)
    return CurvatureReport(h=h, curvature=curv, slope=slope, target=spec.target)


def _curvature_coefficients(model, piT, epsilon, h, mode):
    """Affine decomposition ``c_r(sigma) = A[r] @ sigma + b[r]``."""
    d = model.dims.d
    kernel = ExpectationKernel(model, piT, mode)
    rhos = np.array([basis_state(r, d) for r in range(d)])
    us = np.array([-h, 0.0, h])
    gam = model.gamma_batch(us)

    def curv(sigma, eps):
        v = kernel.evaluate(rhos[:, None], gam[None], sigma, eps)
        return (v[:, 2] - 2 * v[:, 1] + v[:, 0]) / h**2

    b = curv(np.zeros(d), epsilon)
    A = np.column_stack([curv(np.eye(d)[k], 0.0) for k in range(d)])
    return A, b


def select_sigma(model: ControlledModel, target: int, epsilon: float, piT: IntervalDistribution,
                 h: float = 1e-3, h_check: float = 1e-4, delta: float = 1e-6, margin: float = 1e-6,
                 mode: str | None = None) -> LyapunovSpec:
    """Weights giving a strict local minimum at ``u = 0`` for the target and strict maxima elsewhere.

    ``E[V]`` is affine in ``sigma``, so the curvature sign conditions are a
    linear program; the largest uniform curvature margin is sought inside
    ``sigma <= 1`` and the result is rescaled (with ``epsilon``) so that
    ``max(sigma) == 1``.
    """
    if not epsilon > 0:
        raise ValidationError(f"epsilon must be strictly positive, got {epsilon}")
    d = model.dims.d
    if not 0 <= target < d:
        raise ValidationError(f"target {target} out of range for d={d}")
    if model.coupling.is_null(model.dims.n):
        raise InfeasibleWeights("coupling has no control authority: every curvature is zero",
                                [f"r={r}: curvature 0" for r in range(d)])
    A, b = _curvature_coefficients(model, piT, epsilon, h, mode)
    upper = max(1.0, 2.0 * (epsilon + margin))
    extra = np.zeros(d)
    for _ in range(3):
        sigma, t = _solve_weight_lp(A, b, target, epsilon, margin, upper, extra)
        if sigma is None or t < delta:
            c = A @ sigma + b if sigma is not None else np.zeros(d)
            viol = CurvatureReport(h, c, np.zeros(d), target).violations(delta)
            raise InfeasibleWeights(
                f"no weights satisfy the curvature conditions for target {target} at epsilon={epsilon}",
                viol or ["linear program infeasible"],
            )
        spec = LyapunovSpec(tuple(sigma), epsilon, target)
        coarse = A @ sigma + b
        fine = curvature_report(spec, model, piT, h_check, mode).curvature
        disagree = np.abs(coarse - fine) > 0.1 * np.abs(fine)
        if not disagree.any():
            break
        extra = np.where(disagree, extra + np.abs(coarse - fine), extra)
    scale = 1.0 / max(spec.sigma)
    spec = LyapunovSpec(tuple(np.asarray(spec.sigma) * scale), epsilon * scale, target)
    check = curvature_report(spec, model, piT, h_check, mode)
    if not check.sign_ok(delta):
        raise InfeasibleWeights("weights failed the independent curvature re-check", check.violations(delta))
    return spec


def _solve_weight_lp(A, b, target, epsilon, margin, upper, extra):
    d = A.shape[0]
    # variables: sigma_0..sigma_{d-1}, t ; maximize t
    cost = np.zeros(d + 1)
    cost[-1] = -1.0
    rows, rhs = [], []
    for r in range(d):
        row = np.zeros(d + 1)
        if r == target:
            row[:d] = -A[r]
            row[-1] = 1.0
            rows.append(row)
            rhs.append(b[r] - extra[r])
        else:
            row[:d] = A[r]
            row[-1] = 1.0
            rows.append(row)
            rhs.append(-b[r] - extra[r])
    bounds = [(0.0, 0.0) if r == target else (epsilon + margin, upper) for r in range(d)]
    bounds.append((None, 1.0))
    res = linprog(cost, A_ub=np.array(rows), b_ub=np.array(rhs), bounds=bounds, method="highs")
    if res.status != 0:
        return None, -np.inf
    return res.x[:d], float(res.x[-1])


def select_sigma_for_action(model: ControlledModel, action: int, epsilon: float, piT: IntervalDistribution,
                            **kwargs) -> LyapunovSpec:
    """Try every basis state of the target action's subspace; keep the one with the best margin."""
    m = model.dims.m
    if not 0 <= action < m:
        raise ValidationError(f"target action {action} out of range for m={m}")
    best, best_margin, errors = None, -np.inf, []
    for state in range(model.dims.n):
        r = state * m + action
        try:
            spec = select_sigma(model, r, epsilon, piT, **kwargs)
        except InfeasibleWeights as exc:
            errors.extend(exc.violated)
            continue
        c = curvature_report(spec, model, piT, kwargs.get("h_check", 1e-4), kwargs.get("mode")).curvature
        marg = min(c[r], -np.max(np.delete(c, r)))
        # near-ties (relative 1e-3) keep the lowest state index for reproducibility
        if best is None or marg > best_margin * (1.0 + 1e-3):
            best, best_margin = spec, marg
    if best is None:
        raise InfeasibleWeights(f"no feasible weights for action {action}", errors)
    return best


# ---------------------------------------------------------------------------
# Control-input constraint report
# ---------------------------------------------------------------------------


def _kraus_second_derivatives(model: ControlledModel, u: float, T: int, mode: str):
    """Closed-form second derivative in ``u`` of every Kraus matrix (jump order of ``gamma(0) > 0``)."""
    gam, g1, g2 = model.gamma_derivatives(u)
    alpha = model.alpha
    h = T * model.dt
    d = model.dims.d
    gam0 = model.gamma(0.0)
    pairs = list(zip(*np.nonzero(gam0 > 0)))
    out = []
    col, col1, col2 = gam.sum(axis=0), g1.sum(axis=0), g2.sum(axis=0)
    if mode == PAPER:
        out.append(np.diag(-0.5 * h * alpha * col2).astype(complex))
    else:
        U = expm(-1j * (1 - alpha) * build_hamiltonian(model.dims) * h)
        s = np.sqrt(1 - h * alpha * col)
        s2 = -h * alpha * col2 / (2 * s) - (h * alpha * col1) ** 2 / (4 * s**3)
        out.append(U * s2[None, :])
    for a, bb in pairs:
        M = np.zeros((d, d), dtype=complex)
        g, d1, d2 = gam[a, bb], g1[a, bb], g2[a, bb]
        M[a, bb] = math.sqrt(h * alpha) * (d2 / (2 * math.sqrt(g)) - d1**2 / (4 * g**1.5))
        out.append(M)
    return np.array(out)


def check_control_constraints(model: ControlledModel, u_samples, T: int = 1, mode: str | None = None,
                              tol_complete: float = 1e-12, tol_distinct: float = 1e-9) -> dict:
    """Numeric report on the four control-input constraints; never raises on a violation.

    ``u_samples`` should be an evenly spaced grid for the smoothness check.
    """
    mode = mode or model.mode
    us = np.asarray(sorted(float(u) for u in u_samples))
    bound = model.coupling.bound
    if np.any(np.abs(us) > bound + 1e-15):
        raise ValidationError("u_samples must lie inside [-u_bar, u_bar]")
    report = {"mode": mode, "T": T}

    residuals = [float(model.kraus(u, T, mode).completeness_residual) for u in us]
    report["completeness"] = {
        "residual_per_u": dict(zip(us.tolist(), residuals)),
        "max_residual": max(residuals),
        "ok": max(residuals) <= tol_complete,
    }

    ks0 = model.kraus(0.0, T, mode)
    offd = []
    for M in ks0.ops:
        off = np.abs(M - np.diag(np.diagonal(M)))
        tot = np.linalg.norm(M)
        offd.append(float(np.linalg.norm(off) / tot) if tot > 0 else 0.0)
    report["diagonal_at_zero"] = {
        "offdiagonal_fraction": offd,
        "n_offdiagonal": int(sum(x > 1e-12 for x in offd)),
        "ok": all(x <= 1e-12 for x in offd),
    }

    c = np.abs(np.array([np.diagonal(M) for M in ks0.ops])) ** 2  # (K, d)
    d = model.dims.d
    missing = []
    for n1 in range(d):
        for n2 in range(n1 + 1, d):
            if not np.any(np.abs(c[:, n1] - c[:, n2]) > tol_distinct):
                missing.append((n1, n2))
    report["distinguishability"] = {"indistinguishable_pairs": missing, "ok": not missing}

    smooth = {"ok": True, "max_ratio": 0.0}
    if us.size >= 3:
        step = np.diff(us)
        if np.allclose(step, step[0], rtol=1e-9, atol=1e-15):
            du = step[0]
            mats = np.array([model.kraus(u, T, mode).ops for u in us])
            fd = np.abs(mats[2:] - 2 * mats[1:-1] + mats[:-2]) / du**2
            fine = np.linspace(us[0], us[-1], 10 * (us.size - 1) + 1)
            bound_arr = np.max([np.abs(_kraus_second_derivatives(model, u, T, mode)) for u in fine], axis=0)
            limit = 1.1 * bound_arr + 1e-9
            ratio = np.max(fd / limit[None])
            smooth = {"ok": bool(np.all(fd <= limit[None])), "max_ratio": float(ratio),
                      "max_second_difference": float(fd.max()), "analytic_bound": float(bound_arr.max())}
        else:
            smooth = {"ok": None, "reason": "u_samples not evenly spaced"}
    report["smoothness"] = smooth
    return report
