"""Kraus-operator discretization of the decision model and action measurement.

One interaction interval of ``T`` base steps applies a single Kraus map
scaled by ``T*dt`` and then measures the action projectively.

Two Kraus modes are available:

``paper-faithful``
    ``M_0 = I - T dt (i (1-alpha) H + 1/2 G)`` and
    ``M_ab = sqrt(T dt alpha gamma_ab) |a><b|``, with ``G`` the diagonal
    outflow matrix.  Completeness fails at order ``(T dt)^2``, so outcome
    probabilities are renormalized.
``exact-cptp``
    Same jump operators; ``M_0 = exp(-i (1-alpha) H T dt) sqrt(I - sum M_ab^dag M_ab)``,
    which makes ``sum M^dag M = I`` hold to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .errors import DegenerateDistribution, ValidationError, ValidityBoundViolated, ZeroProbabilityOutcome
from .model import LindbladGenerator, ModelDims

PAPER = "paper-faithful"
EXACT = "exact-cptp"
MODES = (PAPER, EXACT)

PROB_FLOOR = 1e-12


def _check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


@dataclass(frozen=True)
class KrausSet:
    ops: np.ndarray  # (K, d, d); index 0 is the no-jump operator
    labels: tuple  # None for index 0, (a, b) for jump |a><b|
    dt: float
    T: int
    u: float
    mode: str
    completeness_residual: float

    @property
    def step(self) -> float:
        return self.T * self.dt

    @property
    def residual_constant(self) -> float:
        """``completeness_residual / (T dt)^2``."""
        return self.completeness_residual / self.step**2

    def __len__(self):
        return len(self.ops)


def drift_norm(gen: LindbladGenerator) -> float:
    """Spectral norm of ``i (1-alpha) H + 1/2 G``."""
    drift = 1j * (1.0 - gen.alpha) * gen.H + 0.5 * np.diag(gen.decay)
    return float(np.linalg.norm(drift, 2))


def check_validity(gen: LindbladGenerator, T: int, dt: float) -> float:
    """Return ``T dt * ||drift||``; raise if it is not below one."""
    if int(T) != T or T < 1:
        raise ValidationError(f"T must be a positive integer, got {T}")
    if not dt > 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    x = T * dt * drift_norm(gen)
    if not x < 1.0:
        raise ValidityBoundViolated(
            f"T*dt*||drift|| = {x:.4f} >= 1 (T={T}, dt={dt}); reduce dt or the interval length"
        )
    return x


def build_kraus(gen: LindbladGenerator, T: int, dt: float, mode: str = PAPER, u: float = 0.0) -> KrausSet:
    """Kraus operators for one interval of ``T`` steps.

    ``gen`` must already carry the control-dependent rates; ``u`` is only
    recorded on the result.
    """
    _check_mode(mode)
    check_validity(gen, T, dt)
    d = gen.d
    h = T * dt
    ops = [None]
    labels = [None]
    for a, b, rate in gen.jumps:
        M = np.zeros((d, d), dtype=complex)
        M[a, b] = np.sqrt(h * gen.alpha * rate)
        ops.append(M)
        labels.append((a, b))
    decay = gen.decay
    if mode == PAPER:
        ops[0] = np.eye(d) - h * (1j * (1.0 - gen.alpha) * gen.H + 0.5 * np.diag(decay))
    else:
        U = expm(-1j * (1.0 - gen.alpha) * gen.H * h)
        # sum of M_ab^dag M_ab over jumps is diagonal: h * decay
        ops[0] = U * np.sqrt(1.0 - h * decay)[None, :]
    ops = np.array(ops)
    resid = np.einsum("kji,kjl->il", ops.conj(), ops) - np.eye(d)
    return KrausSet(
        ops=ops,
        labels=tuple(labels),
        dt=float(dt),
        T=int(T),
        u=float(u),
        mode=mode,
        completeness_residual=float(np.abs(resid).max()),
    )


def _branch_weights(rho, ks: KrausSet) -> np.ndarray:
    return np.real(np.einsum("kij,jl,kil->k", ks.ops, rho, ks.ops.conj()))


def outcome_probs(rho, ks: KrausSet) -> tuple[np.ndarray, float]:
    """Probabilities ``Tr(M rho M^dag)`` normalized by their sum, and that sum."""
    w = np.clip(_branch_weights(np.asarray(rho, dtype=complex), ks), 0.0, None)
    total = float(w.sum())
    if total < PROB_FLOOR:
        raise DegenerateDistribution(f"total outcome probability {total:.3e}")
    return w / total, total


def apply_outcome(rho, ks: KrausSet, mu: int) -> np.ndarray:
    M = ks.ops[mu]
    out = M @ np.asarray(rho, dtype=complex) @ M.conj().T
    p = float(np.real(np.trace(out)))
    if p <= PROB_FLOOR:
        raise ZeroProbabilityOutcome(f"outcome {mu} ({ks.labels[mu]}) has probability {p:.3e}")
    out = out / p
    return 0.5 * (out + out.conj().T)


def average_map(rho, ks: KrausSet) -> np.ndarray:
    """Pre-measurement ensemble average ``sum_mu M rho M^dag``."""
    rho = np.asarray(rho, dtype=complex)
    out = np.einsum("kij,jl,kml->im", ks.ops, rho, ks.ops.conj())
    if ks.mode == PAPER:
        out = out / np.real(np.trace(out))
    return 0.5 * (out + out.conj().T)


@dataclass(frozen=True)
class ActionProjectors:
    """Projectors onto the action subspaces ``span{|E_l, a> : l}``."""

    dims: ModelDims

    @property
    def masks(self) -> np.ndarray:
        """(m, d) 0/1 integer array; row ``a`` is the diagonal of ``P_a``."""
        d, m = self.dims.d, self.dims.m
        mask = np.zeros((m, d), dtype=int)
        for r in range(d):
            mask[r % m, r] = 1
        return mask

    @property
    def projectors(self) -> np.ndarray:
        return np.array([np.diag(row) for row in self.masks])

    def probs(self, rho) -> np.ndarray:
        diag = np.real(np.diagonal(rho))
        return self.masks @ diag

    def project(self, rho, a: int) -> np.ndarray:
        keep = self.masks[a].astype(bool)
        out = np.zeros_like(rho)
        out[np.ix_(keep, keep)] = np.asarray(rho)[np.ix_(keep, keep)]
        return out


def measure_action(rho, proj: ActionProjectors, rng: np.random.Generator) -> tuple[int, np.ndarray]:
    """Sample an action with probability ``Tr(P_a rho)``; return it with the collapsed state."""
    rho = np.asarray(rho, dtype=complex)
    p = np.clip(proj.probs(rho), 0.0, None)
    total = p.sum()
    if total < PROB_FLOOR:
        raise DegenerateDistribution("all action probabilities vanish")
    a = int(rng.choice(len(p), p=p / total))
    post = proj.project(rho, a)
    post = post / np.real(np.trace(post))
    return a, 0.5 * (post + post.conj().T)


def step_interval(
    rho,
    gen: LindbladGenerator,
    T: int,
    dt: float,
    rng: np.random.Generator,
    proj: ActionProjectors,
    mode: str = PAPER,
    u: float = 0.0,
) -> tuple[int, int, np.ndarray]:
    """One interaction: sample a Kraus outcome, apply it, then measure the action."""
    ks = build_kraus(gen, T, dt, mode, u=u)
    p, _ = outcome_probs(rho, ks)
    mu = int(rng.choice(len(p), p=p))
    mid = apply_outcome(rho, ks, mu)
    a, post = measure_action(mid, proj, rng)
    return mu, a, post


def action_outcome_table(rho, ks: KrausSet, proj: ActionProjectors) -> list[tuple[int, int, float, np.ndarray]]:
    """Exact enumeration of ``(mu, a, probability, post-state)`` for one interaction."""
    rho = np.asarray(rho, dtype=complex)
    pmu, _ = outcome_probs(rho, ks)
    rows = []
    for mu, pm in enumerate(pmu):
        if pm <= 0:
            continue
        mid = apply_outcome(rho, ks, mu)
        pa = np.clip(proj.probs(mid), 0.0, None)
        for a, q in enumerate(pa):
            if q <= 0:
                continue
            post = proj.project(mid, a) / q
            rows.append((mu, a, pm * q, post))
    return rows


def one_step_error(gen: LindbladGenerator, dt: float, rho, mode: str = PAPER) -> float:
    """Frobenius distance between one Kraus step and the exact propagator over ``dt``."""
    from .model import exact_propagate

    ks = build_kraus(gen, 1, dt, mode)
    return float(np.linalg.norm(average_map(rho, ks) - exact_propagate(gen, rho, dt)))


def convergence_order(gen: LindbladGenerator, ladder, rhos, mode: str = PAPER) -> tuple[np.ndarray, float]:
    """Worst one-step error over ``rhos`` for each ``dt`` and the fitted log-log slope."""
    ladder = np.asarray(sorted(float(x) for x in ladder))
    if ladder.size < 3:
        raise ValidationError(f"need at least 3 time steps in the ladder, got {ladder.size}")
    if np.any(ladder <= 0) or np.unique(ladder).size != ladder.size:
        raise ValidationError("ladder time steps must be positive and distinct")
    errs = np.array([max(one_step_error(gen, dt, r, mode) for r in rhos) for dt in ladder])
    if np.any(errs <= 0):
        return errs, float("inf")
    slope = float(np.polyfit(np.log(ladder), np.log(errs), 1)[0])
    return errs, slope


def population_drift(rho, ks: KrausSet) -> np.ndarray:
    """Expected change of each basis population over one interval, measurement included.

    The action measurement leaves expected populations unchanged, so this is
    the diagonal of the unnormalized average map minus the diagonal of ``rho``.
    """
    rho = np.asarray(rho, dtype=complex)
    after = np.einsum("kij,jl,kil->i", ks.ops, rho, ks.ops.conj())
    return np.real(after) - np.real(np.diagonal(rho))
