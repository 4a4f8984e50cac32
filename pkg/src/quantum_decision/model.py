"""Continuous-time Lindbladian decision model.

The psychological state lives on ``d = n*m`` basis states ``|E_l, A_j>``
(state of nature ``l``, action ``j``).  Every module uses the same
state-major ordering, zero-based::

    r = l * m + j        l in [0, n),  j in [0, m)

Jump operators are ``L_(a,b) = |a><b|`` with rate ``gamma[a, b]``; the
operator moves amplitude from basis state ``b`` to basis state ``a``.

Vectorization (used by the exact propagator) is column stacking:
``vec(A X B) = (B^T kron A) vec(X)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .errors import ValidationError

HERMITIAN_TOL = 1e-10
TRACE_TOL = 1e-9
PSD_TOL = 1e-10


def basis_index(state: int, action: int, m: int) -> int:
    """Zero-based basis index of ``|E_state, A_action>``."""
    return state * m + action


@dataclass(frozen=True)
class ModelDims:
    n: int
    m: int

    def __post_init__(self):
        if int(self.n) != self.n or int(self.m) != self.m or self.n < 1 or self.m < 1:
            raise ValidationError(f"dims must be positive integers, got n={self.n}, m={self.m}")

    @property
    def d(self) -> int:
        return self.n * self.m

    def state_action(self, r: int) -> tuple[int, int]:
        return divmod(r, self.m)


@dataclass(frozen=True)
class BehaviorParams:
    """Behavioral parameters: quantumness ``alpha``, rationality ``lam``, state relevance ``phi``."""

    alpha: float
    lam: float
    phi: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not (np.isfinite(self.lam) and self.lam >= 0.0):
            raise ValidationError(
                f"lambda must be finite and >= 0, got {self.lam} (use utility_mode='argmax' for the hard limit)"
            )
        if not 0.0 < self.phi < 1.0:
            raise ValidationError(f"phi must lie in (0, 1), got {self.phi}")


def validate_utilities(util, dims: ModelDims) -> np.ndarray:
    u = np.asarray(util, dtype=float)
    if u.shape != (dims.m, dims.n):
        raise ValidationError(f"utility table must be m x n = {(dims.m, dims.n)}, got {u.shape}")
    if not np.all(np.isfinite(u)) or np.any(u <= 0):
        raise ValidationError("utilities must be finite and strictly positive")
    return u


def validate_belief(eta, n: int | None = None) -> np.ndarray:
    e = np.asarray(eta, dtype=float)
    if e.ndim != 1 or (n is not None and e.size != n):
        raise ValidationError(f"belief vector must have length {n}, got shape {e.shape}")
    if np.any(e < 0) or abs(e.sum() - 1.0) > 1e-12:
        raise ValidationError(f"belief vector must be a probability vector, got {e.tolist()}")
    return e


def check_density(rho, *, hermitian_tol=HERMITIAN_TOL, trace_tol=TRACE_TOL, psd_tol=PSD_TOL) -> list[str]:
    """Return the list of violated density-operator invariants (empty if valid)."""
    rho = np.asarray(rho)
    problems = []
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        return [f"not square: shape {rho.shape}"]
    if not np.all(np.isfinite(rho)):
        return ["non-finite entries"]
    herm = np.abs(rho - rho.conj().T).max()
    if herm > hermitian_tol:
        problems.append(f"hermiticity defect {herm:.3e}")
    tr = np.trace(rho)
    if abs(tr - 1.0) > trace_tol:
        problems.append(f"trace {tr.real:.12f}")
    lo = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min()
    if lo < -psd_tol:
        problems.append(f"min eigenvalue {lo:.3e}")
    return problems


def as_density(rho) -> np.ndarray:
    """Validate and return ``rho`` as a complex array."""
    rho = np.asarray(rho, dtype=complex)
    problems = check_density(rho)
    if problems:
        raise ValidationError("invalid density operator: " + "; ".join(problems))
    return rho


def maximally_mixed(d: int) -> np.ndarray:
    return np.eye(d, dtype=complex) / d


def basis_state(r: int, d: int) -> np.ndarray:
    rho = np.zeros((d, d), dtype=complex)
    rho[r, r] = 1.0
    return rho


def random_density(d: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    """Random density matrix: Haar-random eigenbasis, Dirichlet spectrum."""
    z = (rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    q = q * (np.diagonal(r) / np.abs(np.diagonal(r)))
    k = d if rank is None else rank
    w = np.zeros(d)
    w[:k] = rng.dirichlet(np.ones(k))
    rho = (q * w) @ q.conj().T
    return 0.5 * (rho + rho.conj().T)


# ---------------------------------------------------------------------------
# Generator construction
# ---------------------------------------------------------------------------


def build_hamiltonian(dims: ModelDims) -> np.ndarray:
    """Block-diagonal Hamiltonian: ``n`` copies of the ``m x m`` all-ones matrix."""
    return np.kron(np.eye(dims.n), np.ones((dims.m, dims.m)))


def action_choice_probs(util, lam: float) -> np.ndarray:
    """Column-stochastic ``m x n`` matrix ``p(a_j | E_l)`` proportional to ``u**lam``.

    Computed in log space so large ``lam`` does not overflow.
    """
    if not (np.isfinite(lam) and lam >= 0):
        raise ValidationError(f"lambda must be finite and >= 0, got {lam}; use argmax_choice_probs")
    u = np.asarray(util, dtype=float)
    if np.any(u <= 0):
        raise ValidationError("utilities must be strictly positive")
    logits = lam * np.log(u)
    logits -= logits.max(axis=0, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=0, keepdims=True)


def argmax_choice_probs(util) -> np.ndarray:
    """Hard-argmax replacement for ``lam = inf``; ties go to the lowest action index."""
    u = np.asarray(util, dtype=float)
    p = np.zeros_like(u)
    p[np.argmax(u, axis=0), np.arange(u.shape[1])] = 1.0
    return p


def build_Pi(probs, dims: ModelDims) -> np.ndarray:
    """Action-preference matrix ``Pi(lambda)``.

    Block ``l`` is ``1_{m x 1} kron p(.|E_l)``: every row of the block is the
    action distribution in state ``l``.  For ``n == m`` this is exactly the
    Kronecker expression ``p(.|E_l) kron 1_{n x 1}``; for ``n != m`` the ones
    vector must have length ``m`` to keep the block square.
    """
    p = np.asarray(probs, dtype=float)
    if p.shape != (dims.m, dims.n):
        raise ValidationError(f"probs must be m x n = {(dims.m, dims.n)}, got {p.shape}")
    blocks = [np.kron(np.ones((dims.m, 1)), p[:, l][None, :]) for l in range(dims.n)]
    out = np.zeros((dims.d, dims.d))
    for l, b in enumerate(blocks):
        s = slice(l * dims.m, (l + 1) * dims.m)
        out[s, s] = b
    return out


def build_K(eta, dims: ModelDims) -> np.ndarray:
    """Belief matrix ``K = eta_row kron 1_{n x 1} kron I_m``.

    ``K[(l', j'), (l, j)] = eta_l * delta(j, j')``.  The middle ones vector
    has length ``n`` so ``K`` is ``d x d``; for ``n == m`` this coincides with
    the ``1_{m x 1}`` form.
    """
    e = validate_belief(eta, dims.n)
    return np.kron(np.kron(e[None, :], np.ones((dims.n, 1))), np.eye(dims.m))


def build_gamma(Pi, K, phi: float) -> np.ndarray:
    """Cognitive rate matrix ``(1 - phi) Pi^T + phi K^T``."""
    Pi = np.asarray(Pi, dtype=float)
    K = np.asarray(K, dtype=float)
    if Pi.shape != K.shape or Pi.ndim != 2 or Pi.shape[0] != Pi.shape[1]:
        raise ValidationError(f"Pi and K must be square and equal-shaped, got {Pi.shape} and {K.shape}")
    if not 0.0 <= phi <= 1.0:
        raise ValidationError(f"phi must lie in [0, 1], got {phi}")
    return (1.0 - phi) * Pi.T + phi * K.T


@dataclass(frozen=True)
class LindbladGenerator:
    """``drho/dt = -i(1-alpha)[H, rho] + alpha * sum gamma_ab D[|a><b|](rho)``.

    ``jumps`` holds ``(a, b, rate)`` for every ``gamma[a, b] > 0``, including
    self-jumps ``a == b`` (pure dephasing).
    """

    H: np.ndarray
    alpha: float
    gamma: np.ndarray
    jumps: tuple = field(default=())

    @property
    def d(self) -> int:
        return self.H.shape[0]

    @property
    def decay(self) -> np.ndarray:
        """Diagonal of ``alpha * sum gamma L^dag L`` (total outflow rate per basis state)."""
        return self.alpha * self.gamma.sum(axis=0)

    def hamiltonian_part(self, rho) -> np.ndarray:
        h = (1.0 - self.alpha) * self.H
        return -1j * (h @ rho - rho @ h)

    def dissipator_part(self, rho) -> np.ndarray:
        rho = np.asarray(rho, dtype=complex)
        out = np.zeros_like(rho)
        for a, b, rate in self.jumps:
            out[a, a] += rate * rho[b, b]
        g = self.gamma.sum(axis=0)
        out -= 0.5 * (g[:, None] * rho + rho * g[None, :])
        return self.alpha * out

    def superoperator(self) -> np.ndarray:
        """Column-stacked matrix form of the generator (``d^2 x d^2``)."""
        d = self.d
        eye = np.eye(d)
        h = (1.0 - self.alpha) * self.H
        sup = -1j * (np.kron(eye, h) - np.kron(h.T, eye))
        for a, b, rate in self.jumps:
            L = np.zeros((d, d))
            L[a, b] = 1.0
            LdL = L.T @ L
            sup = sup + self.alpha * rate * (
                np.kron(L.conj(), L) - 0.5 * np.kron(eye, LdL) - 0.5 * np.kron(LdL.T, eye)
            )
        return sup


def build_generator(params: BehaviorParams, gamma, dims: ModelDims) -> LindbladGenerator:
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (dims.d, dims.d):
        raise ValidationError(f"gamma must be {dims.d} x {dims.d}, got {gamma.shape}")
    if np.any(gamma < 0):
        raise ValidationError("rates must be nonnegative")
    jumps = tuple(
        (int(a), int(b), float(gamma[a, b])) for a, b in zip(*np.nonzero(gamma > 0))
    )
    return LindbladGenerator(H=build_hamiltonian(dims), alpha=float(params.alpha), gamma=gamma, jumps=jumps)


def apply_generator(gen: LindbladGenerator, rho) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    return gen.hamiltonian_part(rho) + gen.dissipator_part(rho)


def vec(rho) -> np.ndarray:
    return np.asarray(rho).reshape(-1, order="F")


def unvec(v, d: int) -> np.ndarray:
    return np.asarray(v).reshape((d, d), order="F")


def exact_propagate(gen: LindbladGenerator, rho, t: float) -> np.ndarray:
    """Propagate ``rho`` for time ``t`` with the matrix exponential of the generator."""
    if t < 0:
        raise ValidationError(f"t must be >= 0, got {t}")
    rho = np.asarray(rho, dtype=complex)
    if t == 0:
        return rho.copy()
    out = unvec(expm(gen.superoperator() * t) @ vec(rho), gen.d)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("matrix exponential produced non-finite entries")
    return 0.5 * (out + out.conj().T)


def steady_state(gen: LindbladGenerator) -> np.ndarray:
    """Null vector of the generator normalized to unit trace (first one if degenerate)."""
    d = gen.d
    sup = gen.superoperator()
    # trace row appended so the fixed point is unique-ish and trace one
    A = np.vstack([sup, vec(np.eye(d))[None, :]])
    b = np.zeros(d * d + 1, dtype=complex)
    b[-1] = 1.0
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    rho = unvec(x, d)
    return 0.5 * (rho + rho.conj().T)


@dataclass(frozen=True)
class DecisionModel:
    """Everything needed to build the generator for a given belief vector."""

    dims: ModelDims
    params: BehaviorParams
    utilities: np.ndarray
    utility_mode: str = "softmax"

    def __post_init__(self):
        object.__setattr__(self, "utilities", validate_utilities(self.utilities, self.dims))
        if self.utility_mode not in ("softmax", "argmax"):
            raise ValidationError(f"utility_mode must be 'softmax' or 'argmax', got {self.utility_mode!r}")

    def choice_probs(self) -> np.ndarray:
        if self.utility_mode == "argmax":
            return argmax_choice_probs(self.utilities)
        return action_choice_probs(self.utilities, self.params.lam)

    def Pi(self) -> np.ndarray:
        return build_Pi(self.choice_probs(), self.dims)

    def gamma(self, eta) -> np.ndarray:
        return build_gamma(self.Pi(), build_K(eta, self.dims), self.params.phi)

    def generator(self, eta) -> LindbladGenerator:
        return build_generator(self.params, self.gamma(eta), self.dims)
