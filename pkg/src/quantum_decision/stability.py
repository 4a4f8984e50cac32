"""Statistical checks of finite-step stochastic Lyapunov conditions.

Every verdict here is a Monte Carlo certification with CLT slack, not a
proof, and drift conditions are only checked on the states actually
supplied or visited.  Report headers say so.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .controller import ExpectationKernel, IntervalDistribution, control_grid, lyapunov_value, select_control_batch
from .discretization import apply_outcome, measure_action, outcome_probs
from .errors import TraceTooShort, ValidationError

REPORT_HEADER = (
    "statistical certification: Monte Carlo estimates with CLT confidence intervals; "
    "drift conditions checked only on the supplied or visited states"
)
MIN_SAMPLES = 30
Z95 = 1.959963984540054

COMPLIANT, VIOLATION, INCONCLUSIVE = "compliant", "violation", "inconclusive"
ROUNDING_FLOOR = 1e-12  # drifts this close to -phi are rounding, not evidence


# ---------------------------------------------------------------------------
# Adapters and reports
# ---------------------------------------------------------------------------


@dataclass
class SystemAdapter:
    """A discrete-time stochastic system with a candidate Lyapunov function.

    ``advance(state, tau, rng)`` moves ``tau`` steps; it defaults to calling
    ``step`` repeatedly.  ``bin_key`` maps a state to a hashable cell label.
    """

    dim: int
    step: Callable
    V: Callable
    phi: Callable
    piT: IntervalDistribution | None = None
    advance_fn: Callable | None = None
    bin_key: Callable | None = None

    def advance(self, state, tau: int, rng: np.random.Generator):
        if self.advance_fn is not None:
            return self.advance_fn(state, tau, rng)
        for _ in range(tau):
            state = self.step(state, rng)
        return state

    def label(self, state, index: int):
        return self.bin_key(state) if self.bin_key is not None else index


@dataclass
class DriftCell:
    bin_id: object
    count: int
    drift: float
    ci_lo: float
    ci_hi: float
    phi: float
    verdict: str

    def to_dict(self) -> dict:
        return {"bin": self.bin_id if isinstance(self.bin_id, (int, str)) else str(self.bin_id),
                "count": self.count, "drift": self.drift, "ci_lo": self.ci_lo, "ci_hi": self.ci_hi,
                "phi": self.phi, "verdict": self.verdict}


def _verdict(count, lo, hi, phi, min_count=MIN_SAMPLES) -> str:
    """``violation`` if the drift is significantly above ``-phi``, ``compliant`` if significantly below."""
    if count < min_count:
        return INCONCLUSIVE
    if lo > -phi + ROUNDING_FLOOR:
        return VIOLATION
    if hi < -phi:
        return COMPLIANT
    return INCONCLUSIVE


def _cell(bin_id, diffs, phi, z=Z95) -> DriftCell:
    diffs = np.asarray(diffs, dtype=float)
    n = diffs.size
    mean = float(diffs.mean()) if n else float("nan")
    se = float(diffs.std(ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    lo, hi = mean - z * se, mean + z * se
    return DriftCell(bin_id, n, mean, lo, hi, float(phi), _verdict(n, lo, hi, phi))


@dataclass
class DriftReport:
    cells: list
    tau: object = None  # fixed interval length, "sampled", or "mixture"
    confidence: float = 0.95
    header: str = REPORT_HEADER

    @property
    def violations(self) -> list:
        return [c for c in self.cells if c.verdict == VIOLATION]

    @property
    def passed(self) -> bool:
        return not self.violations

    @property
    def all_compliant(self) -> bool:
        return all(c.verdict == COMPLIANT for c in self.cells)

    def drifts(self) -> np.ndarray:
        return np.array([c.drift for c in self.cells])

    def to_dict(self) -> dict:
        return {"header": self.header, "tau": self.tau, "confidence": self.confidence,
                "n_violations": len(self.violations), "rows": [c.to_dict() for c in self.cells]}

    def write(self, path) -> Path:
        return write_report(self.to_dict(), path)


def write_report(obj: dict, path) -> Path:
    path = Path(path)
    try:
        path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write report to {path}: {exc.strerror}") from exc
    return path


# ---------------------------------------------------------------------------
# Drift estimation
# ---------------------------------------------------------------------------


def drift_estimate(adapter: SystemAdapter, initial_states, samples: int, tau: int | None = 1,
                   seed: int = 0, z: float = Z95) -> DriftReport:
    """Monte Carlo ``E[V(x_{+T})] - V(x)`` per initial state.

    ``tau=None`` draws each interval length from ``adapter.piT``.
    """
    if samples < MIN_SAMPLES:
        raise ValidationError(f"need at least {MIN_SAMPLES} samples per state, got {samples}")
    if tau is None and adapter.piT is None:
        raise ValidationError("sampled interval lengths need adapter.piT")
    if tau is not None and (int(tau) != tau or tau < 1):
        raise ValidationError(f"tau must be a positive integer, got {tau}")
    rng = np.random.default_rng(seed)
    cells = []
    for i, x in enumerate(initial_states):
        v0 = float(adapter.V(x))
        diffs = np.empty(samples)
        for j in range(samples):
            t = adapter.piT.sample(rng) if tau is None else int(tau)
            diffs[j] = float(adapter.V(adapter.advance(x, t, rng))) - v0
        cells.append(_cell(adapter.label(x, i), diffs, adapter.phi(x), z))
    return DriftReport(cells, tau="sampled" if tau is None else int(tau), confidence=_confidence(z))


def _confidence(z: float) -> float:
    return float(math.erf(z / math.sqrt(2.0)))


@dataclass
class RandomIntervalReport:
    per_tau: dict
    mixture: DriftReport
    header: str = REPORT_HEADER

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.per_tau.values())

    def to_dict(self) -> dict:
        return {"header": self.header, "passed": self.passed,
                "per_tau": {str(t): r.to_dict() for t, r in self.per_tau.items()},
                "mixture": self.mixture.to_dict()}

    def write(self, path) -> Path:
        return write_report(self.to_dict(), path)


def random_interval_drift(adapter: SystemAdapter, piT: IntervalDistribution, initial_states, samples: int,
                          seed: int = 0, z: float = Z95) -> RandomIntervalReport:
    """Drift conditioned on each interval length, plus the ``pi_T``-weighted mixture.

    Each conditional report reuses ``seed`` (common random numbers), so a
    point-mass ``pi_T`` reproduces :func:`drift_estimate` exactly.
    """
    states = list(initial_states)
    per_tau = {t: drift_estimate(adapter, states, samples, tau=t, seed=seed, z=z) for t, _ in piT.support}
    cells = []
    for i in range(len(states)):
        rows = [(p, per_tau[t].cells[i]) for t, p in piT.support]
        mean = sum(p * c.drift for p, c in rows)
        se = math.sqrt(sum((p * (c.ci_hi - c.ci_lo) / (2 * z)) ** 2 for p, c in rows))
        lo, hi = mean - z * se, mean + z * se
        first = rows[0][1]
        n = min(c.count for _, c in rows)
        cells.append(DriftCell(first.bin_id, n, mean, lo, hi, first.phi, _verdict(n, lo, hi, first.phi)))
    return RandomIntervalReport(per_tau, DriftReport(cells, tau="mixture", confidence=_confidence(z)))


# ---------------------------------------------------------------------------
# Containment bound and residue classes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KushnerResult:
    lam: float
    exceedance: float
    bound: float
    sigma_binomial: float
    n: int
    passed: bool

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "exceedance": self.exceedance, "bound": self.bound,
                "sigma_binomial": self.sigma_binomial, "n": self.n, "pass": self.passed}


def kushner_bound_check(traces, lam: float, v0: float) -> KushnerResult:
    """Empirical ``P[sup_k V_k >= lam]`` against ``v0 / lam``.

    Passes if the exceedance is at most the bound plus three binomial
    standard deviations evaluated at the bound.
    """
    if not lam > 0:
        raise ValidationError(f"lambda must be positive, got {lam}")
    sups = np.array([np.max(t) for t in traces])
    if not np.all(np.isfinite(sups)):
        raise ValidationError("V traces must be finite")
    n = sups.size
    frac = float(np.mean(sups >= lam))
    bound = float(v0 / lam)
    b = min(max(bound, 0.0), 1.0)
    sig = math.sqrt(b * (1.0 - b) / n)
    return KushnerResult(float(lam), frac, bound, sig, n, bool(frac <= bound + 3.0 * sig))


@dataclass(frozen=True)
class ResidueReport:
    per_residue: tuple  # (residue, tail_max, passed)
    full_tail_max: float
    full_passed: bool
    tol: float

    @property
    def overall(self) -> bool:
        return self.full_passed and all(p for _, _, p in self.per_residue)

    def to_dict(self) -> dict:
        return {"tol": self.tol, "overall": self.overall, "full_tail_max": self.full_tail_max,
                "full_passed": self.full_passed,
                "per_residue": [{"residue": k, "tail_max": m, "pass": p} for k, m, p in self.per_residue]}


def _tail_max(seq: np.ndarray) -> float:
    n = max(1, math.ceil(0.1 * seq.size))
    return float(np.max(seq[-n:]))


def residue_convergence_check(trace, T_max: int, tol: float) -> ResidueReport:
    """Tail check of every subsequence ``trace[k::T_max]`` and of the whole trace.

    The tail is the last 10% of each sequence.
    """
    x = np.asarray(trace, dtype=float)
    if int(T_max) != T_max or T_max < 1:
        raise ValidationError(f"T_max must be a positive integer, got {T_max}")
    if x.size < 10 * T_max:
        raise TraceTooShort(f"trace length {x.size} < 10 * T_max = {10 * T_max}")
    per = []
    for k in range(T_max):
        m = _tail_max(x[k::T_max])
        per.append((k, m, bool(m <= tol)))
    full = _tail_max(x)
    return ResidueReport(tuple(per), full, bool(full <= tol), float(tol))


# ---------------------------------------------------------------------------
# The closed-loop decision system
# ---------------------------------------------------------------------------


def density_bin(rho, bins: int = 10) -> str:
    """Cell label from the diagonal of ``rho``, ``bins`` cells per coordinate."""
    p = np.real(np.diagonal(rho))
    idx = np.minimum((np.clip(p, 0.0, 1.0) * bins).astype(int), bins - 1)
    return "-".join(str(i) for i in idx)


def lindblad_adapter(cfg, policy: str = "closed", phi: float = 0.0) -> SystemAdapter:
    """Adapter whose step is one interaction of the decision loop.

    The state is the density matrix.  Each step draws a fresh state of
    nature from the prior, so drift is averaged over it and over ``y``.  The
    control choice is memoized on ``(rho, observation)``.
    """
    from .simulation import _parse_policy, _posterior_table

    kind, fixed = _parse_policy(policy)
    spec = cfg.lyapunov_spec
    model = cfg.controlled_model()
    model.check_validity(cfg.piT.t_max)
    kernel = ExpectationKernel(model, cfg.piT, cfg.mode)
    grid = control_grid(cfg.coupling.bound, cfg.grid_size)
    prior = np.asarray(cfg.prior)
    obs_y, obs_z = np.asarray(cfg.obs_y), np.asarray(cfg.obs_z)
    post_y, post_z = _posterior_table(prior, obs_y), _posterior_table(prior, obs_z)
    proj = cfg.proj
    controls: dict = {}
    kraus: dict = {}

    def control(rho, eta, key):
        if kind == "open":
            return 0.0
        if kind == "fixed":
            return fixed
        k = (rho.tobytes(), key)
        if k not in controls:
            u, _ = select_control_batch(kernel, rho[None], spec, grid, eta=eta[None])
            controls[k] = float(u[0])
        return controls[k]

    def advance(rho, tau, rng):
        rho = np.asarray(rho, dtype=complex)
        s = int(rng.choice(prior.size, p=prior))
        y = int(rng.choice(obs_y.shape[1], p=obs_y[s]))
        if cfg.z_driven:
            z = int(rng.choice(obs_z.shape[1], p=obs_z[s]))
            u = control(rho, post_z[z], ("z", z))
        else:
            u = control(rho, post_y[y], ("y", y))
        kk = (y, u, tau)
        if kk not in kraus:
            kraus[kk] = model.with_eta(post_y[y]).kraus(u, tau)
        ks = kraus[kk]
        p, _ = outcome_probs(rho, ks)
        mid = apply_outcome(rho, ks, int(rng.choice(p.size, p=p)))
        return measure_action(mid, proj, rng)[1]

    def step(rho, rng):
        return advance(rho, cfg.piT.sample(rng), rng)

    return SystemAdapter(
        dim=cfg.dims.d,
        step=step,
        V=lambda rho: lyapunov_value(spec, rho),
        phi=lambda rho: phi,
        piT=cfg.piT,
        advance_fn=advance,
        bin_key=density_bin,
    )


def select_binned_states(states, count: int, bins: int = 10) -> list:
    """First visited representative of up to ``count`` distinct diagonal cells."""
    seen, out = set(), []
    for rho in states:
        key = density_bin(rho, bins)
        if key in seen:
            continue
        seen.add(key)
        out.append(np.asarray(rho))
        if len(out) == count:
            break
    return out


def closed_loop_states(cfg, count: int, seed: int = 0, trajectories: int = 20, horizon: int = 200) -> list:
    """Up to ``count`` closed-loop states from distinct diagonal cells, padded with random states."""
    from .model import random_density
    from .simulation import TrajectoryEngine

    engine = TrajectoryEngine(cfg, "closed")
    visited = engine.run_states(list(range(seed, seed + trajectories)), min(cfg.horizon, horizon))
    picked = select_binned_states(visited, count)
    seen = {density_bin(r) for r in picked}
    rng = np.random.default_rng(seed)
    while len(picked) < count:
        r = random_density(cfg.dims.d, rng)
        if density_bin(r) not in seen:
            seen.add(density_bin(r))
            picked.append(r)
    return picked


def drift_from_records(path, bins: int = 10, phi: float = 0.0) -> dict:
    """Per-interval-length drift of ``V_offset`` binned on its own value, read from a record file.

    Record files carry ``V`` but not populations, so cells are ``bins``
    equal-width slices of the observed ``V`` range.
    """
    from .simulation import read_records

    pairs = {}
    for header, rows in read_records(path):
        prev = header["V0_offset"]
        for row in rows:
            pairs.setdefault(row["tau"], []).append((prev, row["V_offset"]))
            prev = row["V_offset"]
    if not pairs:
        raise ValidationError(f"no transitions in {path}")
    allv = np.array([v for ps in pairs.values() for v, _ in ps])
    edges = np.linspace(allv.min(), allv.max(), bins + 1)
    reports = {}
    for tau in sorted(pairs):
        arr = np.array(pairs[tau])
        idx = np.clip(np.searchsorted(edges, arr[:, 0], side="right") - 1, 0, bins - 1)
        cells = [_cell(int(b), arr[idx == b, 1] - arr[idx == b, 0], phi) for b in range(bins) if np.any(idx == b)]
        reports[tau] = DriftReport(cells, tau=int(tau))
    return reports
