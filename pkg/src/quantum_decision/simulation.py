"""Seeded human-machine trajectories, ensembles, persistence and the total-probability diagnostic.

One interaction ``k`` of a trajectory:

1. draw the interval length ``tau ~ pi_T`` and observations ``y ~ p(.|s)``, ``z ~ p_z(.|s)``;
2. the decision maker's belief is the Bayes posterior of the prior given ``y``;
3. the controller (closed loop) picks ``u`` from the current state and belief;
4. one Kraus outcome is sampled and applied, then the action is measured.

Every trajectory owns a ``numpy.random.Generator`` seeded with its seed.  It
draws the state of nature first and then a ``(horizon, 5)`` block of
uniforms whose columns drive ``tau, y, z``, the Kraus outcome and the
action.  Trajectories are advanced in vectorized batches; a trajectory's
numbers do not depend on which batch it runs in.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm
from scipy.stats import binomtest

from .config import ScenarioConfig
from .controller import ExpectationKernel, control_grid, select_control_batch
from .discretization import EXACT, PAPER, PROB_FLOOR, average_map
from .errors import DegenerateDistribution, InvariantViolation, ValidationError, ZeroLikelihood
from .model import build_hamiltonian, maximally_mixed
from .stability import kushner_bound_check

POLICIES = ("closed", "open", "fixed")
RECORD_FIELDS = ("k", "tau", "y", "u", "mu", "a", "V_raw", "V_offset", "fidelity")
_UNIFORMS = 5


def bayes_posterior(prior, likelihood) -> np.ndarray:
    """Posterior over states given the likelihood column ``p(y | s)`` of the observed ``y``."""
    prior = np.asarray(prior, dtype=float)
    lik = np.asarray(likelihood, dtype=float)
    if prior.shape != lik.shape:
        raise ValidationError(f"prior shape {prior.shape} and likelihood shape {lik.shape} differ")
    if np.any(lik < 0):
        raise ValidationError("likelihood entries must be nonnegative")
    w = prior * lik
    z = w.sum()
    if z < 1e-300:
        raise ZeroLikelihood(f"observation has zero probability under the prior (normalizer {z:.3e})")
    return w / z


def _posterior_table(prior, obs) -> np.ndarray:
    """Row ``y`` holds the posterior after observing ``y``; unreachable symbols get NaN."""
    obs = np.asarray(obs, dtype=float)
    out = np.full((obs.shape[1], obs.shape[0]), np.nan)
    for y in range(obs.shape[1]):
        try:
            out[y] = bayes_posterior(prior, obs[:, y])
        except ZeroLikelihood:
            pass
    return out


def _cdf(p) -> np.ndarray:
    c = np.cumsum(np.asarray(p, dtype=float), axis=-1)
    c[..., -1] = 1.0
    return c


def _draw(cdf, u) -> np.ndarray:
    """Inverse-CDF sampling; ``cdf`` is (k,) or (B, k), ``u`` is (B,)."""
    idx = np.sum(cdf <= u[:, None], axis=-1)
    return np.minimum(idx, cdf.shape[-1] - 1)


def _parse_policy(policy) -> tuple[str, float]:
    if isinstance(policy, (int, float)) and not isinstance(policy, bool):
        return "fixed", float(policy)
    if isinstance(policy, tuple):
        kind, value = policy
        return str(kind), float(value)
    text = str(policy)
    if text.startswith("fixed="):
        try:
            return "fixed", float(text.split("=", 1)[1])
        except ValueError:
            raise ValidationError(f"cannot parse fixed control value in {text!r}") from None
    if text in ("closed", "open"):
        return text, 0.0
    raise ValidationError(f"policy must be closed, open or fixed=<u>, got {policy!r}")


@dataclass
class TrajectoryRecord:
    seed: int
    state: int
    policy: str
    V0_raw: float
    V0_offset: float
    fidelity0: float
    tau: np.ndarray
    y: np.ndarray
    z: np.ndarray
    u: np.ndarray
    mu: np.ndarray
    a: np.ndarray
    V_raw: np.ndarray
    V_offset: np.ndarray
    fidelity: np.ndarray
    populations: np.ndarray  # (horizon, d) diagonal of rho_k
    terminal_rho: np.ndarray

    @property
    def horizon(self) -> int:
        return int(self.tau.size)

    def V_trace(self, raw: bool = False) -> np.ndarray:
        """``V`` at ``k = 0..horizon``."""
        if raw:
            return np.concatenate([[self.V0_raw], self.V_raw])
        return np.concatenate([[self.V0_offset], self.V_offset])

    def fidelity_trace(self) -> np.ndarray:
        return np.concatenate([[self.fidelity0], self.fidelity])

    def first_passage(self, threshold: float) -> int | None:
        hit = np.nonzero(self.fidelity_trace() >= threshold)[0]
        return int(hit[0]) if hit.size else None

    def header(self, cfg_hash: str, mode: str) -> dict:
        return {
            "cfg_hash": cfg_hash,
            "seed": self.seed,
            "mode": mode,
            "policy": self.policy,
            "state": self.state,
            "horizon": self.horizon,
            "V0_raw": self.V0_raw,
            "V0_offset": self.V0_offset,
            "fidelity0": self.fidelity0,
        }

    def lines(self, cfg_hash: str, mode: str):
        """JSON lines: the header object followed by one object per interaction."""
        yield json.dumps(self.header(cfg_hash, mode), separators=(",", ":"))
        for i in range(self.horizon):
            row = {
                "k": i + 1,
                "tau": int(self.tau[i]),
                "y": int(self.y[i]),
                "u": float(self.u[i]),
                "mu": int(self.mu[i]),
                "a": int(self.a[i]),
                "V_raw": float(self.V_raw[i]),
                "V_offset": float(self.V_offset[i]),
                "fidelity": float(self.fidelity[i]),
            }
            yield json.dumps(row, separators=(",", ":"))


class TrajectoryEngine:
    """Vectorized stepping of many trajectories that share one scenario and policy."""

    def __init__(self, cfg: ScenarioConfig, policy="closed", check_every: int = 100):
        self.cfg = cfg
        self.kind, self.fixed_u = _parse_policy(policy)
        if self.kind == "fixed" and abs(self.fixed_u) > cfg.coupling.bound:
            raise ValidationError(f"fixed control {self.fixed_u} outside [-{cfg.coupling.bound}, {cfg.coupling.bound}]")
        if check_every < 1:
            raise ValidationError("check_every must be >= 1")
        self.check_every = int(check_every)
        self.spec = cfg.lyapunov_spec
        self.model = cfg.controlled_model()
        self.model.check_validity(cfg.piT.t_max)
        self.kernel = ExpectationKernel(self.model, cfg.piT, cfg.mode)
        self.grid = control_grid(cfg.coupling.bound, cfg.grid_size)
        d = cfg.dims.d
        self.d = d
        self.masks = cfg.proj.masks.astype(float)
        self.target_mask = self.masks[cfg.target_action]
        self.alpha = cfg.alpha
        self.Hs = (1.0 - cfg.alpha) * build_hamiltonian(cfg.dims)
        self.prior_cdf = _cdf(cfg.prior)
        self.tau_cdf = _cdf(cfg.interval_pmf)
        self.y_cdf = _cdf(cfg.obs_y)
        self.z_cdf = _cdf(cfg.obs_z)
        self.post_y = _posterior_table(cfg.prior, cfg.obs_y)
        self.post_z = _posterior_table(cfg.prior, cfg.obs_z)
        t_max = cfg.piT.t_max
        if cfg.mode == EXACT:
            self.U = np.array([expm(-1j * self.Hs * t * cfg.dt) for t in range(1, t_max + 1)])

    # -- one interaction for the whole batch -----------------------------

    def _controls(self, rho, eta_ctrl):
        B = rho.shape[0]
        if self.kind == "open":
            return np.zeros(B)
        if self.kind == "fixed":
            return np.full(B, self.fixed_u)
        u, _ = select_control_batch(self.kernel, rho, self.spec, self.grid, eta=eta_ctrl)
        return u

    def _no_jump(self, tau, decay):
        h = tau * self.cfg.dt
        if self.cfg.mode == PAPER:
            drift = 1j * self.Hs + 0.5 * decay[:, :, None] * np.eye(self.d)
            return np.eye(self.d) - h[:, None, None] * drift
        return self.U[tau - 1] * np.sqrt(1.0 - h[:, None] * decay)[:, None, :]

    def _step(self, rho, s, draws):
        B, d = rho.shape[0], self.d
        rows = np.arange(B)
        tau = _draw(self.tau_cdf, draws[:, 0]) + 1
        y = _draw(self.y_cdf[s], draws[:, 1])
        z = _draw(self.z_cdf[s], draws[:, 2])
        eta = self.post_y[y]
        eta_ctrl = self.post_z[z] if self.cfg.z_driven else eta
        u = self._controls(rho, eta_ctrl)
        gam = self.model.gamma_batch(u, eta)
        h = tau * self.cfg.dt
        pop = np.real(np.diagonal(rho, axis1=1, axis2=2))
        jumps = (h * self.alpha)[:, None, None] * gam * pop[:, None, :]
        M0 = self._no_jump(tau, self.alpha * gam.sum(axis=1))
        stay = M0 @ rho @ np.conj(np.swapaxes(M0, 1, 2))
        w0 = np.real(np.trace(stay, axis1=1, axis2=2))
        weights = np.clip(np.concatenate([w0[:, None], jumps.reshape(B, -1)], axis=1), 0.0, None)
        total = weights.sum(axis=1)
        if np.any(total < PROB_FLOOR):
            raise DegenerateDistribution("total Kraus outcome probability vanished")
        pick = _draw(np.cumsum(weights, axis=1) / total[:, None], draws[:, 3])
        nonzero = np.cumsum(gam.reshape(B, -1) > 0, axis=1)
        mu = np.where(pick == 0, 0, nonzero[rows, np.maximum(pick - 1, 0)])
        mid = stay / np.where(w0 > 0, w0, 1.0)[:, None, None]
        jumped = pick > 0
        if jumped.any():
            dest = (pick[jumped] - 1) // d
            basis = np.zeros((dest.size, d, d), dtype=complex)
            basis[np.arange(dest.size), dest, dest] = 1.0
            mid[jumped] = basis
        pa = np.clip(np.real(np.diagonal(mid, axis1=1, axis2=2)) @ self.masks.T, 0.0, None)
        a = _draw(np.cumsum(pa, axis=1) / pa.sum(axis=1)[:, None], draws[:, 4])
        keep = self.masks[a]
        post = mid * keep[:, :, None] * keep[:, None, :]
        post = post / pa[rows, a][:, None, None]
        post = 0.5 * (post + np.conj(np.swapaxes(post, 1, 2)))
        return post, tau, y, z, u, mu, a

    def _check(self, rho, seeds, k):
        herm = np.abs(rho - np.conj(np.swapaxes(rho, 1, 2))).max(axis=(1, 2))
        tr = np.abs(np.real(np.trace(rho, axis1=1, axis2=2)) - 1.0)
        lo = np.linalg.eigvalsh(rho)[:, 0]
        bad = (herm > 1e-10) | (tr > 1e-9) | (lo < -1e-10)
        if bad.any():
            i = int(np.argmax(bad))
            raise InvariantViolation(
                f"seed {seeds[i]}: density invariants broken at interaction {k} "
                f"(hermiticity {herm[i]:.2e}, trace error {tr[i]:.2e}, min eigenvalue {lo[i]:.2e})",
                step=k,
            )

    def run_states(self, seeds, horizon: int) -> list[np.ndarray]:
        """Every post-measurement state of the given trajectories, in visiting order."""
        states: list = []
        self.run(seeds, horizon, collect=states)
        return [rho for batch in states for rho in batch]

    def run(self, seeds, horizon: int | None = None, collect: list | None = None) -> list[TrajectoryRecord]:
        cfg = self.cfg
        K = cfg.horizon if horizon is None else int(horizon)
        seeds = [int(x) for x in seeds]
        B, d = len(seeds), self.d
        rngs = [np.random.default_rng(x) for x in seeds]
        s = np.array([_draw(self.prior_cdf, np.array([g.random()]))[0] for g in rngs])
        draws = np.stack([g.random((K, _UNIFORMS)) for g in rngs]) if K else np.zeros((B, 0, _UNIFORMS))
        rho = np.broadcast_to(maximally_mixed(d), (B, d, d)).copy()
        out = {name: np.zeros((B, K), dtype=dt) for name, dt in
               (("tau", int), ("y", int), ("z", int), ("u", float), ("mu", int), ("a", int))}
        pops = np.zeros((B, K, d))
        for k in range(K):
            rho, *vals = self._step(rho, s, draws[:, k])
            for name, v in zip(("tau", "y", "z", "u", "mu", "a"), vals):
                out[name][:, k] = v
            pops[:, k] = np.real(np.diagonal(rho, axis1=1, axis2=2))
            if collect is not None:
                collect.append(rho.copy())
            if (k + 1) % self.check_every == 0 or k == K - 1:
                self._check(rho, seeds, k + 1)
        sig, eps = self.spec.sigma_array, self.spec.epsilon
        v_raw = pops @ sig - 0.5 * eps * np.sum(pops * pops, axis=-1)
        fid = pops @ self.target_mask
        rho0 = maximally_mixed(d)
        p0 = np.real(np.diagonal(rho0))
        v0 = float(sig @ p0 - 0.5 * eps * (p0 @ p0))
        return [
            TrajectoryRecord(
                seed=seeds[i], state=int(s[i]), policy=self.policy_label,
                V0_raw=v0, V0_offset=v0 - self.spec.offset, fidelity0=float(self.target_mask @ p0),
                tau=out["tau"][i], y=out["y"][i], z=out["z"][i], u=out["u"][i], mu=out["mu"][i],
                a=out["a"][i], V_raw=v_raw[i], V_offset=v_raw[i] - self.spec.offset,
                fidelity=fid[i], populations=pops[i], terminal_rho=rho[i].copy(),
            )
            for i in range(B)
        ]

    @property
    def policy_label(self) -> str:
        return f"fixed={self.fixed_u!r}" if self.kind == "fixed" else self.kind


def run_trajectory(cfg: ScenarioConfig, seed: int, policy="closed", debug: bool = False,
                   horizon: int | None = None) -> TrajectoryRecord:
    """Simulate one seeded trajectory; ``policy`` is ``closed``, ``open``, ``fixed=<u>`` or a number."""
    engine = TrajectoryEngine(cfg, policy, check_every=1 if debug else 100)
    return engine.run([seed], horizon)[0]


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


@dataclass
class EnsembleSummary:
    N: int
    converged: int
    conv_frac: float
    conv_ci95: tuple
    first_passage_quantiles: list | None
    first_passage_mean: float | None
    supV_exceedance: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "converged": self.converged,
            "conv_frac": self.conv_frac,
            "conv_ci95": list(self.conv_ci95),
            "first_passage_quantiles": self.first_passage_quantiles,
            "first_passage_mean": self.first_passage_mean,
            "supV_exceedance": self.supV_exceedance,
        }


@dataclass
class EnsembleResult:
    cfg: ScenarioConfig
    records: list
    summary: EnsembleSummary
    records_path: Path | None = None
    summary_path: Path | None = None

    def stack(self, name: str) -> np.ndarray:
        return np.stack([getattr(r, name) for r in self.records])


def summarize(cfg: ScenarioConfig, records) -> EnsembleSummary:
    """Order-independent reduction of trajectory records."""
    N = len(records)
    if N == 0:
        raise ValidationError("cannot summarize an empty ensemble")
    thr = cfg.fidelity_threshold
    final = np.array([r.fidelity_trace()[-1] for r in records])
    conv = int(np.sum(final >= thr))
    ci = binomtest(conv, N).proportion_ci(confidence_level=0.95, method="wilson")
    passage = [t for t in (r.first_passage(thr) for r in records) if t is not None]
    quant = [float(q) for q in np.quantile(passage, [0.1, 0.5, 0.9])] if passage else None
    traces = [r.V_trace() for r in records]
    v0 = records[0].V0_offset
    sup_v = [
        {"multiplier": float(mult), **kushner_bound_check(traces, mult * v0, v0).to_dict()}
        for mult in cfg.kushner_multipliers
    ]
    return EnsembleSummary(
        N=N,
        converged=conv,
        conv_frac=conv / N,
        conv_ci95=(float(ci.low), float(ci.high)),
        first_passage_quantiles=quant,
        first_passage_mean=float(np.mean(passage)) if passage else None,
        supV_exceedance=sup_v,
    )


def default_threads() -> int:
    return os.cpu_count() or 1


def run_ensemble(cfg: ScenarioConfig, N: int | None = None, policy="closed", out_dir=None,
                 threads: int = 1, batch_size: int = 500, debug: bool = False) -> EnsembleResult:
    """Run ``N`` trajectories with seeds ``cfg.seed .. cfg.seed + N - 1`` and summarize them.

    Records and summary are written under ``out_dir`` when it is given.
    """
    N = cfg.ensemble_size if N is None else int(N)
    if N < 1:
        raise ValidationError(f"ensemble size must be >= 1, got {N}")
    engine = TrajectoryEngine(cfg, policy, check_every=1 if debug else 100)
    seeds = list(range(cfg.seed, cfg.seed + N))
    chunks = [seeds[i:i + batch_size] for i in range(0, N, batch_size)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(engine.run, chunks))
    else:
        parts = [engine.run(c) for c in chunks]
    records = [r for part in parts for r in part]
    result = EnsembleResult(cfg, records, summarize(cfg, records))
    if out_dir is not None:
        result.records_path, result.summary_path = write_ensemble(result, out_dir)
    return result


def write_records(path, records, cfg: ScenarioConfig) -> Path:
    path = Path(path)
    h = cfg.content_hash()
    try:
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for rec in records:
                for line in rec.lines(h, cfg.mode):
                    fh.write(line + "\n")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write records to {path}: {exc.strerror}") from exc
    return path


def write_ensemble(result: EnsembleResult, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot create output directory {out}: {exc.strerror}") from exc
    rec_path = write_records(out / "records.jsonl", result.records, result.cfg)
    sum_path = out / "summary.json"
    try:
        sum_path.write_text(json.dumps(result.summary.to_dict(), indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write summary to {sum_path}: {exc.strerror}") from exc
    return rec_path, sum_path


def read_records(path) -> list[tuple[dict, list[dict]]]:
    """Parse a record file into ``(header, rows)`` pairs."""
    path = Path(path)
    out = []
    try:
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                obj = json.loads(line)
                if "cfg_hash" in obj:
                    out.append((obj, []))
                else:
                    out[-1][1].append(obj)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot read records from {path}: {exc.strerror}") from exc
    return out


# ---------------------------------------------------------------------------
# Total-probability diagnostic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class STPResult:
    p_a: float
    decomposed: float
    gap: float
    p_b: float

    def to_dict(self) -> dict:
        return {"P(A)": self.p_a, "P(B)P(A|B)+P(~B)P(A|~B)": self.decomposed, "gap": self.gap, "P(B)": self.p_b}


def _evolve(rho, ks, steps):
    for _ in range(steps):
        rho = average_map(rho, ks)
    return rho


def stp_discrepancy(cfg: ScenarioConfig, event_a=None, event_b=None, t_b: int = 50, t_a: int = 100,
                    observation: int | None = 0) -> STPResult:
    """Total-probability gap between measuring nothing and measuring ``B`` at step ``t_b``.

    Events are sets of zero-based actions; both default to the target action.
    The state starts maximally mixed and evolves under the average map at
    ``u = 0``, one base step at a time, with the belief fixed at the
    posterior after ``observation`` (``None`` keeps the prior).  In a
    scenario symmetric under swapping states and actions the prior belief
    forces a zero gap, which is why an observation is the default.  ``A`` is
    read out at step ``t_a``.  Conditioning on ``B`` is a coarse projective
    measurement onto the span of ``B``'s action subspaces.
    """
    if not 0 <= t_b <= t_a:
        raise ValidationError(f"need 0 <= t_b <= t_a, got t_b={t_b}, t_a={t_a}")
    m = cfg.m
    event_a = {cfg.target_action} if event_a is None else set(event_a)
    event_b = {cfg.target_action} if event_b is None else set(event_b)
    for ev in (event_a, event_b):
        if not ev or not ev <= set(range(m)):
            raise ValidationError(f"events must be non-empty subsets of actions 0..{m - 1}")
    masks = cfg.proj.masks
    pa_mask = masks[sorted(event_a)].sum(axis=0).astype(float)
    pb_mask = masks[sorted(event_b)].sum(axis=0).astype(float)
    belief = cfg.prior if observation is None else bayes_posterior(cfg.prior, np.asarray(cfg.obs_y)[:, observation])
    ks = cfg.controlled_model(eta=belief).kraus(0.0, 1)
    rho0 = maximally_mixed(cfg.dims.d)

    def prob(rho, mask):
        return float(np.real(np.diagonal(rho)) @ mask)

    p_a = prob(_evolve(rho0, ks, t_a), pa_mask)
    mid = _evolve(rho0, ks, t_b)
    decomposed, p_b = 0.0, prob(mid, pb_mask)
    for mask in (pb_mask, 1.0 - pb_mask):
        branch = mid * mask[:, None] * mask[None, :]
        w = float(np.real(np.trace(branch)))
        if w <= 0:
            continue
        decomposed += w * prob(_evolve(branch / w, ks, t_a - t_b), pa_mask)
    return STPResult(p_a, decomposed, p_a - decomposed, p_b)
