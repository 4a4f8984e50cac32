"""Scenario configuration: YAML loading, validation and content hashing.

Config files are YAML mappings.  Field names (all optional, defaults shown
by :func:`default_scenario`)::

    n, m                   state and action counts
    alpha, lambda, phi     behavioral parameters
    utility_mode           softmax | argmax
    utilities              m x n table, entry [j][l] = u(a_j | E_l)
    prior                  length-n pmf of the state of nature
    obs_y, obs_z           n x |alphabet| row-stochastic confusion matrices
    interval_pmf           pmf over interval lengths 1..T_max
    dt                     base time step
    mode                   paper-faithful | exact-cptp
    coupling:              {kind: rate_gain | belief_tilt, bound, gain, tilt}
    target_action          1-based action index
    horizon                interactions per trajectory
    ensemble_size, seed    ensemble size and base seed
    epsilon                Lyapunov epsilon
    sigma                  optional precomputed weights (length n*m)
    target_state           optional 1-based state index paired with sigma
    fidelity_threshold     convergence threshold on Tr(P_target rho)
    kushner_multipliers    lambda levels as multiples of V(rho_0)
    grid_size              control grid size (odd)
    z_driven               controller uses z_k instead of y_k for its belief
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import yaml

from .controller import ControlCoupling, ControlledModel, IntervalDistribution, LyapunovSpec, select_sigma_for_action
from .discretization import MODES, PAPER, ActionProjectors
from .errors import ConfigError, QuantumDecisionError
from .model import BehaviorParams, DecisionModel, ModelDims


def _stochastic_rows(name, mat, rows):
    a = np.asarray(mat, dtype=float)
    if a.ndim != 2 or a.shape[0] != rows:
        raise ConfigError(f"{name}: expected {rows} rows, got shape {a.shape}")
    if np.any(a < 0) or np.any(np.abs(a.sum(axis=1) - 1.0) > 1e-12):
        raise ConfigError(f"{name}: rows must be probability vectors")
    return a


@dataclass(frozen=True)
class ScenarioConfig:
    n: int = 2
    m: int = 2
    alpha: float = 0.3
    lam: float = 1.0
    phi: float = 0.5
    utility_mode: str = "softmax"
    utilities: tuple = ((2.0, 1.0), (1.0, 2.0))
    prior: tuple = (0.5, 0.5)
    obs_y: tuple = ((0.8, 0.2), (0.2, 0.8))
    obs_z: tuple = ((0.8, 0.2), (0.2, 0.8))
    interval_pmf: tuple = (1 / 3, 1 / 3, 1 / 3)
    dt: float = 0.01
    mode: str = PAPER
    coupling: ControlCoupling = field(default_factory=ControlCoupling)
    target_action: int = 0  # zero-based internally
    horizon: int = 2000
    ensemble_size: int = 500
    seed: int = 0
    epsilon: float = 0.1
    sigma: tuple | None = None
    target_state: int | None = None  # zero-based
    fidelity_threshold: float = 0.99
    kushner_multipliers: tuple = (1.5, 2.0, 4.0)
    grid_size: int = 41
    z_driven: bool = False

    def __post_init__(self):
        try:
            self.validate()
        except ConfigError:
            raise
        except QuantumDecisionError as exc:
            raise ConfigError(str(exc)) from exc

    def validate(self):
        dims = ModelDims(self.n, self.m)
        BehaviorParams(self.alpha, self.lam, self.phi)
        u = np.asarray(self.utilities, dtype=float)
        if u.shape != (self.m, self.n) or np.any(u <= 0):
            raise ConfigError(f"utilities: must be an m x n = {(self.m, self.n)} table of positive numbers")
        p = np.asarray(self.prior, dtype=float)
        if p.shape != (self.n,) or np.any(p < 0) or abs(p.sum() - 1) > 1e-12:
            raise ConfigError("prior: must be a length-n probability vector")
        _stochastic_rows("obs_y", self.obs_y, self.n)
        _stochastic_rows("obs_z", self.obs_z, self.n)
        try:
            IntervalDistribution(self.interval_pmf)
        except QuantumDecisionError as exc:
            raise ConfigError(f"interval_pmf: {exc}") from exc
        if not self.dt > 0:
            raise ConfigError("dt: must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode: must be one of {MODES}")
        if not 0 <= self.target_action < self.m:
            raise ConfigError(f"target_action: must lie in 1..{self.m}")
        if self.horizon < 0 or self.ensemble_size < 1:
            raise ConfigError("horizon must be >= 0 and ensemble_size >= 1")
        if not self.epsilon > 0:
            raise ConfigError("epsilon: must be strictly positive")
        if self.sigma is not None and len(self.sigma) != dims.d:
            raise ConfigError(f"sigma: must have length n*m = {dims.d}")
        if self.grid_size < 3 or self.grid_size % 2 == 0:
            raise ConfigError("grid_size: must be odd and >= 3")
        if not 0 < self.fidelity_threshold <= 1:
            raise ConfigError("fidelity_threshold: must lie in (0, 1]")

    # -- derived objects -------------------------------------------------

    @property
    def dims(self) -> ModelDims:
        return ModelDims(self.n, self.m)

    @property
    def piT(self) -> IntervalDistribution:
        return IntervalDistribution(self.interval_pmf)

    @property
    def proj(self) -> ActionProjectors:
        return ActionProjectors(self.dims)

    def decision_model(self) -> DecisionModel:
        return DecisionModel(self.dims, BehaviorParams(self.alpha, self.lam, self.phi),
                             np.asarray(self.utilities, dtype=float), self.utility_mode)

    def controlled_model(self, eta=None, mode: str | None = None) -> ControlledModel:
        """Controller model; ``eta`` defaults to the prior, which equals the mean posterior."""
        eta = self.prior if eta is None else eta
        return ControlledModel(self.decision_model(), tuple(eta), self.coupling, self.dt, mode or self.mode)

    @cached_property
    def lyapunov_spec(self) -> LyapunovSpec:
        """Weights from the config if given, else solved for the target action."""
        if self.sigma is not None:
            target = self.target_state if self.target_state is not None else 0
            return LyapunovSpec(tuple(self.sigma), self.epsilon, target * self.m + self.target_action)
        return select_sigma_for_action(self.controlled_model(), self.target_action, self.epsilon, self.piT)

    def with_overrides(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, ControlCoupling):
                v = {k: (list(x) if isinstance(x, tuple) else x) for k, x in asdict(v).items()}
            elif isinstance(v, tuple):
                v = json.loads(json.dumps(v))
            out[f.name] = v
        out["lambda"] = out.pop("lam")
        out["target_action"] = self.target_action + 1
        if self.target_state is not None:
            out["target_state"] = self.target_state + 1
        return out

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def default_scenario(**overrides) -> ScenarioConfig:
    """Default 2-state, 2-action scenario (artifact defaults, not fitted values)."""
    return ScenarioConfig(**overrides)


def _tuplify(x):
    if isinstance(x, list):
        return tuple(_tuplify(v) for v in x)
    return x


_FIELD_NAMES = {f.name for f in fields(ScenarioConfig)}


def config_from_dict(data: dict) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    if "lambda" in data:
        data["lam"] = data.pop("lambda")
    unknown = set(data) - _FIELD_NAMES
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
    if "coupling" in data:
        c = data["coupling"]
        if not isinstance(c, dict):
            raise ConfigError("coupling: must be a mapping")
        try:
            data["coupling"] = ControlCoupling(**{k: _tuplify(v) for k, v in c.items()})
        except TypeError as exc:
            raise ConfigError(f"coupling: {exc}") from exc
        except QuantumDecisionError as exc:
            raise ConfigError(f"coupling: {exc}") from exc
    for key in ("target_action", "target_state"):
        if data.get(key) is not None:
            if int(data[key]) != data[key] or data[key] < 1:
                raise ConfigError(f"{key}: must be a 1-based positive integer")
            data[key] = int(data[key]) - 1
    data = {k: _tuplify(v) for k, v in data.items()}
    try:
        return ScenarioConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: ScenarioConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
