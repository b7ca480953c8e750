"""Experiment configuration: flat ``key = value`` files.

A config is an INI file with a single ``[run]`` section (or an equivalent
flat JSON object).  Values are parsed as JSON where possible and kept as
strings otherwise, so ``M = 10000``, ``u_points = [0.5, 1.0]`` and
``model = lagged_vol`` all work.  Registry parameters use dotted keys:
``model.lag = 2``, ``payoff.strike = 0.1``, ``family.blocks = 2``.

The accepted keys and their types are documented in
``data/config_schema.json``; see :func:`validate`.
"""
from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path as FsPath

import jsonschema
import numpy as np

from .control import ControlFamily, StoppingRule, make_grid_family
from .models import MODELS, make_model
from .pathspace import PathPrefix, TimeGrid
from .payoffs import PAYOFFS, make_payoff
from .sde import CoefficientSpec

SECTION = "run"
PREFIXES = ("model", "payoff", "family", "stop", "gexp", "sweep", "tol")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip()


def _format_value(v) -> str:
    return v if isinstance(v, str) else json.dumps(v)


def load_schema() -> dict:
    return json.loads(resources.files("pathctrl").joinpath("data/config_schema.json").read_text("utf-8"))


def validate(flat: dict) -> None:
    try:
        jsonschema.validate(flat, load_schema())
    except jsonschema.ValidationError as e:
        where = "/".join(map(str, e.absolute_path)) or "<root>"
        raise ConfigError(f"config key {where}: {e.message}") from None


@dataclass
class ExperimentConfig:
    model: str = "controlled_vol"
    payoff: str = "square"
    N: int = 4
    T: float = 1.0
    dim: int = 1
    x0: float = 0.0
    family: str = "constants"
    method: str = "tree"
    M: int = 10_000
    M_inner: int = 200
    seed: int = 0
    threads: int = 1
    split: str | int = "all"
    noise: str = "gaussian"
    node_cap: int = 2_000_000
    out: str = "out"
    model_params: dict = field(default_factory=dict)
    payoff_params: dict = field(default_factory=dict)
    family_params: dict = field(default_factory=dict)
    stop_params: dict = field(default_factory=dict)
    gexp_params: dict = field(default_factory=dict)
    sweep_params: dict = field(default_factory=dict)
    tol_params: dict = field(default_factory=dict)
    control: str = "optimal"        # fixed control for simulate/bsde: a family id or "optimal"
    buckets: int = 4

    # tolerances, overridable via tol.*
    @property
    def tol_tree(self) -> float:
        return float(self.tol_params.get("tree", 1e-12))

    @property
    def tol_K(self) -> float:
        return float(self.tol_params.get("K", 1e-10))

    @property
    def tol_se(self) -> float:
        return float(self.tol_params.get("se", 3.0))

    # --- flat representation -------------------------------------------
    def to_flat(self) -> dict:
        d = asdict(self)
        flat = {}
        for key, v in d.items():
            if key.endswith("_params"):
                pre = key[:-len("_params")]
                flat.update({f"{pre}.{k}": p for k, p in sorted(v.items())})
            else:
                flat[key] = v
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "ExperimentConfig":
        validate(flat)
        plain, nested = {}, {f"{p}_params": {} for p in PREFIXES}
        for key, v in flat.items():
            pre, dot, rest = key.partition(".")
            if dot:
                nested[f"{pre}_params"][rest] = v
            else:
                plain[key] = v
        cfg = cls(**plain, **nested)
        cfg.check()
        return cfg

    def check(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; known: {sorted(MODELS)}")
        if self.payoff not in PAYOFFS:
            raise ConfigError(f"unknown payoff {self.payoff!r}; known: {sorted(PAYOFFS)}")
        if self.method in ("tree", "both") and self.dim != 1:
            raise ConfigError("tree method needs dim = 1")
        if self.method in ("tree", "both"):
            b = 2 * len(self.coefficients().controls)
            nodes = sum(b ** j for j in range(self.N + 1))
            if nodes > self.node_cap:
                raise ConfigError(f"closed-loop tree needs {nodes} nodes, node_cap is {self.node_cap}")
        if self.split != "all" and not (isinstance(self.split, int) and 0 <= self.split <= self.N):
            raise ConfigError(f"split must be 'all' or an index in 0..{self.N}")

    def with_overrides(self, **kw) -> "ExperimentConfig":
        flat = self.to_flat()
        flat.update({k: v for k, v in kw.items() if v is not None})
        return ExperimentConfig.from_flat(flat)

    # --- builders ----------------------------------------------------------
    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.T, self.N)

    def coefficients(self) -> CoefficientSpec:
        return make_model(self.model, dim=self.dim, **self.model_params)

    def payoff_fn(self):
        return make_payoff(self.payoff, **self.payoff_params)

    def history(self) -> PathPrefix:
        return PathPrefix.start(self.grid, np.full(self.dim, float(self.x0)))

    def control_family(self) -> ControlFamily:
        p = dict(self.family_params)
        return make_grid_family(self.coefficients().controls, self.family, self.grid,
                                blocks=int(p.get("blocks", 2)),
                                thresholds=tuple(p.get("thresholds", (0.0,))),
                                cap=int(p.get("cap", 10_000)))

    def stopping_rule(self) -> StoppingRule | None:
        if "barrier" not in self.stop_params:
            return None
        b = float(self.stop_params["barrier"])
        cap = int(self.stop_params.get("cap", self.N))
        return StoppingRule(lambda p: np.abs(p.last[..., 0]) >= b, cap)


def _flat_from_ini(text: str) -> dict:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    if not cp.has_section(SECTION):
        raise ConfigError(f"config needs a [{SECTION}] section")
    extra = [s for s in cp.sections() if s != SECTION]
    if extra:
        raise ConfigError(f"unexpected sections {extra}")
    return {k: _parse_value(v) for k, v in cp.items(SECTION)}


def read_config(path) -> ExperimentConfig:
    text = FsPath(path).read_text("utf-8")
    return parse_config(text, json_format=str(path).endswith(".json"))


def parse_config(text: str, json_format: bool = False) -> ExperimentConfig:
    if json_format:
        flat = json.loads(text)
        if not isinstance(flat, dict):
            raise ConfigError("JSON config must be an object")
    else:
        try:
            flat = _flat_from_ini(text)
        except configparser.Error as e:
            raise ConfigError(str(e)) from None
    return ExperimentConfig.from_flat(flat)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical INI text; ``parse_config(dump_config(c))`` reproduces ``c``."""
    lines = [f"[{SECTION}]"]
    lines += [f"{k} = {_format_value(v)}" for k, v in cfg.to_flat().items()]
    return "\n".join(lines) + "\n"
