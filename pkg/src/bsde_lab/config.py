"""Scenario configuration: TOML file plus dotted ``key=value`` overrides.

Every key must appear in ``DEFAULTS``; anything else is rejected.
``terminal.params`` is free-form and checked by the terminal constructor.
"""
from __future__ import annotations

import copy
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .regression import RegressionConfig
from .scenario import GeneratorSpec, PathEnsemble, TerminalSpec, TimeGrid, get_generator, make_terminal, simulate_brownian
from .solver import SOLVER_METHODS, SolverConfig
from .special_functions import CriticalParams

COMMANDS = ("verify-functions", "solve", "estimate", "uniqueness", "report")

DEFAULTS: dict = {
    "horizon": 1.0,
    "n_steps": 50,
    "dim": 1,
    "n_paths": 100_000,
    "seed": None,
    "shard_count": 1,
    "generator": {"name": "abs_z", "beta": 0.0, "gamma": 0.5},
    "terminal": {"name": "critical", "params": {"epsilon": 1.0}},
    "solver": {"method": "euler", "degree": 2, "ridge": 0.0, "kind": "bins", "n_bins": 20,
               "max_iter": 100, "tol": 1e-8},
    "estimate": {"anchor_index": 1, "thresholds": [1.0, 10.0, 100.0], "class_d_fraction": 0.5,
                 "max_violation_rate": 0.01},
    "uniqueness": {"second_method": "picard", "depth": 5, "abs_tol": 0.0, "kind": "polynomial"},
    "verify": {"gammas": [0.5, 1.0, 3.0], "anchors": [0.01, 0.5, 1.0], "n_points": 10_000, "x_max": 1e8,
               "young_samples": 100_000, "young_seeds": 10, "beta": 0.0},
    "output": {"csv_max_paths": 1000},
}

FREE_FORM = {("terminal", "params")}


def _merge(base: dict, new: dict, path: tuple = ()) -> None:
    for key, value in new.items():
        where = path + (key,)
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(where)!r}")
        if where in FREE_FORM:
            if not isinstance(value, dict):
                raise ConfigError(f"{'.'.join(where)} must be a table")
            base[key] = dict(value)
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{'.'.join(where)} must be a table")
            _merge(base[key], value, where)
        else:
            base[key] = _coerce(base[key], value, ".".join(where))


def _coerce(default: Any, value: Any, name: str) -> Any:
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name} must be a list")
        return value
    return value


def parse_override(item: str) -> dict:
    """'a.b=1.5' -> {'a': {'b': 1.5}}; the value is read as TOML, else as a bare string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    out: dict = {}
    node = out
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


@dataclass
class Scenario:
    """Validated configuration tree with constructors for the objects it names."""

    data: dict

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> Optional[int]:
        return self.data["seed"]

    def grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.data["horizon"], self.data["n_steps"])

    def ensemble(self) -> PathEnsemble:
        d = self.data
        return simulate_brownian(self.grid(), d["dim"], d["n_paths"], seed=d["seed"], shard_count=d["shard_count"])

    def generator(self) -> GeneratorSpec:
        g = self.data["generator"]
        return get_generator(g["name"], g["beta"], g["gamma"])

    def terminal(self) -> TerminalSpec:
        t = self.data["terminal"]
        return make_terminal(t["name"], t["params"], self.grid())

    def params(self) -> CriticalParams:
        g = self.data["generator"]
        try:
            return CriticalParams(g["gamma"], g["beta"], self.data["horizon"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def regression(self, kind: Optional[str] = None) -> RegressionConfig:
        s = self.data["solver"]
        try:
            return RegressionConfig(degree=s["degree"], ridge=s["ridge"], kind=kind or s["kind"], n_bins=s["n_bins"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def solver(self, method: Optional[str] = None, kind: Optional[str] = None) -> SolverConfig:
        s = self.data["solver"]
        return SolverConfig(method or s["method"], self.regression(kind), s["max_iter"], s["tol"])


def validate(data: dict, need_seed: bool) -> None:
    if need_seed and data["seed"] is None:
        raise ConfigError("a seed is required for stochastic commands (--seed or seed = ...)")
    if data["seed"] is not None and (isinstance(data["seed"], bool) or not isinstance(data["seed"], int)
                                     or data["seed"] < 0):
        raise ConfigError("seed must be a nonnegative integer")
    if not data["horizon"] > 0:
        raise ConfigError("horizon must be positive")
    for key in ("n_steps", "dim", "n_paths", "shard_count"):
        if data[key] < 1:
            raise ConfigError(f"{key} must be >= 1")
    if not data["generator"]["gamma"] > 0:
        raise ConfigError("generator.gamma must be positive")
    if data["generator"]["beta"] < 0:
        raise ConfigError("generator.beta must be nonnegative")
    for key in ("method",):
        if data["solver"][key] not in SOLVER_METHODS:
            raise ConfigError(f"solver.method must be one of {SOLVER_METHODS}")
    if data["uniqueness"]["second_method"] not in SOLVER_METHODS:
        raise ConfigError(f"uniqueness.second_method must be one of {SOLVER_METHODS}")
    if any(not g > 0 for g in data["verify"]["gammas"]):
        raise ConfigError("verify.gammas must all be positive")


def load_config(path: Optional[str | Path] = None, overrides: Sequence[str] = (), seed: Optional[int] = None,
                need_seed: bool = True) -> Scenario:
    data = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, "rb") as fh:
                _merge(data, tomllib.load(fh))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    for item in overrides:
        _merge(data, parse_override(item))
    if seed is not None:
        data["seed"] = seed
    validate(data, need_seed)
    return Scenario(data)
