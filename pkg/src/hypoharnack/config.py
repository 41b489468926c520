"""Experiment configuration: YAML file with nested defaults and validation."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import yaml

from .degiorgi import ExponentError, check_exponents
from .grid import Grid

CAMPAIGNS = ("kernel-validate", "hypothesis1", "dual-spreading", "sup-bound", "weak-harnack", "convergence")

DEFAULTS = {
    "campaign": "kernel-validate",
    "seed": 0,
    "jobs": 1,
    "output_dir": "out",
    "grid": {"t_lo": -1.0, "t_hi": 0.0, "nt": 32, "x_half": 3.0, "nx": 33, "v_half": 3.0, "nv": 33},
    "coefficients": {"kind": "identity", "lam": 1.0, "Lam": 1.0, "cell": 0.25, "lower_order": {}},
    "exponents": {
        "p0": 2.25,
        "p1": 2.5,
        "p2": 2.0,
        "gamma0": 2.0,
        "gamma1": 2.0,
        "q_Lam": math.inf,
        "q_b": 40.0,
        "q_c": math.inf,
        "q_d": 20.0,
    },
    "cylinders": {"inner": [0.25, 0.5], "outer": [0.5, 1.0]},
    "kernel": {"levels": [33, 65, 129], "taus": [0.1, 0.5, 1.0]},
    "hypothesis1": {"trials": 50, "levels": 2},
    "dual": {"eta": 0.25, "trials": 5, "R": 1.5},
    "sup_bound": {"cases": 5, "Lam_ratio": 4.0, "beta": 1.0, "width": 0.3},
    "harnack": {"eta": 0.25, "C_R": 1.5, "beta": 0.0, "width": 0.5},
    "convergence": {"eps_values": [0.1, 0.01, 0.001]},
    "acceptance": {
        "normalization_tol": 1e-6,
        "min_order": 1.8,
        "h1_change": 0.2,
        "sup_overshoot": 10.0,
        "cs_stability": 0.3,
        "mu_stability": 0.25,
        "energy_spread": 2.0,
    },
}

# grids used when a campaign does not set one explicitly
CAMPAIGN_GRIDS = {
    "hypothesis1": {"t_lo": -1.0, "t_hi": 0.0, "nt": 24, "x_half": 6.0, "nx": 97, "v_half": 4.0, "nv": 65},
    "dual-spreading": {"t_lo": -1.0, "t_hi": 0.0, "nt": 24, "x_half": 26.0, "nx": 261, "v_half": 13.0, "nv": 131},
    "sup-bound": {"t_lo": -1.0, "t_hi": 0.0, "nt": 32, "x_half": 3.0, "nx": 33, "v_half": 3.0, "nv": 33},
    "weak-harnack": {"t_lo": -1.0, "t_hi": 0.0, "nt": 24, "x_half": 26.0, "nx": 261, "v_half": 13.0, "nv": 131},
    "convergence": {"t_lo": -1.0, "t_hi": 0.0, "nt": 24, "x_half": 4.0, "nx": 49, "v_half": 4.0, "nv": 49},
}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        p = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(p, "unknown field")
        if isinstance(base[k], dict) and k != "lower_order":
            if not isinstance(v, dict):
                raise ConfigError(p, "expected a mapping")
            out[k] = _merge(base[k], v, p)
        else:
            out[k] = v
    return out


def _number(x, path: str) -> float:
    if isinstance(x, str) and x.strip().lower() in ("inf", "+inf", "infinity"):
        return math.inf
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ConfigError(path, f"expected a number, got {x!r}")
    return float(x)


@dataclass
class ExperimentConfig:
    data: dict

    @property
    def campaign(self) -> str:
        return self.data["campaign"]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def exponents(self) -> dict:
        return self.data["exponents"]

    def grid(self) -> Grid:
        return Grid(**self.data["grid"])

    def section(self, name: str) -> dict:
        return self.data[name]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def get(self, dotted: str):
        node = self.data
        for part in dotted.split("."):
            node = node[part]
        return node

    def with_value(self, dotted: str, value) -> "ExperimentConfig":
        parts = dotted.split(".")
        over: dict = {}
        node = over
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
        return load_dict(_merge(self.data, over))


def validate(data: dict) -> dict:
    if data["campaign"] not in CAMPAIGNS:
        raise ConfigError("campaign", f"must be one of {', '.join(CAMPAIGNS)}")
    if not isinstance(data["seed"], int) or isinstance(data["seed"], bool):
        raise ConfigError("seed", "expected an integer")
    g = data["grid"]
    for k in ("nt", "nx", "nv"):
        if not isinstance(g[k], int) or g[k] < 3:
            raise ConfigError(f"grid.{k}", "expected an integer >= 3")
    for k in ("t_lo", "t_hi", "x_half", "v_half"):
        g[k] = _number(g[k], f"grid.{k}")
    if not g["t_lo"] < g["t_hi"]:
        raise ConfigError("grid.t_hi", "must exceed grid.t_lo")
    ex = {k: _number(v, f"exponents.{k}") for k, v in data["exponents"].items()}
    p2 = ex.pop("p2")
    try:
        full = check_exponents(ex)
    except ExponentError as exc:
        raise ConfigError("exponents", str(exc)) from None
    if p2 < 2:
        raise ConfigError("exponents.p2", "need p2 >= 2")
    full["p2"] = p2
    data["exponents"] = full
    for name in ("inner", "outer"):
        sc = data["cylinders"][name]
        if not (isinstance(sc, (list, tuple)) and len(sc) == 2):
            raise ConfigError(f"cylinders.{name}", "expected [s, r]")
        data["cylinders"][name] = [_number(x, f"cylinders.{name}") for x in sc]
    (s, r), (S, R) = data["cylinders"]["inner"], data["cylinders"]["outer"]
    if not (0 < s < S and 0 < r < R):
        raise ConfigError("cylinders", "need 0 < inner < outer in both scales")
    c = data["coefficients"]
    if _number(c["Lam"], "coefficients.Lam") < _number(c["lam"], "coefficients.lam"):
        raise ConfigError("coefficients.Lam", "must be at least coefficients.lam")
    return data


def derived_exponents(ex: dict) -> dict:
    """q_bar0 and q_bar2 from 1/q + 1/p = 1/2."""
    def conj(p):
        x = 0.5 - 1 / p
        return math.inf if x <= 0 else 1 / x

    return {"qbar0": conj(ex["p0"]), "qbar2": conj(ex["p2"])}


def load_dict(raw: dict | None) -> ExperimentConfig:
    raw = dict(raw or {})
    campaign = raw.get("campaign", DEFAULTS["campaign"])
    base = copy.deepcopy(DEFAULTS)
    if campaign in CAMPAIGN_GRIDS:
        base["grid"] = dict(CAMPAIGN_GRIDS[campaign])
    return ExperimentConfig(validate(_merge(base, raw)))


def load(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a mapping")
    return load_dict(raw)


def dump_defaults() -> str:
    return yaml.safe_dump(DEFAULTS, sort_keys=True)
