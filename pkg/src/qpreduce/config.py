"""Experiment configuration: YAML files with named presets."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .spectral_basis import DiscretizationParams, PotentialSpec
from .symbols import HypothesisViolation, QPSymbol, check_hypotheses, effective_beta, symbol_from_preset

__all__ = [
    "ConfigError",
    "HypothesisViolation",
    "ExperimentConfig",
    "bundled_presets",
    "load_config",
    "config_from_dict",
    "apply_overrides",
]


class ConfigError(ValueError):
    pass


def _read_bundled() -> dict:
    text = resources.files("qpreduce").joinpath("presets.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text)


def bundled_presets() -> list[str]:
    return sorted(_read_bundled()["presets"])


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("W0", "W1", "psi0"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    return yaml.safe_load(text)


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``key.sub=value`` strings (values parsed as YAML)."""
    out = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-mapping key {p!r}")
        node[parts[-1]] = _parse_value(value)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    name: str

    # -- derived views --------------------------------------------------------
    @property
    def potential(self) -> PotentialSpec:
        p = self.raw["potential"]
        return PotentialSpec(
            ell=float(p["ell"]),
            lower_terms=tuple((float(a), float(c)) for a, c in p.get("lower_terms") or ()),
            domain_halfwidth=float(p["halfwidth"]),
        )

    @property
    def discretization(self) -> DiscretizationParams:
        d = self.raw["discretization"]
        return DiscretizationParams(grid_size=int(d["grid_size"]), method=str(d["method"]))

    @property
    def n_modes(self) -> int:
        return int(self.raw["discretization"]["n_modes"])

    @property
    def n_freq(self) -> int:
        return int(self.raw["n_freq"])

    @property
    def omega(self) -> np.ndarray:
        return np.asarray(self.raw["omega"], dtype=float)

    @property
    def eps(self) -> float:
        return float(self.raw["eps"])

    @property
    def W0(self) -> QPSymbol:
        return symbol_from_preset(self.raw.get("W0"), self.n_freq)

    @property
    def W1(self) -> QPSymbol:
        return symbol_from_preset(self.raw.get("W1"), self.n_freq)

    @property
    def tau(self) -> float:
        t = self.raw["diophantine"].get("tau")
        return float(self.n_freq if t is None else t)

    @property
    def gamma(self) -> float:
        return float(self.raw["diophantine"]["gamma"])

    @property
    def seed(self) -> int:
        return int(self.raw["rng_seed"])

    @property
    def beta(self) -> float:
        return effective_beta(self.W0.declared_order, self.W1.declared_order)

    def psi0(self) -> np.ndarray:
        spec = self.raw["simulation"]["psi0"]
        psi = np.zeros(self.n_modes, dtype=complex)
        modes = list(spec.get("modes", [0]))
        amps = spec.get("amplitudes") or [1.0] * len(modes)
        for j, a in zip(modes, amps):
            psi[int(j)] = complex(a)
        return psi / np.linalg.norm(psi)

    def canonical(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def with_overrides(self, overrides) -> "ExperimentConfig":
        return config_from_dict(apply_overrides(self.raw, overrides), self.name)


def _validate(raw: dict) -> None:
    n = raw.get("n_freq")
    if not isinstance(n, int) or n < 1:
        raise ConfigError("n_freq must be a positive integer")
    om = raw.get("omega")
    if om is None or len(om) != n:
        raise ConfigError(f"omega must list {n} frequencies")
    if not all(1.0 <= float(w) <= 2.0 for w in om):
        raise ConfigError("frequencies must lie in [1, 2]")
    if not abs(float(raw["eps"])) < 1.0:
        raise ConfigError("|eps| must be < 1")
    d = raw["discretization"]
    if 3 * int(d["n_modes"]) > int(d["grid_size"]):
        raise ConfigError("n_modes must not exceed grid_size / 3")


def config_from_dict(raw: dict, name: str = "custom") -> ExperimentConfig:
    """Merge with the bundled defaults, validate, and apply the hypothesis gate."""
    bundled = _read_bundled()
    merged = _merge(bundled["defaults"], raw)
    try:
        _validate(merged)
        cfg = ExperimentConfig(raw=merged, name=name)
        cfg.potential
        cfg.discretization
        W0, W1 = cfg.W0, cfg.W1
    except (KeyError, TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"invalid configuration: {err}") from err
    if not merged.get("allow_out_of_hypothesis", False):
        check_hypotheses(cfg.potential.ell, W0.declared_order, W1.declared_order)
    return cfg


def load_config(source: str | Path | dict, overrides=(), allow_out_of_hypothesis: bool | None = None) -> ExperimentConfig:
    """Load a bundled preset by name, a YAML file, or a mapping.

    A file may contain ``preset: <name>`` to start from a bundled block.
    Raises :class:`~qpreduce.symbols.HypothesisViolation` when
    beta >= 2 ell - 1 or beta1 > ell unless the override is requested.
    """
    bundled = _read_bundled()["presets"]
    if isinstance(source, dict):
        raw, name = copy.deepcopy(source), "custom"
    elif isinstance(source, str) and source in bundled:
        raw, name = copy.deepcopy(bundled[source]), source
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"no preset or file named {source!r}; presets: {', '.join(sorted(bundled))}")
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        name = path.stem
    if "preset" in raw:
        base = raw.pop("preset")
        if base not in bundled:
            raise ConfigError(f"unknown preset {base!r}")
        raw = _merge(bundled[base], raw)
        name = f"{base}:{name}" if name not in ("custom", base) else base
    raw = apply_overrides(raw, overrides)
    if allow_out_of_hypothesis is not None:
        raw["allow_out_of_hypothesis"] = bool(allow_out_of_hypothesis)
    return config_from_dict(raw, name)
