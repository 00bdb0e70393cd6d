"""INI run configuration with strict keys and line-numbered errors.

Sections and keys::

    [data]       d, b, eta, sigma, sigma_x, sigma_y, seed,
                 input, input_scale, mixture_weights, mixture_scales, standardize
    [sgd]        K, K0, replicas, mode, n, replacement, overflow_threshold
    [theory]     n, tol, method
    [sweep]      eta, b, d, sigma            (comma-separated lists)
    [estimator]  k1_grid, min_k2, flatten

Every section and key is optional; unknown ones are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from itertools import product
from typing import Any, Callable, Optional

from .data_gen import GaussianStreamSpec, InputDistribution
from .sgd_engine import RunConfig
from .stable_estim import EstimatorConfig
from .tail_theory import DEFAULT_N, METHODS


class ConfigError(ValueError):
    """Invalid configuration; ``lineno`` points at the offending line when known."""

    def __init__(self, message: str, lineno: Optional[int] = None, path: Optional[str] = None):
        self.lineno = lineno
        self.path = path
        where = f"{path or '<config>'}:{lineno}: " if lineno else f"{path or '<config>'}: "
        super().__init__(where + message)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _int(s: str) -> int:
    f = float(s)
    if f != int(f):
        raise ValueError(f"expected an integer, got {s!r}")
    return int(f)


def _list(conv: Callable[[str], Any]) -> Callable[[str], tuple]:
    def parse(s: str) -> tuple:
        items = [t.strip() for t in s.split(",")]
        if not any(items):
            raise ValueError("empty list")
        if not all(items):
            raise ValueError(f"empty entry in list {s!r}")
        return tuple(conv(t) for t in items)

    return parse


SCHEMA: dict[str, dict[str, Callable[[str], Any]]] = {
    "data": {
        "d": _int,
        "b": _int,
        "eta": float,
        "sigma": float,
        "sigma_x": float,
        "sigma_y": float,
        "seed": _int,
        "input": str,
        "input_scale": float,
        "mixture_weights": _list(float),
        "mixture_scales": _list(float),
        "standardize": _bool,
    },
    "sgd": {
        "k": _int,
        "k0": _int,
        "replicas": _int,
        "mode": str,
        "n": _int,
        "replacement": _bool,
        "overflow_threshold": float,
    },
    "theory": {"n": _int, "tol": float, "method": str},
    "sweep": {"eta": _list(float), "b": _list(_int), "d": _list(_int), "sigma": _list(float)},
    "estimator": {"k1_grid": _list(_int), "min_k2": _int, "flatten": _bool},
}


@dataclass(frozen=True)
class TheorySettings:
    n: int = DEFAULT_N
    tol: float = 1e-3
    method: str = "stratified"


@dataclass(frozen=True)
class Settings:
    spec: GaussianStreamSpec
    run: RunConfig
    theory: TheorySettings = TheorySettings()
    estimator: EstimatorConfig = EstimatorConfig()
    sweep: dict[str, tuple] = field(default_factory=dict)

    def axes(self) -> dict[str, tuple]:
        """Grid axes in row-major order, each defaulting to the single ``[data]`` value."""
        base = {"eta": (self.spec.eta,), "b": (self.spec.b,), "d": (self.spec.d,), "sigma": (self.spec.sigma,)}
        base.update(self.sweep)
        return base

    def cells(self) -> list[GaussianStreamSpec]:
        ax = self.axes()
        return [
            dataclasses.replace(self.spec, eta=eta, b=b, d=d, sigma=sigma)
            for eta, b, d, sigma in product(ax["eta"], ax["b"], ax["d"], ax["sigma"])
        ]

    def with_seed(self, seed: int) -> "Settings":
        return dataclasses.replace(self, spec=dataclasses.replace(self.spec, seed=seed))

    def echo(self) -> dict:
        spec = dataclasses.asdict(self.spec)
        return {
            "data": spec,
            "sgd": dataclasses.asdict(self.run),
            "theory": dataclasses.asdict(self.theory),
            "estimator": dataclasses.asdict(self.estimator),
            "sweep": {k: list(v) for k, v in self.axes().items()},
        }


_KEY_RE = re.compile(r"^\s*([^=:\s][^=:]*?)\s*[=:]")
_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")


def _line_index(text: str) -> dict[tuple[str, str], int]:
    """Map ``(section, key)`` to its 1-based line number."""
    out, section = {}, None
    for i, line in enumerate(text.splitlines(), start=1):
        if line.lstrip().startswith(("#", ";")):
            continue
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            out[(section, "")] = i
            continue
        m = _KEY_RE.match(line)
        if m and section is not None and not line[:1].isspace():
            out[(section, m.group(1).strip().lower())] = i
    return out


def parse_config(text: str, path: Optional[str] = None) -> Settings:
    cp = configparser.ConfigParser(interpolation=None, strict=True, inline_comment_prefixes=(";", "#"), default_section="\x00defaults")
    try:
        cp.read_string(text, source=path or "<config>")
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("key outside of any [section]", e.lineno, path) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as e:
        raise ConfigError(e.message.splitlines()[0].split(": ", 1)[-1], e.lineno, path) from None
    except configparser.ParsingError as e:
        lineno = e.errors[0][0] if e.errors else None
        raise ConfigError("cannot parse line", lineno, path) from None
    lines = _line_index(text)
    raw: dict[str, dict[str, Any]] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]; expected one of {sorted(SCHEMA)}", lines.get((section, "")), path)
        raw[section] = {}
        for key, value in cp.items(section):
            lineno = lines.get((section, key))
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", lineno, path)
            try:
                raw[section][key] = SCHEMA[section][key](value)
            except ValueError as e:
                raise ConfigError(f"[{section}] {key}: {e}", lineno, path) from None
    try:
        return _build(raw)
    except ValueError as e:
        raise ConfigError(str(e), None, path) from None


def _build(raw: dict[str, dict[str, Any]]) -> Settings:
    data = dict(raw.get("data", {}))
    kind = data.pop("input", "gaussian")
    inputs = InputDistribution(
        kind,
        scale=data.pop("input_scale", 1.0),
        weights=data.pop("mixture_weights", ()),
        scales=data.pop("mixture_scales", ()),
        standardize=data.pop("standardize", True),
    )
    data.setdefault("d", 10)
    data.setdefault("b", 5)
    data.setdefault("eta", 0.1)
    spec = GaussianStreamSpec(inputs=inputs, **data)

    sgd = {k.upper() if k in ("k", "k0") else k: v for k, v in raw.get("sgd", {}).items()}
    sgd.setdefault("K", 2000)
    sgd.setdefault("K0", min(1000, sgd["K"] - 1))
    run = RunConfig(**sgd)

    theory = TheorySettings(**raw.get("theory", {}))
    if theory.method not in METHODS:
        raise ValueError(f"[theory] method must be one of {METHODS}, got {theory.method!r}")
    if theory.n < 1000:
        raise ValueError(f"[theory] n must be at least 1000, got {theory.n}")
    if not theory.tol > 0:
        raise ValueError("[theory] tol must be positive")

    est = raw.get("estimator", {})
    if "k1_grid" in est:
        est["k1_grid"] = tuple(est["k1_grid"])
    estimator = EstimatorConfig(**est)
    sweep = dict(raw.get("sweep", {}))
    for name, axis in sweep.items():
        for v in axis:
            dataclasses.replace(spec, **{name: v})  # validates each axis value
    return Settings(spec, run, theory, estimator, sweep)


def load_config(path: Optional[str]) -> Settings:
    if path is None:
        return parse_config("")
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", None, path) from None
    return parse_config(text, path)
