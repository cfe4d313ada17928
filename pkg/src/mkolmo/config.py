"""Experiment configuration: TOML schema, presets, overrides.

A run is fully determined by the validated config dict (the seed lives
in the ``mc`` section).  Validation is strict: unknown sections, keys,
or assertion rules are rejected so a typo cannot silently change an
experiment.  ``MKOLMO_SEED`` in the environment replaces the file seed
unless the command line set one explicitly.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

try:
    import tomllib as tomli
except ModuleNotFoundError:      # Python < 3.11
    import tomli

from .measure import ParticleMeasure

EXPERIMENT_KINDS = (
    "ito_zakai", "ito_ks", "kolmogorov_zakai", "kolmogorov_ks",
    "pde_residual", "approximation_study", "oracle_crosscheck",
    "derivative_study",
)

# extra top-level keys each kind understands, beyond the common ones
_COMMON_TOP = {"kind", "id", "out", "workers"}
_KIND_TOP: Dict[str, set] = {
    "ito_zakai": {"residuals"},
    "ito_ks": {"residuals"},
    "kolmogorov_zakai": {"s"},
    "kolmogorov_ks": {"s"},
    "pde_residual": {"s", "equation", "fd_step"},
    "approximation_study": {"sizes", "cutoff_n"},
    "oracle_crosscheck": {"dx", "grid_half_width"},
    "derivative_study": {"check", "s", "inner_replicas"},
}
_SECTIONS = {"model", "functional", "measure", "mc", "assertions"}
_MC_KEYS = {"replicas", "particles", "dt", "seed", "horizon"}
_MEASURE_KEYS = {"preset", "points", "weights", "n", "normalize"}
_FUNCTIONAL_KEYS = {"name"}

# assertion rules understood by the runner, per summary field
ASSERTION_RULES = {"max", "min", "abs_max", "z_max", "se_max",
                   "within_se", "true", "max_all", "min_all"}


class ConfigError(Exception):
    """Invalid configuration; message carries location where available."""


def _fixed_atoms(points, weights) -> ParticleMeasure:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    return ParticleMeasure(pts, np.asarray(weights, dtype=np.float64))


def _mix8() -> ParticleMeasure:
    return _fixed_atoms(
        [-1.4, -1.0, -0.6, -0.2, 0.2, 0.6, 1.0, 1.4],
        [0.06, 0.10, 0.16, 0.18, 0.17, 0.15, 0.11, 0.07])


def _pair2() -> ParticleMeasure:
    return _fixed_atoms([-0.5, 0.7], [0.55, 0.45])


def _spread4() -> ParticleMeasure:
    return _fixed_atoms([-1.1, -0.3, 0.4, 1.2], [0.4, 0.5, 0.35, 0.45])


#: fixed atom clouds addressable by name from the [measure] section
MEASURE_PRESETS = {
    "mix8": _mix8,
    "pair2": _pair2,
    "spread4": _spread4,
}

#: per-replica sampled initial ensembles; "n" sets the size
SAMPLED_PRESETS = ("bimodal_cloud", "gauss_cloud")


def sample_preset(name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw an initial particle cloud for a sampled measure preset."""
    if name == "bimodal_cloud":
        side = rng.uniform(size=n) < 0.6
        base = 0.4 * rng.standard_normal(n)
        return np.where(side, 0.8 + base, -0.8 + base)[:, None]
    if name == "gauss_cloud":
        return rng.standard_normal((n, 1))
    raise ConfigError(f"unknown sampled preset {name!r}")


@dataclass
class MeasureSpec:
    preset: Optional[str] = None
    points: Optional[list] = None
    weights: Optional[list] = None
    n: Optional[int] = None
    normalize: bool = False

    @property
    def sampled(self) -> bool:
        return self.preset in SAMPLED_PRESETS

    def build(self) -> ParticleMeasure:
        if self.sampled:
            raise ConfigError(f"preset {self.preset!r} is sampled per "
                              "replica and has no fixed atoms")
        if self.preset is not None:
            mu = MEASURE_PRESETS[self.preset]()
        else:
            mu = _fixed_atoms(self.points, self.weights)
        return mu.normalize() if self.normalize else mu


@dataclass
class ExperimentConfig:
    kind: str
    id: str
    out: str
    workers: int
    model_name: str
    model_params: Dict[str, float]
    functional_name: str
    measure: MeasureSpec
    mc: Dict[str, float]
    assertions: Dict[str, Dict[str, object]]
    extra: Dict[str, object]          # kind-specific top-level keys
    raw: dict = field(repr=False)     # validated dict incl. every default

    def sha256(self) -> str:
        return config_sha256(self.raw)


def config_sha256(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _type_err(path: str, want: str, got) -> ConfigError:
    return ConfigError(f"{path}: expected {want}, got {got!r}")


def _check_num(d: dict, key: str, path: str, integer=False):
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise _type_err(f"{path}.{key}", "a number", v)
    if integer and int(v) != v:
        raise _type_err(f"{path}.{key}", "an integer", v)
    return int(v) if integer else float(v)


def parse_toml(text: str) -> dict:
    """Parse TOML, converting decode errors to ConfigError (line/column)."""
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"TOML parse error: {e}") from None


def parse_override_value(text: str):
    """Interpret an override value the way the file format would."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, pairs: List[Tuple[str, str]]) -> dict:
    """Apply dotted ``--key value`` pairs; bare ``seed`` means mc.seed."""
    out = json.loads(json.dumps(raw))   # deep copy, JSON-safe by parse
    for key, text in pairs:
        if key == "seed":
            key = "mc.seed"
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} crosses scalar {p!r}")
        node[parts[-1]] = parse_override_value(text)
    return out


def validate(raw: dict, override_keys: Tuple[str, ...] = (),
             default_id: str = "experiment") -> ExperimentConfig:
    """Validate, apply defaults and the seed env override, and type-check."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table")
    raw = json.loads(json.dumps(raw))

    kind = raw.get("kind")
    if kind is None:
        raise ConfigError("missing top-level key 'kind'")
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"unknown kind {kind!r}; known: "
                          f"{', '.join(EXPERIMENT_KINDS)}")

    allowed_top = _COMMON_TOP | _KIND_TOP[kind] | _SECTIONS
    for key in raw:
        if key not in allowed_top:
            raise ConfigError(f"unknown top-level key {key!r} for kind "
                              f"{kind!r}")

    exp_id = raw.setdefault("id", default_id)
    if not isinstance(exp_id, str):
        raise _type_err("id", "a string", exp_id)
    out_dir = raw.setdefault("out", f"runs/{exp_id}")
    if not isinstance(out_dir, str):
        raise _type_err("out", "a string", out_dir)
    workers = _check_num(raw, "workers", "", integer=True) \
        if "workers" in raw else raw.setdefault("workers", 1)
    if workers < 1:
        raise ConfigError("workers must be >= 1")

    model = raw.get("model")
    if not isinstance(model, dict) or "name" not in model:
        raise ConfigError("[model] section with a 'name' key is required")
    if not isinstance(model["name"], str):
        raise _type_err("model.name", "a string", model["name"])
    model_params = {}
    for k, v in model.items():
        if k == "name":
            continue
        model_params[k] = _check_num(model, k, "model")

    functional = raw.get("functional", {})
    if not isinstance(functional, dict):
        raise _type_err("functional", "a table", functional)
    for k in functional:
        if k not in _FUNCTIONAL_KEYS:
            raise ConfigError(f"unknown key functional.{k}")
    functional_name = functional.get("name", "")
    if functional_name and not isinstance(functional_name, str):
        raise _type_err("functional.name", "a string", functional_name)

    measure = raw.get("measure", {})
    if not isinstance(measure, dict):
        raise _type_err("measure", "a table", measure)
    for k in measure:
        if k not in _MEASURE_KEYS:
            raise ConfigError(f"unknown key measure.{k}")
    spec = MeasureSpec(
        preset=measure.get("preset"),
        points=measure.get("points"),
        weights=measure.get("weights"),
        n=int(measure["n"]) if "n" in measure else None,
        normalize=bool(measure.get("normalize", False)))
    if spec.preset is not None:
        if spec.preset not in MEASURE_PRESETS \
                and spec.preset not in SAMPLED_PRESETS:
            raise ConfigError(f"unknown measure preset {spec.preset!r}")
        if spec.points is not None or spec.weights is not None:
            raise ConfigError("measure: give either a preset or "
                              "points/weights, not both")
    elif (spec.points is None) != (spec.weights is None):
        raise ConfigError("measure: points and weights must come together")

    mc_raw = raw.setdefault("mc", {})
    if not isinstance(mc_raw, dict):
        raise _type_err("mc", "a table", mc_raw)
    for k in mc_raw:
        if k not in _MC_KEYS:
            raise ConfigError(f"unknown key mc.{k}")
    mc_raw.setdefault("replicas", 400)
    mc_raw.setdefault("particles", 2000)
    mc_raw.setdefault("dt", 1e-3)
    mc_raw.setdefault("seed", 0)
    mc_raw.setdefault("horizon", 1.0)
    env_seed = os.environ.get("MKOLMO_SEED")
    if env_seed is not None and "mc.seed" not in override_keys \
            and "seed" not in override_keys:
        try:
            mc_raw["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"MKOLMO_SEED must be an integer, got "
                              f"{env_seed!r}") from None
    mc = {
        "replicas": _check_num(mc_raw, "replicas", "mc", integer=True),
        "particles": _check_num(mc_raw, "particles", "mc", integer=True),
        "dt": _check_num(mc_raw, "dt", "mc"),
        "seed": _check_num(mc_raw, "seed", "mc", integer=True),
        "horizon": _check_num(mc_raw, "horizon", "mc"),
    }
    if mc["replicas"] < 1 or mc["particles"] < 1 or mc["dt"] <= 0:
        raise ConfigError("mc: replicas, particles must be >= 1 and dt > 0")

    assertions = raw.get("assertions", {})
    if not isinstance(assertions, dict):
        raise _type_err("assertions", "a table", assertions)
    for field_name, rules in assertions.items():
        if not isinstance(rules, dict):
            raise ConfigError(f"assertions.{field_name} must be a table "
                              "of rule = bound entries")
        for rule in rules:
            if rule not in ASSERTION_RULES:
                raise ConfigError(
                    f"unknown assertion rule {rule!r} under "
                    f"assertions.{field_name}; known: "
                    f"{', '.join(sorted(ASSERTION_RULES))}")

    extra = {k: raw[k] for k in _KIND_TOP[kind] if k in raw}
    return ExperimentConfig(
        kind=kind, id=exp_id, out=out_dir, workers=int(raw["workers"]),
        model_name=model["name"], model_params=model_params,
        functional_name=functional_name, measure=spec, mc=mc,
        assertions=assertions, extra=extra, raw=raw)


def load_config(path: str, overrides: List[Tuple[str, str]] = ()) \
        -> ExperimentConfig:
    """Read, override, and validate a config file."""
    try:
        with open(path, "rb") as fh:
            text = fh.read().decode()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from None
    raw = parse_toml(text)
    raw = apply_overrides(raw, list(overrides))
    stem = os.path.splitext(os.path.basename(path))[0]
    return validate(raw, override_keys=tuple(k for k, _ in overrides),
                    default_id=stem)
