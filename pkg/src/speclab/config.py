"""Experiment configs: one JSON schema, validated before any computation.

The schema mirrors the domain dataclasses.  A config holds a grid block, a
potential spec, a conjugate-operator preset, an optional list of conjugation
weights, the experiment name, and a ``params`` block whose keys are checked
per experiment.  Validation coerces numbers, fills documented defaults, and
rejects unknown keys, so a typo fails loudly before any matrix is built.

A validated config canonicalises to a plain dict (``config_to_dict``) whose
sorted-key JSON encoding is hashed; the hash identifies the effective run
rather than the file formatting, and every artifact a run writes embeds it.
``config_from_dict(config_to_dict(c))`` reproduces ``c`` exactly, which is
what lets results.json round-trip through the schema.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .grid import Grid, make_grid
from .operators import ConjugateSpec, WeightSpec
from .potentials import PotentialSpec, ResolutionError, build_potential

__all__ = [
    "EXPERIMENTS",
    "ConfigError",
    "ExperimentConfig",
    "apply_override",
    "config_from_dict",
    "config_hash",
    "config_to_dict",
    "load_config",
]

EXPERIMENTS = (
    "spectrum",
    "decay",
    "mourre",
    "lap",
    "hypothesis",
    "hscheck",
    "regularity",
    "scan",
)

# Desk-scale default box: resolves slowly oscillating tails out to |x| = 40
# while keeping every operator on the dense linear-algebra path.
DEFAULT_HALF_LENGTH = 40.0
DEFAULT_N = 2048

_CONFIG_KEYS = {
    "experiment",
    "grid",
    "potential",
    "conjugate",
    "weights",
    "params",
    "seed",
    "output_dir",
}

_WEIGHT_KEYS = {"kind", "tau", "eps", "alpha", "beta", "gamma"}

# Per-experiment parameter vocabulary; anything else in params is rejected,
# except generic "*_file" references, which are checked for existence and
# carried through untouched.
_ALLOWED_PARAMS = {
    "spectrum": {"window", "count"},
    "decay": {"level", "beta_grid"},
    "mourre": {"windows", "discard_r"},
    "lap": {"energy", "s", "mu_sequence"},
    "hypothesis": {"level", "alphas", "betas", "include_gad"},
    "hscheck": {"size", "power", "expansion_order"},
    "regularity": {"tau_list"},
    "scan": {
        "zeta",
        "zeta_values",
        "theta",
        "theta_values",
        "energy_range",
        "drift_tol",
        "loc_embedded_threshold",
        "loc_scattering_threshold",
    },
}


class ConfigError(ValueError):
    """Config validation failure; the message names the offending field."""

    def __init__(self, field_path: str, message: str) -> None:
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


@dataclass(frozen=True)
class ExperimentConfig:
    """One validated experiment, ready to run.

    ``params`` holds the experiment-specific knobs, already normalised:
    defaults filled, numbers coerced, axis ranges expanded to explicit value
    lists.  ``weights`` are conjugation weights; sub-exponential entries add
    probe points to the hypothesis experiment and all entries travel with
    the config for provenance.  ``seed`` feeds every random ingredient.
    """

    experiment: str
    half_length: float
    n: int
    potential: PotentialSpec
    conjugate: ConjugateSpec
    weights: tuple[WeightSpec, ...]
    params: dict[str, Any]
    seed: int
    output_dir: str


def _expect_mapping(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(path, f"expected an object, got {type(value).__name__}")
    return value


def _coerce_float(value, path: str, positive: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    out = float(value)
    if not math.isfinite(out):
        raise ConfigError(path, f"must be finite, got {value!r}")
    if positive and out <= 0.0:
        raise ConfigError(path, f"must be positive, got {value!r}")
    return out


def _coerce_int(value, path: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {value}")
    return int(value)


def _float_list(value, path: str, positive: bool = False) -> list[float]:
    if not isinstance(value, (list, tuple)):
        raise ConfigError(path, f"expected a list, got {type(value).__name__}")
    if len(value) == 0:
        raise ConfigError(path, "must be non-empty")
    return [
        _coerce_float(v, f"{path}[{i}]", positive=positive)
        for i, v in enumerate(value)
    ]


def _interval(value, path: str) -> list[float]:
    vals = _float_list(value, path)
    if len(vals) != 2 or not vals[0] < vals[1]:
        raise ConfigError(path, f"expected [lo, hi] with lo < hi, got {value!r}")
    return vals


def _potential_from_dict(raw, path: str) -> PotentialSpec:
    raw = _expect_mapping(raw, path)
    unknown = sorted(set(raw) - {"family", "params"})
    if unknown:
        raise ConfigError(path, f"unknown keys {unknown}")
    family = raw.get("family")
    if not isinstance(family, str) or not family:
        raise ConfigError(f"{path}.family", f"expected a family name, got {family!r}")
    params = _expect_mapping(raw.get("params", {}), f"{path}.params")
    norm: dict[str, Any] = {}
    for key, val in params.items():
        if key == "terms":
            if not isinstance(val, list) or not val:
                raise ConfigError(f"{path}.params.terms", "must be a non-empty list")
            norm[key] = [
                _potential_from_dict(t, f"{path}.params.terms[{i}]")
                for i, t in enumerate(val)
            ]
        else:
            norm[key] = _coerce_float(val, f"{path}.params.{key}")
    return PotentialSpec(family, norm)


def _potential_to_dict(spec: PotentialSpec) -> dict:
    params: dict[str, Any] = {}
    for key, val in spec.params.items():
        if key == "terms":
            params[key] = [_potential_to_dict(t) for t in val]
        else:
            params[key] = float(val)
    return {"family": spec.family, "params": params}


def _conjugate_from_dict(raw, path: str) -> ConjugateSpec:
    raw = _expect_mapping(raw, path)
    unknown = sorted(set(raw) - {"preset"})
    if unknown:
        raise ConfigError(path, f"unknown keys {unknown}")
    preset = raw.get("preset", "dilation")
    if preset not in ("dilation", "bounded_standard"):
        # The custom preset needs callables and has no JSON encoding.
        raise ConfigError(
            f"{path}.preset",
            f"expected 'dilation' or 'bounded_standard', got {preset!r}",
        )
    return ConjugateSpec(preset)


def _weight_from_dict(raw, path: str) -> WeightSpec:
    raw = _expect_mapping(raw, path)
    unknown = sorted(set(raw) - _WEIGHT_KEYS)
    if unknown:
        raise ConfigError(path, f"unknown keys {unknown}")
    kind = raw.get("kind")
    if kind not in ("log_type", "subexp"):
        raise ConfigError(
            f"{path}.kind", f"expected 'log_type' or 'subexp', got {kind!r}"
        )
    kwargs = {
        key: _coerce_float(raw[key], f"{path}.{key}")
        for key in ("tau", "eps", "alpha", "beta", "gamma")
        if key in raw
    }
    try:
        return WeightSpec(kind, **kwargs)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def _params_spectrum(p: dict) -> dict:
    if "window" in p and "count" in p:
        raise ConfigError("params", "give either window or count, not both")
    if "window" in p:
        return {"window": _interval(p["window"], "params.window")}
    return {"count": _coerce_int(p.get("count", 8), "params.count", minimum=1)}


def _beta_list(value, path: str) -> list[float]:
    betas = _float_list(value, path)
    for i, b in enumerate(betas):
        if not 0.0 < b < 1.0:
            raise ConfigError(f"{path}[{i}]", f"beta must lie in (0, 1), got {b}")
    return betas


def _params_decay(p: dict) -> dict:
    return {
        "level": _coerce_int(p.get("level", 0), "params.level", minimum=0),
        "beta_grid": _beta_list(
            p.get("beta_grid", [0.5, 0.7, 0.9, 0.99]), "params.beta_grid"
        ),
    }


def _params_mourre(p: dict, nyq_sq: float) -> dict:
    raw = p.get("windows", [[0.5, 1.0], [1.0, 2.0], [2.0, 4.0]])
    if not isinstance(raw, list) or not raw:
        raise ConfigError("params.windows", "must be a non-empty list of [lo, hi]")
    windows = []
    for i, win in enumerate(raw):
        lo, hi = _interval(win, f"params.windows[{i}]")
        if lo <= 0.0:
            raise ConfigError(
                f"params.windows[{i}]", f"window must have lo > 0, got {lo}"
            )
        if hi >= nyq_sq:
            raise ConfigError(
                f"params.windows[{i}]",
                f"window top {hi} exceeds the grid's frequency cap {nyq_sq:.6g}",
            )
        windows.append([lo, hi])
    return {
        "windows": windows,
        "discard_r": _coerce_int(p.get("discard_r", 0), "params.discard_r", minimum=0),
    }


def _params_lap(p: dict) -> dict:
    s = _coerce_float(p.get("s", 1.0), "params.s")
    if s <= 0.5:
        raise ConfigError("params.s", f"weight exponent must exceed 1/2, got {s}")
    mus = _float_list(
        p.get("mu_sequence", [0.1, 0.03, 0.01, 0.003, 0.001]),
        "params.mu_sequence",
        positive=True,
    )
    if len(mus) < 3 or any(b >= a for a, b in zip(mus, mus[1:])):
        raise ConfigError(
            "params.mu_sequence",
            f"needs at least three strictly decreasing positive values, got {mus}",
        )
    return {
        "energy": _coerce_float(p.get("energy", 1.0), "params.energy", positive=True),
        "s": s,
        "mu_sequence": mus,
    }


def _params_hypothesis(p: dict) -> dict:
    include = p.get("include_gad", False)
    if not isinstance(include, bool):
        raise ConfigError("params.include_gad", f"expected true/false, got {include!r}")
    return {
        "level": _coerce_int(p.get("level", 0), "params.level", minimum=0),
        "alphas": _float_list(
            p.get("alphas", [0.25, 0.5, 1.0, 2.0]), "params.alphas", positive=True
        ),
        "betas": _beta_list(p.get("betas", [0.5, 0.9]), "params.betas"),
        "include_gad": include,
    }


def _params_hscheck(p: dict) -> dict:
    size = _coerce_int(p.get("size", 48), "params.size", minimum=2)
    if size > 512:
        raise ConfigError("params.size", f"matrix size capped at 512, got {size}")
    order = _coerce_int(
        p.get("expansion_order", 2), "params.expansion_order", minimum=1
    )
    if order > 3:
        raise ConfigError(
            "params.expansion_order", f"expansion order capped at 3, got {order}"
        )
    return {
        "size": size,
        "power": _coerce_float(p.get("power", 2.0), "params.power", positive=True),
        "expansion_order": order,
    }


def _params_regularity(p: dict) -> dict:
    taus = _float_list(
        p.get("tau_list", [0.02, 0.05, 0.1, 0.2, 0.4, 0.7, 1.0]),
        "params.tau_list",
        positive=True,
    )
    for i, t in enumerate(taus):
        if t > 1.0:
            raise ConfigError(f"params.tau_list[{i}]", f"tau must lie in (0, 1], got {t}")
    return {"tau_list": sorted(taus)}


def _axis_values(p: dict, name: str) -> list[float]:
    """An axis is either an explicit value list or a start/stop/step range."""
    list_key, range_key = f"{name}_values", name
    if list_key in p and range_key in p:
        raise ConfigError(
            f"params.{name}", f"give either {list_key} or {range_key}, not both"
        )
    if list_key in p:
        return _float_list(p[list_key], f"params.{list_key}")
    if range_key not in p:
        raise ConfigError(
            f"params.{name}",
            f"scan needs a {name} axis: a {list_key} list or a "
            f"{range_key} object with start/stop/step",
        )
    raw = _expect_mapping(p[range_key], f"params.{range_key}")
    unknown = sorted(set(raw) - {"start", "stop", "step"})
    if unknown:
        raise ConfigError(f"params.{range_key}", f"unknown keys {unknown}")
    for key in ("start", "stop", "step"):
        if key not in raw:
            raise ConfigError(f"params.{range_key}", f"missing {key}")
    start = _coerce_float(raw["start"], f"params.{range_key}.start")
    stop = _coerce_float(raw["stop"], f"params.{range_key}.stop")
    step = _coerce_float(raw["step"], f"params.{range_key}.step", positive=True)
    if stop < start:
        raise ConfigError(
            f"params.{range_key}", f"stop {stop} must be >= start {start}"
        )
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [start + j * step for j in range(count)]


def _params_scan(p: dict, grid: Grid) -> dict:
    energy_range = _interval(p.get("energy_range", [0.0, 4.0]), "params.energy_range")
    if energy_range[0] < 0.0:
        raise ConfigError(
            "params.energy_range", f"lower end must be >= 0, got {energy_range[0]}"
        )
    # Same cap the embedded-eigenvalue detector enforces: the doubled-box
    # refinement keeps the spacing, so the budget is a quarter Nyquist.
    cap = (math.pi / grid.spacing) ** 2 / 4.0
    if energy_range[1] > cap:
        raise ConfigError(
            "params.energy_range",
            f"top {energy_range[1]} exceeds the refinement-safe cap "
            f"{cap:.6g} for this grid",
        )
    drift_tol = _coerce_float(
        p.get("drift_tol", 5e-3), "params.drift_tol", positive=True
    )
    loc_emb = _coerce_float(
        p.get("loc_embedded_threshold", 0.99),
        "params.loc_embedded_threshold",
        positive=True,
    )
    loc_sca = _coerce_float(
        p.get("loc_scattering_threshold", 0.5),
        "params.loc_scattering_threshold",
        positive=True,
    )
    if not loc_sca < loc_emb <= 1.0:
        raise ConfigError(
            "params.loc_embedded_threshold",
            f"thresholds must satisfy 0 < scattering < embedded <= 1, "
            f"got scattering = {loc_sca}, embedded = {loc_emb}",
        )
    return {
        "zeta_values": _axis_values(p, "zeta"),
        "theta_values": _axis_values(p, "theta"),
        "energy_range": energy_range,
        "drift_tol": drift_tol,
        "loc_embedded_threshold": loc_emb,
        "loc_scattering_threshold": loc_sca,
    }


def _validate_params(experiment: str, raw: dict, grid: Grid) -> dict:
    file_refs: dict[str, str] = {}
    rest: dict[str, Any] = {}
    for key, val in raw.items():
        if key.endswith("_file"):
            if not isinstance(val, str):
                raise ConfigError(f"params.{key}", f"expected a path, got {val!r}")
            if not Path(val).is_file():
                raise ConfigError(f"params.{key}", f"file not found: {val}")
            file_refs[key] = val
        else:
            rest[key] = val
    unknown = sorted(set(rest) - _ALLOWED_PARAMS[experiment])
    if unknown:
        raise ConfigError(
            "params",
            f"unknown keys {unknown} for experiment {experiment!r}; "
            f"allowed: {sorted(_ALLOWED_PARAMS[experiment])}",
        )
    if experiment == "spectrum":
        params = _params_spectrum(rest)
    elif experiment == "decay":
        params = _params_decay(rest)
    elif experiment == "mourre":
        # Same cap the Mourre probe enforces on its spectral windows.
        params = _params_mourre(rest, float(np.max(grid.frequencies)) ** 2)
    elif experiment == "lap":
        params = _params_lap(rest)
    elif experiment == "hypothesis":
        params = _params_hypothesis(rest)
    elif experiment == "hscheck":
        params = _params_hscheck(rest)
    elif experiment == "regularity":
        params = _params_regularity(rest)
    else:
        params = _params_scan(rest, grid)
    params.update(file_refs)
    return params


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a raw mapping into an ExperimentConfig.

    Raises ConfigError, whose message always starts with the path of the
    offending field.
    """
    raw = _expect_mapping(raw, "config")
    unknown = sorted(set(raw) - _CONFIG_KEYS)
    if unknown:
        raise ConfigError("config", f"unknown keys {unknown}")

    experiment = raw.get("experiment")
    if experiment not in EXPERIMENTS:
        raise ConfigError(
            "experiment", f"expected one of {list(EXPERIMENTS)}, got {experiment!r}"
        )

    grid_raw = _expect_mapping(raw.get("grid", {}), "grid")
    unknown = sorted(set(grid_raw) - {"half_length", "n"})
    if unknown:
        raise ConfigError("grid", f"unknown keys {unknown}")
    half_length = _coerce_float(
        grid_raw.get("half_length", DEFAULT_HALF_LENGTH),
        "grid.half_length",
        positive=True,
    )
    n = grid_raw.get("n", DEFAULT_N)
    if isinstance(n, bool) or not isinstance(n, int):
        raise ConfigError("grid.n", f"expected an integer, got {n!r}")
    if n < 8 or n % 2 != 0:
        raise ConfigError("grid.n", f"must be an even integer >= 8, got {n}")
    grid = make_grid(half_length, n)

    potential = _potential_from_dict(
        raw.get("potential", {"family": "zero"}), "potential"
    )
    conjugate = _conjugate_from_dict(raw.get("conjugate", {}), "conjugate")

    weights_raw = raw.get("weights", [])
    if not isinstance(weights_raw, list):
        raise ConfigError("weights", f"expected a list, got {type(weights_raw).__name__}")
    weights = tuple(
        _weight_from_dict(w, f"weights[{i}]") for i, w in enumerate(weights_raw)
    )

    seed = _coerce_int(raw.get("seed", 0), "seed", minimum=0)
    output_dir = raw.get("output_dir", "speclab_out")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("output_dir", f"expected a directory path, got {output_dir!r}")

    params = _validate_params(
        experiment, _expect_mapping(raw.get("params", {}), "params"), grid
    )

    if experiment == "hypothesis":
        # The fit solver needs 8 probe points; count them the way the
        # runner builds them, cross product plus sub-exponential weights,
        # deduplicated.
        points = {(a, b) for a in params["alphas"] for b in params["betas"]}
        points |= {
            (w.alpha, w.beta)
            for w in weights
            if w.kind == "subexp" and w.alpha > 0.0
        }
        if len(points) < 8:
            raise ConfigError(
                "params",
                f"hypothesis needs at least 8 distinct (alpha, beta) probe "
                f"points, got {len(points)}",
            )

    if experiment == "scan":
        if potential.family != "oscillating":
            raise ConfigError(
                "potential.family",
                f"scan sweeps the oscillating family, got {potential.family!r}",
            )
        for key in ("zeta", "theta"):
            if key in potential.params:
                raise ConfigError(
                    f"potential.params.{key}",
                    "supplied per cell by the sweep axes; remove it from the template",
                )
        # Smoke-build the easiest cell so missing or bad template params
        # surface now.  Under-resolution is legitimate here: those cells
        # are skipped at sweep time, not rejected at load time.
        probe = dict(potential.params)
        probe["zeta"] = min(params["zeta_values"])
        probe["theta"] = min(params["theta_values"])
        try:
            build_potential(PotentialSpec("oscillating", probe), grid)
        except ResolutionError:
            pass
        except ValueError as exc:
            raise ConfigError("potential.params", str(exc)) from None
    else:
        try:
            build_potential(potential, grid)
        except ValueError as exc:
            raise ConfigError("potential", str(exc)) from None

    return ExperimentConfig(
        experiment=experiment,
        half_length=half_length,
        n=n,
        potential=potential,
        conjugate=conjugate,
        weights=weights,
        params=params,
        seed=seed,
        output_dir=output_dir,
    )


def config_to_dict(config: ExperimentConfig) -> dict:
    """Canonical plain-dict form: all defaults materialised, JSON-ready."""
    return {
        "experiment": config.experiment,
        "grid": {"half_length": config.half_length, "n": config.n},
        "potential": _potential_to_dict(config.potential),
        "conjugate": {"preset": config.conjugate.preset},
        "weights": [asdict(w) for w in config.weights],
        "params": json.loads(json.dumps(config.params)),
        "seed": config.seed,
        "output_dir": config.output_dir,
    }


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON encoding of the effective config."""
    canon = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def apply_override(raw: dict, assignment: str) -> None:
    """Apply one ``key=value`` override to a raw config mapping, in place.

    The key is a dotted path (``grid.n``, ``params.energy``); missing
    intermediate objects are created.  The value is parsed as JSON when
    possible and kept as a string otherwise.
    """
    if "=" not in assignment:
        raise ConfigError("override", f"expected key=value, got {assignment!r}")
    key, text = assignment.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError("override", f"empty key in {assignment!r}")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    parts = key.split(".")
    for part in parts[:-1]:
        child = node.get(part)
        if child is None:
            child = {}
            node[part] = child
        if not isinstance(child, dict):
            raise ConfigError(key, f"cannot descend into non-object at {part!r}")
        node = child
    node[parts[-1]] = value


def load_config(
    path,
    overrides: tuple[str, ...] | list[str] = (),
    experiment: str | None = None,
    output_dir: str | None = None,
) -> ExperimentConfig:
    """Read, override, and validate a JSON config file.

    ``experiment`` (from the command line) fills a missing experiment field
    and must agree with a present one; ``output_dir`` overrides the config's
    output directory outright, that being the flag's purpose.
    """
    p = Path(path)
    if not p.is_file():
        raise ConfigError("config", f"file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None
    raw = _expect_mapping(raw, "config")
    for assignment in overrides:
        apply_override(raw, assignment)
    if experiment is not None:
        stated = raw.get("experiment")
        if stated is not None and stated != experiment:
            raise ConfigError(
                "experiment",
                f"config says {stated!r} but the command line says {experiment!r}",
            )
        raw["experiment"] = experiment
    if output_dir is not None:
        raw["output_dir"] = str(output_dir)
    return config_from_dict(raw)
