"""Experiment configuration: TOML loading and schema validation.

Layout::

    study = "converge"          # optional when the CLI subcommand names it
    seed = 7
    jobs = 2                    # default: number of CPUs
    output_dir = "runs/linear"  # optional
    formats = ["csv", "json"]

    [model]
    benchmark = "linear"
    params = { c = [3.0, 6.0] }

    [switching]                 # optional override of the model's generator
    class_sizes = [2, 1]
    fast = [[...]]
    slow = [[...]]

    [grid]
    t0_seconds = 0.0
    horizon_seconds = 1.0
    dt_seconds = 0.001

    [options]                   # study-specific, see STUDY_OPTIONS

Times carry a ``_seconds`` suffix; the model's time unit is taken to be
one second.  Unknown keys anywhere are rejected with their dotted path.
"""

from __future__ import annotations

import copy
import inspect
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .benchmarks import BENCHMARKS
from .errors import ConfigInvalid

STUDIES = ("qsd", "simulate", "average", "converge", "ergodicity", "modulus", "picard", "perturbation", "validate")
FORMATS = ("csv", "json")


def _num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _pos(v):
    return _num(v) and v > 0


def _nonneg(v):
    return _num(v) and v >= 0


def _pos_int(v):
    return _int(v) and v > 0


def _num_list(v):
    return isinstance(v, list) and all(_num(x) for x in v)


def _pos_list(v):
    return _num_list(v) and all(x > 0 for x in v)


def _point(v):
    return _num(v) or _num_list(v)


def _points(v):
    return isinstance(v, list) and all(_point(p) for p in v)


def _box(v):
    if not isinstance(v, list) or not v:
        return False
    pairs = v if isinstance(v[0], list) else [v]
    return all(_num_list(p) and len(p) == 2 and p[0] < p[1] for p in pairs)


def _one_of(*choices):
    def check(v):
        return v in choices

    check.__doc__ = "one of " + ", ".join(map(repr, choices))
    return check


# key -> (validator, description)
_K = {
    "eps": (_pos, "a positive number"),
    "eps_list": (_pos_list, "a list of positive numbers"),
    "n_paths": (_pos_int, "a positive integer"),
    "x_frozen": (_point, "a number or list of numbers"),
    "x_points": (_points, "a list of points"),
    "regime": (lambda v: _int(v) and v >= 0, "a non-negative integer"),
}

STUDY_OPTIONS = {
    "qsd": {},
    "simulate": {
        "eps": _K["eps"],
        "n_paths": _K["n_paths"],
        "system": (_one_of("coupled", "averaged"), "'coupled' or 'averaged'"),
    },
    "average": {
        "mode": (_one_of("closed-form", "grid"), "'closed-form' or 'grid'"),
        "estimator": (_one_of("auto", "quadrature", "monte-carlo"), "'auto', 'quadrature' or 'monte-carlo'"),
        "box": (_box, "[low, high] or one such pair per dimension"),
        "resolution": (lambda v: _int(v) and v >= 2, "an integer >= 2"),
        "n_paths": _K["n_paths"],
        "x_points": _K["x_points"],
    },
    "converge": {
        "eps_list": _K["eps_list"],
        "n_paths": _K["n_paths"],
        "dt_max_seconds": (_pos, "a positive number"),
    },
    "ergodicity": {
        "kind": (_one_of("switching", "frozen"), "'switching' or 'frozen'"),
        "eps_list": _K["eps_list"],
        "n_paths": _K["n_paths"],
        "beta": (_num, "a number"),
        "state": _K["regime"],
        "x_frozen": _K["x_frozen"],
        "eta": _K["x_frozen"],
        "times_seconds": (_pos_list, "a list of positive numbers"),
    },
    "modulus": {
        "eps": _K["eps"],
        "n_paths": _K["n_paths"],
        "taus_seconds": (_pos_list, "a list of positive numbers"),
        "anchor_seconds": (_nonneg, "a non-negative number"),
    },
    "picard": {
        "eps": _K["eps"],
        "n_paths": _K["n_paths"],
        "regime": _K["regime"],
        "n_iters": (_pos_int, "a positive integer"),
    },
    "perturbation": {
        "eps_list": _K["eps_list"],
        "times_seconds": (lambda v: _num_list(v) and all(x >= 0 for x in v), "a list of non-negative numbers"),
        "n_outer": _K["n_paths"],
        "n_inner": _K["n_paths"],
        "budget": _K["n_paths"],
        "bump_radius": (_pos, "a positive number"),
    },
    "validate": {
        "x_frozen": _K["x_frozen"],
        "regime": _K["regime"],
        "n_pairs": _K["n_paths"],
        "box": (_box, "[low, high]"),
        "declared_lipschitz": (lambda v: _pos(v) or _pos_list(v), "a positive number or list"),
    },
}

_TOP = {
    "study": (_one_of(*STUDIES), "one of " + ", ".join(STUDIES)),
    "seed": (lambda v: _int(v) and v >= 0, "a non-negative integer"),
    "jobs": (_pos_int, "a positive integer"),
    "output_dir": (lambda v: isinstance(v, str) and v != "", "a non-empty string"),
    "formats": (lambda v: isinstance(v, list) and v and all(f in FORMATS for f in v), "a list from csv, json"),
}
_TABLES = ("model", "switching", "grid", "options")
_GRID = {
    "t0_seconds": (_num, "a number"),
    "horizon_seconds": (_num, "a number"),
    "dt_seconds": (_pos, "a positive number"),
}
_SWITCHING = ("class_sizes", "breakpoints", "fast", "slow")


@dataclass(frozen=True)
class ExperimentConfig:
    study: str
    benchmark: str
    model_params: dict
    switching: dict
    t0: float
    T: float
    dt: float
    seed: int
    jobs: int
    output_dir: str
    formats: tuple
    options: dict
    source: dict  # validated raw tables, for the manifest

    def with_overrides(self, seed=None, jobs=None, output_dir=None) -> "ExperimentConfig":
        from dataclasses import replace

        return replace(
            self,
            seed=self.seed if seed is None else seed,
            jobs=self.jobs if jobs is None else jobs,
            output_dir=self.output_dir if output_dir is None else output_dir,
        )

    def option(self, key, default=None):
        return self.options.get(key, default)


def _check_table(table: dict, schema: dict, prefix: str):
    if not isinstance(table, dict):
        raise ConfigInvalid("must be a table", prefix.rstrip("."))
    for key, value in table.items():
        path = prefix + key
        if key not in schema:
            raise ConfigInvalid(f"unknown key (allowed: {', '.join(sorted(schema)) or 'none'})", path)
        check, what = schema[key]
        if not check(value):
            raise ConfigInvalid(f"must be {what}, got {value!r}", path)


def validate_config(raw: dict, study: str = None) -> ExperimentConfig:
    """Check ``raw`` (parsed TOML) against the schema and normalise it."""
    raw = copy.deepcopy(raw)
    for key in raw:
        if key not in _TOP and key not in _TABLES:
            raise ConfigInvalid("unknown key", key)
    _check_table({k: v for k, v in raw.items() if k in _TOP}, _TOP, "")
    chosen = raw.get("study", study)
    if chosen is None:
        raise ConfigInvalid("no study given in the config or on the command line", "study")
    if study is not None and raw.get("study", study) != study:
        raise ConfigInvalid(f"config is for study {raw['study']!r}, not {study!r}", "study")

    model = raw.get("model", {})
    if not isinstance(model, dict):
        raise ConfigInvalid("must be a table", "model")
    for key in model:
        if key not in ("benchmark", "params"):
            raise ConfigInvalid("unknown key (allowed: benchmark, params)", f"model.{key}")
    name = model.get("benchmark", "linear")
    if name not in BENCHMARKS:
        raise ConfigInvalid(f"unknown benchmark {name!r}; choose from {', '.join(sorted(BENCHMARKS))}", "model.benchmark")
    params = model.get("params", {})
    if not isinstance(params, dict):
        raise ConfigInvalid("must be a table", "model.params")
    accepted = inspect.signature(BENCHMARKS[name]).parameters
    for key in params:
        if key not in accepted:
            raise ConfigInvalid(f"benchmark {name!r} takes {', '.join(accepted) or 'no parameters'}", f"model.params.{key}")

    switching = raw.get("switching", {})
    if not isinstance(switching, dict):
        raise ConfigInvalid("must be a table", "switching")
    for key in switching:
        if key not in _SWITCHING:
            raise ConfigInvalid(f"unknown key (allowed: {', '.join(_SWITCHING)})", f"switching.{key}")

    grid = raw.get("grid", {})
    _check_table(grid, _GRID, "grid.")
    t0 = float(grid.get("t0_seconds", 0.0))
    T = float(grid.get("horizon_seconds", 1.0))
    dt = float(grid.get("dt_seconds", 1e-3))
    if T <= t0:
        raise ConfigInvalid("must exceed grid.t0_seconds", "grid.horizon_seconds")
    steps = (T - t0) / dt
    if abs(steps - round(steps)) >= 1e-9:
        raise ConfigInvalid("must divide the horizon into whole steps", "grid.dt_seconds")

    options = raw.get("options", {})
    _check_table(options, STUDY_OPTIONS[chosen], "options.")

    return ExperimentConfig(
        study=chosen,
        benchmark=name,
        model_params=dict(params),
        switching=dict(switching),
        t0=t0,
        T=T,
        dt=dt,
        seed=int(raw.get("seed", 0)),
        jobs=int(raw.get("jobs", os.cpu_count() or 1)),
        output_dir=raw.get("output_dir"),
        formats=tuple(raw.get("formats", FORMATS)),
        options=dict(options),
        source=raw,
    )


def load_config(path, study: str = None) -> ExperimentConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            raw: Any = tomllib.load(fh)
    except OSError as exc:
        raise ConfigInvalid(f"cannot read {path}: {exc.strerror}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"{path} is not valid TOML: {exc}") from exc
    return validate_config(raw, study)
