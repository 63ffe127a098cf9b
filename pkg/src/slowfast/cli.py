"""Command-line runner for configured studies.

Usage::

    slowfast converge --config linear.toml --out runs/linear --seed 3 --jobs 2

Every run writes ``<study>.csv`` and/or ``<study>.json`` plus
``manifest.json`` (config snapshot, seeds, timing and SHA-256 digests of
all other outputs) into the output directory.  The default output root
is taken from ``SLOWFAST_OUTPUT_ROOT`` (falling back to
``./slowfast-runs``).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    BumpFunction,
    modulus_check,
    perturbation_magnitude,
    switching_ergodicity_study,
    weak_convergence_study,
)
from .averaging import AveragingSettings, build_averaged_model, ergodicity_decay
from .benchmarks import get_benchmark
from .config import STUDIES, ExperimentConfig, load_config
from .errors import ConfigInvalid, SlowFastError, StudyFailed
from .integrator import (
    NoiseBundle,
    PathGrid,
    averaged_ensemble,
    coupled_ensemble,
    picard_iterate,
    simulate_averaged,
    simulate_coupled,
)
from .model import SamplingSpec, validate_dissipativity, validate_lipschitz
from .switching import aggregated_schedule, generator_from_dict

OUTPUT_ROOT_ENV = "SLOWFAST_OUTPUT_ROOT"


@dataclass
class StudyResult:
    """Tabular rows plus a JSON-able summary; ``extra`` lists side files already written."""

    name: str
    columns: list
    rows: list
    summary: dict = field(default_factory=dict)
    extra: list = field(default_factory=list)


def format_value(v) -> str:
    """CSV cell text; floats use 17 significant digits so they parse back bit-exactly."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    return v


def emit_report(result: StudyResult, directory, formats=("csv", "json")) -> list:
    """Write the result's CSV table and/or JSON summary; return the paths written."""
    directory = Path(directory)
    paths = []
    try:
        directory.mkdir(parents=True, exist_ok=True)
        if "csv" in formats:
            path = directory / f"{result.name}.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(result.columns)
                for row in result.rows:
                    w.writerow([format_value(row.get(c)) for c in result.columns])
            paths.append(path)
        if "json" in formats:
            path = directory / f"{result.name}.json"
            doc = {"study": result.name, "summary": result.summary, "rows": result.rows}
            path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
            paths.append(path)
    except OSError as exc:
        raise OSError(f"cannot write report to {exc.filename or directory}: {exc.strerror}") from exc
    return paths


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config: dict
    version: str
    seeds: dict
    started: str
    wall_seconds: float
    files: list  # [{"path": relative, "sha256": ...}]

    def write(self, directory) -> Path:
        path = Path(directory) / "manifest.json"
        path.write_text(json.dumps(_jsonable(dataclasses.asdict(self)), indent=2, sort_keys=True) + "\n")
        return path

    def verify(self, directory) -> bool:
        return all(sha256_file(Path(directory) / f["path"]) == f["sha256"] for f in self.files)

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# studies


def build_model(cfg: ExperimentConfig):
    model = get_benchmark(cfg.benchmark, **cfg.model_params)
    if cfg.switching:
        try:
            gen = generator_from_dict(cfg.switching)
        except (ValueError, KeyError) as exc:
            raise ConfigInvalid(str(exc), "switching") from exc
        model = dataclasses.replace(model, switching=gen)
    return model


def _grid(cfg):
    return PathGrid(cfg.t0, cfg.T, cfg.dt)


def _qsd(cfg, model, out):
    gen = model.switching
    rows = []
    for seg, per_class in enumerate(gen.qsd.vectors):
        offsets = gen.partition.offsets
        for k, nu in enumerate(per_class):
            for i, v in enumerate(nu):
                rows.append({"segment": seg, "class": k, "state": int(offsets[k] + i), "nu": float(v)})
    agg = aggregated_schedule(gen)
    summary = {
        "breakpoints": gen.qsd.breakpoints.tolist(),
        "aggregated_breakpoints": agg.breakpoints.tolist(),
        "aggregated_generators": agg.matrices.tolist(),
    }
    return StudyResult("qsd", ["segment", "class", "state", "nu"], rows, summary)


def _simulate(cfg, model, out):
    grid = _grid(cfg)
    eps = cfg.option("eps", 0.01)
    n = cfg.option("n_paths", 1)
    system = cfg.option("system", "coupled")
    if n == 1:
        noise = NoiseBundle(cfg.seed)
        if system == "averaged":
            path = simulate_averaged(build_averaged_model(model), grid, noise)
        else:
            path = simulate_coupled(model, eps, grid, noise)
        out.mkdir(parents=True, exist_ok=True)
        extra = [path.jump_log_to_csv(out / "jumps.csv"), path.regime_path.to_csv(out / "regimes.csv")]
        cols = ["t"] + [f"x_{i + 1}" for i in range(path.x.shape[1])] + [f"xi_{i + 1}" for i in range(path.xi.shape[1])]
        cols.append("regime")
        rows = []
        for k, t in enumerate(path.times):
            row = {"t": float(t), "regime": int(path.regimes[k])}
            row.update({f"x_{i + 1}": float(v) for i, v in enumerate(path.x[k])})
            row.update({f"xi_{i + 1}": float(v) for i, v in enumerate(path.xi[k])})
            rows.append(row)
        summary = {"eps": eps, "system": system, "n_jumps": len(path.jump_log), "n_switches": path.regime_path.n_jumps}
        return StudyResult("simulate", cols, rows, summary, extra)
    if system == "averaged":
        ens = averaged_ensemble(build_averaged_model(model), grid, n, cfg.seed, jobs=cfg.jobs)
    else:
        ens = coupled_ensemble(model, eps, grid, n, cfg.seed, jobs=cfg.jobs)
    rows = []
    for d in range(ens.x.shape[2]):
        v = ens.x[-1, :, d]
        q = np.quantile(v, [0.05, 0.25, 0.5, 0.75, 0.95])
        rows.append({"coordinate": d + 1, "mean": float(v.mean()), "variance": float(v.var(ddof=1)),
                     "q05": q[0], "q25": q[1], "q50": q[2], "q75": q[3], "q95": q[4]})
    cols = ["coordinate", "mean", "variance", "q05", "q25", "q50", "q75", "q95"]
    return StudyResult("simulate", cols, rows, {"eps": eps, "system": system, "n_paths": n, "T": cfg.T})


def _average(cfg, model, out):
    mode = cfg.option("mode", "closed-form")
    settings = AveragingSettings(
        estimator=cfg.option("estimator", "auto"),
        n_paths=cfg.option("n_paths", 1000),
        seed=cfg.seed,
        jobs=cfg.jobs,
    )
    avg = build_averaged_model(model, mode, box=cfg.option("box"), resolution=cfg.option("resolution", 41),
                               settings=settings)
    extra = avg.save(out) if mode == "grid" else []
    pts = cfg.option("x_points", [list(model.x0)])
    pts = np.array([np.atleast_1d(p) for p in pts], dtype=float)
    dx = model.dx
    cols = [f"x_{i + 1}" for i in range(dx)] + ["class"] + [f"f_bar_{i + 1}" for i in range(dx)]
    cols += [f"sigma_bar_{i + 1}{j + 1}" for i in range(dx) for j in range(dx)]
    cols += [f"jump_integral_{i + 1}" for i in range(dx)]
    rows = []
    t = cfg.t0
    for gamma in range(avg.n_classes):
        f = avg.drift(pts, gamma, t)
        s = avg.sigma(pts, gamma, t)
        gi = avg.jump_integral(pts, gamma, t)
        for p in range(pts.shape[0]):
            row = {"class": gamma}
            row.update({f"x_{i + 1}": float(v) for i, v in enumerate(pts[p])})
            row.update({f"f_bar_{i + 1}": float(v) for i, v in enumerate(f[p])})
            row.update({f"sigma_bar_{i + 1}{j + 1}": float(s[p, i, j]) for i in range(dx) for j in range(dx)})
            row.update({f"jump_integral_{i + 1}": float(gi[p, i, i]) for i in range(dx)})
            rows.append(row)
    summary = {"mode": mode, "aggregated_generator": avg.generator(cfg.t0).tolist(), "provenance": avg.provenance}
    return StudyResult("average", cols, rows, summary, extra)


def _converge(cfg, model, out):
    eps_list = cfg.option("eps_list", [0.1, 0.01, 0.001])
    dt_max = cfg.option("dt_max_seconds", cfg.dt)
    rep = weak_convergence_study(model, eps_list, T=cfg.T, n_paths=cfg.option("n_paths", 1000), seed=cfg.seed,
                                 dt_max=dt_max, t0=cfg.t0, jobs=cfg.jobs)
    dx = model.dx
    cols = ["eps", "dt"]
    for d in range(dx):
        sfx = "" if dx == 1 else f"_{d + 1}"
        cols += ["W1" + sfx, "KS" + sfx, "noise_floor" + sfx, "slope" + sfx]
    if model.switching.partition.n_classes > 1:
        cols.append("class_gap")
    return StudyResult("converge", cols, rep.rows(), rep.summary())


def _ergodicity(cfg, model, out):
    kind = cfg.option("kind", "switching")
    n = cfg.option("n_paths", 1000)
    if kind == "switching":
        rep = switching_ergodicity_study(model.switching, cfg.option("eps_list", [0.1, 0.01]),
                                         beta=cfg.option("beta", 1.0), t0=cfg.t0, T=cfg.T, n_paths=n,
                                         seed=cfg.seed, state=cfg.option("state", 0))
        return StudyResult("ergodicity", ["eps", "mean_sq_deviation", "standard_error"], rep.rows(),
                           {"kind": kind, "decreasing": rep.decreasing})
    x = np.atleast_1d(np.asarray(cfg.option("x_frozen", list(model.x0)), dtype=float))
    eta = cfg.option("eta")
    times = cfg.option("times_seconds")
    rep = ergodicity_decay(model, x, 0, eta=eta, times=times, n_paths=n, seed=cfg.seed, dt=cfg.dt, jobs=cfg.jobs)
    summary = {"kind": kind, "rate": rep.rate, "theoretical_rate": rep.theoretical_rate, "constant": rep.constant,
               "reference": rep.reference}
    return StudyResult("ergodicity", ["t", "deviation", "noise_floor", "used"], rep.rows(), summary)


def _modulus(cfg, model, out):
    taus = cfg.option("taus_seconds", [2.0**-k for k in range(4, 11)])
    rep = modulus_check(model, cfg.option("eps", 1.0), taus, anchor=cfg.option("anchor_seconds", 0.25),
                        n_paths=cfg.option("n_paths", 10_000), seed=cfg.seed, jobs=cfg.jobs)
    return StudyResult("modulus", ["tau", "second_moment"], rep.rows(), {"slope": rep.slope, "anchor": rep.anchor})


def _picard(cfg, model, out):
    res = picard_iterate(model, cfg.option("regime", 0), _grid(cfg), NoiseBundle(cfg.seed),
                         cfg.option("n_iters", 10), eps=cfg.option("eps", 1.0), n_paths=cfg.option("n_paths", 1))
    ratios = res.ratios()
    rows = [{"n": i, "delta": float(d), "delta_xi": float(dxi), "ratio": None if i == 0 else float(ratios[i - 1])}
            for i, (d, dxi) in enumerate(zip(res.deltas, res.deltas_xi))]
    return StudyResult("picard", ["n", "delta", "delta_xi", "ratio"], rows, {"dt": cfg.dt})


def _perturbation(cfg, model, out):
    avg = build_averaged_model(model)
    iota = BumpFunction(tuple(model.x0), cfg.option("bump_radius", 4.0))
    rows = []
    for e in cfg.option("eps_list", [0.1, 0.01]):
        rep = perturbation_magnitude(model, e, iota, cfg.option("times_seconds", [0.0, 0.25, 0.5]),
                                     cfg.option("n_outer", 200), cfg.option("n_inner", 200), seed=cfg.seed,
                                     T=cfg.T, averaged=avg, budget=cfg.option("budget", 1_000_000))
        rows.append({"eps": float(e), "estimate": rep.estimate})
    return StudyResult("perturbation", ["eps", "estimate"], rows, {"n_outer": cfg.option("n_outer", 200)})


def _validate(cfg, model, out):
    box = cfg.option("box", [-5.0, 5.0])
    spec = SamplingSpec(box[0], box[1], box[0], box[1], n_pairs=cfg.option("n_pairs", 2000), seed=cfg.seed)
    lip = validate_lipschitz(model, spec, cfg.option("declared_lipschitz"))
    x = cfg.option("x_frozen", list(model.x0))
    dis = validate_dissipativity(model, x, cfg.option("regime", 0), spec)
    rows = [{"regime": g, "lipschitz_ratio": float(lip.ratios[g]), "passed": bool(lip.passed[g])}
            for g in range(model.n_regimes)]
    summary = {k: getattr(dis, k) for k in ("alpha1", "alpha2", "alpha3", "alpha1_growth", "alpha2_growth",
                                            "alpha3_growth", "alpha", "rate", "passed")}
    summary["x_frozen"] = np.ravel(x).tolist()
    return StudyResult("validate", ["regime", "lipschitz_ratio", "passed"], rows, {"dissipativity": summary})


RUNNERS = {
    "qsd": _qsd,
    "simulate": _simulate,
    "average": _average,
    "converge": _converge,
    "ergodicity": _ergodicity,
    "modulus": _modulus,
    "picard": _picard,
    "perturbation": _perturbation,
    "validate": _validate,
}


def resolve_output_dir(cfg: ExperimentConfig, config_path: Path = None) -> Path:
    if cfg.output_dir:
        return Path(cfg.output_dir)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "slowfast-runs"))
    stem = config_path.stem if config_path is not None else "default"
    return root / f"{cfg.study}-{stem}"


def run_experiment(cfg: ExperimentConfig, config_path: Path = None) -> tuple:
    """Run the configured study; return ``(output directory, manifest)``."""
    out = resolve_output_dir(cfg, config_path)
    model = build_model(cfg)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    t_start = time.perf_counter()
    try:
        result = RUNNERS[cfg.study](cfg, model, out)
    except ConfigInvalid:
        raise
    except (SlowFastError, ValueError, FloatingPointError) as exc:
        raise StudyFailed(f"{cfg.study} study failed: {type(exc).__name__}: {exc}") from exc
    files = list(result.extra) + emit_report(result, out, cfg.formats)
    manifest = RunManifest(
        config=_jsonable(cfg.source),
        version=__version__,
        seeds={"seed": cfg.seed, "jobs": cfg.jobs},
        started=started,
        wall_seconds=time.perf_counter() - t_start,
        files=[{"path": Path(f).relative_to(out).as_posix(), "sha256": sha256_file(f)} for f in files],
    )
    manifest.config.setdefault("study", cfg.study)
    manifest.write(out)
    return out, manifest


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slowfast", description="Run a configured slow-fast averaging study.")
    p.add_argument("study", choices=STUDIES + ("run",), help="study to run; 'run' takes it from the config")
    p.add_argument("--config", required=True, type=Path, help="TOML experiment configuration")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--jobs", type=int, help="worker threads; results do not depend on it")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigInvalid("must be non-negative", "--seed")
        if args.jobs is not None and args.jobs < 1:
            raise ConfigInvalid("must be positive", "--jobs")
        cfg = load_config(args.config, None if args.study == "run" else args.study)
        cfg = cfg.with_overrides(seed=args.seed, jobs=args.jobs,
                                 output_dir=None if args.out is None else str(args.out))
        out, manifest = run_experiment(cfg, args.config)
    except ConfigInvalid as exc:
        print(f"slowfast: invalid config: {exc}", file=sys.stderr)
        return 2
    except (StudyFailed, OSError) as exc:
        print(f"slowfast: {exc}", file=sys.stderr)
        return 1
    print(f"{cfg.study}: wrote {len(manifest.files) + 1} files to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
