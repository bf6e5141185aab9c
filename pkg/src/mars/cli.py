"""Command-line driver.

Every command writes its artifacts with temp-file-then-rename and finishes by
writing ``manifest.json``. Wall-clock timings go to stderr rather than into
any artifact, so a fixed seed reproduces the output directory byte for byte.
Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time

from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .envs import (
    Dataset,
    MeasurementDistribution,
    Standardizer,
    TaskFormatError,
    load_csv_task,
    task_to_csv,
)
from .evaluate import MetricReport, TaskMetrics, calibration_error, reports_to_csv, rmse
from .experiments import (
    BENCH_SETUPS,
    METHODS,
    build_problem,
    fit_interpolators,
    run_bench,
    run_study,
    stream,
    train_score_network,
)
from .fsvgd import BnnArchitecture, LearnedScore, PredictiveMixture, predictive, run_inference
from .scorenet import ScoreNetwork

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
ABLATIONS = ("ssge", "no-spectral", "gp-mean")
_INFER_STREAM = 10


class UsageError(Exception):
    pass


# --- artifact plumbing ------------------------------------------------------------


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


class Run:
    """Collects artifact paths for the manifest and stage timings for stderr."""

    def __init__(self, command: str, out: Path, cfg: RunConfig, seed: int | None, extra: dict | None = None):
        self.command = command
        self.out = out
        self.cfg = cfg
        self.seed = seed
        self.extra = extra or {}
        self.artifacts: list[str] = []
        self.timings: dict[str, float] = {}
        self.metrics: dict = {}
        self._t = time.perf_counter()

    def stage(self, name: str) -> None:
        now = time.perf_counter()
        self.timings[name] = round(now - self._t, 3)
        self._t = now

    def write(self, rel: str, text: str) -> Path:
        path = self.out / rel
        atomic_write(path, text)
        self.artifacts.append(rel)
        return path

    def finish(self) -> None:
        manifest = {
            "command": self.command,
            "version": __version__,
            "seed": self.seed,
            "config": self.cfg.to_dict(),
            "artifacts": sorted(self.artifacts),
            "metrics": self.metrics,
            **self.extra,
        }
        atomic_write(self.out / "manifest.json", _dump(manifest))
        print(f"mars {self.command}: timings {json.dumps(self.timings, sort_keys=True)}", file=sys.stderr)


def _check_finite(name: str, a) -> None:
    if not np.all(np.isfinite(a)):
        raise ArithmeticError(f"{name} contains non-finite values")


def _seed(args, cfg: RunConfig) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def _seeds(args, cfg: RunConfig) -> list[int]:
    return [args.seed] if args.seed is not None else list(cfg.seeds)


def _network_metadata(problem, interps, variant: str, seed: int) -> dict:
    meta = {
        "variant": variant,
        "seed": seed,
        "standardizer": problem.standardizer.to_dict(),
        "measurement_domain": problem.nu.to_dict(),
    }
    if interps and hasattr(interps[0], "lengthscale"):
        meta["interpolator_lengthscale"] = interps[0].lengthscale
    return meta


# --- commands -------------------------------------------------------------------


def cmd_gen_env(args, cfg: RunConfig) -> int:
    if cfg.env.kind != "sinusoid":
        raise UsageError("gen-env only generates the sinusoid environment")
    seed = _seed(args, cfg)
    run = Run("gen-env", args.out, cfg, seed)
    problem = build_problem(cfg, seed)
    st = problem.standardizer
    names = list(cfg.env.input_cols)

    def as_csv(d: Dataset) -> str:
        raw = Dataset(st.invert_inputs(d.inputs), st.invert_targets(d.targets))
        return task_to_csv(raw, names, cfg.env.target_col)

    for i, t in enumerate(problem.train):
        run.write(f"train/task_{i:03d}.csv", as_csv(t))
    for j, (c, t) in enumerate(problem.tests):
        run.write(f"test/task_{j:03d}_context.csv", as_csv(c))
        run.write(f"test/task_{j:03d}_test.csv", as_csv(t))
    run.stage("generate")
    run.finish()
    return EXIT_OK


def _train_and_save(run: Run, cfg: RunConfig, seed: int, variant: str, name: str) -> ScoreNetwork:
    problem = build_problem(cfg, seed)
    interps = fit_interpolators(problem.train, cfg, seed)
    run.stage("interpolate")
    result = train_score_network(problem, interps, cfg, seed, variant)
    run.stage(f"train-{variant}")
    _check_finite("training loss", result.losses)
    net = result.network
    run.write(name, net.dumps(_network_metadata(problem, interps, variant, seed)) + "\n")
    run.write(name.replace(".json", "_losses.csv"),
              "iteration,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(result.losses)))
    run.metrics[f"final_loss_{variant}"] = result.losses[-1] if result.losses else None
    return net


def cmd_train_score(args, cfg: RunConfig) -> int:
    variant = args.variant or "full"
    if variant not in ("full", "gp-mean", "no-spectral"):
        raise UsageError(f"unknown variant {variant!r}; expected full, gp-mean or no-spectral")
    seed = _seed(args, cfg)
    run = Run("train-score", args.out, cfg, seed, {"variant": variant})
    _train_and_save(run, cfg, seed, variant, "score_net.json")
    run.finish()
    return EXIT_OK


def _load_model(path: Path) -> tuple[ScoreNetwork, dict]:
    try:
        doc = json.loads(Path(path).read_text())
        return ScoreNetwork.from_dict(doc), doc.get("metadata", {})
    except FileNotFoundError as e:
        raise UsageError(f"model file not found: {path}") from e
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        raise UsageError(f"cannot load model {path}: {e}") from e


def _predictions_csv(X: np.ndarray, means: np.ndarray, input_names) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    L = means.shape[0]
    w.writerow([*input_names, "mean", *[f"particle_{l}" for l in range(L)]])
    avg = means.mean(axis=0)
    for q in range(X.shape[0]):
        w.writerow([*map(repr, X[q].tolist()), repr(float(avg[q])), *map(repr, means[:, q].tolist())])
    return buf.getvalue()


def cmd_infer(args, cfg: RunConfig) -> int:
    if args.model is None or args.task is None:
        raise UsageError("infer needs --model and --task")
    net, meta = _load_model(args.model)
    cols = list(cfg.env.input_cols)
    task = load_csv_task(args.task, cols, cfg.env.target_col)
    if task.input_dim != net.token_dim - 1:
        raise UsageError(f"task has {task.input_dim} input dims but the model expects {net.token_dim - 1}")
    query = load_csv_task(args.query, cols, cfg.env.target_col).inputs if args.query else task.inputs
    if "standardizer" in meta:
        st = Standardizer.from_dict(meta["standardizer"])
    else:
        st = Standardizer(np.zeros(task.input_dim), np.ones(task.input_dim), 0.0, 1.0)
    nu = MeasurementDistribution.from_dict(meta["measurement_domain"]) if "measurement_domain" in meta else None
    seed = _seed(args, cfg)
    run = Run("infer", args.out, cfg, seed, {"model": str(args.model), "task": str(args.task)})
    arch = BnnArchitecture(task.input_dim, cfg.baselines.hidden)
    ens = run_inference(st.apply(task), LearnedScore(net), arch, cfg.inference, stream(seed, _INFER_STREAM), nu)
    _check_finite("particles", ens.theta)
    run.stage("infer")
    mix = predictive(ens, cfg.inference.likelihood_std, st.apply_inputs(query))
    means = st.invert_targets(mix.means)
    _check_finite("predictions", means)
    docs = ens.particle_documents()
    files = []
    for d in docs:
        rel = f"ensemble/particle_{d['index']:03d}.json"
        run.write(rel, _dump(d))
        files.append(Path(rel).name)
    run.write("ensemble/ensemble.json", _dump({
        "kind": "bnn_ensemble",
        "architecture": {"input_dim": arch.input_dim, "hidden": list(arch.hidden)},
        "particles": files,
        "standardizer": st.to_dict(),
    }))
    run.write("predictions.csv", _predictions_csv(query, means, cols))
    run.write("predictions.json", _dump({"likelihood_std": cfg.inference.likelihood_std * st.output_std}))
    run.finish()
    return EXIT_OK


def _read_predictions(path: Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as e:
        raise UsageError(f"predictions file not found: {path}") from e
    if not rows or "mean" not in rows[0]:
        raise UsageError(f"{path}: expected a 'mean' column")
    header = rows[0]
    pcols = [i for i, h in enumerate(header) if h.startswith("particle_")]
    try:
        data = np.array([[float(r[i]) for i in range(len(header))] for r in rows[1:]])
    except (ValueError, IndexError) as e:
        raise UsageError(f"{path}: malformed row ({e})") from e
    data = data.reshape(-1, len(header))
    particles = data[:, pcols].T if pcols else data[:, [header.index("mean")]].T
    return data[:, header.index("mean")], particles


def cmd_eval(args, cfg: RunConfig) -> int:
    if args.predictions is None or args.targets is None:
        raise UsageError("eval needs --predictions and --targets")
    mean, particles = _read_predictions(args.predictions)
    targets = load_csv_task(args.targets, list(cfg.env.input_cols), cfg.env.target_col).targets
    if len(targets) != len(mean):
        raise UsageError(f"{len(mean)} prediction rows but {len(targets)} target rows")
    sidecar = Path(args.predictions).with_suffix(".json")
    sigma = json.loads(sidecar.read_text())["likelihood_std"] if sidecar.is_file() else cfg.inference.likelihood_std
    mix = PredictiveMixture(particles, sigma)
    seed = _seed(args, cfg)
    run = Run("eval", args.out, cfg, seed, {"predictions": str(args.predictions), "targets": str(args.targets)})
    task = TaskMetrics(0, rmse(mean, targets), calibration_error(mix.cdf(targets)))
    report = MetricReport.from_tasks([task], env=cfg.env.kind, method="predictions", seed=seed)
    run.write("metrics.json", report.to_json() + "\n")
    run.write("metrics.csv", reports_to_csv([report]))
    run.metrics = {"rmse": report.rmse, "calib_err": report.calibration_error}
    run.finish()
    return EXIT_OK


def _study(run: Run, cfg: RunConfig, seeds, methods, model_names: dict | None = None) -> list[MetricReport]:
    reports = []
    for seed in seeds:
        res = run_study(cfg, seed, methods)
        for k, v in res.timings.items():
            run.timings[f"seed{seed}.{k}"] = round(v, 3)
        reports += [res.reports[m] for m in methods]
        for m, net in (model_names and res.networks or {}).items():
            if m in model_names:
                run.write(model_names[m].format(seed=seed), net.dumps({"variant": m, "seed": seed}) + "\n")
    for r in reports:
        _check_finite("metrics", [r.rmse, r.calibration_error])
    run.write("metrics.json", _dump([r.to_dict() for r in reports]))
    run.write("metrics.csv", reports_to_csv(reports))
    summary = {}
    for m in methods:
        rs = [r for r in reports if r.method == m]
        summary[m] = {"rmse": float(np.mean([r.rmse for r in rs])),
                      "calib_err": float(np.mean([r.calibration_error for r in rs]))}
    run.metrics = summary
    return reports


def cmd_ablate(args, cfg: RunConfig) -> int:
    if args.variant not in ABLATIONS:
        raise UsageError(f"unknown variant {args.variant!r}; expected one of {', '.join(ABLATIONS)}")
    seeds = _seeds(args, cfg)
    run = Run("ablate", args.out, cfg, seeds[0] if len(seeds) == 1 else None,
              {"variant": args.variant, "seeds": seeds})
    names = {"mars": "score_net_full_seed{seed}.json"}
    if args.variant != "ssge":
        names[args.variant] = f"score_net_{args.variant}_seed{{seed}}.json"
    _study(run, cfg, seeds, ("mars", args.variant), names)
    run.finish()
    return EXIT_OK


def cmd_compare(args, cfg: RunConfig) -> int:
    methods = tuple(args.methods.split(","))
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown method(s) {', '.join(bad)}; expected from {', '.join(METHODS)}")
    seeds = _seeds(args, cfg)
    run = Run("compare", args.out, cfg, seeds[0] if len(seeds) == 1 else None, {"methods": list(methods), "seeds": seeds})
    _study(run, cfg, seeds, methods)
    run.finish()
    return EXIT_OK


def cmd_bench_score(args, cfg: RunConfig) -> int:
    setup = args.setup
    if setup not in BENCH_SETUPS:
        raise UsageError(f"unknown setup {setup!r}; expected one of {', '.join(BENCH_SETUPS)}")
    seeds = _seeds(args, cfg)
    run = Run("bench-score", args.out, cfg, seeds[0] if len(seeds) == 1 else None, {"setup": setup, "seeds": seeds})
    results = []
    for seed in seeds:
        res = run_bench(setup, seed, cfg)
        run.timings[f"seed{seed}"] = round(res.seconds, 3)
        results.append(res)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["setup", "seed", "estimator", "rmse", "cosine"])
    for res in results:
        for est, (r, c) in res.rows.items():
            _check_finite("score metrics", [r, c])
            w.writerow([setup, res.seed, est, repr(r), repr(c)])
    table = {est: {"rmse": float(np.mean([r.rows[est][0] for r in results])),
                   "cosine": float(np.mean([r.rows[est][1] for r in results]))} for est in results[0].rows}
    for est, v in table.items():
        w.writerow([setup, "mean", est, repr(v["rmse"]), repr(v["cosine"])])
    run.write("bench.csv", buf.getvalue())
    run.write("bench.json", _dump({"setup": setup, "per_seed": [
        {"seed": r.seed, "rows": {k: {"rmse": v[0], "cosine": v[1]} for k, v in r.rows.items()}} for r in results
    ], "mean": table}))
    run.metrics = table
    run.finish()
    return EXIT_OK


# --- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mars", description="Meta-learned function-space priors for BNNs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="TOML run configuration")
        sp.add_argument("--seed", type=int, help="random seed (default: the first configured seed)")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        return sp

    common(sub.add_parser("gen-env", help="write a sinusoid meta-learning environment as CSV files"))
    sp = common(sub.add_parser("train-score", help="fit interpolators and meta-train the score network"))
    sp.add_argument("--variant", default="full", help="full | gp-mean | no-spectral")
    sp = common(sub.add_parser("infer", help="fSVGD inference on a task with a trained score network"))
    sp.add_argument("--model", type=Path, help="score network JSON")
    sp.add_argument("--task", type=Path, help="task CSV (context data)")
    sp.add_argument("--query", type=Path, help="CSV of query inputs (default: the task inputs)")
    sp = common(sub.add_parser("eval", help="score a predictions CSV against targets"))
    sp.add_argument("--predictions", type=Path)
    sp.add_argument("--targets", type=Path)
    sp = common(sub.add_parser("ablate", help="compare the full method with one ablation"))
    sp.add_argument("--variant", required=True, help="ssge | no-spectral | gp-mean")
    sp = common(sub.add_parser("compare", help="run several methods on the configured environment"))
    sp.add_argument("--methods", default="mars,gp,vanilla", help=f"comma-separated subset of {','.join(METHODS)}")
    sp = common(sub.add_parser("bench-score", help="score-estimation benchmark against an analytic marginal"))
    sp.add_argument("--setup", default="gp2d", help="gp2d | tp2d")
    return p


COMMANDS = {
    "gen-env": cmd_gen_env,
    "train-score": cmd_train_score,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "compare": cmd_compare,
    "bench-score": cmd_bench_score,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        if args.seed is not None and args.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, TaskFormatError) as e:
        print(f"mars {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"mars {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
