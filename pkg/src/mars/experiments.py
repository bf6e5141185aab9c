"""End-to-end pipelines: meta-train a prior score, run BNN inference, benchmark score estimates."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from scipy.linalg import cho_solve

from .config import RunConfig
from .envs import (
    Dataset,
    MeasurementDistribution,
    Standardizer,
    TaskCollection,
    build_measurement_hypercube,
    load_csv_tasks,
    sinusoid_sample_dataset,
    sinusoid_sample_params,
    sinusoid_tasks,
)
from .evaluate import MetricReport, TaskMetrics, calibration_error, rmse, score_benchmark
from .fsvgd import (
    AnalyticGaussianProcessScore,
    BnnArchitecture,
    LearnedScore,
    PriorScore,
    SSGEPriorScore,
    ZeroPriorScore,
    predictive,
    run_inference,
)
from .interpolate import JITTER_LADDER, fit_gps, jittered_cholesky, mcdropout_fit
from .scorenet import ScoreNetwork, TrainResult, forward, meta_train, train_on_samples
from .ssge import median_lengthscale, rbf_gram, ssge_fit

VARIANTS = ("full", "gp-mean", "no-spectral")
METHODS = ("mars", "gp", "vanilla", "gp-mean", "no-spectral", "ssge")
BENCH_SETUPS = ("gp2d", "tp2d")

# independent random streams per pipeline stage, keyed by (seed, stage[, index])
_ENV, _INTERP, _TRAIN, _INFER, _BENCH = range(5)


def stream(seed: int, stage: int, *index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, *index])


@dataclass
class MetaProblem:
    """Standardized meta-training tasks and held-out (context, test) pairs."""

    train: TaskCollection
    tests: list[tuple[Dataset, Dataset]]
    standardizer: Standardizer
    nu: MeasurementDistribution


def _split_rows(d: Dataset, n_context: int) -> tuple[Dataset, Dataset]:
    if d.size <= n_context:
        raise ValueError(f"test task has {d.size} rows; need more than {n_context} context rows")
    return (Dataset(d.inputs[:n_context], d.targets[:n_context]),
            Dataset(d.inputs[n_context:], d.targets[n_context:]))


def build_problem(cfg: RunConfig, seed: int) -> MetaProblem:
    env = cfg.env
    if env.kind == "sinusoid":
        rng = stream(seed, _ENV)
        train, _ = sinusoid_tasks(env.num_tasks, env.points_per_task, env.noise_std, rng)
        tests = []
        for _ in range(env.num_test_tasks):
            p = sinusoid_sample_params(rng)
            tests.append((sinusoid_sample_dataset(p, env.context_points, env.noise_std, rng),
                          sinusoid_sample_dataset(p, env.test_points, env.noise_std, rng)))
    else:
        train = load_csv_tasks(env.train_paths, list(env.input_cols), env.target_col)
        tests = [_split_rows(d, env.context_points)
                 for d in load_csv_tasks(env.test_paths, list(env.input_cols), env.target_col)] if env.test_paths else []
    st = Standardizer.fit(train)
    z = st.apply_all(train)
    return MetaProblem(z, [(st.apply(c), st.apply(t)) for c, t in tests], st, build_measurement_hypercube(z))


def fit_interpolators(tasks: TaskCollection, cfg: RunConfig, seed: int) -> list:
    ic = cfg.interpolator
    rng = stream(seed, _INTERP)
    if ic.kind == "gp":
        return fit_gps(tasks, rng, signal_variance=ic.signal_variance, noise_variance=ic.noise_variance,
                       lengthscale=ic.lengthscale)
    return [
        mcdropout_fit(t, ic.dropout_prob, ic.epochs, ic.learning_rate, ic.weight_decay, ic.batch_size, rng)
        for t in tasks
    ]


def train_score_network(problem: MetaProblem, interpolators, cfg: RunConfig, seed: int,
                        variant: str = "full") -> TrainResult:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    sc = cfg.scorenet
    if variant == "no-spectral":
        sc = replace(sc, spectral_norm=False)
    # every variant starts from the same initial network and sample stream
    return meta_train(problem.train, interpolators, problem.nu, sc, stream(seed, _TRAIN),
                      use_posterior_mean=(variant == "gp-mean"))


def evaluate_prior(problem: MetaProblem, prior: PriorScore, cfg: RunConfig, seed: int,
                   weight_decay: float = 0.0, labels: dict | None = None) -> MetricReport:
    """Infer on each test task's context points and score the predictive on its test points.

    RMSE is reported in original target units; calibration is unit-free.
    """
    if not problem.tests:
        raise ValueError("the environment has no test tasks")
    arch = BnnArchitecture(problem.train.input_dim, cfg.baselines.hidden)
    icfg = replace(cfg.inference, weight_decay=weight_decay)
    st = problem.standardizer
    per_task = []
    for j, (ctx, test) in enumerate(problem.tests):
        # common random numbers: every method sees the same initial particles per task
        ens = run_inference(ctx, prior, arch, icfg, stream(seed, _INFER, j), problem.nu)
        mix = predictive(ens, icfg.likelihood_std, test.inputs)
        per_task.append(TaskMetrics(
            j,
            rmse(st.invert_targets(mix.mean), st.invert_targets(test.targets)),
            calibration_error(mix.cdf(test.targets)),
        ))
    return MetricReport.from_tasks(per_task, **(labels or {}))


@dataclass
class StudyResult:
    reports: dict[str, MetricReport]
    networks: dict[str, ScoreNetwork] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)


_METHOD_VARIANT = {"mars": "full", "gp-mean": "gp-mean", "no-spectral": "no-spectral"}


def run_study(cfg: RunConfig, seed: int, methods=("mars", "gp", "vanilla"), env_name: str = "") -> StudyResult:
    """Fit every requested method on one seed of the environment."""
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown method(s) {unknown}; expected from {METHODS}")
    env_name = env_name or cfg.env.kind
    out = StudyResult({})
    t0 = time.perf_counter()
    problem = build_problem(cfg, seed)
    needs_interp = any(m in _METHOD_VARIANT or m == "ssge" for m in methods)
    interps = fit_interpolators(problem.train, cfg, seed) if needs_interp else []
    out.timings["setup"] = time.perf_counter() - t0
    for m in methods:
        t0 = time.perf_counter()
        wd = 0.0
        if m in _METHOD_VARIANT:
            net = train_score_network(problem, interps, cfg, seed, _METHOD_VARIANT[m]).network
            out.networks[m] = net
            prior = LearnedScore(net)
        elif m == "gp":
            prior = AnalyticGaussianProcessScore(cfg.baselines.gp_prior_lengthscale)
        elif m == "vanilla":
            prior, wd = ZeroPriorScore(), cfg.baselines.vanilla_weight_decay
        else:
            prior = SSGEPriorScore(interps, cfg.baselines.ssge_lengthscale)
        out.reports[m] = evaluate_prior(problem, prior, cfg, seed, wd, {"env": env_name, "method": m, "seed": seed})
        out.timings[m] = time.perf_counter() - t0
    return out


# --- score-quality benchmark ------------------------------------------------------

BENCH_DF = 5.0
BENCH_JITTER = 1e-6


def bench_mean(x: np.ndarray) -> np.ndarray:
    return 2.0 * x + 5.0 * np.sin(2.0 * x)


@dataclass(frozen=True)
class BenchMarginal:
    """Marginal of a GP or Student-t process (RBF kernel, unit lengthscale) at two inputs."""

    X: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    df: float | None = None

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        L, _ = jittered_cholesky(self.cov)
        z = rng.standard_normal((n, len(self.mean))) @ L.T
        if self.df is not None:
            # chi-square scale mixture of the Gaussian marginal
            z = z * np.sqrt(self.df / rng.chisquare(self.df, size=n))[:, None]
        return self.mean + z

    def score(self, f) -> np.ndarray:
        f = np.atleast_2d(f)
        L, _ = jittered_cholesky(self.cov)
        r = f - self.mean
        a = cho_solve((L, True), r.T).T
        if self.df is None:
            return -a
        k = len(self.mean)
        delta = np.sum(r * a, axis=1, keepdims=True)
        return -(self.df + k) / (self.df + delta) * a


def bench_marginal(setup: str, rng: np.random.Generator, num_points: int = 2) -> BenchMarginal:
    if setup not in BENCH_SETUPS:
        raise ValueError(f"unknown setup {setup!r}; expected one of {', '.join(BENCH_SETUPS)}")
    half = 5.0 if setup == "gp2d" else 1.0
    X = rng.uniform(-half, half, size=(num_points, 1))
    cov = rbf_gram(X, X, 1.0) + BENCH_JITTER * np.eye(num_points)
    return BenchMarginal(X, bench_mean(X[:, 0]), cov, None if setup == "gp2d" else BENCH_DF)


@dataclass
class BenchResult:
    setup: str
    seed: int
    rows: dict[str, tuple[float, float]]
    seconds: float

    def to_dict(self) -> dict:
        return {"setup": self.setup, "seed": self.seed, "seconds": self.seconds,
                "rows": {k: {"rmse": v[0], "cosine": v[1]} for k, v in self.rows.items()}}


def run_bench(setup: str, seed: int, cfg: RunConfig) -> BenchResult:
    """Train the score network and SSGE on the same marginal samples; score both on fresh samples.

    The marginal and both sample sets come from `cfg.bench.data_seed`; `seed`
    drives the network initialization and training. Both estimators see
    per-coordinate standardized samples z = (f - m) / s, so their scores are
    mapped back with grad_f = grad_z / s.
    """
    t0 = time.perf_counter()
    bc = cfg.bench
    data_rng = stream(bc.data_seed, _BENCH)
    marg = bench_marginal(setup, data_rng)
    train = marg.sample(bc.num_samples, data_rng)
    evals = marg.sample(bc.num_eval, data_rng)
    m, s = train.mean(axis=0), train.std(axis=0)
    s = np.where(s > 1e-8, s, 1.0)
    z_train = (train - m) / s

    sc = replace(cfg.scorenet, train_iters=bc.train_iters, learning_rate=bc.learning_rate)
    net = train_on_samples(marg.X, z_train, sc, stream(seed, _BENCH, 1)).network

    def mars_score(f):
        with torch.no_grad():
            return forward(net, marg.X, (f - m) / s).numpy() / s

    ssge = ssge_fit(z_train, median_lengthscale(z_train))
    rows = {
        "mars": score_benchmark(mars_score, marg.score, evals),
        "ssge": score_benchmark(lambda f: ssge.score((f - m) / s) / s, marg.score, evals),
    }
    return BenchResult(setup, seed, rows, time.perf_counter() - t0)


__all__ = [
    "BENCH_SETUPS", "METHODS", "VARIANTS", "BenchMarginal", "BenchResult", "MetaProblem", "StudyResult",
    "bench_marginal", "build_problem", "evaluate_prior", "fit_interpolators", "run_bench", "run_study",
    "stream", "train_score_network", "JITTER_LADDER",
]
