"""Regression metrics, analytic Gaussian marginal scores and score-quality benchmarks."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

DEFAULT_LEVELS = 20
METRIC_COLUMNS = ("env", "method", "seed", "rmse", "calib_err")


def rmse(predicted, targets) -> float:
    p = np.asarray(predicted, float).reshape(-1)
    t = np.asarray(targets, float).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"{p.size} predictions for {t.size} targets")
    if p.size < 1:
        raise ValueError("rmse needs at least one point")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def calibration_grid(num_levels: int = DEFAULT_LEVELS) -> np.ndarray:
    """q_h = h / (H + 1), h = 1..H: equally spaced, strictly inside (0, 1)."""
    return np.arange(1, num_levels + 1) / (num_levels + 1)


def predictive_cdf(mixture, y) -> np.ndarray:
    return mixture.cdf(y)


def calibration_error(cdf_values, levels=None) -> float:
    """Mean |q_hat_h - q_h| where q_hat_h is the fraction of CDF values strictly below q_h."""
    F = np.asarray(cdf_values, float).reshape(-1)
    if F.size < 1:
        raise ValueError("calibration error needs at least one test point")
    q = calibration_grid() if levels is None else np.asarray(levels, float)
    q_hat = (F[:, None] < q[None, :]).mean(axis=0)
    return float(np.mean(np.abs(q_hat - q)))


def analytic_gp_marginal_score(mean, cov, f) -> np.ndarray:
    """-cov^{-1} (f - mean); f may carry leading batch axes."""
    mean = np.asarray(mean, float)
    cov = np.asarray(cov, float)
    f = np.asarray(f, float)
    try:
        c = cho_factor(cov, lower=True)
    except LinAlgError as e:
        raise ArithmeticError("covariance is not positive definite") from e
    r = (f - mean).reshape(-1, mean.shape[0]).T
    return -cho_solve(c, r).T.reshape(f.shape)


def cosine_similarity(a, b) -> np.ndarray:
    """Row-wise cosine; two zero rows give 1, exactly one zero row gives 0."""
    a = np.atleast_2d(np.asarray(a, float))
    b = np.atleast_2d(np.asarray(b, float))
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    out = np.zeros(a.shape[0])
    both = (na > 0) & (nb > 0)
    out[both] = np.sum(a[both] * b[both], axis=-1) / (na[both] * nb[both])
    out[(na == 0) & (nb == 0)] = 1.0
    return out


def score_benchmark(estimator: Callable, truth: Callable, points) -> tuple[float, float]:
    """(RMSE over all score entries, mean per-point cosine similarity)."""
    points = np.atleast_2d(np.asarray(points, float))
    if points.shape[0] < 1:
        raise ValueError("need at least one evaluation point")
    est = np.atleast_2d(estimator(points))
    tru = np.atleast_2d(truth(points))
    err = float(np.sqrt(np.mean((est - tru) ** 2)))
    return err, float(np.mean(cosine_similarity(est, tru)))


@dataclass
class TaskMetrics:
    task: int
    rmse: float
    calibration_error: float


@dataclass
class MetricReport:
    rmse: float
    calibration_error: float
    per_task: list[TaskMetrics] = field(default_factory=list)
    env: str = ""
    method: str = ""
    seed: int | None = None

    def __post_init__(self):
        if self.rmse < 0 or self.calibration_error < 0:
            raise ValueError("metrics must be non-negative")

    @classmethod
    def from_tasks(cls, per_task: Sequence[TaskMetrics], **labels) -> "MetricReport":
        per_task = list(per_task)
        return cls(
            float(np.mean([t.rmse for t in per_task])),
            float(np.mean([t.calibration_error for t in per_task])),
            per_task,
            **labels,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_row(self) -> dict:
        return {
            "env": self.env,
            "method": self.method,
            "seed": "" if self.seed is None else self.seed,
            "rmse": repr(self.rmse),
            "calib_err": repr(self.calibration_error),
        }


def reports_to_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def evaluate_predictions(mixture, targets) -> TaskMetrics:
    targets = np.asarray(targets, float)
    return TaskMetrics(-1, rmse(mixture.mean, targets), calibration_error(mixture.cdf(targets)))
