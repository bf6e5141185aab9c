"""Meta-learning environments: synthetic sinusoid tasks, CSV ingestion,
standardization and the uniform measurement distribution."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

ZERO_RANGE_WIDTH = 1e-6
STD_FLOOR = 1e-8


class TaskFormatError(ValueError):
    """Raised when a task file cannot be parsed into a dataset."""


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.array(self.inputs, dtype=float)
        y = np.array(self.targets, dtype=float).reshape(-1)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise ValueError(f"inputs must be a matrix, got shape {x.shape}")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"{x.shape[0]} input rows but {y.shape[0]} targets")
        if x.shape[0] < 1:
            raise ValueError("a dataset needs at least one row")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite values")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class TaskCollection:
    tasks: tuple[Dataset, ...]

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if not tasks:
            raise ValueError("a task collection needs at least one task")
        dims = {t.input_dim for t in tasks}
        if len(dims) != 1:
            raise ValueError(f"tasks disagree on input dimension: {sorted(dims)}")
        object.__setattr__(self, "tasks", tasks)

    @property
    def input_dim(self) -> int:
        return self.tasks[0].input_dim

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    def stacked_inputs(self) -> np.ndarray:
        return np.concatenate([t.inputs for t in self.tasks], axis=0)

    def stacked_targets(self) -> np.ndarray:
        return np.concatenate([t.targets for t in self.tasks], axis=0)


# --- sinusoid environment -------------------------------------------------


@dataclass(frozen=True)
class SinusoidParams:
    a: float
    b: float
    c: float
    beta: float

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"amplitude must be positive, got {self.a}")


def sinusoid_sample_params(rng: np.random.Generator) -> SinusoidParams:
    a = rng.uniform(0.7, 1.3)
    b = rng.normal(0.0, 0.1)
    c = rng.normal(5.0, 0.1)
    beta = rng.normal(0.5, 0.2)
    return SinusoidParams(a=float(a), b=float(b), c=float(c), beta=float(beta))


def sinusoid_eval(p: SinusoidParams, x):
    """beta*x + a*sin(1.5*(x - b)) + c, elementwise for arrays."""
    return p.beta * x + p.a * np.sin(1.5 * (x - p.b)) + p.c


def sinusoid_sample_dataset(
    p: SinusoidParams,
    m: int,
    noise_std: float,
    rng: np.random.Generator,
    x_range: tuple[float, float] = (-5.0, 5.0),
) -> Dataset:
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    x = rng.uniform(x_range[0], x_range[1], size=m)
    y = sinusoid_eval(p, x)
    if noise_std > 0:
        y = y + noise_std * rng.standard_normal(m)
    return Dataset(x[:, None], y)


def sinusoid_tasks(
    n: int, m: int, noise_std: float, rng: np.random.Generator
) -> tuple[TaskCollection, list[SinusoidParams]]:
    params = []
    tasks = []
    for _ in range(n):
        p = sinusoid_sample_params(rng)
        params.append(p)
        tasks.append(sinusoid_sample_dataset(p, m, noise_std, rng))
    return TaskCollection(tuple(tasks)), params


# --- measurement distribution ---------------------------------------------


@dataclass(frozen=True)
class MeasurementDistribution:
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.array(self.low, dtype=float).reshape(-1)
        high = np.array(self.high, dtype=float).reshape(-1)
        if low.shape != high.shape:
            raise ValueError("low and high must have the same length")
        if np.any(low > high):
            raise ValueError("low must not exceed high")
        low.setflags(write=False)
        high.setflags(write=False)
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @property
    def dim(self) -> int:
        return self.low.shape[0]

    def to_dict(self) -> dict:
        return {"low": self.low.tolist(), "high": self.high.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MeasurementDistribution":
        return cls(np.asarray(d["low"]), np.asarray(d["high"]))


def build_measurement_hypercube(tasks: TaskCollection, expand: float = 0.2) -> MeasurementDistribution:
    if tasks is None or len(tasks) == 0:
        raise ValueError("cannot build a hypercube from an empty collection")
    x = tasks.stacked_inputs()
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    span = hi - lo
    low = lo - expand * span
    high = hi + expand * span
    flat = span == 0
    low[flat] -= ZERO_RANGE_WIDTH
    high[flat] += ZERO_RANGE_WIDTH
    return MeasurementDistribution(low, high)


def sample_measurement_set(nu: MeasurementDistribution, k: int, rng: np.random.Generator) -> np.ndarray:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    u = rng.uniform(size=(k, nu.dim))
    # convex combination keeps samples inside [low, high] under rounding
    return nu.low * (1.0 - u) + nu.high * u


# --- standardization ------------------------------------------------------


@dataclass(frozen=True)
class Standardizer:
    input_mean: np.ndarray
    input_std: np.ndarray
    output_mean: float
    output_std: float

    @classmethod
    def fit(cls, tasks: TaskCollection) -> "Standardizer":
        x = tasks.stacked_inputs()
        y = tasks.stacked_targets()
        x_std = x.std(axis=0)
        x_std = np.where(x_std < STD_FLOOR, 1.0, x_std)
        y_std = float(y.std())
        if y_std < STD_FLOOR:
            y_std = 1.0
        return cls(x.mean(axis=0), x_std, float(y.mean()), y_std)

    def apply_inputs(self, x):
        return (np.asarray(x, dtype=float) - self.input_mean) / self.input_std

    def invert_inputs(self, z):
        return np.asarray(z, dtype=float) * self.input_std + self.input_mean

    def apply_targets(self, y):
        return (np.asarray(y, dtype=float) - self.output_mean) / self.output_std

    def invert_targets(self, z):
        return np.asarray(z, dtype=float) * self.output_std + self.output_mean

    def apply(self, data: Dataset) -> Dataset:
        return Dataset(self.apply_inputs(data.inputs), self.apply_targets(data.targets))

    def apply_all(self, tasks: TaskCollection) -> TaskCollection:
        return TaskCollection(tuple(self.apply(t) for t in tasks))

    def to_dict(self) -> dict:
        return {
            "means": [*np.asarray(self.input_mean).tolist(), self.output_mean],
            "stds": [*np.asarray(self.input_std).tolist(), self.output_std],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        means, stds = list(d["means"]), list(d["stds"])
        return cls(np.asarray(means[:-1]), np.asarray(stds[:-1]), float(means[-1]), float(stds[-1]))


def fit_standardizer(tasks: TaskCollection) -> Standardizer:
    return Standardizer.fit(tasks)


# --- CSV ingestion --------------------------------------------------------


def _resolve_columns(header: list[str], spec, path: Path) -> list[int]:
    if isinstance(spec, (str, int)):
        spec = [spec]
    idx = []
    for col in spec:
        if isinstance(col, int):
            if not 0 <= col < len(header):
                raise TaskFormatError(f"{path}: column index {col} out of range")
            idx.append(col)
        elif col in header:
            idx.append(header.index(col))
        else:
            raise TaskFormatError(f"{path}: missing column {col!r}")
    return idx


def load_csv_task(path, input_cols, target_col) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise TaskFormatError(f"{path}: file not found")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise TaskFormatError(f"{path}: empty file, header row required") from None
        in_idx = _resolve_columns(header, input_cols, path)
        (t_idx,) = _resolve_columns(header, [target_col], path)
        xs, ys = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            values = []
            for j in [*in_idx, t_idx]:
                cell = row[j].strip() if j < len(row) else ""
                try:
                    v = float(cell)
                except ValueError:
                    raise TaskFormatError(
                        f"{path}, line {lineno}: non-numeric value {cell!r} in column {header[j]!r}"
                    ) from None
                if not math.isfinite(v):
                    raise TaskFormatError(
                        f"{path}, line {lineno}: non-finite value {cell!r} in column {header[j]!r}"
                    )
                values.append(v)
            xs.append(values[:-1])
            ys.append(values[-1])
    if not xs:
        raise TaskFormatError(f"{path}: no data rows")
    return Dataset(np.array(xs), np.array(ys))


def load_csv_tasks(paths: Sequence, input_cols, target_col) -> TaskCollection:
    return TaskCollection(tuple(load_csv_task(p, input_cols, target_col) for p in paths))


def task_to_csv(data: Dataset, input_names: Sequence[str] | None = None, target_name: str = "y") -> str:
    if input_names is None:
        input_names = [f"x{j}" for j in range(data.input_dim)]
    if len(input_names) != data.input_dim:
        raise ValueError(f"{len(input_names)} column names for {data.input_dim} input dims")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*input_names, target_name])
    for x, y in zip(data.inputs, data.targets):
        w.writerow([repr(float(v)) for v in x] + [repr(float(y))])
    return buf.getvalue()


def write_csv_task(path, data: Dataset, input_names: Sequence[str] | None = None, target_name: str = "y"):
    Path(path).write_text(task_to_csv(data, input_names, target_name), encoding="utf-8")
