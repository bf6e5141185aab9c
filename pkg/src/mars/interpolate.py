"""Per-task Bayesian interpolators: Matern-5/2 GP and MC-dropout networks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.linalg import cho_solve, cholesky
from scipy.spatial.distance import cdist

from .envs import Dataset, TaskCollection

JITTER_LADDER = (1e-10, 1e-8, 1e-6, 1e-4)
DEFAULT_NOISE_VARIANCE = 0.01
DEFAULT_SIGNAL_VARIANCE = 1.0
DEFAULT_LENGTHSCALE_GRID = tuple(np.logspace(-3, 1, 10))
SQRT5 = math.sqrt(5.0)


class FactorizationError(ArithmeticError):
    """Cholesky failed even with the largest jitter."""


def matern52_from_distance(r, lengthscale: float, signal_variance: float = 1.0):
    s = SQRT5 * np.asarray(r, dtype=float) / lengthscale
    return signal_variance * (1.0 + s + s * s / 3.0) * np.exp(-s)


def matern52_kernel(x, x2, lengthscale: float, signal_variance: float = 1.0) -> float:
    if lengthscale <= 0:
        raise ValueError("lengthscale must be positive")
    r = np.linalg.norm(np.atleast_1d(np.asarray(x, float)) - np.atleast_1d(np.asarray(x2, float)))
    return float(matern52_from_distance(r, lengthscale, signal_variance))


def matern52_gram(a: np.ndarray, b: np.ndarray, lengthscale: float, signal_variance: float = 1.0) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    return matern52_from_distance(cdist(a, b), lengthscale, signal_variance)


def jittered_cholesky(a: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, escalating diagonal jitter on failure.

    Returns the factor and the jitter that was needed (0.0 if none).
    """
    try:
        return cholesky(a, lower=True), 0.0
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(a.shape[0])
    for jitter in JITTER_LADDER:
        try:
            return cholesky(a + jitter * eye, lower=True), jitter
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError(f"matrix not positive definite even with jitter {JITTER_LADDER[-1]}")


@dataclass(frozen=True)
class GPPosteriorMarginal:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


@dataclass(frozen=True)
class MaternGP:
    lengthscale: float
    signal_variance: float
    noise_variance: float
    train_inputs: np.ndarray
    train_targets: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def input_dim(self) -> int:
        return self.train_inputs.shape[1]

    def kernel(self, a, b):
        return matern52_gram(a, b, self.lengthscale, self.signal_variance)

    def hyperparameters(self) -> dict:
        return {
            "lengthscale": self.lengthscale,
            "signal_variance": self.signal_variance,
            "noise_variance": self.noise_variance,
        }

    def posterior_marginal(self, X) -> GPPosteriorMarginal:
        return gp_posterior_marginal(self, X)

    def sample(self, X, rng: np.random.Generator) -> np.ndarray:
        return gp_sample(gp_posterior_marginal(self, X), rng)

    def mean(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        if self.train_inputs.shape[0] == 0:
            return np.zeros(X.shape[0])
        return self.kernel(X, self.train_inputs) @ self.alpha


def gp_fit(
    data: Dataset | tuple,
    lengthscale: float,
    signal_variance: float = DEFAULT_SIGNAL_VARIANCE,
    noise_variance: float = DEFAULT_NOISE_VARIANCE,
) -> MaternGP:
    """Zero-mean GP conditioned on `data`; an (X, y) pair with zero rows gives the prior."""
    if lengthscale <= 0 or signal_variance <= 0 or noise_variance <= 0:
        raise ValueError("GP hyperparameters must be positive")
    if isinstance(data, Dataset):
        X, y = data.inputs, data.targets
    else:
        X, y = data
        X = np.asarray(X, float).reshape(len(y), -1) if len(y) else np.asarray(X, float)
        y = np.asarray(y, float).reshape(-1)
    m = X.shape[0]
    if m == 0:
        empty = np.zeros((0, 0))
        return MaternGP(lengthscale, signal_variance, noise_variance, X, y, empty, np.zeros(0))
    K = matern52_gram(X, X, lengthscale, signal_variance) + noise_variance * np.eye(m)
    L, jitter = jittered_cholesky(K)
    alpha = cho_solve((L, True), y)
    return MaternGP(lengthscale, signal_variance, noise_variance, X, y, L, alpha, jitter)


def gp_log_marginal_likelihood(gp: MaternGP) -> float:
    y = gp.train_targets
    m = y.shape[0]
    if m == 0:
        return 0.0
    return float(-0.5 * y @ gp.alpha - np.log(np.diag(gp.chol)).sum() - 0.5 * m * math.log(2 * math.pi))


def gp_posterior_marginal(gp: MaternGP, X) -> GPPosteriorMarginal:
    X = np.atleast_2d(np.asarray(X, float))
    if X.shape[0] < 1:
        raise ValueError("need at least one query point")
    Kss = gp.kernel(X, X)
    if gp.train_inputs.shape[0] == 0:
        return GPPosteriorMarginal(np.zeros(X.shape[0]), Kss)
    Ks = gp.kernel(gp.train_inputs, X)
    mean = Ks.T @ gp.alpha
    v = cho_solve((gp.chol, True), Ks)
    cov = Kss - Ks.T @ v
    cov = 0.5 * (cov + cov.T)
    return GPPosteriorMarginal(mean, cov)


def gp_sample(marg: GPPosteriorMarginal, rng: np.random.Generator) -> np.ndarray:
    k = marg.mean.shape[0]
    z = rng.standard_normal(k)
    if not np.any(marg.cov):
        return marg.mean.copy()
    L, _ = jittered_cholesky(marg.cov + JITTER_LADDER[0] * np.eye(k))
    return marg.mean + L @ z


def _cv_folds(m: int, rng: np.random.Generator, n_folds: int = 4) -> list[np.ndarray]:
    perm = rng.permutation(m)
    return [f for f in np.array_split(perm, n_folds)]


def heldout_log_likelihood(gp: MaternGP, X: np.ndarray, y: np.ndarray) -> float:
    """Joint log predictive density of noisy held-out targets."""
    marg = gp_posterior_marginal(gp, X)
    cov = marg.cov + gp.noise_variance * np.eye(len(y))
    L, _ = jittered_cholesky(cov)
    r = y - marg.mean
    a = cho_solve((L, True), r)
    return float(-0.5 * r @ a - np.log(np.diag(L)).sum() - 0.5 * len(y) * math.log(2 * math.pi))


def cv_scores(
    tasks: TaskCollection,
    candidates: Sequence[float],
    rng: np.random.Generator,
    signal_variance: float = DEFAULT_SIGNAL_VARIANCE,
    noise_variance: float = DEFAULT_NOISE_VARIANCE,
    n_folds: int = 4,
) -> np.ndarray:
    """Mean held-out log likelihood per (task, candidate)."""
    for i, t in enumerate(tasks):
        if t.size < n_folds:
            raise ValueError(f"task {i} has {t.size} points; {n_folds}-fold CV needs at least {n_folds}")
    scores = np.zeros((len(tasks), len(candidates)))
    for i, t in enumerate(tasks):
        folds = _cv_folds(t.size, rng, n_folds)
        for j, ell in enumerate(candidates):
            fold_scores = []
            for f in folds:
                train = np.setdiff1d(np.arange(t.size), f)
                gp = gp_fit((t.inputs[train], t.targets[train]), ell, signal_variance, noise_variance)
                fold_scores.append(heldout_log_likelihood(gp, t.inputs[f], t.targets[f]))
            scores[i, j] = np.mean(fold_scores)
    return scores


def cv_select_lengthscale(
    tasks: TaskCollection,
    candidates: Sequence[float] = DEFAULT_LENGTHSCALE_GRID,
    rng: np.random.Generator | None = None,
    signal_variance: float = DEFAULT_SIGNAL_VARIANCE,
    noise_variance: float = DEFAULT_NOISE_VARIANCE,
) -> float:
    candidates = list(candidates)
    if not candidates:
        raise ValueError("need at least one lengthscale candidate")
    if rng is None:
        rng = np.random.default_rng(0)
    scores = cv_scores(tasks, candidates, rng, signal_variance, noise_variance)
    # np.argmax returns the first maximum, i.e. ties go to the smaller index
    return float(candidates[int(np.argmax(scores.mean(axis=0)))])


def fit_gps(
    tasks: TaskCollection,
    rng: np.random.Generator,
    candidates: Sequence[float] = DEFAULT_LENGTHSCALE_GRID,
    signal_variance: float = DEFAULT_SIGNAL_VARIANCE,
    noise_variance: float = DEFAULT_NOISE_VARIANCE,
    lengthscale: float | None = None,
) -> list[MaternGP]:
    """One GP per task with a lengthscale shared across tasks (CV-selected unless given)."""
    if lengthscale is None:
        lengthscale = cv_select_lengthscale(tasks, candidates, rng, signal_variance, noise_variance)
    return [gp_fit(t, lengthscale, signal_variance, noise_variance) for t in tasks]


# --- MC dropout -------------------------------------------------------------

LEAKY_SLOPE = 0.01
DTYPE = torch.float64


@dataclass
class McDropoutNet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout_prob: float
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {self.dropout_prob}")
        for w0, w1 in zip(self.weights[:-1], self.weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ValueError("layer shapes do not chain")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def sample(self, X, rng: np.random.Generator) -> np.ndarray:
        return mcdropout_sample(self, X, rng)

    def deterministic(self, X) -> np.ndarray:
        return mcdropout_sample(self, X, None)

    mean = deterministic


def _init_mlp(d: int, hidden: Sequence[int], rng: np.random.Generator):
    sizes = [d, *hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        # truncated normal at 2 std, std 1/sqrt(fan_in)
        std = 1.0 / math.sqrt(fan_in)
        w = rng.standard_normal((fan_in, fan_out))
        bad = np.abs(w) > 2.0
        while bad.any():
            w[bad] = rng.standard_normal(bad.sum())
            bad = np.abs(w) > 2.0
        weights.append(std * w)
        biases.append(np.zeros(fan_out))
    return weights, biases


def _dropout_forward(ws, bs, x, masks, p):
    h = x
    for i, (w, b) in enumerate(zip(ws, bs)):
        h = h @ w + b
        if i < len(ws) - 1:
            h = torch.nn.functional.leaky_relu(h, LEAKY_SLOPE)
            if masks is not None:
                h = h * masks[i] / (1.0 - p)
    return h[..., 0]


def _draw_masks(rng, sizes, rows, p):
    if rng is None or p == 0.0:
        return None
    return [torch.as_tensor(rng.random((rows, s)) >= p, dtype=DTYPE) for s in sizes]


def mcdropout_fit(
    data: Dataset,
    dropout_prob: float = 0.1,
    epochs: int = 100,
    lr: float = 1e-3,
    weight_decay: float = 0.0,
    batch_size: int = 8,
    rng: np.random.Generator | None = None,
    hidden: Sequence[int] = (32, 32, 32),
) -> McDropoutNet:
    if not 0.0 <= dropout_prob < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {dropout_prob}")
    if rng is None:
        rng = np.random.default_rng(0)
    hyper = dict(epochs=epochs, lr=lr, weight_decay=weight_decay, batch_size=batch_size)
    w0, b0 = _init_mlp(data.input_dim, hidden, rng)
    ws = [torch.tensor(w, dtype=DTYPE, requires_grad=True) for w in w0]
    bs = [torch.tensor(b, dtype=DTYPE, requires_grad=True) for b in b0]
    opt = torch.optim.Adam([*ws, *bs], lr=lr, weight_decay=weight_decay)
    X = torch.tensor(data.inputs, dtype=DTYPE)
    y = torch.tensor(data.targets, dtype=DTYPE)
    m = data.size
    bsz = m if batch_size > m else batch_size
    for _ in range(epochs):
        perm = rng.permutation(m)
        for start in range(0, m, bsz):
            idx = perm[start:start + bsz]
            masks = _draw_masks(rng, hidden, len(idx), dropout_prob)
            pred = _dropout_forward(ws, bs, X[idx], masks, dropout_prob)
            loss = torch.mean((pred - y[idx]) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return McDropoutNet(
        [w.detach().numpy().copy() for w in ws],
        [b.detach().numpy().copy() for b in bs],
        dropout_prob,
        hyper,
    )


def mcdropout_sample(net: McDropoutNet, X, rng: np.random.Generator | None) -> np.ndarray:
    """One stochastic forward pass (deterministic when rng is None or p == 0)."""
    X = np.atleast_2d(np.array(X, float))
    ws = [torch.as_tensor(w) for w in net.weights]
    bs = [torch.as_tensor(b) for b in net.biases]
    sizes = [w.shape[1] for w in net.weights[:-1]]
    masks = _draw_masks(rng, sizes, X.shape[0], net.dropout_prob)
    with torch.no_grad():
        out = _dropout_forward(ws, bs, torch.as_tensor(X, dtype=DTYPE), masks, net.dropout_prob)
    return out.numpy().copy()
