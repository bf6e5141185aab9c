"""Functional SVGD over an ensemble of MLP particles."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from scipy.linalg import cho_solve
from scipy.special import ndtr

from .envs import (
    Dataset,
    MeasurementDistribution,
    TaskCollection,
    build_measurement_hypercube,
    sample_measurement_set,
)
from .interpolate import jittered_cholesky, matern52_gram
from .scorenet import ScoreNetwork, forward as score_forward
from .ssge import ssge_fit

DTYPE = torch.float64
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class BnnArchitecture:
    input_dim: int
    hidden: tuple[int, ...] = (32, 32, 32)

    @property
    def layer_sizes(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden, 1]
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_sizes)

    def unflatten(self, theta: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """Views of (W, b) per layer; theta has shape (..., P)."""
        out, pos = [], 0
        batch = theta.shape[:-1]
        for i, o in self.layer_sizes:
            W = theta[..., pos:pos + i * o].reshape(batch + (i, o))
            pos += i * o
            b = theta[..., pos:pos + o]
            pos += o
            out.append((W, b))
        return out


@dataclass(frozen=True)
class InferenceConfig:
    step_size: float = 1e-3
    bandwidth: float = 1.0
    likelihood_std: float = 0.1
    num_particles: int = 10
    steps: int = 10000
    measurement_size: int = 8
    batch_cap: int = 16
    weight_decay: float = 0.0

    def __post_init__(self):
        if not (self.step_size >= 0 and self.bandwidth > 0 and self.likelihood_std > 0):
            raise ValueError("step_size must be >= 0; bandwidth and likelihood_std must be positive")
        if self.num_particles < 1 or self.steps < 0 or self.measurement_size < 1 or self.batch_cap < 1:
            raise ValueError("invalid inference sizes")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ParticleEnsemble:
    arch: BnnArchitecture
    theta: np.ndarray  # (L, P)

    def __post_init__(self):
        self.theta = np.atleast_2d(np.asarray(self.theta, float))
        if self.theta.shape[1] != self.arch.num_params:
            raise ValueError(f"particles have {self.theta.shape[1]} params, architecture needs {self.arch.num_params}")

    @property
    def size(self) -> int:
        return self.theta.shape[0]

    def particle_documents(self) -> list[dict]:
        docs = []
        for l in range(self.size):
            layers = []
            for j, (W, b) in enumerate(self.arch.unflatten(torch.as_tensor(self.theta[l]))):
                layers.append({
                    "name": f"layer{j}",
                    "shape": list(W.shape),
                    "weight": W.reshape(-1).tolist(),
                    "bias": b.tolist(),
                })
            docs.append({"format_version": 1, "kind": "bnn_particle", "index": l, "layers": layers})
        return docs

    @classmethod
    def from_documents(cls, arch: BnnArchitecture, docs: Sequence[dict]) -> "ParticleEnsemble":
        rows = []
        for doc in sorted(docs, key=lambda d: d["index"]):
            flat = []
            for layer in doc["layers"]:
                flat += list(layer["weight"]) + list(layer["bias"])
            rows.append(flat)
        return cls(arch, np.array(rows))


# --- initialization -----------------------------------------------------------


def steinwart_bias_init(fan_in: int, low, high, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Unit direction w = a/|a| with a ~ U(0,1)^fan_in and bias -<w, x*>, x* ~ U(low, high)."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    a = rng.uniform(0.0, 1.0, size=fan_in)
    while not np.any(a > 0):
        a = rng.uniform(0.0, 1.0, size=fan_in)
    w = a / np.linalg.norm(a)
    x_star = rng.uniform(np.broadcast_to(low, (fan_in,)), np.broadcast_to(high, (fan_in,)))
    return w, float(-w @ x_star)


def init_particle(arch: BnnArchitecture, domain: MeasurementDistribution, rng: np.random.Generator) -> np.ndarray:
    """He-uniform magnitudes with kinks placed by the Steinwart scheme.

    Each hidden unit gets (w, b) from steinwart_bias_init and is scaled by
    c ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)); the scale keeps the kink at x*
    and every weight entry inside the He bounds.
    """
    flat = []
    layers = arch.layer_sizes
    for j, (fan_in, fan_out) in enumerate(layers):
        bound = math.sqrt(6.0 / fan_in)
        if j == len(layers) - 1:
            flat += list(rng.uniform(-bound, bound, size=fan_in * fan_out)) + [0.0] * fan_out
            continue
        low, high = (domain.low, domain.high) if j == 0 else (-1.0, 1.0)
        W = np.empty((fan_in, fan_out))
        b = np.empty(fan_out)
        for unit in range(fan_out):
            w, bias = steinwart_bias_init(fan_in, low, high, rng)
            c = rng.uniform(-bound, bound)
            W[:, unit] = c * w
            b[unit] = c * bias
        flat += list(W.reshape(-1)) + list(b)
    return np.array(flat)


def init_particles(
    arch: BnnArchitecture, num_particles: int, domain: MeasurementDistribution, rng: np.random.Generator
) -> ParticleEnsemble:
    if num_particles < 1:
        raise ValueError("need at least one particle")
    return ParticleEnsemble(arch, np.stack([init_particle(arch, domain, rng) for _ in range(num_particles)]))


# --- network evaluation ---------------------------------------------------------


def nn_forward_torch(theta: torch.Tensor, arch: BnnArchitecture, X: torch.Tensor) -> torch.Tensor:
    """h_theta(X) for theta of shape (..., P) and X of shape (k, d); returns (..., k)."""
    h = X
    layers = arch.unflatten(theta)
    for j, (W, b) in enumerate(layers):
        h = h @ W + b[..., None, :]
        if j < len(layers) - 1:
            h = torch.nn.functional.leaky_relu(h, LEAKY_SLOPE)
    return h[..., 0]


def nn_forward(theta, arch: BnnArchitecture, X) -> np.ndarray:
    X = torch.as_tensor(np.atleast_2d(np.array(X, float)), dtype=DTYPE)
    with torch.no_grad():
        return nn_forward_torch(torch.as_tensor(np.asarray(theta, float)), arch, X).numpy()


def jacobian_transpose_product(theta, arch: BnnArchitecture, X, v) -> np.ndarray:
    """J^T v with J = d h_theta(X) / d theta, via one reverse pass (J is never formed)."""
    t = torch.as_tensor(np.asarray(theta, float)).clone().requires_grad_(True)
    Xt = torch.as_tensor(np.atleast_2d(np.array(X, float)), dtype=DTYPE)
    h = nn_forward_torch(t, arch, Xt)
    (g,) = torch.autograd.grad((h * torch.as_tensor(np.asarray(v, float))).sum(), t)
    return g.numpy()


# --- scores ---------------------------------------------------------------------


def likelihood_score(y, h_data, sigma: float, num_total: int | None = None, scale: float = 1.0) -> np.ndarray:
    """Gaussian log-likelihood gradient (y - h) / sigma^2 on the data coordinates.

    When `num_total` is given, the data coordinates are taken to be the
    trailing len(y) entries of a measurement vector of that length and every
    other coordinate gets 0.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    y = np.asarray(y, float)
    h_data = np.asarray(h_data, float)
    g = scale * (y - h_data) / sigma ** 2
    if num_total is None:
        return g
    out = np.zeros(h_data.shape[:-1] + (num_total,))
    out[..., num_total - y.shape[-1]:] = g
    return out


class PriorScore:
    """Marginal prior score grad_h log p(h^X) for particle function values H (L x k)."""

    name = "prior"

    def __call__(self, X: np.ndarray, H: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class ZeroPriorScore(PriorScore):
    name = "zero"

    def __call__(self, X, H, rng):
        return np.zeros_like(H)


class LearnedScore(PriorScore):
    name = "learned"

    def __init__(self, network: ScoreNetwork):
        self.network = network

    def __call__(self, X, H, rng):
        with torch.no_grad():
            return score_forward(self.network, X, H).numpy()


class AnalyticGaussianProcessScore(PriorScore):
    """-K(X, X)^{-1} (h - m(X)) for a Matern-5/2 GP prior."""

    name = "gp"

    def __init__(self, lengthscale: float = 1.0, signal_variance: float = 1.0, mean_fn=None, jitter: float = 1e-3):
        self.lengthscale = lengthscale
        self.signal_variance = signal_variance
        self.mean_fn = mean_fn
        self.jitter = jitter

    def __call__(self, X, H, rng):
        X = np.atleast_2d(X)
        K = matern52_gram(X, X, self.lengthscale, self.signal_variance) + self.jitter * np.eye(X.shape[0])
        L, _ = jittered_cholesky(K)
        m = np.zeros(X.shape[0]) if self.mean_fn is None else np.asarray(self.mean_fn(X), float)
        return -cho_solve((L, True), (np.atleast_2d(H) - m).T).T


class SSGEPriorScore(PriorScore):
    """SSGE re-fitted at every call on interpolator samples at the current measurement set."""

    name = "ssge"

    def __init__(self, interpolators: Sequence, lengthscale: float = 0.2, samples_per_task: int = 1, num_eigen=None):
        self.interpolators = list(interpolators)
        self.lengthscale = lengthscale
        self.samples_per_task = samples_per_task
        self.num_eigen = num_eigen

    def __call__(self, X, H, rng):
        samples = np.stack([
            interp.sample(X, rng) for interp in self.interpolators for _ in range(self.samples_per_task)
        ])
        model = ssge_fit(samples, self.lengthscale, self.num_eigen)
        return model.score(np.atleast_2d(H))


# --- SVGD -----------------------------------------------------------------------


def svgd_kernel(H, bandwidth: float) -> tuple[np.ndarray, np.ndarray]:
    """RBF kernel exp(-|h - h'|^2 / (2 l)) over particle rows and its gradient.

    Returns K (L x L) and grad_K (L x L x k) with grad_K[i, l] = d K(h_i, h_l) / d h_i.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    H = np.atleast_2d(np.asarray(H, float))
    diff = H[:, None, :] - H[None, :, :]
    K = np.exp(-np.sum(diff ** 2, axis=-1) / (2.0 * bandwidth))
    grad_K = -diff / bandwidth * K[:, :, None]
    return K, grad_K


def svgd_direction(H, scores, bandwidth: float) -> np.ndarray:
    """phi_l = (1/L) sum_i K(h_i, h_l) score_i + grad_{h_i} K(h_i, h_l)."""
    K, grad_K = svgd_kernel(H, bandwidth)
    L = K.shape[0]
    return (K.T @ scores + grad_K.sum(axis=0)) / L


def _measurement_vector(data: Dataset, nu, cfg: InferenceConfig, rng):
    X_nu = sample_measurement_set(nu, cfg.measurement_size, rng)
    m = data.size
    if m <= cfg.batch_cap:
        idx = np.arange(m)
    else:
        idx = np.sort(rng.choice(m, size=cfg.batch_cap, replace=False))
    return np.concatenate([X_nu, data.inputs[idx]], axis=0), idx


def fsvgd_step(
    ensemble: ParticleEnsemble,
    data: Dataset,
    prior: PriorScore,
    nu: MeasurementDistribution,
    cfg: InferenceConfig,
    rng: np.random.Generator,
) -> ParticleEnsemble:
    X, idx = _measurement_vector(data, nu, cfg, rng)
    arch = ensemble.arch
    theta = torch.as_tensor(ensemble.theta).clone().requires_grad_(True)
    H_t = nn_forward_torch(theta, arch, torch.as_tensor(X, dtype=DTYPE))
    H = H_t.detach().numpy()
    k_total = X.shape[0]
    # minibatch likelihood rescaled to the full dataset
    lik = likelihood_score(data.targets[idx], H[:, k_total - len(idx):], cfg.likelihood_std, k_total,
                           scale=data.size / len(idx))
    scores = lik + prior(X, H, rng)
    phi = svgd_direction(H, scores, cfg.bandwidth)
    assert phi.shape == H.shape
    (jt_phi,) = torch.autograd.grad((H_t * torch.as_tensor(phi)).sum(), theta)
    update = jt_phi.numpy()
    assert update.shape == ensemble.theta.shape
    if cfg.weight_decay:
        update = update - cfg.weight_decay * ensemble.theta
    return ParticleEnsemble(arch, ensemble.theta + cfg.step_size * update)


def run_inference(
    data: Dataset,
    prior: PriorScore,
    arch: BnnArchitecture,
    cfg: InferenceConfig,
    rng: np.random.Generator,
    nu: MeasurementDistribution | None = None,
    init: ParticleEnsemble | None = None,
) -> ParticleEnsemble:
    if nu is None:
        nu = build_measurement_hypercube(TaskCollection((data,)))
    ensemble = init if init is not None else init_particles(arch, cfg.num_particles, nu, rng)
    for step in range(cfg.steps):
        ensemble = fsvgd_step(ensemble, data, prior, nu, cfg, rng)
        if not np.all(np.isfinite(ensemble.theta)):
            raise ArithmeticError(f"particles diverged at step {step}; lower step_size or widen bandwidth")
    return ensemble


# --- prediction -----------------------------------------------------------------


@dataclass(frozen=True)
class PredictiveMixture:
    """Equally weighted Gaussian mixture per query point."""

    means: np.ndarray  # (L, q)
    sigma: float

    @property
    def mean(self) -> np.ndarray:
        return self.means.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.sigma ** 2 + self.means.var(axis=0))

    def cdf(self, y) -> np.ndarray:
        y = np.asarray(y, float)
        return ndtr((y - self.means) / self.sigma).mean(axis=0)


def predictive(ensemble: ParticleEnsemble, sigma: float, X_query) -> PredictiveMixture:
    return PredictiveMixture(np.atleast_2d(nn_forward(ensemble.theta, ensemble.arch, X_query)), float(sigma))
