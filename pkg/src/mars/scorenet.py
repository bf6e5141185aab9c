"""Permutation-equivariant attention score network, spectral normalization,
the score-matching objective and the meta-training loop."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np
import torch

from .envs import MeasurementDistribution, TaskCollection, sample_measurement_set

DTYPE = torch.float64
FORMAT_VERSION = 1
NUM_BLOCKS = 2


@dataclass(frozen=True)
class ScoreNetConfig:
    embed_dim: int = 32
    num_heads: int = 8
    key_size: int = 16
    ffn_hidden: int = 64
    grad_clip: float = 10.0
    learning_rate: float = 1e-3
    train_iters: int = 20000
    spectral_norm: bool = True
    spectral_method: str = "svd"
    power_iterations: int = 1
    attn_init_scale: float = 2.0
    measurement_size: int = 8

    def __post_init__(self):
        for name in ("embed_dim", "num_heads", "key_size", "ffn_hidden", "power_iterations", "measurement_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")
        if self.spectral_method not in ("svd", "power"):
            raise ValueError(f"unknown spectral_method {self.spectral_method!r}")
        if self.learning_rate < 0 or self.train_iters < 0:
            raise ValueError("learning_rate and train_iters must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreNetConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# --- spectral normalization -------------------------------------------------


def _normalize(v: torch.Tensor) -> torch.Tensor:
    n = torch.linalg.vector_norm(v)
    return v / n if n > 0 else v


def power_iteration(W: torch.Tensor, u: torch.Tensor, steps: int = 1) -> torch.Tensor:
    """Refine the right singular vector estimate u of W (shape in x out, u in R^out)."""
    with torch.no_grad():
        for _ in range(steps):
            v = _normalize(W @ u)
            u = _normalize(W.T @ v)
    return u


def top_right_singular_vector(W: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Exact leading right singular vector, sign-aligned with the previous state u."""
    with torch.no_grad():
        _, _, vh = torch.linalg.svd(W, full_matrices=False)
        top = vh[0]
        return -top if torch.dot(top, u) < 0 else top


def spectral_sigma(W: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Largest singular value estimate ||W u||, differentiable in W with u held fixed."""
    return torch.linalg.vector_norm(W @ u.detach())


def spectral_normalize(W, u, steps: int = 1):
    """Returns (W / sigma, updated u, sigma); a zero matrix comes back unchanged with sigma 0."""
    W = torch.as_tensor(W, dtype=DTYPE)
    u = torch.as_tensor(u, dtype=DTYPE)
    if not torch.any(W != 0):
        return W, u, 0.0
    u = power_iteration(W, u, steps)
    sigma = spectral_sigma(W, u)
    return W / sigma, u, float(sigma)


# --- network ----------------------------------------------------------------


@dataclass
class Linear:
    weight: torch.Tensor
    bias: torch.Tensor
    u: torch.Tensor | None = None

    @property
    def normalized(self) -> bool:
        return self.u is not None

    def effective_weight(self) -> torch.Tensor:
        if self.u is None:
            return self.weight
        sigma = spectral_sigma(self.weight, self.u)
        return self.weight / sigma if sigma > 0 else self.weight

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.effective_weight() + self.bias


def _uniform(rng, fan_in, fan_out, scale=1.0):
    bound = scale / math.sqrt(fan_in)
    return torch.as_tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), dtype=DTYPE)


class ScoreNetwork:
    """Transformer-encoder score model over a set of tokens.

    In function mode the tokens are concat(x_i, h_i) and the output is one
    score per point. In distribution mode the tokens are the samples
    themselves and the output is a score vector per sample.
    """

    def __init__(self, token_dim: int, out_dim: int, config: ScoreNetConfig, layers: dict[str, Linear]):
        self.token_dim = token_dim
        self.out_dim = out_dim
        self.config = config
        self.layers = layers

    @classmethod
    def init(
        cls,
        token_dim: int,
        out_dim: int,
        config: ScoreNetConfig,
        rng: np.random.Generator,
        warmup_power_iterations: int = 50,
    ) -> "ScoreNetwork":
        c = config
        e, hk = c.embed_dim, c.num_heads * c.key_size
        shapes = [("embed", token_dim, e, 1.0)]
        for b in range(NUM_BLOCKS):
            shapes += [
                (f"block{b}.query", e, hk, c.attn_init_scale),
                (f"block{b}.key", e, hk, c.attn_init_scale),
                (f"block{b}.value", e, hk, c.attn_init_scale),
                (f"block{b}.attn_out", hk, e, c.attn_init_scale),
                (f"block{b}.ffn1", e, c.ffn_hidden, 1.0),
                (f"block{b}.ffn2", c.ffn_hidden, e, 1.0),
            ]
        shapes.append(("output", e, out_dim, 1.0))
        layers = {}
        for name, fan_in, fan_out, scale in shapes:
            W = _uniform(rng, fan_in, fan_out, scale)
            b = torch.zeros(fan_out, dtype=DTYPE)
            u = None
            if c.spectral_norm and name != "output":
                u = _normalize(torch.as_tensor(rng.standard_normal(fan_out), dtype=DTYPE))
                u = power_iteration(W, u, warmup_power_iterations)
            layers[name] = Linear(W, b, u)
        return cls(token_dim, out_dim, config, layers)

    # parameter plumbing

    def parameters(self) -> list[torch.Tensor]:
        out = []
        for layer in self.layers.values():
            out += [layer.weight, layer.bias]
        return out

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def requires_grad_(self, flag: bool = True) -> "ScoreNetwork":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def clone(self) -> "ScoreNetwork":
        layers = {
            k: Linear(
                l.weight.detach().clone(),
                l.bias.detach().clone(),
                None if l.u is None else l.u.clone(),
            )
            for k, l in self.layers.items()
        }
        return ScoreNetwork(self.token_dim, self.out_dim, self.config, layers)

    def update_spectral_state(self) -> None:
        c = self.config
        for layer in self.layers.values():
            if layer.u is None:
                continue
            W = layer.weight.detach()
            if c.spectral_method == "svd":
                layer.u = top_right_singular_vector(W, layer.u)
            else:
                layer.u = power_iteration(W, layer.u, c.power_iterations)

    def spectral_norms(self) -> dict[str, float]:
        """Exact largest singular value of every normalized effective weight."""
        out = {}
        for name, layer in self.layers.items():
            if layer.normalized:
                W = layer.effective_weight().detach()
                out[name] = float(torch.linalg.matrix_norm(W, ord=2))
        return out

    # forward

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        c = self.config
        L = self.layers
        z = L["embed"](tokens)
        for b in range(NUM_BLOCKS):
            z = z + self._attention(z, b)
            hidden = torch.nn.functional.elu(L[f"block{b}.ffn1"](z))
            z = z + L[f"block{b}.ffn2"](hidden)
        return L["output"](z)

    def _attention(self, z: torch.Tensor, b: int) -> torch.Tensor:
        c = self.config
        L = self.layers
        shape = z.shape[:-1] + (c.num_heads, c.key_size)
        q = L[f"block{b}.query"](z).reshape(shape)
        k = L[f"block{b}.key"](z).reshape(shape)
        v = L[f"block{b}.value"](z).reshape(shape)
        logits = torch.einsum("...qhd,...khd->...hqk", q, k) / math.sqrt(c.key_size)
        weights = torch.softmax(logits, dim=-1)
        att = torch.einsum("...hqk,...khd->...qhd", weights, v)
        att = att.reshape(z.shape[:-1] + (c.num_heads * c.key_size,))
        return L[f"block{b}.attn_out"](att)

    def __call__(self, X: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        return forward(self, X, h)

    # serialization

    def to_dict(self, metadata: dict | None = None) -> dict:
        layers = []
        for name, layer in self.layers.items():
            entry = {
                "name": name,
                "shape": list(layer.weight.shape),
                "weight": layer.weight.detach().reshape(-1).tolist(),
                "bias": layer.bias.detach().tolist(),
            }
            if layer.u is not None:
                entry["u"] = layer.u.tolist()
            layers.append(entry)
        doc = {
            "format_version": FORMAT_VERSION,
            "kind": "score_network",
            "token_dim": self.token_dim,
            "out_dim": self.out_dim,
            "config": self.config.to_dict(),
            "layers": layers,
        }
        if metadata:
            doc["metadata"] = metadata
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ScoreNetwork":
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported score network format {doc.get('format_version')!r}")
        config = ScoreNetConfig.from_dict(doc["config"])
        layers = {}
        for entry in doc["layers"]:
            W = torch.tensor(entry["weight"], dtype=DTYPE).reshape(entry["shape"])
            b = torch.tensor(entry["bias"], dtype=DTYPE)
            u = torch.tensor(entry["u"], dtype=DTYPE) if "u" in entry else None
            layers[entry["name"]] = Linear(W, b, u)
        return cls(doc["token_dim"], doc["out_dim"], config, layers)

    def dumps(self, metadata: dict | None = None) -> str:
        return json.dumps(self.to_dict(metadata), indent=1)

    @classmethod
    def loads(cls, text: str) -> "ScoreNetwork":
        return cls.from_dict(json.loads(text))


def _as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a if a.dtype == DTYPE else a.to(DTYPE)
    return torch.as_tensor(np.array(a, dtype=float), dtype=DTYPE)


def forward(net: ScoreNetwork, X, h) -> torch.Tensor:
    """Score estimate for function values h (..., k) at measurement points X (..., k, d)."""
    X = _as_tensor(X)
    h = _as_tensor(h)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[-2] != h.shape[-1]:
        raise ValueError(f"{X.shape[-2]} measurement points but {h.shape[-1]} function values")
    if h.shape[-1] < 1:
        raise ValueError("need at least one measurement point")
    if X.shape[-1] + 1 != net.token_dim or net.out_dim != 1:
        raise ValueError(f"network expects tokens of size {net.token_dim}, got inputs of dim {X.shape[-1]}")
    X = X.expand(h.shape + X.shape[-1:])
    tokens = torch.cat([X, h[..., None]], dim=-1)
    return net.encode(tokens)[..., 0]


def distribution_mode_forward(net: ScoreNetwork, samples) -> torch.Tensor:
    """Score estimate grad_x log p(x) for each row of samples (..., k, d)."""
    x = _as_tensor(samples)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[-2] < 1:
        raise ValueError("need at least one sample")
    if x.shape[-1] != net.token_dim or net.out_dim != net.token_dim:
        raise ValueError("network is not configured for distribution mode of this dimension")
    return net.encode(x)


# --- score matching ---------------------------------------------------------

ScoreFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def score_matching_terms(
    score_fn: ScoreFn, X, f, create_graph: bool = False, event_ndim: int = 1
) -> torch.Tensor:
    """tr(d s / d f) + 0.5 ||s||^2 for every leading batch entry of f.

    The trailing `event_ndim` axes of f form one score argument. The trace
    is exact: f is replicated once per event entry and replica j
    contributes only d s_j / d f_j, so a single backward pass yields the
    whole Jacobian diagonal.
    """
    X = _as_tensor(X)
    f = _as_tensor(f).detach()
    event_shape = f.shape[f.ndim - event_ndim:]
    batch_shape = f.shape[: f.ndim - event_ndim]
    n_entries = math.prod(event_shape)
    reps = f.expand((n_entries,) + f.shape).clone().requires_grad_(True)
    s = score_fn(X, reps)
    if s.shape != reps.shape:
        raise ValueError(f"score shape {tuple(s.shape[1:])} does not match input shape {tuple(f.shape)}")
    flat_s = s.reshape((n_entries,) + batch_shape + (n_entries,))
    diag_sel = torch.eye(n_entries, dtype=DTYPE).reshape((n_entries,) + (1,) * len(batch_shape) + (n_entries,))
    (g,) = torch.autograd.grad((flat_s * diag_sel).sum(), reps, create_graph=create_graph)
    trace = (g.reshape(flat_s.shape) * diag_sel).sum(dim=(0, -1))
    return trace + 0.5 * (flat_s[0] ** 2).sum(dim=-1)


def score_matching_term(score_fn: ScoreFn, X, f) -> float:
    return float(score_matching_terms(score_fn, X, f).sum().detach())


def score_matching_loss(net: ScoreNetwork, X, F, mode: str = "function") -> torch.Tensor:
    """Mean score-matching term over the leading axis of F, differentiable in net."""
    if mode == "function":
        fn = lambda x, f: forward(net, x, f)  # noqa: E731
        terms = score_matching_terms(fn, X, F, create_graph=True)
    elif mode == "distribution":
        fn = lambda x, f: distribution_mode_forward(net, f)  # noqa: E731
        terms = score_matching_terms(fn, F, F, create_graph=True, event_ndim=2)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return terms.mean()


def loss_gradient(
    net: ScoreNetwork, X, F, grad_clip: float | None = None, mode: str = "function"
) -> tuple[float, list[torch.Tensor]]:
    """Loss value and gradient w.r.t. every parameter (weights then bias, per layer).

    With grad_clip set, the gradient is rescaled to global norm <= grad_clip.
    """
    params = net.parameters()
    for p in params:
        p.requires_grad_(True)
    loss = score_matching_loss(net, X, F, mode)
    grads = torch.autograd.grad(loss, params)
    grads = [g.detach() for g in grads]
    if grad_clip is not None and math.isfinite(grad_clip):
        total = torch.sqrt(sum((g ** 2).sum() for g in grads))
        if total > grad_clip:
            grads = [g * (grad_clip / (total + 1e-6)) for g in grads]
    return float(loss.detach()), grads


# --- meta-training ----------------------------------------------------------


@dataclass
class TrainResult:
    network: ScoreNetwork
    losses: list[float]


def _adam(params, lr):
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def _train(
    net: ScoreNetwork,
    cfg: ScoreNetConfig,
    batch_fn: Callable[[int], tuple],
    mode: str,
    step_callback: Callable[[int, ScoreNetwork], None] | None = None,
) -> TrainResult:
    params = net.requires_grad_(True).parameters()
    opt = _adam(params, cfg.learning_rate)
    losses = []
    for it in range(cfg.train_iters):
        X, F = batch_fn(it)
        loss_value, grads = loss_gradient(net, X, F, cfg.grad_clip, mode)
        for p, g in zip(params, grads):
            p.grad = g
        opt.step()
        # re-normalize against the updated weights
        net.update_spectral_state()
        losses.append(loss_value)
        if step_callback is not None:
            step_callback(it, net)
    net.requires_grad_(False)
    return TrainResult(net, losses)


def meta_train(
    tasks: TaskCollection,
    interpolators: Sequence,
    nu: MeasurementDistribution,
    cfg: ScoreNetConfig,
    rng: np.random.Generator,
    use_posterior_mean: bool = False,
    network: ScoreNetwork | None = None,
    step_callback=None,
) -> TrainResult:
    """Fit the score network to function values sampled from the per-task interpolators.

    Every iteration draws a fresh measurement set from `nu` and one posterior
    sample per task there (or the posterior mean when `use_posterior_mean`).
    """
    if len(interpolators) != len(tasks):
        raise ValueError(f"{len(interpolators)} interpolators for {len(tasks)} tasks")
    if network is None:
        network = ScoreNetwork.init(tasks.input_dim + 1, 1, cfg, rng)
    k = cfg.measurement_size

    def batch(_it):
        X = sample_measurement_set(nu, k, rng)
        if use_posterior_mean:
            F = np.stack([interp.mean(X) for interp in interpolators])
        else:
            F = np.stack([interp.sample(X, rng) for interp in interpolators])
        return X, F

    return _train(network, cfg, batch, "function", step_callback)


def train_on_samples(
    X: np.ndarray,
    samples: np.ndarray,
    cfg: ScoreNetConfig,
    rng: np.random.Generator,
    batch_size: int | None = None,
) -> TrainResult:
    """Score network for a fixed measurement set X from marginal samples (n x k)."""
    X = np.atleast_2d(np.asarray(X, float))
    if X.shape[0] != samples.shape[1]:
        X = X.T
    network = ScoreNetwork.init(X.shape[1] + 1, 1, cfg, rng)
    n = samples.shape[0]

    def batch(_it):
        if batch_size is None or batch_size >= n:
            return X, samples
        return X, samples[rng.choice(n, size=batch_size, replace=False)]

    return _train(network, cfg, batch, "function")


def train_distribution(
    samples: np.ndarray, cfg: ScoreNetConfig, rng: np.random.Generator, subset: int = 8
) -> TrainResult:
    """Distribution-mode score network from i.i.d. samples (N x d), drawing
    `subset` samples without replacement per iteration."""
    samples = np.asarray(samples, float)
    if samples.ndim == 1:
        samples = samples[:, None]
    d = samples.shape[1]
    network = ScoreNetwork.init(d, d, cfg, rng)
    n = samples.shape[0]

    def batch(_it):
        idx = rng.choice(n, size=min(subset, n), replace=False)
        x = samples[idx][None]
        return x, x

    return _train(network, cfg, batch, "distribution")
