"""Spectral Stein gradient estimator (Nystrom eigenfunctions of an RBF Gram matrix)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

DEFAULT_LENGTHSCALE = 0.2
SPECTRAL_MASS = 0.99


class SSGEError(ArithmeticError):
    pass


def rbf_gram(a: np.ndarray, b: np.ndarray, lengthscale: float) -> np.ndarray:
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * lengthscale ** 2))


def median_lengthscale(samples: np.ndarray) -> float:
    d = cdist(samples, samples)
    iu = np.triu_indices(len(samples), k=1)
    med = float(np.median(d[iu]))
    return med if med > 0 else 1.0


@dataclass(frozen=True)
class SsgeModel:
    samples: np.ndarray
    lengthscale: float
    num_eigen: int
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    beta: np.ndarray  # (J, k)

    def eigenfunctions(self, x: np.ndarray) -> np.ndarray:
        """psi_j(x) for query rows x: shape (q, J)."""
        n = self.samples.shape[0]
        kx = rbf_gram(x, self.samples, self.lengthscale)
        U = self.eigenvectors[:, : self.num_eigen]
        return np.sqrt(n) * kx @ U / self.eigenvalues[: self.num_eigen]

    def score(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        out = self.eigenfunctions(x) @ self.beta
        return out[0] if single else out


def _select_num_eigen(eigenvalues: np.ndarray, n: int) -> int:
    pos = np.clip(eigenvalues, 0.0, None)
    frac = np.cumsum(pos) / pos.sum()
    j = int(np.searchsorted(frac, SPECTRAL_MASS) + 1)
    return max(1, min(j, n - 1))


def ssge_fit(samples, lengthscale: float = DEFAULT_LENGTHSCALE, num_eigen: int | None = None) -> SsgeModel:
    samples = np.asarray(samples, float)
    if samples.ndim == 1:
        samples = samples[:, None]
    n = samples.shape[0]
    if n < 2:
        raise ValueError("SSGE needs at least two samples")
    if lengthscale <= 0:
        raise ValueError("lengthscale must be positive")
    if num_eigen is not None and not 1 <= num_eigen <= n:
        raise ValueError(f"num_eigen must be in [1, {n}], got {num_eigen}")
    if np.all(samples == samples[0]):
        raise SSGEError("all samples are identical; the Gram matrix is degenerate")
    K = rbf_gram(samples, samples, lengthscale)
    lam, U = np.linalg.eigh(K)
    order = np.argsort(lam)[::-1]
    lam, U = lam[order], U[:, order]
    J = _select_num_eigen(lam, n) if num_eigen is None else num_eigen
    if lam[J - 1] <= 0:
        raise SSGEError("retained Gram eigenvalues must be positive")
    # grad_x k(x, x_m) = -(x - x_m) / l^2 * k(x, x_m), evaluated at x = x_i
    diff = samples[:, None, :] - samples[None, :, :]
    grad_k = -diff / lengthscale ** 2 * K[:, :, None]  # (i, m, k)
    grad_psi = np.sqrt(n) * np.einsum("imk,mj->ijk", grad_k, U[:, :J]) / lam[:J][None, :, None]
    beta = -grad_psi.mean(axis=0)
    return SsgeModel(samples, float(lengthscale), J, lam, U, beta)


def ssge_score(model: SsgeModel, x) -> np.ndarray:
    return model.score(x)
