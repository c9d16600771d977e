"""Numerical kernels shared by the detectors and metrics.

Everything here is a pure function working in float64 regardless of the
float32 storage dtype of bundles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WEIBULL_SHAPE_CAP = 1e4


def softmax(z, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax over the last axis, max-subtracted for stability."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("softmax input contains non-finite values")
    u = z / temperature
    u = u - u.max(axis=-1, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=-1, keepdims=True)


def logsumexp(z, temperature: float = 1.0):
    """T * log(sum(exp(z_i / T))) over the last axis."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("logsumexp input contains non-finite values")
    m = z.max(axis=-1, keepdims=True)
    out = temperature * np.log(np.exp((z - m) / temperature).sum(axis=-1)) + np.squeeze(m, -1)
    return float(out) if out.ndim == 0 else out


def percentile(values, p: float) -> float:
    """Linear-interpolation percentile; p=0 gives the min, p=100 the max."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("percentile of empty input")
    if not 0.0 <= p <= 100.0:
        raise ValueError(f"percentile p={p} outside [0, 100]")
    return float(np.percentile(values, p, method="linear"))


def pinv_psd(matrix: np.ndarray, floor_rel: float = 1e-10) -> np.ndarray:
    """Pseudo-inverse of a symmetric PSD matrix via eigendecomposition.

    Eigenvalues at or below floor_rel * trace / d are treated as zero, which
    keeps rank-deficient covariances (degenerate classes) well defined.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    d = matrix.shape[0]
    eigvals, eigvecs = np.linalg.eigh((matrix + matrix.T) / 2.0)
    floor = floor_rel * max(np.trace(matrix), 0.0) / d
    inv = np.where(eigvals > floor, 1.0 / np.where(eigvals > floor, eigvals, 1.0), 0.0)
    return (eigvecs * inv) @ eigvecs.T


@dataclass
class GaussianStats:
    """Per-class Gaussian statistics with a tied covariance, plus a
    class-independent background Gaussian over the full fit set."""

    means: np.ndarray              # C x d
    shared_covariance: np.ndarray  # d x d, MLE (divisor N)
    precision: np.ndarray          # d x d pseudo-inverse of the tied covariance
    global_mean: np.ndarray        # d
    global_precision: np.ndarray   # d x d

    @property
    def num_classes(self) -> int:
        return int(self.means.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])


def fit_gaussian_stats(features, labels, num_classes: int) -> GaussianStats:
    """Per-class means and tied MLE covariance (divisor N), with floored
    eigen pseudo-inverses for both the tied and the global covariance."""
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n, d = feats.shape
    means = np.empty((num_classes, d))
    centered = np.empty_like(feats)
    for c in range(num_classes):
        idx = labels == c
        if not idx.any():
            raise ValueError(f"class {c} has no samples")
        means[c] = feats[idx].mean(axis=0)
        centered[idx] = feats[idx] - means[c]
    cov = centered.T @ centered / n
    global_mean = feats.mean(axis=0)
    gcentered = feats - global_mean
    gcov = gcentered.T @ gcentered / n
    return GaussianStats(
        means=means,
        shared_covariance=cov,
        precision=pinv_psd(cov),
        global_mean=global_mean,
        global_precision=pinv_psd(gcov),
    )


def mahalanobis_sq(f, mean, precision):
    """(f - mean)^T precision (f - mean); accepts a single vector or N x d."""
    f = np.asarray(f, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    if f.shape[-1] != mean.shape[0] or precision.shape != (mean.shape[0], mean.shape[0]):
        raise ValueError("dimension mismatch in mahalanobis_sq")
    diff = f - mean
    out = np.einsum("...i,ij,...j->...", diff, precision, diff)
    return float(out) if out.ndim == 0 else out


def top_singular_triplet(matrix, tol: float = 1e-10, max_iter: int = 1000):
    """Leading singular triplet (sigma1, u1, v1) by power iteration on the
    Gram matrix of the smaller side. Raises on non-convergence."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError("top_singular_triplet needs a 2-d matrix")
    r, s = m.shape
    transposed = s > r
    work = m.T if transposed else m          # iterate on the shorter side
    gram = work.T @ work                      # s' x s' with s' <= r'
    k = gram.shape[0]
    # fixed pseudo-random start so the result is a pure function of the input
    v = np.random.Generator(np.random.Philox(key=0x5EED)).standard_normal(k)
    v /= np.linalg.norm(v)
    if not np.any(gram):
        u = np.zeros(work.shape[0])
        u[0] = 1.0
        e = np.zeros(k)
        e[0] = 1.0
        return (0.0, e, u) if transposed else (0.0, u, e)
    # convergence = relative invariance residual ||Gv - lambda v|| <= tol*lambda,
    # which also terminates cleanly when the top singular values nearly tie
    for iteration in range(1, max_iter + 1):
        w = gram @ v
        lam = float(np.dot(v, w))
        if lam <= 0.0 or np.linalg.norm(w - lam * v) <= tol * lam:
            break
        v = w / np.linalg.norm(w)
    else:
        raise RuntimeError(
            f"power iteration did not converge after {max_iter} iterations")
    mv = work @ v
    sigma = float(np.linalg.norm(mv))
    u = mv / sigma if sigma > 0 else np.zeros(work.shape[0])
    if sigma == 0.0:
        u[0] = 1.0
    if transposed:
        return sigma, v, u
    return sigma, u, v


@dataclass
class WeibullFit:
    """Weibull parameters fitted to the upper tail of a sample."""

    shape: float
    scale: float
    shift: float
    tail_size: int

    def cdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        z = np.maximum(x - self.shift, 0.0) / self.scale
        out = -np.expm1(-weibull_power(z, self.shape))
        return float(out) if out.ndim == 0 else out


def weibull_power(z, shape):
    """z**shape in log space; huge fitted shapes (degenerate tails)
    saturate instead of overflowing. Broadcasts over both arguments."""
    z = np.asarray(z, dtype=np.float64)
    shape = np.asarray(shape, dtype=np.float64)
    logz = np.where(z > 0, np.log(np.where(z > 0, z, 1.0)), -np.inf)
    return np.exp(np.minimum(shape * logz, 700.0))


def weibull_mle(samples, tail_size: int, tol: float = 1e-9,
                max_iter: int = 200) -> WeibullFit:
    """Tail-only Weibull MLE via Newton iteration on the profile-likelihood
    shape equation. A constant tail saturates at shape = 1e4 by convention."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    if tail_size < 1 or x.size < tail_size:
        raise ValueError(f"need at least tail_size={tail_size} samples, got {x.size}")
    tail = x[-tail_size:]
    if tail[0] <= 0.0:
        raise ValueError("tail contains non-positive values")
    logs = np.log(tail)
    mean_log = logs.mean()
    if tail[-1] == tail[0]:
        return WeibullFit(shape=WEIBULL_SHAPE_CAP, scale=float(tail[0]),
                          shift=0.0, tail_size=tail_size)

    def weighted_moments(k):
        # softmax weights over k * log x, stable under large k
        a = k * logs
        a -= a.max()
        w = np.exp(a)
        w /= w.sum()
        m1 = float(np.dot(w, logs))
        m2 = float(np.dot(w, (logs - m1) ** 2))
        return m1, m2

    std_log = logs.std()
    k = 1.2 / std_log if std_log > 0 else 1.0
    for _ in range(max_iter):
        m1, m2 = weighted_moments(k)
        g = m1 - 1.0 / k - mean_log
        gprime = m2 + 1.0 / (k * k)
        step = g / gprime
        k_new = k - step
        if k_new <= 0:
            k_new = k / 2.0
        if k_new >= WEIBULL_SHAPE_CAP:
            return WeibullFit(shape=WEIBULL_SHAPE_CAP, scale=float(tail[-1]),
                              shift=0.0, tail_size=tail_size)
        if abs(k_new - k) <= tol * max(1.0, abs(k)):
            k = k_new
            break
        k = k_new
    else:
        raise RuntimeError(f"Weibull MLE did not converge after {max_iter} iterations")
    # profile MLE scale: lambda = (mean of x^k)^(1/k), computed in log space
    a = k * logs
    amax = a.max()
    scale = float(np.exp((amax + np.log(np.exp(a - amax).sum() / tail.size)) / k))
    return WeibullFit(shape=float(k), scale=scale, shift=0.0, tail_size=tail_size)
