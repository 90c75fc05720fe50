"""Exact zero-mean Gaussian process regression with an ARD RBF kernel.

All outputs share one kernel, one Gram matrix and therefore one predictive
variance; only the solved coefficient columns differ per output.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .errors import DimensionMismatch, NotPositiveDefinite

JITTER_CAP = 1e-2
# squared scaled distance beyond which the kernel is flushed to zero
# (exp(-345) ~ 1e-150); subnormal kernel values slow BLAS down by two
# orders of magnitude and carry no information
SQ_CUTOFF = 690.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class RbfHyperparams:
    length_scales: np.ndarray
    noise: float = 1e-6

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.length_scales, dtype=float))
        if np.any(~(ls > 0)):
            raise ValueError("length scales must be positive")
        if not self.noise >= 0:
            raise ValueError("noise must be non-negative")
        object.__setattr__(self, "length_scales", ls)

    @classmethod
    def isotropic(cls, d: int, scale: float = 1.0, noise: float = 1e-6) -> "RbfHyperparams":
        return cls(np.full(d, float(scale)), noise)


def rbf_kernel(x, x2, h: RbfHyperparams) -> float:
    """exp(-1/2 (x - x')^T Phi^-2 (x - x'))."""
    d = (np.asarray(x, float) - np.asarray(x2, float)) / h.length_scales
    return float(np.exp(-0.5 * np.dot(d, d)))


def gram(A, B, length_scales) -> np.ndarray:
    A = np.asarray(A, float) / length_scales
    B = np.asarray(B, float) / length_scales
    sq = (np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2.0 * A @ B.T)
    return _kernel_from_sq(sq)


def _kernel_from_sq(sq):
    np.maximum(sq, 0.0, out=sq)
    K = np.exp(-0.5 * sq)
    K[sq > SQ_CUTOFF] = 0.0
    return K


def _cholesky(K, noise: float):
    """Cholesky of K + noise*I, escalating noise x10 on failure up to the cap."""
    n = K.shape[0]
    jitter = noise
    kmax = float(np.max(np.diag(K)))
    while True:
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(n))
            dmin = float(np.min(np.diag(L)))
            # numerically singular factors come out with a near-zero pivot
            if dmin * dmin > 1e-14 * kmax:
                return L, jitter
        except np.linalg.LinAlgError:
            pass
        jitter *= 10.0
        if jitter == 0.0 or jitter > JITTER_CAP:
            raise NotPositiveDefinite(
                f"Gram matrix not positive definite with noise {noise:g} (cap {JITTER_CAP:g})")


@dataclass
class GpModel:
    X: np.ndarray        # raw features, n x d
    Y: np.ndarray        # targets, n x m
    hyper: RbfHyperparams
    x_mean: np.ndarray
    x_scale: np.ndarray
    L: np.ndarray = field(repr=False, default=None)
    A: np.ndarray = field(repr=False, default=None)
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.Y.shape[1]

    def normalize(self, X) -> np.ndarray:
        return (np.asarray(X, float) - self.x_mean) / self.x_scale

    def _factor(self):
        Z = self.normalize(self.X)
        K = gram(Z, Z, self.hyper.length_scales)
        self.L, self.jitter = _cholesky(K, self.hyper.noise)
        self.A = cho_solve((self.L, True), self.Y, check_finite=False)
        self._Z = Z / self.hyper.length_scales
        self._zz = np.sum(self._Z * self._Z, 1)

    def kernel_vector(self, x_star) -> np.ndarray:
        z = self.normalize(x_star) / self.hyper.length_scales
        return _kernel_from_sq(self._zz + float(z @ z) - 2.0 * (self._Z @ z))

    def predict(self, x_star):
        """Predictive mean (m-vector) and shared variance at one query."""
        x_star = np.asarray(x_star, float)
        if x_star.shape != (self.d,):
            raise DimensionMismatch(f"query has shape {x_star.shape}, expected ({self.d},)")
        k = self.kernel_vector(x_star)
        mean = k @ self.A
        v = solve_triangular(self.L, k, lower=True, check_finite=False)
        var = max(1.0 - float(v @ v), 0.0)
        return mean, var

    def predict_batch(self, X_star):
        X_star = np.atleast_2d(np.asarray(X_star, float))
        if X_star.shape[1] != self.d:
            raise DimensionMismatch(f"queries have {X_star.shape[1]} columns, expected {self.d}")
        Zs = self.normalize(X_star)
        Ks = gram(Zs, self.normalize(self.X), self.hyper.length_scales)
        mean = Ks @ self.A
        V = solve_triangular(self.L, Ks.T, lower=True, check_finite=False)
        var = np.maximum(1.0 - np.sum(V * V, 0), 0.0)
        return mean, var

    def log_marginal_likelihood(self) -> float:
        return log_marginal_likelihood(self)

    # persistence -----------------------------------------------------------

    def save(self, path, extra: dict | None = None):
        meta = {"noise": self.hyper.noise, "extra": extra or {}}
        with open(path, "wb") as fh:
            np.savez(fh, X=self.X, Y=self.Y, length_scales=self.hyper.length_scales,
                     x_mean=self.x_mean, x_scale=self.x_scale,
                     meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))

    @classmethod
    def load(cls, path):
        """Rebuild a model from its data; the factorization is recomputed."""
        with open(path, "rb") as fh:
            data = np.load(io.BytesIO(fh.read()))
            meta = json.loads(bytes(data["meta"]).decode())
            model = cls(data["X"], data["Y"], RbfHyperparams(data["length_scales"], meta["noise"]),
                        data["x_mean"], data["x_scale"])
        model._factor()
        model.extra = meta["extra"]
        return model


def feature_stats(X):
    X = np.asarray(X, float)
    mean = X.mean(0)
    scale = X.std(0)
    # constant columns (e.g. a velocity the constraints pin to zero) stay unscaled
    scale = np.where(scale > 1e-9, scale, 1.0)
    return mean, scale


def fit(X, Y, hyper: RbfHyperparams, normalize: bool = True) -> GpModel:
    """Condition a zero-mean GP on (X, Y)."""
    X = np.atleast_2d(np.asarray(X, float))
    Y = np.asarray(Y, float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] < 1:
        raise ValueError("need at least one training point")
    if Y.shape[0] != X.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} inputs but {Y.shape[0]} targets")
    if hyper.length_scales.shape[0] not in (1, X.shape[1]):
        raise DimensionMismatch(
            f"{hyper.length_scales.shape[0]} length scales for {X.shape[1]} features")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("training data must be finite")
    if hyper.length_scales.shape[0] == 1 and X.shape[1] > 1:
        hyper = RbfHyperparams(np.full(X.shape[1], hyper.length_scales[0]), hyper.noise)
    if normalize:
        mean, scale = feature_stats(X)
    else:
        mean, scale = np.zeros(X.shape[1]), np.ones(X.shape[1])
    model = GpModel(X.copy(), Y.copy(), hyper, mean, scale)
    model._factor()
    return model


def log_marginal_likelihood(model: GpModel) -> float:
    """Joint log evidence of all output columns under the shared kernel."""
    n, m = model.Y.shape
    fit_term = -0.5 * float(np.sum(model.Y * model.A))
    return fit_term - m * float(np.sum(np.log(np.diag(model.L)))) - 0.5 * n * m * LOG_2PI


def _lml_and_grad(theta, Z, Y, d, fit_noise, noise):
    """LML and its gradient w.r.t. log length scales (and log noise)."""
    ls = np.exp(theta[:d])
    if fit_noise:
        noise = math.exp(theta[d])
    n, m = Y.shape
    K = gram(Z, Z, ls)
    try:
        L = np.linalg.cholesky(K + noise * np.eye(n))
    except np.linalg.LinAlgError:
        return -np.inf, np.zeros_like(theta)
    A = cho_solve((L, True), Y, check_finite=False)
    val = (-0.5 * float(np.sum(Y * A)) - m * float(np.sum(np.log(np.diag(L))))
           - 0.5 * n * m * LOG_2PI)
    Kinv = cho_solve((L, True), np.eye(n), check_finite=False)
    W = A @ A.T - m * Kinv
    WK = W * K
    grad = np.empty_like(theta)
    for i in range(d):
        zi = Z[:, i] / ls[i]
        D = (zi[:, None] - zi[None, :]) ** 2
        grad[i] = 0.5 * float(np.sum(WK * D))
    if fit_noise:
        grad[d] = 0.5 * noise * float(np.trace(W))
    return val, grad


def _lml_at(Z, Y, log_ls, noise):
    return _lml_and_grad(np.asarray(log_ls, float), Z, Y, len(log_ls), False, noise)[0]


def fit_length_scales(X, Y, h0: RbfHyperparams, n_starts: int = 3, seed: int = 0,
                      fit_noise: bool = False, max_points: int | None = 500,
                      normalize: bool = True, max_iter: int = 200,
                      bounds=(math.log(1e-2), math.log(1e3)), noise_bounds=(1e-6, 1.0)):
    """Maximize the log marginal likelihood over log length scales.

    L-BFGS-B with the analytic gradient, started from ``h0`` and from
    ``n_starts - 1`` random perturbations of it.  With ``fit_noise`` the log
    noise variance is optimized too.  Large datasets are thinned to
    ``max_points`` evenly spaced rows first.  The result never has a lower
    LML than ``h0``.
    """
    X = np.atleast_2d(np.asarray(X, float))
    Y = np.asarray(Y, float)
    if Y.ndim == 1:
        Y = Y[:, None]
    d = X.shape[1]
    if h0.length_scales.shape[0] == 1 and d > 1:
        h0 = RbfHyperparams(np.full(d, h0.length_scales[0]), h0.noise)
    rng = np.random.default_rng(seed)
    if max_points is not None and X.shape[0] > max_points:
        idx = np.linspace(0, X.shape[0] - 1, max_points).round().astype(int)
        X, Y = X[idx], Y[idx]
    if normalize:
        mean, scale = feature_stats(X)
        Z = (X - mean) / scale
    else:
        Z = X

    box = [bounds] * d
    base = np.log(h0.length_scales)
    if fit_noise:
        nb = (math.log(noise_bounds[0]), math.log(noise_bounds[1]))
        box.append(nb)
        base = np.append(base, float(np.clip(math.log(max(h0.noise, 1e-300)), *nb)))
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])

    def objective(theta):
        v, g = _lml_and_grad(theta, Z, Y, d, fit_noise, h0.noise)
        if not math.isfinite(v):
            return 1e300, np.zeros_like(theta)
        return -v, -g

    h0_val = _lml_at(Z, Y, np.log(h0.length_scales), h0.noise)
    best_theta, best_val = None, h0_val
    for start in range(n_starts):
        theta0 = base if start == 0 else base + rng.normal(0.0, 1.0, base.shape)
        theta0 = np.clip(theta0, lo, hi)
        res = minimize(objective, theta0, jac=True, method="L-BFGS-B", bounds=box,
                       options={"maxiter": max_iter})
        val = -float(res.fun)
        if val > best_val:
            best_theta, best_val = res.x, val
    if best_theta is None:
        return h0
    noise = math.exp(best_theta[d]) if fit_noise else h0.noise
    return RbfHyperparams(np.exp(best_theta[:d]), noise)
