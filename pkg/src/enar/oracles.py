"""Reference distributions with closed-form densities and derivatives.

Each oracle exposes sampling plus optional log-density, score (gradient of
log-density), and Hessian trace. Points are float64. Every method accepts a
single point of shape (dim,) or a batch of shape (n, dim); scalar outputs
become python floats for single points and (n,) arrays for batches.
"""

import numpy as np

from enar.errors import ConfigError, ShapeError, UnsupportedOracleError

_LOG_2PI = float(np.log(2.0 * np.pi))


class DistributionOracle:
    """Base class: subclasses override whichever closed forms they have."""

    dim = None

    def sample(self, rng, n=None):
        raise NotImplementedError

    def log_density(self, x):
        raise UnsupportedOracleError(f"{type(self).__name__} has no density")

    def score_fn(self, x):
        raise UnsupportedOracleError(f"{type(self).__name__} has no score function")

    def hessian_trace(self, x):
        raise UnsupportedOracleError(f"{type(self).__name__} has no Hessian trace")

    def _points(self, x):
        """Coerce to (n, dim) float64; report whether the input was a single point."""
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim == 1:
            if arr.shape[0] != self.dim:
                raise ShapeError(f"expected point in R^{self.dim}, got shape {arr.shape}")
            return arr[None, :], True
        if arr.ndim == 2 and arr.shape[1] == self.dim:
            return arr, False
        raise ShapeError(f"expected shape ({self.dim},) or (n, {self.dim}), got {arr.shape}")

    @staticmethod
    def _unbatch(values, single):
        return float(values[0]) if single else values


class DiagonalGaussian(DistributionOracle):
    """N(mean, diag(sigma^2))."""

    def __init__(self, mean, sigma):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        sigma = np.asarray(sigma, dtype=np.float64)
        self.sigma = np.broadcast_to(sigma, self.mean.shape).copy()
        if np.any(self.sigma <= 0):
            raise ConfigError("sigma must be positive")
        self.dim = self.mean.shape[0]
        self._log_norm = -0.5 * self.dim * _LOG_2PI - float(np.log(self.sigma).sum())

    def sample(self, rng, n=None):
        shape = (self.dim,) if n is None else (n, self.dim)
        return self.mean + self.sigma * rng.standard_normal(shape)

    def log_density(self, x):
        pts, single = self._points(x)
        z = (pts - self.mean) / self.sigma
        return self._unbatch(self._log_norm - 0.5 * (z * z).sum(axis=1), single)

    def score_fn(self, x):
        pts, single = self._points(x)
        out = -(pts - self.mean) / (self.sigma * self.sigma)
        return out[0] if single else out

    def hessian_trace(self, x):
        pts, single = self._points(x)
        val = -float((1.0 / (self.sigma * self.sigma)).sum())
        return val if single else np.full(pts.shape[0], val)


class DiagonalGMM(DistributionOracle):
    """Mixture of diagonal Gaussians with fixed weights."""

    def __init__(self, weights, means, sigmas):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        sigmas = np.asarray(sigmas, dtype=np.float64)
        self.sigmas = np.broadcast_to(sigmas, self.means.shape).copy()
        if self.weights.ndim != 1 or self.weights.shape[0] != self.means.shape[0]:
            raise ShapeError("weights and means must agree on the component count")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ConfigError("weights must be nonnegative and sum to 1")
        if np.any(self.sigmas <= 0):
            raise ConfigError("sigmas must be positive")
        self.n_components = self.means.shape[0]
        self.dim = self.means.shape[1]
        self._log_w = np.log(np.maximum(self.weights, 1e-300))
        self._log_norms = -0.5 * self.dim * _LOG_2PI - np.log(self.sigmas).sum(axis=1)

    def sample(self, rng, n=None):
        count = 1 if n is None else n
        comps = rng.choice(self.n_components, size=count, p=self.weights)
        eps = rng.standard_normal((count, self.dim))
        out = self.means[comps] + self.sigmas[comps] * eps
        return out[0] if n is None else out

    def _component_logps(self, pts):
        # (n, C): log w_c + log N(x; mu_c, sigma_c^2)
        z = (pts[:, None, :] - self.means[None, :, :]) / self.sigmas[None, :, :]
        return self._log_w + self._log_norms - 0.5 * (z * z).sum(axis=2)

    def log_density(self, x):
        pts, single = self._points(x)
        lp = self._component_logps(pts)
        mx = lp.max(axis=1, keepdims=True)
        out = (mx[:, 0] + np.log(np.exp(lp - mx).sum(axis=1)))
        return self._unbatch(out, single)

    def _responsibilities_and_scores(self, pts):
        lp = self._component_logps(pts)
        mx = lp.max(axis=1, keepdims=True)
        w = np.exp(lp - mx)
        resp = w / w.sum(axis=1, keepdims=True)                      # (n, C)
        comp_scores = -(pts[:, None, :] - self.means) / (self.sigmas ** 2)  # (n, C, d)
        return resp, comp_scores

    def score_fn(self, x):
        pts, single = self._points(x)
        resp, comp_scores = self._responsibilities_and_scores(pts)
        out = (resp[:, :, None] * comp_scores).sum(axis=1)
        return out[0] if single else out

    def hessian_trace(self, x):
        pts, single = self._points(x)
        resp, comp_scores = self._responsibilities_and_scores(pts)
        mean_score = (resp[:, :, None] * comp_scores).sum(axis=1)
        comp_traces = -(1.0 / (self.sigmas ** 2)).sum(axis=1)        # (C,)
        sq = (comp_scores * comp_scores).sum(axis=2)                 # (n, C)
        out = (resp * (sq + comp_traces)).sum(axis=1) - (mean_score * mean_score).sum(axis=1)
        return self._unbatch(out, single)


class PointMass(DistributionOracle):
    """Degenerate distribution: every draw returns the same point."""

    def __init__(self, point):
        self.point = np.atleast_1d(np.asarray(point, dtype=np.float64))
        self.dim = self.point.shape[0]

    def sample(self, rng, n=None):
        if n is None:
            return self.point.copy()
        return np.tile(self.point, (n, 1))


class UniformBox(DistributionOracle):
    """Uniform distribution on an axis-aligned box [lo, hi]."""

    def __init__(self, lo, hi):
        self.lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
        if self.lo.shape != self.hi.shape or np.any(self.hi <= self.lo):
            raise ConfigError("box needs lo < hi componentwise")
        self.dim = self.lo.shape[0]
        self._log_dens = -float(np.log(self.hi - self.lo).sum())

    def sample(self, rng, n=None):
        shape = (self.dim,) if n is None else (n, self.dim)
        return rng.uniform(self.lo, self.hi, size=shape)

    def log_density(self, x):
        pts, single = self._points(x)
        inside = np.all((pts >= self.lo) & (pts <= self.hi), axis=1)
        out = np.where(inside, self._log_dens, -np.inf)
        return self._unbatch(out, single)

    def score_fn(self, x):
        # density is constant on the interior, so the score is 0 a.e.
        pts, single = self._points(x)
        out = np.zeros_like(pts)
        return out[0] if single else out

    def hessian_trace(self, x):
        pts, single = self._points(x)
        return self._unbatch(np.zeros(pts.shape[0]), single)
