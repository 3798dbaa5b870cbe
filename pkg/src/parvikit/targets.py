"""Target log-densities, scores and Hessians for the synthetic and GP experiments."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .core import InvalidArgumentError


class UnsupportedOperationError(RuntimeError):
    """Raised when a target does not provide the requested derivative."""


class ParseError(ValueError):
    """Raised on malformed CSV input; the message names the offending line."""


class TargetModel:
    """Interface for an unnormalized target density on R^d.

    log_density and score accept a single point (d,) or a batch (n, d) and
    return a scalar/vector accordingly. hessian_log_density is optional.
    """

    dim: int
    has_hessian: bool = False

    def log_density(self, x):
        raise NotImplementedError

    def score(self, x):
        raise NotImplementedError

    def hessian_log_density(self, x):
        raise UnsupportedOperationError(
            "%s does not provide a log-density Hessian" % type(self).__name__
        )

    def potential_and_score(self, x):
        """(-log_density, -score) in one call; overridden where intermediates are shared."""
        x = np.asarray(x, dtype=float)
        return -self.log_density(x), -self.score(x)

    def score_and_hessian(self, x):
        """(score, hessian) in one call; overridden where intermediates are shared."""
        return self.score(x), self.hessian_log_density(x)


def _as_batch(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != dim:
        raise InvalidArgumentError("expected points of dimension %d, got %d" % (dim, x.shape[1]))
    return x, single


class GaussianTarget(TargetModel):
    """Gaussian with a fixed covariance matrix and optional nonzero mean."""

    has_hessian = True

    def __init__(self, cov: np.ndarray, mean: np.ndarray | None = None):
        cov = np.asarray(cov, dtype=float)
        self.dim = cov.shape[0]
        self.cov = cov
        self.mean = np.zeros(self.dim) if mean is None else np.asarray(mean, dtype=float)
        self.precision = np.linalg.inv(cov)
        self.precision = 0.5 * (self.precision + self.precision.T)

    def log_density(self, x):
        xb, single = _as_batch(x, self.dim)
        xb = xb - self.mean
        v = -0.5 * np.einsum("ni,ij,nj->n", xb, self.precision, xb)
        return float(v[0]) if single else v

    def score(self, x):
        xb, single = _as_batch(x, self.dim)
        s = -(xb - self.mean) @ self.precision
        return s[0] if single else s

    def hessian_log_density(self, x):
        xb, single = _as_batch(x, self.dim)
        h = np.broadcast_to(-self.precision, (xb.shape[0], self.dim, self.dim)).copy()
        return h[0] if single else h

    def potential_and_score(self, x):
        xb, single = _as_batch(x, self.dim)
        xp = (xb - self.mean) @ self.precision
        u = 0.5 * np.einsum("ni,ni->n", xb - self.mean, xp)
        if single:
            return float(u[0]), xp[0]
        return u, xp


def sg_target(d: int) -> GaussianTarget:
    """Equicorrelated Gaussian: unit variances, pairwise correlation 0.8."""
    if d < 1:
        raise InvalidArgumentError("dimension must be >= 1")
    cov = 0.2 * np.eye(d) + 0.8 * np.ones((d, d))
    return GaussianTarget(cov)


class GaussianMixtureTarget(TargetModel):
    """Two-component isotropic Gaussian mixture at +/-offset with unequal weights."""

    has_hessian = True

    def __init__(self, offset: np.ndarray, weight_plus: float = 2.0 / 3.0):
        self.offset = np.asarray(offset, dtype=float)
        self.dim = self.offset.shape[0]
        self.weights = np.array([weight_plus, 1.0 - weight_plus])
        self.means = np.stack([self.offset, -self.offset])
        self._offset_outer = np.outer(self.offset, self.offset)
        self._neg_eye = -np.eye(self.dim)
        # log w_k - 0.5||mean_k||^2: component constants for the +/-offset form
        na = float(self.offset @ self.offset)
        self._const_p = np.log(self.weights[0]) - 0.5 * na
        self._const_m = np.log(self.weights[1]) - 0.5 * na
        self._delta_c = self._const_m - self._const_p  # log_m - log_p at x = 0

    @property
    def mean(self) -> np.ndarray:
        return self.weights[0] * self.offset - self.weights[1] * self.offset

    @property
    def cov(self) -> np.ndarray:
        m = self.mean
        c = np.eye(self.dim)
        for wk, mk in zip(self.weights, self.means):
            c = c + wk * np.outer(mk - m, mk - m)
        return c

    def _component_logs(self, xb):
        # (n, 2) log of weighted component densities, up to a shared constant
        d2 = ((xb[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=2)
        return np.log(self.weights)[None, :] - 0.5 * d2

    def log_density(self, x):
        xb, single = _as_batch(x, self.dim)
        v = logsumexp(self._component_logs(xb), axis=1)
        return float(v[0]) if single else v

    def _responsibilities(self, xb):
        logs = self._component_logs(xb)
        logs = logs - logs.max(axis=1, keepdims=True)
        r = np.exp(logs)
        return r / r.sum(axis=1, keepdims=True)

    def score(self, x):
        xb, single = _as_batch(x, self.dim)
        r = self._responsibilities(xb)
        s = r[:, 0:1] * (self.means[0] - xb) + r[:, 1:2] * (self.means[1] - xb)
        return s[0] if single else s

    def potential_and_score(self, x):
        # hot path: log-density via log(1 + e^delta) and 2 r_plus - 1 = -tanh(delta/2),
        # where delta = log_m - log_p for the +/-offset pair; fewest temporaries
        xb, single = _as_batch(x, self.dim)
        xa = xb @ self.offset
        delta = self._delta_c - 2.0 * xa
        potential = 0.5 * np.einsum("ni,ni->n", xb, xb) - xa - np.logaddexp(0.0, delta)
        potential -= self._const_p
        neg_score = xb + np.tanh(0.5 * delta)[:, None] * self.offset
        if single:
            return float(potential[0]), neg_score[0]
        return potential, neg_score

    def _r_plus(self, xb):
        """Responsibility of the +offset component, skipping the log-density bookkeeping."""
        delta = self._delta_c - 2.0 * (xb @ self.offset)  # log_m - log_p
        return 1.0 / (1.0 + np.exp(np.minimum(delta, 700.0)))

    def _hessian_from_responsibility(self, r_p):
        # -I + sum_k r_k g_k g_k^T - s s^T collapses to -I + 4 r_+ r_- a a^T
        # because g_+ - g_- = 2a and the middle terms are a two-point variance.
        return self._neg_eye[None, :, :] + (4.0 * r_p * (1.0 - r_p))[:, None, None] * self._offset_outer

    def hessian_log_density(self, x):
        xb, single = _as_batch(x, self.dim)
        h = self._hessian_from_responsibility(self._r_plus(xb))
        return h[0] if single else h

    def score_and_hessian(self, x):
        xb, single = _as_batch(x, self.dim)
        r_p = self._r_plus(xb)
        s = (2.0 * r_p - 1.0)[:, None] * self.offset - xb
        h = self._hessian_from_responsibility(r_p)
        if single:
            return s[0], h[0]
        return s, h


def gmm_target(d: int) -> GaussianMixtureTarget:
    """Mixture of N(1.2*1, I) with weight 2/3 and N(-1.2*1, I) with weight 1/3."""
    if d < 1:
        raise InvalidArgumentError("dimension must be >= 1")
    return GaussianMixtureTarget(1.2 * np.ones(d))


@dataclass
class GPData:
    """Paired scalar inputs/responses for the GP hyperparameter posterior."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.shape != self.y.shape or self.x.ndim != 1:
            raise InvalidArgumentError("x and y must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise InvalidArgumentError("data contains non-finite values")

    @property
    def n(self) -> int:
        return self.x.shape[0]


class GPHyperparameterTarget(TargetModel):
    """2-D posterior over (log-amplitude, log-inverse-lengthscale) of a GP regression.

    Kernel K_ij = exp(phi1) * exp(-exp(phi2) * (x_i - x_j)^2), noisy Gram
    K_y = K + 0.04 I. The score uses the marginal-likelihood gradient
    identities with a Cholesky factorization; no Hessian is provided.
    """

    has_hessian = False
    JITTER = 0.04

    def __init__(self, data: GPData, prior_mode: str = "log1p_quadratic"):
        if data.n < 2:
            raise InvalidArgumentError("need at least 2 observations")
        if prior_mode not in ("none", "log1p_quadratic"):
            raise InvalidArgumentError("unknown prior_mode %r" % prior_mode)
        self.dim = 2
        self.data = data
        self.prior_mode = prior_mode
        diff = data.x[:, None] - data.x[None, :]
        self._d2 = diff * diff

    def _gram(self, phi):
        return np.exp(phi[0]) * np.exp(-np.exp(phi[1]) * self._d2)

    def _factor(self, phi):
        k = self._gram(phi)
        ky = k + self.JITTER * np.eye(self.data.n)
        try:
            cf = cho_factor(ky, lower=True)
        except np.linalg.LinAlgError as exc:
            raise InvalidArgumentError(
                "noisy Gram matrix is not positive definite at phi=%s: %s" % (phi, exc)
            ) from exc
        return k, cf

    def _prior_terms(self, phi):
        if self.prior_mode == "none":
            return 0.0, np.zeros(2)
        q = 1.0 + phi @ phi
        return -np.log(q), -2.0 * phi / q

    def log_density(self, x):
        xb, single = _as_batch(x, self.dim)
        out = np.empty(xb.shape[0])
        for i, phi in enumerate(xb):
            _, cf = self._factor(phi)
            alpha = cho_solve(cf, self.data.y)
            logdet = 2.0 * np.log(np.diag(cf[0])).sum()
            lp, _ = self._prior_terms(phi)
            out[i] = -0.5 * self.data.y @ alpha - 0.5 * logdet + lp
        return float(out[0]) if single else out

    def score(self, x):
        xb, single = _as_batch(x, self.dim)
        out = np.empty_like(xb)
        for i, phi in enumerate(xb):
            k, cf = self._factor(phi)
            alpha = cho_solve(cf, self.data.y)
            kinv = cho_solve(cf, np.eye(self.data.n))
            dk1 = k
            dk2 = -np.exp(phi[1]) * self._d2 * k
            _, gp = self._prior_terms(phi)
            for p, dk in enumerate((dk1, dk2)):
                out[i, p] = 0.5 * alpha @ dk @ alpha - 0.5 * np.trace(kinv @ dk)
            out[i] += gp
        return out[0] if single else out


def gp_target(data: GPData, prior_mode: str = "log1p_quadratic") -> GPHyperparameterTarget:
    return GPHyperparameterTarget(data, prior_mode=prior_mode)


def load_two_column_csv(path) -> GPData:
    """Parse the first two numeric columns of a CSV file, tolerating one header line."""
    xs, ys = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2:
                raise ParseError("line %d: expected at least 2 columns" % lineno)
            try:
                xs.append(float(row[0]))
                ys.append(float(row[1]))
            except ValueError:
                if lineno == 1 and not xs:
                    continue  # header line
                raise ParseError("line %d: non-numeric cell in %r" % (lineno, row)) from None
    if len(xs) < 2:
        raise ParseError("need at least 2 data rows, got %d" % len(xs))
    return GPData(x=np.array(xs), y=np.array(ys))


def synthetic_gp_data(n: int = 221, seed: int = 0, noise: float = 0.1) -> GPData:
    """Deterministic smooth-curve-plus-noise dataset shaped like a small range/log-ratio scan."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    x = np.linspace(390.0, 720.0, n)
    y = -0.05 - 0.7 / (1.0 + np.exp(-(x - 600.0) / 25.0))
    y = y + noise * rng.standard_normal(n)
    return GPData(x=x, y=y)
