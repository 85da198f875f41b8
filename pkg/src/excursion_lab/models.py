"""Stationary covariance models with closed-form derivatives.

Every model exposes ``deriv(alpha, x)``, the partial derivative
``d^alpha K`` evaluated at lag vectors ``x`` of shape ``(..., d)``.
Regression matrices for conditioning and the pivotal densities are
assembled from these derivatives, so they are implemented exactly
rather than by finite differences.

Three families are provided:

``BargmannFock``
    ``K(x) = exp(-|x|^2 / (2 s^2))``.
``PolyDecay``
    Generalized Cauchy ``K(x) = (1 + |x|^2 / s^2)^(-beta/2)``. It is a
    scale mixture of Gaussians, hence positive definite in every
    dimension, analytic at the origin and bounded by
    ``C (1 + |x|)^(-beta)`` with ``C = (1 + s^2)^(beta/2)``.
``CosineMixture``
    Product kernel ``prod_i exp(-x_i^2 / (2 s^2)) cos(omega x_i / s)``,
    whose spectral measure is a sum of Gaussians centred at
    ``+-omega / s`` on each axis. It takes negative values, which makes
    it a useful test kernel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from math import factorial, log

import numpy as np
from numpy.polynomial import hermite_e

__all__ = [
    "CovarianceModel",
    "BargmannFock",
    "PolyDecay",
    "CosineMixture",
    "covariance_eval",
    "ktilde_eval",
    "model_from_dict",
    "model_from_json",
    "multi_indices",
]


def multi_indices(d, order):
    """All multi-indices of length ``d`` with total degree ``order``."""
    if d == 1:
        return [(order,)]
    out = []
    for first in range(order, -1, -1):
        for rest in multi_indices(d - 1, order - first):
            out.append((first,) + rest)
    return out


@lru_cache(maxsize=None)
def _radial_terms(alpha):
    # d^alpha k(|y|^2/2) = sum over per-axis pair counts p_i of
    #   prod_i alpha_i! / (2^p_i p_i! (alpha_i - 2 p_i)!) y_i^(alpha_i - 2 p_i)
    #   * k^(sum_i (alpha_i - p_i))(u)
    ranges = [range(a // 2 + 1) for a in alpha]
    terms = []
    for ps in np.ndindex(*[len(r) for r in ranges]):
        coef = 1.0
        powers = []
        for a, p in zip(alpha, ps):
            coef *= factorial(a) / (2**p * factorial(p) * factorial(a - 2 * p))
            powers.append(a - 2 * p)
        order = sum(a - p for a, p in zip(alpha, ps))
        terms.append((coef, tuple(powers), order))
    return tuple(terms)


@dataclass(frozen=True)
class CovarianceModel:
    """Base class; subclasses set ``family`` and implement ``deriv``."""

    d: int = 2
    scale: float = 1.0
    family: str = field(default="", init=False)

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.d}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    # -- evaluation -------------------------------------------------------
    def _as_lags(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 0:
            x = x.reshape(1)
        if x.shape[-1] != self.d:
            raise ValueError(f"lag vectors must have last axis {self.d}")
        return x

    def deriv(self, alpha, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.deriv((0,) * self.d, x)

    def hessian0(self):
        """Matrix of second derivatives of ``K`` at the origin."""
        z = np.zeros(self.d)
        H = np.empty((self.d, self.d))
        for i in range(self.d):
            for j in range(self.d):
                a = [0] * self.d
                a[i] += 1
                a[j] += 1
                H[i, j] = self.deriv(tuple(a), z)
        return H

    @property
    def spectral_moment(self):
        """``lambda = -d^2 K / dx_1^2 (0)``."""
        return float(-self.hessian0()[0, 0])

    @property
    def correlation_length(self):
        return 1.0 / np.sqrt(self.spectral_moment)

    def effective_range(self, eps=1e-13):
        """Radius beyond which ``|K| < eps``; ``inf`` if not finite."""
        return np.inf

    @property
    def envelope_C(self):
        return None

    def is_admissible(self, order=8):
        """Smoothness proxy: all derivatives up to ``order`` finite at 0."""
        z = np.zeros(self.d)
        for k in range(order + 1):
            for a in multi_indices(self.d, k):
                if not np.isfinite(self.deriv(a, z)):
                    return False
        return True

    # -- serialization ----------------------------------------------------
    def params(self):
        return {"scale": self.scale}

    def to_dict(self):
        return {
            "family": self.family,
            "d": self.d,
            "params": self.params(),
            "envelopeC": self.envelope_C,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @property
    def model_id(self):
        p = ",".join(f"{k}={v:g}" for k, v in sorted(self.params().items()))
        return f"{self.family}(d={self.d},{p})"


@dataclass(frozen=True)
class _Radial(CovarianceModel):
    def _kprime(self, m, u):
        raise NotImplementedError

    def deriv(self, alpha, x):
        alpha = tuple(int(a) for a in alpha)
        if len(alpha) != self.d:
            raise ValueError("multi-index length must equal d")
        y = self._as_lags(x) / self.scale
        u = 0.5 * np.sum(y * y, axis=-1)
        out = np.zeros(u.shape)
        for coef, powers, order in _radial_terms(alpha):
            mono = np.ones(u.shape)
            for i, p in enumerate(powers):
                if p:
                    mono = mono * y[..., i] ** p
            out = out + coef * mono * self._kprime(order, u)
        return out * self.scale ** (-sum(alpha))


@dataclass(frozen=True)
class BargmannFock(_Radial):
    """Gaussian kernel ``exp(-|x|^2 / (2 s^2))``."""

    family: str = field(default="BargmannFock", init=False)

    def _kprime(self, m, u):
        return (-1.0) ** m * np.exp(-u)

    def effective_range(self, eps=1e-13):
        return self.scale * np.sqrt(2.0 * log(1.0 / eps))


@dataclass(frozen=True)
class PolyDecay(_Radial):
    """Generalized Cauchy kernel ``(1 + |x|^2 / s^2)^(-beta/2)``, ``beta > d``."""

    beta: float = 5.0
    family: str = field(default="PolyDecay", init=False)

    def __post_init__(self):
        super().__post_init__()
        if not self.beta > self.d:
            raise ValueError(f"PolyDecay needs beta > d, got beta={self.beta}")

    def _kprime(self, m, u):
        c = 1.0
        for j in range(m):
            c *= -0.5 * self.beta - j
        return c * 2.0**m * (1.0 + 2.0 * u) ** (-0.5 * self.beta - m)

    @property
    def envelope_C(self):
        # sup_r (1+r)^beta (1 + r^2/s^2)^(-beta/2) is attained at r = s^2
        return float((1.0 + self.scale**2) ** (0.5 * self.beta))

    def effective_range(self, eps=1e-13):
        return self.scale * np.sqrt(eps ** (-2.0 / self.beta) - 1.0)

    def params(self):
        return {"scale": self.scale, "beta": self.beta}


@dataclass(frozen=True)
class CosineMixture(CovarianceModel):
    """Product of damped cosines; spectrum is a Gaussian mixture."""

    omega: float = 1.0
    family: str = field(default="CosineMixture", init=False)

    def _k1(self, n, y):
        # d^n/dy^n Re[exp(-(y - i w)^2 / 2)] exp(-w^2/2), via Hermite He_n
        z = y - 1j * self.omega
        c = np.zeros(n + 1)
        c[n] = 1.0
        val = (-1.0) ** n * hermite_e.hermeval(z, c) * np.exp(-0.5 * z * z)
        return np.exp(-0.5 * self.omega**2) * val.real

    def deriv(self, alpha, x):
        if len(alpha) != self.d:
            raise ValueError("multi-index length must equal d")
        y = self._as_lags(x) / self.scale
        out = np.ones(y.shape[:-1])
        for i, a in enumerate(alpha):
            out = out * self._k1(int(a), y[..., i])
        return out * self.scale ** (-sum(alpha))

    def effective_range(self, eps=1e-13):
        return self.scale * np.sqrt(2.0 * log(1.0 / eps))

    def params(self):
        return {"scale": self.scale, "omega": self.omega}


_FAMILIES = {"BargmannFock": BargmannFock, "PolyDecay": PolyDecay,
             "CosineMixture": CosineMixture}


def model_from_dict(desc):
    """Inverse of ``CovarianceModel.to_dict``."""
    try:
        cls = _FAMILIES[desc["family"]]
    except KeyError as exc:
        raise ValueError(f"unknown covariance family {desc.get('family')!r}") from exc
    params = dict(desc.get("params", {}))
    return cls(d=int(desc["d"]), **params)


def model_from_json(text):
    return model_from_dict(json.loads(text))


def covariance_eval(model, x):
    """``K(x)`` for one lag vector or an array of them."""
    return model(x)


@lru_cache(maxsize=None)
def _ball_offsets(d, levels):
    m = 2 * 3**levels
    ax = np.linspace(-1.0, 1.0, m + 1)
    pts = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    return pts[np.sum(pts * pts, axis=1) <= 1.0 + 1e-12]


def ktilde_eval(model, x, levels=None):
    """``sup_{|y - x| <= 1} |K(y)|`` on a deterministic sample of the ball.

    The sample is a lattice of spacing ``3**-levels`` clipped to the unit
    ball, plus the point of the ball closest to the origin (exact for
    radially decreasing kernels) and the centre itself.
    """
    x = model._as_lags(x)
    d = model.d
    if levels is None:
        levels = 3 if d < 3 else 2
    offs = _ball_offsets(d, levels)
    flat = x.reshape(-1, d)
    out = np.empty(len(flat))
    r = np.linalg.norm(flat, axis=1)
    step = np.minimum(r, 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        near = flat - np.where(r[:, None] > 0, flat * (step / r)[:, None], 0.0)
    chunk = max(1, 200_000 // len(offs))
    for s in range(0, len(flat), chunk):
        pts = flat[s:s + chunk, None, :] + offs[None, :, :]
        vals = np.abs(model(pts)).max(axis=1)
        vals = np.maximum(vals, np.abs(model(near[s:s + chunk])))
        out[s:s + chunk] = np.maximum(vals, np.abs(model(flat[s:s + chunk])))
    return out.reshape(x.shape[:-1])

