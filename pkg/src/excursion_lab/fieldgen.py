"""Grid sampling of stationary Gaussian fields.

Fields are drawn by circulant embedding: the covariance is wrapped onto a
periodic torus at least as large as the grid plus the kernel's range,
the torus covariance is diagonalized by the FFT and a complex white
noise is coloured by the square-root spectrum. The real and imaginary
parts of one transform are two independent fields with the exact grid
covariance, so every draw yields a pair ``(f, f_tilde)``.

Grid nodes sit at cell centres ``(i + 1/2 - n/2) h`` on each axis, so the
sampled region ``[-(R/2 + b), R/2 + b]^d`` is tiled by ``n^d`` cells and
the origin lies on a cell corner.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import fft as sfft

from .errors import (DegenerateConstraintSet, DomainOutsideGrid,
                     EmbeddingNotPSD, MismatchedGrids)
from .models import CovarianceModel, model_from_dict
from .rng import Role, seed_record, stream

__all__ = [
    "GridSpec",
    "FieldSample",
    "CirculantEmbedding",
    "ConditioningConstraint",
    "embedding",
    "sample_field",
    "sample_pair",
    "interpolated_pair",
    "condition_on_constraints",
    "central_gradient",
    "central_hessian",
    "write_field",
    "read_field",
]

TAU_PSD = 1e-9
# largest torus tried by the automatic padding rule
MAX_TORUS_CELLS = 2 ** 26
KAPPA_MAX = 1e12


@dataclass(frozen=True)
class GridSpec:
    """Regular grid covering ``Lambda_{R + 2b}`` centred at the origin."""

    d: int
    R: float
    h: float
    b: float = 0.0

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError("d must be 1, 2 or 3")
        if not (self.R > 0 and self.h > 0 and self.b >= 0):
            raise ValueError("need R > 0, h > 0, b >= 0")
        cells = (self.R + 2 * self.b) / self.h
        n = round(cells)
        if abs(cells - n) > 1e-9 * max(1.0, cells) or n % 2:
            raise ValueError(
                f"(R + 2b)/h = {cells:g} must be an even integer number of cells")

    @property
    def n(self):
        return int(round((self.R + 2 * self.b) / self.h))

    @property
    def shape(self):
        return (self.n,) * self.d

    @property
    def side(self):
        return self.R + 2 * self.b

    def axis_coords(self):
        return (np.arange(self.n) + 0.5 - self.n / 2) * self.h

    def node_coords(self, index):
        index = np.asarray(index, dtype=float)
        return (index + 0.5 - self.n / 2) * self.h

    def nearest_node(self, point):
        p = np.atleast_1d(np.asarray(point, dtype=float))
        if p.shape != (self.d,):
            raise ValueError(f"point must have {self.d} coordinates")
        idx = np.floor(p / self.h + self.n / 2).astype(int)
        if np.any(idx < 0) or np.any(idx >= self.n):
            raise DomainOutsideGrid(f"point {p.tolist()} outside sampled grid")
        return tuple(int(i) for i in idx)

    def box_slices(self, side, center=None):
        """Cells of the closed box ``center + [-side/2, side/2]^d``.

        The box faces must lie on cell edges.
        """
        center = np.zeros(self.d) if center is None else np.broadcast_to(
            np.asarray(center, dtype=float), (self.d,))
        out = []
        for c in center:
            lo = (c - side / 2) / self.h + self.n / 2
            hi = (c + side / 2) / self.h + self.n / 2
            ilo, ihi = round(lo), round(hi)
            if abs(lo - ilo) > 1e-9 or abs(hi - ihi) > 1e-9:
                raise ValueError("box faces must lie on cell edges")
            if ilo < 0 or ihi > self.n or ihi <= ilo:
                raise DomainOutsideGrid(
                    f"box of side {side:g} at {center.tolist()} leaves the grid")
            out.append(slice(int(ilo), int(ihi)))
        return tuple(out)

    def to_dict(self):
        return {"d": self.d, "R": self.R, "h": self.h, "b": self.b}


class _Spectral:
    """Linear combination of real/imaginary parts of torus transforms.

    Each term ``(a, wr, wi)`` stands for ``wr Re F(a) + wi Im F(a)``, where
    ``F`` is the unnormalized forward DFT. Gradients at nodes use the
    signed-frequency trigonometric interpolant with Nyquist terms dropped.
    """

    def __init__(self, terms, h):
        self.terms = terms
        self.h = h

    def combine(self, other, c1, c2):
        if other is None:
            return None
        terms = [(a, c1 * wr, c1 * wi) for a, wr, wi in self.terms]
        terms += [(a, c2 * wr, c2 * wi) for a, wr, wi in other.terms]
        return _Spectral(terms, self.h)

    def gradient(self, index):
        grad = None
        for a, wr, wi in self.terms:
            g = self._grad_one(a, index)
            term = wr * g.real + wi * g.imag
            grad = term if grad is None else grad + term
        return grad

    def _grad_one(self, a, index):
        d = a.ndim
        phases = []
        freqs = []
        for ax in range(d):
            M = a.shape[ax]
            k = np.arange(M)
            phases.append(np.exp(-2j * np.pi * k * index[ax] / M))
            kt = np.where(k < M / 2, k, k - M).astype(float)
            if M % 2 == 0:
                kt[M // 2] = 0.0
            freqs.append(-2j * np.pi * kt / (M * self.h))
        out = np.empty(d, dtype=complex)
        for ax in range(d):
            b = a
            for j in range(d - 1, -1, -1):
                vec = phases[j] * freqs[j] if j == ax else phases[j]
                b = np.tensordot(b, vec, axes=([j], [0]))
            out[ax] = b
        return out


@dataclass(frozen=True, eq=False)
class FieldSample:
    """A field realization on a grid, with optional companion copy."""

    values: np.ndarray
    grid: GridSpec
    model: CovarianceModel
    seed: dict = field(default_factory=dict)
    companion: Optional[np.ndarray] = None
    t: Optional[float] = None
    meta: dict = field(default_factory=dict)
    spectral: Optional[_Spectral] = field(default=None, repr=False)

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ValueError(
                f"value grid {self.values.shape} does not match {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    @property
    def model_id(self):
        return self.model.model_id

    def gradient_at(self, index):
        """Gradient at a node; spectral if available, else central differences."""
        if self.spectral is not None:
            return self.spectral.gradient(index)
        return central_gradient(self.values, index, self.grid.h)


class CirculantEmbedding:
    """Square-root spectrum of the torus-wrapped covariance."""

    def __init__(self, model, n, h, padding="auto", tau=TAU_PSD):
        if padding == "double":
            sizes = [2 * n]
        elif padding == "auto":
            sizes = self._auto_sizes(model, n, h)
        else:
            sizes = [int(padding)]
            if sizes[0] < n:
                raise ValueError("torus must be at least as large as the grid")
        self.n = n
        self.h = h
        for i, M in enumerate(sizes):
            lam = self._spectrum(model, M, h)
            lmax = lam.max()
            lmin = lam.min()
            if lmin >= -tau * lmax:
                break
            if i == len(sizes) - 1:
                raise EmbeddingNotPSD(
                    f"embedding eigenvalue ratio {lmin / lmax:.3e} below -{tau:g}; "
                    "use a larger torus or another family")
        self.torus = (M,) * model.d
        neg = lam < 0
        self.clipped_mass = float(-lam[neg].sum() / lam.sum())
        self.min_ratio = float(lmin / lmax)
        lam[neg] = 0.0
        self.sqrt_spec = np.sqrt(lam / lam.size)

    @staticmethod
    def _auto_sizes(model, n, h):
        """Candidate torus lengths, smallest first.

        Covariances on the grid are exact for any torus of length ``>= 2n``
        with a nonnegative spectrum, so slowly decaying families grow from
        ``2n`` until the spectrum is PSD instead of wrapping at their
        effective range.
        """
        m = model.effective_range() / h
        if np.isfinite(m):
            m = int(np.ceil(m)) + 1
            full = sfft.next_fast_len(max(n + m, 2 * m))
            if full <= 2 * n:
                return [full]
        else:
            full = None
        sizes = []
        M = sfft.next_fast_len(2 * n)
        while (full is None or M < full) and M ** model.d <= MAX_TORUS_CELLS:
            sizes.append(M)
            M = sfft.next_fast_len(int(1.5 * M))
        if full is not None and full ** model.d <= MAX_TORUS_CELLS:
            sizes.append(full)
        return sizes or [sfft.next_fast_len(2 * n)]

    @staticmethod
    def _spectrum(model, M, h):
        k = np.arange(M)
        lag = np.minimum(k, M - k) * h
        axes = np.meshgrid(*([lag] * model.d), indexing="ij")
        c = model(np.stack(axes, axis=-1))
        return sfft.fftn(c).real

    def draw(self, rng):
        shape = self.torus
        xi = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        a = self.sqrt_spec * xi
        z = sfft.fftn(a)
        crop = tuple(slice(0, self.n) for _ in shape)
        return a, z[crop]


@lru_cache(maxsize=32)
def embedding(model, n, h, padding="auto"):
    return CirculantEmbedding(model, n, h, padding)


def sample_pair(model, grid, seed, replicate=0, padding="auto", keep_spectral=False):
    """Two independent samples ``(f, f_tilde)`` from one complex draw."""
    if model.d != grid.d:
        raise MismatchedGrids("model and grid dimensions differ")
    emb = embedding(model, grid.n, grid.h, padding)
    a, z = emb.draw(stream(seed, replicate, Role.FIELD))
    meta = {"clipped_mass": emb.clipped_mass, "torus": list(emb.torus)}
    rec = seed_record(seed, replicate, Role.FIELD)
    sp_r = _Spectral([(a, 1.0, 0.0)], grid.h) if keep_spectral else None
    sp_i = _Spectral([(a, 0.0, 1.0)], grid.h) if keep_spectral else None
    f = FieldSample(np.ascontiguousarray(z.real), grid, model, dict(rec, part="re"),
                    meta=dict(meta), spectral=sp_r)
    g = FieldSample(np.ascontiguousarray(z.imag), grid, model, dict(rec, part="im"),
                    meta=dict(meta), spectral=sp_i)
    return f, g


def sample_field(model, grid, seed, replicate=0, padding="auto", keep_spectral=False):
    """One stationary sample; deterministic in ``(model, grid, seed, replicate)``."""
    return sample_pair(model, grid, seed, replicate, padding, keep_spectral)[0]


def _check_same(fs, other):
    if fs.grid != other.grid or fs.model != other.model:
        raise MismatchedGrids("samples must share grid and model")


def interpolated_pair(fs, fs_tilde, t):
    """``f^t = t f + sqrt(1 - t^2) f_tilde`` as a new sample."""
    _check_same(fs, fs_tilde)
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    s = np.sqrt(1.0 - t * t)
    if t == 1.0:
        vals = fs.values.copy()
    elif t == 0.0:
        vals = fs_tilde.values.copy()
    else:
        vals = t * fs.values + s * fs_tilde.values
    sp = fs.spectral.combine(fs_tilde.spectral, t, s) if fs.spectral else None
    return FieldSample(vals, fs.grid, fs.model, {"f": fs.seed, "f_tilde": fs_tilde.seed},
                       companion=fs_tilde.values, t=float(t), meta=dict(fs.meta),
                       spectral=sp)


def central_gradient(values, index, h):
    index = tuple(index)
    g = np.empty(values.ndim)
    for ax in range(values.ndim):
        up = list(index)
        dn = list(index)
        up[ax] += 1
        dn[ax] -= 1
        g[ax] = (values[tuple(up)] - values[tuple(dn)]) / (2 * h)
    return g


def central_hessian(values, index, h):
    """Second central differences; mixed terms by the four-point stencil."""
    d = values.ndim
    index = np.asarray(index)
    H = np.empty((d, d))

    def at(offset):
        return values[tuple(index + offset)]

    e = np.eye(d, dtype=int)
    f0 = at(0 * e[0])
    for i in range(d):
        H[i, i] = (at(e[i]) - 2 * f0 + at(-e[i])) / h**2
        for j in range(i + 1, d):
            H[i, j] = H[j, i] = (at(e[i] + e[j]) - at(e[i] - e[j])
                                 - at(-e[i] + e[j]) + at(-e[i] - e[j])) / (4 * h * h)
    return H


@dataclass(frozen=True)
class ConditioningConstraint:
    """``g(x) = level`` and optionally ``grad g(x) = 0`` for ``g`` in {f, ft}."""

    point: tuple
    level: float
    gradient: bool = False
    field: str = "f"

    def __post_init__(self):
        if self.field not in ("f", "ft"):
            raise ValueError("field must be 'f' or 'ft'")


def _unit(d, i):
    a = [0] * d
    a[i] = 1
    return tuple(a)


def condition_on_constraints(model, grid, constraints, base, t, kappa_max=KAPPA_MAX):
    """Gaussian regression of ``(f, f_tilde)`` on point constraints.

    Constraint points are snapped to their nearest grid node. Values are
    read from the base grids; gradients of the base come from the spectral
    interpolant when the samples carry one. The correction adds
    ``Cov(field, V) Sigma^{-1} (v* - V)`` to each of ``f`` and ``f_tilde``,
    which leaves the joint law of ``(f, f_tilde)`` given the constraints
    exact, and ``f^t`` is then formed from the corrected pair.

    Returns
    -------
    (FieldSample, FieldSample)
        Conditioned ``f`` and ``f_tilde``; each carries ``meta['conditioning']``
        with snapped nodes, condition number and the regression weights.
    """
    fs, ft_ = base
    _check_same(fs, ft_)
    if fs.grid != grid or fs.model != model:
        raise MismatchedGrids("base pair does not match model/grid")
    if not constraints:
        return fs, ft_
    d = grid.d
    s = np.sqrt(max(0.0, 1.0 - t * t))
    quantities = []  # (alpha, node, field)
    targets = []
    observed = []
    seen = set()
    fts = interpolated_pair(fs, ft_, t)
    for c in constraints:
        node = grid.nearest_node(c.point)
        key = (node, c.field)
        if key in seen:
            raise DegenerateConstraintSet(f"repeated constraint point {node} on {c.field}")
        seen.add(key)
        src = fs if c.field == "f" else fts
        quantities.append(((0,) * d, node, c.field))
        targets.append(c.level)
        observed.append(src.values[node])
        if c.gradient:
            if min(node) < 2 or max(node) > grid.n - 3:
                raise DomainOutsideGrid("gradient constraint within 2h of grid edge")
            g = src.gradient_at(node)
            for i in range(d):
                quantities.append((_unit(d, i), node, c.field))
                targets.append(0.0)
                observed.append(g[i])
    q = len(quantities)
    pos = np.array([grid.node_coords(n) for _, n, _ in quantities])
    Sigma = np.empty((q, q))
    for a in range(q):
        al, _, ga = quantities[a]
        for b in range(q):
            be, _, gb = quantities[b]
            rho = 1.0 if ga == gb else t
            tot = tuple(x + y for x, y in zip(al, be))
            Sigma[a, b] = rho * (-1) ** sum(be) * model.deriv(tot, pos[a] - pos[b])
    kappa = np.linalg.cond(Sigma)
    if not np.isfinite(kappa) or kappa >= kappa_max:
        raise DegenerateConstraintSet(f"constraint covariance condition number {kappa:.3e}")
    resid = np.asarray(targets) - np.asarray(observed)
    w = np.linalg.solve(Sigma, resid)

    axes = np.meshgrid(*([grid.axis_coords()] * d), indexing="ij")
    y = np.stack(axes, axis=-1)
    corr_f = np.zeros(grid.shape)
    corr_t = np.zeros(grid.shape)
    for (al, _, g), p, wj in zip(quantities, pos, w):
        base_cov = (-1) ** sum(al) * model.deriv(al, y - p)
        if g == "f":
            corr_f += wj * base_cov
        else:
            corr_f += wj * t * base_cov
            corr_t += wj * s * base_cov
    info = {"nodes": [list(n) for _, n, _ in quantities], "kappa": float(kappa),
            "weights": w.tolist(), "t": float(t)}
    out_f = replace(fs, values=fs.values + corr_f, spectral=None,
                    meta=dict(fs.meta, conditioning=info))
    out_t = replace(ft_, values=ft_.values + corr_t, spectral=None,
                    meta=dict(ft_.meta, conditioning=info))
    return out_f, out_t


def write_field(path, fs):
    """JSON header line followed by little-endian float64, row-major."""
    header = {"shape": list(fs.values.shape), "dtype": "<f8", "order": "C",
              "grid": fs.grid.to_dict(), "model": fs.model.to_dict(),
              "seed": fs.seed, "t": fs.t}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(np.ascontiguousarray(fs.values, dtype="<f8").tobytes())


def read_field(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        raw = fh.read()
    vals = np.frombuffer(raw, dtype="<f8").reshape(header["shape"]).astype(float)
    grid = GridSpec(**header["grid"])
    return FieldSample(vals, grid, model_from_dict(header["model"]), header.get("seed", {}),
                       t=header.get("t"))
