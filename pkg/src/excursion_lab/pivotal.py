"""Pivotal measures, conditioned pairs and the asymptotic-variance integral.

For a point ``x`` and ``t in [0, 1)`` the pair ``(f, f^t)`` is conditioned
on ``f(x) = f^t(0) = level`` with vanishing gradients at both points. The
variance integral is

    sigma^2 = int_{R^d} K(x) int_0^1 phi^t_{x,0}
              E[|det H f(x)| |det H f^t(0)| d_x Phi d_0 Phi^t | A] dt dx.

Two evaluation modes are provided.

``"local"``
    For the Euler characteristic the topological derivative at a
    critical point is ``sign det(-H)``, so the conditional expectation is
    a Gaussian moment of the two Hessians. Hessians are drawn from their
    exact conditional law (or the moment is evaluated in closed form),
    with no grid involved.
``"grid"``
    For count and bounded-weight functionals the conditioned pair is
    sampled on a grid, Hessians are taken by central differences and
    topological derivatives are computed on growing boxes.

The ``t`` integral has an inverse square-root endpoint singularity at
``t = 1``; it is evaluated after the substitution ``t = 1 - s^2`` with
Gauss-Legendre nodes in ``s``. Near ``t = 1`` the integrand in ``x``
concentrates at scale ``s``, so the radial rule is graded accordingly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from itertools import permutations
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import (DegenerateConstraintSet, DegenerateCovariance, NotStabilized)
from .fieldgen import (ConditioningConstraint, GridSpec, central_hessian,
                       condition_on_constraints, interpolated_pair, sample_pair)
from .models import ktilde_eval
from .rng import Role, stream
from .topology import (FunctionalSpec, evaluate_functional, topological_derivative,
                       truncated_arm_event)

__all__ = [
    "PivotalConfig",
    "PivotalSampleRecord",
    "joint_covariance",
    "pivotal_density",
    "covariance_determinant",
    "conditional_hessian_law",
    "hessian_product_moment",
    "sample_conditioned_pair",
    "estimate_topological_derivative_at_infinity",
    "sigma2_integrand_local",
    "estimate_sigma2",
    "ktilde_box_integral",
    "quasi_association_check",
]


def _unit(d, i, j=None):
    a = [0] * d
    a[i] += 1
    if j is not None:
        a[j] += 1
    return tuple(a)


def _quantities(d, hessians=False):
    """(alpha, at_x, field) for f(x), f^t(0), grads, and optional Hessians."""
    q = [((0,) * d, True, "f"), ((0,) * d, False, "ft")]
    q += [(_unit(d, i), True, "f") for i in range(d)]
    q += [(_unit(d, i), False, "ft") for i in range(d)]
    if hessians:
        pairs = [(i, j) for i in range(d) for j in range(i, d)]
        q += [(_unit(d, i, j), True, "f") for i, j in pairs]
        q += [(_unit(d, i, j), False, "ft") for i, j in pairs]
    return q


def joint_covariance(model, x, t, hessians=False):
    """Covariance of ``(f(x), f^t(0), grad f(x), grad f^t(0)[, Hessians])``.

    ``x`` may be a batch of shape ``(B, d)``; the result then has shape
    ``(B, q, q)``. Entries are ``rho (-1)^|beta| d^(alpha+beta) K(p_a - p_b)``
    with ``rho = t`` between ``f`` and ``f^t`` and 1 otherwise.
    """
    d = model.d
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x.reshape(-1, d)
    t = np.broadcast_to(np.asarray(t, dtype=float), (len(xb),))
    q = _quantities(d, hessians)
    n = len(q)
    S = np.empty((len(xb), n, n))
    zero = np.zeros((1, d))
    cache = {}
    for a, (al, ax_, ga) in enumerate(q):
        for b, (be, bx_, gb) in enumerate(q):
            tot = tuple(i + j for i, j in zip(al, be))
            if ax_ == bx_:
                key = (tot, 0)
                if key not in cache:
                    cache[key] = float(model.deriv(tot, zero)[0])
                val = cache[key]
            else:
                sign = 1.0 if ax_ else -1.0
                key = (tot, sign)
                if key not in cache:
                    cache[key] = model.deriv(tot, sign * xb)
                val = cache[key]
            rho = 1.0 if ga == gb else t
            S[:, a, b] = rho * (-1) ** sum(be) * val
    return S[0] if single else S


def _mvn_density_zero_grad(S, level, d):
    """Density of the first 2+2d coordinates at ``(level, level, 0, ...)``."""
    k = 2 + 2 * d
    A = S[..., :k, :k]
    v = np.zeros(A.shape[:-1])
    v[..., 0] = level
    v[..., 1] = level
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovariance("joint covariance not positive definite") from exc
    y = np.linalg.solve(L, v[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return np.exp(-0.5 * np.sum(y * y, axis=-1) - 0.5 * logdet - 0.5 * k * np.log(2 * np.pi))


def pivotal_density(model, x, t, level):
    """Gaussian density of ``(f(x), f^t(0), grad f(x), grad f^t(0))`` at ``(l, l, 0, 0)``."""
    S = joint_covariance(model, x, t)
    return _mvn_density_zero_grad(S, level, model.d)


def covariance_determinant(model, y, z, t):
    """Determinant of the covariance of ``(f(y), f^t(z), grad f(y), grad f^t(z))``."""
    x = np.asarray(y, dtype=float) - np.asarray(z, dtype=float)
    return float(np.linalg.det(joint_covariance(model, x, t)))


def conditional_hessian_law(model, x, t, level):
    """Mean and covariance of the two Hessians' unique entries given ``A``.

    Returns ``(mean, cov, density)`` with batch axes matching ``x``.
    """
    d = model.d
    S = joint_covariance(model, x, t, hessians=True)
    k = 2 + 2 * d
    S11 = S[..., :k, :k]
    S21 = S[..., k:, :k]
    S22 = S[..., k:, k:]
    v = np.zeros(S.shape[:-2] + (k,))
    v[..., 0] = level
    v[..., 1] = level
    sol = np.linalg.solve(S11, np.concatenate([v[..., None], np.swapaxes(S21, -1, -2)], axis=-1))
    mean = np.einsum("...ij,...j->...i", S21, sol[..., 0])
    cov = S22 - S21 @ sol[..., 1:]
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    dens = _mvn_density_zero_grad(S, level, d)
    return mean, cov, dens


def _det_monomials(d, offset):
    """``det H`` for symmetric ``H`` as (sign, [variable indices]) terms."""
    pairs = [(i, j) for i in range(d) for j in range(i, d)]
    index = {p: offset + k for k, p in enumerate(pairs)}
    terms = []
    for perm in permutations(range(d)):
        sign = 1
        p = list(perm)
        for i in range(d):
            while p[i] != i:
                j = p[i]
                p[i], p[j] = p[j], p[i]
                sign = -sign
        terms.append((sign, [index[tuple(sorted((i, perm[i])))] for i in range(d)]))
    return terms


def _product_moment(mean, cov, idx):
    """``E[prod_k X_{idx_k}]`` for Gaussian ``X`` (batched), by Isserlis."""
    if not idx:
        return np.ones(mean.shape[:-1])
    first, rest = idx[0], idx[1:]
    out = mean[..., first] * _product_moment(mean, cov, rest)
    for j in range(len(rest)):
        others = rest[:j] + rest[j + 1:]
        out = out + cov[..., first, rest[j]] * _product_moment(mean, cov, others)
    return out


def hessian_product_moment(mean, cov, d):
    """``E[det H_x det H_0]`` in closed form from the conditional law."""
    m = d * (d + 1) // 2
    t1 = _det_monomials(d, 0)
    t2 = _det_monomials(d, m)
    out = np.zeros(mean.shape[:-1])
    for s1, i1 in t1:
        for s2, i2 in t2:
            out = out + s1 * s2 * _product_moment(mean, cov, i1 + i2)
    return out


def _sym_from_unique(u, d):
    H = np.empty(u.shape[:-1] + (d, d))
    k = 0
    for i in range(d):
        for j in range(i, d):
            H[..., i, j] = H[..., j, i] = u[..., k]
            k += 1
    return H


def sigma2_integrand_local(model, x, t, level, draws=0, rng=None):
    """``K(x) phi^t_{x,0} E[det H_x det H_0 | A]`` for the Euler characteristic.

    With ``draws == 0`` the moment is exact; otherwise it is a Monte Carlo
    mean over ``draws`` conditional Hessian pairs and the standard error is
    returned as well.

    Returns
    -------
    value, se : ndarray
    """
    d = model.d
    x = np.asarray(x, dtype=float).reshape(-1, d)
    mean, cov, dens = conditional_hessian_law(model, x, t, level)
    Kx = model(x)
    if draws == 0:
        mom = hessian_product_moment(mean, cov, d)
        return Kx * dens * mom, np.zeros(len(x))
    m = d * (d + 1) // 2
    w, V = np.linalg.eigh(cov)
    root = V * np.sqrt(np.clip(w, 0.0, None))[..., None, :]
    z = rng.standard_normal((len(x), draws, 2 * m))
    samp = mean[:, None, :] + np.einsum("bij,bnj->bni", root, z)
    dx = np.linalg.det(_sym_from_unique(samp[..., :m], d))
    d0 = np.linalg.det(_sym_from_unique(samp[..., m:], d))
    prod = dx * d0  # |det||det| times sign det(-H) sign det(-H)
    wgt = Kx * dens
    return wgt * prod.mean(axis=1), np.abs(wgt) * prod.std(axis=1, ddof=1) / np.sqrt(draws)


# ---------------------------------------------------------------------------
# grid mode
# ---------------------------------------------------------------------------

def sample_conditioned_pair(model, grid, x, t, level, seed, replicate=0):
    """``(f, f^t)`` on ``grid`` conditioned on ``A^t_{x,0}``.

    The constraint at the origin uses the node nearest to ``(h/2, ..., h/2)``
    and the one at ``x`` is displaced from it by ``x`` rounded to the grid,
    so the lag between the two constrained nodes is a multiple of ``h``.
    """
    h = grid.h
    d = grid.d
    y0 = np.full(d, h / 2)
    x_node = y0 + np.round(np.atleast_1d(np.asarray(x, dtype=float)) / h) * h
    f, ft = sample_pair(model, grid, seed, replicate, keep_spectral=True)
    cons = [ConditioningConstraint(tuple(x_node), level, True, "f"),
            ConditioningConstraint(tuple(y0), level, True, "ft")]
    fc, ftc = condition_on_constraints(model, grid, cons, (f, ft), t)
    ftt = interpolated_pair(fc, ftc, t)
    meta = dict(fc.meta, x_node=x_node.tolist(), y_node=y0.tolist())
    return replace(fc, meta=meta), replace(ftt, meta=meta)


def _box_center(grid, point):
    # nearest cell corner, so that box faces fall on cell edges
    return np.round(np.asarray(point, dtype=float) / grid.h) * grid.h


def estimate_topological_derivative_at_infinity(pair, spec, R_stab, x=None, y=None):
    """Stabilized derivatives ``(d_x Phi, d_0 Phi^t)``.

    Each derivative is computed on boxes of side ``R_stab`` and
    ``2 R_stab`` around the constrained point. Unequal values raise
    ``NotStabilized`` carrying a truncated-arm witness in ``args[1]``.
    """
    f, ft = pair
    grid = f.grid
    x = np.asarray(f.meta["x_node"] if x is None else x, dtype=float)
    y = np.asarray(f.meta["y_node"] if y is None else y, dtype=float)
    out = []
    for fs, p in ((f, x), (ft, y)):
        c = _box_center(grid, p)
        vals = []
        for side in (R_stab, 2 * R_stab):
            D = grid.box_slices(side, c)
            vals.append(topological_derivative(fs, spec, D, p))
        if vals[0] != vals[1]:
            witness = None
            try:
                witness = truncated_arm_event(fs, spec.level, p, R_stab / 2)
            except Exception:  # annulus may leave the grid
                witness = None
            raise NotStabilized(f"derivative {vals[0]} on R_stab, {vals[1]} on 2 R_stab",
                                {"truncated_arm": witness})
        out.append(vals[0])
    return tuple(out)


@dataclass(frozen=True)
class PivotalSampleRecord:
    x: tuple
    t: float
    det_product: float
    deriv_product: float
    density: float


# ---------------------------------------------------------------------------
# sigma^2 quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PivotalConfig:
    """Quadrature and sampling settings for ``estimate_sigma2``.

    ``n_s`` Gauss-Legendre nodes in ``s`` with ``t = 1 - s^2``. The radial
    rule uses panels ``[r_min, c s]``, ``[c s, 1]``, ``[1, rho_max]`` with
    ``n_r`` nodes each (the first panel is dropped when ``c s <= r_min``).
    ``t_rule="truncated"`` instead integrates ``t`` over ``[0, 1 - t_cap]``.
    """

    level: float = 1.0
    spec: FunctionalSpec = field(default_factory=lambda: FunctionalSpec(phi="euler", level=1.0))
    rho_max: float = 6.0
    n_s: int = 16
    n_r: int = 12
    n_angle: int = 8
    grade: float = 2.0
    t_cap: float = 0.05
    t_rule: str = "substitution"
    mode: str = "local"
    draws: int = 2000
    h: float = 0.25
    R_stab: float = 8.0
    exclude_radius: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.t_cap <= 0.2:
            raise ValueError("t_cap must lie in (0, 0.2]")
        if self.mode not in ("local", "grid"):
            raise ValueError("mode must be 'local' or 'grid'")
        if self.t_rule not in ("substitution", "truncated"):
            raise ValueError("t_rule must be 'substitution' or 'truncated'")
        if self.mode == "local" and self.spec.phi != "euler":
            raise ValueError("local mode is only valid for the Euler characteristic")


def _gl(a, b, n):
    z, w = leggauss(n)
    return 0.5 * (b - a) * z + 0.5 * (a + b), 0.5 * (b - a) * w


def _directions(d, n_angle):
    """Unit vectors and weights summing to the sphere's surface measure."""
    if d == 1:
        return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    if d == 2:
        th = 2 * np.pi * (np.arange(n_angle) + 0.5) / n_angle
        return np.stack([np.cos(th), np.sin(th)], axis=1), np.full(n_angle, 2 * np.pi / n_angle)
    mu, wm = leggauss(n_angle)
    ph = 2 * np.pi * (np.arange(2 * n_angle) + 0.5) / (2 * n_angle)
    dirs, wts = [], []
    for m, w in zip(mu, wm):
        r = np.sqrt(1 - m * m)
        for p in ph:
            dirs.append([r * np.cos(p), r * np.sin(p), m])
            wts.append(w * np.pi / n_angle)
    return np.array(dirs), np.array(wts)


def _radial_nodes(cfg, s, r_min):
    edges = [r_min]
    if cfg.grade * s > r_min and cfg.grade * s < 1.0:
        edges.append(cfg.grade * s)
    if cfg.rho_max > 1.0 and edges[-1] < 1.0:
        edges.append(1.0)
    edges.append(cfg.rho_max)
    rs, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        r, w = _gl(a, b, cfg.n_r)
        rs.append(r)
        ws.append(w)
    return np.concatenate(rs), np.concatenate(ws)


def _t_nodes(cfg):
    if cfg.t_rule == "substitution":
        s, ws = _gl(0.0, 1.0, cfg.n_s)
        return 1.0 - s * s, 2.0 * s * ws, s
    t, wt = _gl(0.0, 1.0 - cfg.t_cap, cfg.n_s)
    return t, wt, np.sqrt(1.0 - t)


def _quadrature_nodes(cfg, d, r_min=0.0):
    dirs, wd = _directions(d, cfg.n_angle)
    nodes = []
    for t, wt, s in zip(*_t_nodes(cfg)):
        r, wr = _radial_nodes(cfg, s, r_min)
        for ri, wri in zip(r, wr):
            jac = ri ** (d - 1)
            for u, wu in zip(dirs, wd):
                nodes.append((ri * u, float(t), float(wt * wri * jac * wu)))
    return nodes


def _local_sum(model, cfg, seed, draws, **overrides):
    c = replace(cfg, **overrides) if overrides else cfg
    nodes = _quadrature_nodes(c, model.d)
    ts = np.array([n[1] for n in nodes])
    X = np.array([n[0] for n in nodes])
    W = np.array([n[2] for n in nodes])
    total = 0.0
    var = 0.0
    rng = stream(seed, 0, Role.PIVOTAL)
    for t in np.unique(ts):
        m = ts == t
        val, se = sigma2_integrand_local(model, X[m], t, c.level, draws, rng)
        total += float(np.sum(W[m] * val))
        var += float(np.sum((W[m] * se) ** 2))
    return total, math.sqrt(var), len(nodes)


def _grid_node(model, cfg, x, t, seed, node_id, records=None, density=0.0):
    d = model.d
    spec = cfg.spec
    side = 2 * cfg.R_stab + 2 * (np.max(np.abs(x)) + 1.0) + 4 * cfg.h
    side = 2 * cfg.h * math.ceil(side / (2 * cfg.h))
    grid = GridSpec(d, side, cfg.h)
    vals = []
    dropped = 0
    unstable = 0
    for rep in range(cfg.draws):
        try:
            f, ft = sample_conditioned_pair(model, grid, x, t, cfg.level, seed,
                                            replicate=node_id * cfg.draws + rep)
        except DegenerateConstraintSet:
            dropped += 1
            continue
        try:
            dx, d0 = estimate_topological_derivative_at_infinity((f, ft), spec, cfg.R_stab)
        except NotStabilized:
            unstable += 1
            continue
        if dx == 0 or d0 == 0:
            vals.append(0.0)
            continue
        ix = grid.nearest_node(f.meta["x_node"])
        i0 = grid.nearest_node(f.meta["y_node"])
        hx = abs(np.linalg.det(central_hessian(f.values, ix, grid.h)))
        h0 = abs(np.linalg.det(central_hessian(ft.values, i0, grid.h)))
        vals.append(hx * h0 * dx * d0)
        if records is not None:
            records.append(PivotalSampleRecord(tuple(np.asarray(x, float)), float(t),
                                               hx * h0, float(dx * d0), density))
    return np.array(vals), dropped, unstable


def estimate_sigma2(model, cfg, seed=0, diagnostics=True, records=None):
    """Quadrature estimate of the asymptotic variance with standard error.

    Returns
    -------
    dict
        ``sigma2``, ``se``, ``nodes``, ``dropped_nodes`` and
        ``truncation_sensitivity`` (values with ``rho_max`` halved and
        doubled and with the truncated ``t`` rule at ``t_cap`` and at half
        and double of it). In grid mode per-draw ``PivotalSampleRecord``
        entries are appended to ``records`` when a list is given.
    """
    if cfg.spec.phi == "bounded" and cfg.spec.weight == "zero":
        return {"sigma2": 0.0, "se": 0.0, "nodes": 0, "dropped_nodes": 0,
                "truncation_sensitivity": {}}
    if cfg.mode == "local":
        val, se, nn = _local_sum(model, cfg, seed, cfg.draws)
        out = {"sigma2": val, "se": se, "nodes": nn, "dropped_nodes": 0,
               "excluded_ball": 0.0}
        if diagnostics:
            sens = {}
            for name, kw in (("rho_half", {"rho_max": cfg.rho_max / 2}),
                             ("rho_double", {"rho_max": cfg.rho_max * 2}),
                             ("t_truncated", {"t_rule": "truncated"}),
                             ("t_cap_half", {"t_rule": "truncated", "t_cap": cfg.t_cap / 2}),
                             ("t_cap_double", {"t_rule": "truncated",
                                               "t_cap": min(0.2, 2 * cfg.t_cap)})):
                sens[name] = _local_sum(model, cfg, seed, 0, **kw)[0]
            sens["exact_moment"] = _local_sum(model, cfg, seed, 0)[0]
            out["truncation_sensitivity"] = sens
        else:
            out["truncation_sensitivity"] = {}
        return out
    r_min = cfg.exclude_radius if cfg.exclude_radius is not None else 2 * cfg.h
    nodes = _quadrature_nodes(cfg, model.d, r_min)
    total = 0.0
    var = 0.0
    dropped = 0
    unstable = 0
    for k, (x, t, w) in enumerate(nodes):
        dens = float(pivotal_density(model, x, t, cfg.level))
        vals, drop, unst = _grid_node(model, cfg, x, t, seed, k, records, dens)
        dropped += drop
        unstable += unst
        if len(vals) == 0:
            continue
        Kx = float(model(x))
        total += w * Kx * dens * vals.mean()
        if len(vals) > 1:
            var += (w * Kx * dens) ** 2 * vals.var(ddof=1) / len(vals)
    out = {"sigma2": total, "se": math.sqrt(var), "nodes": len(nodes),
           "dropped_nodes": dropped, "not_stabilized": unstable,
           "excluded_ball": r_min, "truncation_sensitivity": {}}
    if cfg.spec.phi == "euler":
        inner = replace(cfg, rho_max=r_min, mode="local", n_r=cfg.n_r)
        out["excluded_ball_contribution"] = _local_sum(model, inner, seed, 0)[0]
    return out


def sigma2_to_json(result):
    keys = ("sigma2", "se", "nodes", "dropped_nodes", "truncation_sensitivity")
    return json.dumps({k: result.get(k) for k in keys}, sort_keys=True)


# ---------------------------------------------------------------------------
# quasi-association
# ---------------------------------------------------------------------------

def _overlap_1d(a1, b1, a2, b2, z):
    return np.clip(np.minimum(b1, b2 + z) - np.maximum(a1, a2 + z), 0.0, None)


def ktilde_box_integral(model, box1, box2, dz=0.25, levels=2):
    """``int int_{box1 x box2} Ktilde(x - y) dx dy`` for axis-aligned boxes.

    Boxes are ``[(lo, hi), ...]`` per axis. The double integral is reduced
    to ``int Ktilde(z) |box1 cap (box2 + z)| dz`` and evaluated by the
    midpoint rule on a lattice of spacing ``dz``.
    """
    d = model.d
    axes = []
    for (a1, b1), (a2, b2) in zip(box1, box2):
        lo, hi = a1 - b2, b1 - a2
        m = max(1, int(math.ceil((hi - lo) / dz)))
        axes.append(lo + (np.arange(m) + 0.5) * (hi - lo) / m)
    Z = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    vol = np.ones(len(Z))
    for i, ((a1, b1), (a2, b2)) in enumerate(zip(box1, box2)):
        vol *= _overlap_1d(a1, b1, a2, b2, Z[:, i])
    cell = np.prod([(ax[1] - ax[0]) if len(ax) > 1 else 1.0 for ax in axes])
    keep = vol > 0
    kt = ktilde_eval(model, Z[keep], levels=levels)
    return float(np.sum(kt * vol[keep]) * cell)


def _two_boxes(L, sep, d):
    b1 = [(-sep / 2 - L, -sep / 2)] + [(-L / 2, L / 2)] * (d - 1)
    b2 = [(sep / 2, sep / 2 + L)] + [(-L / 2, L / 2)] * (d - 1)
    return b1, b2


def quasi_association_check(model, spec, L, separations, F: Callable, G: Callable, N,
                            seed=0, h=0.25, dz=0.25):
    """Covariance of ``F(Phi(D1))`` and ``G(Phi(D2))`` against the envelope.

    ``D1`` and ``D2`` are boxes of side ``L`` on either side of the
    hyperplane ``x_1 = 0`` with gap ``sep``. Returns one row per
    separation with the covariance, its standard error, the envelope
    integral over the 2-enlarged boxes and their ratio.
    """
    d = model.d
    rows = []
    for sep in separations:
        b1, b2 = _two_boxes(L, sep, d)
        side = 2 * (L + sep / 2) + 2 * h
        side = 2 * h * math.ceil(side / (2 * h))
        grid = GridSpec(d, side, h)

        def box(bx):
            return tuple(slice(int(round(lo / h + grid.n / 2)), int(round(hi / h + grid.n / 2)))
                         for lo, hi in bx)

        D1, D2 = box(b1), box(b2)
        xs = np.empty(N)
        ys = np.empty(N)
        for k in range(0, N, 2):
            pair = sample_pair(model, grid, seed, replicate=k // 2)
            for j, fs in enumerate(pair):
                if k + j < N:
                    xs[k + j] = F(evaluate_functional(fs, spec, D1, h))
                    ys[k + j] = G(evaluate_functional(fs, spec, D2, h))
        prod = (xs - xs.mean()) * (ys - ys.mean())
        cov = float(prod.sum() / (N - 1))
        se = float(prod.std(ddof=1) / math.sqrt(N))
        e1 = [(lo - 2, hi + 2) for lo, hi in b1]
        e2 = [(lo - 2, hi + 2) for lo, hi in b2]
        bound = ktilde_box_integral(model, e1, e2, dz=dz)
        rows.append({"separation": sep, "cov": cov, "abs_cov": abs(cov), "se": se,
                     "bound": bound, "ratio": abs(cov) / bound if bound > 0 else math.inf})
    return rows
