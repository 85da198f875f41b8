"""Monte Carlo suites for the limit theorems of excursion-set functionals.

Every suite is a pure function of ``(model, settings, master seed)``.
Per-replicate work is dispatched through a ``mapper`` (``map`` by
default, or an order-preserving process pool from the harness) and
reduced in replicate order, so results do not depend on the worker count.

Replicate ``p`` of the ``k``-th box size uses the stream keyed by
``(k << 32) | p``; each stream produces a pair of independent fields, so
``N`` replicates cost ``ceil(N / 2)`` draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import partial
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import fft as sfft
from scipy import stats as sst

from .errors import DegenerateVariance
from .fieldgen import GridSpec, sample_pair
from .rng import Role, stream
from .topology import (FunctionalSpec, evaluate_functional, extract_excursion,
                       label_components, one_arm_event, truncated_arm_event,
                       unbounded_indicator)

__all__ = [
    "EmpiricalDistribution",
    "kolmogorov_distance",
    "ks_critical",
    "wilson_interval",
    "mean_ci",
    "variance_ci",
    "bootstrap",
    "functional_samples",
    "lln_curve",
    "variance_curve",
    "CltReport",
    "clt_suite",
    "asclt_average",
    "asclt_statistic",
    "arm_decay_curve",
    "VolumeReport",
    "volume_suite",
]

Z95 = 1.959963984540054


# ---------------------------------------------------------------------------
# distributions and intervals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmpiricalDistribution:
    values: np.ndarray

    def __post_init__(self):
        v = np.sort(np.asarray(self.values, dtype=float).ravel())
        if len(v) < 2:
            raise ValueError("an empirical distribution needs at least two values")
        object.__setattr__(self, "values", v)

    @property
    def N(self):
        return len(self.values)

    def cdf(self, x):
        return np.searchsorted(self.values, x, side="right") / self.N


def kolmogorov_distance(sample, cdf):
    """Exact ``sup_x |F_N(x) - cdf(x)|`` for a continuous monotone ``cdf``."""
    v = sample.values if isinstance(sample, EmpiricalDistribution) else np.sort(np.ravel(sample))
    n = len(v)
    F = np.asarray(cdf(v), dtype=float)
    i = np.arange(1, n + 1)
    return float(max(np.max(np.abs(i / n - F)), np.max(np.abs((i - 1) / n - F))))


def ks_critical(N, alpha=0.01):
    """Asymptotic one-sample KS critical value ``K_{1-alpha} / sqrt(N)``."""
    return float(sst.kstwobign.ppf(1.0 - alpha) / math.sqrt(N))


def wilson_interval(k, n, z=Z95):
    if n == 0:
        return (0.0, 1.0)
    if k == 0:
        return (0.0, z * z / (n + z * z))
    if k == n:
        return (n / (n + z * z), 1.0)
    p = k / n
    den = 1.0 + z * z / n
    c = (p + z * z / (2 * n)) / den
    w = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return (max(0.0, c - w), min(1.0, c + w))


def mean_ci(x, z=Z95):
    x = np.asarray(x, dtype=float)
    m = float(x.mean())
    se = float(x.std(ddof=1) / math.sqrt(len(x)))
    return m, se, (m - z * se, m + z * se)


def variance_ci(x, level=0.95):
    """Sample variance, a kurtosis-aware SE and the chi-square interval."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    s2 = float(x.var(ddof=1))
    m4 = float(np.mean((x - x.mean()) ** 4))
    se = math.sqrt(max(m4 - s2 * s2 * (n - 3) / (n - 1), 0.0) / n)
    a = (1 - level) / 2
    lo = (n - 1) * s2 / sst.chi2.ppf(1 - a, n - 1)
    hi = (n - 1) * s2 / sst.chi2.ppf(a, n - 1)
    return s2, se, (float(lo), float(hi))


def bootstrap(n, statistic: Callable, B=200, seed=0, level=0.95):
    """Percentile interval of ``statistic(idx)`` over resampled index sets."""
    rng = stream(seed, 0, Role.BOOTSTRAP)
    reps = np.array([statistic(rng.integers(0, n, n)) for _ in range(B)])
    a = (1 - level) / 2
    return reps, (float(np.quantile(reps, a)), float(np.quantile(reps, 1 - a)))


# ---------------------------------------------------------------------------
# replicate sampling
# ---------------------------------------------------------------------------

def _grid(model, R, h, b=0.0):
    return GridSpec(model.d, R, h, b)


def _pair_functional(p, model, spec, R, h, tag, seed):
    grid = _grid(model, R, h)
    out = []
    for fs in sample_pair(model, grid, seed, replicate=(tag << 32) | p):
        out.append(evaluate_functional(fs, spec, None, h))
    return out


def functional_samples(model, spec, R, N, seed, h=0.25, tag=0, mapper=map):
    """``N`` independent values of ``Phi(Lambda_R)`` in replicate order."""
    work = partial(_pair_functional, model=model, spec=spec, R=R, h=h, tag=tag, seed=seed)
    vals = [v for pair in mapper(work, range((N + 1) // 2)) for v in pair]
    return np.array(vals[:N], dtype=float)


# ---------------------------------------------------------------------------
# LLN and variance
# ---------------------------------------------------------------------------

def lln_curve(model, spec, R_list, N, seed=0, h=0.25, mapper=map, samples=None):
    """Mean of ``Phi(Lambda_R) / R^d`` per ``R`` with normal CIs.

    Returns rows ``{R, mean, se, ci_lo, ci_hi, diff}`` where ``diff`` is
    ``|m_R - m_{R_prev}|`` (``nan`` for the first row).
    """
    if list(R_list) != sorted(R_list):
        raise ValueError("R list must be increasing")
    d = model.d
    rows = []
    prev = None
    for k, R in enumerate(R_list):
        x = samples[k] if samples is not None else functional_samples(
            model, spec, R, N, seed, h, k, mapper)
        m, se, (lo, hi) = mean_ci(x / R**d)
        rows.append({"R": R, "mean": m, "se": se, "ci_lo": lo, "ci_hi": hi,
                     "diff": abs(m - prev) if prev is not None else math.nan})
        prev = m
    return rows


def variance_curve(model, spec, R_list, N, seed=0, h=0.25, mapper=map, samples=None):
    """``Var[Phi(Lambda_R)] / R^d`` with chi-square CIs and a kurtosis-aware SE."""
    if N < 100:
        raise ValueError("variance estimates need at least 100 replicates")
    d = model.d
    rows = []
    prev = None
    for k, R in enumerate(R_list):
        x = samples[k] if samples is not None else functional_samples(
            model, spec, R, N, seed, h, k, mapper)
        s2, se, (lo, hi) = variance_ci(x)
        v = s2 / R**d
        rows.append({"R": R, "var": v, "se": se / R**d, "ci_lo": lo / R**d,
                     "ci_hi": hi / R**d, "diff": abs(v - prev) if prev is not None else math.nan})
        prev = v
    return rows


# ---------------------------------------------------------------------------
# CLT
# ---------------------------------------------------------------------------

@dataclass
class CltReport:
    R: list
    rows: list
    sigma: float
    eta: float
    eta_ci: tuple
    ks_band: float
    samples: Optional[list] = field(default=None, repr=False)


def _dkol_normal(x, mean, sd, R, d):
    z = (np.asarray(x) - mean) / R ** (d / 2)
    return kolmogorov_distance(z, lambda v: sst.norm.cdf(v, scale=sd))


def _slope(logR, logD):
    A = np.vstack([logR, np.ones_like(logR)]).T
    return float(np.linalg.lstsq(A, logD, rcond=None)[0][0])


def clt_suite(model, spec, R_list, N, seed=0, h=0.25, mapper=map, B=200, samples=None,
              keep_samples=False):
    """Kolmogorov distance of the self-normalized functional per ``R``.

    ``Phi_tilde_R = (Phi - mean_R) / R^{d/2}`` is compared with
    ``N(0, sigma^2)`` where ``sigma^2`` is the variance per unit volume at
    the largest ``R``. Intervals resample replicate indices jointly across
    ``R``; ``eta`` is minus the least-squares slope of ``log d_Kol``
    against ``log R``.
    """
    if N < 1000:
        raise ValueError("clt_suite needs N >= 1000")
    d = model.d
    X = [samples[k] if samples is not None else functional_samples(
        model, spec, R, N, seed, h, k, mapper) for k, R in enumerate(R_list)]
    X = [np.asarray(x, dtype=float) for x in X]
    Rmax = R_list[-1]

    def all_stats(idx):
        s = math.sqrt(X[-1][idx].var(ddof=1) / Rmax**d)
        if not s > 0:
            return np.full(len(R_list), np.nan)
        return np.array([_dkol_normal(x[idx], x[idx].mean(), s, R, d)
                         for x, R in zip(X, R_list)])

    full = np.arange(N)
    sigma = math.sqrt(X[-1].var(ddof=1) / Rmax**d)
    if not sigma > 1e-12:
        raise DegenerateVariance("variance at the largest R is zero")
    dk = all_stats(full)
    logR = np.log(np.asarray(R_list, dtype=float))
    reps, _ = bootstrap(N, all_stats, B=B, seed=seed)
    ok = np.all(np.isfinite(reps) & (reps > 0), axis=1)
    slopes = np.array([-_slope(logR, np.log(r)) for r in reps[ok]])
    eta = -_slope(logR, np.log(dk))
    eta_ci = (float(np.quantile(slopes, 0.025)), float(np.quantile(slopes, 0.975)))
    rows = []
    for k, R in enumerate(R_list):
        s2, _, (vlo, vhi) = variance_ci(X[k])
        m, _, (mlo, mhi) = mean_ci(X[k] / R**d)
        rows.append({"R": R, "mean": m, "mean_ci": (mlo, mhi),
                     "var": s2 / R**d, "var_ci": (vlo / R**d, vhi / R**d),
                     "dkol": float(dk[k]),
                     "dkol_ci": (float(np.quantile(reps[:, k], 0.025)),
                                 float(np.quantile(reps[:, k], 0.975)))})
    return CltReport(list(R_list), rows, sigma, eta, eta_ci, ks_critical(N, 0.01),
                     X if keep_samples else None)


# ---------------------------------------------------------------------------
# almost-sure CLT
# ---------------------------------------------------------------------------

def asclt_radii(R_max, h, r0=1.0, q=2 ** 0.25):
    """Geometric grid ``r_k = r0 q^k < R_max`` rounded to box sides on the grid."""
    K = int(round(math.log(R_max / r0) / math.log(q)))
    r = r0 * q ** np.arange(K)
    sides = np.maximum(2 * h, 2 * h * np.round(r / (2 * h)))
    return r, sides, math.log(q)


def asclt_average(phitilde, F, R_max, weight):
    """``(1 / log R_max) sum_k weight F(phitilde_k)``."""
    return float(np.sum(weight * F(np.asarray(phitilde, dtype=float))) / math.log(R_max))


def gauss_hermite_expectation(F, sigma, n=60):
    z, w = hermegauss(n)
    return float(np.sum(w * F(sigma * z)) / math.sqrt(2 * math.pi))


def _nested_values(fs, spec, sides, h):
    return np.array([evaluate_functional(fs, spec, fs.grid.box_slices(s), h) for s in sides])


def _tile_values(fs, spec, side, h, geom=None, max_tiles=4096):
    """Functional on the tiles of side ``side`` covering the grid.

    For count and bounded weights a component is counted by a tile exactly
    when its bounding box lies in the tile minus its boundary layer, so one
    labelling of the whole grid serves every tile.
    """
    n = fs.grid.n
    m = int(round(side / h))
    per = n // m
    d = fs.grid.d
    if geom is not None and spec.size_class is None and spec.phi != "euler":
        lo, hi = geom.bbox_lo, geom.bbox_hi
        tile = lo // m
        ok = np.all((tile == hi // m) & (lo - tile * m >= 1) & (hi - tile * m <= m - 2)
                    & (tile < per), axis=1)
        w = np.ones(geom.ncomp) if spec.phi == "count" else spec.weight_fn(geom.holes)
        flat = np.ravel_multi_index(tuple(tile[ok].T), (per,) * d) if ok.any() else []
        return np.bincount(flat, weights=w[ok], minlength=per**d).tolist()
    out = []
    for k, start in enumerate(np.ndindex(*([per] * d))):
        if k >= max_tiles:
            break
        D = tuple(slice(s * m, (s + 1) * m) for s in start)
        out.append(evaluate_functional(fs, spec, D, h))
    return out


def _calibration_pair(p, model, spec, R_max, sides, h, seed):
    grid = _grid(model, R_max, h)
    res = [[] for _ in sides]
    for fs in sample_pair(model, grid, seed, replicate=(Role.CALIBRATION << 40) | p):
        geom = None
        if spec.phi != "euler":
            geom = label_components(extract_excursion(fs, spec, h))
        for k, s in enumerate(sides):
            res[k].extend(_tile_values(fs, spec, s, h, geom))
    return res


def asclt_statistic(model, spec, R_max, F_list: Sequence[Callable], seed=0, h=0.25,
                    calib_pairs=2, q=2 ** 0.25, mapper=map):
    """Log-average of ``F(Phi_tilde_r)`` along nested boxes of one realization.

    Centering constants ``E[Phi(Lambda_r)]`` and ``sigma`` come from a
    calibration run that tiles independent fields of side ``R_max`` into
    boxes of each side ``r``; ``sigma^2`` is the tile variance per unit
    volume at the largest side with at least 16 tiles per field.

    Returns
    -------
    dict with ``values`` and ``targets`` (one per ``F``), ``sigma``,
    radii and the centered path.
    """
    d = model.d
    r, sides, w = asclt_radii(R_max, h, q=q)
    work = partial(_calibration_pair, model=model, spec=spec, R_max=R_max, sides=sides,
                   h=h, seed=seed)
    calib = [[] for _ in sides]
    for res in mapper(work, range(calib_pairs)):
        for k in range(len(sides)):
            calib[k].extend(res[k])
    means = np.array([np.mean(c) for c in calib])
    usable = [k for k, s in enumerate(sides) if (R_max / s) ** d >= 16]
    kv = usable[-1]
    sigma = math.sqrt(np.var(calib[kv], ddof=1) / sides[kv] ** d)
    fs = sample_pair(model, _grid(model, R_max, h), seed, replicate=0)[0]
    vals = _nested_values(fs, spec, sides, h)
    phit = (vals - means) / sides ** (d / 2)
    out = {"radii": r.tolist(), "sides": sides.tolist(), "phitilde": phit.tolist(),
           "sigma": sigma, "values": [], "targets": []}
    for F in F_list:
        out["values"].append(asclt_average(phit, F, R_max, w))
        out["targets"].append(gauss_hermite_expectation(F, sigma))
    return out


# ---------------------------------------------------------------------------
# arm events
# ---------------------------------------------------------------------------

def _arm_pair(p, model, level, R, h, tag, seed):
    grid = _grid(model, R + 4 * h, h)
    out = []
    for fs in sample_pair(model, grid, seed, replicate=(tag << 32) | p):
        one = one_arm_event(fs, level, np.zeros(model.d), R)
        trunc = truncated_arm_event(fs, level, np.zeros(model.d), R / 2)
        out.append((one, trunc))
    return out


def arm_decay_curve(model, level, R_list, N, seed=0, h=0.25, mapper=map):
    """Frequencies of one-arm and truncated-arm events with Wilson CIs.

    The one-arm event joins ``Lambda_1`` to the boundary of ``Lambda_R``;
    the truncated-arm event asks for a bounded component spanning from the
    unit ball to distance ``R / 2``.
    """
    rows = []
    for k, R in enumerate(R_list):
        work = partial(_arm_pair, model=model, level=level, R=R, h=h, tag=k, seed=seed)
        ev = [e for pair in mapper(work, range((N + 1) // 2)) for e in pair][:N]
        ones = sum(e[0] for e in ev)
        trs = sum(e[1] for e in ev)
        rows.append({"R": R, "N": N, "one_arm": ones / N, "one_arm_ci": wilson_interval(ones, N),
                     "truncated_arm": trs / N, "truncated_arm_ci": wilson_interval(trs, N)})
    return rows


# ---------------------------------------------------------------------------
# volume of the unbounded component
# ---------------------------------------------------------------------------

@dataclass
class VolumeReport:
    level: float
    theta: float
    theta_ci: tuple
    theta_fraction: Fraction
    lag0_cov: Fraction
    cov_table: np.ndarray
    cov_se: np.ndarray
    sigma2: float
    curve: list
    lil: np.ndarray
    lil_n: list
    lil_band: float
    cox_grimmett: list
    non_positive_covariance: bool
    warnings: list = field(default_factory=list)


def _block(E, m):
    # sum over m^d blocks of cells
    if m == 1:
        return E.astype(float)
    s = E.shape
    shp = []
    for n in s:
        shp += [n // m, m]
    return E[tuple(slice(0, (n // m) * m) for n in s)].reshape(shp).sum(
        axis=tuple(range(1, 2 * len(s), 2))).astype(float)


def _autocorr_sums(X, L):
    """``sum_y X(y) X(y + k)`` and pair counts for ``|k|_inf <= L``."""
    shape = X.shape
    full = [sfft.next_fast_len(n + L) for n in shape]
    FX = sfft.rfftn(X, full)
    ac = sfft.irfftn(FX * np.conj(FX), full)
    idx = [np.r_[0:L + 1, n - L:n] for n in full]
    ac = ac[np.ix_(*idx)]
    lags = [np.r_[0:L + 1, -L:0] for _ in shape]
    cnt = np.ones(ac.shape)
    for ax, (n, lg) in enumerate(zip(shape, lags)):
        sh = [1] * len(shape)
        sh[ax] = -1
        cnt = cnt * (n - np.abs(lg)).reshape(sh)
    return np.fft.fftshift(ac), np.fft.fftshift(cnt)


def _volume_run(p, model, level, R, h, b, lil_n, L, tag, seed):
    grid = GridSpec(model.d, R, h, b)
    out = []
    for fs in sample_pair(model, grid, seed, replicate=(tag << 32) | p):
        E = unbounded_indicator(fs, level, R, b_min=b)
        S = int(np.count_nonzero(E))
        ac, cnt = _autocorr_sums(E.astype(float), L)
        lil = []
        for n in lil_n:
            m = int(round(n / h))
            c = (E.shape[0] - m) // 2
            sl = tuple(slice(c, c + m) for _ in range(E.ndim))
            lil.append(np.count_nonzero(E[sl]) * h**model.d)
        out.append((S, E.size, np.rint(ac).astype(np.int64), cnt.astype(np.int64), lil))
    return out


def _cox_grimmett(table, se, lags_inf, k_list):
    rows = []
    for k in k_list:
        m = lags_inf >= k
        u = float(np.sum(np.abs(table[m])))
        u_se = float(np.sqrt(np.sum(se[m] ** 2)))
        rows.append({"k": k, "u": u, "se": u_se})
    return rows


def volume_suite(model, level, R_list, n_list, N, seed=0, h=0.5, b=None, L=None,
                 lil_R=None, k_list=(2, 4, 8), mapper=map, N_clt=None):
    """Law-of-large-numbers, CLT, LIL and covariance diagnostics for the unbounded volume.

    Cells have side ``h`` (``h = 1/2`` gives the half-unit cells ``v``
    directly). The indicator covariance table is accumulated from integer
    autocorrelation sums; ``sigma^2`` is its sum times ``h^d``. The
    Cox-Grimmett coefficient ``u(k)`` sums ``|Cov[V_0, V_w]|`` over lags
    with ``|w|_inf >= k`` half-unit cells. ``N`` runs feed the covariance
    table and LIL paths; the CLT curve uses ``N_clt`` (default ``N``).
    """
    d = model.d
    N_clt = N if N_clt is None else N_clt
    if b is None:
        b = 6.0 * model.correlation_length
        b = 2 * h * math.ceil(b / (2 * h))
    if L is None:
        L = int(round(6.0 / h))
    warnings = []
    if level >= 0:
        warnings.append("level outside the supercritical regime (needs level < 0)")
    cell_vol = h**d
    # covariance table and LIL runs on the largest window
    lil_R = lil_R or max(max(R_list), 2 * max(n_list))
    work = partial(_volume_run, model=model, level=level, R=lil_R, h=h, b=b, lil_n=list(n_list),
                   L=L, tag=len(R_list), seed=seed)
    runs = [r for pair in mapper(work, range((N + 1) // 2)) for r in pair][:N]
    S_tot = sum(r[0] for r in runs)
    M_tot = sum(r[1] for r in runs)
    theta_f = Fraction(S_tot, M_tot)
    theta = float(theta_f)
    # lag 0 from the same cells: mean(E*E) - theta^2 with E*E = E
    lag0 = theta_f - theta_f * theta_f
    per_run = np.array([r[2] / r[3] for r in runs])
    table = per_run.mean(axis=0) - theta**2
    center = tuple(L for _ in range(d))
    table[center] = float(lag0)
    cov_se = per_run.std(axis=0, ddof=1) / math.sqrt(N)
    sigma2 = float(table.sum() * cell_vol)
    nonpos = bool(np.any(table < -3 * cov_se))
    theta_ci = wilson_interval(S_tot, M_tot)
    # CLT curve
    curve = []
    for k, R in enumerate(R_list):
        wk = partial(_volume_run, model=model, level=level, R=R, h=h, b=b, lil_n=[], L=0,
                     tag=k, seed=seed)
        vol = np.array([r[0] * cell_vol for pair in mapper(wk, range((N_clt + 1) // 2))
                        for r in pair][:N_clt])
        s2, se, (lo, hi) = variance_ci(vol)
        # centred at the sample mean: theta * R^d with theta from the LIL runs
        # would carry that estimate's error times R^(d/2)
        z = (vol - vol.mean()) / R ** (d / 2)
        dk = kolmogorov_distance(z, lambda v: sst.norm.cdf(v, scale=math.sqrt(max(sigma2, 1e-300))))
        curve.append({"R": R, "var": s2 / R**d, "var_ci": (lo / R**d, hi / R**d), "dkol": dk})
    # LIL
    lil = []
    for r in runs:
        row = []
        for n, v in zip(n_list, r[4]):
            nd = n**d
            row.append((v - theta * nd) / math.sqrt(2 * nd * math.log(math.log(nd))))
        lil.append(row)
    lil = np.array(lil)
    band = 3 * math.sqrt(max(sigma2, 0.0)) * math.sqrt(d)
    # Cox-Grimmett on half-unit cells
    m = max(1, int(round(0.5 / h)))
    lags = np.indices(table.shape) - L
    linf = np.max(np.abs(lags), axis=0)
    vt = table * cell_vol**2
    vse = cov_se * cell_vol**2
    if m > 1:
        # coarse-cell covariance by summing fine lags within the block offsets
        vt, vse, linf = _coarsen_table(vt, vse, L, m)
    cg = _cox_grimmett(vt, vse, linf, k_list)
    return VolumeReport(level, theta, theta_ci, theta_f, lag0, table, cov_se, sigma2, curve,
                        lil, list(n_list), band, cg, nonpos, warnings)


def _coarsen_table(table, se, L, m):
    d = table.ndim
    Lc = L // m - 1
    out = np.zeros((2 * Lc + 1,) * d)
    var = np.zeros_like(out)
    for K in np.ndindex(*out.shape):
        Kc = np.array(K) - Lc
        acc = 0.0
        acc_v = 0.0
        for a in np.ndindex(*([m] * d)):
            for b_ in np.ndindex(*([m] * d)):
                lag = Kc * m + np.array(b_) - np.array(a) + L
                acc += table[tuple(lag)]
                acc_v += se[tuple(lag)] ** 2
        out[K] = acc
        var[K] = acc_v
    lags = np.indices(out.shape) - Lc
    return out, np.sqrt(var), np.max(np.abs(lags), axis=0)
