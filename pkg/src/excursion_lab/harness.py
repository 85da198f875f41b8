"""Configuration, scheduling and output writing for the experiment suites.

A run is fully described by one JSON document::

    {"suite": "lln", "seed": 7,
     "model": {"family": "BargmannFock", "d": 2, "params": {"scale": 1.0}},
     "functional": {"phi": "count", "level": 0.0},
     "scales": {"R": [32], "r": [4], "a": [1]},
     "params": {"R_list": [32, 64, 128], "N": 500, "h": 0.25}}

Command-line flags override ``seed``, ``workers`` and ``out``. The worker
count falls back to ``EXCURSION_LAB_WORKERS`` and then to the number of
CPUs. Every suite writes ``results.csv`` with rows
``(R, statistic, value, ci_lo, ci_hi)``, ``manifest.json`` and
``plot.svg``; ``check`` re-reads them and writes ``verdict.json``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from multiprocessing import get_context
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import BadScale, ConfigInvalid, MissingOutputs
from .fieldgen import GridSpec, sample_pair, write_field
from .models import covariance_eval, model_from_dict
from .pivotal import PivotalConfig, covariance_determinant, estimate_sigma2, quasi_association_check
from .stats import (Z95, arm_decay_curve, asclt_statistic, clt_suite, functional_samples,
                    lln_curve, mean_ci, variance_curve, volume_suite)
from .topology import (FunctionalSpec, critical_census, euler_characteristic_cubical,
                       evaluate_functional, extract_excursion, validate_scales)

__all__ = ["SUITES", "ExperimentConfig", "RunManifest", "load_config", "parse_config",
           "resolve_workers", "run", "check"]

SUITES = ("sample", "functional", "lln", "var", "clt", "asclt", "qclt-rate", "arm",
          "sigma2", "volume", "quasi")

MAPS = {
    "abs": np.abs,
    "identity": lambda x: np.asarray(x, dtype=float),
    "const": lambda x: np.ones_like(np.asarray(x, dtype=float)),
    "clip1": lambda x: np.clip(x, -1.0, 1.0),
    "zero": lambda x: np.zeros_like(np.asarray(x, dtype=float)),
}

_SEED_LIMIT = 1 << 64


@dataclass(frozen=True)
class ExperimentConfig:
    suite: str
    model: dict
    functional: dict = field(default_factory=lambda: {"phi": "count", "level": 0.0})
    scales: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    seed: int = 0
    workers: Optional[int] = None
    out: str = "runs/out"

    def canonical(self):
        """Result-determining fields as canonical JSON (no workers or out)."""
        d = asdict(self)
        d.pop("workers")
        d.pop("out")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def build_model(self):
        return model_from_dict(self.model)

    def build_spec(self):
        return FunctionalSpec(**self.functional)


@dataclass
class RunManifest:
    suite: str
    config: dict
    config_hash: str
    version: str
    outputs: dict
    seeds: dict
    timing: dict
    warnings: list

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _validate_scales(scales):
    if not scales:
        return
    lists = {k: scales.get(k) for k in ("R", "r", "a")}
    missing = [k for k, v in lists.items() if v is None]
    if missing:
        raise ConfigInvalid(f"scales missing {','.join(missing)}")
    R, r, a = (list(np.atleast_1d(lists[k])) for k in ("R", "r", "a"))
    if not len(R) == len(r) == len(a):
        raise ConfigInvalid("scales R, r, a must have equal lengths")
    h = scales.get("h")
    for Ri, ri, ai in zip(R, r, a):
        try:
            validate_scales(Ri, ri, ai, h)
        except BadScale as exc:
            msg = str(exc)
            if msg.startswith("r/a"):
                raise ConfigInvalid(f"r/a not even: R={Ri}, r={ri}, a={ai} ({msg})") from exc
            if msg.startswith("R/(r+4a)"):
                raise ConfigInvalid(f"R/(r+4a) not even: R={Ri}, r={ri}, a={ai} ({msg})") from exc
            raise ConfigInvalid(msg) from exc


def parse_config(doc, seed=None, workers=None, out=None):
    """Validate a config mapping; flags given here override its fields."""
    if not isinstance(doc, dict):
        raise ConfigInvalid("config must be a JSON object")
    unknown = set(doc) - {"suite", "model", "functional", "scales", "params", "seed",
                          "workers", "out"}
    if unknown:
        raise ConfigInvalid(f"unknown config fields: {sorted(unknown)}")
    suite = doc.get("suite")
    if suite not in SUITES:
        raise ConfigInvalid(f"suite must be one of {SUITES}, got {suite!r}")
    if "model" not in doc:
        raise ConfigInvalid("model descriptor missing")
    try:
        model_from_dict(doc["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"model invalid: {exc}") from exc
    functional = doc.get("functional", {"phi": "count", "level": 0.0})
    try:
        FunctionalSpec(**functional)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"functional invalid: {exc}") from exc
    _validate_scales(doc.get("scales", {}))
    s = doc.get("seed", 0) if seed is None else seed
    if not isinstance(s, int) or isinstance(s, bool) or not 0 <= s < _SEED_LIMIT:
        raise ConfigInvalid("seed must be an integer in [0, 2**64)")
    w = doc.get("workers") if workers is None else workers
    if w is not None and (not isinstance(w, int) or w < 1):
        raise ConfigInvalid("workers must be a positive integer")
    params = doc.get("params", {})
    if not isinstance(params, dict):
        raise ConfigInvalid("params must be an object")
    _check_params(suite, params)
    return ExperimentConfig(suite, dict(doc["model"]), dict(functional),
                            dict(doc.get("scales", {})), dict(params), int(s), w,
                            str(out if out is not None else doc.get("out", "runs/out")))


def _check_params(suite, p):
    def positive(name):
        if name in p and not (isinstance(p[name], (int, float)) and p[name] > 0):
            raise ConfigInvalid(f"params.{name} must be positive")

    for name in ("N", "N_clt", "h", "R", "R_max", "L", "B"):
        positive(name)
    for name in ("R_list", "n_list", "separations"):
        if name in p:
            v = p[name]
            if not isinstance(v, list) or not v:
                raise ConfigInvalid(f"params.{name} must be a nonempty list")
            if name == "R_list" and v != sorted(v):
                raise ConfigInvalid("params.R_list must be increasing")
    if suite in ("clt", "qclt-rate") and p.get("N", 1000) < 1000:
        raise ConfigInvalid("clt needs params.N >= 1000")
    if suite == "var" and p.get("N", 100) < 100:
        raise ConfigInvalid("var needs params.N >= 100")
    for name in ("F", "G"):
        for f in np.atleast_1d(p.get(name, [])):
            if f not in MAPS:
                raise ConfigInvalid(f"params.{name}: unknown map {f!r}")


def load_config(path, seed=None, workers=None, out=None):
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"config is not valid JSON: {exc}") from exc
    return parse_config(doc, seed, workers, out)


def resolve_workers(flag=None, config=None):
    """Flag, then config, then ``EXCURSION_LAB_WORKERS``, then CPU count."""
    for v in (flag, config):
        if v is not None:
            return int(v)
    env = os.environ.get("EXCURSION_LAB_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigInvalid("EXCURSION_LAB_WORKERS must be an integer") from exc
        if n < 1:
            raise ConfigInvalid("EXCURSION_LAB_WORKERS must be positive")
        return n
    return os.cpu_count() or 1


@contextmanager
def worker_map(workers):
    """Order-preserving ``map``; a process pool when ``workers > 1``."""
    if workers <= 1:
        yield map
        return
    with get_context("spawn").Pool(workers) as pool:
        yield lambda fn, it: pool.imap(fn, it, chunksize=1)


# ---------------------------------------------------------------------------
# output writers
# ---------------------------------------------------------------------------

def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return repr(x) if math.isfinite(x) else ("nan" if math.isnan(x) else ("inf" if x > 0 else "-inf"))


def csv_text(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["R", "statistic", "value", "ci_lo", "ci_hi"])
    for R, stat, v, lo, hi in rows:
        w.writerow([_fmt(R), stat, _fmt(v), _fmt(lo), _fmt(hi)])
    return buf.getvalue()


def read_csv(path):
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        return [{"R": float(row["R"]), "statistic": row["statistic"],
                 "value": float(row["value"]), "ci_lo": float(row["ci_lo"]),
                 "ci_hi": float(row["ci_hi"])} for row in r]


def svg_plot(rows, title, loglog=False, width=480, height=320):
    """Standalone SVG line plot: one polyline per statistic against ``R``."""
    series = {}
    for R, stat, v, lo, hi in rows:
        if isinstance(v, (int, float)) and math.isfinite(v) and (not loglog or (R > 0 and v > 0)):
            series.setdefault(stat, []).append((float(R), float(v)))
    pad = 40
    tx = (lambda x: math.log10(x)) if loglog else (lambda x: x)
    pts = [(tx(x), tx(y)) for s in series.values() for x, y in s]
    out = ['<?xml version="1.0" encoding="UTF-8"?>',
           f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" '
           f'height="{height}" viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2}" y="16" text-anchor="middle" font-size="12">{_esc(title)}</text>']
    if pts:
        xs, ys = zip(*pts)
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(ys), max(ys)
        x1 = x1 if x1 > x0 else x0 + 1
        y1 = y1 if y1 > y0 else y0 + 1

        def px(x):
            return pad + (tx(x) - x0) / (x1 - x0) * (width - 2 * pad)

        def py(y):
            return height - pad - (tx(y) - y0) / (y1 - y0) * (height - 2 * pad)

        out.append(f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
                   f'y2="{height - pad}" stroke="black"/>')
        out.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>')
        colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
        for k, (name, s) in enumerate(sorted(series.items())):
            c = colors[k % len(colors)]
            p = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in s)
            out.append(f'<polyline fill="none" stroke="{c}" points="{p}"/>')
            out.append(f'<text x="{width - pad}" y="{pad + 12 * k}" text-anchor="end" '
                       f'font-size="10" fill="{c}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

def _ci(m, se):
    return m - Z95 * se, m + Z95 * se


def _suite_sample(cfg, model, spec, p, mapper, out, warnings):
    h = p.get("h", 0.25)
    R = p.get("R", 16.0)
    N = p.get("N", 200)
    lags = p.get("lags", [[0.0] * model.d, [1.0] + [0.0] * (model.d - 1),
                          [2.0] + [0.0] * (model.d - 1)])
    grid = GridSpec(model.d, R, h)
    steps = [tuple(int(round(c / h)) for c in lag) for lag in lags]
    est = [[] for _ in lags]
    for k in range((N + 1) // 2):
        for j, fs in enumerate(sample_pair(model, grid, cfg.seed, replicate=k)):
            if 2 * k + j >= N:
                break
            if k == 0 and j == 0:
                write_field(out / "field.bin", fs)
                if fs.meta.get("clipped_mass", 0) > 1e-10:
                    warnings.append(f"PSD clipping mass {fs.meta['clipped_mass']:.3g}")
            v = fs.values
            for i, st in enumerate(steps):
                a = v[tuple(slice(0, n - s) for n, s in zip(v.shape, st))]
                b = v[tuple(slice(s, n) for n, s in zip(v.shape, st))]
                est[i].append(float(np.mean(a * b)))
    rows = []
    for lag, e in zip(lags, est):
        m, se, (lo, hi) = mean_ci(e)
        tag = "x".join(_fmt(c) for c in lag)
        rows.append((R, f"cov_lag_{tag}", m, lo, hi))
        o = float(covariance_eval(model, np.asarray(lag, dtype=float)))
        rows.append((R, f"oracle_lag_{tag}", o, o, o))
    return rows, {"field": "field.bin"}


def _suite_functional(cfg, model, spec, p, mapper, out, warnings):
    h = p.get("h", 0.25)
    R = p.get("R", 16.0)
    N = p.get("N", 100)
    # two cells of margin so the half-open EC of Lambda_R sees its upper faces
    grid = GridSpec(model.d, R + 4 * h, h)
    D = grid.box_slices(R)
    rows = []
    vals = []
    for k in range((N + 1) // 2):
        for j, fs in enumerate(sample_pair(model, grid, cfg.seed, replicate=k)):
            i = 2 * k + j
            if i >= N:
                break
            phi = evaluate_functional(fs, spec, D, h)
            nbar = critical_census(fs, D).nbar
            bound = spec.lipschitz * nbar
            if spec.phi == "euler":
                # interior-corrected: cells owned by Lambda_R in the whole-grid complex
                vals.append(euler_characteristic_cubical(extract_excursion(fs, spec, h), D,
                                                         "half-open"))
            else:
                vals.append(phi)
            rows.append((i, "phi", phi, phi, phi))
            rows.append((i, "lip_nbar", bound, bound, bound))
    m, se, (lo, hi) = mean_ci(np.asarray(vals) / R**model.d)
    rows.append((R, "density", m, lo, hi))
    return rows, {}


def _samples_for(cfg, model, spec, p, mapper):
    h = p.get("h", 0.25)
    return [functional_samples(model, spec, R, p.get("N", 500), cfg.seed, h, k, mapper)
            for k, R in enumerate(p.get("R_list", [32, 64, 128]))]


def _suite_lln(cfg, model, spec, p, mapper, out, warnings):
    R_list = p.get("R_list", [32, 64, 128])
    res = lln_curve(model, spec, R_list, p.get("N", 500), cfg.seed, p.get("h", 0.25), mapper)
    rows = [(r["R"], "mean", r["mean"], r["ci_lo"], r["ci_hi"]) for r in res]
    rows += [(r["R"], "diff", r["diff"], r["diff"], r["diff"]) for r in res[1:]]
    return rows, {}


def _pivotal_cfg(spec, p):
    keys = ("rho_max", "n_s", "n_r", "n_angle", "grade", "t_cap", "t_rule", "mode", "draws",
            "h", "R_stab")
    kw = {k: p[k] for k in keys if k in p}
    return PivotalConfig(level=spec.level, spec=spec, **kw)


def _suite_var(cfg, model, spec, p, mapper, out, warnings):
    R_list = p.get("R_list", [64, 128, 256])
    res = variance_curve(model, spec, R_list, p.get("N", 500), cfg.seed, p.get("h", 0.25),
                         mapper)
    rows = [(r["R"], "var", r["var"], r["var"] - Z95 * r["se"], r["var"] + Z95 * r["se"])
            for r in res]
    if p.get("compare_sigma2", False):
        piv = estimate_sigma2(model, _pivotal_cfg(spec, p.get("pivotal", {})), cfg.seed)
        rows.append((R_list[-1], "sigma2", piv["sigma2"], *_ci(piv["sigma2"], piv["se"])))
        if piv.get("dropped_nodes"):
            warnings.append(f"dropped pivotal nodes: {piv['dropped_nodes']}")
    return rows, {}


def _suite_clt(cfg, model, spec, p, mapper, out, warnings):
    R_list = p.get("R_list", [24, 48, 96])
    rep = clt_suite(model, spec, R_list, p.get("N", 2000), cfg.seed, p.get("h", 0.25), mapper,
                    B=p.get("B", 200))
    rows = []
    for r in rep.rows:
        rows.append((r["R"], "dkol", r["dkol"], *r["dkol_ci"]))
        rows.append((r["R"], "var", r["var"], *r["var_ci"]))
        rows.append((r["R"], "mean", r["mean"], *r["mean_ci"]))
    rows.append((R_list[-1], "ks_band_1pct", rep.ks_band, rep.ks_band, rep.ks_band))
    rows.append((R_list[-1], "sigma", rep.sigma, rep.sigma, rep.sigma))
    rows.append((R_list[-1], "eta", rep.eta, *rep.eta_ci))
    return rows, {}


def _suite_asclt(cfg, model, spec, p, mapper, out, warnings):
    names = list(np.atleast_1d(p.get("F", ["abs"])))
    n_seeds = p.get("seeds", 1)
    R_max = p.get("R_max", 256)
    rows = []
    for s in range(n_seeds):
        res = asclt_statistic(model, spec, R_max, [MAPS[n] for n in names],
                              (cfg.seed + s) % _SEED_LIMIT, p.get("h", 0.25),
                              p.get("calib_pairs", 2), mapper=mapper)
        for n, v, t in zip(names, res["values"], res["targets"]):
            rows.append((s, f"asclt_{n}", v, v, v))
            rows.append((s, f"target_{n}", t, t, t))
    return rows, {}


def _suite_arm(cfg, model, spec, p, mapper, out, warnings):
    res = arm_decay_curve(model, spec.level, p.get("R_list", [8, 16, 32]), p.get("N", 4000),
                          cfg.seed, p.get("h", 0.25), mapper)
    rows = []
    for r in res:
        rows.append((r["R"], "one_arm", r["one_arm"], *r["one_arm_ci"]))
        rows.append((r["R"], "truncated_arm", r["truncated_arm"], *r["truncated_arm_ci"]))
    return rows, {}


def _suite_sigma2(cfg, model, spec, p, mapper, out, warnings):
    res = estimate_sigma2(model, _pivotal_cfg(spec, p), cfg.seed)
    rows = [(0, "sigma2", res["sigma2"], *_ci(res["sigma2"], res["se"]))]
    for k, v in sorted(res.get("truncation_sensitivity", {}).items()):
        rows.append((0, f"sensitivity_{k}", v, v, v))
    if res.get("dropped_nodes"):
        warnings.append(f"dropped pivotal nodes: {res['dropped_nodes']}")
    if res.get("not_stabilized"):
        warnings.append(f"NotStabilized draws: {res['not_stabilized']}")
    for sep in p.get("probe_separations", [0.5, 2.0]):
        y = np.zeros(model.d)
        y[0] = sep
        for t in p.get("probe_t", [0.0, 0.5, 0.9, 0.99]):
            v = covariance_determinant(model, y, np.zeros(model.d), t)
            rows.append((sep, f"det_t{_fmt(t)}", v, v, v))
    (out / "sigma2.json").write_text(json.dumps(
        {k: res.get(k) for k in ("sigma2", "se", "nodes", "dropped_nodes",
                                 "truncation_sensitivity")}, sort_keys=True, indent=2))
    return rows, {"sigma2": "sigma2.json"}


def _suite_volume(cfg, model, spec, p, mapper, out, warnings):
    rep = volume_suite(model, spec.level, p.get("R_list", [32, 64, 128]),
                       p.get("n_list", [8, 16, 32, 64]), p.get("N", 100), cfg.seed,
                       p.get("h", 0.5), mapper=mapper, N_clt=p.get("N_clt"))
    warnings.extend(rep.warnings)
    lo, hi = rep.theta_ci
    rows = [(0, "theta", rep.theta, lo, hi),
            (0, "lag0_cov", float(rep.lag0_cov), float(rep.lag0_cov), float(rep.lag0_cov)),
            (0, "theta_1m_theta", float(rep.theta_fraction * (1 - rep.theta_fraction)),
             0.0, 0.0),
            (0, "sigma2", rep.sigma2, rep.sigma2, rep.sigma2),
            (0, "min_cov_over_se", float(np.min(rep.cov_table / np.where(rep.cov_se > 0,
                                                                         rep.cov_se, np.inf))),
             0.0, 0.0)]
    for c in rep.curve:
        rows.append((c["R"], "var", c["var"], *c["var_ci"]))
        rows.append((c["R"], "dkol", c["dkol"], c["dkol"], c["dkol"]))
    inside = np.max(np.abs(rep.lil), axis=1) <= rep.lil_band
    rows.append((max(rep.lil_n), "lil_fraction", float(inside.mean()), 0.0, 0.0))
    rows.append((max(rep.lil_n), "lil_band", rep.lil_band, rep.lil_band, rep.lil_band))
    for c in rep.cox_grimmett:
        rows.append((c["k"], "cox_grimmett_u", c["u"], c["u"] - Z95 * c["se"],
                     c["u"] + Z95 * c["se"]))
    if rep.non_positive_covariance:
        warnings.append("NonPositiveCovariance")
    return rows, {}


def _suite_quasi(cfg, model, spec, p, mapper, out, warnings):
    F = MAPS[p.get("F", "identity")]
    G = MAPS[p.get("G", "identity")]
    res = quasi_association_check(model, spec, p.get("L", 4.0), p.get("separations", [0, 4, 8, 16]),
                                  F, G, p.get("N", 1000), cfg.seed, p.get("h", 0.25))
    rows = []
    for r in res:
        rows.append((r["separation"], "abs_cov", r["abs_cov"], *_ci(r["abs_cov"], r["se"])))
        rows.append((r["separation"], "bound", r["bound"], r["bound"], r["bound"]))
        rows.append((r["separation"], "ratio", r["ratio"], r["ratio"], r["ratio"]))
    return rows, {}


_DISPATCH = {
    "sample": _suite_sample, "functional": _suite_functional, "lln": _suite_lln,
    "var": _suite_var, "clt": _suite_clt, "qclt-rate": _suite_clt, "asclt": _suite_asclt,
    "arm": _suite_arm, "sigma2": _suite_sigma2, "volume": _suite_volume, "quasi": _suite_quasi,
}

_LOGLOG = {"clt", "qclt-rate", "arm", "quasi"}


def run(cfg: ExperimentConfig) -> RunManifest:
    """Run one suite and write its CSV, SVG and manifest under ``cfg.out``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model = cfg.build_model()
    spec = cfg.build_spec()
    warnings = []
    workers = resolve_workers(None, cfg.workers)
    t0 = time.perf_counter()
    with worker_map(workers) as mapper:
        rows, extra = _DISPATCH[cfg.suite](cfg, model, spec, cfg.params, mapper, out, warnings)
    wall = time.perf_counter() - t0
    (out / "results.csv").write_text(csv_text(rows), newline="")
    (out / "plot.svg").write_text(svg_plot(rows, f"{cfg.suite} ({model.model_id})",
                                           loglog=cfg.suite in _LOGLOG))
    outputs = {"csv": "results.csv", "svg": "plot.svg", **extra}
    man = RunManifest(cfg.suite, json.loads(cfg.canonical()), cfg.config_hash, __version__,
                      outputs, {"master": cfg.seed}, {"wall_seconds": wall, "workers": workers},
                      warnings)
    (out / "manifest.json").write_text(man.to_json())
    return man


# ---------------------------------------------------------------------------
# acceptance checks on written outputs
# ---------------------------------------------------------------------------

def _se(row):
    return (row["ci_hi"] - row["ci_lo"]) / (2 * Z95)


def _by(rows, stat):
    return [r for r in rows if r["statistic"] == stat]


def _check_sample(rows, cfg):
    ok = True
    details = []
    for r in rows:
        if r["statistic"].startswith("cov_lag_"):
            tag = r["statistic"][len("cov_lag_"):]
            o = _by(rows, f"oracle_lag_{tag}")[0]["value"]
            se = _se(r)
            good = abs(r["value"] - o) <= 4 * se
            ok &= good
            details.append(f"lag {tag}: {r['value']:.5f} vs {o:.5f} (4SE={4 * se:.2g})")
    return [("1", "sampler fidelity", ok, "; ".join(details))]


def _check_functional(rows, cfg):
    phi = _by(rows, "phi")
    bound = _by(rows, "lip_nbar")
    ok = all(abs(a["value"]) <= b["value"] + 1e-9 for a, b in zip(phi, bound))
    out = [("4", "pathwise bound", ok, f"{len(phi)} samples")]
    fn = cfg["functional"]
    mdl = cfg["model"]
    if fn.get("phi") == "euler" and mdl.get("family") == "BargmannFock" and mdl.get("d") == 2:
        lvl = fn.get("level", 0.0)
        lam = 1.0 / mdl.get("params", {}).get("scale", 1.0) ** 2
        gkf = (2 * math.pi) ** -1.5 * lam * lvl * math.exp(-lvl * lvl / 2)
        m = _by(rows, "density")[0]["value"]
        ok2 = abs(m - gkf) <= 0.1 * abs(gkf)
        out.append(("2", "Euler characteristic density", ok2, f"{m:.5f} vs {gkf:.5f}"))
    return out


def _check_lln(rows, cfg):
    means = _by(rows, "mean")
    diffs = [r["value"] for r in _by(rows, "diff")]
    dec = all(b < a for a, b in zip(diffs, diffs[1:]))
    a, b = means[-2], means[-1]
    overlap = a["ci_lo"] <= b["ci_hi"] and b["ci_lo"] <= a["ci_hi"]
    return [("5", "LLN", dec and overlap, f"diffs={diffs}, last CIs overlap={overlap}")]


def _check_var(rows, cfg):
    s = _by(rows, "sigma2")
    if not s:
        return []
    v = _by(rows, "var")[-1]
    se = math.hypot(_se(v), _se(s[0]))
    ok = abs(v["value"] - s[0]["value"]) <= 5 * se
    return [("6", "variance cross-check", ok, f"{v['value']:.5f} vs {s[0]['value']:.5f}")]


def _check_clt(rows, cfg):
    dk = _by(rows, "dkol")
    band = _by(rows, "ks_band_1pct")[0]["value"]
    eta = _by(rows, "eta")[0]
    dec = dk[-1]["ci_hi"] < dk[0]["ci_lo"]
    ks = dk[-1]["value"] < band
    pos = eta["value"] > 0 and eta["ci_lo"] > 0
    return [("7", "CLT", dec and ks and pos,
             f"dkol {dk[0]['value']:.4f}->{dk[-1]['value']:.4f}, band {band:.4f}, "
             f"eta {eta['value']:.3f} [{eta['ci_lo']:.3f},{eta['ci_hi']:.3f}]")]


def _check_asclt(rows, cfg):
    vals = _by(rows, "asclt_abs")
    tg = _by(rows, "target_abs")
    if not vals:
        return []
    hits = sum(abs(v["value"] - t["value"]) <= 0.15 for v, t in zip(vals, tg))
    need = math.ceil(0.8 * len(vals))
    return [("8", "ASCLT", hits >= need, f"{hits}/{len(vals)} within 0.15")]


def _check_arm(rows, cfg):
    arm = {r["R"]: r for r in _by(rows, "one_arm")}
    if 8 not in arm or 32 not in arm:
        return []
    a, b = arm[8], arm[32]
    ok = b["value"] < 0.5 * a["value"] and b["ci_hi"] < a["ci_lo"]
    return [("9", "arm decay", ok, f"P(8)={a['value']:.4f}, P(32)={b['value']:.4f}")]


def _check_volume(rows, cfg):
    assoc = _by(rows, "min_cov_over_se")[0]["value"] >= -3
    lag0 = _by(rows, "lag0_cov")[0]["value"] == _by(rows, "theta_1m_theta")[0]["value"]
    dk = [r["value"] for r in _by(rows, "dkol")]
    dec = dk[-1] < dk[0]
    lil = _by(rows, "lil_fraction")[0]["value"] >= 0.95
    u = _by(rows, "cox_grimmett_u")
    mono = all(b["value"] <= a["ci_hi"] for a, b in zip(u, u[1:]))
    return [("10", "volume suite", assoc and lag0 and dec and lil and mono,
             f"assoc={assoc} lag0={lag0} dkol_dec={dec} lil={lil} u_mono={mono}")]


def _check_sigma2(rows, cfg):
    out = []
    seps = sorted({r["R"] for r in rows if r["statistic"].startswith("det_t")})
    ok = True
    for s in seps:
        vals = [r["value"] for r in rows if r["R"] == s and r["statistic"].startswith("det_t")]
        ok &= all(v > 0 for v in vals) and all(b < a for a, b in zip(vals, vals[1:]))
    if seps:
        out.append(("12", "determinant probe", ok, f"separations {seps}"))
    return out


def _check_quasi(rows, cfg):
    cov = _by(rows, "abs_cov")
    bound = [r["value"] for r in _by(rows, "bound")]
    ratio = [r["value"] for r in _by(rows, "ratio")]
    # the envelope vanishes like exp(-s^2/2) while the Monte Carlo noise
    # does not, so the ratio is taken on the part of |cov| above 3 SE
    resolved = [max(c["value"] - 3 * _se(c), 0.0) / b for c, b in zip(cov, bound)]
    bounded = resolved[0] > 0 and all(r <= 10 * resolved[0] for r in resolved)
    gap = cov[0]["value"] - cov[-1]["value"]
    num = gap > 3 * math.hypot(_se(cov[0]), _se(cov[-1]))
    den = all(b < a for a, b in zip(bound, bound[1:]))
    return [("13", "quasi-association", bounded and num and den,
             f"resolved ratios={['%.3g' % r for r in resolved]}, "
             f"raw ratios={['%.3g' % r for r in ratio]}, cov decay={num}, bound decay={den}")]


_CHECKS = {
    "sample": _check_sample, "functional": _check_functional, "lln": _check_lln,
    "var": _check_var, "clt": _check_clt, "qclt-rate": _check_clt, "asclt": _check_asclt,
    "arm": _check_arm, "volume": _check_volume, "sigma2": _check_sigma2, "quasi": _check_quasi,
}


def check(manifest, out_dir):
    """Evaluate the applicable acceptance criteria; writes ``verdict.json``."""
    out = Path(out_dir)
    if isinstance(manifest, (str, Path)):
        p = Path(manifest)
        if not p.exists():
            raise MissingOutputs(f"manifest {p} not found")
        manifest = RunManifest.from_json(p.read_text())
    path = out / manifest.outputs.get("csv", "results.csv")
    if not path.exists():
        raise MissingOutputs(f"results file {path} not found")
    rows = read_csv(path)
    results = _CHECKS[manifest.suite](rows, manifest.config)
    verdict = {"suite": manifest.suite, "config_hash": manifest.config_hash,
               "criteria": [{"id": i, "name": n, "pass": bool(ok), "detail": det}
                            for i, n, ok, det in results]}
    verdict["all_pass"] = all(c["pass"] for c in verdict["criteria"])
    (out / "verdict.json").write_text(json.dumps(verdict, sort_keys=True, indent=2))
    return verdict
