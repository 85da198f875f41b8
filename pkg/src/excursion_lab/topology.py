"""Topological functionals of excursion and level sets on grids.

Sets are modelled as unions of closed grid cells. Foreground cells are
8-connected in 2D (26 in 3D) and background cells 4-connected (6), the
pairing under which the closed-cell union and its complement have
consistent topology. A sub-box ``D`` is a tuple of slices; its discrete
boundary is the outermost cell layer.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .errors import (BadScale, BufferTooSmall, DomainOutsideGrid,
                     LevelAtCriticalValue, NotStabilized)

__all__ = [
    "FunctionalSpec",
    "ExcursionGeometry",
    "DecompositionResult",
    "CriticalCensus",
    "extract_excursion",
    "label_components",
    "component_count",
    "bounded_functional",
    "evaluate_functional",
    "cubical_cells",
    "euler_from_cells",
    "intersect_cells",
    "euler_characteristic_cubical",
    "upper_star_increments",
    "euler_characteristic_morse",
    "critical_census",
    "split_by_a_planes",
    "validate_scales",
    "multiscale_decompose",
    "one_arm_event",
    "truncated_arm_event",
    "unbounded_indicator",
    "unbounded_volume",
    "topological_derivative",
    "BOUNDED_WEIGHTS",
]

TIE_TOL = 1e-12


# ---------------------------------------------------------------------------
# functional specification
# ---------------------------------------------------------------------------

def _phi_one_hole(holes):
    return (np.asarray(holes) == 1).astype(float)


def _phi_simply_connected(holes):
    return (np.asarray(holes) == 0).astype(float)


def _phi_zero(holes):
    return np.zeros(np.shape(holes))


def _phi_one(holes):
    return np.ones(np.shape(holes))


# name -> (map from hole counts to weights, sup-norm)
BOUNDED_WEIGHTS: dict[str, tuple[Callable, float]] = {
    "count": (_phi_one, 1.0),
    "one_hole": (_phi_one_hole, 1.0),
    "simply_connected": (_phi_simply_connected, 1.0),
    "zero": (_phi_zero, 0.0),
}


@dataclass(frozen=True)
class FunctionalSpec:
    """Which functional to evaluate.

    Parameters
    ----------
    set_type : {"excursion", "level"}
    level : float
    phi : {"count", "bounded", "euler"}
    weight : str
        Key of ``BOUNDED_WEIGHTS`` when ``phi == "bounded"``.
    size_class : {None, "large", "small"}
        Restrict to components that do (``"large"``) or do not
        (``"small"``) meet two parallel ``a``-planes.
    a : float
        Plane spacing for ``size_class``.
    halfwidth : float, optional
        Value half-width of the level shell. By default a cell belongs to
        the shell when ``|f - level| <= (h/2) |grad f|``.
    """

    set_type: str = "excursion"
    level: float = 0.0
    phi: str = "count"
    weight: str = "count"
    size_class: Optional[str] = None
    a: float = 0.0
    halfwidth: Optional[float] = None

    def __post_init__(self):
        if self.set_type not in ("excursion", "level"):
            raise ValueError("set_type must be 'excursion' or 'level'")
        if self.phi not in ("count", "bounded", "euler"):
            raise ValueError("phi must be 'count', 'bounded' or 'euler'")
        if self.phi == "bounded" and self.weight not in BOUNDED_WEIGHTS:
            raise ValueError(f"unknown bounded weight {self.weight!r}")
        if not np.isfinite(self.level):
            raise ValueError("level must be finite")
        if self.size_class not in (None, "large", "small"):
            raise ValueError("size_class must be None, 'large' or 'small'")

    @property
    def weight_fn(self):
        return BOUNDED_WEIGHTS["count" if self.phi == "count" else self.weight][0]

    @property
    def lipschitz(self):
        """Declared Lipschitz constant: 3 sup|phi|, or 1 for the EC."""
        if self.phi == "euler":
            return 1.0
        return 3.0 * BOUNDED_WEIGHTS["count" if self.phi == "count" else self.weight][1]

    def to_dict(self):
        return {k: getattr(self, k) for k in ("set_type", "level", "phi", "weight",
                                              "size_class", "a", "halfwidth")}


def _values(fs):
    return fs.values if hasattr(fs, "values") else np.asarray(fs, dtype=float)


def extract_excursion(fs, spec, h=None):
    """Boolean foreground grid of ``{f >= level}`` or of the level shell."""
    v = _values(fs)
    if spec.set_type == "excursion":
        return v >= spec.level
    if spec.halfwidth is not None:
        return np.abs(v - spec.level) <= spec.halfwidth
    if h is None:
        h = fs.grid.h
    grads = np.gradient(v, h) if v.ndim > 1 else [np.gradient(v, h)]
    gnorm = np.sqrt(sum(g * g for g in grads))
    return np.abs(v - spec.level) <= 0.5 * h * gnorm


# ---------------------------------------------------------------------------
# labelling and component tables
# ---------------------------------------------------------------------------

def _structure(d, connectivity):
    if connectivity == "full":
        return np.ones((3,) * d, dtype=bool)
    if connectivity == "face":
        return ndimage.generate_binary_structure(d, 1)
    raise ValueError("connectivity must be 'full' or 'face'")


def _cell_label_arrays(lab):
    """Component id of every lattice cell of the closed-cell union.

    Returns ``{tau: array}`` where ``tau[i] == 1`` means the cell spans an
    interval along axis ``i`` and ``0`` means it sits on a lattice line.
    Under full connectivity a cell touched by foreground meets only one
    component, so the maximum over adjacent labels identifies it.
    """
    d = lab.ndim
    out = {}
    for tau in product((0, 1), repeat=d):
        arr = lab
        for ax in range(d):
            if tau[ax] == 0:
                pad = [(0, 0)] * arr.ndim
                pad[ax] = (1, 1)
                p = np.pad(arr, pad)
                lo = [slice(None)] * arr.ndim
                hi = [slice(None)] * arr.ndim
                lo[ax] = slice(0, -1)
                hi[ax] = slice(1, None)
                arr = np.maximum(p[tuple(lo)], p[tuple(hi)])
        out[tau] = arr
    return out


@dataclass(frozen=True, eq=False)
class ExcursionGeometry:
    """Labelled components of a binary grid.

    ``bbox_lo``/``bbox_hi`` are inclusive cell indices of shape
    ``(ncomp, d)``; row ``k`` describes label ``k + 1``.
    """

    labels: np.ndarray
    ncomp: int
    cells: np.ndarray
    bbox_lo: np.ndarray
    bbox_hi: np.ndarray
    touches_outer: np.ndarray
    holes: Optional[np.ndarray]
    connectivity: str = "full"

    def touches_faces(self, D=None):
        """Per component, flags for the faces ``(axis, side)`` of ``D``."""
        D = _full_domain(self.labels.shape) if D is None else D
        flags = np.zeros((self.ncomp, len(D), 2), dtype=bool)
        for ax, sl in enumerate(D):
            flags[:, ax, 0] = self.bbox_lo[:, ax] <= sl.start
            flags[:, ax, 1] = self.bbox_hi[:, ax] >= sl.stop - 1
        return flags

    def to_csv(self, D=None):
        """CSV with one row per component."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["component_id", "cells", "bbox", "touches_boundary", "holes"])
        touch = self.touches_faces(D).any(axis=(1, 2)) if self.ncomp else []
        for k in range(self.ncomp):
            bbox = ";".join(f"{lo}:{hi}" for lo, hi in zip(self.bbox_lo[k], self.bbox_hi[k]))
            holes = "" if self.holes is None else int(self.holes[k])
            w.writerow([k + 1, int(self.cells[k]), bbox, int(bool(touch[k])), holes])
        return buf.getvalue()


def label_components(binary, connectivity="full"):
    """Label connected foreground cells.

    ``connectivity="full"`` (default) is 8-connectivity in 2D and 26 in
    3D; ``"face"`` is 4/6. Hole counts are reported in 2D under full
    connectivity: ``holes = 1 - chi(component)``, which equals the number
    of bounded 4-connected background regions the component encloses.
    """
    binary = np.asarray(binary, dtype=bool)
    if binary.size == 0:
        raise ValueError("grid must be nonempty")
    d = binary.ndim
    lab, ncomp = ndimage.label(binary, structure=_structure(d, connectivity))
    cells = np.bincount(lab.ravel(), minlength=ncomp + 1)[1:]
    lo = np.zeros((ncomp, d), dtype=int)
    hi = np.zeros((ncomp, d), dtype=int)
    for k, sl in enumerate(ndimage.find_objects(lab)):
        lo[k] = [s.start for s in sl]
        hi[k] = [s.stop - 1 for s in sl]
    shape = np.array(binary.shape)
    touches = np.any(lo == 0, axis=1) | np.any(hi == shape - 1, axis=1)
    holes = None
    if d == 2 and connectivity == "full":
        chi = np.zeros(ncomp + 1, dtype=np.int64)
        for tau, arr in _cell_label_arrays(lab).items():
            chi += (-1) ** sum(tau) * np.bincount(arr.ravel(), minlength=ncomp + 1)
        holes = 1 - chi[1:]
    return ExcursionGeometry(lab, int(ncomp), cells, lo, hi, touches, holes, connectivity)


def _full_domain(shape):
    return tuple(slice(0, n) for n in shape)


def _check_domain(D, shape):
    if len(D) != len(shape):
        raise DomainOutsideGrid("domain dimension does not match grid")
    for sl, n in zip(D, shape):
        if sl.start is None or sl.stop is None or sl.start < 0 or sl.stop > n \
                or sl.stop - sl.start < 1:
            raise DomainOutsideGrid(f"domain {D} outside grid of shape {shape}")


def _interior_mask(geom, D):
    """Components with all cells in ``D`` minus its one-cell shell."""
    _check_domain(D, geom.labels.shape)
    ok = np.ones(geom.ncomp, dtype=bool)
    for ax, sl in enumerate(D):
        ok &= (geom.bbox_lo[:, ax] >= sl.start + 1) & (geom.bbox_hi[:, ax] <= sl.stop - 2)
    return ok


def component_count(geom, D=None):
    """Number of components inside ``D`` that avoid its boundary layer."""
    D = _full_domain(geom.labels.shape) if D is None else D
    return int(np.count_nonzero(_interior_mask(geom, D)))


def _plane_hits(geom, a_cells, offset):
    """Per component and axis, number of ``a``-planes met by its closure."""
    lo = geom.bbox_lo
    hi = geom.bbox_hi + 1  # last pixel edge
    # planes at edge indices j with (j - offset) % a_cells == 0
    first = offset + np.ceil((lo - offset) / a_cells) * a_cells
    last = offset + np.floor((hi - offset) / a_cells) * a_cells
    return np.maximum(0, (last - first) // a_cells + 1).astype(int)


def _large_mask(geom, a, h, plane_offset=None):
    """Components whose closure meets two parallel ``a``-planes.

    ``plane_offset`` gives, per axis, a pixel-edge index lying on an
    ``a``-plane; it defaults to the centre of the labelled grid.
    """
    a_cells = a / h
    if abs(a_cells - round(a_cells)) > 1e-9:
        raise BadScale("a must be a multiple of h")
    if plane_offset is None:
        plane_offset = np.array(geom.labels.shape) // 2
    hits = _plane_hits(geom, int(round(a_cells)), np.asarray(plane_offset))
    return np.any(hits >= 2, axis=1)


def bounded_functional(geom, spec, D=None, h=None, plane_offset=None):
    """Sum of ``phi`` over counted components (count or bounded weight)."""
    if spec.phi == "euler":
        raise ValueError("use euler_characteristic_cubical for the EC")
    D = _full_domain(geom.labels.shape) if D is None else D
    mask = _interior_mask(geom, D)
    if spec.size_class is not None:
        large = _large_mask(geom, spec.a, h, plane_offset)
        mask &= large if spec.size_class == "large" else ~large
    if spec.phi == "count":
        return float(np.count_nonzero(mask))
    if geom.holes is None:
        raise ValueError("bounded weights need hole counts (2D, full connectivity)")
    return float(np.sum(spec.weight_fn(geom.holes[mask])))


def evaluate_functional(values, spec, D=None, h=1.0):
    """``Phi(D, g)`` for a value grid ``g``; D defaults to the whole grid."""
    v = _values(values)
    D = _full_domain(v.shape) if D is None else D
    _check_domain(D, v.shape)
    sub = v[D]
    fg = extract_excursion(sub, spec, h)
    if spec.phi == "euler":
        return float(euler_characteristic_cubical(fg))
    geom = label_components(fg)
    offset = None
    if spec.size_class is not None:
        offset = np.array([n // 2 - sl.start for n, sl in zip(v.shape, D)])
    return bounded_functional(geom, spec, None, h, offset)


# ---------------------------------------------------------------------------
# Euler characteristic
# ---------------------------------------------------------------------------

def cubical_cells(binary, D=None, ownership="closed"):
    """Cells of the cubical complex spanned by foreground cells of ``D``.

    Returns ``{tau: (origin, mask)}`` with ``mask`` indexed in global
    lattice coordinates starting at ``origin``. With
    ``ownership="half-open"`` the result is every cell of the whole-grid
    complex whose lower corner lies in ``D``, so that tiling boxes
    partition the complex.
    """
    binary = np.asarray(binary, dtype=bool)
    D = _full_domain(binary.shape) if D is None else D
    _check_domain(D, binary.shape)
    if ownership == "half-open":
        # lattice cells whose lower corner lies in D, taken from the
        # complex of the whole grid so that neighbouring tiles see the
        # faces they share
        full = cubical_cells(binary)
        own = tuple(slice(sl.start, sl.stop) for sl in D)
        return {tau: (tuple(sl.start for sl in D), m[own]) for tau, (_, m) in full.items()}
    if ownership != "closed":
        raise ValueError(f"unknown ownership {ownership!r}")
    sub = binary[D]
    origin = tuple(sl.start for sl in D)
    out = {}
    for tau in product((0, 1), repeat=sub.ndim):
        arr = sub
        for ax in range(sub.ndim):
            if tau[ax] == 0:
                pad = [(0, 0)] * arr.ndim
                pad[ax] = (1, 1)
                p = np.pad(arr, pad)
                lo = [slice(None)] * arr.ndim
                hi = [slice(None)] * arr.ndim
                lo[ax] = slice(0, -1)
                hi[ax] = slice(1, None)
                arr = p[tuple(lo)] | p[tuple(hi)]
        out[tau] = (origin, arr)
    return out


def euler_from_cells(cells):
    return int(sum((-1) ** sum(tau) * int(np.count_nonzero(m)) for tau, (_, m) in cells.items()))


def intersect_cells(c1, c2):
    """Cells present in both complexes (global coordinates)."""
    out = {}
    for tau in c1:
        o1, m1 = c1[tau]
        o2, m2 = c2[tau]
        lo = [max(a, b) for a, b in zip(o1, o2)]
        hi = [min(a + s, b + t) for a, b, s, t in zip(o1, o2, m1.shape, m2.shape)]
        if any(h_ <= l_ for l_, h_ in zip(lo, hi)):
            out[tau] = (tuple(lo), np.zeros((0,) * len(lo), dtype=bool))
            continue
        s1 = tuple(slice(l_ - a, h_ - a) for l_, h_, a in zip(lo, hi, o1))
        s2 = tuple(slice(l_ - b, h_ - b) for l_, h_, b in zip(lo, hi, o2))
        out[tau] = (tuple(lo), m1[s1] & m2[s2])
    return out


def euler_characteristic_cubical(binary, D=None, ownership="closed"):
    """``chi = sum_k (-1)^k #k-cells`` of the foreground complex in ``D``."""
    return euler_from_cells(cubical_cells(binary, D, ownership))


def _shift(arr, off, fill):
    """``out[p] = arr[p + off]`` with ``fill`` outside."""
    out = np.full(arr.shape, fill, dtype=arr.dtype)
    src = []
    dst = []
    for o, n in zip(off, arr.shape):
        if o >= 0:
            src.append(slice(o, n))
            dst.append(slice(0, n - o))
        else:
            src.append(slice(0, n + o))
            dst.append(slice(-o, n))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def _face_offsets(d):
    offs = [o for o in product((-1, 0, 1), repeat=d) if any(o)]
    faces = offs
    cover = {}
    for s in faces:
        ok = []
        for o in offs:
            good = True
            for si, oi in zip(s, o):
                if (si == 0 and oi != 0) or (si == 1 and oi not in (0, 1)) or \
                        (si == -1 and oi not in (-1, 0)):
                    good = False
                    break
            if good:
                ok.append(o)
        cover[s] = ok
    return offs, cover


def _rank_desc(v):
    """Rank 0 for the highest value; ties broken by linear index."""
    flat = v.ravel()
    order = np.lexsort((np.arange(flat.size), -flat))
    rank = np.empty(flat.size, dtype=np.int64)
    rank[order] = np.arange(flat.size)
    return rank.reshape(v.shape)


def upper_star_increments(values, D=None):
    """Euler-characteristic increment of each cell in the upper filtration.

    Cells of ``D`` are added as closed cubes in decreasing order of value.
    Adding cell ``p`` changes the Euler characteristic by
    ``1 - chi(closed faces of p already covered)``, computed by
    inclusion-exclusion over the open faces of the boundary of ``p``.

    Returns
    -------
    dchi : ndarray of int
        Increment per cell of ``D``.
    covered_any, covered_all : ndarray of bool
        Whether any / every boundary face is covered by higher neighbours.
    """
    v = _values(values)
    D = _full_domain(v.shape) if D is None else D
    _check_domain(D, v.shape)
    sub = v[D]
    d = sub.ndim
    rank = _rank_desc(sub)
    big = np.iinfo(np.int64).max
    offs, cover = _face_offsets(d)
    upper = {o: _shift(rank, o, big) < rank for o in offs}
    dchi = np.ones(sub.shape, dtype=np.int64)
    any_ = np.zeros(sub.shape, dtype=bool)
    all_ = np.ones(sub.shape, dtype=bool)
    for s, os_ in cover.items():
        c = np.zeros(sub.shape, dtype=bool)
        for o in os_:
            c |= upper[o]
        dim = sum(1 for si in s if si == 0)
        dchi -= (-1) ** dim * c.astype(np.int64)
        any_ |= c
        all_ &= c
    return dchi, any_, all_


def euler_characteristic_morse(fs, level, D=None):
    """EC of ``{f >= level}`` in ``D`` as a sum of critical-cell indices.

    Summing the upper-filtration increments over cells with value at
    least ``level`` reproduces the cubical EC exactly. Raises
    ``LevelAtCriticalValue`` if a critical cell's value is within
    ``1e-12`` of the dynamic range from ``level``.
    """
    v = _values(fs)
    D = _full_domain(v.shape) if D is None else D
    dchi, _, _ = upper_star_increments(v, D)
    sub = v[D]
    crit = dchi != 0
    span = float(sub.max() - sub.min()) or 1.0
    if np.any(crit & (np.abs(sub - level) <= TIE_TOL * span)):
        raise LevelAtCriticalValue(f"critical value within tolerance of level {level!r}")
    return int(dchi[sub >= level].sum())


@dataclass(frozen=True, eq=False)
class CriticalCensus:
    """Critical cells per stratum of the box.

    ``entries[name]`` is a list of dicts with keys ``location`` (cell index
    in grid coordinates), ``type`` (``max``, ``min``, ``saddle``),
    ``dchi`` (signed index contribution), ``value`` and ``ambiguous``
    (``|dchi| > 1``: degenerate pattern, flagged rather than classified).
    """

    entries: dict
    nbar: int
    d: int

    def counts(self):
        return {k: len(v) for k, v in self.entries.items()}

    def count_type(self, kind, stratum=None):
        names = [stratum] if stratum else list(self.entries)
        return sum(1 for n in names for e in self.entries[n] if e["type"] == kind)


def _stratum_names(d):
    names = {d: "interior", 0: "corner"}
    if d >= 2:
        names[d - 1] = "face"
    if d == 3:
        names[1] = "edge"
    return names


def critical_census(fs, D=None):
    """Classify the critical cells of the upper filtration in ``D``.

    The stratum of a cell is the dimension of the box face it lies on
    (number of axes on which it is not in the boundary layer). The
    stratified count ``nbar`` is ``sum |dchi|`` plus one for every box
    corner cell that is not already critical.
    """
    v = _values(fs)
    D = _full_domain(v.shape) if D is None else D
    dchi, any_, all_ = upper_star_increments(v, D)
    sub = v[D]
    d = sub.ndim
    on_shell = np.zeros(sub.shape, dtype=np.int64)
    for ax in range(d):
        idx = np.arange(sub.shape[ax])
        edge = (idx == 0) | (idx == sub.shape[ax] - 1)
        shape = [1] * d
        shape[ax] = -1
        on_shell += edge.reshape(shape).astype(np.int64)
    sdim = d - on_shell
    names = _stratum_names(d)
    entries = {n: [] for n in names.values()}
    origin = np.array([sl.start for sl in D])
    for p in zip(*np.nonzero(dchi != 0)):
        kind = "max" if not any_[p] else ("min" if all_[p] else "saddle")
        entries[names[int(sdim[p])]].append({
            "location": tuple(int(i) for i in np.array(p) + origin),
            "type": kind, "dchi": int(dchi[p]), "value": float(sub[p]),
            "ambiguous": bool(abs(dchi[p]) > 1)})
    corners = (sdim == 0) & (dchi == 0)
    nbar = int(np.abs(dchi).sum() + np.count_nonzero(corners))
    return CriticalCensus(entries, nbar, d)


# ---------------------------------------------------------------------------
# a-planes and the multiscale decomposition
# ---------------------------------------------------------------------------

def split_by_a_planes(geom, a, D=None, h=1.0):
    """Split counted components of ``D`` into large and small.

    A component is large when its closure meets two parallel ``a``-planes,
    the grid hyperplanes at coordinates in ``a Z``.

    Returns
    -------
    (large_ids, small_ids) : tuple of ndarray
        Component labels (1-based).
    """
    if a < 2 * h - 1e-12:
        raise BadScale("a must be at least 2h")
    D = _full_domain(geom.labels.shape) if D is None else D
    for sl in D:
        side = sl.stop - sl.start
        if abs((side * h / a) - round(side * h / a)) > 1e-9:
            raise BadScale("a must divide the box side")
    counted = _interior_mask(geom, D)
    large = _large_mask(geom, a, h)
    ids = np.arange(1, geom.ncomp + 1)
    return ids[counted & large], ids[counted & ~large]


def validate_scales(R, r, a, h=None):
    """Raise ``BadScale`` unless ``r/a`` and ``R/(r + 4a)`` are even integers."""

    def even(x):
        return abs(x - round(x)) < 1e-9 and round(x) > 0 and round(x) % 2 == 0

    if not even(r / a):
        raise BadScale(f"r/a = {r / a:g} is not an even integer")
    if not even(R / (r + 4 * a)):
        raise BadScale(f"R/(r+4a) = {R / (r + 4 * a):g} is not an even integer")
    if h is not None:
        for name, val in (("R", R), ("r", r), ("a", a)):
            q = val / h
            if abs(q - round(q)) > 1e-9:
                raise BadScale(f"{name} = {val:g} is not a multiple of h = {h:g}")


@dataclass(frozen=True)
class DecompositionResult:
    """Terms of ``Phi(Lambda_R) = sum_x Phi(x + Lambda_r) + A + B + C``.

    Values are exact fractions (weights are binary floats, so the
    conversion is lossless).
    """

    scales: tuple
    centers: list
    mesobox_values: list
    A: Fraction
    B: Fraction
    C: Fraction
    total: Fraction

    def identity_holds(self):
        return self.total == sum(self.mesobox_values, Fraction(0)) + self.A + self.B + self.C

    def as_tuple(self):
        return (sum(self.mesobox_values, Fraction(0)), self.A, self.B, self.C)


def mesobox_centers(R, r, a, d):
    m = round(R / (r + 4 * a))
    ks = np.arange(-(m // 2), m // 2)
    axis = (r + 4 * a) * (ks + 0.5)
    return [tuple(float(c) for c in p) for p in product(axis, repeat=d)]


def multiscale_decompose(fs, spec, R, r, a, h=None):
    """Classify counted components of ``Lambda_R`` by scale.

    Mesoboxes ``x + Lambda_r`` have centres ``(r + 4a)(k + 1/2)``; the
    remainder ``U_R`` is the closure of their complement. A component
    counted in ``Lambda_R`` is assigned to the mesobox term if it avoids
    that mesobox's boundary layer, to ``A`` if it meets no mesobox cell,
    and otherwise to ``B`` (large) or ``C`` (small). The total is computed
    independently by ``bounded_functional`` on ``Lambda_R``.
    """
    if spec.phi == "euler":
        raise ValueError("decomposition applies to count/bounded functionals")
    grid = fs.grid if h is None else None
    h = grid.h if h is None else h
    v = _values(fs)
    d = v.ndim
    validate_scales(R, r, a, h)
    n = v.shape[0]

    def slices(center, side):
        out = []
        for c in center:
            lo = round((c - side / 2) / h + n / 2)
            hi = round((c + side / 2) / h + n / 2)
            if lo < 0 or hi > n:
                raise DomainOutsideGrid("decomposition box leaves the grid")
            out.append(slice(lo, hi))
        return tuple(out)

    DR = slices((0.0,) * d, R)
    fg = extract_excursion(v, spec, h)
    geom = label_components(fg)
    weights = np.array([Fraction(float(w)) for w in spec.weight_fn(
        geom.holes if geom.holes is not None else np.zeros(geom.ncomp))], dtype=object) \
        if geom.ncomp else np.array([], dtype=object)
    counted = _interior_mask(geom, DR)
    total = sum(weights[counted], Fraction(0))

    centers = mesobox_centers(R, r, a, d)
    meso_mask = np.zeros(v.shape, dtype=bool)
    in_meso = np.zeros(geom.ncomp, dtype=bool)
    meso_vals = []
    for c in centers:
        Dx = slices(c, r)
        meso_mask[Dx] = True
        inside = _interior_mask(geom, Dx)
        in_meso |= inside
        meso_vals.append(sum(weights[inside], Fraction(0)))

    lab = geom.labels
    touch_meso = np.zeros(geom.ncomp + 1, dtype=bool)
    touch_meso[np.unique(lab[meso_mask])] = True
    touch_meso = touch_meso[1:]
    large = _large_mask(geom, a, h)
    rest = counted & ~in_meso
    A = sum(weights[rest & ~touch_meso], Fraction(0))
    B = sum(weights[rest & touch_meso & large], Fraction(0))
    C = sum(weights[rest & touch_meso & ~large], Fraction(0))
    return DecompositionResult((R, r, a), centers, meso_vals, A, B, C, total)


# ---------------------------------------------------------------------------
# arm events and the unbounded component
# ---------------------------------------------------------------------------

def one_arm_event(fs, level, center, R_arm, h=None):
    """Foreground path from ``center + Lambda_1`` to ``boundary(center + Lambda_R)``."""
    v = _values(fs)
    grid = fs.grid
    box = grid.box_slices(R_arm, center)
    inner = grid.box_slices(1.0, center)
    sub = v[box] >= level
    lab, _ = ndimage.label(sub, structure=_structure(sub.ndim, "full"))
    inner_local = tuple(slice(i.start - b.start, i.stop - b.start) for i, b in zip(inner, box))
    a = np.unique(lab[inner_local])
    shell = np.ones(sub.shape, dtype=bool)
    shell[tuple(slice(1, -1) for _ in sub.shape)] = False
    b = np.unique(lab[shell])
    common = np.intersect1d(a[a > 0], b[b > 0])
    return bool(common.size)


def _node_distance(grid, x):
    axes = np.meshgrid(*([grid.axis_coords()] * grid.d), indexing="ij")
    return np.sqrt(sum((ax - xi) ** 2 for ax, xi in zip(axes, np.atleast_1d(x))))


def _cell_maxdist(grid, x):
    axes = np.meshgrid(*([grid.axis_coords()] * grid.d), indexing="ij")
    return np.sqrt(sum((np.abs(ax - xi) + grid.h / 2) ** 2
                       for ax, xi in zip(axes, np.atleast_1d(x))))


def truncated_arm_event(fs, level, x, r_arm, domain=None):
    """Bounded component of ``{f >= level} minus B(x, 1)`` spanning to radius ``r_arm``.

    Cells whose centres lie in the open unit ball are removed. A remaining
    component qualifies if it is adjacent to a removed cell, has a cell
    whose closure reaches distance ``r_arm`` from ``x``, and avoids the
    outer layer of the grid (or of ``domain``, a box side length centred
    at the origin, when given).
    """
    v = _values(fs)
    grid = fs.grid
    dist = _node_distance(grid, x)
    if np.any(np.atleast_1d(x) - r_arm < -grid.side / 2) or \
            np.any(np.atleast_1d(x) + r_arm > grid.side / 2):
        raise DomainOutsideGrid("annulus leaves the sampled grid")
    ball = dist < 1.0
    fg = (v >= level) & ~ball
    if domain is not None:
        D = grid.box_slices(domain)
        keep = np.zeros(v.shape, dtype=bool)
        keep[D] = True
        fg &= keep
        shell = keep & ~_erode_box(keep, D)
    else:
        shell = np.ones(v.shape, dtype=bool)
        shell[tuple(slice(1, -1) for _ in v.shape)] = False
    st = _structure(v.ndim, "full")
    lab, ncomp = ndimage.label(fg, structure=st)
    if ncomp == 0:
        return False
    near_ball = ndimage.binary_dilation(ball, structure=st) & ~ball
    reach = _cell_maxdist(grid, x) >= r_arm
    ids = np.arange(ncomp + 1)
    hit_ball = np.isin(ids, lab[near_ball & fg])
    hit_far = np.isin(ids, lab[reach & fg])
    hit_edge = np.isin(ids, lab[shell & fg])
    ok = hit_ball & hit_far & ~hit_edge
    ok[0] = False
    return bool(ok.any())


def _erode_box(keep, D):
    inner = np.zeros(keep.shape, dtype=bool)
    inner[tuple(slice(s.start + 1, s.stop - 1) for s in D)] = True
    return inner


def unbounded_indicator(fs, level, R, b_min=None):
    """Cells of ``Lambda_R`` in components touching the grid's outer layer."""
    grid = fs.grid
    if b_min is None:
        b_min = 6.0 * fs.model.correlation_length
    if grid.b + 1e-12 < b_min:
        raise BufferTooSmall(f"buffer {grid.b:g} below required {b_min:g}")
    v = _values(fs)
    lab, ncomp = ndimage.label(v >= level, structure=_structure(v.ndim, "full"))
    shell = np.ones(v.shape, dtype=bool)
    shell[tuple(slice(1, -1) for _ in v.shape)] = False
    outer = np.zeros(ncomp + 1, dtype=bool)
    outer[np.unique(lab[shell])] = True
    outer[0] = False
    D = grid.box_slices(R)
    return outer[lab[D]]


def unbounded_volume(fs, level, R, b_min=None):
    """``h^d`` times the number of ``Lambda_R`` cells in touching components."""
    E = unbounded_indicator(fs, level, R, b_min)
    return float(np.count_nonzero(E)) * fs.grid.h ** fs.grid.d


# ---------------------------------------------------------------------------
# topological derivative
# ---------------------------------------------------------------------------

def _bump(grid, x, eps, delta):
    r = _node_distance(grid, x) / eps
    out = np.zeros(grid.shape)
    m = r < 1.0
    out[m] = delta * np.exp(1.0 - 1.0 / (1.0 - r[m] ** 2))
    return out


def topological_derivative(fs, spec, D, x, eps=None, delta=None, check=True):
    """``Phi(D, f + rho) - Phi(D, f - rho)`` for a smooth bump ``rho`` at ``x``.

    ``x`` is a point in field coordinates (a node of the conditioned
    field). With ``check`` the value is recomputed with ``(eps/2,
    delta/2)`` and ``NotStabilized`` is raised if it changes.
    """
    grid = fs.grid
    h = grid.h
    eps = 0.9 * h if eps is None else eps
    v = fs.values
    if delta is None:
        span = float(v.max() - v.min()) or 1.0
        delta = 1e-9 * span

    def once(e, dl):
        rho = _bump(grid, x, e, dl)
        up = evaluate_functional(v + rho, spec, D, h)
        dn = evaluate_functional(v - rho, spec, D, h)
        return up - dn

    val = once(eps, delta)
    if check:
        val2 = once(eps / 2, delta / 2)
        if val2 != val:
            raise NotStabilized(f"derivative {val} changes to {val2} under refinement")
    return val
