"""Geometry of Z^d: finite point sets, distances, shells and the auxiliary
sets used by the sprinkling bound.

All distance comparisons are done on squared integer distances; floats only
appear when a distance is reported.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ConfigurationError, DomainError

DEFAULT_WORKSPACE_RADIUS = 128


class PointSet:
    """Finite ordered set of distinct points of Z^d.

    The order given at construction is kept, so that matrix indices built
    from a PointSet are reproducible. ``coords`` is a read-only ``(n, d)``
    int64 array.
    """

    def __init__(self, points, d: int | None = None,
                 workspace_radius: int = DEFAULT_WORKSPACE_RADIUS):
        arr = np.asarray(points, dtype=np.int64)
        if arr.ndim == 1 and arr.size == 0:
            if d is None:
                raise DomainError("empty PointSet needs an explicit dimension")
            arr = arr.reshape(0, d)
        if arr.ndim != 2:
            raise DomainError(f"points must be a 2-d array, got shape {arr.shape}")
        if d is not None and arr.shape[1] != d:
            raise DomainError(f"expected dimension {d}, got {arr.shape[1]}")
        if arr.shape[1] < 3:
            raise DomainError("only d >= 3 is supported (transient walk)")
        if arr.size and np.abs(arr).max() > workspace_radius:
            raise ConfigurationError(
                f"coordinates exceed workspace radius {workspace_radius}")
        self._index = {}
        for i, p in enumerate(map(tuple, arr.tolist())):
            if p in self._index:
                raise DomainError(f"duplicate point {p}")
            self._index[p] = i
        arr.setflags(write=False)
        self.coords = arr
        self.workspace_radius = workspace_radius

    @property
    def d(self) -> int:
        return self.coords.shape[1]

    def __len__(self):
        return self.coords.shape[0]

    def __iter__(self):
        return iter(map(tuple, self.coords.tolist()))

    def __contains__(self, p):
        return tuple(int(c) for c in p) in self._index

    def __eq__(self, other):
        return isinstance(other, PointSet) and np.array_equal(self.coords, other.coords)

    def __hash__(self):
        return hash(self.coords.tobytes())

    def __repr__(self):
        return f"PointSet(n={len(self)}, d={self.d})"

    def index(self, p) -> int:
        return self._index[tuple(int(c) for c in p)]

    def labels(self) -> list[str]:
        return ["(" + ",".join(str(c) for c in p) + ")" for p in self]

    def translate(self, v) -> "PointSet":
        return PointSet(self.coords + np.asarray(v, dtype=np.int64),
                        workspace_radius=self.workspace_radius)

    def scale(self, k: int) -> "PointSet":
        return PointSet(self.coords * int(k), workspace_radius=self.workspace_radius)

    def union(self, other: "PointSet") -> "PointSet":
        """Concatenation; raises on overlap so that index blocks stay aligned."""
        return PointSet(np.vstack([self.coords, other.coords]),
                        workspace_radius=self.workspace_radius)

    def isdisjoint(self, other: "PointSet") -> bool:
        return not any(p in self._index for p in other)

    def to_json(self) -> str:
        return json.dumps(self.coords.tolist())

    @classmethod
    def from_json(cls, text: str, **kw) -> "PointSet":
        data = json.loads(text)
        if not isinstance(data, list) or not all(
                isinstance(p, list) and all(isinstance(c, int) for c in p) for p in data):
            raise DomainError("PointSet JSON must be an array of integer arrays")
        return cls(data, **kw)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path, **kw) -> "PointSet":
        with open(path) as fh:
            return cls.from_json(fh.read(), **kw)


def box(side: int, d: int = 3, origin=None, **kw) -> PointSet:
    """Sites of ``origin + [0, side)^d`` in row-major (C) order."""
    origin = np.zeros(d, dtype=np.int64) if origin is None else np.asarray(origin)
    grid = np.indices((side,) * d).reshape(d, -1).T
    return PointSet(grid + origin, **kw)


def _as_coords(K) -> np.ndarray:
    if isinstance(K, PointSet):
        return K.coords
    return np.atleast_2d(np.asarray(K, dtype=np.int64))


def _require_nonempty(*sets):
    for K in sets:
        if len(_as_coords(K)) == 0:
            raise DomainError("operation requires a nonempty set")


def dist_sq(K1, K2) -> int:
    """Exact squared Euclidean distance between two finite sets."""
    _require_nonempty(K1, K2)
    a, b = _as_coords(K1), _as_coords(K2)
    best = None
    for start in range(0, len(a), 512):
        diff = a[start:start + 512, None, :] - b[None, :, :]
        m = int((diff * diff).sum(axis=-1).min())
        best = m if best is None else min(best, m)
    return best


def dist(K1, K2) -> float:
    return math.sqrt(dist_sq(K1, K2))


def diam_sq(K) -> int:
    _require_nonempty(K)
    a = _as_coords(K)
    best = 0
    for start in range(0, len(a), 512):
        diff = a[start:start + 512, None, :] - a[None, :, :]
        best = max(best, int((diff * diff).sum(axis=-1).max()))
    return best


def diam(K) -> float:
    return math.sqrt(diam_sq(K))


# -- exact radius arithmetic -------------------------------------------------

def radius_sq(s: float):
    """Return s**2 as an exact int when s is (numerically) a root of an integer."""
    r = float(s) * float(s)
    ri = round(r)
    if abs(r - ri) <= 1e-9 * max(1.0, r):
        return int(ri)
    return r


def ge_radius(d2, s2):
    """Elementwise ``sqrt(d2) >= s``."""
    return np.asarray(d2) >= s2


def lt_radius_plus_one(d2, s2):
    """Elementwise ``sqrt(d2) < s + 1`` evaluated exactly for integer s2."""
    d2 = np.asarray(d2)
    if isinstance(s2, int):
        lhs = d2 - s2 - 1
        return (lhs < 0) | (lhs * lhs < 4 * s2)
    return np.sqrt(d2) < math.sqrt(s2) + 1.0


# -- grid distance helpers ---------------------------------------------------

class _Grid:
    """Axis-aligned integer box used for exact distance transforms."""

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.int64)
        self.hi = np.asarray(hi, dtype=np.int64)
        self.shape = tuple(int(x) for x in self.hi - self.lo + 1)

    def mask_of(self, coords) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[tuple((coords - self.lo).T)] = True
        return m

    def points(self, mask) -> np.ndarray:
        return np.argwhere(mask).astype(np.int64) + self.lo

    def dist_sq_to(self, feature_mask) -> np.ndarray:
        """Exact squared distance from every grid site to the nearest feature."""
        if not feature_mask.any():
            raise DomainError("distance to an empty set")
        idx = ndimage.distance_transform_edt(~feature_mask, return_distances=False,
                                             return_indices=True)
        here = np.indices(self.shape)
        diff = idx.astype(np.int64) - here
        return (diff * diff).sum(axis=0)


def _grid_around(coords, margin: int) -> _Grid:
    return _Grid(coords.min(axis=0) - margin, coords.max(axis=0) + margin)


def _check_workspace(points: np.ndarray, radius: int):
    if points.size and np.abs(points).max() > radius:
        raise ConfigurationError(
            f"enumeration leaves the workspace of radius {radius}; "
            "increase workspace_radius")


def shell(K, s: float, search_radius: float) -> PointSet:
    """All lattice points y with ``s <= dist(y, K) < s + 1``."""
    _require_nonempty(K)
    if s <= 0:
        raise DomainError("shell radius must be positive")
    if search_radius < s + 1 + diam(K):
        raise ConfigurationError(
            f"search_radius {search_radius} < s + 1 + diam(K) = {s + 1 + diam(K)}")
    coords = _as_coords(K)
    wr = getattr(K, "workspace_radius", DEFAULT_WORKSPACE_RADIUS)
    s2 = radius_sq(s)
    grid = _grid_around(coords, int(math.ceil(s)) + 2)
    d2 = grid.dist_sq_to(grid.mask_of(coords))
    sel = ge_radius(d2, s2) & lt_radius_plus_one(d2, s2)
    pts = grid.points(sel)
    _check_workspace(pts, wr)
    return PointSet(pts, workspace_radius=wr)


# -- auxiliary sets H1, H2 ---------------------------------------------------

def _ball_offsets(r2, d: int) -> np.ndarray:
    """Integer offsets o with |o|^2 < r2."""
    R = int(math.ceil(math.sqrt(r2)))
    rng = np.arange(-R, R + 1)
    offs = np.array(list(itertools.product(rng, repeat=d)), dtype=np.int64)
    return offs[(offs * offs).sum(axis=1) < r2]


class _Membership:
    """Membership predicate usable on one point or on an ``(n, d)`` array."""

    def __init__(self, many: Callable[[np.ndarray], np.ndarray]):
        self.many = many

    def __call__(self, q) -> bool:
        return bool(self.many(np.asarray(q, dtype=np.int64)[None, :])[0])


def _make_ge_predicate(inner: _Membership, s2, d: int) -> _Membership:
    """Predicate for ``A^(>=s)`` given a membership predicate for A.

    q is in A^(>=s) iff no z in A has |q - z| < s; such witnesses lie in the
    open ball of radius s around q, which is enumerated.
    """
    offs = _ball_offsets(s2, d)

    def many(qs):
        out = np.empty(len(qs), dtype=bool)
        for i, q in enumerate(qs):
            out[i] = not inner.many(q + offs).any()
        return out
    return _Membership(many)


@dataclass
class AuxiliaryGeometry:
    """Auxiliary sets H1, H2 for a pair of disjoint finite sets.

    One of H1, H2 is finite and is stored explicitly in ``finite_set``
    (named by ``finite_name``); the other is co-finite. ``in_H1`` and
    ``in_H2`` decide membership of points by bounded enumeration and accept
    either one point or an ``(n, d)`` array via ``.many``.
    """

    s: float
    s_sq: int
    case_tag: str
    h1_shell: PointSet
    h1_shell_size: int
    in_H1: _Membership = field(repr=False)
    in_H2: _Membership = field(repr=False)
    finite_name: str = "H1"
    finite_set: PointSet = field(repr=False, default=None)
    K1: PointSet = field(repr=False, default=None)
    K2: PointSet = field(repr=False, default=None)

    def check_properties(self, probes=None) -> list[str]:
        """Return the violated defining properties (empty list when all hold).

        Checked on the shell, K1, K2, the finite H-set and ``probes``:
        ``K_i ⊆ H_i``, ``H_{3-i} = H_i^(>=s)``, the enumeration predicates
        agree with the explicit finite set, and every shell point is at
        distance in ``[s, s+1)`` from H1.
        """
        problems = []
        if not self.in_H1.many(self.K1.coords).all():
            problems.append("K1 not contained in H1")
        if not self.in_H2.many(self.K2.coords).all():
            problems.append("K2 not contained in H2")
        pts = [self.h1_shell.coords, self.K1.coords, self.K2.coords,
               self.finite_set.coords]
        if probes is not None:
            pts.append(np.atleast_2d(np.asarray(probes, dtype=np.int64)))
        pts = np.unique(np.vstack(pts), axis=0)
        fin_pred, inf_pred = ((self.in_H1, self.in_H2) if self.finite_name == "H1"
                              else (self.in_H2, self.in_H1))
        tree = cKDTree(self.finite_set.coords)
        _, i = tree.query(pts)
        diff = pts - self.finite_set.coords[i]
        d2 = (diff * diff).sum(axis=1)
        if (fin_pred.many(pts) != (d2 == 0)).any():
            problems.append("finite H-set disagrees with its membership predicate")
        if (inf_pred.many(pts) != ge_radius(d2, self.s_sq)).any():
            problems.append("co-finite H-set is not the s-exterior of the finite one")
        sh = self.h1_shell.coords
        if self.finite_name == "H1":
            _, j = tree.query(sh)
            e = sh - self.finite_set.coords[j]
            dh = (e * e).sum(axis=1)
        else:
            dh = np.array([_dist_sq_to_pred(q, self.in_H1, self.s_sq) for q in sh])
        if len(sh) and not (ge_radius(dh, self.s_sq)
                            & lt_radius_plus_one(dh, self.s_sq)).all():
            problems.append("shell point outside the band [s, s+1)")
        return problems


def _dist_sq_to_pred(q, pred: _Membership, s2) -> int:
    """Squared distance from q to the set decided by ``pred`` (searched up to s+1)."""
    offs = _ball_offsets((math.sqrt(s2) + 1.5) ** 2, len(q))
    norms = (offs * offs).sum(axis=1)
    order = np.argsort(norms, kind="stable")
    hit = pred.many(q + offs[order])
    if not hit.any():
        raise DomainError("no point of the set within the search ball")
    return int(norms[order][np.argmax(hit)])


def auxiliary_sets(K1: PointSet, K2: PointSet) -> AuxiliaryGeometry:
    """Build H1, H2 and the finite shell ``H1^(=s)`` for disjoint K1, K2."""
    _require_nonempty(K1, K2)
    if not K1.isdisjoint(K2):
        raise DomainError("K1 and K2 must be disjoint")
    s2 = dist_sq(K1, K2)
    s = math.sqrt(s2)
    case1 = diam_sq(K1) <= diam_sq(K2)
    A = K1 if case1 else K2
    tree = cKDTree(A.coords)
    a_coords = A.coords

    def in_A_ge_many(qs):
        _, i = tree.query(qs)
        diff = qs - a_coords[i]
        return (diff * diff).sum(axis=1) >= s2

    in_A_ge = _Membership(in_A_ge_many)

    in_A_ge_ge = _make_ge_predicate(in_A_ge, s2, A.d)

    # N = {dist(., A) < s} is finite; the grid covers it, its s-interior and
    # the unit band beyond that.
    grid = _grid_around(a_coords, int(math.ceil(2 * s)) + 3)
    dA = grid.dist_sq_to(grid.mask_of(a_coords))
    inN = ~ge_radius(dA, s2)
    d_out = grid.dist_sq_to(~inN)  # squared distance to A^(>=s)
    fin_mask = ge_radius(d_out, s2) & inN  # (A^(>=s))^(>=s), finite
    if case1:
        # H2 = A^(>=s) (co-finite), H1 = H2^(>=s) finite
        d_h1 = grid.dist_sq_to(fin_mask)
        in_H1, in_H2 = in_A_ge_ge, in_A_ge
        tag, fin_name = "diam(K1)<=diam(K2)", "H1"
    else:
        # H1 = A^(>=s) (co-finite), H2 = H1^(>=s) finite
        d_h1 = d_out
        in_H1, in_H2 = in_A_ge, in_A_ge_ge
        tag, fin_name = "diam(K1)>diam(K2)", "H2"
    finite_set = PointSet(grid.points(fin_mask), workspace_radius=K1.workspace_radius)
    band = ge_radius(d_h1, s2) & lt_radius_plus_one(d_h1, s2)
    pts = grid.points(band)
    _check_workspace(pts, K1.workspace_radius)
    shell_set = PointSet(pts, workspace_radius=K1.workspace_radius)
    return AuxiliaryGeometry(s=s, s_sq=s2, case_tag=tag, h1_shell=shell_set,
                             h1_shell_size=len(shell_set), in_H1=in_H1, in_H2=in_H2,
                             finite_name=fin_name, finite_set=finite_set,
                             K1=K1, K2=K2)
