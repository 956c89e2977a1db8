"""Green function of simple random walk on Z^d and Green matrices.

g(0, x) is evaluated from the continuous-time representation

    g(0, x) = int_0^inf  prod_j  e^{-t/d} I_{x_j}(t/d)  dt,

integrated with adaptive Gauss-Legendre panels on [0, T0] and an asymptotic
(Hankel) expansion of the scaled Bessel functions on [T0, inf).
"""
from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import ive

from .errors import CapacityError, ConfigurationError, NumericError
from .lattice import DEFAULT_WORKSPACE_RADIUS, PointSet

CACHE_SCHEMA_VERSION = 1
DEFAULT_DENSE_LIMIT = 4096

_GL_X, _GL_W = np.polynomial.legendre.leggauss(40)


def _integrand(n: np.ndarray, t: np.ndarray, d: int) -> np.ndarray:
    # coordinates take few distinct values: tabulate ive once per value
    orders, idx = np.unique(n, return_inverse=True)
    idx = idx.reshape(n.shape)
    table = ive(orders[:, None], (t / d)[None, :])
    out = table[idx[:, 0]].copy()
    for j in range(1, d):
        out *= table[idx[:, j]]
    return out


def _panel(n, a, b, d):
    half = 0.5 * (b - a)
    t = a + half * (_GL_X + 1.0)
    return (_integrand(n, t, d) @ _GL_W) * half


def _hankel_coeffs(n: np.ndarray, terms: int) -> np.ndarray:
    """Coefficients c_k(n) with e^{-z} I_n(z) ~ (2 pi z)^{-1/2} sum_k c_k z^{-k}."""
    mu = 4.0 * n.astype(float) ** 2
    c = np.ones(n.shape + (terms,))
    for k in range(1, terms):
        c[..., k] = -c[..., k - 1] * (mu - (2 * k - 1) ** 2) / (k * 8.0)
    return c


def _tail(n: np.ndarray, T: float, d: int, terms: int) -> np.ndarray:
    """int_T^inf prod_j e^{-t/d} I_{n_j}(t/d) dt from the asymptotic series."""
    poly = np.zeros((n.shape[0], terms))
    poly[:, 0] = 1.0
    coeffs = _hankel_coeffs(n, terms)
    for j in range(d):
        new = np.zeros_like(poly)
        for k in range(terms):
            new[:, k:] += poly[:, :terms - k] * coeffs[:, j, k:k + 1]
        poly = new
    m = np.arange(terms)
    # in t: (2 pi t / d)^{-d/2} * sum_m poly_m (d/t)^m
    pref = (2 * math.pi / d) ** (-d / 2)
    expo = 1 - d / 2 - m
    integ = d ** m * T ** expo / (-expo)
    return pref * (poly @ integ)


class GreenKernel:
    """Evaluator of g(0, x) for simple random walk on Z^d with a value cache.

    Values are cached by the sorted absolute coordinates of the offset, so
    symmetry under permutations and sign flips holds by construction.

    Parameters
    ----------
    d : int
        Lattice dimension (>= 3).
    tol : float
        Absolute quadrature tolerance.
    workspace_radius : int
        Largest admissible coordinate of an offset.
    asymptotic_switch : float
        Smallest time at which the integral switches to the asymptotic
        expansion; the actual split is ``max(asymptotic_switch, 25 d n_max^2)``.
    """

    def __init__(self, d: int = 3, tol: float = 1e-10,
                 workspace_radius: int = 2 * DEFAULT_WORKSPACE_RADIUS,
                 asymptotic_switch: float = 200.0, series_terms: int = 8,
                 dense_limit: int = DEFAULT_DENSE_LIMIT):
        if d < 3:
            raise ConfigurationError("the Green function is finite only for d >= 3")
        self.d = d
        self.tol = tol
        self.workspace_radius = workspace_radius
        self.asymptotic_switch = asymptotic_switch
        self.series_terms = series_terms
        self.dense_limit = dense_limit
        self._cache: dict[tuple, float] = {}
        self._lock = threading.Lock()
        self._envelope = None
        self._gsup: dict[float, float] = {}

    # -- keys and cache ----------------------------------------------------
    def key(self, x) -> tuple:
        return tuple(sorted(abs(int(c)) for c in x))

    @property
    def cache_id(self) -> str:
        return f"d{self.d}-tol{self.tol:.0e}-v{CACHE_SCHEMA_VERSION}"

    def __len__(self):
        return len(self._cache)

    def save(self, path):
        data = {"schema_version": CACHE_SCHEMA_VERSION, "d": self.d, "tol": self.tol,
                "values": [[list(k), v] for k, v in sorted(self._cache.items())]}
        with open(path, "w") as fh:
            json.dump(data, fh)

    def load(self, path) -> int:
        """Merge a persisted cache; returns the number of entries read."""
        with open(path) as fh:
            data = json.load(fh)
        if (data.get("schema_version") != CACHE_SCHEMA_VERSION
                or data.get("d") != self.d or data.get("tol") != self.tol):
            raise ConfigurationError(f"cache file {path} does not match {self.cache_id}")
        with self._lock:
            for k, v in data["values"]:
                self._cache.setdefault(tuple(k), float(v))
        return len(data["values"])

    # -- evaluation ----------------------------------------------------------
    def __call__(self, x, y=None) -> float:
        if y is not None:
            x = np.asarray(x) - np.asarray(y)
        return float(self.values(np.asarray(x)[None, :])[0])

    def values(self, offsets) -> np.ndarray:
        """g(0, x) for every row x of an integer ``(n, d)`` array."""
        offs = np.abs(np.asarray(offsets, dtype=np.int64))
        if offs.ndim != 2 or offs.shape[1] != self.d:
            raise ConfigurationError(f"offsets must have shape (n, {self.d})")
        if offs.size and offs.max() > self.workspace_radius:
            raise ConfigurationError(
                f"offset exceeds Green workspace radius {self.workspace_radius}")
        offs = np.sort(offs, axis=1)
        base = self.workspace_radius + 1
        if base ** self.d < 2 ** 62:
            # pack each sorted row into one integer; 1-d unique is much faster
            packed = offs @ (base ** np.arange(self.d, dtype=np.int64))
            ukeys, first, inverse = np.unique(packed, return_index=True, return_inverse=True)
            keys = offs[first]
        else:
            keys, inverse = np.unique(offs, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        tkeys = list(map(tuple, keys.tolist()))
        missing = [i for i, k in enumerate(tkeys) if k not in self._cache]
        if missing:
            vals = self._evaluate(keys[missing])
            with self._lock:
                for i, v in zip(missing, vals):
                    self._cache.setdefault(tkeys[i], float(v))
        uvals = np.array([self._cache[k] for k in tkeys])
        return uvals[inverse]

    def _evaluate(self, n: np.ndarray) -> np.ndarray:
        # T0 and every refinement decision depend on the point alone, so a
        # cached value does not depend on which batch computed it.
        out = np.empty(len(n))
        nmax = n.max(axis=1)
        for v in np.unique(nmax):
            sel = np.flatnonzero(nmax == v)
            out[sel] = self._evaluate_group(n[sel], int(v))
        return out

    def _evaluate_group(self, n: np.ndarray, nmax: int) -> np.ndarray:
        d = self.d
        T0 = max(self.asymptotic_switch, 25.0 * d * nmax * nmax)
        edges = [0.0, 0.5]
        while edges[-1] * 2 < T0:
            edges.append(edges[-1] * 2)
        edges.append(T0)
        panel_tol = self.tol / (4 * len(edges))
        total = np.zeros(len(n))
        everyone = np.arange(len(n))
        stack = [(a, b, 0, panel_tol, everyone) for a, b in zip(edges[:-1], edges[1:])]
        while stack:
            a, b, depth, ptol, idx = stack.pop()
            m = 0.5 * (a + b)
            sub = n[idx]
            whole = _panel(sub, a, b, d)
            halves = _panel(sub, a, m, d) + _panel(sub, m, b, d)
            ok = np.abs(whole - halves) <= ptol
            total[idx[ok]] += halves[ok]
            if ok.all():
                continue
            if depth >= 40:
                raise NumericError("Green quadrature did not converge", panel=(a, b),
                                   error=float(np.abs(whole - halves).max()), tol=ptol)
            rest = idx[~ok]
            stack.append((a, m, depth + 1, ptol / 2, rest))
            stack.append((m, b, depth + 1, ptol / 2, rest))
        total += _tail(n, T0, d, self.series_terms)
        return total

    # -- derived quantities --------------------------------------------------
    @property
    def g00(self) -> float:
        return self((0,) * self.d)

    def envelope_constant(self) -> float:
        """Certified-by-inflation bound C with g(0,y) <= C |y|^{2-d} far out.

        Maximum of g(0,y) |y|^{d-2} over 10 <= |y| <= 30, inflated by 1.25.
        This is an empirical upper estimate, not the true constant.
        """
        if self._envelope is None:
            pts = _sorted_orthant_points(self.d, 10.0, 30.0)
            vals = self.values(pts)
            r = np.sqrt((pts * pts).sum(axis=1).astype(float))
            self._envelope = 1.25 * float((vals * r ** (self.d - 2)).max())
        return self._envelope


def _sorted_orthant_points(d: int, r_lo: float, r_hi: float) -> np.ndarray:
    """Points 0 <= y_1 <= ... <= y_d with r_lo <= |y| <= r_hi (one per symmetry class)."""
    R = int(math.floor(r_hi))
    pts = [[]]
    for _ in range(d):
        pts = [p + [c] for p in pts for c in range(p[-1] if p else 0, R + 1)]
    arr = np.array(pts, dtype=np.int64)
    n2 = (arr * arr).sum(axis=1)
    return arr[(n2 >= r_lo * r_lo) & (n2 <= r_hi * r_hi)]


def green_at(kernel: GreenKernel, x) -> float:
    """g(0, x)."""
    return kernel(x)


def green_cross(kernel: GreenKernel, A: PointSet, B: PointSet) -> np.ndarray:
    """Matrix ``[g(a, b)]`` for a in A, b in B."""
    a, b = A.coords, B.coords
    out = np.empty((len(a), len(b)))
    rows = max(1, 2 ** 22 // max(1, len(b)))
    for start in range(0, len(a), rows):
        diff = (a[start:start + rows, None, :] - b[None, :, :]).reshape(-1, kernel.d)
        out[start:start + rows] = kernel.values(diff).reshape(-1, len(b))
    return out


@dataclass
class GreenMatrix:
    """Covariance matrix ``[g(p_i, p_j)]`` of the field on a finite set."""

    base: PointSet
    entries: np.ndarray = field(repr=False)
    jitter: float = 0.0
    _chol: np.ndarray | None = field(default=None, repr=False)

    @property
    def cholesky(self) -> np.ndarray:
        """Lower Cholesky factor (computed once, jitter policy applied)."""
        if self._chol is None:
            self._chol, self.jitter = _cholesky_with_jitter(self.entries)
        return self._chol

    def __len__(self):
        return len(self.base)

    def to_csv(self, path):
        labels = self.base.labels()
        with open(path, "w") as fh:
            fh.write("," + ",".join(f'"{l}"' for l in labels) + "\n")
            for lab, row in zip(labels, self.entries):
                fh.write(f'"{lab}",' + ",".join(f"{v:.17g}" for v in row) + "\n")


def _cholesky_with_jitter(A: np.ndarray):
    try:
        return linalg.cholesky(A, lower=True), 0.0
    except linalg.LinAlgError:
        pass
    eps = 1e-12 * float(A[0, 0])
    try:
        return linalg.cholesky(A + eps * np.eye(len(A)), lower=True), eps
    except linalg.LinAlgError as exc:
        raise NumericError("covariance matrix is not positive definite",
                           size=len(A), jitter=eps) from exc


def green_matrix(kernel: GreenKernel, K: PointSet, verify: bool = True) -> GreenMatrix:
    """Assemble the Green matrix on K and verify positive definiteness."""
    if len(K) > kernel.dense_limit:
        raise CapacityError(f"|K| = {len(K)} exceeds the dense limit {kernel.dense_limit}")
    entries = green_cross(kernel, K, K)
    entries = 0.5 * (entries + entries.T)
    G = GreenMatrix(base=K, entries=entries)
    if verify:
        G.cholesky
    return G


def g_sup(kernel: GreenKernel, s: float) -> float:
    """Upper bound for sup_{|y| >= s} g(0, y).

    Exact maximum over the lattice points with ``s <= |y| <= max(2s, 10)``,
    combined with the envelope ``C (max(2s, 10))^{2-d}`` for points beyond.
    """
    if s <= 0:
        raise ConfigurationError("g_sup needs s > 0")
    s = float(s)
    if s not in kernel._gsup:
        R = max(2 * s, 10.0)
        pts = _sorted_orthant_points(kernel.d, s, R)
        shell_max = float(kernel.values(pts).max()) if len(pts) else 0.0
        env = kernel.envelope_constant() * R ** (2 - kernel.d)
        kernel._gsup[s] = max(shell_max, env)
    return kernel._gsup[s]


def harmonicity_residual(kernel: GreenKernel, x) -> float:
    """(1/2d) sum_{z ~ x} g(0,z) - g(0,x) + 1[x = 0]; zero for the exact kernel."""
    x = np.asarray(x, dtype=np.int64)
    d = kernel.d
    nbrs = np.vstack([x + s * np.eye(d, dtype=np.int64)[j]
                      for j in range(d) for s in (1, -1)])
    vals = kernel.values(np.vstack([x[None, :], nbrs]))
    return float(vals[1:].sum() / (2 * d) - vals[0] + (1.0 if not x.any() else 0.0))
