"""Excursion-set percolation on finite boxes.

All statistics are finite-volume quantities, labelled by box side, sampler
method and padding. Crossing events are evaluated through per-sample
bottleneck levels, so an estimate over an h-grid is exactly non-increasing
in h (every level is applied to the same fields).
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from scipy import stats

from . import rng
from .clusters import GridBottleneck, label_grid
from .decoupling import Estimate, MonotoneTestFunction, g_delta_prob
from .errors import ConfigurationError, DomainError
from .green import GreenKernel
from .lattice import PointSet, box
from .sampler import BoxSamplerConfig, FieldSample, conditional_model, sample_box, sample_exact

MIN_SAMPLES = 100
_CHUNK = 50


def ustarstar_constant(d: int) -> Fraction:
    """7 / (2 d 21^d), exactly."""
    return Fraction(7, 2 * d * 21 ** d)


@dataclass
class ExcursionConfig:
    h: float
    L: int
    d: int = 3
    method: str = "auto"
    padding: int = 2
    samples: int = 1000
    seed: int = 0
    dense_limit: int = 4096

    def __post_init__(self):
        if self.samples < MIN_SAMPLES:
            raise ConfigurationError(f"at least {MIN_SAMPLES} samples are required")
        if self.L < 1:
            raise ConfigurationError("box side must be positive")
        if self.method not in ("auto", "dense-exact", "spectral-approx"):
            raise ConfigurationError(f"unknown sampler method {self.method!r}")

    def sampler(self, side: int) -> BoxSamplerConfig:
        method = self.method
        if method == "auto":
            method = "dense-exact" if side ** self.d <= self.dense_limit else "spectral-approx"
        return BoxSamplerConfig(side=side, d=self.d, method=method, padding=self.padding,
                                seed=self.seed)

    def label(self, side: int) -> dict:
        sc = self.sampler(side)
        return {"L": self.L, "d": self.d, "box_side": side, "method": sc.method,
                "padding": sc.padding if sc.method == "spectral-approx" else None,
                "samples": self.samples, "seed": self.seed}


def _box_fields(cfg: ExcursionConfig, side: int, kernel: GreenKernel, tag: str):
    """Yield (start, fields, calibration) chunks of sample fields on [0, side)^d."""
    sc = cfg.sampler(side)
    stream = rng.stream_id("percolation", tag, cfg.d, side, sc.method, sc.padding)
    for lo in range(0, cfg.samples, _CHUNK):
        n = min(_CHUNK, cfg.samples - lo)
        bb = sample_box(sc, n, kernel, stream=stream, start=lo)
        yield lo, bb.values, bb.calibration


def _as_box_array(field_) -> np.ndarray:
    if isinstance(field_, FieldSample):
        c = field_.base.coords
        shape = tuple(c.max(axis=0) - c.min(axis=0) + 1)
        if int(np.prod(shape)) != len(c):
            raise DomainError("field base is not a rectangular box")
        order = np.lexsort(c.T[::-1])
        return field_.values[order].reshape(shape)
    return np.asarray(field_, dtype=np.float64)


def excursion_components(field_, h: float) -> np.ndarray:
    """Cluster labels of {phi >= h} on a box (smallest flat index per cluster, -1 closed)."""
    return label_grid(_as_box_array(field_) >= h)


def cluster_sizes(labels: np.ndarray) -> np.ndarray:
    lab = labels.ravel()
    lab = lab[lab >= 0]
    return np.bincount(lab)[np.unique(lab)] if len(lab) else np.zeros(0, dtype=np.int64)


# -- crossing events ------------------------------------------------------------

@dataclass
class CrossingEvent:
    """Source/target masks on a box [0, side)^d; ``offset`` maps box index 0 to lattice."""

    name: str
    side: int
    offset: int
    src: np.ndarray = field(repr=False)
    dst: np.ndarray = field(repr=False)


def ustarstar_event(L: int, d: int = 3) -> CrossingEvent:
    """[0, L]^d joined to the boundary of [-L, 2L]^d."""
    side = 3 * L + 1
    x = np.indices((side,) * d) - L
    src = np.all((x >= 0) & (x <= L), axis=0)
    dst = np.any((x == -L) | (x == 2 * L), axis=0)
    return CrossingEvent("box-to-boundary", side, -L, src, dst)


def ball_sphere_event(L: int, d: int = 3) -> CrossingEvent:
    """B(0, L) joined to S(0, 2L), both in the sup norm."""
    side = 4 * L + 1
    r = np.abs(np.indices((side,) * d) - 2 * L).max(axis=0)
    return CrossingEvent("ball-to-sphere", side, -2 * L, r <= L, r == 2 * L)


@dataclass
class PercolationStats:
    label: dict
    levels: np.ndarray = field(default_factory=lambda: np.zeros(0))
    crossing_prob: np.ndarray = field(default_factory=lambda: np.zeros(0))
    crossing_se: np.ndarray = field(default_factory=lambda: np.zeros(0))
    thresholds: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    two_point: dict = field(default_factory=dict)
    single_site: dict = field(default_factory=dict)
    cluster_size_hist: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)

    @classmethod
    def from_table(cls, displacements, values, ses=None, d: int = 3) -> "PercolationStats":
        """Two-point table from given numbers (e.g. synthetic data for fitting)."""
        ses = np.zeros(len(values)) if ses is None else ses
        tp = {tuple(int(v) for v in x): Estimate(float(p), float(e), 0)
              for x, p, e in zip(displacements, values, ses)}
        return cls(label={"d": d, "source": "table"}, two_point=tp)

    def crossing_csv(self, path):
        with open(path, "w") as fh:
            fh.write("h,crossing_prob,se\n")
            for h, p, e in zip(self.levels, self.crossing_prob, self.crossing_se):
                fh.write(f"{h:.17g},{p:.17g},{e:.17g}\n")

    def two_point_csv(self, path):
        with open(path, "w") as fh:
            fh.write("displacement,norm,prob,se,single_site_same_bases\n")
            for x, est in sorted(self.two_point.items(), key=lambda kv: np.hypot.reduce(kv[0])):
                ss = self.single_site.get(x, Estimate(math.nan, math.nan, 0)).value
                fh.write(f'"{x}",{math.sqrt(sum(v * v for v in x)):.17g},'
                         f"{est.value:.17g},{est.se:.17g},{ss:.17g}\n")

    def to_json(self) -> str:
        return json.dumps({
            "schema_version": 1, "label": self.label, "calibration": self.calibration,
            "levels": list(map(float, self.levels)),
            "crossing_prob": list(map(float, self.crossing_prob)),
            "crossing_se": list(map(float, self.crossing_se)),
            "two_point": {str(k): asdict(v) for k, v in self.two_point.items()},
            "single_site": {str(k): asdict(v) for k, v in self.single_site.items()},
            "cluster_size_hist": {str(k): v for k, v in self.cluster_size_hist.items()},
        }, default=float)


def crossing_thresholds(cfg: ExcursionConfig, event: CrossingEvent,
                        kernel: GreenKernel | None = None) -> tuple[np.ndarray, dict]:
    """Per-sample bottleneck levels t: the event holds at level h iff h <= t."""
    kernel = GreenKernel(cfg.d) if kernel is None else kernel
    bn = GridBottleneck((event.side,) * cfg.d, event.src, event.dst)
    out = np.empty(cfg.samples)
    calib = {}
    for lo, fields, calib in _box_fields(cfg, event.side, kernel, event.name):
        for k, f in enumerate(fields):
            out[lo + k] = bn.threshold(f)
    return out, calib


def crossing_probability(cfg: ExcursionConfig, levels=None, event: str = "ustarstar",
                         kernel: GreenKernel | None = None) -> PercolationStats:
    """Crossing probability at ``cfg.h`` (or over ``levels``) from common fields."""
    builder = {"ustarstar": ustarstar_event, "ball-sphere": ball_sphere_event}.get(event)
    if builder is None:
        raise ConfigurationError(f"unknown crossing event {event!r}")
    ev = builder(cfg.L, cfg.d)
    t, calib = crossing_thresholds(cfg, ev, kernel)
    levels = np.atleast_1d(np.asarray([cfg.h] if levels is None else levels, dtype=float))
    hits = (t[None, :] >= levels[:, None]).sum(axis=1)
    est = [Estimate.proportion(int(k), cfg.samples) for k in hits]
    label = dict(cfg.label(ev.side), event=ev.name)
    return PercolationStats(label=label, levels=levels,
                            crossing_prob=np.array([e.value for e in est]),
                            crossing_se=np.array([e.se for e in est]),
                            thresholds=t, calibration=calib)


# -- two-point function ---------------------------------------------------------

def _images(x) -> list[tuple]:
    out = set()
    for perm in itertools.permutations(x):
        for signs in itertools.product((1, -1), repeat=len(x)):
            out.add(tuple(s * v for s, v in zip(signs, perm)))
    return sorted(out)


def guard_margin(L: int) -> int:
    return int(math.ceil(L / 4))


def two_point_function(cfg: ExcursionConfig, displacements, symmetrize: bool = True,
                       kernel: GreenKernel | None = None) -> PercolationStats:
    """Estimates of P[b <-> b+x in {phi >= h}] on the box [0, L)^d.

    Averaged over base points b with b and b+x in the guarded region (margin
    ceil(L/4) from the boundary) and, with ``symmetrize``, over the lattice
    symmetry images of x. ``single_site`` holds P[phi_b >= h] averaged over
    the same base points, which bounds each two-point estimate pathwise.
    """
    kernel = GreenKernel(cfg.d) if kernel is None else kernel
    L, d, m = cfg.L, cfg.d, guard_margin(cfg.L)
    lo_, hi_ = m, L - 1 - m
    plans = {}
    for x in displacements:
        x = tuple(int(v) for v in x)
        if len(x) != d:
            raise DomainError(f"displacement {x} has wrong dimension")
        imgs = _images(x) if symmetrize else [x]
        pairs = []
        for y in imgs:
            y = np.asarray(y)
            a = np.maximum(lo_, lo_ - y)
            b = np.minimum(hi_, hi_ - y)
            if (a > b).any():
                if np.array_equal(y, x):
                    raise DomainError(f"displacement {x} leaves the guarded region "
                                      f"[{lo_}, {hi_}]^{d}")
                continue
            base = np.stack(np.meshgrid(*[np.arange(a[j], b[j] + 1) for j in range(d)],
                                        indexing="ij"), -1).reshape(-1, d)
            pairs.append((np.ravel_multi_index(base.T, (L,) * d),
                          np.ravel_multi_index((base + y).T, (L,) * d)))
        src = np.concatenate([p[0] for p in pairs])
        dst = np.concatenate([p[1] for p in pairs])
        plans[x] = (src, dst)
    per = {x: np.empty(cfg.samples) for x in plans}
    per_ss = {x: np.empty(cfg.samples) for x in plans}
    hist: dict[int, int] = {}
    calib = {}
    for lo, fields, calib in _box_fields(cfg, L, kernel, "two_point"):
        for k, f in enumerate(fields):
            lab = label_grid(f >= cfg.h).ravel()
            for sz in cluster_sizes(lab):
                hist[int(sz)] = hist.get(int(sz), 0) + 1
            for x, (src, dst) in plans.items():
                ls, ld = lab[src], lab[dst]
                per[x][lo + k] = np.mean((ls >= 0) & (ls == ld))
                per_ss[x][lo + k] = np.mean(ls >= 0)
    return PercolationStats(
        label=dict(cfg.label(L), h=cfg.h, guard_margin=m, symmetrize=symmetrize),
        two_point={x: Estimate.mean_of(v) for x, v in per.items()},
        single_site={x: Estimate.mean_of(v) for x, v in per_ss.items()},
        cluster_size_hist=dict(sorted(hist.items())), calibration=calib)


# -- decay fits -----------------------------------------------------------------

@dataclass
class DecayFit:
    model: str
    gamma1: float = math.nan
    gamma2: float = math.nan
    b: float | None = None
    residuals: list = field(default_factory=list)
    r_range: tuple = (math.nan, math.nan)
    n_points: int = 0
    flagged: bool = False
    reason: str = ""

    def to_json(self) -> str:
        out = asdict(self)
        out["schema_version"] = 1
        return json.dumps(out, default=float)


def decay_feature(r: np.ndarray, model: str, b: float | None) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if model == "pure-exponential":
        return r
    return r / np.log(r) ** (3 * b)


def fit_decay(ps: PercolationStats, model: str = "pure-exponential", b: float | None = None,
              min_points: int = 5, snr: float = 10.0) -> DecayFit:
    """Fit log P = log gamma1 - gamma2 * u(|x|) with u(r) = r or r / log^{3b} r.

    Uses displacements whose estimate exceeds ``snr`` standard errors (all
    of them when no error is attached); fewer than ``min_points`` usable
    points gives a flagged result instead of a fit.
    """
    if model not in ("pure-exponential", "log-corrected"):
        raise ConfigurationError(f"unknown decay model {model!r}")
    if model == "log-corrected":
        if b is None or not b > 1:
            raise ConfigurationError("log-corrected model needs b > 1")
        if ps.label.get("d", 3) != 3:
            raise ConfigurationError("log-corrected model is defined for d = 3")
    else:
        b = None
    r, p = [], []
    for x, est in ps.two_point.items():
        rr = math.sqrt(sum(v * v for v in x))
        if model == "log-corrected" and rr <= 1:
            continue
        if est.value > 0 and est.value > snr * est.se:
            r.append(rr)
            p.append(est.value)
    if len(r) < min_points:
        return DecayFit(model=model, b=b, n_points=len(r), flagged=True,
                        reason=f"only {len(r)} displacements with estimate > {snr:g} se")
    r, p = np.asarray(r), np.asarray(p)
    u = decay_feature(r, model, b)
    A = np.column_stack([np.ones_like(u), -u])
    coef, *_ = np.linalg.lstsq(A, np.log(p), rcond=None)
    res = np.log(p) - A @ coef
    return DecayFit(model=model, gamma1=float(math.exp(coef[0])), gamma2=float(coef[1]),
                    b=b, residuals=res.tolist(), r_range=(float(r.min()), float(r.max())),
                    n_points=len(r))


# -- h** proxies ----------------------------------------------------------------

@dataclass
class ScanTable:
    rows: list
    threshold_proxy: dict
    alpha_proxy: list
    labels: dict

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("L,h,crossing_prob,se,method,padding\n")
            for r in self.rows:
                fh.write(f"{r['L']},{r['h']:.17g},{r['p']:.17g},{r['se']:.17g},"
                         f"{r['method']},{r['padding']}\n")

    def to_json(self) -> str:
        return json.dumps({"schema_version": 1, "rows": self.rows,
                           "threshold_proxy": self.threshold_proxy,
                           "alpha_proxy": self.alpha_proxy, "labels": self.labels},
                          default=float)


def _first_below(levels, values, c):
    idx = np.nonzero(np.asarray(values) < c)[0]
    return None if len(idx) == 0 else float(levels[idx[0]])


def hstar_scan(L_list, h_grid, samples: int, seed: int, d: int = 3, method: str = "auto",
               padding: int = 2, kernel: GreenKernel | None = None) -> ScanTable:
    """Crossing table over (L, h) with two finite-volume proxies.

    ``threshold_proxy``: smallest grid level whose estimate at the largest L
    falls below 7/(2d 21^d), bracketed by the same rule applied to
    estimate -/+ 2 se. ``alpha_proxy``: per-level slope of log P against log L.
    """
    if not len(L_list) or not len(h_grid):
        raise ConfigurationError("L and h grids must be nonempty")
    kernel = GreenKernel(d) if kernel is None else kernel
    h_grid = np.asarray(sorted(h_grid), dtype=float)
    L_list = sorted(int(L) for L in L_list)
    c = float(ustarstar_constant(d))
    rows, labels, per_L = [], {}, {}
    for L in L_list:
        cfg = ExcursionConfig(h=float(h_grid[0]), L=L, d=d, method=method, padding=padding,
                              samples=samples, seed=seed)
        st = crossing_probability(cfg, levels=h_grid, kernel=kernel)
        labels[L] = dict(st.label, calibration=st.calibration)
        per_L[L] = st
        for h, p, e in zip(h_grid, st.crossing_prob, st.crossing_se):
            rows.append({"L": L, "h": float(h), "p": float(p), "se": float(e),
                         "method": st.label["method"], "padding": st.label["padding"]})
    top = per_L[L_list[-1]]
    hit = _first_below(h_grid, top.crossing_prob, c)
    if hit is None:
        status = "undefined-above-grid"
    elif hit == h_grid[0]:
        status = "unresolved-below"
    else:
        status = "resolved"
    proxy = {"name": "finite-volume threshold proxy", "L": L_list[-1], "constant": c,
             "h": hit, "status": status,
             "h_low": _first_below(h_grid, top.crossing_prob - 2 * top.crossing_se, c),
             "h_high": _first_below(h_grid, top.crossing_prob + 2 * top.crossing_se, c)}
    alphas = []
    for i, h in enumerate(h_grid):
        p = np.array([per_L[L].crossing_prob[i] for L in L_list])
        entry = {"name": "finite-volume decay-exponent proxy", "h": float(h),
                 "alpha": None, "stderr": None}
        if len(L_list) >= 2 and (p > 0).all():
            lr = stats.linregress(np.log(L_list), np.log(p))
            entry["alpha"] = float(-lr.slope)
            entry["stderr"] = float(lr.stderr) if len(L_list) > 2 else None
        alphas.append(entry)
    return ScanTable(rows, proxy, alphas, labels)


# -- sprinkled product bound ----------------------------------------------------

@dataclass
class SprinkledReport:
    r: int
    s: int
    rows: list
    hard_violations: int
    samples: int

    def to_csv(self, path):
        keys = list(self.rows[0])
        with open(path, "w") as fh:
            fh.write(",".join(keys) + "\n")
            for row in self.rows:
                fh.write(",".join(f"{row[k]:.17g}" if isinstance(row[k], float) else str(row[k])
                                  for k in keys) + "\n")


def sprinkled_product_check(r: int, s: int, levels, deltas, samples: int, seed: int,
                            d: int = 3, kernel: GreenKernel | None = None,
                            n_gdelta: int = 100_000) -> SprinkledReport:
    """Check P_h[A1 A2] <= P_{h-delta}[A1] P_{h-delta}[A2] + 2 P[G_delta^c] + 3 se.

    A1, A2 are left-right crossings (along axis 0) of the boxes [0, r)^d and
    [0, r)^d + (r - 1 + s) e1, at distance s. The joint probability and the two
    marginals come from three independent blocks of exact samples on the union
    of the boxes; P[G_delta^c] is the exact-law estimate for K1 = B1, K2 = B2.
    The shape term (r+s)^d exp(-delta^2 s^(d-2)) is reported for comparison only.
    """
    if samples < MIN_SAMPLES:
        raise ConfigurationError(f"at least {MIN_SAMPLES} samples are required")
    kernel = GreenKernel(d) if kernel is None else kernel
    B1 = box(r, d)
    shift = np.zeros(d, dtype=np.int64)
    shift[0] = r - 1 + s
    B2 = B1.translate(shift)
    U = B1.union(B2)
    A1 = MonotoneTestFunction("crossing", U, B1, a=0.0)
    A2 = MonotoneTestFunction("crossing", U, B2, a=0.0)
    for A in (A1, A2):
        A.self_test(seed=seed)
    stream = rng.stream_id("sprinkled", d, r, s)
    blocks = []
    for j in range(3):
        fs = sample_exact(kernel, U, samples, seed, stream=stream, start=j * samples)
        blocks.append((A1._crossing_level(fs.values), A2._crossing_level(fs.values)))
    model = conditional_model(kernel, B1, B2)
    rows, hard = [], 0
    for delta in deltas:
        P = g_delta_prob(model, delta, n_gdelta, seed,
                         stream=rng.stream_id("sprinkled_gdelta", d, r, s, float(delta))).prob
        for h in levels:
            J = Estimate.mean_of((blocks[0][0] >= h) & (blocks[0][1] >= h))
            M1 = Estimate.mean_of(blocks[1][0] >= h - delta)
            M2 = Estimate.mean_of(blocks[2][1] >= h - delta)
            prod = M1.value * M2.value
            se = math.sqrt(J.se ** 2 + (M2.value * M1.se) ** 2 + (M1.value * M2.se) ** 2
                           + (2 * P.se) ** 2)
            bound = prod + 2 * P.value
            ok = J.value <= bound + 3 * se
            hard += not ok
            rows.append({"r": r, "s": s, "h": float(h), "delta": float(delta),
                         "joint": J.value, "marg1": M1.value, "marg2": M2.value,
                         "product": prod, "P_Gc": P.value, "se": se, "bound": bound,
                         "margin_sigma": (bound - J.value) / se if se > 0 else math.inf,
                         "shape_term": float((r + s) ** d
                                             * math.exp(-delta ** 2 * s ** (d - 2))),
                         "ok": bool(ok)})
    return SprinkledReport(r, s, rows, hard, samples)
