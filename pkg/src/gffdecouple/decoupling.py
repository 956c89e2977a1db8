"""Monte Carlo and exact checks of the sprinkled decoupling inequalities.

With h = M phi_{K1} the conditional mean on K2 and
G_delta = {max_{x in K2} |h_x| <= delta/2}, the checked statements are

* conditional:  E f2(phi-delta) - P[G^c] <= E(f2(phi) | phi_K1) <= E f2(phi+delta) + P[G^c]
  on G_delta, for increasing f2 supported on K2;
* unconditional: E f1 E f2(phi-delta) - 2P[G^c] <= E f1 f2 <= E f1 E f2(phi+delta) + 2P[G^c];
* tail bound: P[G^c] <= 2 |H1^(=s)| exp(-delta^2 / (8 g_s)).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from . import rng
from .clusters import GraphBottleneck, lattice_edges
from .errors import ConfigurationError, DomainError
from .green import GreenKernel, g_sup
from .lattice import AuxiliaryGeometry, PointSet
from .potential import h_variances
from .sampler import ConditionalModel

SIGMA = 3.0
FP_RATE = float(stats.norm.sf(SIGMA))  # nominal one-sided false-positive rate per test
P_VALUE_MIN = 0.01
_CHUNK = 20000


@dataclass(frozen=True)
class SprinkleEvent:
    """G_delta = {max_{K2} |h| <= delta/2}."""

    delta: float
    K2: PointSet

    def __post_init__(self):
        if not self.delta > 0:
            raise DomainError("delta must be positive")

    @property
    def threshold(self) -> float:
        return self.delta / 2

    def holds(self, h: np.ndarray) -> np.ndarray:
        return np.abs(h).max(axis=-1) <= self.threshold


# -- test functions -----------------------------------------------------------

@dataclass
class MonotoneTestFunction:
    """[0,1]-valued function of the field on ``base`` depending only on ``support``.

    kinds
        ``threshold``  1[min_{support} eta >= a]
        ``ramp``       clamp((min_{support} eta - a) / w, 0, 1)
        ``crossing``   1[{eta >= a} joins the two extreme faces of the support along axis 0]
        ``constant``   c (parameter ``a``)
        ``custom``     any callable on arrays of shape (..., |base|)
    """

    kind: str
    base: PointSet
    support: PointSet
    a: float = 0.0
    w: float = 1.0
    fn: Callable | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("threshold", "ramp", "crossing", "constant", "custom"):
            raise ConfigurationError(f"unknown test function kind {self.kind!r}")
        if self.kind == "ramp" and not self.w > 0:
            raise ConfigurationError("ramp width must be positive")
        if self.kind == "custom" and self.fn is None:
            raise ConfigurationError("custom test function needs a callable")
        if self.kind == "constant" and not 0 <= self.a <= 1:
            raise ConfigurationError("constant must lie in [0, 1]")
        missing = [p for p in self.support if p not in self.base]
        if missing:
            raise DomainError(f"support not contained in base set: {missing[:3]}")
        self._idx = np.array([self.base.index(p) for p in self.support], dtype=np.int64)
        if self.kind == "crossing":
            c = self.support.coords
            lo, hi = c[:, 0] == c[:, 0].min(), c[:, 0] == c[:, 0].max()
            self._bn = GraphBottleneck(len(c), lattice_edges(c), lo, hi)

    @property
    def spec(self) -> str:
        if self.kind == "ramp":
            return f"ramp:{self.a!r}:{self.w!r}"
        return f"{self.kind}:{self.a!r}"

    def _crossing_level(self, eta: np.ndarray) -> np.ndarray:
        sub = eta[..., self._idx].reshape(-1, len(self._idx))
        out = np.array([self._bn.threshold(row) for row in sub])
        return out.reshape(eta.shape[:-1])

    def __call__(self, eta) -> np.ndarray:
        eta = np.asarray(eta, dtype=np.float64)
        if eta.shape[-1] != len(self.base):
            raise DomainError(f"expected last axis {len(self.base)}, got {eta.shape[-1]}")
        if self.kind == "threshold":
            return (eta[..., self._idx].min(axis=-1) >= self.a).astype(np.float64)
        if self.kind == "ramp":
            m = eta[..., self._idx].min(axis=-1)
            return np.clip((m - self.a) / self.w, 0.0, 1.0)
        if self.kind == "crossing":
            return (self._crossing_level(eta) >= self.a).astype(np.float64)
        if self.kind == "constant":
            return np.full(eta.shape[:-1], float(self.a))
        return np.asarray(self.fn(eta), dtype=np.float64)

    def mirrored(self) -> "MonotoneTestFunction":
        """The decreasing function eta -> f(-eta)."""
        return MonotoneTestFunction("custom", self.base, self.support,
                                    fn=lambda eta, f=self: f(-np.asarray(eta)))

    def self_test(self, probes: int = 1000, seed: int = 0, increasing: bool = True) -> None:
        """Random-probe checks; raises DomainError on failure.

        Checks values in [0, 1], monotonicity under random coordinatewise
        increases and invariance under changes off the support.
        """
        m = len(self.base)
        u = rng.uniforms(seed, rng.stream_id("self_test", self.spec), 0, probes, 3 * m)
        scale = max(1.0, abs(self.a) + 2.0)
        eta = scale * (2 * u[:, :m] - 1) + self.a
        bump = np.where(u[:, m:2 * m] < 0.5, 0.0, 2 * scale * u[:, 2 * m:])
        f0, f1 = self(eta), self(eta + bump)
        if not ((f0 >= 0) & (f0 <= 1)).all():
            raise DomainError("test function leaves [0, 1]")
        bad = (f1 < f0) if increasing else (f1 > f0)
        if bad.any():
            raise DomainError(f"test function fails the monotonicity probe on {int(bad.sum())}"
                              f" of {probes} probes")
        off = np.ones(m, dtype=bool)
        off[self._idx] = False
        if off.any():
            moved = eta.copy()
            moved[:, off] += 5 * scale * (2 * u[:, 2 * m:][:, off] - 1)
            if (self(moved) != f0).any():
                raise DomainError("test function depends on sites outside its support")


def parse_test_function(spec: str, base: PointSet, support: PointSet | None = None
                        ) -> MonotoneTestFunction:
    """Parse ``threshold:a``, ``ramp:a:w``, ``crossing:a`` or ``constant:c``."""
    parts = spec.split(":")
    try:
        kind, params = parts[0], [float(p) for p in parts[1:]]
    except ValueError:
        raise ConfigurationError(f"bad test function spec {spec!r}") from None
    need = {"threshold": 1, "ramp": 2, "crossing": 1, "constant": 1}
    if kind not in need or len(params) != need[kind]:
        raise ConfigurationError(f"bad test function spec {spec!r}")
    support = base if support is None else support
    if kind == "ramp":
        return MonotoneTestFunction(kind, base, support, a=params[0], w=params[1])
    return MonotoneTestFunction(kind, base, support, a=params[0])


# -- estimates ----------------------------------------------------------------

@dataclass
class Estimate:
    value: float
    se: float
    n: int

    @classmethod
    def mean_of(cls, x: np.ndarray) -> "Estimate":
        x = np.asarray(x, dtype=np.float64)
        n = len(x)
        se = float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
        return cls(float(x.mean()), se, n)

    @classmethod
    def proportion(cls, k: int, n: int) -> "Estimate":
        """Binomial proportion; the se uses (k+1/2)/(n+1) when k is 0 or n so it stays positive."""
        p = k / n
        q = (k + 0.5) / (n + 1)
        return cls(p, math.sqrt(max(p * (1 - p), q * (1 - q)) / n), n)


@dataclass
class GDeltaEstimate:
    prob: Estimate
    union_bound: float
    h_sd: np.ndarray = field(repr=False)


def _h_factor(model: ConditionalModel) -> np.ndarray:
    # h = M L11 xi for standard normal xi
    return model.M @ model.G11.cholesky


def g_delta_prob(model: ConditionalModel, delta: float, n: int, seed: int,
                 stream: int | None = None, workers: int = 1) -> GDeltaEstimate:
    """MC estimate of P[G_delta^c] on the exact law of h, plus the per-site union bound."""
    if n < 10_000:
        raise ConfigurationError("g_delta_prob needs n >= 10^4")
    ev = SprinkleEvent(delta, model.K2)
    stream = rng.stream_id("g_delta", float(delta)) if stream is None else stream
    F = _h_factor(model)
    fails = 0
    for lo in range(0, n, _CHUNK):
        k = min(_CHUNK, n - lo)
        xi = rng.normals(seed, stream, lo, k, len(model.K1), workers=workers)
        fails += int((~ev.holds(xi @ F.T)).sum())
    sd = np.sqrt(model.h_variances())
    union = float(np.sum(2 * stats.norm.sf(ev.threshold / np.maximum(sd, 1e-300))))
    return GDeltaEstimate(Estimate.proportion(fails, n), union, sd)


def tail_bound_rhs(geom: AuxiliaryGeometry, kernel: GreenKernel, delta: float) -> float:
    """2 |H1^(=s)| exp(-delta^2 / (8 g_s))."""
    if delta < 0:
        raise DomainError("delta must be nonnegative")
    return 2 * geom.h1_shell_size * math.exp(-delta ** 2 / (8 * g_sup(kernel, geom.s)))


def choose_delta(geom: AuxiliaryGeometry, kernel: GreenKernel, target: float) -> float:
    """Smallest delta with tail_bound_rhs(delta) <= target (0 if the bound is already trivial)."""
    if not target > 0:
        raise DomainError("target probability must be positive")
    ratio = 2 * geom.h1_shell_size / target
    if ratio <= 1:
        return 0.0
    return math.sqrt(8 * g_sup(kernel, geom.s) * math.log(ratio))


@dataclass
class HVarianceCheck:
    g_s: float
    max_var_K2: float
    max_var_shell: float
    exceptions: int


def h_variance_check(model: ConditionalModel, geom: AuxiliaryGeometry,
                     kernel: GreenKernel) -> HVarianceCheck:
    """Exact Var h_x <= g_s on K2 and on the shell H1^(=s)."""
    gs = g_sup(kernel, geom.s)
    v2 = model.h_variances()
    vs = h_variances(kernel, model.K1, geom.h1_shell, G11=model.G11)
    exc = int((v2 > gs).sum() + (vs > gs).sum())
    return HVarianceCheck(gs, float(v2.max()), float(vs.max()) if len(vs) else 0.0, exc)


# -- reports ------------------------------------------------------------------

def binomial_pvalue(violations: int, tests: int, rate: float = FP_RATE) -> float:
    """P[Bin(tests, rate) >= violations]."""
    if violations <= 0:
        return 1.0
    return float(stats.binom.sf(violations - 1, tests, rate))


@dataclass
class DecouplingReport:
    kind: str
    delta: float
    f2: str
    estimates: dict
    n_outer: int
    n_inner: int
    n_conditioned: int
    tests: int
    violations: int
    p_value: float
    coupling_failures: int
    margins: np.ndarray = field(repr=False)
    aux: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.p_value >= P_VALUE_MIN and self.coupling_failures == 0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["estimates"] = {k: asdict(v) if isinstance(v, Estimate) else v
                            for k, v in self.estimates.items()}
        out["margins"] = np.asarray(self.margins).tolist()
        out["passed"] = self.passed
        out["schema_version"] = 1
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), default=float)

    def margins_to_csv(self, path):
        """One row per test: margin = bound - estimate in units of the combined se."""
        with open(path, "w") as fh:
            fh.write("index,side,margin_sigma\n")
            for i, row in enumerate(np.atleast_2d(self.margins)):
                for side, m in zip(("lower", "upper"), row):
                    fh.write(f"{i},{side},{m:.17g}\n")


def combined_pvalue(reports) -> tuple[int, int, float]:
    """Pooled (violations, tests, p-value) over several reports."""
    v = sum(r.violations for r in reports)
    t = sum(r.tests for r in reports)
    return v, t, binomial_pvalue(v, t)


def _field_on_K2(model: ConditionalModel, seed: int, stream: int, n: int,
                 workers: int) -> np.ndarray:
    # exact unconditional draws on K2 via the decomposition
    F = _h_factor(model)
    m1 = len(model.K1)
    xi = rng.normals(seed, stream, 0, n, m1 + len(model.K2), workers=workers)
    return xi[:, :m1] @ F.T + xi[:, m1:] @ model.schur_chol.T


def _shifted_means(f2, eta: np.ndarray, delta: float):
    up, mid, down = f2(eta + delta), f2(eta), f2(eta - delta)
    bad = int(((up < mid) | (mid < down)).sum())
    return up, mid, down, bad


def verify_conditional(model: ConditionalModel, f2: MonotoneTestFunction, delta: float,
                       n_outer: int = 100, n_inner: int = 10_000, seed: int = 0,
                       n_ref: int | None = None, workers: int = 1) -> DecouplingReport:
    """Check the conditional inequality draw by draw.

    For each outer draw of phi_K1 on which G_delta holds, E(f2(phi) | phi_K1)
    is estimated from ``n_inner`` conditional draws and compared with the
    unconditional bounds E f2(phi -/+ delta) -/+ P[G^c] (``n_ref`` reference
    draws each). A side is violated when it fails by more than 3 combined
    standard errors.
    """
    if f2.base != model.K2:
        raise DomainError("f2 must be defined on K2")
    f2.self_test(seed=seed)
    n_ref = max(n_inner * 10, 10_000) if n_ref is None else n_ref
    eta = _field_on_K2(model, seed, rng.stream_id("vc_ref", f2.spec, float(delta)),
                       n_ref, workers)
    up, _, down, bad = _shifted_means(f2, eta, delta)
    U, D = Estimate.mean_of(up), Estimate.mean_of(down)
    P = g_delta_prob(model, delta, max(n_ref, 10_000), seed,
                     stream=rng.stream_id("vc_gdelta", float(delta)), workers=workers).prob
    ev = SprinkleEvent(delta, model.K2)
    phi1 = rng.normals(seed, rng.stream_id("vc_outer"), 0, n_outer, len(model.K1)) \
        @ model.G11.cholesky.T
    h = phi1 @ model.M.T
    good = ev.holds(h)
    margins, cond = [], []
    for i in np.nonzero(good)[0]:
        xi = rng.normals(seed, rng.stream_id("vc_inner", int(i)), 0, n_inner,
                         len(model.K2), workers=workers)
        inner = h[i][None, :] + xi @ model.schur_chol.T
        _, mid, _, b = _shifted_means(f2, inner, delta)
        bad += b
        C = Estimate.mean_of(mid)
        cond.append(C.value)
        se_lo = math.sqrt(C.se ** 2 + D.se ** 2 + P.se ** 2)
        se_hi = math.sqrt(C.se ** 2 + U.se ** 2 + P.se ** 2)
        margins.append((_margin(C.value - (D.value - P.value), se_lo),
                        _margin(U.value + P.value - C.value, se_hi)))
    margins = np.asarray(margins).reshape(-1, 2)
    tests = margins.size
    viol = int((margins < -SIGMA).sum())
    return DecouplingReport(
        kind="conditional", delta=float(delta), f2=f2.spec,
        estimates={"E_f2_plus": U, "E_f2_minus": D, "P_Gc": P,
                   "cond_mean_min": float(min(cond)) if cond else math.nan,
                   "cond_mean_max": float(max(cond)) if cond else math.nan},
        n_outer=n_outer, n_inner=n_inner, n_conditioned=int(good.sum()),
        tests=tests, violations=viol, p_value=binomial_pvalue(viol, tests),
        coupling_failures=bad, margins=margins,
        aux={"h_variances": model.h_variances().tolist()},
        config={"seed": seed, "n_ref": n_ref, "workers": workers})


def _margin(gap: float, se: float) -> float:
    if se == 0:
        return 0.0 if gap == 0 else math.copysign(math.inf, gap)
    return gap / se


def verify_unconditional(model: ConditionalModel, f1: MonotoneTestFunction,
                     f2: MonotoneTestFunction, delta: float, n: int = 100_000,
                     seed: int = 0, workers: int = 1) -> DecouplingReport:
    """Check both unconditional inequalities for f2 and for the decreasing mirror f2(-.).

    The joint expectation, E f1 and the shifted E f2 come from independent
    blocks of ``n`` exact draws so that their variances add; P[G^c] is the
    exact-law MC estimate of :func:`g_delta_prob`.
    """
    if f2.base != model.K2 or f1.base != model.K1:
        raise DomainError("f1 must be defined on K1 and f2 on K2")
    f2.self_test(seed=seed)
    F = _h_factor(model)
    m1, m2 = len(model.K1), len(model.K2)
    mirror = f2.mirrored()

    def block(name):
        xi = rng.normals(seed, rng.stream_id("vcor", name, f2.spec, float(delta)), 0, n,
                         m1 + m2, workers=workers)
        phi1 = xi[:, :m1] @ model.G11.cholesky.T
        phi2 = xi[:, :m1] @ F.T + xi[:, m1:] @ model.schur_chol.T
        return phi1, phi2

    phi1, phi2 = block("joint")
    v1 = f1(phi1)
    if not ((v1 >= 0) & (v1 <= 1)).all():
        raise DomainError("f1 must take values in [0, 1]")
    J = Estimate.mean_of(v1 * f2(phi2))
    Jm = Estimate.mean_of(v1 * mirror(phi2))
    F1 = Estimate.mean_of(f1(block("f1")[0]))
    eta = block("f2")[1]
    up, mid, down, bad = _shifted_means(f2, eta, delta)
    U, D = Estimate.mean_of(up), Estimate.mean_of(down)
    mup, mmid, mdown = mirror(eta + delta), mirror(eta), mirror(eta - delta)
    bad += int(((mup > mmid) | (mmid > mdown)).sum())
    Um, Dm = Estimate.mean_of(mdown), Estimate.mean_of(mup)  # f2(-(phi-delta)), f2(-(phi+delta))
    P = g_delta_prob(model, delta, max(n, 10_000), seed,
                     stream=rng.stream_id("vcor_gdelta", float(delta)), workers=workers).prob

    def side(joint, marg, sign):
        prod = F1.value * marg.value
        se_prod = math.hypot(marg.value * F1.se, F1.value * marg.se)
        se = math.sqrt(joint.se ** 2 + se_prod ** 2 + (2 * P.se) ** 2)
        if sign > 0:
            return _margin(prod + 2 * P.value - joint.value, se)
        return _margin(joint.value - (prod - 2 * P.value), se)

    margins = np.array([[side(J, D, -1), side(J, U, +1)],
                        [side(Jm, Dm, -1), side(Jm, Um, +1)]])
    viol = int((margins < -SIGMA).sum())
    return DecouplingReport(
        kind="unconditional", delta=float(delta), f2=f2.spec,
        estimates={"E_f1f2": J, "E_f1": F1, "E_f2_plus": U, "E_f2_minus": D,
                   "E_f1f2_mirror": Jm, "E_f2_mirror_plus": Um, "E_f2_mirror_minus": Dm,
                   "P_Gc": P},
        n_outer=n, n_inner=0, n_conditioned=n, tests=margins.size, violations=viol,
        p_value=binomial_pvalue(viol, margins.size), coupling_failures=bad,
        margins=margins, config={"seed": seed, "f1": f1.spec, "workers": workers})
