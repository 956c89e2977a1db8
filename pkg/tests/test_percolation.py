import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from gffdecouple.clusters import GraphBottleneck, GridBottleneck, label_grid, lattice_edges
from gffdecouple.errors import ConfigurationError, DomainError
from gffdecouple.lattice import box
from gffdecouple.percolation import (ExcursionConfig, PercolationStats, ball_sphere_event,
                                     cluster_sizes, crossing_probability, excursion_components,
                                     fit_decay, hstar_scan, sprinkled_product_check,
                                     two_point_function, ustarstar_constant, ustarstar_event)
from gffdecouple.sampler import BoxSamplerConfig, FieldSample, Provenance, sample_box
from oracles import bfs_connected, bfs_partition


def partition(labels):
    out = {}
    for idx in zip(*np.nonzero(labels >= 0)):
        out.setdefault(labels[idx], set()).add(idx)
    return {frozenset(v) for v in out.values()}


def test_labels_match_bfs():
    rs = np.random.default_rng(0)
    for _ in range(100):
        mask = rs.random((5, 5, 5)) < rs.uniform(0.2, 0.6)
        lab = label_grid(mask)
        assert partition(lab) == bfs_partition(mask)
        # canonical label = smallest flat index of the cluster
        flat = lab.ravel()
        for v in np.unique(flat[flat >= 0]):
            assert np.nonzero(flat == v)[0].min() == v


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-1, 1), st.floats(0, 1.5))
def test_partition_nesting(seed, h2, gap):
    f = np.random.default_rng(seed).standard_normal((6, 6, 6))
    hi, lo = label_grid(f >= h2 + gap), label_grid(f >= h2)
    for comp in partition(hi):
        assert len({lo[p] for p in comp}) == 1


def test_extreme_levels():
    f = np.random.default_rng(1).standard_normal((4, 4, 4))
    assert (excursion_components(f, -np.inf) == 0).all()
    assert (excursion_components(f, np.inf) == -1).all()
    assert cluster_sizes(excursion_components(f, -np.inf)).tolist() == [64]


def test_field_sample_input():
    f = np.random.default_rng(2).standard_normal((3, 3, 3))
    fs = FieldSample(box(3, 3), f.ravel(), Provenance(0, 0, 0))
    assert np.array_equal(excursion_components(fs, 0.1), label_grid(f >= 0.1))


def test_bottleneck_matches_bfs():
    rs = np.random.default_rng(3)
    ev = ustarstar_event(1)
    bn = GridBottleneck((ev.side,) * 3, ev.src, ev.dst)
    for _ in range(50):
        f = rs.standard_normal((ev.side,) * 3)
        t = bn.threshold(f)
        for h in (-0.5, 0.0, 0.5, t, np.nextafter(t, np.inf)):
            assert (h <= t) == bfs_connected(f >= h, ev.src, ev.dst)
    c = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
    g = GraphBottleneck(3, lattice_edges(c), np.array([1, 0, 0], bool), np.array([0, 0, 1], bool))
    assert g.threshold(np.array([3.0, -1.0, 2.0])) == -1.0


def test_event_geometry():
    ev = ustarstar_event(2)
    assert ev.side == 7 and ev.src.sum() == 27 and ev.offset == -2
    assert ev.dst.sum() == 7 ** 3 - 5 ** 3
    bs = ball_sphere_event(2)
    assert bs.side == 9 and bs.src.sum() == 125 and bs.dst.sum() == 9 ** 3 - 7 ** 3


def test_constant():
    assert ustarstar_constant(3) == Fraction(7, 55566)
    assert ustarstar_constant(4) == Fraction(7, 8 * 21 ** 4)


def test_crossing_monotone(kernel):
    cfg = ExcursionConfig(h=0.0, L=3, samples=200, seed=4)
    levels = np.linspace(-3, 3, 25)
    st_ = crossing_probability(cfg, levels=levels, kernel=kernel)
    assert (np.diff(st_.crossing_prob) <= 0).all()
    assert crossing_probability(ExcursionConfig(h=-10.0, L=3, samples=100), kernel=kernel) \
        .crossing_prob[0] == 1.0
    assert st_.label["method"] == "dense-exact" and st_.label["box_side"] == 10
    with pytest.raises(ConfigurationError):
        crossing_probability(cfg, event="torus", kernel=kernel)


def test_config_errors():
    with pytest.raises(ConfigurationError):
        ExcursionConfig(h=0, L=4, samples=10)
    with pytest.raises(ConfigurationError):
        ExcursionConfig(h=0, L=4, method="magic")
    assert ExcursionConfig(h=0, L=8).sampler(25).method == "spectral-approx"


def test_single_site(kernel):
    h = 0.8
    cfg = ExcursionConfig(h=h, L=8, samples=2000, seed=5)
    st_ = two_point_function(cfg, [(0, 0, 0)], kernel=kernel)
    b = sample_box(BoxSamplerConfig(8, seed=5), 20_000, kernel)
    v = b.values[:, 4, 4, 4] >= h
    exact = stats.norm.sf(h / math.sqrt(kernel.g00))
    assert abs(v.mean() - exact) < 3 * v.std() / math.sqrt(len(v))
    # the guarded-region average is correlated across sites, so use its own se
    est = st_.two_point[(0, 0, 0)]
    assert abs(est.value - exact) < 3 * est.se


def test_two_point_bounds_and_guard(kernel):
    cfg = ExcursionConfig(h=1.0, L=8, samples=200, seed=1)
    st_ = two_point_function(cfg, [(0, 0, 0), (1, 0, 0), (2, 1, 0)], kernel=kernel)
    for x, est in st_.two_point.items():
        assert est.value <= st_.single_site[x].value
    assert st_.two_point[(1, 0, 0)].value >= st_.two_point[(2, 1, 0)].value
    with pytest.raises(DomainError):
        two_point_function(cfg, [(5, 0, 0)], kernel=kernel)
    assert json.loads(st_.to_json())["schema_version"] == 1


def test_synthetic_fits():
    xs = [(k, 0, 0) for k in range(1, 9)] + [(k, k, 0) for k in range(1, 5)]
    r = np.array([math.hypot(*x) for x in xs])
    ps = PercolationStats.from_table(xs, 2.0 * np.exp(-0.5 * r))
    fit = fit_decay(ps)
    assert abs(fit.gamma2 - 0.5) < 1e-6 and abs(fit.gamma1 - 2.0) < 1e-6
    keep = [x for x, rr in zip(xs, r) if rr > 1]
    rk = np.array([math.hypot(*x) for x in keep])
    ps = PercolationStats.from_table(keep, 0.3 * np.exp(-0.7 * rk / np.log(rk) ** 4.5))
    fit = fit_decay(ps, "log-corrected", b=1.5)
    assert abs(fit.gamma2 - 0.7) < 1e-6 and max(map(abs, fit.residuals)) < 1e-9


def test_fit_flags_and_errors():
    xs = [(k, 0, 0) for k in range(1, 8)]
    ps = PercolationStats.from_table(xs, [1e-3] * 3 + [1e-6] * 4, [1e-5] * 3 + [1e-6] * 4)
    fit = fit_decay(ps)
    assert fit.flagged and fit.n_points == 3 and math.isnan(fit.gamma2)
    with pytest.raises(ConfigurationError):
        fit_decay(ps, "log-corrected", b=1.0)
    with pytest.raises(ConfigurationError):
        fit_decay(PercolationStats.from_table(xs, [1] * 7, d=4), "log-corrected", b=2)
    with pytest.raises(ConfigurationError):
        fit_decay(ps, "power-law")


def test_hstar_scan_saturation(kernel):
    low = hstar_scan([2, 3], [-12, -11], samples=100, seed=0, kernel=kernel)
    assert all(r["p"] == 1.0 for r in low.rows)
    assert low.threshold_proxy["status"] == "undefined-above-grid"
    high = hstar_scan([2, 3], [12, 13], samples=100, seed=0, kernel=kernel)
    assert all(r["p"] == 0.0 for r in high.rows)
    assert high.threshold_proxy["status"] == "unresolved-below"
    assert high.threshold_proxy["h"] == 12.0
    mid = hstar_scan([2, 3], np.linspace(0, 4, 9), samples=100, seed=0, kernel=kernel)
    for L in (2, 3):
        p = [r["p"] for r in mid.rows if r["L"] == L]
        assert (np.diff(p) <= 0).all()
    assert "proxy" in mid.threshold_proxy["name"]
    with pytest.raises(ConfigurationError):
        hstar_scan([], [0], samples=100, seed=0)


def test_sprinkled(kernel):
    rep = sprinkled_product_check(3, 4, [0.0, 1.0], [0.5, 1.0], samples=400, seed=2,
                                  kernel=kernel, n_gdelta=20_000)
    assert rep.hard_violations == 0 and len(rep.rows) == 4
    for row in rep.rows:
        assert row["bound"] == pytest.approx(row["product"] + 2 * row["P_Gc"])
