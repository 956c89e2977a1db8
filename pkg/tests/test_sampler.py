import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from gffdecouple import rng
from gffdecouple.errors import ConfigurationError, DomainError
from gffdecouple.green import green_at, green_matrix
from gffdecouple.lattice import PointSet, box
from gffdecouple.sampler import (BoxSamplerConfig, FieldBatch, SpectralBoxSampler,
                                 conditional_model, sample_box, sample_conditional,
                                 sample_exact)


# -- random streams -------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 63), st.integers(1, 9), st.integers(0, 40), st.integers(1, 30))
def test_draws_do_not_depend_on_batching(seed, dim, start, n):
    whole = rng.normals(seed, 5, 0, start + n, dim)
    part = rng.normals(seed, 5, start, n, dim)
    assert np.array_equal(whole[start:], part)


@pytest.mark.parametrize("workers", [2, 3, 8])
def test_workers_invariant(workers):
    a = rng.normals(11, rng.stream_id("x", 1), 3, 1000, 7)
    b = rng.normals(11, rng.stream_id("x", 1), 3, 1000, 7, workers=workers, chunk=37)
    assert np.array_equal(a, b)


def test_streams_and_normality():
    a = rng.normals(0, rng.stream_id("a"), 0, 20000, 3)
    b = rng.normals(0, rng.stream_id("b"), 0, 20000, 3)
    assert not np.array_equal(a, b)
    assert rng.stream_id("a") == rng.stream_id("a")
    assert stats.kstest(a.ravel(), "norm").pvalue > 1e-3
    assert abs(np.corrcoef(a[:, 0], b[:, 0])[0, 1]) < 0.03
    u = rng.uniforms(0, 1, 0, 1000, 4)
    assert (u > 0).all() and (u < 1).all()


# -- exact field samples --------------------------------------------------------------

def test_exact_covariance(kernel):
    K = PointSet([[0, 0, 0], [1, 0, 0], [3, 2, 0], [0, 0, 5]])
    batch = sample_exact(kernel, K, 100_000, seed=3)
    G = green_matrix(kernel, K).entries
    C = np.cov(batch.values.T)
    se = np.sqrt((G ** 2 + np.outer(np.diag(G), np.diag(G))) / len(batch))
    assert (np.abs(C - G) < 4 * se).all()


def test_exact_provenance_and_reproducible(kernel):
    K = PointSet([[0, 0, 0], [2, 0, 0]])
    a = sample_exact(kernel, K, 10, seed=9, workers=1)
    b = sample_exact(kernel, K, 6, seed=9, start=4, workers=3)
    assert np.array_equal(a.values[4:], b.values)
    s = b[1]
    assert s.provenance.draw_index == 5 and s.provenance.master_seed == 9
    assert len(a.samples()) == 10


def test_binary_and_csv_roundtrip(tmp_path, kernel):
    K = PointSet([[0, 0, 0], [2, -1, 0], [4, 0, 3]])
    batch = sample_exact(kernel, K, 17, seed=2, start=5)
    batch.to_binary(tmp_path / "f.bin")
    back = FieldBatch.from_binary(tmp_path / "f.bin")
    assert np.array_equal(back.values, batch.values)
    assert back.base == K and (back.master_seed, back.stream_id, back.start) == \
        (2, batch.stream_id, 5)
    batch.to_csv(tmp_path / "f.csv")
    rows = list(csv.reader(open(tmp_path / "f.csv")))
    assert rows[0][1:] == K.labels()
    assert np.array_equal(np.array(rows[1:], dtype=float)[:, 1:], batch.values)
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(DomainError):
        FieldBatch.from_binary(tmp_path / "bad.bin")


# -- conditional law ------------------------------------------------------------------

@pytest.fixture(scope="module")
def model(kernel):
    K1 = PointSet([[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    K2 = PointSet([[6, 0, 0], [6, 1, 0], [7, 0, 1]])
    return conditional_model(kernel, K1, K2)


def test_joint_covariance(kernel, model):
    G = green_matrix(kernel, model.K1.union(model.K2)).entries
    assert np.abs(model.joint_covariance() - G).max() < 1e-12


def test_conditional_zero_boundary(model):
    b = sample_conditional(model, np.zeros(3), 50_000, seed=1)
    assert np.abs(b.values.mean(axis=0)).max() < 4 * math.sqrt(model.schur.diagonal().max()
                                                                 / 50_000)


def test_conditional_scalar_mean(kernel):
    K1, K2 = PointSet([[0, 0, 0]]), PointSet([[4, 0, 0]])
    m = conditional_model(kernel, K1, K2)
    g = green_at(kernel, (4, 0, 0))
    assert m.M[0, 0] == pytest.approx(g / kernel.g00, rel=1e-12)
    assert m.schur[0, 0] == pytest.approx(kernel.g00 - g * g / kernel.g00, rel=1e-12)
    b = sample_conditional(m, np.array([2.0]), 100_000, seed=4)
    se = math.sqrt(m.schur[0, 0] / 1e5)
    assert abs(b.values.mean() - 2 * g / kernel.g00) < 4 * se


def test_conditional_reproduces_joint_law(kernel, model):
    n = 100_000
    phi1 = sample_exact(kernel, model.K1, n, seed=7)
    h = phi1.values @ model.M.T
    xi = rng.normals(8, 1, 0, n, len(model.K2))
    phi2 = h + xi @ model.schur_chol.T
    joint = np.hstack([phi1.values, phi2])
    C = np.cov(joint.T)
    G = model.joint_covariance()
    se = np.sqrt((G ** 2 + np.outer(np.diag(G), np.diag(G))) / n)
    assert (np.abs(C - G) < 4 * se).all()
    # fluctuation independent of phi_K1
    r = np.corrcoef(np.hstack([phi1.values, phi2 - h]).T)[:3, 3:]
    assert np.abs(r).max() < 4 / math.sqrt(n)


def test_conditional_shape_check(model):
    with pytest.raises(DomainError):
        sample_conditional(model, np.zeros(2), 10, seed=0)
    with pytest.raises(DomainError):
        conditional_model(model.kernel, model.K1, model.K1)


# -- boxes ------------------------------------------------------------------------------

def test_dense_box_matches_green(kernel):
    cfg = BoxSamplerConfig(side=4, seed=1)
    b = sample_box(cfg, 40_000, kernel)
    G = green_matrix(kernel, box(4, 3)).entries
    C = np.cov(b.values.reshape(len(b.values), -1).T)
    se = np.sqrt((G ** 2 + np.outer(np.diag(G), np.diag(G))) / 40_000)
    assert (np.abs(C - G) < 5 * se).all()
    again = sample_box(cfg, 40_000, kernel)
    assert np.array_equal(b.values, again.values)


def test_spectral_calibration(kernel):
    s = SpectralBoxSampler(BoxSamplerConfig(6, method="spectral-approx", padding=4),
                           kernel.g00)
    assert s.calibration["raw_center_deficit"] < 0.05
    assert s.calibration["variance_scale"] * s.calibration["raw_center_variance"] == \
        pytest.approx(kernel.g00)


def test_spectral_dirichlet_variance_against_solve():
    # variance of the killed walk Green function on a small box by direct inversion
    cfg = BoxSamplerConfig(3, method="spectral-approx", padding=2, calibrate=False)
    s = SpectralBoxSampler(cfg)
    N = s.N
    pts = box(N, 3).coords
    idx = {tuple(p): i for i, p in enumerate(pts)}
    A = np.eye(len(pts))
    for p, i in idx.items():
        for j in range(3):
            for e in (-1, 1):
                q = list(p)
                q[j] += e
                if tuple(q) in idx:
                    A[i, idx[tuple(q)]] -= 1 / 6
    Ginv = np.linalg.inv(A)
    for site in [(0, 0, 0), (2, 3, 1), (5, 5, 5)]:
        assert s.dirichlet_variance(site) == pytest.approx(Ginv[idx[site], idx[site]],
                                                            rel=1e-10)


def test_spectral_empirical_variance(kernel):
    cfg = BoxSamplerConfig(6, method="spectral-approx", padding=4, seed=3)
    b = sample_box(cfg, 4000, kernel)
    v = b.values[:, 3, 3, 3].var()
    assert v == pytest.approx(kernel.g00, rel=4 * math.sqrt(2 / 4000))
    assert b.calibration["method"] == "spectral-approx"


def test_box_config_errors():
    with pytest.raises(ConfigurationError):
        BoxSamplerConfig(4, method="spectral-approx", padding=1)
    with pytest.raises(ConfigurationError):
        BoxSamplerConfig(4, method="fancy")


def test_box_save(tmp_path, kernel):
    b = sample_box(BoxSamplerConfig(3, seed=0), 5, kernel)
    b.save(tmp_path / "f.npy")
    assert np.array_equal(np.load(tmp_path / "f.npy"), b.values)
    meta = json.load(open(tmp_path / "f.npy.json"))
    assert "row-major" in meta["index_order"]
