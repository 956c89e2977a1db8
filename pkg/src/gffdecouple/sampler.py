"""Exact and approximate samplers for the Gaussian free field.

* ``sample_exact``: Cholesky sampling on a finite set.
* ``ConditionalModel`` / ``sample_conditional``: the decomposition
  phi = phi_tilde + h with h = M phi_{K1} (hitting kernel) and phi_tilde
  independent with the Schur-complement covariance.
* ``sample_box``: dense-exact on small boxes, or the zero-boundary field on a
  padded box via the sine basis of the Dirichlet Laplacian.
"""
from __future__ import annotations

import functools
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import fft

from . import rng
from .errors import ConfigurationError, DomainError
from .green import GreenKernel, GreenMatrix, _cholesky_with_jitter, green_cross, green_matrix
from .lattice import PointSet, box
from .potential import HarmonicKernel, harmonic_kernel

_MAGIC = b"GFFS"
_HEADER = struct.Struct("<IIQQQQQ")


@dataclass(frozen=True)
class Provenance:
    master_seed: int
    stream_id: int
    draw_index: int


@dataclass
class FieldSample:
    base: PointSet
    values: np.ndarray
    provenance: Provenance


@dataclass
class FieldBatch:
    """Draws ``start .. start+n-1`` of one stream on a common base set.

    ``values[k]`` is the draw with index ``start + k``.
    """

    base: PointSet
    values: np.ndarray = field(repr=False)
    master_seed: int = 0
    stream_id: int = 0
    start: int = 0

    def __len__(self):
        return len(self.values)

    def __getitem__(self, k) -> FieldSample:
        return FieldSample(self.base, self.values[k],
                           Provenance(self.master_seed, self.stream_id, self.start + k))

    def samples(self) -> list[FieldSample]:
        return [self[k] for k in range(len(self))]

    def to_binary(self, path):
        """Little-endian: magic, header (d, points, draws, seed, stream, start), coords, values."""
        m, d = self.base.coords.shape
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(_HEADER.pack(1, d, m, len(self), self.master_seed,
                                 self.stream_id, self.start))
            fh.write(self.base.coords.astype("<i8").tobytes())
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def from_binary(cls, path) -> "FieldBatch":
        with open(path, "rb") as fh:
            if fh.read(4) != _MAGIC:
                raise DomainError(f"{path} is not a field-sample file")
            _, d, m, n, seed, stream, start = _HEADER.unpack(fh.read(_HEADER.size))
            coords = np.frombuffer(fh.read(8 * m * d), dtype="<i8").reshape(m, d)
            values = np.frombuffer(fh.read(8 * m * n), dtype="<f8").reshape(n, m)
        return cls(PointSet(coords), values.copy(), seed, stream, start)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("draw_index," + ",".join(f'"{l}"' for l in self.base.labels()) + "\n")
            for k, row in enumerate(self.values):
                fh.write(f"{self.start + k}," + ",".join(f"{v:.17g}" for v in row) + "\n")


def sample_exact(kernel: GreenKernel, K: PointSet, n: int, seed: int,
                 stream: int | None = None, start: int = 0, workers: int = 1,
                 G: GreenMatrix | None = None) -> FieldBatch:
    """n independent draws L xi of the field on K, L the Cholesky factor of G_K."""
    G = green_matrix(kernel, K) if G is None else G
    stream = rng.stream_id("sample_exact") if stream is None else stream
    xi = rng.normals(seed, stream, start, n, len(K), workers=workers)
    return FieldBatch(K, xi @ G.cholesky.T, seed, stream, start)


@dataclass
class ConditionalModel:
    """Law of the field on K2 given the field on K1."""

    K1: PointSet
    K2: PointSet
    G11: GreenMatrix = field(repr=False)
    hitting: HarmonicKernel = field(repr=False)
    schur: np.ndarray = field(repr=False)
    schur_chol: np.ndarray = field(repr=False)
    kernel: GreenKernel = field(repr=False, default=None)

    @property
    def M(self) -> np.ndarray:
        return self.hitting.M

    def joint_covariance(self) -> np.ndarray:
        """Covariance of (phi_K1, phi_K2) rebuilt from G11, M and the Schur complement."""
        G11 = self.G11.entries
        G12 = G11 @ self.M.T
        G22 = self.schur + self.M @ G11 @ self.M.T
        return np.block([[G11, G12], [G12.T, G22]])

    def h_covariance(self) -> np.ndarray:
        return self.M @ self.G11.entries @ self.M.T

    def h_variances(self) -> np.ndarray:
        return np.einsum("ij,jk,ik->i", self.M, self.G11.entries, self.M)


def conditional_model(kernel: GreenKernel, K1: PointSet, K2: PointSet) -> ConditionalModel:
    if not K1.isdisjoint(K2):
        raise DomainError("K1 and K2 must be disjoint")
    G11 = green_matrix(kernel, K1)
    hk = harmonic_kernel(kernel, K1, K2, G11=G11)
    G22 = green_cross(kernel, K2, K2)
    G21 = green_cross(kernel, K2, K1)
    schur = G22 - hk.M @ G21.T
    schur = 0.5 * (schur + schur.T)
    chol, _ = _cholesky_with_jitter(schur)
    return ConditionalModel(K1, K2, G11, hk, schur, chol, kernel)


def sample_conditional(model: ConditionalModel, phi_K1, n: int, seed: int,
                       stream: int | None = None, start: int = 0,
                       workers: int = 1) -> FieldBatch:
    """Draws of phi on K2 given phi on K1: ``M phi_K1 + chol(schur) xi``."""
    values = phi_K1.values if isinstance(phi_K1, FieldSample) else np.asarray(phi_K1)
    if values.shape != (len(model.K1),):
        raise DomainError(f"phi_K1 must have shape ({len(model.K1)},), got {values.shape}")
    stream = rng.stream_id("sample_conditional") if stream is None else stream
    h = model.M @ values
    xi = rng.normals(seed, stream, start, n, len(model.K2), workers=workers)
    return FieldBatch(model.K2, h[None, :] + xi @ model.schur_chol.T, seed, stream, start)


# -- box sampling ------------------------------------------------------------

@dataclass
class BoxSamplerConfig:
    side: int
    d: int = 3
    method: str = "dense-exact"
    padding: int = 2
    seed: int = 0
    calibrate: bool = True

    def __post_init__(self):
        if self.method not in ("dense-exact", "spectral-approx"):
            raise ConfigurationError(f"unknown box sampling method {self.method!r}")
        if self.method == "spectral-approx" and self.padding < 2:
            raise ConfigurationError("spectral padding must be >= 2")
        if self.side < 1:
            raise ConfigurationError("box side must be positive")


class SpectralBoxSampler:
    """Zero-boundary field on a padded box, restricted to the centred inner box.

    The padded box has ``N = padding * side`` sites per axis; its covariance is
    the Green function of the walk killed on leaving the padded box. With
    ``calibrate`` the field is rescaled so that the variance at the centre of
    the inner box equals g(0, 0); the remaining deficit elsewhere is reported
    in ``calibration``.
    """

    def __init__(self, config: BoxSamplerConfig, g00: float | None = None):
        self.config = config
        d, L = config.d, config.side
        self.N = N = config.padding * L
        k = np.arange(1, N + 1)
        c = np.cos(math.pi * k / (N + 1))
        lam = 1.0 - sum(np.meshgrid(*([c] * d), indexing="ij", sparse=True)) / d
        self._inv_sqrt = 1.0 / np.sqrt(lam)
        self._inv_lam = 1.0 / lam
        self.offset = (N - L) // 2
        center = self.offset + L // 2
        raw_center = self.dirichlet_variance((center,) * d)
        raw_corner = self.dirichlet_variance((self.offset,) * d)
        self.calibration = {"padded_side": N, "raw_center_variance": raw_center}
        scale = 1.0
        if g00 is not None:
            self.calibration["raw_center_deficit"] = 1.0 - raw_center / g00
            if config.calibrate:
                scale = g00 / raw_center
            self.calibration["corner_deficit"] = 1.0 - scale * raw_corner / g00
        self.calibration["variance_scale"] = scale
        self._amp = math.sqrt(scale)

    def dirichlet_variance(self, site) -> float:
        """Exact variance of the (uncalibrated) padded-box field at a padded-box site."""
        N = self.N
        k = np.arange(1, N + 1)
        out = self._inv_lam
        for j, pos in enumerate(site):
            s2 = (2.0 / (N + 1)) * np.sin(math.pi * (pos + 1) * k / (N + 1)) ** 2
            out = np.tensordot(s2, out, axes=([0], [0]))
        return float(out)

    def sample(self, n: int, seed: int, stream: int, start: int = 0) -> np.ndarray:
        d, L, N = self.config.d, self.config.side, self.N
        out = np.empty((n,) + (L,) * d)
        inner = tuple(slice(self.offset, self.offset + L) for _ in range(d))
        for i in range(n):
            xi = rng.normals(seed, stream, start + i, 1, N ** d)[0].reshape((N,) * d)
            f = fft.dstn(xi * self._inv_sqrt, type=1, norm="ortho")
            out[i] = self._amp * f[inner]
        return out


@dataclass
class BoxBatch:
    config: BoxSamplerConfig
    values: np.ndarray = field(repr=False)
    stream_id: int
    start: int
    calibration: dict

    def save(self, path):
        """Row-major ``.npy`` plus a JSON sidecar describing the index order."""
        np.save(path, np.ascontiguousarray(self.values))
        meta = {"index_order": "C (row-major): values[k, i_1, ..., i_d] is draw start+k "
                               "at site (i_1, ..., i_d) of [0, side)^d",
                "config": self.config.__dict__, "stream_id": self.stream_id,
                "start": self.start, "calibration": self.calibration}
        with open(str(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=1)


@functools.lru_cache(maxsize=2)
def _box_green(kernel: GreenKernel, side: int, d: int) -> GreenMatrix:
    return green_matrix(kernel, box(side, d))


_SPECTRAL_CACHE: dict = {}


def spectral_sampler(config: BoxSamplerConfig, g00: float | None) -> SpectralBoxSampler:
    key = (config.side, config.d, config.padding, config.calibrate, g00)
    if key not in _SPECTRAL_CACHE:
        _SPECTRAL_CACHE[key] = SpectralBoxSampler(config, g00)
    return _SPECTRAL_CACHE[key]


def sample_box(config: BoxSamplerConfig, n: int, kernel: GreenKernel | None = None,
               stream: int | None = None, start: int = 0, workers: int = 1) -> BoxBatch:
    """n fields on the box [0, side)^d, shape ``(n, side, ..., side)``."""
    kernel = GreenKernel(config.d) if kernel is None else kernel
    stream = rng.stream_id("sample_box", config.method) if stream is None else stream
    L, d = config.side, config.d
    if config.method == "dense-exact":
        G = _box_green(kernel, L, d)
        batch = sample_exact(kernel, G.base, n, config.seed, stream=stream, start=start,
                             workers=workers, G=G)
        return BoxBatch(config, batch.values.reshape((n,) + (L,) * d), stream, start,
                        {"method": "dense-exact"})
    sampler = spectral_sampler(config, kernel.g00)
    values = sampler.sample(n, config.seed, stream, start)
    return BoxBatch(config, values, stream, start,
                    dict(sampler.calibration, method="spectral-approx"))
