"""Maximal correlation between the field on two disjoint finite sets.

For Gaussian fields the maximal correlation equals the largest canonical
correlation, i.e. the square root of the top eigenvalue of

    (G12 G22^{-1} G21) a = lambda G11 a.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .errors import DomainError, NumericError
from .green import GreenKernel, green_cross, green_matrix
from .lattice import PointSet, diam_sq, dist, dist_sq
from .potential import capacity

CLAMP_TOL = 1e-10


@dataclass
class CorrelationReport:
    rho: float
    alpha_lower: float
    sandwich_term: float
    ratio: float
    dist: float
    cap1: float
    cap2: float
    separated: bool
    perron_alpha: np.ndarray = field(repr=False)
    perron_beta: np.ndarray = field(repr=False)
    alpha_simplex: np.ndarray = field(repr=False)
    beta_simplex: np.ndarray = field(repr=False)
    clamped: int = 0

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, np.ndarray):
                out[k] = v.tolist()
        out["schema_version"] = 1
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _canonical_sign(v: np.ndarray):
    v = v * (1.0 if v[np.argmax(np.abs(v))] > 0 else -1.0)
    small = (v < 0) & (v >= -CLAMP_TOL * max(1.0, np.abs(v).max()))
    v = np.where(small, 0.0, v)
    return v, int(small.sum())


def max_correlation(kernel: GreenKernel, K1: PointSet, K2: PointSet) -> CorrelationReport:
    """Exact maximal correlation rho = ||P_HK|| with the maximising weights.

    ``perron_alpha`` are the weights of X* = sum a_x phi_x normalised to
    Var X* = 1; ``perron_beta`` are the weights of Y* = P_HK X* (so that
    Var Y* = rho^2). Simplex-normalised versions are included.
    """
    if not K1.isdisjoint(K2):
        raise DomainError("K1 and K2 must be disjoint")
    G11 = green_matrix(kernel, K1)
    G22 = green_matrix(kernel, K2)
    G12 = green_cross(kernel, K1, K2)
    L1, L2 = G11.cholesky, G22.cholesky
    # whitened cross operator L1^{-1} G12 L2^{-T}
    C = linalg.solve_triangular(L1, G12, lower=True)
    C = linalg.solve_triangular(L2, C.T, lower=True).T
    try:
        U, S, _ = linalg.svd(C)
    except linalg.LinAlgError as exc:
        raise NumericError("singular value decomposition failed") from exc
    rho = float(S[0])
    alpha = linalg.solve_triangular(L1.T, U[:, 0], lower=False)
    alpha, clamped = _canonical_sign(alpha)
    alpha = alpha / math.sqrt(alpha @ G11.entries @ alpha)
    beta = linalg.cho_solve((L2, True), G12.T @ alpha)
    beta, c2 = _canonical_sign(beta)
    cap1 = capacity(G11).capacity
    cap2 = capacity(G22).capacity
    r = dist(K1, K2)
    sand = math.sqrt(cap1 * cap2) / r ** (kernel.d - 2)
    sep = dist_sq(K1, K2) >= max(diam_sq(K1), diam_sq(K2))
    return CorrelationReport(
        rho=rho, alpha_lower=rho / (2 * math.pi), sandwich_term=sand, ratio=rho / sand,
        dist=r, cap1=cap1, cap2=cap2, separated=bool(sep),
        perron_alpha=alpha, perron_beta=beta,
        alpha_simplex=alpha / alpha.sum(), beta_simplex=beta / beta.sum(),
        clamped=clamped + c2)


def sandwich_check(report: CorrelationReport, K1: PointSet, K2: PointSet) -> float:
    """Ratio rho * dist^{d-2} / sqrt(cap1 cap2).

    Warns when dist(K1, K2) < max diameter: only the upper bound of the
    capacity sandwich applies then (``report.separated`` is False).
    """
    if not report.separated:
        warnings.warn("dist(K1,K2) < max(diam K1, diam K2): lower bound not applicable",
                      stacklevel=2)
    d = K1.d
    return report.rho * report.dist ** (d - 2) / math.sqrt(report.cap1 * report.cap2)


def mixing_bounds(report: CorrelationReport) -> tuple[float, float]:
    """Bracket (rho / 2 pi, rho) for the sup of covariances of [0,1]-valued functions."""
    return report.rho / (2 * math.pi), report.rho


def correlation_sweep(kernel: GreenKernel, K1: PointSet, K2: PointSet, scales):
    """Reports for the configurations scaled by each integer factor."""
    rows = []
    for k in scales:
        rep = max_correlation(kernel, K1.scale(k), K2.scale(k))
        rows.append({"scale": k, "r": rep.dist, "rho": rep.rho,
                     "sandwich_term": rep.sandwich_term, "ratio": rep.ratio,
                     "alpha_lower": rep.alpha_lower})
    return rows
