"""Capacity, equilibrium measure and the hitting (harmonic) kernel of a set."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import DomainError, NumericError
from .green import GreenKernel, GreenMatrix, green_cross, green_matrix
from .lattice import PointSet

NEGATIVE_TOL = 1e-10


@dataclass
class EquilibriumReport:
    base: PointSet
    capacity: float
    equilibrium_weights: np.ndarray = field(repr=False)

    def to_json(self) -> str:
        return json.dumps({
            "schema_version": 1,
            "labels": self.base.labels(),
            "points": self.base.coords.tolist(),
            "capacity": self.capacity,
            "equilibrium_weights": self.equilibrium_weights.tolist(),
        })

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("label,weight\n")
            for lab, w in zip(self.base.labels(), self.equilibrium_weights):
                fh.write(f'"{lab}",{w:.17g}\n')


def capacity(G: GreenMatrix) -> EquilibriumReport:
    """Solve G w = 1; the capacity is sum(w) and w is the equilibrium measure."""
    try:
        w = linalg.cho_solve((G.cholesky, True), np.ones(len(G)))
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericError("equilibrium solve failed", size=len(G)) from exc
    if (w < -1e-12).any():
        raise NumericError("negative equilibrium weight", min_weight=float(w.min()))
    return EquilibriumReport(base=G.base, capacity=float(w.sum()), equilibrium_weights=w)


def _project_simplex(v: np.ndarray) -> np.ndarray:
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def simplex_energy_minimum(G: GreenMatrix | np.ndarray, max_iter: int = 200000,
                           tol: float = 1e-15):
    """Minimise a^T G a over the probability simplex by accelerated projected gradient.

    Returns ``(energy, a)``. At the optimum, ``1 / energy`` is the capacity;
    this route does not solve any linear system.
    """
    A = G.entries if isinstance(G, GreenMatrix) else np.asarray(G)
    n = len(A)
    step = 1.0 / (2.0 * np.linalg.eigvalsh(A)[-1])
    x = np.full(n, 1.0 / n)
    y, t = x.copy(), 1.0
    energy = x @ A @ x
    for _ in range(max_iter):
        x_new = _project_simplex(y - step * 2.0 * (A @ y))
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        y = x_new + (t - 1) / t_new * (x_new - x)
        e_new = x_new @ A @ x_new
        if e_new > energy:  # restart momentum
            y, t_new = x_new.copy(), 1.0
        converged = abs(energy - e_new) <= tol * energy and np.abs(x_new - x).max() < 1e-13
        x, t, energy = x_new, t_new, e_new
        if converged:
            break
    return float(energy), x


@dataclass
class HarmonicKernel:
    """Hitting distribution of K1 from the points of X.

    ``M[i, j] = P_{x_i}[H_{K1} < inf, X_{H_{K1}} = k_j]``; ``hit_prob`` are the
    row sums.
    """

    source: PointSet
    targets: PointSet
    M: np.ndarray = field(repr=False)
    hit_prob: np.ndarray = field(repr=False)

    def to_json(self) -> str:
        return json.dumps({
            "schema_version": 1,
            "source": self.source.coords.tolist(),
            "targets": self.targets.coords.tolist(),
            "M": self.M.tolist(),
            "hit_prob": self.hit_prob.tolist(),
        })

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("target," + ",".join(f'"{l}"' for l in self.source.labels()) + "\n")
            for lab, row in zip(self.targets.labels(), self.M):
                fh.write(f'"{lab}",' + ",".join(f"{v:.17g}" for v in row) + "\n")


def harmonic_kernel(kernel: GreenKernel, K1: PointSet, X: PointSet,
                    G11: GreenMatrix | None = None) -> HarmonicKernel:
    """Hitting kernel via the last-exit system ``M G_{K1} = G_{X,K1}``."""
    if len(K1) == 0:
        raise DomainError("K1 must be nonempty")
    G11 = green_matrix(kernel, K1) if G11 is None else G11
    GX1 = green_cross(kernel, X, K1)
    try:
        M = linalg.cho_solve((G11.cholesky, True), GX1.T).T
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericError("hitting-kernel solve failed") from exc
    for i, p in enumerate(X):
        if p in K1:
            M[i] = 0.0
            M[i, K1.index(p)] = 1.0
    if M.size and M.min() < -NEGATIVE_TOL:
        raise NumericError("negative hitting probability", min_entry=float(M.min()))
    return HarmonicKernel(source=K1, targets=X, M=M, hit_prob=M.sum(axis=1))


def last_exit_residual(kernel: GreenKernel, hk: HarmonicKernel,
                       G11: GreenMatrix | None = None) -> float:
    """max |G_{X,K1} - M G_{K1}|, the strong-Markov (last-exit) identity."""
    G11 = green_matrix(kernel, hk.source) if G11 is None else G11
    GX1 = green_cross(kernel, hk.targets, hk.source)
    return float(np.abs(GX1 - hk.M @ G11.entries).max()) if GX1.size else 0.0


@dataclass
class HVariance:
    quadratic: float   # m^T G11 m
    simplified: float  # sum_y m_y g(x, y)
    sup_green: float   # max_y g(x, y)

    @property
    def value(self) -> float:
        return self.quadratic


def h_variance(kernel: GreenKernel, K1: PointSet, x, G11: GreenMatrix | None = None,
               tol: float = 1e-10) -> HVariance:
    """Variance of the conditional mean h_x, computed two ways.

    ``quadratic`` is m^T G11 m for the hitting row m; ``simplified`` uses the
    last-exit identity. Disagreement beyond ``tol`` raises NumericError.
    """
    if tuple(x) in K1:
        raise DomainError("x must lie outside K1")
    G11 = green_matrix(kernel, K1) if G11 is None else G11
    X = PointSet([list(x)], workspace_radius=K1.workspace_radius)
    hk = harmonic_kernel(kernel, K1, X, G11=G11)
    m = hk.M[0]
    gx = green_cross(kernel, X, K1)[0]
    q = float(m @ G11.entries @ m)
    simp = float(m @ gx)
    if abs(q - simp) > tol:
        raise NumericError("last-exit identity violated", quadratic=q, simplified=simp)
    return HVariance(quadratic=q, simplified=simp, sup_green=float(gx.max()))


def h_variances(kernel: GreenKernel, K1: PointSet, X: PointSet,
                G11: GreenMatrix | None = None) -> np.ndarray:
    """Vectorised ``Var h_x`` (quadratic form) for every x in X."""
    G11 = green_matrix(kernel, K1) if G11 is None else G11
    hk = harmonic_kernel(kernel, K1, X, G11=G11)
    return np.einsum("ij,jk,ik->i", hk.M, G11.entries, hk.M)
