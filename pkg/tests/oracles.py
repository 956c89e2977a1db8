"""Independent numerical oracles used by the test-suite.

None of these reuse the package's quadrature or linear algebra:

* random-walk Monte Carlo (numba) for g(0,0), escape probabilities and
  hitting distributions; walks stop when they leave a Euclidean ball of radius
  R and the remainder is added from the leading asymptotic a_d |z|^{2-d};
* a trapezoidal rule in log-time for g(0,0) built on scipy's i0e;
* 1-d quad formulas for bivariate normal orthants and conditional means.
"""
from __future__ import annotations

import math
from collections import deque

import numba
import numpy as np
from scipy import integrate, special, stats


def asymptotic_constant(d: int) -> float:
    """a_d with g(0,x) ~ a_d |x|^{2-d}: (d/2) Gamma(d/2 - 1) pi^{-d/2}."""
    return 0.5 * d * math.gamma(d / 2 - 1) * math.pi ** (-d / 2)


# -- counter-based RNG for the walks (splitmix64) -----------------------------------

@numba.njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True, inline="always")
def _dir(state, two_d):
    # state is a 1-element uint64 array, advanced in place
    state[0] += np.uint64(0x9E3779B97F4A7C15)
    return int((_mix(state[0]) >> np.uint64(32)) * np.uint64(two_d) >> np.uint64(32))


@numba.njit(cache=True)
def _green0_walks(n, d, R, seed, a_d):
    R2 = R * R
    total = 0.0
    total_sq = 0.0
    x = np.zeros(d, dtype=np.int64)
    state = np.zeros(1, dtype=np.uint64)
    for w in range(n):
        state[0] = _mix(np.uint64(seed) * np.uint64(0x100000001B3) + np.uint64(w))
        for j in range(d):
            x[j] = 0
        visits = 1.0
        while True:
            k = _dir(state, 2 * d)
            x[k // 2] += 1 if k % 2 == 0 else -1
            r2 = 0
            for j in range(d):
                r2 += x[j] * x[j]
            if r2 == 0:
                visits += 1.0
            elif r2 > R2:
                visits += a_d * r2 ** ((2.0 - d) / 2.0)
                break
        total += visits
        total_sq += visits * visits
    return total, total_sq


def mc_green_origin(n: int, d: int = 3, R: int = 16, seed: int = 1):
    """MC estimate and standard error of g(0,0) from n walks."""
    s, s2 = _green0_walks(n, d, R, seed, asymptotic_constant(d))
    mean = s / n
    var = s2 / n - mean * mean
    return mean, math.sqrt(var / n)


def trapezoid_green_origin(d: int = 3, step: float = 0.02, u_lo: float = -25.0,
                           u_hi: float = 30.0) -> float:
    """g(0,0) = int_0^inf i0e(t/d)^d dt by the trapezoidal rule in u = log t.

    The tail beyond T = e^{u_hi} is added from i0e(z) ~ (2 pi z)^{-1/2}.
    """
    u = np.arange(u_lo, u_hi + step / 2, step)
    t = np.exp(u)
    f = special.i0e(t / d) ** d * t
    body = step * (f.sum() - 0.5 * (f[0] + f[-1]))
    T = t[-1]
    c = (2 * math.pi / d) ** (-d / 2)
    tail = c * T ** (1 - d / 2) / (d / 2 - 1)
    return float(body + tail)


# -- escape probabilities and hitting distributions ----------------------------------

@numba.njit(cache=True)
def _escape_walks(K, x0, tag, n, R, seed, a_d, lo, mask):
    # For walks from x0: indicator of leaving the ball B(center, R)
    # before returning to K, the hit point otherwise, and for exits the
    # kernel a_d |X_tau - y|^{2-d} for every y in K.
    m, d = K.shape
    esc = np.zeros(n)
    hit = np.full(n, -1, dtype=np.int64)
    kap = np.zeros((n, m))
    side = np.array(mask.shape, dtype=np.int64)
    x = np.zeros(d, dtype=np.int64)
    state = np.zeros(1, dtype=np.uint64)
    R2 = R * R
    for w in range(n):
        state[0] = _mix(np.uint64(seed) * np.uint64(0x100000001B3)
                        + np.uint64(tag) * np.uint64(1 << 40) + np.uint64(w))
        for j in range(d):
            x[j] = x0[j]
        while True:
            k = _dir(state, 2 * d)
            x[k // 2] += 1 if k % 2 == 0 else -1
            inside = True
            r2 = 0
            for j in range(d):
                c = x[j] - lo[j]
                if c < 0 or c >= side[j]:
                    inside = False
                r2 += x[j] * x[j]
            if inside:
                idx = mask[x[0] - lo[0], x[1] - lo[1], x[2] - lo[2]] if d == 3 else -1
                if idx >= 0:
                    hit[w] = idx
                    break
            if r2 > R2:
                esc[w] = 1.0
                for i in range(m):
                    q = 0
                    for j in range(d):
                        q += (x[j] - K[i, j]) ** 2
                    kap[w, i] = a_d * q ** ((2.0 - d) / 2.0)
                break
    return esc, hit, kap


def _walk_data(K: np.ndarray, n: int, R: int, seed: int, starts=None):
    K = np.ascontiguousarray(K, dtype=np.int64)
    starts = K if starts is None else np.ascontiguousarray(starts, dtype=np.int64)
    if K.shape[1] != 3:
        raise ValueError("walk oracles are implemented for d = 3")
    lo = K.min(axis=0) - 1
    side = K.max(axis=0) - lo + 2
    mask = np.full(tuple(side), -1, dtype=np.int64)
    for i, p in enumerate(K):
        mask[tuple(p - lo)] = i
    a_d = asymptotic_constant(3)
    return [_escape_walks(K, x0, i, n, R, seed, a_d, lo, mask) for i, x0 in enumerate(starts)]


def mc_capacity(K: np.ndarray, n: int, R: int = 20, seed: int = 1):
    """Escape-probability estimate of cap(K) = sum_x P_x[no return to K].

    ``raw_x`` is the probability of leaving B(0, R) before returning; a walk
    leaving at z still returns with probability sum_y e_y g(z, y), replaced by
    sum_y e_y a_d |z-y|^{-1}. Solving (I + kappa) e = raw gives e.
    Returns (cap, se, e).
    """
    data = _walk_data(K, n, R, seed)
    raw = np.array([d[0].mean() for d in data])
    kappa = np.array([d[2].mean(axis=0) for d in data])
    A = np.eye(len(K)) + kappa
    e = np.linalg.solve(A, raw)
    w = np.linalg.solve(A.T, np.ones(len(K)))
    se = math.sqrt(sum((w[i] * np.std(data[i][0] - data[i][2] @ e, ddof=1)) ** 2 / n
                       for i in range(len(K))))
    return float(e.sum()), se, e


def mc_hitting(K: np.ndarray, x: np.ndarray, n: int, R: int = 20, seed: int = 2):
    """MC hitting distribution of K from x (x not in K), with standard errors.

    Hits after leaving B(0, R) are added as a_d |z-y|^{-1} e_y with the
    escape estimates e from :func:`mc_capacity`.
    """
    K = np.ascontiguousarray(K, dtype=np.int64)
    _, _, e = mc_capacity(K, n, R, seed + 1)
    esc, hit, kap = _walk_data(K, n, R, seed, starts=np.atleast_2d(x))[0]
    contrib = np.zeros((n, len(K)))
    ok = hit >= 0
    contrib[np.nonzero(ok)[0], hit[ok]] = 1.0
    contrib += kap * e[None, :]
    return contrib.mean(axis=0), contrib.std(axis=0, ddof=1) / math.sqrt(n)


# -- Gaussian quadrature oracles ----------------------------------------------------

def bivariate_upper_orthant(a: float, b: float, rho: float, sa: float = 1.0,
                            sb: float = 1.0) -> float:
    """P[X >= a, Y >= b] for centred normals with sds sa, sb and correlation rho."""
    a, b = a / sa, b / sb
    s = math.sqrt(1 - rho * rho)
    val, _ = integrate.quad(lambda u: stats.norm.pdf(u) * stats.norm.sf((b - rho * u) / s),
                            a, np.inf, epsabs=1e-13, epsrel=1e-11)
    return val


def gaussian_expectation(f, sd: float) -> float:
    """E f(sd Z) by adaptive quadrature."""
    val, _ = integrate.quad(lambda u: f(sd * u) * stats.norm.pdf(u), -np.inf, np.inf,
                            epsabs=1e-13, epsrel=1e-11)
    return val


# -- cluster labelling oracle ---------------------------------------------------------

def bfs_partition(open_mask: np.ndarray) -> set:
    """Clusters of open sites (nearest neighbour) by breadth-first search."""
    shape = open_mask.shape
    seen = np.zeros(shape, dtype=bool)
    out = set()
    for start in zip(*np.nonzero(open_mask)):
        if seen[start]:
            continue
        comp = []
        q = deque([start])
        seen[start] = True
        while q:
            p = q.popleft()
            comp.append(p)
            for j in range(len(shape)):
                for s in (-1, 1):
                    nb = list(p)
                    nb[j] += s
                    nb = tuple(nb)
                    if 0 <= nb[j] < shape[j] and open_mask[nb] and not seen[nb]:
                        seen[nb] = True
                        q.append(nb)
        out.add(frozenset(comp))
    return out


def bfs_connected(open_mask: np.ndarray, src: np.ndarray, dst: np.ndarray) -> bool:
    for comp in bfs_partition(open_mask):
        idx = tuple(np.array(list(comp)).T)
        if src[idx].any() and dst[idx].any():
            return True
    return False
