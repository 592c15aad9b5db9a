"""Small dense linear algebra and combinatorial solvers used by the matching code.

Everything here works on float64 ``numpy`` arrays and is a pure function of
its inputs, so results are reproducible bit-for-bit for identical inputs.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DimensionError, ValidationError

_EPS = np.finfo(np.float64).eps


class SvdResult(NamedTuple):
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


def _square_finite(m, name: str = "matrix") -> np.ndarray:
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {a.shape}")
    if a.shape[0] == 0:
        raise DimensionError(f"{name} must be non-empty")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite entries")
    return a


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds (n even) of n/2 disjoint column pairs."""
    players = list(range(n)) if n % 2 == 0 else list(range(n)) + [-1]
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for k in range(m // 2):
            a, b = players[k], players[m - 1 - k]
            if a >= 0 and b >= 0:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_basis(u: np.ndarray, filled: np.ndarray) -> None:
    """Replace the columns of ``u`` not marked in ``filled`` by an orthonormal completion."""
    n = u.shape[0]
    candidates = iter(range(n))
    for j in np.flatnonzero(~filled):
        while True:
            e = np.zeros(n)
            e[next(candidates)] = 1.0
            basis = u[:, filled]
            for _ in range(2):
                e -= basis @ (basis.T @ e)
            norm = np.linalg.norm(e)
            if norm > 0.5:
                u[:, j] = e / norm
                filled[j] = True
                break


def svd(m, *, tol: float = 1e-15, max_sweeps: int = 80) -> SvdResult:
    """Singular value decomposition of a square matrix by one-sided Jacobi rotations.

    Returns ``(u, sigma, v)`` with ``m == u @ diag(sigma) @ v.T``. Singular
    values are sorted in descending order, and each column of ``u`` is
    sign-fixed so its largest-magnitude entry is positive (``v`` is flipped to
    match).
    """
    a = _square_finite(m)
    n = a.shape[0]
    work = a.copy()
    v = np.eye(n)
    schedule = _round_robin(n) if n > 1 else []

    for _ in range(max_sweeps):
        rotated = False
        for p, q in schedule:
            ap, aq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            with np.errstate(over="ignore"):
                zeta = (beta - alpha) / (2.0 * g)  # inf gives t = 0
                sgn = np.where(zeta >= 0, 1.0, -1.0)
                t = sgn / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            work[:, p], work[:, q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]

    cutoff = sigma[0] * n * _EPS if sigma[0] > 0 else 0.0
    filled = sigma > cutoff
    u = np.zeros((n, n))
    u[:, filled] = work[:, filled] / sigma[filled]
    if not filled.all():
        sigma[~filled] = 0.0
        _complete_basis(u, filled)

    pivots = np.argmax(np.abs(u), axis=0)
    flip = u[pivots, np.arange(n)] < 0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0
    return SvdResult(u, sigma, v)


def hungarian_max(cost) -> np.ndarray:
    """Solve the maximum-weight linear assignment problem.

    Returns ``perm`` with ``perm[i]`` the column assigned to row ``i`` so that
    ``sum(cost[i, perm[i]])`` is maximal. Shortest-augmenting-path Hungarian
    method with dual potentials; O(n^3). Among equally good candidates during
    the search the lowest column index is taken, so results are deterministic.
    """
    c = _square_finite(cost, "cost")
    n = c.shape[0]
    a = -c
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.intp)  # owner[j]: 1-based row holding column j
    way = np.zeros(n + 1, dtype=np.intp)

    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = a[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    perm = np.empty(n, dtype=np.intp)
    perm[owner[1:] - 1] = np.arange(n)
    return perm


def _polyval(coeffs: Sequence[float], x: float) -> float:
    acc = 0.0
    for c in coeffs:
        acc = acc * x + c
    return acc


def _eval_bound(coeffs: Sequence[float], x: float) -> float:
    """Rounding-error bound of Horner evaluation at ``x``."""
    deg = len(coeffs) - 1
    ax = abs(x)
    return 8 * (deg + 1) * _EPS * sum(abs(c) * ax ** (deg - k) for k, c in enumerate(coeffs))


def _bisect(coeffs: Sequence[float], lo: float, hi: float, flo: float) -> float:
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        fm = _polyval(coeffs, mid)
        if fm == 0.0:
            return mid
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi = mid
    fl, fh = abs(_polyval(coeffs, lo)), abs(_polyval(coeffs, hi))
    return lo if fl <= fh else hi


def _real_roots(coeffs: list[float]) -> list[float]:
    deg = len(coeffs) - 1
    if deg <= 0:
        return []
    if deg == 1:
        return [-coeffs[1] / coeffs[0]]
    bound = 1.0 + max(abs(c / coeffs[0]) for c in coeffs[1:])
    deriv = [c * (deg - k) for k, c in enumerate(coeffs[:-1])]
    # p is monotone between consecutive critical points, so each gap holds at most one root
    crit = [x for x in _real_roots(deriv) if -bound < x < bound]
    roots = [x for x in crit if abs(_polyval(coeffs, x)) <= _eval_bound(coeffs, x)]
    knots = [-bound] + sorted(crit) + [bound]
    for lo, hi in zip(knots[:-1], knots[1:]):
        if hi <= lo:
            continue
        flo, fhi = _polyval(coeffs, lo), _polyval(coeffs, hi)
        if flo == 0.0:
            roots.append(lo)
        elif fhi != 0.0 and (flo < 0) != (fhi < 0):
            roots.append(_bisect(coeffs, lo, hi, flo))
    return roots


def real_roots_quartic(c4: float, c3: float, c2: float, c1: float, c0: float) -> list[float]:
    """Real roots of ``c4 a^4 + c3 a^3 + c2 a^2 + c1 a + c0`` in ascending order.

    Lower-degree polynomials (leading zeros) are accepted. Roots closer than
    1e-9 are merged. Repeated roots without a sign change are found at the
    critical points of the polynomial.
    """
    coeffs = [float(c) for c in (c4, c3, c2, c1, c0)]
    if not all(math.isfinite(c) for c in coeffs):
        raise ValidationError("polynomial coefficients must be finite")
    while coeffs and coeffs[0] == 0.0:
        coeffs.pop(0)
    if not coeffs:
        raise ValidationError("all polynomial coefficients are zero")
    found = sorted(_real_roots(coeffs))
    roots: list[float] = []
    for x in found:
        if roots and x - roots[-1] <= 1e-9:
            if abs(_polyval(coeffs, x)) < abs(_polyval(coeffs, roots[-1])):
                roots[-1] = x
            continue
        roots.append(x + 0.0)  # normalises -0.0
    return roots


def random_orthogonal(n: int, seed: int) -> np.ndarray:
    """Haar-distributed orthogonal ``n x n`` matrix from a seeded Gaussian draw.

    Modified Gram-Schmidt with one reorthogonalisation pass.
    """
    if n < 1:
        raise DimensionError("n must be at least 1")
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n, n))
    for j in range(n):
        col = q[:, j]
        for _ in range(2):
            for k in range(j):
                col -= (q[:, k] @ col) * q[:, k]
        col /= np.linalg.norm(col)
    return q


def is_orthogonal(r: np.ndarray, tol: float = 1e-8) -> bool:
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        return False
    return bool(np.max(np.abs(r @ r.T - np.eye(r.shape[0]))) <= tol)


def is_permutation(perm, n: int | None = None) -> bool:
    p = np.asarray(perm)
    if p.ndim != 1 or (n is not None and p.shape[0] != n):
        return False
    if not np.issubdtype(p.dtype, np.integer):
        return False
    return bool(np.array_equal(np.sort(p), np.arange(p.shape[0])))


def permutation_matrix(perm) -> np.ndarray:
    """Matrix ``P`` with ``P[i, perm[i]] = 1``."""
    p = np.asarray(perm)
    out = np.zeros((p.shape[0], p.shape[0]))
    out[np.arange(p.shape[0]), p] = 1.0
    return out
