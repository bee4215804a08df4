"""Dense matrix routines: one-sided Jacobi SVD, rank selection and Frobenius projections.

Matrices are plain 2-D ``float64`` numpy arrays. Every public function checks
that its inputs are finite and raises :class:`InvalidInputError` otherwise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from semu.errors import InvalidInputError, NumericalError

logger = logging.getLogger(__name__)

MAX_SWEEPS = 30
ZERO_SIGMA_RTOL = 1e-12
ZERO_SIGMA_ATOL = 1e-300
ORTHONORMAL_TOL = 1e-8


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``m = u @ diag(sigma) @ v.T`` with ``q = min(n, m)`` columns."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def q(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


@dataclass(frozen=True)
class RankSelection:
    r: int
    explained: float
    gamma: float


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


def _round_robin(m: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Circle-method tournament: every column pair meets once per sweep and
    # pairs inside a round are disjoint, so a round rotates them all at once.
    players = list(range(m + (m % 2)))
    half = len(players) // 2
    rounds = []
    for _ in range(len(players) - 1):
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        keep = (p < m) & (q < m)
        rounds.append((p[keep], q[keep]))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalize the columns of ``a`` (n >= m) by plane rotations.

    Returns ``(w, v)`` with ``a = w @ v.T``, ``v`` orthogonal and the columns
    of ``w`` mutually orthogonal.
    """
    n, m = a.shape
    w = a.copy()
    v = np.eye(m)
    norm_f = np.linalg.norm(w)
    negligible = (np.finfo(float).eps * norm_f) ** 2
    # rotate until columns are orthogonal to working precision
    off_tol = n * np.finfo(float).eps
    rounds = _round_robin(m)
    for _ in range(MAX_SWEEPS):
        rotated = False
        for p, q in rounds:
            if p.size == 0:
                continue
            wp, wq = w[:, p], w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            active = (np.abs(gamma) > off_tol * np.sqrt(alpha * beta)) & (
                np.minimum(alpha, beta) > negligible
            )
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            wp, wq = w[:, p], w[:, q]
            w[:, p] = c * wp - s * wq
            w[:, q] = s * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            return w, v
    raise NumericalError(
        f"one-sided Jacobi SVD did not converge in {MAX_SWEEPS} sweeps for a "
        f"{a.shape[0]}x{a.shape[1]} matrix"
    )


def _complete_columns(u: np.ndarray, missing: np.ndarray) -> None:
    """Fill the columns ``missing`` of ``u`` with unit vectors orthogonal to the rest."""
    n = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if j not in set(missing.tolist())]
    fill = iter(missing.tolist())
    target = next(fill, None)
    for k in range(n):
        if target is None:
            break
        e = np.zeros(n)
        e[k] = 1.0
        for _ in range(2):
            for b in basis:
                e -= (b @ e) * b
        norm = np.linalg.norm(e)
        if norm < 0.5:
            continue
        e /= norm
        u[:, target] = e
        basis.append(e)
        target = next(fill, None)


def _fix_signs(u: np.ndarray, v: np.ndarray) -> None:
    for j in range(u.shape[1]):
        nz = np.flatnonzero(np.abs(u[:, j]) > 1e-12)
        if nz.size and u[nz[0], j] < 0:
            u[:, j] *= -1.0
            v[:, j] *= -1.0


def zero_sigma_tol(sigma: np.ndarray) -> float:
    """Threshold at or below which a singular value counts as zero."""
    top = float(sigma[0]) if sigma.size else 0.0
    return ZERO_SIGMA_RTOL * top if top > 0 else ZERO_SIGMA_ATOL


def svd(m) -> SvdFactors:
    """Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.

    Singular values come out sorted in descending order. Columns of ``u`` that
    belong to zero singular values are completed to an orthonormal set, and
    each ``u`` column is sign-normalized so its first nonzero entry is positive.
    """
    a = as_matrix(m)
    if a.size == 0:
        raise InvalidInputError(f"cannot decompose an empty {a.shape[0]}x{a.shape[1]} matrix")
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    scale = float(np.max(np.abs(a)))
    if scale == 0.0:
        scale = 1.0
    w, v = _jacobi_tall(a / scale)

    sigma = np.linalg.norm(w, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, w, v = sigma[order], w[:, order], v[:, order]

    tol = zero_sigma_tol(sigma)
    live = sigma > tol
    u = np.zeros_like(w)
    u[:, live] = w[:, live] / sigma[live]
    if not live.all():
        _complete_columns(u, np.flatnonzero(~live))
    sigma = sigma * scale

    if transposed:
        u, v = v, u
    _fix_signs(u, v)
    return SvdFactors(u=u, sigma=sigma, v=v)


def explained_variance(sigma) -> np.ndarray:
    """Cumulative explained variance ``e_k`` for k = 1..q (all zeros if sigma vanishes)."""
    s = np.asarray(sigma, dtype=np.float64)
    if s.size == 0 or s[0] <= 0:
        return np.zeros_like(s)
    energy = np.cumsum((s / s[0]) ** 2)
    return energy / energy[-1]


def _check_sigma(sigma) -> np.ndarray:
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim != 1:
        raise InvalidInputError("sigma must be a vector")
    if not np.all(np.isfinite(s)):
        raise InvalidInputError("sigma contains non-finite entries")
    if np.any(s < 0):
        raise InvalidInputError("sigma contains negative entries")
    if np.any(np.diff(s) > 0):
        raise InvalidInputError("sigma is not sorted in descending order")
    return s


def select_rank(sigma, gamma: float) -> RankSelection:
    """Smallest k whose cumulative explained variance reaches ``gamma``.

    ``gamma = 1`` keeps exactly the singular values above the zero tolerance;
    ``gamma = 0`` and an all-zero spectrum both give ``r = 0``.
    """
    s = _check_sigma(sigma)
    if not 0.0 <= gamma <= 1.0:
        raise InvalidInputError(f"gamma must lie in [0, 1], got {gamma}")
    if s.size == 0 or s[0] <= ZERO_SIGMA_ATOL:
        return RankSelection(r=0, explained=0.0, gamma=float(gamma))
    e = explained_variance(s)
    if gamma == 0.0:
        r = 0
    elif gamma >= 1.0:
        r = int(np.count_nonzero(s > zero_sigma_tol(s)))
    else:
        r = int(np.argmax(e >= gamma)) + 1
    explained = float(e[r - 1]) if r > 0 else 0.0
    return RankSelection(r=r, explained=explained, gamma=float(gamma))


def truncate(f: SvdFactors, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not 0 <= r <= f.q:
        raise InvalidInputError(f"rank {r} outside [0, {f.q}]")
    return f.u[:, :r].copy(), f.sigma[:r].copy(), f.v[:, :r].copy()


def frobenius_inner(a, b) -> float:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.einsum("ij,ij->", a, b))


def frobenius_norm(a) -> float:
    return float(np.sqrt(frobenius_inner(a, a)))


def perp_project(g, a) -> np.ndarray:
    """Remove from ``g`` its component along ``a`` in the Frobenius inner product."""
    g = as_matrix(g, "g")
    a = as_matrix(a, "a")
    if g.shape != a.shape:
        raise InvalidInputError(f"shape mismatch: {g.shape} vs {a.shape}")
    aa = frobenius_inner(a, a)
    if aa == 0.0:
        logger.warning("degenerate base: zero weight matrix of shape %s, gradient left unprojected", a.shape)
        return g.copy()
    return g - (frobenius_inner(g, a) / aa) * a


def check_orthonormal(q, name: str, tol: float = ORTHONORMAL_TOL) -> np.ndarray:
    q = as_matrix(q, name)
    if q.shape[1] == 0:
        return q
    dev = np.max(np.abs(q.T @ q - np.eye(q.shape[1])))
    if dev > tol:
        raise InvalidInputError(f"{name} columns are not orthonormal (Gram deviation {dev:.3g})")
    return q


def subspace_project(x, a, b) -> np.ndarray:
    """Orthogonal projection of ``x`` onto ``{a @ M @ b.T}``, i.e. ``a (a.T x b) b.T``."""
    x = as_matrix(x, "x")
    a = check_orthonormal(a, "a")
    b = check_orthonormal(b, "b")
    if a.shape[0] != x.shape[0] or b.shape[0] != x.shape[1] or a.shape[1] != b.shape[1]:
        raise InvalidInputError(
            f"shapes do not conform: x {x.shape}, a {a.shape}, b {b.shape}"
        )
    if a.shape[1] == 0:
        return np.zeros_like(x)
    return a @ (a.T @ x @ b) @ b.T


def read_matrix(path) -> np.ndarray:
    """Read the fixture format: ``rows cols`` header, then whitespace-separated rows."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise InvalidInputError(f"{path}: empty matrix file")
    try:
        rows, cols = (int(t) for t in lines[0].split())
        data = [[float(t) for t in ln.split()] for ln in lines[1:]]
    except ValueError as exc:
        raise InvalidInputError(f"{path}: malformed matrix file ({exc})") from None
    if len(data) != rows or any(len(row) != cols for row in data):
        raise InvalidInputError(f"{path}: expected {rows}x{cols} entries")
    return as_matrix(np.array(data, dtype=np.float64).reshape(rows, cols))


def write_matrix(path, m) -> None:
    a = as_matrix(m)
    lines = [f"{a.shape[0]} {a.shape[1]}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in a]
    Path(path).write_text("\n".join(lines) + "\n")
