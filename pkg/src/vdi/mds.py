"""Classical (Torgerson) MDS on top of a cyclic Jacobi eigensolver."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Rounds of disjoint index pairs covering every pair exactly once per sweep."""
    idx = list(range(n)) + ([-1] if n % 2 else [])
    m = len(idx)
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for k in range(m // 2):
            a, b = idx[k], idx[m - 1 - k]
            if a >= 0 and b >= 0:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        idx = [idx[0]] + [idx[-1]] + idx[1:-1]
    return rounds


def eig_symmetric(m, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits all pairs in round-robin order; the pairs inside one
    round are disjoint, so their rotations commute and are applied together.
    Returns eigenvalues in descending order and the matching orthonormal
    eigenvectors as columns, each flipped so its largest-magnitude entry is
    positive.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"eig_symmetric: expected a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("eig_symmetric: non-finite entries")
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-9:
        raise ValueError("eig_symmetric: matrix is not symmetric")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(1.0, np.linalg.norm(a))
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= tol * scale:
            break
        for p, q in rounds:
            apq = a[p, q]
            live = np.abs(apq) > 1e-300
            if not live.any():
                continue
            p, q, apq = p[live], q[live], apq[live]
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            t[theta == 0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
    else:
        raise RuntimeError("eig_symmetric: Jacobi sweeps did not converge")
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    vals, v = vals[order], v[:, order]
    lead = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[lead, np.arange(n)])
    signs[signs == 0] = 1.0
    return vals, v * signs


_EIG_FLOOR = 1e-12


@dataclass
class Embedding:
    coords: np.ndarray          # N x dim
    eigenvalues: np.ndarray     # retained, descending, clamped at >= 0
    raw_eigenvalues: np.ndarray  # retained, before clamping
    degenerate: bool = False


def double_center(s: np.ndarray) -> np.ndarray:
    n = s.shape[0]
    j = np.eye(n) - np.full((n, n), 1.0 / n)
    return -0.5 * j @ (s * s) @ j


def classical_mds(s, dim: int) -> Embedding:
    s = np.asarray(s, dtype=np.float64)
    n = s.shape[0]
    if s.shape != (n, n):
        raise ValueError(f"classical_mds: expected a square matrix, got {s.shape}")
    if not 1 <= dim < n:
        raise ValueError(f"classical_mds: need 1 <= dim < N, got dim={dim}, N={n}")
    vals, vecs = eig_symmetric(double_center(s))
    raw = vals[:dim].copy()
    # eigenvalues at round-off level carry arbitrary null-space vectors; drop them
    floor = _EIG_FLOOR * float(np.abs(vals).max())
    kept = np.where(raw > floor, raw, 0.0)
    if not np.any(kept > 0):
        return Embedding(np.zeros((n, dim)), kept, raw, degenerate=True)
    return Embedding(vecs[:, :dim] * np.sqrt(kept), kept, raw)


def procrustes_align(x: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Orthogonal map (rotation or reflection) of centred ``x`` closest to ``reference``."""
    u, _, vt = np.linalg.svd(x.T @ reference)
    return x @ (u @ vt)
