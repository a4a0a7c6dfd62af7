"""Batched small-matrix helpers shared across modules."""

from __future__ import annotations

import numpy as np


def inv3(M: np.ndarray):
    """Adjugate-based batched 3x3 inverse.

    Returns ``(inverse, det)`` for an (n,3,3) stack; one LAPACK call per
    matrix would dominate the per-frame budget, the closed form does not.
    """
    M = np.asarray(M, dtype=np.float64)
    a, b, c = M[..., 0, 0], M[..., 0, 1], M[..., 0, 2]
    d, e, f = M[..., 1, 0], M[..., 1, 1], M[..., 1, 2]
    g, h, i = M[..., 2, 0], M[..., 2, 1], M[..., 2, 2]
    A = e * i - f * h
    B = c * h - b * i
    C = b * f - c * e
    D = f * g - d * i
    E = a * i - c * g
    F = c * d - a * f
    G = d * h - e * g
    H = b * g - a * h
    I = a * e - b * d
    det = a * A + d * B + g * C
    adj = np.empty_like(M)
    adj[..., 0, 0], adj[..., 0, 1], adj[..., 0, 2] = A, B, C
    adj[..., 1, 0], adj[..., 1, 1], adj[..., 1, 2] = D, E, F
    adj[..., 2, 0], adj[..., 2, 1], adj[..., 2, 2] = G, H, I
    return adj / det[..., None, None], det


def quadform(vecs: np.ndarray, mats: np.ndarray) -> np.ndarray:
    """Batched v^T M v for (n,3) vectors and (n,3,3) matrices."""
    return np.einsum("...i,...ij,...j->...", vecs, mats, vecs)


def rotate_sym3(R: np.ndarray, mats: np.ndarray) -> np.ndarray:
    """Conjugate a stack of symmetric 3x3 matrices: R M R^T."""
    return R @ mats @ R.T
