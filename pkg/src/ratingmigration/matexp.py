"""Matrix exponential and block-augmented directional derivatives.

Derivatives of ``exp(A t)`` are read off the exponential of an upper
block-triangular matrix, so no quadrature is involved:

    expm([[A, B], [0, A]] t)[:h, h:] = int_0^t exp(A v) B exp(A (t - v)) dv

which is the directional derivative of ``exp(A t)`` along ``B``.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import DataError, NumericalError


def _square(A, name="A") -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise DataError(f"{name} must be a non-empty square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise DataError(f"{name} has non-finite entries")
    return A


def expm(A, t: float = 1.0) -> np.ndarray:
    """``exp(A t)`` by Padé-13 scaling and squaring."""
    A = _square(A)
    if t == 0:
        return np.eye(A.shape[0])
    E = scipy.linalg.expm(A * t)
    if not np.all(np.isfinite(E)):
        raise NumericalError(f"matrix exponential overflowed (||A t||_1 = {np.abs(A * t).sum(0).max():.3g})")
    return E


def _check_same(A, *Bs):
    for k, B in enumerate(Bs):
        if B.shape != A.shape:
            raise DataError(f"dimension mismatch: A is {A.shape}, direction {k} is {B.shape}")


def dexpm_block(A, B, t: float = 1.0) -> np.ndarray:
    """Directional derivative of ``exp(A t)`` along ``B``.

    Upper-right ``h x h`` block of ``exp([[A, B], [0, A]] t)``.
    """
    A = _square(A)
    B = _square(B, "B")
    _check_same(A, B)
    h = A.shape[0]
    C = np.zeros((2 * h, 2 * h))
    C[:h, :h] = A
    C[h:, h:] = A
    C[:h, h:] = B
    return expm(C, t)[:h, h:]


def d2expm_block(A, B1, B2, t: float = 1.0) -> np.ndarray:
    """Mixed second directional derivative of ``exp(A t)`` along ``B1`` and ``B2``.

    Builds ``C1 = [[A, B1], [0, A]]`` and its derivative along ``B2``,
    ``dC1 = diag(B2, B2)``, and returns rows ``0:h``, columns ``3h:4h`` of
    ``exp([[C1, dC1], [0, C1]] t)``.
    """
    A = _square(A)
    B1 = _square(B1, "B1")
    B2 = _square(B2, "B2")
    _check_same(A, B1, B2)
    h = A.shape[0]
    C = np.zeros((4 * h, 4 * h))
    for k in range(4):
        C[k * h:(k + 1) * h, k * h:(k + 1) * h] = A
    C[0:h, h:2 * h] = B1
    C[2 * h:3 * h, 3 * h:4 * h] = B1
    C[0:h, 2 * h:3 * h] = B2
    C[h:2 * h, 3 * h:4 * h] = B2
    return expm(C, t)[:h, 3 * h:]


def expm_gradient(A, W, t: float = 1.0) -> np.ndarray:
    """Gradient of ``sum(W * exp(A t))`` with respect to every entry of ``A``.

    Entry ``(i, j)`` equals ``sum_sr W_sr d exp(A t)_sr / d a_ij``. One
    ``2h`` exponential of ``[[A^T, W], [0, A^T]]`` yields all ``h^2``
    derivatives at once.
    """
    A = _square(A)
    W = _square(W, "W")
    _check_same(A, W)
    return dexpm_block(A.T, W, t)


def unit(h: int, i: int, j: int) -> np.ndarray:
    """``e_i e_j^T``."""
    E = np.zeros((h, h))
    E[i, j] = 1.0
    return E


def generator_direction(h: int, i: int, j: int) -> np.ndarray:
    """``e_i e_j^T - e_i e_i^T``: perturbation of ``q_ij`` with the diagonal kept conservative."""
    E = np.zeros((h, h))
    E[i, j] = 1.0
    E[i, i] = -1.0
    return E
