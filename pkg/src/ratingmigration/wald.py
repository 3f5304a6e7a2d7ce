"""Score, Hessian and Wald/delta-method intervals for the discrete-panel likelihood.

Derivatives are taken with respect to the allowed off-diagonal rates
``q_ab``; perturbing ``q_ab`` also moves ``q_aa`` so rows keep summing to
zero, i.e. the direction is ``e_a e_b^T - e_a e_a^T``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.stats

from .core import DiscretePanel
from .ctmc import AllowedPairs, GeneratorMatrix, tpm
from .errors import DataError, ImpossibleTransitionError, NotPositiveDefiniteError
from .matexp import d2expm_block, dexpm_block, expm, generator_direction

GENERATOR = "generator"


def z_value(level: float) -> float:
    """Two-sided normal quantile; 1.959963984540054 at ``level=0.95``."""
    if not 0 < level < 1:
        raise DataError("confidence level must lie in (0, 1)")
    return float(scipy.stats.norm.ppf(0.5 + level / 2))


def _check(Q: GeneratorMatrix, panel: DiscretePanel, pairs: AllowedPairs):
    if panel.scale.labels != Q.scale.labels:
        raise DataError("panel and generator use different scales")
    for a, b in pairs:
        if not Q.q[a, b] > 0:
            raise DataError(f"allowed pair ({a}, {b}) has a non-positive rate")


def _weights(Q: GeneratorMatrix, dt: float, N: np.ndarray):
    P = expm(Q.q, dt)
    mask = N > 0
    if np.any(P[mask] <= 0):
        bad = np.argwhere(mask & (P <= 0))
        raise ImpossibleTransitionError(
            "observed transition has zero probability",
            [(Q.scale.labels[i], Q.scale.labels[j]) for i, j in bad], {"dt": dt})
    W1 = np.zeros_like(N)
    W2 = np.zeros_like(N)
    W1[mask] = N[mask] / P[mask]
    W2[mask] = N[mask] / P[mask] ** 2
    return W1, W2


def score(Q: GeneratorMatrix, panel: DiscretePanel, pairs: AllowedPairs) -> np.ndarray:
    """Gradient of the panel log-likelihood over the allowed pairs."""
    _check(Q, panel, pairs)
    h = Q.h
    g = np.zeros(len(pairs))
    for dt, N in panel.grouped():
        if not np.any(N):
            continue
        W1, _ = _weights(Q, dt, N)
        for k, (a, b) in enumerate(pairs):
            g[k] += np.sum(W1 * dexpm_block(Q.q, generator_direction(h, a, b), dt))
    return g


@dataclass(frozen=True, eq=False)
class HessianBundle:
    pairs: AllowedPairs
    gradient: np.ndarray
    hessian: np.ndarray
    fisher_inverse: np.ndarray

    @property
    def variances(self) -> np.ndarray:
        return np.diag(self.fisher_inverse).copy()


def _observed_hessian(Q: GeneratorMatrix, panel: DiscretePanel, pairs: AllowedPairs):
    h = Q.h
    n = len(pairs)
    dirs = [generator_direction(h, a, b) for a, b in pairs]
    g = np.zeros(n)
    H = np.zeros((n, n))
    for dt, N in panel.grouped():
        if not np.any(N):
            continue
        W1, W2 = _weights(Q, dt, N)
        D = [dexpm_block(Q.q, B, dt) for B in dirs]
        for k in range(n):
            g[k] += np.sum(W1 * D[k])
            for m in range(k, n):
                d2 = d2expm_block(Q.q, dirs[k], dirs[m], dt)
                H[k, m] += np.sum(W1 * d2) - np.sum(W2 * D[k] * D[m])
    H = np.triu(H) + np.triu(H, 1).T
    return g, H


def hessian(Q: GeneratorMatrix, panel: DiscretePanel, pairs: AllowedPairs) -> HessianBundle:
    """Observed Hessian of the panel log-likelihood and the inverse Fisher information.

    Entry ``(ab, mn)`` is ``sum N/P * (d2P - dP_ab dP_mn / P)`` with the second
    derivative taken from a ``4h`` block exponential. The Fisher information
    ``-H`` is inverted through a Cholesky factorization; if it is not
    positive definite a :class:`NotPositiveDefiniteError` names the pairs
    spanning the offending directions.
    """
    _check(Q, panel, pairs)
    g, H = _observed_hessian(Q, panel, pairs)
    F = -H
    try:
        c = scipy.linalg.cho_factor(F, lower=True)
        Finv = scipy.linalg.cho_solve(c, np.eye(len(pairs)))
    except np.linalg.LinAlgError:
        Finv = None
    if Finv is None or not np.all(np.isfinite(Finv)) or np.any(np.diag(Finv) <= 0):
        w, V = np.linalg.eigh(F)
        tol = max(abs(w).max(), 1.0) * 1e-12
        bad = w <= tol
        weight = np.abs(V[:, bad]).max(axis=1) if bad.any() else np.zeros(len(pairs))
        offending = [pairs.pairs[k] for k in np.argsort(-weight) if weight[k] > 0.1]
        labels = [(Q.scale.labels[a], Q.scale.labels[b]) for a, b in offending]
        raise NotPositiveDefiniteError(
            "Fisher information is not positive definite; unidentified directions involve "
            + ", ".join(f"{a}->{b}" for a, b in labels), labels, w[bad])
    Finv = 0.5 * (Finv + Finv.T)
    return HessianBundle(pairs, g, H, Finv)


@dataclass(frozen=True, eq=False)
class IntervalMatrix:
    """Elementwise confidence bounds; non-allowed cells are degenerate at their value."""

    lower: np.ndarray
    upper: np.ndarray
    level: float
    target: str = GENERATOR
    labels: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"level": self.level, "target": self.target, "labels": list(self.labels),
                "lower": self.lower.tolist(), "upper": self.upper.tolist()}


def save_intervals(iv: IntervalMatrix, path) -> None:
    with open(path, "w") as fh:
        json.dump(iv.to_dict(), fh, indent=2)


def wald_intervals(Q_hat: GeneratorMatrix, bundle: HessianBundle, level: float = 0.95) -> IntervalMatrix:
    """``q_ab +- z * sd`` for allowed pairs; lower bounds are not truncated at zero."""
    z = z_value(level)
    lo = np.array(Q_hat.q)
    hi = np.array(Q_hat.q)
    sd = np.sqrt(bundle.variances)
    for k, (a, b) in enumerate(bundle.pairs):
        lo[a, b] = Q_hat.q[a, b] - z * sd[k]
        hi[a, b] = Q_hat.q[a, b] + z * sd[k]
    # diagonal entries are not free parameters
    np.fill_diagonal(lo, np.diag(Q_hat.q))
    np.fill_diagonal(hi, np.diag(Q_hat.q))
    return IntervalMatrix(lo, hi, level, GENERATOR, Q_hat.scale.labels)


def _sensitivity_matrices(Q: GeneratorMatrix, pairs: AllowedPairs, t: float) -> np.ndarray:
    """``dP(t)/dq_ab`` for every allowed pair, stacked as ``(N_a, h, h)``."""
    h = Q.h
    if t == 0:
        return np.zeros((len(pairs), h, h))
    return np.stack([dexpm_block(Q.q, generator_direction(h, a, b), t) for a, b in pairs])


def tpm_sensitivity(Q_hat: GeneratorMatrix, pairs: AllowedPairs, i: int, j: int, t: float) -> np.ndarray:
    """Gradient of ``p_ij(t)`` with respect to the allowed rates."""
    if i == Q_hat.h - 1:
        raise DataError("the absorbing default row has no free parameters")
    if t < 0:
        raise DataError("horizon must be non-negative")
    return _sensitivity_matrices(Q_hat, pairs, t)[:, i, j].copy()


def delta_variance(Q_hat: GeneratorMatrix, bundle: HessianBundle, i: int, j: int, t: float) -> float:
    g = tpm_sensitivity(Q_hat, bundle.pairs, i, j, t)
    return float(g @ bundle.fisher_inverse @ g)


@dataclass(frozen=True)
class PdPoint:
    t: float
    pd: float
    lower: float
    upper: float
    degenerate: bool


def pd_curve(Q_hat: GeneratorMatrix, bundle: HessianBundle, i: int, t_grid, level: float = 0.95,
             j: int | None = None) -> list[PdPoint]:
    """Default probability of rating ``i`` over ``t_grid`` with delta-method bands.

    ``j`` switches the target to any other column. A grid point whose
    sensitivity vector vanishes is flagged ``degenerate``; its band has zero
    width.
    """
    h = Q_hat.h
    if i == h - 1:
        raise DataError("the absorbing default row has no free parameters")
    j = h - 1 if j is None else j
    z = z_value(level)
    grid = np.asarray(t_grid, dtype=float)
    if np.any(grid < 0):
        raise DataError("horizons must be non-negative")
    if np.any(np.diff(grid) < 0):
        raise DataError("horizons must be ascending")
    out = []
    for t in grid:
        p = float(tpm(Q_hat, t)[i, j])
        g = tpm_sensitivity(Q_hat, bundle.pairs, i, j, t)
        degenerate = not np.any(np.abs(g) > 0)
        var = max(float(g @ bundle.fisher_inverse @ g), 0.0)
        half = z * np.sqrt(var)
        out.append(PdPoint(float(t), p, p - half, p + half, degenerate))
    return out


def write_pd_curve(points, path) -> None:
    with open(path, "w") as fh:
        fh.write("t,pd,lower,upper,degenerate_flag\n")
        for p in points:
            fh.write(f"{p.t!r},{p.pd!r},{p.lower!r},{p.upper!r},{int(p.degenerate)}\n")
