"""EM estimation of a generator from discretely observed transition counts.

The E-step uses closed-form conditional expectations of the complete-data
statistics (jump counts ``K_ij`` and holding times ``S_i``) built from
block-augmented matrix exponentials; the M-step is ``q_ij = E[K_ij] / E[S_i]``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import DiscretePanel
from .ctmc import ALLOWED_THRESHOLD, GeneratorMatrix, panel_log_likelihood
from .errors import (BoundaryWarning, ConvergenceWarning, DataError,
                     ImpossibleTransitionError, NumericalError)
from .matexp import dexpm_block, expm, expm_gradient, unit

log = logging.getLogger(__name__)

INITS = ("diagonal-adjacent", "uniform")


@dataclass(frozen=True)
class EmConfig:
    """EM settings.

    ``epsilon`` defines the constraint set: off-diagonal rates stay below
    ``1/epsilon`` and adjacent rates ``q_{i,i+-1}`` above ``epsilon``.
    ``init`` is ``"diagonal-adjacent"``, ``"uniform"`` or a GeneratorMatrix.
    """

    epsilon: float = 1e-6
    tol: float = 1e-9
    max_iter: int = 5000
    init: object = "diagonal-adjacent"
    snap_threshold: float = ALLOWED_THRESHOLD

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise DataError("epsilon must lie in (0, 1)")
        if not self.tol > 0:
            raise DataError("tol must be positive")
        if int(self.max_iter) < 1:
            raise DataError("max_iter must be a positive integer")
        if not isinstance(self.init, GeneratorMatrix) and self.init not in INITS:
            raise DataError(f"init must be one of {INITS} or a GeneratorMatrix")


@dataclass(frozen=True, eq=False)
class EmStats:
    """Conditional expectations of jump counts and holding times given the panel."""

    expected_jumps: np.ndarray
    expected_holding: np.ndarray


@dataclass(frozen=True, eq=False)
class EmResult:
    generator: GeneratorMatrix
    trace: list[float]
    converged: bool
    n_iter: int
    boundary_pairs: list[tuple[int, int]] = field(default_factory=list)
    snapped_pairs: list[tuple[int, int]] = field(default_factory=list)

    @property
    def boundary_active(self) -> bool:
        return bool(self.boundary_pairs)

    def __iter__(self):
        # allows ``Q, trace = em_fit(...)``
        return iter((self.generator, self.trace))


def _ratio_weights(Q: np.ndarray, dt: float, N: np.ndarray, scale) -> tuple[np.ndarray, float]:
    """``W = N / exp(Q dt)`` on observed cells, plus the log-likelihood term."""
    P = expm(Q, dt)
    mask = N > 0
    if np.any(P[mask] <= 0):
        bad = np.argwhere(mask & (P <= 0))
        raise ImpossibleTransitionError(
            "observed transition has zero probability under the current generator",
            [(scale.labels[i], scale.labels[j]) for i, j in bad], {"dt": dt})
    W = np.zeros_like(N)
    W[mask] = N[mask] / P[mask]
    return W, float(np.sum(N[mask] * np.log(P[mask])))


def _stats_and_loglik(Q: np.ndarray, panel: DiscretePanel, method: str):
    h = Q.shape[0]
    K = np.zeros((h, h))
    S = np.zeros(h)
    ll = 0.0
    for dt, N in panel.grouped():
        W, l_u = _ratio_weights(Q, dt, N, panel.scale)
        ll += l_u
        if method == "block":
            # G_ij = sum_sr W_sr d exp(Q dt)_sr / d q_ij (all h^2 at once)
            G = expm_gradient(Q, W, dt)
            K += Q * G
            S += np.diag(G)
        elif method == "pairwise":
            for i in range(h):
                S[i] += np.sum(W * dexpm_block(Q, unit(h, i, i), dt))
                for j in range(h):
                    if i != j and Q[i, j] > 0:
                        K[i, j] += np.sum(W * dexpm_block(Q, Q[i, j] * unit(h, i, j), dt))
        else:
            raise DataError(f"unknown E-step method {method!r}")
    np.fill_diagonal(K, 0.0)
    return K, S, ll


def expected_stats(Q: GeneratorMatrix, panel: DiscretePanel, method: str = "block") -> EmStats:
    """E-step: ``E[K_ij | N]`` and ``E[S_i | N]`` under ``Q``.

    ``method="pairwise"`` evaluates one ``2h`` exponential per statistic,
    ``[[Q, q_ij e_i e_j^T], [0, Q]]`` for jumps and ``[[Q, e_i e_i^T], [0, Q]]``
    for holding times. ``method="block"`` obtains every statistic from a
    single transposed block exponential per distinct interval length; the two
    agree to rounding.
    """
    if panel.scale.labels != Q.scale.labels:
        raise DataError("panel and generator use different scales")
    K, S, _ = _stats_and_loglik(Q.q, panel, method)
    # round-off can leave tiny negatives on cells whose true value is 0
    K = np.clip(K, 0.0, None)
    S = np.clip(S, 0.0, None)
    return EmStats(K, S)


def initial_generator(panel: DiscretePanel, init) -> np.ndarray:
    h = panel.scale.h
    if isinstance(init, GeneratorMatrix):
        return np.array(init.q)
    q = np.zeros((h, h))
    if init == "uniform":
        q[: h - 1] = 0.1 / (h - 1)
    else:
        q[: h - 1] = 0.01
        for i in range(h - 1):
            if i > 0:
                q[i, i - 1] = 0.05
            q[i, i + 1] = 0.05
    q[h - 1] = 0.0
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    return q


def _adjacent_mask(h: int) -> np.ndarray:
    m = np.zeros((h, h), dtype=bool)
    m[0, 1] = True
    for i in range(1, h - 1):
        m[i, i - 1] = True
        m[i, i + 1] = True
    return m


def project(rates: np.ndarray, epsilon: float) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Clip off-diagonal rates into the constraint set and repair the diagonal.

    Returns the projected generator and the pairs where a bound was active.
    """
    h = rates.shape[0]
    q = np.array(rates)
    np.fill_diagonal(q, 0.0)
    q[h - 1] = 0.0
    adj = _adjacent_mask(h)
    low = adj & (q < epsilon)
    high = q > 1.0 / epsilon
    q[low] = epsilon
    q[high] = 1.0 / epsilon
    np.fill_diagonal(q, -q.sum(axis=1))
    active = sorted(map(tuple, np.argwhere(low | high).tolist()))
    return q, [(int(i), int(j)) for i, j in active]


def m_step(Q: np.ndarray, stats: EmStats) -> np.ndarray:
    """``q'_ij = E[K_ij] / E[S_i]``; rows with no expected holding time keep their rates."""
    K, S = stats.expected_jumps, stats.expected_holding
    new = np.array(Q)
    np.fill_diagonal(new, 0.0)
    rows = S > 0
    new[rows] = K[rows] / S[rows, None]
    np.fill_diagonal(new, 0.0)
    return new


def em_fit(panel: DiscretePanel, config: EmConfig | None = None, method: str = "block") -> EmResult:
    """Fit a generator to ``panel`` by constrained EM.

    Iterates until the relative change of the log-likelihood drops below
    ``config.tol`` or ``config.max_iter`` steps have run; ``trace[k]`` is the
    log-likelihood after step ``k + 1``. At convergence, rates below
    ``config.snap_threshold`` are set to exactly zero. A warning is issued if
    a constraint bound is active at the returned point.
    """
    config = config or EmConfig()
    if panel.total <= 0:
        raise DataError("panel contains no transitions")
    scale = panel.scale
    h = scale.h
    Q, active = project(initial_generator(panel, config.init), config.epsilon)
    K, S, ll = _stats_and_loglik(Q, panel, method)
    if not np.isfinite(ll):
        raise NumericalError("non-finite log-likelihood at the initial generator")
    trace: list[float] = []
    converged = False
    n_iter = 0
    for n_iter in range(1, int(config.max_iter) + 1):
        stats = EmStats(np.clip(K, 0, None), np.clip(S, 0, None))
        Q_new, active = project(m_step(Q, stats), config.epsilon)
        K, S, ll_new = _stats_and_loglik(Q_new, panel, method)
        if not np.isfinite(ll_new):
            raise NumericalError(f"non-finite log-likelihood at EM step {n_iter}")
        trace.append(ll_new)
        change = abs(ll_new - ll) / max(abs(ll), 1e-300)
        Q, ll = Q_new, ll_new
        if change < config.tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"EM stopped after {n_iter} steps without meeting tol={config.tol}",
                      ConvergenceWarning, stacklevel=2)
    snap = (Q < config.snap_threshold) & (Q > 0) & ~np.eye(h, dtype=bool)
    snapped = [(int(i), int(j)) for i, j in np.argwhere(snap)]
    if snapped:
        Q = np.array(Q)
        Q[snap] = 0.0
        np.fill_diagonal(Q, 0.0)
        np.fill_diagonal(Q, -Q.sum(axis=1))
    if active:
        warnings.warn("EM converged on the constraint boundary at "
                      + ", ".join(f"{scale.labels[i]}->{scale.labels[j]}" for i, j in active),
                      BoundaryWarning, stacklevel=2)
    log.debug("EM finished after %d steps, loglik %.6f", n_iter, ll)
    return EmResult(GeneratorMatrix(scale, Q), trace, converged, n_iter, active, snapped)
