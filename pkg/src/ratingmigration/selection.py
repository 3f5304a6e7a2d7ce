"""Markov versus momentum model comparison: BIC and a stratified Cox test."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.stats

from .core import EventHistory
from .ctmc import ALLOWED_THRESHOLD, GeneratorMatrix, complete_data_log_likelihood
from .errors import ConvergenceError, DataError
from .momentum import MomentumModel, mpp_log_likelihood

N_DEFINITIONS = ("transitions", "entities")
DIRECTIONS = ("downward", "upward")


@dataclass(frozen=True)
class BicReport:
    """BIC of both models under the convention ``2 log L - log(n) dim`` (larger is better)."""

    loglik_markov: float
    loglik_momentum: float
    n: int
    dim_markov: int
    dim_momentum: int
    bic_markov: float
    bic_momentum: float
    difference: float

    def to_dict(self) -> dict:
        return asdict(self)


def bic(loglik: float, n: int, dim: int) -> float:
    return 2.0 * loglik - math.log(n) * dim


def bic_compare(history: EventHistory, markov: GeneratorMatrix, momentum: MomentumModel,
                n_definition: str = "transitions") -> BicReport:
    """Compare a CTMC and a momentum model on the same complete-data history.

    ``n`` counts rating transitions by default (``n_definition="entities"``
    counts entities instead). The Markov dimension is the number of baseline
    rates above the allowed-pair threshold; the momentum model adds four.
    """
    labels = history.scale.labels
    if markov.scale.labels != labels or momentum.scale.labels != labels:
        raise DataError("models and history use different scales")
    if n_definition not in N_DEFINITIONS:
        raise DataError(f"n_definition must be one of {N_DEFINITIONS}")
    n = history.n_transitions if n_definition == "transitions" else len(history)
    if n < 1:
        raise DataError("history contains no transitions")
    ll0 = complete_data_log_likelihood(markov, history)
    ll1 = mpp_log_likelihood(momentum, history)
    dim0 = int(np.sum(markov.offdiagonal() > ALLOWED_THRESHOLD))
    dim1 = dim0 + 4
    b0, b1 = bic(ll0, n, dim0), bic(ll1, n, dim1)
    return BicReport(ll0, ll1, int(n), dim0, dim1, b0, b1, b1 - b0)


@dataclass(frozen=True)
class CoxTestResult:
    direction: str
    coefficient: float
    p_value: float
    loglik_null: float
    loglik_alt: float
    n_events: int
    n_iter: int = 0

    @property
    def statistic(self) -> float:
        return max(2.0 * (self.loglik_alt - self.loglik_null), 0.0)

    def to_dict(self) -> dict:
        return asdict(self)


def save_report(report, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)


def _risk_counts(history: EventHistory, direction: str):
    """Per event: covariate of the event entity and ``(n0, n1)`` of its risk set.

    Spells are stratified by rating. An entity is at risk in stratum ``j``
    over ``(entry, exit]``; its covariate is 1 if it entered ``j`` by a move
    in the tested direction.
    """
    h = history.scale.h
    down = direction == "downward"
    spells = {j: ([], [], []) for j in range(h - 1)}       # start, end, z
    events = {j: ([], []) for j in range(h - 1)}           # time, z
    for tr in history.tracks:
        prev = None
        segs = tr.segments()
        for k, (a, b, r) in enumerate(segs):
            if r == h - 1:
                break
            z = 0
            if prev is not None:
                z = int(r > prev) if down else int(r < prev)
            spells[r][0].append(a)
            spells[r][1].append(b)
            spells[r][2].append(z)
            # spell k ends with event k; a trailing censored or open spell has none
            if k < len(tr.events):
                if (tr.events[k][1] > r) == down:
                    events[r][0].append(b)
                    events[r][1].append(z)
            prev = r
    z_e, n0_e, n1_e = [], [], []
    for j in range(h - 1):
        t_ev = np.asarray(events[j][0], dtype=float)
        if not len(t_ev):
            continue
        a = np.asarray(spells[j][0], dtype=float)
        b = np.asarray(spells[j][1], dtype=float)
        z = np.asarray(spells[j][2], dtype=np.int64)
        counts = []
        for flag in (0, 1):
            sa = np.sort(a[z == flag])
            sb = np.sort(b[z == flag])
            # at risk when a < t <= b
            counts.append(np.searchsorted(sa, t_ev, "left") - np.searchsorted(sb, t_ev, "left"))
        z_e.append(np.asarray(events[j][1], dtype=np.int64))
        n0_e.append(counts[0])
        n1_e.append(counts[1])
    if not z_e:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    return (np.concatenate(z_e).astype(float), np.concatenate(n0_e).astype(float),
            np.concatenate(n1_e).astype(float))


def _partial(c: float, z, n0, n1):
    """Breslow log partial likelihood and its first two derivatives in ``c``."""
    ec = math.exp(c)
    denom = n0 + n1 * ec
    p = n1 * ec / denom
    ll = float(np.sum(c * z - np.log(denom)))
    return ll, float(np.sum(z - p)), float(-np.sum(p * (1 - p)))


def cox_momentum_test(history: EventHistory, direction: str = "downward", tol: float = 1e-10,
                      max_iter: int = 100) -> CoxTestResult:
    """Likelihood-ratio test of ``c = 0`` in ``lambda_n(t) = q_i(t) exp(c Z_n(t))``.

    Baselines ``q_i`` are left unspecified by stratifying on the current
    rating. For ``direction="downward"`` events are downgrades and ``Z`` flags
    entities that were downgraded into their current rating; the upward test
    uses upgrades and entry by upgrade. Ties follow Breslow. Strata without
    events drop out.
    """
    if direction not in DIRECTIONS:
        raise DataError(f"direction must be one of {DIRECTIONS}")
    z, n0, n1 = _risk_counts(history, direction)
    if not len(z):
        raise DataError(f"no {direction} events in the history")
    ll0, _, _ = _partial(0.0, z, n0, n1)
    if not np.any(n1 > 0):
        return CoxTestResult(direction, 0.0, 1.0, ll0, ll0, len(z), 0)
    c = 0.0
    ll, g, H = _partial(c, z, n0, n1)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        if H >= 0:
            raise ConvergenceError("partial likelihood is flat in the covariate")
        step = -g / H
        # step halving keeps each Newton update an ascent step
        for _ in range(60):
            ll_new, g_new, H_new = _partial(c + step, z, n0, n1)
            if ll_new >= ll - 1e-12:
                break
            step *= 0.5
        c, ll, g, H = c + step, ll_new, g_new, H_new
        if abs(g) < tol or abs(step) < 1e-14:
            break
        if abs(c) > 50:
            raise ConvergenceError("Cox coefficient diverges; the covariate separates the events")
    else:
        raise ConvergenceError(f"Newton iteration did not converge in {max_iter} steps")
    stat = max(2.0 * (ll - ll0), 0.0)
    p = float(scipy.stats.chi2.sf(stat, df=1))
    return CoxTestResult(direction, float(c), p, ll0, ll, len(z), n_iter)
