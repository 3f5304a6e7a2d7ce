"""Self-exciting marked point process for downward rating momentum.

The ground intensity of an entity in rating ``j`` is

    lambda(t) = q_j + M(t),   M(t) = sum_m sum_{tau in T_m(t)} alpha_m beta_m exp(-beta_m (t - tau))

where ``T_m(t)`` are the entity's downgrade times before ``t`` whose
pre-downgrade rating lies in block ``m`` (0 investment, 1 speculative).
At a jump from ``j`` the destination ``k`` has probability
``(q_jk + M/N_j) / lambda`` for reachable downgrades (``N_j`` of them) and
``q_jk / lambda`` for upgrades.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

import scipy.optimize

from .core import EntityTrack, EventHistory, JumpTable, RatingScale
from .ctmc import AllowedPairs, GeneratorMatrix, complete_data_statistics, mle_continuous
from .errors import ConvergenceError, DataError, ImpossibleTransitionError


@dataclass(frozen=True)
class MomentumParams:
    """Momentum mass ``alpha`` and decay rate ``beta`` per channel (investment, speculative)."""

    alpha: tuple[float, float] = (0.0, 0.0)
    beta: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        alpha = tuple(float(a) for a in self.alpha)
        beta = tuple(float(b) for b in self.beta)
        if len(alpha) != 2 or len(beta) != 2:
            raise DataError("momentum needs exactly two channels")
        if any(not np.isfinite(a) or a < 0 for a in alpha):
            raise DataError(f"alpha must be non-negative, got {alpha}")
        if any(not np.isfinite(b) or b <= 0 for b in beta):
            raise DataError(f"beta must be positive, got {beta}")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @property
    def is_markov(self) -> bool:
        return self.alpha == (0.0, 0.0)


@dataclass(frozen=True, eq=False)
class MomentumModel:
    base: GeneratorMatrix
    params: MomentumParams

    def __post_init__(self):
        if not self.params.is_markov:
            h = self.base.h
            missing = [self.scale.labels[j] for j in range(h - 1) if self.n_down[j] == 0]
            if missing:
                raise DataError("momentum needs a reachable downgrade from every non-default "
                                f"rating; none from {missing}")

    @property
    def scale(self) -> RatingScale:
        return self.base.scale

    @property
    def n_down(self) -> np.ndarray:
        """``N_j``: number of ratings reachable from ``j`` by a downgrade."""
        q = self.base.q
        h = q.shape[0]
        return np.array([int(np.sum(q[j, j + 1:] > 0)) for j in range(h)])

    def with_params(self, params: MomentumParams) -> "MomentumModel":
        return MomentumModel(self.base, params)

    def to_dict(self) -> dict:
        return {"q": self.base.q.tolist(), "alpha": list(self.params.alpha),
                "beta": list(self.params.beta), "scale": self.scale.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "MomentumModel":
        scale = RatingScale.from_dict(doc["scale"])
        return cls(GeneratorMatrix(scale, np.array(doc["q"], dtype=float)),
                   MomentumParams(tuple(doc["alpha"]), tuple(doc["beta"])))


def load_model(path) -> MomentumModel:
    with open(path) as fh:
        return MomentumModel.from_dict(json.load(fh))


def save_model(model: MomentumModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=2)


def momentum_load(track: EntityTrack, params: MomentumParams, scale: RatingScale, t: float) -> float:
    """``M(t)`` from the track's downgrades strictly before ``t``."""
    if t < track.start_time:
        raise DataError(f"time {t} precedes the start of entity {track.entity_id}")
    total = 0.0
    for tau, frm in track.downgrades(before=t):
        m = scale.channel(frm)
        total += params.alpha[m] * params.beta[m] * np.exp(-params.beta[m] * (t - tau))
    return float(total)


def _live(track: EntityTrack, t: float, scale: RatingScale) -> int:
    if t > track.end_time:
        raise DataError(f"time {t} is after the end of observation of {track.entity_id}")
    j = track.rating_before(t)
    if j == scale.default:
        raise DataError(f"entity {track.entity_id} is in the absorbing default state at {t}")
    return j


def intensity(model: MomentumModel, track: EntityTrack, t: float) -> float:
    """Ground intensity ``q_{X(t-)} + M(t)`` (predictable version)."""
    j = _live(track, t, model.scale)
    return float(-model.base.q[j, j] + momentum_load(track, model.params, model.scale, t))


def compensator(track: EntityTrack, model: MomentumModel, T: float | None = None) -> float:
    """Closed-form ``int_{start}^T lambda(u) du``; ``T`` defaults to the terminal time."""
    T = track.end_time if T is None else float(T)
    if T > track.end_time + 1e-12:
        raise DataError(f"T={T} beyond the observation of entity {track.entity_id}")
    if T < track.start_time:
        raise DataError(f"T={T} precedes the start of entity {track.entity_id}")
    qd = -np.diag(model.base.q)
    base = 0.0
    for a, b, r in track.segments():
        if a >= T:
            break
        base += qd[r] * (min(b, T) - a)
    mom = 0.0
    p = model.params
    for tau, frm in track.downgrades(before=T):
        m = model.scale.channel(frm)
        mom += p.alpha[m] * (1.0 - np.exp(-p.beta[m] * (T - tau)))
    return float(base + mom)


def mark_probability(model: MomentumModel, track: EntityTrack, t: float, from_state: int,
                     to_state: int) -> float:
    """Probability that a jump at ``t`` out of ``from_state`` lands in ``to_state``."""
    q = model.base.q
    h = q.shape[0]
    j, k = int(from_state), int(to_state)
    if j == h - 1:
        raise DataError("no jumps leave the absorbing default state")
    if k == j:
        raise DataError("a jump must change the rating")
    if k < j and q[j, k] == 0:
        raise DataError(f"upgrade {model.scale.labels[j]}->{model.scale.labels[k]} has zero rate")
    M = momentum_load(track, model.params, model.scale, t)
    lam = -q[j, j] + M
    if not lam > 0:
        raise DataError(f"zero intensity in state {model.scale.labels[j]}")
    if k < j:
        return float(q[j, k] / lam)
    if q[j, k] == 0:
        return 0.0
    return float((q[j, k] + M / model.n_down[j]) / lam)


def jump_momentum(table: JumpTable, params: MomentumParams) -> np.ndarray:
    """``M(t_i)`` at every jump (zero for upgrades, which never receive momentum)."""
    M = np.zeros(table.n_jumps)
    if len(table.pair_jump):
        a = np.asarray(params.alpha)[table.pair_channel]
        b = np.asarray(params.beta)[table.pair_channel]
        np.add.at(M, table.pair_jump, a * b * np.exp(-b * table.pair_lag))
    return M


def momentum_compensator(table: JumpTable, params: MomentumParams) -> float:
    """``sum_tau alpha_m (1 - exp(-beta_m (T_entity - tau)))`` over all downgrades."""
    if not len(table.dg_channel):
        return 0.0
    a = np.asarray(params.alpha)[table.dg_channel]
    b = np.asarray(params.beta)[table.dg_channel]
    return float(np.sum(a * -np.expm1(-b * table.dg_remaining)))


def jump_terms(model: MomentumModel, table: JumpTable, M: np.ndarray | None = None) -> np.ndarray:
    """Per-jump event factors ``q_jk + 1{downgrade} M(t_i) / N_j``."""
    if M is None:
        M = jump_momentum(table, model.params)
    q = model.base.q
    nd = model.n_down
    base = q[table.frm, table.to]
    extra = np.where(table.down & (base > 0), M / np.maximum(nd[table.frm], 1), 0.0)
    return base + extra


def mpp_log_likelihood(model: MomentumModel, history: EventHistory) -> float:
    """Log-likelihood of an event history under the momentum model.

    Entities are independent. Each contributes the log event factors of its
    jumps minus its compensator up to its terminal time (censoring and the
    observation window only truncate the compensator).
    """
    if history.scale.labels != model.scale.labels:
        raise DataError("history and model use different scales")
    table = history.table
    terms = jump_terms(model, table)
    if np.any(terms <= 0):
        bad = np.flatnonzero(terms <= 0)
        labels = model.scale.labels
        cells = sorted({(labels[table.frm[i]], labels[table.to[i]]) for i in bad})
        ids = sorted({history.tracks[table.entity[i]].entity_id for i in bad})
        raise ImpossibleTransitionError("observed jump has zero likelihood contribution", cells,
                                        {"entities": ids[:20]})
    qd = -np.diag(model.base.q)
    return float(np.sum(np.log(terms)) - np.dot(qd, table.holding)
                 - momentum_compensator(table, model.params))


def momentum_support(history: EventHistory) -> AllowedPairs:
    """Observed transitions, plus the adjacent downgrade for rows that have none.

    Every non-default rating needs a reachable downgrade to carry momentum.
    """
    h = history.scale.h
    K, _ = complete_data_statistics(history)
    mask = K > 0
    for j in range(h - 1):
        if not mask[j, j + 1:].any():
            mask[j, j + 1] = True
    np.fill_diagonal(mask, False)
    mask[h - 1] = False
    return AllowedPairs(tuple(map(tuple, np.argwhere(mask).tolist())))


class PairLikelihood:
    """Momentum log-likelihood over a fixed rate support, split by rate.

    ``pair_terms(q, extra)[k]`` collects every term that involves rate ``k``
    (its jumps and its holding-time exposure); the momentum compensator is
    kept separately. ``extra`` is ``M(t_i) / N_j`` per jump (zero for
    upgrades), so a single-rate update touches only that rate's jumps.
    """

    def __init__(self, history: EventHistory, pairs: AllowedPairs):
        table = history.table
        h = history.scale.h
        self.table = table
        self.pairs = pairs
        index = {p: k for k, p in enumerate(pairs)}
        missing = {(int(a), int(b)) for a, b in zip(table.frm, table.to)} - set(index)
        if missing:
            raise DataError(f"observed transitions outside the support: {sorted(missing)}")
        self.jump_pair = np.array([index[(a, b)] for a, b in zip(table.frm, table.to)], dtype=np.int64)
        a = pairs.as_array()
        self.pair_row = a[:, 0]
        n_down = np.zeros(h, dtype=np.int64)
        for i, j in pairs:
            if j > i:
                n_down[i] += 1
        self.jump_ndown = np.maximum(n_down[table.frm], 1)
        self.down = np.asarray(table.down)
        self.holding_pair = np.asarray(table.holding)[self.pair_row]
        self.jumps_of = [np.flatnonzero(self.jump_pair == k) for k in range(len(pairs))]
        self.n_pairs = len(pairs)
        # momentum pairs always land on downgrades
        self.pair_scale = 1.0 / self.jump_ndown[table.pair_jump] if len(table.pair_jump) else np.zeros(0)

    def momentum(self, alpha, beta) -> np.ndarray:
        t = self.table
        M = np.zeros(t.n_jumps)
        if len(t.pair_jump):
            a = np.asarray(alpha)[t.pair_channel]
            b = np.asarray(beta)[t.pair_channel]
            np.add.at(M, t.pair_jump, a * b * np.exp(-b * t.pair_lag))
        return np.where(self.down, M / self.jump_ndown, 0.0)

    def compensator(self, alpha, beta) -> float:
        t = self.table
        if not len(t.dg_channel):
            return 0.0
        a = np.asarray(alpha)[t.dg_channel]
        b = np.asarray(beta)[t.dg_channel]
        return float(np.sum(a * -np.expm1(-b * t.dg_remaining)))

    def pair_terms(self, q, extra) -> np.ndarray:
        logs = np.log(q[self.jump_pair] + extra)
        return np.bincount(self.jump_pair, weights=logs, minlength=self.n_pairs) - q * self.holding_pair

    def one_pair(self, k, qk, extra) -> float:
        idx = self.jumps_of[k]
        return float(np.sum(np.log(qk + extra[idx])) - qk * self.holding_pair[k])

    def log_likelihood(self, q, alpha, beta) -> float:
        return float(self.pair_terms(np.asarray(q), self.momentum(alpha, beta)).sum()
                     - self.compensator(alpha, beta))

    def gradient(self, q, alpha, beta) -> tuple[float, np.ndarray]:
        """Log-likelihood and its gradient over ``(q, alpha, beta)``."""
        q = np.asarray(q, dtype=float)
        alpha = np.asarray(alpha, dtype=float)
        beta = np.asarray(beta, dtype=float)
        t = self.table
        extra = self.momentum(alpha, beta)
        terms = q[self.jump_pair] + extra
        inv = 1.0 / terms
        ll = float(np.sum(np.log(terms)) - np.dot(q, self.holding_pair) - self.compensator(alpha, beta))
        g_q = np.bincount(self.jump_pair, weights=inv, minlength=self.n_pairs) - self.holding_pair
        g_a = np.zeros(2)
        g_b = np.zeros(2)
        if len(t.pair_jump):
            c = t.pair_channel
            a, b, lag = alpha[c], beta[c], t.pair_lag
            w = inv[t.pair_jump] * self.pair_scale * np.exp(-b * lag)
            g_a += np.bincount(c, weights=w * b, minlength=2)
            g_b += np.bincount(c, weights=w * a * (1.0 - b * lag), minlength=2)
        if len(t.dg_channel):
            c = t.dg_channel
            r = t.dg_remaining
            b = beta[c]
            g_a -= np.bincount(c, weights=-np.expm1(-b * r), minlength=2)
            g_b -= np.bincount(c, weights=alpha[c] * r * np.exp(-b * r), minlength=2)
        return ll, np.concatenate([g_q, g_a, g_b])


@dataclass(frozen=True, eq=False)
class MomentumFit:
    model: MomentumModel
    log_likelihood: float
    pairs: AllowedPairs
    n_iter: int


def fit_momentum_mle(history: EventHistory, init: MomentumParams | None = None,
                     max_iter: int = 2000) -> MomentumFit:
    """Maximum-likelihood momentum model by L-BFGS-B in log-parameters.

    The baseline support is :func:`momentum_support`; rates start at the
    CTMC MLE. ``alpha`` is bounded below by ``1e-12`` (the Markov model sits
    on that boundary) and ``beta`` lies in ``[1e-3, 1e3]``.
    """
    if history.n_transitions == 0:
        raise DataError("history contains no transitions")
    pairs = momentum_support(history)
    lik = PairLikelihood(history, pairs)
    q0 = np.maximum(pairs.values(mle_continuous(history)), 1e-6)
    init = init or MomentumParams((0.05, 0.05), (2.0, 2.0))
    x0 = np.log(np.concatenate([q0, init.alpha, init.beta]))
    na = len(pairs)

    def fun(x):
        v = np.exp(x)
        ll, g = lik.gradient(v[:na], v[na:na + 2], v[na + 2:])
        return -ll, -(g * v)

    bounds = ([(-40.0, 10.0)] * na + [(np.log(1e-12), np.log(1e3))] * 2
              + [(np.log(1e-3), np.log(1e3))] * 2)
    res = scipy.optimize.minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                                  options={"maxiter": max_iter, "ftol": 1e-14, "gtol": 1e-8})
    if not np.isfinite(res.fun):
        raise ConvergenceError("momentum likelihood maximization produced a non-finite value")
    v = np.exp(res.x)
    zero = GeneratorMatrix(history.scale, np.zeros((history.scale.h, history.scale.h)))
    base = pairs.with_values(zero, v[:na])
    model = MomentumModel(base, MomentumParams(tuple(v[na:na + 2]), tuple(v[na + 2:])))
    return MomentumFit(model, -float(res.fun), pairs, int(res.nit))
