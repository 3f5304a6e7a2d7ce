"""Simulation of CTMC and momentum rating paths, Monte-Carlo and cohort TPMs.

Firms are simulated in fixed-size blocks, each with its own random stream
derived from ``(seed, block index)``. Blocks are independent, so results do
not depend on how many worker processes run them.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import (CENSORED, DEFAULTED, OPEN, DiscretePanel, EntityTrack, EventHistory,
                   PanelObservation, RatingScale, Terminal)
from .ctmc import GeneratorMatrix, tpm
from .errors import DataError
from .momentum import MomentumModel, MomentumParams

BLOCK_SIZE = 4096


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``n_firms_per_rating`` firms start in each of ``ratings`` (all
    non-default ratings by default). ``withdrawal_rate`` adds exponential
    censoring for synthetic-data realism.
    """

    n_firms_per_rating: int = 100_000
    horizon: float = 10.0
    snapshot_grid: tuple[float, ...] = (1.0,)
    seed: int = 0
    withdrawal_rate: float | None = None
    ratings: tuple[int, ...] | None = None
    start_time: float = 0.0

    def __post_init__(self):
        grid = tuple(float(x) for x in self.snapshot_grid)
        object.__setattr__(self, "snapshot_grid", grid)
        if int(self.n_firms_per_rating) < 1:
            raise DataError("n_firms_per_rating must be positive")
        if not self.horizon > 0:
            raise DataError("horizon must be positive")
        if grid and (max(grid) > self.horizon or min(grid) < 0):
            raise DataError("snapshot grid must lie within [0, horizon]")
        if list(grid) != sorted(grid):
            raise DataError("snapshot grid must be ascending")
        if self.withdrawal_rate is not None and self.withdrawal_rate < 0:
            raise DataError("withdrawal_rate must be non-negative")

    def initial_states(self, h: int) -> np.ndarray:
        ratings = range(h - 1) if self.ratings is None else self.ratings
        ratings = [int(r) for r in ratings]
        if any(not 0 <= r < h - 1 for r in ratings):
            raise DataError("initial ratings must be non-default states")
        return np.repeat(np.array(ratings, dtype=np.int64), int(self.n_firms_per_rating))


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(block),)))


@dataclass
class _BlockResult:
    snap: np.ndarray                    # (n, K) state at each snapshot
    ev_firm: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    ev_time: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ev_state: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    end: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kind: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))  # 0 open 1 cens 2 def


def _stop_times(rng, n, horizon, withdrawal_rate):
    if withdrawal_rate:
        w = rng.exponential(1.0 / withdrawal_rate, size=n)
        return np.minimum(w, horizon), w < horizon
    return np.full(n, float(horizon)), np.zeros(n, bool)


def _draw_destination(rng, weights: np.ndarray) -> np.ndarray:
    cum = np.cumsum(weights, axis=1)
    u = rng.random(len(weights)) * cum[:, -1]
    k = (cum <= u[:, None]).sum(axis=1)
    return np.minimum(k, weights.shape[1] - 1)


def _run_block(args) -> _BlockResult:
    (kind, q, alpha, beta, channel, init, init_load, horizon, withdrawal_rate, grid, record,
     seed, block) = args
    rng = _block_rng(seed, block)
    h = q.shape[0]
    n = len(init)
    off = np.array(q)
    np.fill_diagonal(off, 0.0)
    qd = off.sum(axis=1)
    reach_down = np.triu(off > 0, k=1)
    n_down = reach_down.sum(axis=1)
    stop, withdrawn = _stop_times(rng, n, horizon, withdrawal_rate)
    state = np.array(init)
    t = np.zeros(n)
    load = np.zeros((n, 2)) if init_load is None else np.array(init_load, dtype=float)
    grid = np.asarray(grid, dtype=float)
    snap = np.repeat(state[:, None], len(grid), axis=1)
    active = (qd[state] + load.sum(axis=1) > 0) & (state != h - 1)
    ev = ([], [], [])
    momentum = kind == "momentum"
    while active.any():
        idx = np.flatnonzero(active)
        bound = qd[state[idx]] + load[idx].sum(axis=1)
        dt = rng.exponential(1.0 / bound)
        tc = t[idx] + dt
        done = tc >= stop[idx]
        active[idx[done]] = False
        go = ~done
        idx, dt, tc, bound = idx[go], dt[go], tc[go], bound[go]
        if not len(idx):
            break
        t[idx] = tc
        if momentum:
            load[idx] *= np.exp(-np.outer(dt, beta))
            lam = qd[state[idx]] + load[idx].sum(axis=1)
            accept = rng.random(len(idx)) * bound < lam
            idx, tc = idx[accept], tc[accept]
            if not len(idx):
                continue
        j = state[idx]
        weights = off[j]
        if momentum:
            M = load[idx].sum(axis=1)
            share = np.divide(M, n_down[j], out=np.zeros_like(M), where=n_down[j] > 0)
            weights = weights + reach_down[j] * share[:, None]
        k = _draw_destination(rng, weights)
        if momentum:
            down = k > j
            if down.any():
                di = idx[down]
                ch = channel[j[down]]
                load[di, ch] += alpha[ch] * beta[ch]
        state[idx] = k
        if len(grid):
            snap[idx] = np.where(grid[None, :] >= tc[:, None], k[:, None], snap[idx])
        if record:
            ev[0].append(idx)
            ev[1].append(tc)
            ev[2].append(k)
        dead = (k == h - 1) | (qd[k] + load[idx].sum(axis=1) <= 0)
        active[idx[dead]] = False
    res = _BlockResult(snap)
    if record:
        if ev[0]:
            f = np.concatenate(ev[0])
            order = np.argsort(f, kind="stable")
            res.ev_firm = f[order]
            res.ev_time = np.concatenate(ev[1])[order]
            res.ev_state = np.concatenate(ev[2])[order]
        defaulted = state == h - 1
        end = np.array(stop)
        kinds = np.where(withdrawn, 1, 0)
        if defaulted.any():
            last = np.full(n, np.nan)
            last[res.ev_firm] = res.ev_time  # later events overwrite earlier ones
            end[defaulted] = last[defaulted]
            kinds[defaulted] = 2
        res.end = end
        res.kind = kinds
    return res


def _simulate(kind, Q: GeneratorMatrix, params: MomentumParams, config: SimConfig, record: bool,
              workers: int = 1, init_load: np.ndarray | None = None) -> tuple[np.ndarray, list[_BlockResult]]:
    scale = Q.scale
    init = config.initial_states(scale.h)
    if init_load is not None:
        init_load = np.asarray(init_load, dtype=float)
        if init_load.shape != (len(init), 2) or np.any(init_load < 0):
            raise DataError("initial momentum load must be a non-negative (n_firms, 2) array")
    channel = np.array([scale.channel(j) for j in range(scale.h)], dtype=np.int64)
    alpha = np.asarray(params.alpha, dtype=float)
    beta = np.asarray(params.beta, dtype=float)
    jobs = []
    for b, lo in enumerate(range(0, len(init), BLOCK_SIZE)):
        load = None if init_load is None else init_load[lo:lo + BLOCK_SIZE]
        jobs.append((kind, np.array(Q.q), alpha, beta, channel, init[lo:lo + BLOCK_SIZE], load,
                     config.horizon, config.withdrawal_rate, config.snapshot_grid, record,
                     config.seed, b))
    if workers and workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_block, jobs))
    else:
        results = [_run_block(job) for job in jobs]
    return init, results


def _to_history(scale: RatingScale, init, results, config: SimConfig) -> EventHistory:
    tracks = []
    offset = 0
    kinds = {0: OPEN, 1: CENSORED, 2: DEFAULTED}
    for res in results:
        n = len(res.end)
        bounds = np.searchsorted(res.ev_firm, np.arange(n + 1))
        for i in range(n):
            lo, hi = bounds[i], bounds[i + 1]
            events = tuple(zip((res.ev_time[lo:hi] + config.start_time).tolist(),
                               res.ev_state[lo:hi].tolist()))
            term = Terminal(kinds[int(res.kind[i])], float(res.end[i]) + config.start_time)
            tracks.append(EntityTrack(f"F{offset + i:07d}", config.start_time, int(init[offset + i]),
                                      events, term, h=scale.h))
        offset += n
    return EventHistory(scale, tuple(tracks))


def simulate_ctmc(Q: GeneratorMatrix, config: SimConfig, workers: int = 1) -> EventHistory:
    """Exact CTMC paths: exponential holding times, embedded-chain jumps."""
    init, results = _simulate("ctmc", Q, MomentumParams(), config, True, workers)
    return _to_history(Q.scale, init, results, config)


def simulate_momentum(model: MomentumModel, config: SimConfig, workers: int = 1,
                      initial_load: np.ndarray | None = None) -> EventHistory:
    """Momentum-model paths by thinning.

    Between events the intensity only decays, so its value right after the
    last event (or rejected candidate) dominates it until the next one.
    ``initial_load`` gives each firm's momentum ``(M_inv, M_spec)`` at the
    start, e.g. ``alpha_m beta_m`` for a downgrade just before time 0; such
    prior downgrades are not part of the returned history.
    """
    init, results = _simulate("momentum", model.base, model.params, config, True, workers,
                              initial_load)
    return _to_history(model.scale, init, results, config)


def synthetic_history(model: MomentumModel, n_firms_per_rating: int, horizon: float, seed: int,
                      withdrawal_rate: float | None = None, ratings=None) -> EventHistory:
    """Stand-in for proprietary rating data: momentum paths with optional censoring."""
    cfg = SimConfig(n_firms_per_rating, horizon, (), seed, withdrawal_rate,
                    None if ratings is None else tuple(ratings))
    return simulate_momentum(model, cfg)


@dataclass(frozen=True, eq=False)
class TpmEstimate:
    """Monte-Carlo (or cohort) transition matrices at each horizon."""

    times: np.ndarray
    p: np.ndarray           # (K, h, h)
    se: np.ndarray          # (K, h, h)
    n_start: np.ndarray     # (h,) firms per initial rating
    analytic: np.ndarray | None = None

    def z_scores(self) -> np.ndarray:
        """Cellwise ``(p_mc - p) / sqrt(p (1 - p) / n)`` against the analytic matrix.

        The binomial SE is taken at the analytic probability, so cells the
        simulation never visits still get a finite score. Cells with analytic
        probability 0 or 1 score 0 when matched exactly and infinity otherwise.
        """
        if self.analytic is None:
            raise DataError("no analytic reference attached")
        p = self.analytic
        n = np.broadcast_to(self.n_start[None, :, None], p.shape)
        var = np.divide(p * (1 - p), n, out=np.zeros_like(p), where=n > 0)
        diff = self.p - p
        z = np.zeros_like(diff)
        ok = var > 0
        z[ok] = diff[ok] / np.sqrt(var[ok])
        z[~ok & (np.abs(diff) > 1e-12)] = np.inf
        return z

    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z_scores())))

    def pd(self, rating: int) -> tuple[np.ndarray, np.ndarray]:
        h = self.p.shape[1]
        return self.p[:, rating, h - 1], self.se[:, rating, h - 1]


def _binomial(counts: np.ndarray, n: np.ndarray):
    p = np.divide(counts, n[:, None], out=np.zeros_like(counts, dtype=float), where=n[:, None] > 0)
    se = np.sqrt(np.divide(p * (1 - p), n[:, None], out=np.zeros_like(p), where=n[:, None] > 0))
    return p, se


def monte_carlo_tpm(model, config: SimConfig, workers: int = 1) -> TpmEstimate:
    """Empirical frequencies of the state at each snapshot given the initial rating.

    ``model`` may be a :class:`MomentumModel` or a :class:`GeneratorMatrix`;
    for the latter the analytic ``exp(Q t)`` is attached for cross-checking.
    """
    if not config.snapshot_grid:
        raise DataError("snapshot grid is empty")
    if isinstance(model, GeneratorMatrix):
        Q, params, kind = model, MomentumParams(), "ctmc"
    else:
        Q, params, kind = model.base, model.params, "momentum"
    h = Q.h
    init, results = _simulate(kind, Q, params, config, False, workers)
    snap = np.concatenate([r.snap for r in results], axis=0)
    grid = np.asarray(config.snapshot_grid)
    n_start = np.bincount(init, minlength=h).astype(float)
    rows = np.unique(init)
    if np.any(n_start[rows] == 0):
        raise DataError("zero firms in some initial rating")
    P = np.zeros((len(grid), h, h))
    SE = np.zeros_like(P)
    for k in range(len(grid)):
        C = np.zeros((h, h))
        np.add.at(C, (init, snap[:, k]), 1.0)
        p, se = _binomial(C, n_start)
        P[k], SE[k] = p, se
        for r in range(h):
            if n_start[r] == 0:
                P[k, r, r] = 1.0
    analytic = None
    if kind == "ctmc":
        analytic = np.stack([tpm(Q, t) for t in grid])
        unseeded = n_start == 0
        analytic[:, unseeded] = P[:, unseeded]
    return TpmEstimate(grid, P, SE, n_start, analytic)


def empirical_tpm(history: EventHistory, T: float, t0: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Cohort TPM over ``[t0, t0 + T]`` and the number of entities per initial rating.

    Entities rated at ``t0`` count if they are still observed at ``t0 + T``
    or defaulted by then; default is kept once it happens. Withdrawn
    entities drop out. Rows without entities carry the unit vector on the
    diagonal and a zero count.
    """
    if not T > 0:
        raise DataError("horizon must be positive")
    h = history.scale.h
    C = np.zeros((h, h))
    t1 = t0 + T
    for tr in history.tracks:
        if tr.start_time > t0:
            continue
        defaulted = tr.terminal.kind == DEFAULTED
        if defaulted and tr.end_time <= t0:
            continue
        if not defaulted and tr.end_time < t1:
            continue
        i = tr.rating_at(t0)
        j = h - 1 if defaulted and tr.end_time <= t1 else tr.rating_at(t1)
        C[i, j] += 1
    n = C.sum(axis=1)
    if n.sum() == 0:
        raise DataError("no entity qualifies for the cohort")
    P, _ = _binomial(C, n)
    for r in range(h):
        if n[r] == 0:
            P[r, r] = 1.0
    return P, n


def simulate_panel(Q: GeneratorMatrix, n_per_rating: int, periods: int, seed: int, dt: float = 1.0,
                   reseed_defaults: bool = True, ratings=None) -> DiscretePanel:
    """Cohort count panel for ``periods`` intervals of a Markov population.

    Each interval, firms in rating ``i`` move multinomially with ``exp(Q dt)``.
    With ``reseed_defaults`` a firm that defaults re-enters the next interval
    in the rating it held before defaulting, so each interval carries a
    similar amount of information.
    """
    h = Q.h
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    P = tpm(Q, dt)
    pop = np.zeros(h, dtype=np.int64)
    for r in (range(h - 1) if ratings is None else ratings):
        pop[r] = n_per_rating
    obs = []
    for _ in range(periods):
        N = np.zeros((h, h))
        for i in range(h - 1):
            if pop[i]:
                N[i] = rng.multinomial(pop[i], P[i])
        N[h - 1, h - 1] = pop[h - 1]
        nxt = N.sum(axis=0).astype(np.int64)
        if reseed_defaults:
            N_def = N[: h - 1, h - 1].astype(np.int64)
            nxt[: h - 1] += N_def
            nxt[h - 1] = 0
            N[h - 1, h - 1] = 0
        pop = nxt
        obs.append(PanelObservation(dt, N))
    return DiscretePanel(Q.scale, tuple(obs))
