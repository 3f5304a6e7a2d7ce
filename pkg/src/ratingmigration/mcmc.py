"""Single-component Metropolis-Hastings calibration of the momentum model.

Each sweep updates the baseline rates (row-major over the support), then
``alpha_1, alpha_2, beta_1, beta_2``. Proposals are Gamma draws with mean at
the current value and shape ``s``; the asymmetric proposal density enters
the acceptance ratio.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
import scipy.special
import scipy.stats

from .core import EventHistory
from .ctmc import AllowedPairs, GeneratorMatrix, complete_data_statistics
from .errors import ConvergenceError, ConvergenceWarning, DataError, NumericalError
from .momentum import MomentumModel, MomentumParams, PairLikelihood, momentum_support

MOMENTUM_NAMES = ("alpha_inv", "alpha_spec", "beta_inv", "beta_spec")
Q_FLOOR = 1e-4


@dataclass(frozen=True)
class McmcConfig:
    iterations: int = 11000
    burn_in: int = 1000
    proposal_shape: float = 200.0
    alpha_prior: tuple[float, float] = (2.0, 20.0)   # Gamma (shape, rate): mean 0.1
    beta_prior: tuple[float, float] = (2.0, 1.0)     # Gamma (shape, rate): mean 2.0
    seed: int = 0
    chains: int = 1

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise DataError("iterations must be positive")
        if not 0 <= int(self.burn_in) < int(self.iterations):
            raise DataError("burn_in must satisfy 0 <= burn_in < iterations")
        if not self.proposal_shape > 1:
            raise DataError("proposal_shape must exceed 1")
        for name in ("alpha_prior", "beta_prior"):
            a, b = getattr(self, name)
            if not (a > 0 and b > 0):
                raise DataError(f"{name} shape and rate must be positive")
        if int(self.chains) < 1:
            raise DataError("chains must be positive")


@dataclass(frozen=True, eq=False)
class PosteriorChain:
    """Retained samples of one chain.

    ``q`` holds the baseline rates over ``pairs``; ``alpha`` and ``beta`` are
    ``(n, 2)``. ``acceptance_rates`` follows the update order.
    """

    scale: object
    pairs: AllowedPairs
    q: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    log_posterior: np.ndarray
    acceptance_rates: np.ndarray
    seed: int
    config: McmcConfig

    def __len__(self):
        return len(self.log_posterior)

    @property
    def names(self) -> list[str]:
        labels = self.scale.labels
        return [f"q[{labels[i]}->{labels[j]}]" for i, j in self.pairs] + list(MOMENTUM_NAMES)

    def matrix(self) -> np.ndarray:
        """All parameters as an ``(n, N_a + 4)`` array in update order."""
        return np.hstack([self.q, self.alpha, self.beta])


def prior_means(history: EventHistory, pairs: AllowedPairs) -> np.ndarray:
    """First-transition MLE over ``pairs``, floored at ``1e-4``."""
    K, S = complete_data_statistics(history, first_transition_only=True)
    rates = np.divide(K, S[:, None], out=np.zeros_like(K), where=S[:, None] > 0)
    a = pairs.as_array()
    return np.maximum(rates[a[:, 0], a[:, 1]], Q_FLOOR)


def _log_gamma_pdf(x, shape, rate):
    return shape * math.log(rate) - scipy.special.gammaln(shape) + (shape - 1) * math.log(x) - rate * x


def _log_proposal(x, given, s):
    # Gamma(shape s, scale given/s) evaluated at x
    return _log_gamma_pdf(x, s, s / given)


def fit_mcmc(history: EventHistory, config: McmcConfig | None = None, chain_index: int = 0) -> PosteriorChain:
    """Run one Metropolis-Hastings chain with seed ``config.seed + chain_index``.

    Baseline rates start at the first-transition MLE (floored at ``1e-4``)
    and have exponential priors with those means; ``alpha`` and ``beta``
    start at their prior means.
    """
    config = config or McmcConfig()
    if history.n_transitions == 0:
        raise DataError("history contains no transitions")
    pairs = momentum_support(history)
    target = PairLikelihood(history, pairs)
    means = prior_means(history, pairs)
    s = float(config.proposal_shape)
    a_shape, a_rate = config.alpha_prior
    b_shape, b_rate = config.beta_prior
    q = means.copy()
    alpha = np.full(2, a_shape / a_rate)
    beta = np.full(2, b_shape / b_rate)
    extra = target.momentum(alpha, beta)
    terms = target.pair_terms(q, extra)
    comp = target.compensator(alpha, beta)

    def log_prior_q(k, x):
        return -math.log(means[k]) - x / means[k]

    def log_prior_m(m, x):
        shape, rate = (config.alpha_prior if m < 2 else config.beta_prior)
        return _log_gamma_pdf(x, shape, rate)

    lp_q = np.array([log_prior_q(k, q[k]) for k in range(len(q))])
    mom = np.concatenate([alpha, beta])
    lp_m = np.array([log_prior_m(m, mom[m]) for m in range(4)])
    log_post = float(terms.sum() - comp + lp_q.sum() + lp_m.sum())
    if not np.isfinite(log_post):
        raise NumericalError("non-finite log-posterior at the initial state")

    rng = np.random.default_rng(np.random.SeedSequence(int(config.seed) + int(chain_index)))
    n_comp = len(q) + 4
    accepted = np.zeros(n_comp, dtype=np.int64)
    n_keep = int(config.iterations) - int(config.burn_in)
    out_q = np.empty((n_keep, len(q)))
    out_m = np.empty((n_keep, 4))
    out_lp = np.empty(n_keep)
    for it in range(int(config.iterations)):
        for k in range(len(q)):
            cur = q[k]
            new = rng.gamma(s, cur / s)
            if not new > 0:
                continue
            t_new = target.one_pair(k, new, extra)
            p_new = log_prior_q(k, new)
            log_r = (t_new - terms[k] + p_new - lp_q[k]
                     + _log_proposal(cur, new, s) - _log_proposal(new, cur, s))
            if math.log(rng.random()) < log_r:
                log_post += t_new - terms[k] + p_new - lp_q[k]
                q[k], terms[k], lp_q[k] = new, t_new, p_new
                accepted[k] += 1
        for m in range(4):
            cur = mom[m]
            new = rng.gamma(s, cur / s)
            if not new > 0:
                continue
            trial = mom.copy()
            trial[m] = new
            extra_new = target.momentum(trial[:2], trial[2:])
            terms_new = target.pair_terms(q, extra_new)
            comp_new = target.compensator(trial[:2], trial[2:])
            p_new = log_prior_m(m, new)
            d_lik = (terms_new.sum() - comp_new) - (terms.sum() - comp)
            log_r = d_lik + p_new - lp_m[m] + _log_proposal(cur, new, s) - _log_proposal(new, cur, s)
            if math.log(rng.random()) < log_r:
                log_post += d_lik + p_new - lp_m[m]
                mom, extra, terms, comp = trial, extra_new, terms_new, comp_new
                lp_m[m] = p_new
                accepted[len(q) + m] += 1
        r = it - int(config.burn_in)
        if r >= 0:
            out_q[r] = q
            out_m[r] = mom
            out_lp[r] = log_post
    rates = accepted / int(config.iterations)
    if np.any(accepted == 0):
        names = [f"q{p}" for p in pairs] + list(MOMENTUM_NAMES)
        dead = [names[k] for k in np.flatnonzero(accepted == 0)]
        raise ConvergenceError(f"no proposal was accepted for {dead}; check proposal_shape")
    if not np.all(np.isfinite(out_lp)):
        raise NumericalError("non-finite log-posterior during sampling")
    return PosteriorChain(history.scale, pairs, out_q, out_m[:, :2].copy(), out_m[:, 2:].copy(),
                          out_lp, rates, int(config.seed) + int(chain_index), config)


def _chain_job(args):
    history, config, i = args
    return fit_mcmc(history, config, i)


def run_chains(history: EventHistory, config: McmcConfig, workers: int = 1) -> list[PosteriorChain]:
    """``config.chains`` independent chains with seeds ``seed, seed+1, ...``."""
    jobs = [(history, config, i) for i in range(int(config.chains))]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_chain_job, jobs))
    return [_chain_job(j) for j in jobs]


def _rhat_basic(x: np.ndarray) -> float:
    # x: (chains, draws)
    m, n = x.shape
    if n < 2:
        return float("nan")
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1) if m > 1 else 0.0
    if W == 0:
        return 1.0 if B == 0 else float("inf")
    var = (n - 1) / n * W + B / n
    return float(np.sqrt(var / W))


def _split(draws: np.ndarray) -> np.ndarray:
    n = draws.shape[1] // 2
    return np.vstack([draws[:, :n], draws[:, draws.shape[1] - n:]])


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    r = scipy.stats.rankdata(x, method="average").reshape(x.shape)
    return scipy.stats.norm.ppf((r - 0.375) / (x.size + 0.25))


def split_rhat(draws) -> float:
    """Rank-normalized split-R-hat (maximum of bulk and folded versions).

    ``draws`` is ``(chains, draws)``; a single chain is split in halves.
    """
    x = _split(np.atleast_2d(np.asarray(draws, dtype=float)))
    if np.ptp(x) == 0:
        return 1.0
    bulk = _rhat_basic(_rank_normalize(x))
    folded = np.abs(x - np.median(x))
    tail = _rhat_basic(_rank_normalize(folded)) if np.ptp(folded) > 0 else 1.0
    return max(bulk, tail)


@dataclass(frozen=True, eq=False)
class PosteriorSummary:
    model: MomentumModel
    names: list[str]
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    rhat: np.ndarray | None = None
    acceptance_rates: np.ndarray | None = None

    def interval(self, name: str) -> tuple[float, float]:
        k = self.names.index(name)
        return float(self.lower[k]), float(self.upper[k])

    def covers(self, name: str, value: float) -> bool:
        lo, hi = self.interval(name)
        return lo <= value <= hi

    def to_dict(self) -> dict:
        doc = {"level": self.level, "model": self.model.to_dict(), "parameters": {}}
        for k, n in enumerate(self.names):
            entry = {"mean": float(self.mean[k]), "lower": float(self.lower[k]),
                     "upper": float(self.upper[k])}
            if self.rhat is not None:
                entry["rhat"] = float(self.rhat[k])
            if self.acceptance_rates is not None:
                entry["acceptance_rate"] = float(self.acceptance_rates[k])
            doc["parameters"][n] = entry
        return doc


def posterior_summary(chains, level: float = 0.95) -> PosteriorSummary:
    """Posterior means and equal-tailed intervals, pooling the given chains.

    With several chains the split-R-hat of each parameter is reported and a
    warning is issued when any reaches 1.05; samples are pooled regardless.
    """
    if isinstance(chains, PosteriorChain):
        chains = [chains]
    chains = list(chains)
    if not chains or any(len(c) == 0 for c in chains):
        raise DataError("empty chain")
    if not 0 < level < 1:
        raise DataError("level must lie in (0, 1)")
    first = chains[0]
    if any(c.pairs != first.pairs for c in chains):
        raise DataError("chains have different parameter supports")
    X = np.vstack([c.matrix() for c in chains])
    mean = X.mean(axis=0)
    lo, hi = np.quantile(X, [(1 - level) / 2, (1 + level) / 2], axis=0)
    rhat = None
    if len(chains) > 1:
        n = min(len(c) for c in chains)
        stacked = np.stack([c.matrix()[:n] for c in chains])     # (chains, n, p)
        rhat = np.array([split_rhat(stacked[:, :, k]) for k in range(X.shape[1])])
        if np.any(rhat >= 1.05):
            warnings.warn(f"split R-hat reaches {rhat.max():.3f}; chains may not have mixed",
                          ConvergenceWarning, stacklevel=2)
    acc = np.mean([c.acceptance_rates for c in chains], axis=0)
    na = len(first.pairs)
    base = GeneratorMatrix.from_offdiagonal(first.scale, first.pairs.raw_matrix(
        GeneratorMatrix(first.scale, np.zeros((first.scale.h, first.scale.h))), mean[:na]))
    model = MomentumModel(base, MomentumParams(tuple(mean[na:na + 2]), tuple(mean[na + 2:])))
    return PosteriorSummary(model, first.names, mean, lo, hi, level, rhat, acc)


def write_chain_csv(chain: PosteriorChain, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(chain.names + ["log_posterior"])
        for row, lp in zip(chain.matrix(), chain.log_posterior):
            w.writerow([repr(float(v)) for v in row] + [repr(float(lp))])


def save_summary(summary: PosteriorSummary, path, extra: dict | None = None) -> None:
    doc = summary.to_dict()
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def config_dict(config: McmcConfig) -> dict:
    return asdict(config)
