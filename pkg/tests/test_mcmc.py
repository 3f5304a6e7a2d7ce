import csv
import json

import numpy as np
import pytest

from ratingmigration.calibrated import reference_model
from ratingmigration.core import DEFAULTED, EntityTrack, EventHistory, RatingScale, Terminal
from ratingmigration.ctmc import AllowedPairs
from ratingmigration.errors import ConvergenceError, ConvergenceWarning, DataError
from ratingmigration.mcmc import (McmcConfig, PosteriorChain, fit_mcmc, posterior_summary,
                                  prior_means, run_chains, save_summary, split_rhat,
                                  write_chain_csv)
from ratingmigration.momentum import momentum_support
from ratingmigration.simulate import SimConfig, simulate_momentum


def batch_means_se(x, n_batches=25):
    b = np.array_split(np.asarray(x), n_batches)
    means = np.array([c.mean() for c in b])
    return means.std(ddof=1) / np.sqrt(n_batches)


@pytest.fixture(scope="module")
def toy():
    """Every entity jumps straight from A to default: alpha and beta are unidentified.

    The posterior is then q ~ Gamma(K + 1, S + 1/m) with m = K / S the prior
    mean, and alpha, beta keep their Gamma priors.
    """
    scale = RatingScale(("A", "D"), 0)
    rng = np.random.default_rng(3)
    times = rng.exponential(4.0, size=30)
    tracks = tuple(EntityTrack(f"e{k}", 0.0, 0, ((float(t), 1),), Terminal(DEFAULTED, float(t)),
                               h=2) for k, t in enumerate(times))
    return EventHistory(scale, tracks), len(times), float(times.sum())


@pytest.fixture(scope="module")
def informative():
    return simulate_momentum(reference_model(), SimConfig(120, 10.0, (), seed=21))


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(iterations=0), dict(burn_in=10, iterations=10),
                                    dict(proposal_shape=1.0), dict(alpha_prior=(0, 1)),
                                    dict(chains=0)])
    def test_invalid(self, kw):
        with pytest.raises(DataError):
            McmcConfig(**kw)


class TestConjugateToy:
    def test_moments(self, toy):
        hist, K, S = toy
        cfg = McmcConfig(iterations=12000, burn_in=2000, proposal_shape=8.0, seed=5)
        chain = fit_mcmc(hist, cfg)
        m = K / S
        shape, rate = K + 1, S + 1 / m
        cases = [(chain.q[:, 0], shape / rate, shape / rate**2),
                 (chain.alpha[:, 0], 2 / 20, 2 / 400), (chain.alpha[:, 1], 2 / 20, 2 / 400),
                 (chain.beta[:, 0], 2.0, 2.0), (chain.beta[:, 1], 2.0, 2.0)]
        for x, mean, var in cases:
            assert abs(x.mean() - mean) < 3 * batch_means_se(x)
            sq = (x - mean) ** 2
            assert abs(sq.mean() - var) < 3 * batch_means_se(sq)

    def test_prior_means(self, toy):
        hist, K, S = toy
        pairs = momentum_support(hist)
        assert pairs.pairs == ((0, 1),)
        assert prior_means(hist, pairs)[0] == pytest.approx(K / S)


class TestChains:
    def test_shapes_and_determinism(self, informative):
        cfg = McmcConfig(iterations=300, burn_in=100, seed=7)
        a = fit_mcmc(informative, cfg)
        b = fit_mcmc(informative, cfg)
        assert len(a) == 200
        assert a.q.shape == (200, len(a.pairs)) and a.alpha.shape == (200, 2)
        for x, y in [(a.q, b.q), (a.alpha, b.alpha), (a.beta, b.beta),
                     (a.log_posterior, b.log_posterior)]:
            np.testing.assert_array_equal(x, y)
        assert a.seed == 7

    def test_chain_index_changes_stream(self, informative):
        cfg = McmcConfig(iterations=50, burn_in=10, seed=7)
        a = fit_mcmc(informative, cfg, chain_index=0)
        b = fit_mcmc(informative, cfg, chain_index=1)
        assert b.seed == 8 and not np.array_equal(a.q, b.q)
        c = fit_mcmc(informative, McmcConfig(iterations=50, burn_in=10, seed=8))
        np.testing.assert_array_equal(b.q, c.q)

    def test_acceptance_and_positivity(self, informative):
        chain = fit_mcmc(informative, McmcConfig(iterations=300, burn_in=100, seed=1))
        assert np.all((chain.acceptance_rates > 0) & (chain.acceptance_rates < 1))
        assert np.all(chain.matrix() > 0)
        assert np.all(np.isfinite(chain.log_posterior))

    def test_run_chains(self, informative):
        cfg = McmcConfig(iterations=40, burn_in=10, seed=3, chains=2)
        chains = run_chains(informative, cfg)
        assert [c.seed for c in chains] == [3, 4]
        parallel = run_chains(informative, cfg, workers=2)
        for a, b in zip(chains, parallel):
            np.testing.assert_array_equal(a.matrix(), b.matrix())

    def test_frozen_proposal_is_reported(self, informative):
        # a wide proposal over three sweeps leaves some component without a single acceptance
        with pytest.raises(ConvergenceError):
            fit_mcmc(informative, McmcConfig(iterations=3, burn_in=0, proposal_shape=2.0,
                                             alpha_prior=(2.0, 1e-3), seed=0))

    def test_no_transitions(self):
        scale = RatingScale(("A", "D"), 0)
        tr = EntityTrack("a", 0.0, 0, (), Terminal("open", 1.0), h=2)
        with pytest.raises(DataError):
            fit_mcmc(EventHistory(scale, (tr,)))


def constant_chain(n=20):
    scale = RatingScale(("A", "B", "D"), 0)
    pairs = AllowedPairs(((0, 1), (1, 2)))
    q = np.tile([0.1, 0.2], (n, 1))
    return PosteriorChain(scale, pairs, q, np.tile([0.03, 0.1], (n, 1)), np.tile([3.0, 1.5], (n, 1)),
                          np.zeros(n), np.full(6, 0.5), 0, McmcConfig(iterations=n + 1, burn_in=1))


class TestSummary:
    def test_constant_chain(self):
        s = posterior_summary(constant_chain())
        np.testing.assert_allclose(s.mean, [0.1, 0.2, 0.03, 0.1, 3.0, 1.5], rtol=1e-14)
        np.testing.assert_allclose(s.lower, s.upper, rtol=1e-14)
        assert s.model.base.q[0, 1] == pytest.approx(0.1)
        assert s.model.params.beta == pytest.approx((3.0, 1.5))
        assert s.names == ["q[A->B]", "q[B->D]", "alpha_inv", "alpha_spec", "beta_inv",
                           "beta_spec"]

    def test_shuffle_invariance(self, informative, rng):
        chain = fit_mcmc(informative, McmcConfig(iterations=200, burn_in=50, seed=2))
        perm = rng.permutation(len(chain))
        shuffled = PosteriorChain(chain.scale, chain.pairs, chain.q[perm], chain.alpha[perm],
                                  chain.beta[perm], chain.log_posterior[perm],
                                  chain.acceptance_rates, chain.seed, chain.config)
        a, b = posterior_summary(chain), posterior_summary(shuffled)
        np.testing.assert_allclose(a.mean, b.mean, rtol=1e-12)
        np.testing.assert_array_equal(a.lower, b.lower)
        np.testing.assert_array_equal(a.upper, b.upper)

    def test_interval_coverage_helpers(self):
        s = posterior_summary(constant_chain())
        assert s.covers("alpha_spec", 0.1) and not s.covers("alpha_spec", 0.2)

    def test_empty(self):
        with pytest.raises(DataError):
            posterior_summary([])

    def test_outputs(self, tmp_path):
        chain = constant_chain(5)
        write_chain_csv(chain, tmp_path / "chain.csv")
        rows = list(csv.reader(open(tmp_path / "chain.csv")))
        assert rows[0][-1] == "log_posterior" and len(rows) == 6
        save_summary(posterior_summary(chain), tmp_path / "s.json", {"seed": 0})
        doc = json.loads((tmp_path / "s.json").read_text())
        assert doc["seed"] == 0 and doc["parameters"]["beta_inv"]["mean"] == 3.0


class TestRhat:
    def test_iid_chains(self, rng):
        assert split_rhat(rng.normal(size=(4, 2000))) < 1.01

    def test_separated_chains(self, rng):
        x = rng.normal(size=(4, 500)) + np.arange(4)[:, None]
        assert split_rhat(x) > 1.5

    def test_trend_within_single_chain(self, rng):
        x = rng.normal(size=1000) + np.linspace(0, 5, 1000)
        assert split_rhat(x) > 1.1

    def test_scale_difference_caught_by_folding(self, rng):
        x = rng.normal(size=(2, 2000)) * np.array([[1.0], [5.0]])
        assert split_rhat(x) > 1.05

    def test_pooled_summary_warns(self):
        a = constant_chain()
        b = PosteriorChain(a.scale, a.pairs, a.q * 2, a.alpha, a.beta, a.log_posterior,
                           a.acceptance_rates, 1, a.config)
        with pytest.warns(ConvergenceWarning):
            s = posterior_summary([a, b])
        assert s.rhat[0] == float("inf")
