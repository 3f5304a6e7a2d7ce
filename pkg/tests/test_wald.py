import json
import math

import numpy as np
import pytest

from factories import (central_gradient, exact_panel, multinomial_panel, random_generator,
                       relative_error, richardson_hessian, scale_of)
from ratingmigration.core import DiscretePanel, PanelObservation
from ratingmigration.ctmc import AllowedPairs, GeneratorMatrix, allowed_pairs, panel_log_likelihood, tpm
from ratingmigration.em import EmConfig, em_fit
from ratingmigration.errors import DataError, NotPositiveDefiniteError
from ratingmigration.wald import (delta_variance, hessian, pd_curve, save_intervals, score,
                                  tpm_sensitivity, wald_intervals, write_pd_curve, z_value)


def loglik_of(Q, panel, pairs):
    return lambda v: panel_log_likelihood(pairs.with_values(Q, v), panel)


@pytest.fixture
def instance(rng):
    Q = random_generator(rng, 4, density=0.8)
    panel = multinomial_panel(rng, Q, dts=(1.0, 0.5), n=300)
    return Q, panel, allowed_pairs(Q)


@pytest.fixture
def fitted(rng):
    truth = random_generator(rng, 4, density=1.0, low=0.05, high=0.3)
    panel = multinomial_panel(rng, truth, dts=(1.0,) * 6, n=500)
    Q = em_fit(panel, EmConfig(tol=1e-13)).generator
    return Q, panel, hessian(Q, panel, allowed_pairs(Q))


def test_z_value():
    assert z_value(0.95) == pytest.approx(1.959963985, abs=1e-9)
    with pytest.raises(DataError):
        z_value(1.0)


class TestScore:
    def test_matches_finite_differences(self, instance):
        Q, panel, pairs = instance
        fd = central_gradient(loglik_of(Q, panel, pairs), pairs.values(Q))
        assert relative_error(score(Q, panel, pairs), fd) < 1e-6

    def test_zero_panel(self, rng):
        Q = random_generator(rng, 3)
        panel = DiscretePanel(Q.scale, (PanelObservation(1.0, np.zeros((3, 3))),))
        np.testing.assert_array_equal(score(Q, panel, allowed_pairs(Q)), 0.0)

    def test_stationary_at_em_fit(self, fitted):
        Q, panel, bundle = fitted
        assert np.max(np.abs(bundle.gradient)) < 1e-5 * panel.total

    def test_pair_with_zero_rate_rejected(self, instance):
        Q, panel, _ = instance
        q = Q.offdiagonal()
        q[0, 2] = 0.0
        Q0 = GeneratorMatrix.from_offdiagonal(Q.scale, q)
        with pytest.raises(DataError):
            score(Q0, panel, AllowedPairs(((0, 2),)))


class TestHessian:
    def test_matches_finite_differences(self, instance):
        Q, panel, pairs = instance
        bundle = hessian(Q, panel, pairs)
        fd = richardson_hessian(loglik_of(Q, panel, pairs), pairs.values(Q))
        assert relative_error(bundle.hessian, fd) < 1e-5
        np.testing.assert_allclose(bundle.gradient, score(Q, panel, pairs), rtol=1e-12)

    def test_symmetric(self, instance):
        Q, panel, pairs = instance
        H = hessian(Q, panel, pairs).hessian
        np.testing.assert_array_equal(H, H.T)

    def test_two_state_closed_form(self):
        # l(q) = n11 log e^{-q} + n12 log(1 - e^{-q})
        q, n11, n12 = 0.4, 700.0, 300.0
        Q = GeneratorMatrix.from_offdiagonal(scale_of(2), [[0, q], [0, 0]])
        panel = DiscretePanel(Q.scale, (PanelObservation(1.0, np.array([[n11, n12], [0, 0]])),))
        bundle = hessian(Q, panel, allowed_pairs(Q))
        e = math.exp(-q)
        assert bundle.gradient[0] == pytest.approx(-n11 + n12 * e / (1 - e), rel=1e-10)
        assert bundle.hessian[0, 0] == pytest.approx(-n12 * e / (1 - e) ** 2, rel=1e-10)
        assert bundle.fisher_inverse[0, 0] == pytest.approx((1 - e) ** 2 / (n12 * e), rel=1e-10)

    def test_fisher_inverse_is_inverse(self, fitted):
        _, _, bundle = fitted
        np.testing.assert_allclose(bundle.fisher_inverse @ -bundle.hessian,
                                   np.eye(len(bundle.pairs)), atol=1e-8)

    def test_unidentified_direction(self):
        # A cannot reach B and only A carries counts, so the B->D rate is flat
        Q = GeneratorMatrix.from_offdiagonal(scale_of(3), [[0, 0, 0.1], [0.1, 0, 0.2], [0, 0, 0]])
        N = np.array([[900.0, 0, 100], [0, 0, 0], [0, 0, 0]])
        panel = DiscretePanel(Q.scale, (PanelObservation(1.0, N),))
        with pytest.raises(NotPositiveDefiniteError) as info:
            hessian(Q, panel, AllowedPairs(((0, 2), (1, 2))))
        assert info.value.pairs == [("B", "D")]


class TestIntervals:
    def test_wald_bounds(self, fitted):
        Q, _, bundle = fitted
        iv = wald_intervals(Q, bundle, 0.95)
        sd = np.sqrt(bundle.variances)
        for k, (a, b) in enumerate(bundle.pairs):
            assert iv.upper[a, b] - iv.lower[a, b] == pytest.approx(2 * 1.959963985 * sd[k])
        assert np.all(iv.lower <= iv.upper)
        assert wald_intervals(Q, bundle).to_dict() == iv.to_dict()

    def test_non_allowed_cells_degenerate(self):
        Q = GeneratorMatrix.from_offdiagonal(scale_of(3), [[0, 0.2, 0.0], [0.1, 0, 0.2], [0, 0, 0]])
        panel = exact_panel(Q, dts=(1.0,), count=1e4)
        # A->D is a structural zero; A still reaches D through B in one year
        pairs = allowed_pairs(Q)
        iv = wald_intervals(Q, hessian(Q, panel, pairs))
        assert iv.lower[0, 2] == iv.upper[0, 2] == 0.0

    def test_negative_lower_bounds_kept(self):
        Q = GeneratorMatrix.from_offdiagonal(scale_of(2), [[0, 0.01], [0, 0]])
        panel = DiscretePanel(Q.scale, (PanelObservation(1.0, np.array([[99.0, 1.0], [0, 0]])),))
        iv = wald_intervals(Q, hessian(Q, panel, allowed_pairs(Q)))
        assert iv.lower[0, 1] < 0

    def test_json(self, fitted, tmp_path):
        Q, _, bundle = fitted
        path = tmp_path / "ci.json"
        save_intervals(wald_intervals(Q, bundle), path)
        doc = json.loads(path.read_text())
        assert doc["level"] == 0.95 and len(doc["lower"]) == 4


class TestSensitivity:
    def test_matches_finite_differences(self, instance):
        Q, _, pairs = instance

        def p(v):
            return tpm(pairs.with_values(Q, v), 2.5)[1, 3]

        fd = central_gradient(p, pairs.values(Q))
        assert relative_error(tpm_sensitivity(Q, pairs, 1, 3, 2.5), fd) < 1e-6

    def test_zero_horizon(self, instance):
        Q, _, pairs = instance
        np.testing.assert_array_equal(tpm_sensitivity(Q, pairs, 0, 3, 0.0), 0.0)

    def test_row_sums_vanish(self, instance):
        Q, _, pairs = instance
        total = sum(tpm_sensitivity(Q, pairs, 1, j, 3.0) for j in range(4))
        np.testing.assert_allclose(total, 0.0, atol=1e-12)

    def test_default_row_rejected(self, instance):
        Q, _, pairs = instance
        with pytest.raises(DataError):
            tpm_sensitivity(Q, pairs, 3, 3, 1.0)


class TestPdCurve:
    def test_zero_horizon(self, fitted):
        Q, _, bundle = fitted
        (pt,) = pd_curve(Q, bundle, 0, [0.0])
        assert pt.pd == 0.0 and pt.lower == pt.upper == 0.0 and pt.degenerate

    def test_band_definition(self, fitted):
        Q, _, bundle = fitted
        pts = pd_curve(Q, bundle, 1, [1.0, 5.0], level=0.9)
        for pt in pts:
            sd = math.sqrt(delta_variance(Q, bundle, 1, 3, pt.t))
            assert pt.upper - pt.pd == pytest.approx(z_value(0.9) * sd, rel=1e-12)
            assert pt.pd == pytest.approx(tpm(Q, pt.t)[1, 3], rel=1e-14)
            assert not pt.degenerate

    def test_monotone_in_time(self, fitted):
        Q, _, bundle = fitted
        pds = [p.pd for p in pd_curve(Q, bundle, 0, np.linspace(0, 30, 31))]
        assert np.all(np.diff(pds) >= 0)

    def test_band_scales_with_sample_size(self, rng):
        Q = random_generator(rng, 4, density=1.0, low=0.05, high=0.3)
        pairs = allowed_pairs(Q)
        widths = []
        for n in (1, 4, 16):
            panel = exact_panel(Q, dts=(1.0,), count=1000.0 * n)
            (pt,) = pd_curve(Q, hessian(Q, panel, pairs), 1, [5.0])
            widths.append(pt.upper - pt.lower)
        ratios = np.array(widths[:-1]) / np.array(widths[1:])
        assert np.all((ratios > 1.0) & (ratios < 4.0))
        np.testing.assert_allclose(ratios, 2.0, rtol=1e-10)

    def test_relabeling_equivariance(self, fitted):
        # swapping the two middle ratings permutes every output
        Q, panel, bundle = fitted
        perm = np.array([0, 2, 1, 3])
        Qp = GeneratorMatrix(Q.scale, Q.q[np.ix_(perm, perm)])
        obs = tuple(PanelObservation(o.dt, o.counts[np.ix_(perm, perm)])
                    for o in panel.observations)
        bp = hessian(Qp, DiscretePanel(Q.scale, obs), allowed_pairs(Qp))
        a = pd_curve(Q, bundle, 1, [1.0, 4.0])
        b = pd_curve(Qp, bp, 2, [1.0, 4.0])
        for x, y in zip(a, b):
            assert x.pd == pytest.approx(y.pd, rel=1e-10)
            assert x.upper == pytest.approx(y.upper, rel=1e-7)
        ia, ib = wald_intervals(Q, bundle), wald_intervals(Qp, bp)
        np.testing.assert_allclose(ib.upper, ia.upper[np.ix_(perm, perm)], rtol=1e-7, atol=1e-12)

    def test_grid_validation(self, fitted):
        Q, _, bundle = fitted
        with pytest.raises(DataError):
            pd_curve(Q, bundle, 0, [2.0, 1.0])
        with pytest.raises(DataError):
            pd_curve(Q, bundle, 3, [1.0])

    def test_csv(self, fitted, tmp_path):
        Q, _, bundle = fitted
        path = tmp_path / "pd.csv"
        write_pd_curve(pd_curve(Q, bundle, 0, [0.0, 1.0]), path)
        lines = path.read_text().splitlines()
        assert lines[0] == "t,pd,lower,upper,degenerate_flag"
        assert lines[1].endswith(",1") and lines[2].endswith(",0")
