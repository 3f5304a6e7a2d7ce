import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from factories import multinomial_panel, random_generator, scale_of
from ratingmigration.calibrated import reference_generator
from ratingmigration.core import (CENSORED, DiscretePanel, EntityTrack, EventHistory,
                                  PanelObservation, RatingScale, Terminal)
from ratingmigration.ctmc import (AllowedPairs, GeneratorMatrix, allowed_pairs,
                                  complete_data_log_likelihood, complete_data_statistics,
                                  load_generator, mle_continuous, panel_log_likelihood,
                                  save_generator, tpm)
from ratingmigration.errors import DataError, ImpossibleTransitionError
from ratingmigration.simulate import SimConfig, simulate_ctmc


def absorbing_two_state(a=0.3):
    return GeneratorMatrix.from_offdiagonal(scale_of(2), [[0, a], [0, 0]])


class TestGeneratorMatrix:
    @pytest.mark.parametrize("q", [
        [[-0.1, 0.2], [0, 0]],             # rows do not sum to zero
        [[0.1, -0.1], [0, 0]],             # positive diagonal, negative rate
        [[-0.1, 0.1], [0.1, -0.1]],        # default row not absorbing
        [[-np.inf, np.inf], [0, 0]],
    ])
    def test_invalid(self, q):
        with pytest.raises(DataError):
            GeneratorMatrix(scale_of(2), np.array(q))

    def test_from_offdiagonal_repairs_diagonal(self, rng):
        Q = random_generator(rng, 5)
        np.testing.assert_allclose(Q.q.sum(axis=1), 0.0, atol=1e-15)
        assert np.all(Q.q[4] == 0)
        np.testing.assert_allclose(Q.intensities, -np.diag(Q.q))

    def test_json_round_trip(self, rng, tmp_path):
        Q = random_generator(rng, 4)
        path = tmp_path / "q.json"
        save_generator(Q, path)
        doc = json.loads(path.read_text())
        assert doc["labels"] == list(Q.scale.labels)
        assert load_generator(path, Q.scale) == Q

    def test_json_label_mismatch(self, rng, tmp_path):
        Q = random_generator(rng, 4)
        path = tmp_path / "q.json"
        save_generator(Q, path)
        with pytest.raises(DataError):
            load_generator(path, RatingScale(("W", "X", "Y", "Z")))


class TestTpm:
    def test_zero_horizon(self, rng):
        np.testing.assert_array_equal(tpm(random_generator(rng, 4), 0.0), np.eye(4))

    def test_scalar_exponential(self):
        assert tpm(absorbing_two_state(), 1.0)[0, 1] == pytest.approx(1 - math.exp(-0.3), abs=1e-12)
        assert tpm(absorbing_two_state(), 1.0)[0, 1] == pytest.approx(0.259182, abs=5e-7)

    def test_reference_generator_is_stochastic(self):
        P = tpm(reference_generator(), 1.0)
        assert np.all((P >= 0) & (P <= 1))
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-10)
        np.testing.assert_array_equal(P[-1], np.eye(9)[-1])

    def test_negative_horizon(self, rng):
        with pytest.raises(DataError):
            tpm(random_generator(rng, 3), -1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 5.0), st.floats(0.0, 5.0))
    def test_chapman_kolmogorov(self, seed, s, t):
        Q = random_generator(np.random.default_rng(seed), 5)
        np.testing.assert_allclose(tpm(Q, s) @ tpm(Q, t), tpm(Q, s + t), atol=1e-10)


class TestPanelLikelihood:
    def test_single_count(self):
        N = np.array([[0.0, 1.0], [0.0, 0.0]])
        panel = DiscretePanel(scale_of(2), (PanelObservation(1.0, N),))
        ll = panel_log_likelihood(absorbing_two_state(), panel)
        assert ll == pytest.approx(math.log(1 - math.exp(-0.3)), abs=1e-12)
        assert ll == pytest.approx(-1.350226, abs=5e-7)

    def test_zero_counts(self, rng):
        Q = random_generator(rng, 4)
        panel = DiscretePanel(Q.scale, (PanelObservation(1.0, np.zeros((4, 4))),))
        assert panel_log_likelihood(Q, panel) == 0.0

    def test_zero_count_on_zero_probability_cell(self):
        # state 1 cannot reach state 0; a zero count there contributes nothing
        Q = GeneratorMatrix.from_offdiagonal(scale_of(3), [[0, 0.2, 0.1], [0, 0, 0.3], [0, 0, 0]])
        N = np.array([[5.0, 1, 1], [0, 3, 1], [0, 0, 0]])
        panel = DiscretePanel(Q.scale, (PanelObservation(1.0, N),))
        P = tpm(Q, 1.0)
        expected = sum(N[i, j] * math.log(P[i, j]) for i in range(3) for j in range(3) if N[i, j])
        assert panel_log_likelihood(Q, panel) == pytest.approx(expected, rel=1e-13)

    def test_impossible_transition(self):
        Q = GeneratorMatrix.from_offdiagonal(scale_of(3), [[0, 0.2, 0.1], [0, 0, 0.3], [0, 0, 0]])
        N = np.array([[5.0, 1, 1], [2, 3, 1], [0, 0, 0]])
        panel = DiscretePanel(Q.scale, (PanelObservation(1.0, N),))
        with pytest.raises(ImpossibleTransitionError) as info:
            panel_log_likelihood(Q, panel)
        assert info.value.cells == [("B", "A")]

    def test_linear_in_counts(self, rng):
        Q = random_generator(rng, 4)
        panel = multinomial_panel(rng, Q)
        ll = panel_log_likelihood(Q, panel)
        assert panel_log_likelihood(Q, panel.scaled(2.0)) == pytest.approx(2 * ll, rel=1e-13)

    def test_order_invariance(self, rng):
        Q = random_generator(rng, 4)
        panel = multinomial_panel(rng, Q, dts=(1.0, 0.5, 2.0, 1.0))
        rev = DiscretePanel(panel.scale, panel.observations[::-1])
        assert panel_log_likelihood(Q, rev) == pytest.approx(panel_log_likelihood(Q, panel),
                                                             rel=1e-14)

    def test_scale_mismatch(self, rng):
        Q = random_generator(rng, 3)
        panel = DiscretePanel(RatingScale(("X", "Y", "Z")), (PanelObservation(1.0, np.eye(3)),))
        with pytest.raises(DataError):
            panel_log_likelihood(Q, panel)


class TestAllowedPairs:
    def test_single_entry(self):
        Q = GeneratorMatrix.from_offdiagonal(scale_of(3), [[0, 0.2, 0], [0, 0, 0], [0, 0, 0]])
        assert allowed_pairs(Q).pairs == ((0, 1),)

    def test_row_major_and_threshold(self):
        Q = GeneratorMatrix.from_offdiagonal(
            scale_of(3), [[0, 1e-9, 0.3], [0.2, 0, 0.1], [0, 0, 0]])
        assert allowed_pairs(Q).pairs == ((0, 2), (1, 0), (1, 2))

    def test_reference_excludes_structural_zeros(self):
        Q = reference_generator()
        pairs = set(allowed_pairs(Q).pairs)
        off = Q.offdiagonal()
        zeros = {(i, j) for i in range(8) for j in range(9) if i != j and off[i, j] == 0}
        assert zeros and not (zeros & pairs)
        assert len(pairs) + len(zeros) == 8 * 8

    def test_threshold_too_large(self, rng):
        with pytest.raises(DataError):
            allowed_pairs(random_generator(rng, 3), threshold=10.0)

    def test_diagonal_rejected(self):
        with pytest.raises(DataError):
            AllowedPairs(((1, 1),))


class TestContinuousMle:
    def test_single_jump(self):
        s = scale_of(3)
        tr = EntityTrack("a", 0.0, 0, ((2.0, 1),), Terminal(CENSORED, 2.5), h=3)
        Q = mle_continuous(EventHistory(s, (tr,)))
        assert Q.q[0, 1] == pytest.approx(0.5)
        assert Q.q[1, 0] == 0.0

    def test_no_transitions(self):
        s = scale_of(3)
        tr = EntityTrack("a", 0.0, 0, (), Terminal(CENSORED, 2.0), h=3)
        with pytest.raises(DataError):
            mle_continuous(EventHistory(s, (tr,)))

    def test_first_transition_only(self):
        s = scale_of(3)
        tr = EntityTrack("a", 0.0, 0, ((1.0, 1), (3.0, 0), (4.0, 1)), Terminal(CENSORED, 6.0), h=3)
        K, S = complete_data_statistics(EventHistory(s, (tr,)), first_transition_only=True)
        assert K[0, 1] == 1 and K.sum() == 1
        np.testing.assert_allclose(S, [1.0, 0.0, 0.0])

    def test_loglik_is_maximized_at_mle(self, rng):
        Q = random_generator(rng, 4)
        hist = simulate_ctmc(Q, SimConfig(200, 5.0, (), seed=3))
        Qhat = mle_continuous(hist)
        best = complete_data_log_likelihood(Qhat, hist)
        for _ in range(5):
            pert = Qhat.offdiagonal() * np.exp(0.05 * rng.normal(size=(4, 4)))
            assert complete_data_log_likelihood(
                GeneratorMatrix.from_offdiagonal(Q.scale, pert), hist) < best

    def test_recovers_truth_within_sampling_error(self, rng):
        Q = random_generator(rng, 4, density=1.0, low=0.05, high=0.3)
        # about 10^4 firm-years
        hist = simulate_ctmc(Q, SimConfig(1000, 4.0, (), seed=11))
        Qhat = mle_continuous(hist)
        K, S = complete_data_statistics(hist)
        off = Q.offdiagonal()[:3]
        se = np.sqrt(off / S[:3, None])
        z = (Qhat.offdiagonal()[:3] - off) / np.where(se > 0, se, 1.0)
        assert np.max(np.abs(z)) < 3.5

    def test_error_halves_when_data_quadruples(self):
        Q = reference_generator()
        pairs = allowed_pairs(Q)

        def rmse(n, seeds):
            errs = []
            for s in seeds:
                Qhat = mle_continuous(simulate_ctmc(Q, SimConfig(n, 5.0, (), seed=s)))
                errs.append(np.mean((pairs.values(Qhat) - pairs.values(Q)) ** 2))
            return math.sqrt(np.mean(errs))

        ratio = rmse(500, range(4)) / rmse(2000, range(10, 14))
        assert 1.0 < ratio < 4.0
