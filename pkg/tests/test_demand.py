import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from core.demand import (DemandChain, DemandLevelSet, DemandTrace, SlidingWindowEstimator, feature_state,
                         indicator, observe_and_estimate, quantize, quantize_many, stationary_distribution,
                         synthesize_quasi_static, synthesize_trace)
from utils.errors import InputError


class TestLevels:
    def test_uniform_spacing(self, levels5):
        assert levels5.values == (0.0, 0.25, 0.5, 0.75, 1.0)

    def test_cap_multiple(self):
        assert DemandLevelSet.uniform(3, cap_multiple=2.0).values == (0.0, 1.0, 2.0)

    @pytest.mark.parametrize('values', [(0.5,), (0.0, 0.0, 1.0), (-0.1, 0.5), (0.5, 0.2)])
    def test_invalid_level_sets(self, values):
        with pytest.raises(InputError):
            DemandLevelSet(values)


class TestQuantize:
    @pytest.mark.parametrize('raw, expected', [(0.0, 0), (1.0, 4), (0.30, 2), (0.25, 1), (0.26, 2), (3.0, 4)])
    def test_round_up(self, levels5, raw, expected):
        assert quantize(raw, levels5) == expected

    def test_negative_rejected(self, levels5):
        with pytest.raises(InputError):
            quantize(-0.01, levels5)

    def test_vectorised_matches_scalar(self, levels5):
        raw = np.array([[0.0, 0.1, 0.5], [0.74, 0.76, 2.0]])
        expected = [[quantize(x, levels5) for x in row] for row in raw]
        assert_array_equal(quantize_many(raw, levels5), expected)


class TestChain:
    def test_rows_must_sum_to_one(self, levels2):
        with pytest.raises(InputError):
            DemandChain(np.array([[0.5, 0.4], [0.5, 0.5]]), levels2)

    def test_entries_in_unit_interval(self, levels2):
        with pytest.raises(InputError):
            DemandChain(np.array([[1.5, -0.5], [0.5, 0.5]]), levels2)

    def test_matrix_is_read_only(self, levels2):
        chain = DemandChain.uniform(levels2)
        with pytest.raises(ValueError):
            chain.matrix[0, 0] = 1.0

    def test_from_dict(self, levels2):
        chain = DemandChain.from_dict({'levels': [0.0, 1.0], 'matrix': [[0.9, 0.1], [0.5, 0.5]]})
        assert_allclose(chain.row(0), [0.9, 0.1])
        with pytest.raises(InputError):
            DemandChain.from_dict({'levels': [0.0, 1.0]})


class TestSlidingWindowEstimator:
    def _estimator(self, levels, history, window=None):
        estimator = SlidingWindowEstimator(levels, window or max(len(history), 2))
        for level in history:
            estimator.observe(level)
        return estimator

    def test_self_transitions_only(self, levels5):
        chain = self._estimator(levels5, [0, 0, 0, 0]).estimate()
        assert_allclose(chain.row(0), [1, 0, 0, 0, 0])

    def test_alternation(self):
        levels = DemandLevelSet.uniform(3)
        chain = self._estimator(levels, [0, 1, 0, 1, 0]).estimate()
        assert_allclose(chain.row(0), [0, 1, 0])
        assert_allclose(chain.row(1), [1, 0, 0])

    def test_unvisited_rows_are_uniform(self):
        levels = DemandLevelSet.uniform(3)
        chain = self._estimator(levels, [2, 2]).estimate()
        assert_allclose(chain.row(0), [1 / 3] * 3)
        assert_allclose(chain.row(1), [1 / 3] * 3)
        assert_allclose(chain.row(2), [0, 0, 1])

    def test_eviction_beyond_window(self):
        levels = DemandLevelSet.uniform(3)
        estimator = self._estimator(levels, [0, 1, 2, 2], window=3)
        assert list(estimator.buffer) == [1, 2, 2]
        assert_array_equal(estimator.state_counts, [0, 1, 1])
        assert estimator.transition_counts[0].sum() == 0
        assert estimator.is_consistent()

    def test_observe_and_estimate(self, levels2):
        estimator = SlidingWindowEstimator(levels2, 4)
        observe_and_estimate(estimator, 0)
        chain = observe_and_estimate(estimator, 1)
        assert_allclose(chain.row(0), [0, 1])
        assert len(estimator) == 2

    def test_out_of_range_level(self, levels2):
        with pytest.raises(InputError):
            SlidingWindowEstimator(levels2, 4).observe(2)

    def test_window_too_small(self, levels2):
        with pytest.raises(InputError):
            SlidingWindowEstimator(levels2, 1)


class TestStationary:
    def test_identity_keeps_start(self):
        levels = DemandLevelSet.uniform(3)
        result = stationary_distribution(DemandChain.identity(levels), [0, 1, 0])
        assert result.converged
        assert_allclose(result.distribution, [0, 1, 0])

    def test_symmetric(self, levels2):
        chain = DemandChain(np.full((2, 2), 0.5), levels2)
        assert_allclose(stationary_distribution(chain, [1, 0]).distribution, [0.5, 0.5])

    def test_two_state_closed_form(self, levels2):
        chain = DemandChain(np.array([[0.9, 0.1], [0.5, 0.5]]), levels2)
        result = stationary_distribution(chain, [0, 1])
        assert result.converged
        assert_allclose(result.distribution, [5 / 6, 1 / 6], atol=1e-8)
        assert np.max(np.abs(result.distribution @ chain.matrix - result.distribution)) <= 1e-9

    def test_periodic_chain_converges(self, levels2):
        chain = DemandChain(np.array([[0.0, 1.0], [1.0, 0.0]]), levels2)
        result = stationary_distribution(chain, [1, 0], max_iter=50)
        assert result.converged
        assert result.iterations == 1
        assert_allclose(result.distribution, [0.5, 0.5])

    def test_alternating_window_converges(self, levels5):
        estimator = SlidingWindowEstimator(levels5, 12)
        for level in [0, 4] * 6:
            estimator.observe(level)
        result = stationary_distribution(estimator.estimate(), indicator(4, 5))
        assert result.converged
        assert_allclose(result.distribution, [0.5, 0, 0, 0, 0.5], atol=1e-9)

    def test_unconverged_run_is_flagged(self):
        levels = DemandLevelSet.uniform(3)
        cycle = DemandChain(np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]), levels)
        result = stationary_distribution(cycle, [1, 0, 0], max_iter=3)
        assert not result.converged
        assert result.iterations == 3

    def test_bad_start(self, levels2):
        with pytest.raises(InputError):
            stationary_distribution(DemandChain.uniform(levels2), [0.7, 0.7])


class TestFeatureState:
    def test_point_masses(self, levels5):
        assert feature_state(indicator(0, 5), levels5, 3).as_pair() == (0, 3)
        assert feature_state(indicator(4, 5), levels5, 1).expected_level_index == 4

    def test_rounds_expectation_up(self):
        levels = DemandLevelSet((0.0, 0.25, 0.5))
        assert feature_state([0.5, 0.5, 0.0], levels, 0).expected_level_index == 1


class TestSynthesis:
    def test_absorbing_chain(self, levels5):
        trace = synthesize_trace([DemandChain.identity(levels5)], [], 10, seed=1, start_levels=[2])
        assert_allclose(trace.demands, np.full((1, 10), 0.5))

    def test_alternation(self, levels2):
        flip = DemandChain(np.array([[0.0, 1.0], [1.0, 0.0]]), levels2)
        trace = synthesize_trace([flip], [], 4, seed=9, start_levels=[0])
        assert_allclose(trace.demands[0], [0, 1, 0, 1])

    def test_seed_reproducible(self, levels5, rng):
        chains = [DemandChain(rng.dirichlet(np.ones(5), size=5), levels5) for _ in range(3)]
        first = synthesize_trace(chains, [], 200, seed=42)
        second = synthesize_trace(chains, [], 200, seed=42)
        assert np.array_equal(first.demands, second.demands)

    def test_regime_switch(self, levels2):
        flip = DemandChain(np.array([[0.0, 1.0], [1.0, 0.0]]), levels2)
        hold = DemandChain.identity(levels2)
        trace = synthesize_trace([flip], [(4, [hold])], 8, seed=0, start_levels=[0])
        assert_allclose(trace.demands[0], [0, 1, 0, 1, 1, 1, 1, 1])

    def test_empty_chain_list(self):
        with pytest.raises(InputError):
            synthesize_trace([], [], 10, seed=0)

    def test_schedule_must_increase(self, levels2):
        hold = DemandChain.identity(levels2)
        with pytest.raises(InputError):
            synthesize_trace([hold], [(5, [hold]), (3, [hold])], 10, seed=0)

    def test_quasi_static_respects_max_level(self, levels5):
        trace, chains, schedule = synthesize_quasi_static(levels5, 6, 300, seed=5, regime_period=100, max_level=2)
        assert trace.demands.shape == (6, 300)
        assert trace.demands.max() <= 0.5
        assert [slot for slot, _ in schedule] == [100, 200]
        assert len(chains) == 6


class TestTrace:
    def test_negative_rejected(self):
        with pytest.raises(InputError):
            DemandTrace(np.array([[0.1, -0.2]]))

    def test_scaled(self):
        trace = DemandTrace(np.array([[0.1, 0.2]]))
        assert_allclose(trace.scaled(2.5).demands, [[0.25, 0.5]])

    def test_quantized(self, levels5):
        trace = DemandTrace(np.array([[0.0, 0.3], [1.4, 0.75]]))
        assert_array_equal(trace.quantized(levels5), [[0, 2], [4, 3]])
