import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import random_chain, small_spec
from core.cluster import MigrationPlan, SystemState
from core.controller import SlotContext
from core.demand import DemandChain, DemandLevelSet, FeatureState, SlidingWindowEstimator, synthesize_quasi_static
from core.exact_mdp import ExactModel, extract_policy, value_iteration
from core.madvm import (Broadcast, ControlBid, MadVMController, PerVMProblem, PerVMUtility, WeightVector,
                        approximate_joint_utility, build_key_states, control_utility, madvm_step,
                        per_vm_value_iteration, select_migrations)
from utils.errors import InputError


def lazy_uniform(levels: DemandLevelSet, stay: float = 0.3) -> DemandChain:
    size = levels.lambda_levels
    return DemandChain(stay * np.eye(size) + (1 - stay) * np.full((size, size), 1.0 / size), levels)


def filled_estimators(levels, history, window=8):
    """One estimator per VM fed with the rows of `history` (vm x slots of level indices)"""
    estimators = []
    for row in history:
        estimator = SlidingWindowEstimator(levels, window)
        for level in row:
            estimator.observe(int(level))
        estimators.append(estimator)
    return estimators


class TestKeyStates:
    def test_count_single_pm(self, levels5):
        spec = small_spec(1, 1)
        key_states = build_key_states(0, [FeatureState(2, 0)], levels5, spec)
        assert len(key_states) == 5
        assert len(key_states.states) == 5

    def test_others_frozen(self, levels2):
        spec = small_spec(2, 3)
        features = [FeatureState(0, 1), FeatureState(1, 2)]
        key_states = build_key_states(0, features, levels2, spec)
        assert len(key_states) == 6
        for state in key_states.states:
            assert (state.demand_levels[1], state.placement[1]) == (1, 2)
        assert key_states.reference == (0, 1)

    def test_context_follows_other_features(self, levels2):
        spec = small_spec(2, 3)
        first = build_key_states(0, [FeatureState(0, 1), FeatureState(1, 2)], levels2, spec)
        second = build_key_states(0, [FeatureState(0, 1), FeatureState(0, 0)], levels2, spec)
        assert all(a != b for a, b in zip(first.states, second.states))

    def test_rejects_unknown_pm(self, levels2):
        with pytest.raises(InputError):
            build_key_states(0, [FeatureState(0, 4)], levels2, small_spec(1, 2))


class TestPerVMValueIteration:
    def test_converges_within_fifteen_sweeps(self, levels5):
        spec = small_spec(1, 1)
        key_states = build_key_states(0, [FeatureState(0, 0)], levels5, spec)
        utility = per_vm_value_iteration(0, key_states, lazy_uniform(levels5), spec, levels5, tol=1e-3)
        assert utility.converged
        assert utility.iterations <= 15
        assert np.all(np.diff(utility.table[:, 0]) >= 0)

    def test_beta_is_stationary_cost(self, levels2):
        spec = small_spec(1, 1)
        chain = DemandChain(np.array([[0.9, 0.1], [0.5, 0.5]]), levels2)
        key_states = build_key_states(0, [FeatureState(0, 0)], levels2, spec)
        utility = per_vm_value_iteration(0, key_states, chain, spec, levels2, tol=1e-10)
        assert utility.beta == pytest.approx(5 / 6 * 250 + 1 / 6 * 500, rel=1e-6)

    def test_absorbing_reference(self, levels5):
        spec = small_spec(1, 1)
        key_states = build_key_states(0, [FeatureState(2, 0)], levels5, spec)
        utility = per_vm_value_iteration(0, key_states, DemandChain.identity(levels5), spec, levels5,
                                         max_iter=50)
        assert utility.beta == pytest.approx(375.0)
        assert utility.value(2, 0) == 0.0

    def test_alternating_window_converges(self, levels5):
        spec = small_spec(2, 2)
        estimator = SlidingWindowEstimator(levels5, 12)
        for level in [0, 4] * 6:
            estimator.observe(level)
        chain = estimator.estimate()
        key_states = build_key_states(0, [FeatureState(2, 0), FeatureState(2, 1)], levels5, spec)
        coarse = per_vm_value_iteration(0, key_states, chain, spec, levels5, tol=1e-3)
        fine = per_vm_value_iteration(0, key_states, chain, spec, levels5, tol=1e-10, max_iter=5000)
        assert coarse.converged and fine.converged
        assert coarse.iterations < 1000
        assert_allclose(coarse.table, fine.table, atol=0.05)

        state = SystemState((4, 2), (0, 1))
        first = control_utility(0, state, coarse, chain, spec, levels5)
        second = control_utility(0, state, fine, chain, spec, levels5)
        assert first.control_utility == pytest.approx(second.control_utility, abs=0.05)
        assert first.gain == pytest.approx(second.gain, abs=0.05)

    def test_evaluation_counter(self, levels2, rng):
        spec = small_spec(2, 3)
        features = [FeatureState(0, 0), FeatureState(1, 2)]
        key_states = build_key_states(1, features, levels2, spec)
        utility = per_vm_value_iteration(1, key_states, random_chain(levels2, rng), spec, levels2)
        assert utility.evaluations == utility.iterations * (2 * 3) * 3

    def test_history_decays(self, levels5):
        spec = small_spec(1, 1)
        key_states = build_key_states(0, [FeatureState(0, 0)], levels5, spec)
        utility = per_vm_value_iteration(0, key_states, lazy_uniform(levels5), spec, levels5,
                                         tol=1e-6, record_history=True)
        history = np.array(utility.history)
        assert len(history) == utility.iterations
        assert history[5] < history[1]

    def test_owner_mismatch(self, levels2):
        spec = small_spec(2, 2)
        key_states = build_key_states(0, [FeatureState(0, 0), FeatureState(0, 1)], levels2, spec)
        with pytest.raises(InputError):
            per_vm_value_iteration(1, key_states, DemandChain.uniform(levels2), spec, levels2)

    def test_bad_initial_shape(self, levels2):
        spec = small_spec(1, 2)
        key_states = build_key_states(0, [FeatureState(0, 0)], levels2, spec)
        problem = PerVMProblem(key_states, DemandChain.uniform(levels2), levels2, spec)
        with pytest.raises(InputError):
            problem.solve(initial=np.zeros((3, 3)))


class TestOracleEquivalence:
    @pytest.mark.parametrize('num_pms', [1, 2])
    @pytest.mark.parametrize('seed', range(5))
    def test_single_vm_matches_exact(self, num_pms, seed):
        rng = np.random.default_rng(seed)
        levels = DemandLevelSet.uniform(int(rng.integers(2, 6)))
        chain = random_chain(levels, rng)
        spec = small_spec(1, num_pms)
        feature = FeatureState(int(rng.integers(0, levels.lambda_levels)), 0)

        key_states = build_key_states(0, [feature], levels, spec)
        approx = per_vm_value_iteration(0, key_states, chain, spec, levels, tol=1e-10, max_iter=10_000)
        model = ExactModel([chain], spec, levels)
        exact = value_iteration([chain], spec, levels, reference=SystemState((feature.expected_level_index,),
                                                                             (feature.location,)),
                                tol=1e-10, model=model)
        assert_allclose(approx.table.ravel(), exact.values, atol=1e-6)
        assert approx.beta == pytest.approx(exact.beta, abs=1e-6)

        q = model.action_values(exact.values.reshape(levels.lambda_levels, num_pms))
        policy = extract_policy(exact, [chain], spec, levels, model=model)
        for level in range(levels.lambda_levels):
            for pm in range(num_pms):
                state = SystemState((level,), (pm,))
                bid = control_utility(0, state, approx, chain, spec, levels)
                row = q[level, pm]
                assert row[bid.best_target] <= row.min() + 1e-5
                ordered = np.sort(row)
                if len(ordered) == 1 or ordered[1] - ordered[0] > 1e-5:
                    assert bid.best_target == policy.actions[level * num_pms + pm]


class TestApproximateJointUtility:
    def test_sum_of_entries(self):
        tables = tuple(np.arange(4, dtype=float).reshape(2, 2) + 10 * vm for vm in range(3))
        weights = WeightVector(tables)
        state = SystemState((0, 1, 0), (0, 0, 1))
        assert approximate_joint_utility(weights, state) == tables[0][0, 0] + tables[1][1, 0] + tables[2][0, 1]

    def test_zero_tables(self):
        weights = WeightVector((np.zeros((2, 2)), np.zeros((2, 2))))
        assert approximate_joint_utility(weights, SystemState((1, 0), (1, 1))) == 0.0

    def test_single_vm(self):
        weights = WeightVector((np.array([[1.0, 2.0], [3.0, 4.0]]),))
        assert approximate_joint_utility(weights, SystemState((1,), (0,))) == 3.0

    def test_vector_roundtrip_layout(self):
        weights = WeightVector.from_vector(np.arange(12.0), num_vms=2, num_levels=2, num_pms=3)
        assert len(weights) == 12
        assert weights.tables[1][0, 0] == 6.0

    def test_wrong_size(self):
        with pytest.raises(InputError):
            approximate_joint_utility(WeightVector((np.zeros((2, 2)),)), SystemState((0, 0), (0, 0)))


class TestControlUtility:
    def test_single_pm_stays(self, levels2):
        spec = small_spec(1, 1)
        table = PerVMUtility(0, np.array([[0.0], [5.0]]), 0.0, (0, 0))
        bid = control_utility(0, SystemState((1,), (0,)), table, DemandChain.uniform(levels2), spec, levels2)
        assert (bid.best_target, bid.gain) == (0, 0.0)

    def test_symmetric_pms_tie_keeps_location(self, levels5):
        spec = small_spec(1, 2)
        chain = lazy_uniform(levels5)
        key_states = build_key_states(0, [FeatureState(1, 0)], levels5, spec)
        utility = per_vm_value_iteration(0, key_states, chain, spec, levels5, tol=1e-9)
        state = SystemState((3,), (1,))
        values = utility.table.T @ chain.row(3)
        assert values[0] == values[1]
        bid = control_utility(0, state, utility, chain, spec, levels5)
        assert bid.best_target == 1
        assert bid.gain == 0.0

    def test_strict_improvement_moves(self, levels2):
        spec = small_spec(1, 2)
        table = PerVMUtility(0, np.array([[0.0, 100.0], [20.0, 140.0]]), 0.0, (0, 0))
        chain = DemandChain(np.array([[0.5, 0.5], [0.5, 0.5]]), levels2)
        bid = control_utility(0, SystemState((0,), (1,)), table, chain, spec, levels2)
        assert bid.best_target == 0
        assert bid.gain == pytest.approx(120.0 - 10.0)


class TestSelectMigrations:
    def _bid(self, vm, gain, target):
        return ControlBid(vm, 100.0 - gain, target, gain, 100.0)

    def test_all_zero_gain(self):
        bids = [self._bid(vm, 0.0, 0) for vm in range(3)]
        assert select_migrations(bids, (0, 1, 1), t_m=2).targets == (0, 1, 1)

    def test_top_gains_win(self):
        bids = [self._bid(0, 5.0, 2), self._bid(1, 9.0, 2), self._bid(2, 7.0, 0)]
        plan = select_migrations(bids, (0, 1, 1), t_m=2)
        assert plan.moved_vms((0, 1, 1)) == (1, 2)

    def test_equal_gains_lowest_id(self):
        bids = [self._bid(0, 4.0, 1), self._bid(1, 4.0, 0)]
        plan = select_migrations(bids, (0, 1), t_m=1)
        assert plan.targets == (1, 1)

    def test_zero_cap(self):
        bids = [self._bid(0, 4.0, 1)]
        assert select_migrations(bids, (0,), t_m=0).migrations((0,)) == 0

    @pytest.mark.parametrize('ranking', ['ascending', 'maximum'])
    def test_alternative_rankings_respect_cap(self, ranking):
        bids = [self._bid(vm, float(vm + 1), 3) for vm in range(3)]
        plan = select_migrations(bids, (0, 1, 2), t_m=1, ranking=ranking)
        assert plan.migrations((0, 1, 2)) == 1
        assert plan.moved_vms((0, 1, 2)) == ((2,) if ranking == 'ascending' else (0,))

    def test_unknown_ranking(self):
        with pytest.raises(InputError):
            select_migrations([], (0,), 1, ranking='random')


class TestMadVMController:
    def test_consolidates_then_stops_moving(self, levels5):
        spec = small_spec(2, 2, t_m=1)
        controller = MadVMController(spec, levels5)
        placement = (0, 1)
        history = [[], []]
        moves = []
        for slot in range(50):
            for row in history:
                row.append(1)
            estimators = filled_estimators(levels5, history)
            state = SystemState((1, 1), placement)
            plan = controller.decide(slot, state, estimators).plan
            moves.append(plan.migrations(placement))
            placement = plan.targets
        assert placement[0] == placement[1]
        assert sum(moves) == 1
        assert sum(moves[10:]) == 0

    def test_zero_cap_never_moves(self, levels5, rng):
        spec = small_spec(3, 3, t_m=0)
        history = rng.integers(0, 5, size=(3, 10))
        state = SystemState(tuple(int(x) for x in history[:, -1]), (0, 1, 2))
        plan = madvm_step(state, filled_estimators(levels5, history), spec, levels5)
        assert plan.migrations(state.placement) == 0

    def test_distributed_matches_centralized(self, levels5):
        spec = small_spec(4, 3, t_m=1)
        trace, _, _ = synthesize_quasi_static(levels5, 4, 20, seed=21, regime_period=10)
        quantized = trace.quantized(levels5)
        centralized = MadVMController(spec, levels5, mode='centralized')
        distributed = MadVMController(spec, levels5, mode='distributed')
        placement = (0, 0, 1, 2)
        for slot in range(20):
            estimators = filled_estimators(levels5, quantized[:, :slot + 1], window=12)
            state = SystemState(tuple(int(x) for x in quantized[:, slot]), placement)
            first = centralized.decide(slot, state, estimators)
            second = distributed.decide(slot, state, estimators)
            assert first.plan == second.plan
            assert first.messages is None
            assert len(second.messages.broadcasts) == 4
            for message in second.messages.broadcasts:
                assert isinstance(message, Broadcast)
                assert set(message.to_dict()) == {'vm', 'feature_state', 'local_state'}
                assert message.local_state == (state.demand_levels[message.vm], placement[message.vm])
            placement = first.plan.targets

    def test_thread_pool_matches_serial(self, levels5, rng):
        spec = small_spec(4, 3, t_m=2)
        history = rng.integers(0, 5, size=(4, 12))
        state = SystemState(tuple(int(x) for x in history[:, -1]), (0, 0, 1, 2))
        serial = MadVMController(spec, levels5).decide(0, state, filled_estimators(levels5, history, 12))
        pooled_controller = MadVMController(spec, levels5, max_workers=4)
        try:
            pooled = pooled_controller.decide(0, state, filled_estimators(levels5, history, 12))
        finally:
            pooled_controller.close()
        assert serial.plan == pooled.plan
        for a, b in zip(serial.utilities, pooled.utilities):
            assert np.array_equal(a.table, b.table)

    def test_warm_start_reuses_tables(self, levels5, rng):
        spec = small_spec(3, 2, t_m=1)
        history = rng.integers(0, 5, size=(3, 12))
        state = SystemState(tuple(int(x) for x in history[:, -1]), (0, 0, 1))
        estimators = filled_estimators(levels5, history, 12)
        controller = MadVMController(spec, levels5, warm_start=True, tol=1e-6)
        cold = controller.decide(0, state, estimators)
        warm = controller.decide(1, state, estimators)
        assert sum(u.iterations for u in warm.utilities) < sum(u.iterations for u in cold.utilities)
        assert warm.plan == cold.plan

    def test_cap_respected_every_slot(self, levels5):
        spec = small_spec(6, 3, t_m=1)
        trace, _, _ = synthesize_quasi_static(levels5, 6, 15, seed=8, regime_period=5)
        quantized = trace.quantized(levels5)
        controller = MadVMController(spec, levels5)
        placement = (0,) * 6
        for slot in range(15):
            estimators = filled_estimators(levels5, quantized[:, :slot + 1], window=10)
            state = SystemState(tuple(int(x) for x in quantized[:, slot]), placement)
            plan = controller.plan(_context(slot, state, estimators, levels5, spec))
            assert plan.migrations(placement) <= 1
            placement = plan.targets
        assert controller.total_evaluations > 0

    def test_debug_dump(self, levels5, tmp_path):
        spec = small_spec(2, 2, t_m=1)
        dump = tmp_path / 'debug' / 'madvm.jsonl'
        controller = MadVMController(spec, levels5, debug_dump=str(dump))
        estimators = filled_estimators(levels5, [[1, 1], [1, 1]])
        controller.decide(0, SystemState((1, 1), (0, 1)), estimators)
        controller.decide(1, SystemState((1, 1), (1, 1)), estimators)
        lines = dump.read_text().splitlines()
        assert len(lines) == 2
        record = json.loads(lines[0])
        assert set(record) == {'slot', 'feature_states', 'bids', 'plan'}
        assert record['feature_states'] == [[1, 0], [1, 1]]

    def test_unknown_mode(self, levels5):
        with pytest.raises(InputError):
            MadVMController(small_spec(1, 1), levels5, mode='gossip')

    def test_estimator_count_checked(self, levels5):
        controller = MadVMController(small_spec(2, 2), levels5)
        with pytest.raises(InputError):
            controller.decide(0, SystemState((0, 0), (0, 1)), filled_estimators(levels5, [[0, 0]]))


def _context(slot, state, estimators, levels, spec):
    history = np.zeros((spec.num_vms, slot + 1))
    return SlotContext(slot=slot, state=state, estimators=estimators, history=history, levels=levels, spec=spec)


def test_stay_plan_type(levels5):
    plan = madvm_step(SystemState((0,), (0,)), filled_estimators(levels5, [[0, 0]]), small_spec(1, 1), levels5)
    assert plan == MigrationPlan((0,))
