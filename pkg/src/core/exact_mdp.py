"""
Exact average-cost MDP solver for the MadVM simulator
Relative value iteration over the full joint state space. Exponential in
the number of VMs, so it only runs on desk-size instances as an oracle.
"""

import itertools
from dataclasses import dataclass
from functools import reduce
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from core.cluster import ClusterSpec, MigrationPlan, SystemState, cost_from_loads, pm_loads, pm_occupancy
from core.controller import Controller, SlotContext
from core.demand import APERIODICITY, DemandChain, DemandLevelSet, sample_next
from mappers.state_mapper import StateMapper
from utils.errors import BudgetExceededError, ConstraintError, InputError

MAX_STATES = 100_000
MAX_STATE_ACTIONS = 5_000_000
MAX_EVALUATION_STATES = 4096


@dataclass(frozen=True, eq=False)
class UtilityVector:
    """Relative values over the joint index space plus the average cost"""
    values: np.ndarray
    reference_state: int
    beta: float
    converged: bool
    iterations: int
    span_history: Tuple[float, ...] = ()

    def to_dict(self) -> Dict:
        return {
            'beta': self.beta,
            'reference_state': self.reference_state,
            'converged': self.converged,
            'iterations': self.iterations,
            'values': self.values.tolist(),
        }


@dataclass(frozen=True, eq=False)
class Policy:
    """Target placement index for every joint state"""
    actions: np.ndarray
    mapper: StateMapper

    def plan_for(self, state: SystemState) -> MigrationPlan:
        return MigrationPlan(self.mapper.placement(int(self.actions[self.mapper.pack(state)])))

    def to_dict(self) -> Dict:
        return {'actions': [list(self.mapper.placement(int(a))) for a in self.actions]}


def _as_index(reference: Union[None, int, SystemState], mapper: StateMapper) -> int:
    if reference is None:
        return 0
    if isinstance(reference, SystemState):
        return mapper.pack(reference)
    if not 0 <= int(reference) < mapper.size:
        raise InputError(f"Reference state {reference} outside the joint state space")
    return int(reference)


def feasible_targets(placement: Sequence[int], num_pms: int, t_m: int) -> List[Tuple[int, ...]]:
    """Target vectors that move at most t_m VMs, lexicographically sorted"""
    targets = set()
    num_vms = len(placement)
    for moved in range(min(t_m, num_vms) + 1):
        for vms in itertools.combinations(range(num_vms), moved):
            choices = [[pm for pm in range(num_pms) if pm != placement[vm]] for vm in vms]
            for destination in itertools.product(*choices):
                target = list(placement)
                for vm, pm in zip(vms, destination):
                    target[vm] = pm
                targets.add(tuple(target))
    return sorted(targets)


def joint_transition_prob(source: SystemState, target: SystemState, plan: MigrationPlan,
                          chains: Sequence[DemandChain], spec: Optional[ClusterSpec] = None) -> float:
    """Product of per-VM level transitions; placement moves deterministically to the plan"""
    if spec is not None and plan.migrations(source.placement) > spec.t_m:
        raise ConstraintError(f"Plan migrates {plan.migrations(source.placement)} VMs, cap is {spec.t_m}")
    if target.placement != plan.targets:
        return 0.0
    probability = 1.0
    for chain, current, following in zip(chains, source.demand_levels, target.demand_levels):
        probability *= chain.matrix[current, following]
    return float(probability)


class ExactModel:
    """Precomputed cost table, action table and transition operator for one instance"""

    def __init__(self, chains: Sequence[DemandChain], spec: ClusterSpec, levels: DemandLevelSet,
                 max_states: int = MAX_STATES):
        if len(chains) != spec.num_vms:
            raise InputError(f"Need one chain per VM ({spec.num_vms}), got {len(chains)}")
        self.spec = spec
        self.levels = levels
        self.chains = list(chains)
        self.mapper = StateMapper(spec.num_vms, spec.num_pms, levels.lambda_levels)
        if self.mapper.size > max_states:
            raise BudgetExceededError(
                f"Joint state space has {self.mapper.size} states, oracle budget is {max_states}")

        sample = feasible_targets(self.mapper.placement(0), spec.num_pms, spec.t_m)
        self.num_actions = len(sample)
        if self.mapper.size * self.num_actions > MAX_STATE_ACTIONS:
            raise BudgetExceededError(
                f"{self.mapper.size} states x {self.num_actions} actions exceeds the oracle budget")

        self.actions = np.array([
            [self.mapper.placement_index(t) for t in
             feasible_targets(self.mapper.placement(y), spec.num_pms, spec.t_m)]
            for y in range(self.mapper.num_placements)
        ], dtype=np.int64)
        self.costs = self._cost_table()
        self.state_action_evaluations = 0

    def _cost_table(self) -> np.ndarray:
        values = self.levels.array[self.mapper.all_level_vectors]
        costs = np.empty((self.mapper.num_level_vectors, self.mapper.num_placements))
        for y, placement in enumerate(self.mapper.all_placements):
            occupancy = pm_occupancy(placement, self.spec)
            for li in range(self.mapper.num_level_vectors):
                loads = pm_loads(values[li], placement, self.spec)
                costs[li, y] = cost_from_loads(loads, occupancy, self.spec)
        return costs

    def expected_values(self, values: np.ndarray) -> np.ndarray:
        """E[V(R', y) | R] for every level vector R and every placement y"""
        tensor = values.reshape(self.mapper.level_dims + (self.mapper.num_placements,))
        for vm, chain in enumerate(self.chains):
            tensor = np.moveaxis(np.tensordot(chain.matrix, tensor, axes=([1], [vm])), 0, vm)
        return tensor.reshape(self.mapper.num_level_vectors, self.mapper.num_placements)

    def action_values(self, values: np.ndarray) -> np.ndarray:
        """Q over (level vector, current placement, action slot)"""
        future = self.expected_values(values)
        self.state_action_evaluations += self.mapper.size * self.num_actions
        return self.costs[:, :, None] + future[:, self.actions]

    def bellman(self, values: np.ndarray) -> np.ndarray:
        return self.action_values(values).min(axis=2)

    def joint_level_matrix(self) -> np.ndarray:
        return reduce(np.kron, [chain.matrix for chain in self.chains])


def value_iteration(chains: Sequence[DemandChain], spec: ClusterSpec, levels: DemandLevelSet,
                    reference: Union[None, int, SystemState] = None, tol: float = 1e-6,
                    max_iter: int = 10_000, max_states: int = MAX_STATES,
                    model: Optional[ExactModel] = None) -> UtilityVector:
    """
    Relative value iteration. Each sweep applies the Bellman operator of
    the aperiodic transform tau * I + (1 - tau) * P (costs scaled by
    1 - tau), subtracts the reference state's value and pins it to zero.
    Stops when the span of successive differences drops to tol. beta is
    reported for the untransformed chain.
    """
    model = model or ExactModel(chains, spec, levels, max_states)
    mapper = model.mapper
    ref = _as_index(reference, mapper)
    ref_cell = divmod(ref, mapper.num_placements)

    values = np.zeros((mapper.num_level_vectors, mapper.num_placements))
    spans: List[float] = []
    beta = 0.0
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        updated = (1.0 - APERIODICITY) * model.bellman(values) + APERIODICITY * values
        offset = float(updated[ref_cell])
        beta = offset / (1.0 - APERIODICITY)
        updated -= offset
        updated[ref_cell] = 0.0
        diff = updated - values
        span = float(diff.max() - diff.min())
        spans.append(span)
        values = updated
        if span <= tol:
            converged = True
            break

    if not converged:
        logger.warning(f"Exact value iteration stopped at {max_iter} sweeps, span {spans[-1]:.3e}")
    else:
        logger.debug(f"Exact value iteration converged in {iteration} sweeps, beta={beta:.6f}")
    return UtilityVector(values.reshape(-1).copy(), ref, beta, converged, iteration, tuple(spans))


def extract_policy(utility: UtilityVector, chains: Sequence[DemandChain], spec: ClusterSpec,
                   levels: DemandLevelSet, tie_tolerance: float = 1e-9,
                   model: Optional[ExactModel] = None) -> Policy:
    """Greedy policy; near-ties resolve to the lexicographically smallest target"""
    model = model or ExactModel(chains, spec, levels)
    mapper = model.mapper
    values = utility.values.reshape(mapper.num_level_vectors, mapper.num_placements)
    q = model.action_values(values)
    best = q.min(axis=2, keepdims=True)
    within = q <= best + tie_tolerance * (1.0 + np.abs(best))
    first = np.argmax(within, axis=2)
    chosen = np.take_along_axis(np.broadcast_to(model.actions, q.shape), first[:, :, None], axis=2)[:, :, 0]
    return Policy(chosen.reshape(-1).astype(np.int64), mapper)


def policy_transition_matrix(policy: Policy, model: ExactModel) -> np.ndarray:
    mapper = model.mapper
    if mapper.size > MAX_EVALUATION_STATES:
        raise BudgetExceededError(f"Policy evaluation limited to {MAX_EVALUATION_STATES} states")
    joint = model.joint_level_matrix()
    transition = np.zeros((mapper.size, mapper.size))
    actions = policy.actions.reshape(mapper.num_level_vectors, mapper.num_placements)
    for li in range(mapper.num_level_vectors):
        for y in range(mapper.num_placements):
            columns = np.arange(mapper.num_level_vectors) * mapper.num_placements + actions[li, y]
            transition[li * mapper.num_placements + y, columns] = joint[li]
    return transition


def limiting_matrix(transition: np.ndarray, tol: float = 1e-13, max_squarings: int = 200) -> np.ndarray:
    """Cesaro limit of P^t through repeated squaring of the lazy chain (I + P) / 2"""
    lazy = 0.5 * (np.eye(transition.shape[0]) + transition)
    for _ in range(max_squarings):
        squared = lazy @ lazy
        if np.max(np.abs(squared - lazy)) <= tol:
            return squared
        lazy = squared
    return lazy


def evaluate_policy(policy: Policy, chains: Sequence[DemandChain], spec: ClusterSpec,
                    levels: DemandLevelSet, model: Optional[ExactModel] = None) -> np.ndarray:
    """Long-run average cost of a stationary policy from every starting state"""
    model = model or ExactModel(chains, spec, levels)
    limit = limiting_matrix(policy_transition_matrix(policy, model))
    return limit @ model.costs.reshape(-1)


def enumerate_policies(chains: Sequence[DemandChain], spec: ClusterSpec, levels: DemandLevelSet,
                       start: Union[None, int, SystemState] = None,
                       max_policies: int = 2 ** 16) -> Tuple[float, Policy]:
    """Exhaustive minimum average cost over all deterministic stationary policies"""
    model = ExactModel(chains, spec, levels)
    mapper = model.mapper
    count = model.num_actions ** mapper.size
    if count > max_policies:
        raise BudgetExceededError(f"{count} policies exceed the enumeration budget of {max_policies}")
    start_index = _as_index(start, mapper)
    per_state = [model.actions[index % mapper.num_placements] for index in range(mapper.size)]
    best_cost = float('inf')
    best_actions = None
    for choice in itertools.product(*per_state):
        policy = Policy(np.asarray(choice, dtype=np.int64), mapper)
        cost = float(evaluate_policy(policy, chains, spec, levels, model)[start_index])
        if cost < best_cost - 1e-12:
            best_cost, best_actions = cost, policy.actions
    return best_cost, Policy(best_actions, mapper)


def solve_linear_program(chains: Sequence[DemandChain], spec: ClusterSpec,
                         levels: DemandLevelSet) -> float:
    """Minimum average cost from the occupation-measure linear program"""
    from scipy.optimize import linprog

    model = ExactModel(chains, spec, levels)
    mapper = model.mapper
    if mapper.size > MAX_EVALUATION_STATES:
        raise BudgetExceededError(f"Linear program limited to {MAX_EVALUATION_STATES} states")
    joint = model.joint_level_matrix()
    num_vars = mapper.size * model.num_actions
    objective = np.repeat(model.costs.reshape(-1), model.num_actions)

    balance = np.zeros((mapper.size + 1, num_vars))
    for state in range(mapper.size):
        li, y = divmod(state, mapper.num_placements)
        for slot, target in enumerate(model.actions[y]):
            column = state * model.num_actions + slot
            balance[state, column] += 1.0
            next_states = np.arange(mapper.num_level_vectors) * mapper.num_placements + target
            balance[next_states, column] -= joint[li]
    balance[mapper.size, :] = 1.0
    rhs = np.zeros(mapper.size + 1)
    rhs[mapper.size] = 1.0

    result = linprog(objective, A_eq=balance, b_eq=rhs, bounds=(0, None), method='highs')
    if not result.success:
        raise InputError(f"Occupation-measure program failed: {result.message}")
    return float(result.fun)


def simulate_policy(policy: Policy, chains: Sequence[DemandChain], spec: ClusterSpec,
                    levels: DemandLevelSet, num_slots: int, seed: int,
                    start: Union[None, int, SystemState] = None) -> float:
    """Seeded rollout; returns the time-average instantaneous cost"""
    model = ExactModel(chains, spec, levels)
    mapper = model.mapper
    rng = np.random.default_rng(seed)
    level_index, placement_index = divmod(_as_index(start, mapper), mapper.num_placements)
    demand = list(mapper.level_vector(level_index))
    actions = policy.actions.reshape(mapper.num_level_vectors, mapper.num_placements)
    total = 0.0
    for _ in range(num_slots):
        level_index = mapper.level_index(demand)
        total += model.costs[level_index, placement_index]
        placement_index = int(actions[level_index, placement_index])
        draws = rng.random(len(demand))
        demand = [sample_next(chain.row(level), u) for chain, level, u in zip(chains, demand, draws)]
    return total / num_slots


def solve(chains: Sequence[DemandChain], spec: ClusterSpec, levels: DemandLevelSet,
          reference: Union[None, int, SystemState] = None, tol: float = 1e-6,
          max_iter: int = 10_000, max_states: int = MAX_STATES) -> Tuple[UtilityVector, Policy]:
    model = ExactModel(chains, spec, levels, max_states)
    utility = value_iteration(chains, spec, levels, reference, tol, max_iter, model=model)
    return utility, extract_policy(utility, chains, spec, levels, model=model)


def oracle_report(utility: UtilityVector, policy: Policy) -> Dict:
    """{beta, values, policy} for fixtures and the CLI"""
    report = utility.to_dict()
    report['policy'] = policy.to_dict()['actions']
    return report


class ExactOracleController(Controller):
    """Follows the exact optimal policy for the currently estimated chains"""

    name = 'exact_oracle'

    def __init__(self, spec: ClusterSpec, levels: DemandLevelSet, resolve_period: int = 1,
                 tol: float = 1e-6, max_iter: int = 10_000, max_states: int = MAX_STATES):
        super().__init__(spec, levels)
        if resolve_period < 1:
            raise InputError(f"resolve_period must be positive, got {resolve_period}")
        self.resolve_period = resolve_period
        self.tol = tol
        self.max_iter = max_iter
        self.max_states = max_states
        self.policy: Optional[Policy] = None
        if (levels.lambda_levels * spec.num_pms) ** spec.num_vms > max_states:
            raise BudgetExceededError(
                f"exact_oracle needs {(levels.lambda_levels * spec.num_pms) ** spec.num_vms} states, "
                f"budget is {max_states}")

    def plan(self, context: SlotContext) -> MigrationPlan:
        if self.policy is None or context.slot % self.resolve_period == 0:
            chains = [estimator.estimate() for estimator in context.estimators]
            _, self.policy = solve(chains, self.spec, self.levels, tol=self.tol,
                                   max_iter=self.max_iter, max_states=self.max_states)
        return self.policy.plan_for(context.state)
