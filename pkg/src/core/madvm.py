"""
MadVM approximate controller
Per-VM value iteration over key states, the linear utility decomposition
and the control-utility auction that picks at most T_m migrations a slot.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from core.cluster import ClusterSpec, MigrationPlan, SystemState, instantaneous_cost, pm_loads, pm_occupancy
from core.controller import Controller, SlotContext
from core.demand import (APERIODICITY, DemandChain, DemandLevelSet, FeatureState, SlidingWindowEstimator,
                         feature_state, indicator, stationary_distribution)
from utils.errors import InputError

RANKINGS = ('gain', 'ascending', 'maximum')
MODES = ('centralized', 'distributed')
TIE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class KeyStateSet:
    """Joint states where VM owner_vm varies over (level, PM) and every other VM sits at its feature state"""
    owner_vm: int
    feature_states: Tuple[FeatureState, ...]
    num_levels: int
    num_pms: int

    def __len__(self) -> int:
        return self.num_levels * self.num_pms

    def state(self, level: int, pm: int) -> SystemState:
        demand = [f.expected_level_index for f in self.feature_states]
        placement = [f.location for f in self.feature_states]
        demand[self.owner_vm] = level
        placement[self.owner_vm] = pm
        return SystemState(tuple(demand), tuple(placement))

    @property
    def states(self) -> List[SystemState]:
        return [self.state(r, y) for r in range(self.num_levels) for y in range(self.num_pms)]

    @property
    def reference(self) -> Tuple[int, int]:
        """The owner's own feature state"""
        return self.feature_states[self.owner_vm].as_pair()

    def context(self) -> List[FeatureState]:
        return [f for vm, f in enumerate(self.feature_states) if vm != self.owner_vm]


def build_key_states(owner_vm: int, feature_states: Sequence[FeatureState], levels: DemandLevelSet,
                     spec: ClusterSpec) -> KeyStateSet:
    if len(feature_states) != spec.num_vms:
        raise InputError(f"Need a feature state for each of the {spec.num_vms} VMs")
    if not 0 <= owner_vm < spec.num_vms:
        raise InputError(f"Unknown VM {owner_vm}")
    for f in feature_states:
        levels.check_index(f.expected_level_index)
        if not 0 <= f.location < spec.num_pms:
            raise InputError(f"Feature state on unknown PM {f.location}")
    return KeyStateSet(owner_vm, tuple(feature_states), levels.lambda_levels, spec.num_pms)


@dataclass(frozen=True, eq=False)
class PerVMUtility:
    """Converged table over one VM's key states, indexed [level, pm]"""
    owner_vm: int
    table: np.ndarray
    beta: float
    reference: Tuple[int, int]
    converged: bool = True
    iterations: int = 0
    evaluations: int = 0
    history: Tuple[float, ...] = ()

    def value(self, level: int, pm: int) -> float:
        return float(self.table[level, pm])


def frozen_context_loads(key_states: KeyStateSet, levels: DemandLevelSet,
                         spec: ClusterSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Loads and occupancy of every PM from the VMs other than the owner"""
    others = [(f.expected_level_index, f.location) for vm, f in enumerate(key_states.feature_states)
              if vm != key_states.owner_vm]
    if not others:
        return np.zeros(spec.num_pms), np.zeros(spec.num_pms, dtype=np.int64)
    level_idx, locations = zip(*others)
    values = levels.array[np.asarray(level_idx, dtype=np.int64)]
    return pm_loads(values, locations, spec), pm_occupancy(locations, spec)


def key_state_costs(key_states: KeyStateSet, levels: DemandLevelSet, spec: ClusterSpec) -> np.ndarray:
    """g over the key states, shape (levels, PMs)"""
    base_loads, base_occupancy = frozen_context_loads(key_states, levels, spec)
    placed = np.eye(spec.num_pms)
    loads = base_loads[None, None, :] + levels.array[:, None, None] * placed[None, :, :] / spec.capacity
    occupancy = base_occupancy[None, :] + placed
    active = spec.p_idle + (spec.p_max - spec.p_idle) * np.minimum(loads, 1.0)
    power = np.where(occupancy[None, :, :] > 0, active, spec.p_sleep).sum(axis=2)
    shortage = np.maximum(loads - 1.0, 0.0).sum(axis=2)
    return power + spec.lambda_weight / spec.num_vms * shortage


class PerVMProblem:
    """One VM's restricted MDP: its own level follows its chain, its location follows its action"""

    def __init__(self, key_states: KeyStateSet, chain: DemandChain, levels: DemandLevelSet, spec: ClusterSpec):
        self.key_states = key_states
        self.chain = chain
        self.levels = levels
        self.spec = spec
        self.costs = key_state_costs(key_states, levels, spec)
        self.reference = key_states.reference
        self.evaluations = 0

    @property
    def evaluations_per_sweep(self) -> int:
        return len(self.key_states) * self.spec.num_pms

    def sweep(self, table: np.ndarray) -> Tuple[np.ndarray, float]:
        """
        One relative Bellman update of the aperiodic transform
        tau * I + (1 - tau) * P with costs scaled by (1 - tau). The relative
        values and the argmin match the untransformed problem; the returned
        average cost is rescaled back to it.
        """
        future = self.chain.matrix @ table
        self.evaluations += self.evaluations_per_sweep
        updated = (1.0 - APERIODICITY) * (self.costs + future.min(axis=1, keepdims=True)) + APERIODICITY * table
        offset = float(updated[self.reference])
        updated = updated - offset
        updated[self.reference] = 0.0
        return updated, offset / (1.0 - APERIODICITY)

    def solve(self, tol: float = 1e-3, max_iter: int = 1000, initial: Optional[np.ndarray] = None,
              record_history: bool = False) -> PerVMUtility:
        table = np.zeros_like(self.costs) if initial is None else np.array(initial, dtype=float)
        if table.shape != self.costs.shape:
            raise InputError(f"Initial table must be {self.costs.shape}, got {table.shape}")
        history: List[float] = []
        beta = 0.0
        converged = False
        iteration = 0
        for iteration in range(1, max_iter + 1):
            updated, beta = self.sweep(table)
            diff = updated - table
            if record_history:
                history.append(float(np.max(np.abs(diff))))
            table = updated
            if float(diff.max() - diff.min()) <= tol:
                converged = True
                break
        return PerVMUtility(self.key_states.owner_vm, table, beta, self.reference, converged,
                            iteration, self.evaluations, tuple(history))


def per_vm_value_iteration(owner_vm: int, key_states: KeyStateSet, chain: DemandChain, spec: ClusterSpec,
                           levels: DemandLevelSet, tol: float = 1e-3, max_iter: int = 1000,
                           initial: Optional[np.ndarray] = None, record_history: bool = False) -> PerVMUtility:
    if key_states.owner_vm != owner_vm:
        raise InputError(f"Key states belong to VM {key_states.owner_vm}, not {owner_vm}")
    problem = PerVMProblem(key_states, chain, levels, spec)
    return problem.solve(tol, max_iter, initial, record_history)


class StackedIterationMap:
    """Blockwise per-VM sweep acting on a concatenated weight vector"""

    def __init__(self, problems: Sequence[PerVMProblem]):
        self.problems = list(problems)
        self.block = problems[0].costs.size

    def __call__(self, weights: np.ndarray) -> np.ndarray:
        blocks = np.asarray(weights, dtype=float).reshape(len(self.problems), -1)
        return np.concatenate([
            problem.sweep(block.reshape(problem.costs.shape))[0].ravel()
            for problem, block in zip(self.problems, blocks)
        ])

    def power(self, weights: np.ndarray, n: int) -> np.ndarray:
        for _ in range(n):
            weights = self(weights)
        return weights


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Per-VM tables laid end to end in VM order"""
    tables: Tuple[np.ndarray, ...]

    @classmethod
    def from_utilities(cls, utilities: Sequence[PerVMUtility]) -> 'WeightVector':
        ordered = sorted(utilities, key=lambda u: u.owner_vm)
        return cls(tuple(u.table for u in ordered))

    @classmethod
    def from_vector(cls, vector: np.ndarray, num_vms: int, num_levels: int, num_pms: int) -> 'WeightVector':
        vector = np.asarray(vector, dtype=float)
        if vector.size != num_vms * num_levels * num_pms:
            raise InputError(f"Weight vector length {vector.size} does not match {num_vms}x{num_levels}x{num_pms}")
        return cls(tuple(vector.reshape(num_vms, num_levels, num_pms)))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([table.ravel() for table in self.tables])

    def __len__(self) -> int:
        return sum(table.size for table in self.tables)


def approximate_joint_utility(weights: WeightVector, state: SystemState) -> float:
    """sum over VMs of V_l(R_l, Y_l), i.e. W^T F(S)"""
    if len(weights.tables) != state.num_vms:
        raise InputError(f"Weights cover {len(weights.tables)} VMs, state has {state.num_vms}")
    return float(sum(table[level, pm] for table, level, pm
                     in zip(weights.tables, state.demand_levels, state.placement)))


@dataclass(frozen=True)
class ControlBid:
    vm: int
    control_utility: float
    best_target: int
    gain: float
    stay_value: float

    def to_dict(self) -> Dict:
        return {'vm': self.vm, 'control_utility': self.control_utility,
                'best_target': self.best_target, 'gain': self.gain}


def action_values(owner_vm: int, current: SystemState, table: PerVMUtility, chain: DemandChain,
                  spec: ClusterSpec, levels: DemandLevelSet) -> np.ndarray:
    """g(S(t)) + expected table value after moving to each PM"""
    now = instantaneous_cost(current, levels, spec)
    return now + chain.row(current.demand_levels[owner_vm]) @ table.table


def control_utility(owner_vm: int, current: SystemState, table: PerVMUtility, chain: DemandChain,
                    spec: ClusterSpec, levels: DemandLevelSet, gain_epsilon: float = 1e-6) -> ControlBid:
    values = action_values(owner_vm, current, table, chain, spec, levels)
    location = current.placement[owner_vm]
    best = float(values.min())
    stay = float(values[location])
    tie = TIE_TOLERANCE * max(1.0, abs(best))
    if stay - best <= max(tie, gain_epsilon):
        return ControlBid(owner_vm, best, location, 0.0, stay)
    target = int(np.argmax(values <= best + tie))
    return ControlBid(owner_vm, best, target, stay - best, stay)


def select_migrations(bids: Sequence[ControlBid], placement: Sequence[int], t_m: int,
                      ranking: str = 'gain') -> MigrationPlan:
    """Top T_m positive-gain bids win; ties go to the lower VM id"""
    if ranking not in RANKINGS:
        raise InputError(f"Unknown ranking '{ranking}', expected one of {RANKINGS}")
    candidates = [bid for bid in bids if bid.gain > 0 and bid.best_target != placement[bid.vm]]
    if ranking == 'gain':
        candidates.sort(key=lambda bid: (-bid.gain, bid.vm))
    elif ranking == 'ascending':
        candidates.sort(key=lambda bid: (bid.control_utility, bid.vm))
    else:
        candidates.sort(key=lambda bid: (-bid.control_utility, bid.vm))
    targets = list(placement)
    for bid in candidates[:max(t_m, 0)]:
        targets[bid.vm] = bid.best_target
    return MigrationPlan(tuple(targets))


@dataclass(frozen=True)
class Broadcast:
    """What one VM shares with the others in distributed mode"""
    vm: int
    feature_state: FeatureState
    local_state: Tuple[int, int]

    def to_dict(self) -> Dict:
        return {'vm': self.vm, 'feature_state': list(self.feature_state.as_pair()),
                'local_state': list(self.local_state)}


@dataclass
class MessageLog:
    broadcasts: List[Broadcast] = field(default_factory=list)

    def publish(self, message: Broadcast):
        self.broadcasts.append(message)

    def feature_states(self) -> List[FeatureState]:
        return [m.feature_state for m in sorted(self.broadcasts, key=lambda m: m.vm)]

    def joint_state(self) -> SystemState:
        ordered = sorted(self.broadcasts, key=lambda m: m.vm)
        return SystemState(tuple(m.local_state[0] for m in ordered), tuple(m.local_state[1] for m in ordered))


@dataclass(frozen=True, eq=False)
class SlotDecision:
    slot: int
    feature_states: Tuple[FeatureState, ...]
    utilities: Tuple[PerVMUtility, ...]
    bids: Tuple[ControlBid, ...]
    plan: MigrationPlan
    messages: Optional[MessageLog] = None

    def to_dict(self) -> Dict:
        return {
            'slot': self.slot,
            'feature_states': [list(f.as_pair()) for f in self.feature_states],
            'bids': [bid.to_dict() for bid in self.bids],
            'plan': list(self.plan.targets),
        }


class MadVMController(Controller):
    """The five-step MadVM loop run once per slot"""

    name = 'madvm'

    def __init__(self, spec: ClusterSpec, levels: DemandLevelSet, mode: str = 'centralized',
                 tol: float = 1e-3, max_iter: int = 1000, warm_start: bool = False, ranking: str = 'gain',
                 gain_epsilon: float = 1e-6, max_workers: int = 1, debug_dump: Optional[str] = None):
        super().__init__(spec, levels)
        if mode not in MODES:
            raise InputError(f"Unknown MadVM mode '{mode}', expected one of {MODES}")
        if ranking not in RANKINGS:
            raise InputError(f"Unknown ranking '{ranking}', expected one of {RANKINGS}")
        self.mode = mode
        self.tol = tol
        self.max_iter = max_iter
        self.warm_start = warm_start
        self.ranking = ranking
        self.gain_epsilon = gain_epsilon
        self.max_workers = max_workers
        self.debug_dump = Path(debug_dump) if debug_dump else None
        self.previous_tables: Dict[int, np.ndarray] = {}
        self.last_decision: Optional[SlotDecision] = None
        self.total_evaluations = 0
        self._executor = ThreadPoolExecutor(max_workers=max_workers) if max_workers > 1 else None
        if self.debug_dump:
            self.debug_dump.parent.mkdir(parents=True, exist_ok=True)
            self.debug_dump.write_text('')

    def close(self):
        if self._executor:
            self._executor.shutdown(wait=True)
            self._executor = None

    def _map(self, fn, items):
        if self._executor:
            return list(self._executor.map(fn, items))
        return [fn(item) for item in items]

    def learn(self, state: SystemState, estimators: Sequence[SlidingWindowEstimator]):
        """Step 2: chains from the sliding windows, then feature states"""
        chains = [estimator.estimate() for estimator in estimators]
        features = []
        for vm, chain in enumerate(chains):
            start = indicator(state.demand_levels[vm], self.levels.lambda_levels)
            pi = stationary_distribution(chain, start)
            features.append(feature_state(pi.distribution, self.levels, state.placement[vm]))
        return chains, features

    def _solve_vm(self, vm: int, features: Sequence[FeatureState], chain: DemandChain) -> PerVMUtility:
        key_states = build_key_states(vm, features, self.levels, self.spec)
        initial = self.previous_tables.get(vm) if self.warm_start else None
        return per_vm_value_iteration(vm, key_states, chain, self.spec, self.levels,
                                      self.tol, self.max_iter, initial)

    def decide(self, slot: int, state: SystemState,
               estimators: Sequence[SlidingWindowEstimator]) -> SlotDecision:
        if len(estimators) != self.spec.num_vms:
            raise InputError(f"Need one estimator per VM ({self.spec.num_vms}), got {len(estimators)}")
        # Step 1 is implicit: tables start from zero unless warm_start is set
        chains, features = self.learn(state, estimators)

        messages = None
        if self.mode == 'distributed':
            # Step 3: each VM publishes only its feature state and local state
            messages = MessageLog()
            for vm, f in enumerate(features):
                messages.publish(Broadcast(vm, f, (state.demand_levels[vm], state.placement[vm])))
            shared_features = messages.feature_states()
            observed = messages.joint_state()
        else:
            shared_features = features
            observed = state

        # Step 4
        utilities = self._map(lambda vm: self._solve_vm(vm, shared_features, chains[vm]),
                              range(self.spec.num_vms))
        unconverged = [u.owner_vm for u in utilities if not u.converged]
        if unconverged:
            logger.warning(f"Slot {slot}: per-VM value iteration hit max_iter for VMs {unconverged}")
        self.total_evaluations += sum(u.evaluations for u in utilities)
        if self.warm_start:
            self.previous_tables = {u.owner_vm: u.table for u in utilities}

        # Step 5
        bids = [control_utility(vm, observed, utilities[vm], chains[vm], self.spec, self.levels,
                                self.gain_epsilon) for vm in range(self.spec.num_vms)]
        plan = select_migrations(bids, state.placement, self.spec.t_m, self.ranking)
        decision = SlotDecision(slot, tuple(features), tuple(utilities), tuple(bids), plan, messages)
        self.last_decision = decision

        moved = plan.moved_vms(state.placement)
        if moved:
            logger.debug(f"Slot {slot}: migrating VMs {list(moved)}")
        if self.debug_dump:
            with open(self.debug_dump, 'a', encoding='utf-8') as f:
                f.write(json.dumps(decision.to_dict(), sort_keys=True) + '\n')
        return decision

    def plan(self, context: SlotContext) -> MigrationPlan:
        return self.decide(context.slot, context.state, context.estimators).plan


def madvm_step(state: SystemState, estimators: Sequence[SlidingWindowEstimator], spec: ClusterSpec,
               levels: DemandLevelSet, mode: str = 'centralized', **options) -> MigrationPlan:
    """Single slot of MadVM with a fresh controller"""
    controller = MadVMController(spec, levels, mode=mode, **options)
    try:
        return controller.decide(0, state, estimators).plan
    finally:
        controller.close()
