"""
Baseline placement controllers
Static first fit, a history-driven shortage avoider and a periodic
pattern-based consolidator, used as comparison points for MadVM.
"""

from typing import List, Optional, Sequence

import numpy as np
from loguru import logger

from core.cluster import ClusterSpec, MigrationPlan, Placement, check_placement
from core.controller import Controller, SlotContext
from core.demand import DemandLevelSet
from utils.errors import InputError

FIT_TOLERANCE = 1e-12
DEFAULT_PREDICTION_WINDOW = 18
DEFAULT_REPACK_PERIOD = 144


def static_first_fit(expected_demands: Sequence[float], spec: ClusterSpec) -> Placement:
    """VMs in id order onto the lowest PM that stays within T_r, else the least-loaded PM"""
    if len(expected_demands) != spec.num_vms:
        raise InputError(f"Need {spec.num_vms} expected demands, got {len(expected_demands)}")
    loads = np.zeros(spec.num_pms)
    placement = []
    for demand in expected_demands:
        share = float(demand) / spec.capacity
        fits = np.flatnonzero(loads + share <= 1.0 + FIT_TOLERANCE)
        pm = int(fits[0]) if fits.size else int(np.argmin(loads))
        loads[pm] += share
        placement.append(pm)
    return tuple(placement)


def first_fit_decreasing(demands: Sequence[float], spec: ClusterSpec) -> Placement:
    """First fit after sorting VMs by demand, largest first (ties by VM id)"""
    order = sorted(range(len(demands)), key=lambda vm: (-float(demands[vm]), vm))
    packed = static_first_fit([demands[vm] for vm in order], spec.model_copy(update={'num_vms': len(demands)}))
    placement = [0] * len(demands)
    for vm, pm in zip(order, packed):
        placement[vm] = pm
    return tuple(placement)


def _predicted_loads(predicted: np.ndarray, placement: Sequence[int], spec: ClusterSpec) -> np.ndarray:
    return np.bincount(np.asarray(placement, dtype=np.int64), weights=predicted,
                       minlength=spec.num_pms) / spec.capacity


def overflow_moves(placement: Sequence[int], predicted: np.ndarray, spec: ClusterSpec,
                   budget: Optional[int] = None) -> MigrationPlan:
    """
    For each PM predicted above T_r (in id order), move its largest VM to
    the first other PM with room for it. At most `budget` moves.
    """
    budget = spec.t_m if budget is None else min(budget, spec.t_m)
    targets = list(placement)
    loads = _predicted_loads(predicted, placement, spec)
    moved = 0
    for pm in range(spec.num_pms):
        if moved >= budget:
            break
        if loads[pm] <= 1.0 + FIT_TOLERANCE:
            continue
        hosted = [vm for vm, host in enumerate(targets) if host == pm and targets[vm] == placement[vm]]
        if not hosted:
            continue
        vm = max(hosted, key=lambda v: (predicted[v], -v))
        share = predicted[vm] / spec.capacity
        for candidate in range(spec.num_pms):
            if candidate != pm and loads[candidate] + share <= 1.0 + FIT_TOLERANCE:
                targets[vm] = candidate
                loads[pm] -= share
                loads[candidate] += share
                moved += 1
                break
    return MigrationPlan(tuple(targets))


def _check_history(history: np.ndarray, spec: ClusterSpec) -> np.ndarray:
    history = np.asarray(history, dtype=float)
    if history.ndim != 2 or history.shape[0] != spec.num_vms or history.shape[1] < 1:
        raise InputError(f"History must be ({spec.num_vms}, t>=1), got {history.shape}")
    return history


def predictive_scaler_step(placement: Sequence[int], history: np.ndarray, spec: ClusterSpec,
                           window: int = DEFAULT_PREDICTION_WINDOW) -> MigrationPlan:
    """Predict each VM's next demand as its recent maximum and relieve predicted overloads"""
    check_placement(placement, spec)
    history = _check_history(history, spec)
    predicted = history[:, -window:].max(axis=1)
    return overflow_moves(placement, predicted, spec)


def moves_toward(placement: Sequence[int], target: Sequence[int], priority: np.ndarray,
                 budget: int) -> MigrationPlan:
    """Up to `budget` moves toward `target`, highest priority first, ties by VM id"""
    pending = [vm for vm in range(len(placement)) if placement[vm] != target[vm]]
    pending.sort(key=lambda vm: (-float(priority[vm]), vm))
    targets = list(placement)
    for vm in pending[:max(budget, 0)]:
        targets[vm] = target[vm]
    return MigrationPlan(tuple(targets))


def pattern_consolidator_step(placement: Sequence[int], history: np.ndarray, spec: ClusterSpec, slot: int,
                              period: int = DEFAULT_REPACK_PERIOD,
                              target: Optional[Sequence[int]] = None) -> MigrationPlan:
    """
    On re-pack slots, move toward a first-fit-decreasing packing of the
    windowed mean demands. Otherwise react to observed overloads only.
    """
    check_placement(placement, spec)
    history = _check_history(history, spec)
    means = history[:, -period:].mean(axis=1)
    if target is None and slot > 0 and slot % period == 0:
        target = first_fit_decreasing(means, spec)
    if target is not None:
        return moves_toward(placement, target, means, spec.t_m)
    return overflow_moves(placement, history[:, -1], spec)


class StaticFirstFitController(Controller):
    """Never migrates after the initial first-fit placement"""

    name = 'static_first_fit'

    def plan(self, context: SlotContext) -> MigrationPlan:
        return MigrationPlan.stay(context.placement)


class PredictiveScalerController(Controller):
    name = 'predictive_scaler'

    def __init__(self, spec: ClusterSpec, levels: DemandLevelSet, window: int = DEFAULT_PREDICTION_WINDOW):
        super().__init__(spec, levels)
        self.window = window

    def plan(self, context: SlotContext) -> MigrationPlan:
        return predictive_scaler_step(context.placement, context.history, self.spec, self.window)


class PatternConsolidatorController(Controller):
    """Keeps working toward the last re-pack target until it is reached"""

    name = 'pattern_consolidator'

    def __init__(self, spec: ClusterSpec, levels: DemandLevelSet, period: int = DEFAULT_REPACK_PERIOD):
        super().__init__(spec, levels)
        if period < 1:
            raise InputError(f"Re-pack period must be positive, got {period}")
        self.period = period
        self.target: Optional[List[int]] = None

    def initial_placement(self, expected_demands: Sequence[float]) -> Optional[Placement]:
        return first_fit_decreasing(expected_demands, self.spec)

    def plan(self, context: SlotContext) -> MigrationPlan:
        if context.slot > 0 and context.slot % self.period == 0:
            means = context.history[:, -self.period:].mean(axis=1)
            self.target = list(first_fit_decreasing(means, self.spec))
            logger.debug(f"Slot {context.slot}: re-pack target {self.target}")
        if self.target is not None and tuple(self.target) == tuple(context.placement):
            self.target = None
        return pattern_consolidator_step(context.placement, context.history, self.spec, context.slot,
                                         self.period, self.target)
