"""
Cluster model for the MadVM simulator
Data-center state, power and shortage accounting, migration feasibility
"""

import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from core.demand import DemandLevelSet
from utils.errors import ConstraintError, InputError


class ClusterSpec(BaseModel):
    """Sizes, power constants, migration cap and shortage weight"""
    model_config = ConfigDict(extra='forbid', frozen=True)

    num_pms: int = Field(10, ge=1)
    num_vms: int = Field(20, ge=1)
    capacity: float = Field(1.0, gt=0)
    p_idle: float = 250.0
    p_max: float = 500.0
    p_sleep: float = 50.0
    t_m: Optional[int] = Field(None, ge=0)
    lambda_weight: float = Field(1e6, ge=0)

    @model_validator(mode='before')
    @classmethod
    def _default_migration_cap(cls, data: Any) -> Any:
        # T_m defaults to 2% of the VM count, rounded up
        if isinstance(data, dict) and data.get('t_m') is None:
            data = dict(data)
            data['t_m'] = math.ceil(0.02 * data.get('num_vms', 20))
        return data

    @model_validator(mode='after')
    def _check_power_order(self) -> 'ClusterSpec':
        if not self.p_sleep < self.p_idle < self.p_max:
            raise ValueError(
                f"Power constants must satisfy p_sleep < p_idle < p_max, "
                f"got {self.p_sleep}, {self.p_idle}, {self.p_max}")
        return self


Placement = Tuple[int, ...]


@dataclass(frozen=True)
class SystemState:
    """Joint demand levels R(t) and placement Y(t)"""
    demand_levels: Tuple[int, ...]
    placement: Placement

    def __post_init__(self):
        object.__setattr__(self, 'demand_levels', tuple(int(x) for x in self.demand_levels))
        object.__setattr__(self, 'placement', tuple(int(x) for x in self.placement))
        if len(self.demand_levels) != len(self.placement):
            raise InputError("State needs one demand level and one location per VM")

    @property
    def num_vms(self) -> int:
        return len(self.placement)

    def validate(self, levels: DemandLevelSet, spec: ClusterSpec):
        if self.num_vms != spec.num_vms:
            raise InputError(f"State has {self.num_vms} VMs, cluster has {spec.num_vms}")
        for level in self.demand_levels:
            levels.check_index(level)
        check_placement(self.placement, spec)

    def with_placement(self, placement: Sequence[int]) -> 'SystemState':
        return SystemState(self.demand_levels, tuple(placement))

    def to_dict(self) -> Dict[str, list]:
        return {'demand_levels': list(self.demand_levels), 'placement': list(self.placement)}


@dataclass(frozen=True)
class MigrationPlan:
    """Target PM per VM for the next slot"""
    targets: Placement

    def __post_init__(self):
        object.__setattr__(self, 'targets', tuple(int(x) for x in self.targets))

    @classmethod
    def stay(cls, placement: Sequence[int]) -> 'MigrationPlan':
        return cls(tuple(placement))

    def moved_vms(self, placement: Sequence[int]) -> Tuple[int, ...]:
        return tuple(vm for vm, (target, current) in enumerate(zip(self.targets, placement))
                     if target != current)

    def migrations(self, placement: Sequence[int]) -> int:
        return len(self.moved_vms(placement))


def check_placement(placement: Sequence[int], spec: ClusterSpec):
    if len(placement) != spec.num_vms:
        raise InputError(f"Placement has {len(placement)} entries, cluster has {spec.num_vms} VMs")
    for vm, pm in enumerate(placement):
        if not 0 <= pm < spec.num_pms:
            raise InputError(f"VM {vm} placed on unknown PM {pm}")


def pm_loads(level_values: np.ndarray, placement: Sequence[int], spec: ClusterSpec) -> np.ndarray:
    """Per-PM load as a fraction of capacity T_r"""
    hosted = np.bincount(np.asarray(placement, dtype=np.int64), weights=level_values,
                         minlength=spec.num_pms)
    return hosted / spec.capacity


def pm_occupancy(placement: Sequence[int], spec: ClusterSpec) -> np.ndarray:
    return np.bincount(np.asarray(placement, dtype=np.int64), minlength=spec.num_pms)


def server_power(load_fraction: float, spec: ClusterSpec, hosts_any_vm: bool) -> float:
    """Linear idle-to-peak model, clamped at full load; sleeping when empty"""
    if not hosts_any_vm:
        return spec.p_sleep
    return spec.p_idle + (spec.p_max - spec.p_idle) * min(load_fraction, 1.0)


def power_vector(loads: np.ndarray, occupancy: np.ndarray, spec: ClusterSpec) -> np.ndarray:
    active = spec.p_idle + (spec.p_max - spec.p_idle) * np.minimum(loads, 1.0)
    return np.where(occupancy > 0, active, spec.p_sleep)


def _state_loads(state: SystemState, levels: DemandLevelSet, spec: ClusterSpec):
    values = levels.array[np.asarray(state.demand_levels, dtype=np.int64)]
    return pm_loads(values, state.placement, spec), pm_occupancy(state.placement, spec)


def total_power(state: SystemState, levels: DemandLevelSet, spec: ClusterSpec) -> float:
    loads, occupancy = _state_loads(state, levels, spec)
    return float(power_vector(loads, occupancy, spec).sum())


def shortage_vector(state: SystemState, levels: DemandLevelSet, spec: ClusterSpec) -> np.ndarray:
    loads, _ = _state_loads(state, levels, spec)
    return np.maximum(loads - 1.0, 0.0)


def cost_from_loads(loads: np.ndarray, occupancy: np.ndarray, spec: ClusterSpec) -> float:
    power = power_vector(loads, occupancy, spec).sum()
    shortage = np.maximum(loads - 1.0, 0.0).sum()
    return float(power + spec.lambda_weight / spec.num_vms * shortage)


def instantaneous_cost(state: SystemState, levels: DemandLevelSet, spec: ClusterSpec) -> float:
    """g = P_total + lambda / |V_m| * sum of shortages"""
    loads, occupancy = _state_loads(state, levels, spec)
    return cost_from_loads(loads, occupancy, spec)


def active_pms(placement: Sequence[int], spec: ClusterSpec) -> int:
    return int(np.count_nonzero(pm_occupancy(placement, spec)))


def check_plan(plan: MigrationPlan, placement: Sequence[int], spec: ClusterSpec) -> int:
    """Validate targets and the T_m cap; returns the number of migrations"""
    check_placement(plan.targets, spec)
    moved = plan.migrations(placement)
    if moved > spec.t_m:
        raise ConstraintError(f"Plan migrates {moved} VMs, cap is {spec.t_m}")
    return moved


def apply_migrations(state: SystemState, plan: MigrationPlan, spec: ClusterSpec) -> Placement:
    """Next-slot placement; the current slot's cost stays on state.placement"""
    check_plan(plan, state.placement, spec)
    return plan.targets
