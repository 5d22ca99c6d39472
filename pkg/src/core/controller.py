"""
Controller interface shared by MadVM, the baselines and the exact oracle
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from core.cluster import ClusterSpec, MigrationPlan, Placement, SystemState
from core.demand import DemandLevelSet, SlidingWindowEstimator


@dataclass(frozen=True, eq=False)
class SlotContext:
    """Everything a controller may look at when deciding slot t"""
    slot: int
    state: SystemState
    estimators: Sequence[SlidingWindowEstimator]
    history: np.ndarray
    levels: DemandLevelSet
    spec: ClusterSpec

    @property
    def placement(self) -> Placement:
        return self.state.placement


class Controller(ABC):
    """Produces one MigrationPlan per slot"""

    name = 'controller'

    def __init__(self, spec: ClusterSpec, levels: DemandLevelSet):
        self.spec = spec
        self.levels = levels

    def initial_placement(self, expected_demands: Sequence[float]) -> Optional[Placement]:
        """Own initial packing, or None to use first fit on expectations"""
        return None

    @abstractmethod
    def plan(self, context: SlotContext) -> MigrationPlan:
        pass

    def close(self):
        """Release any per-run resources"""
