"""
State Mapper for the MadVM simulator
Packs joint system states into flat indices and maps them onto the
per-VM indicator features used by the linear utility approximation
"""

from functools import cached_property
from typing import Sequence, Tuple

import numpy as np

from core.cluster import SystemState
from utils.errors import InputError


class StateMapper:
    """
    Bijection between SystemState and [0, N_S).

    index = level_index * num_placements + placement_index, where both
    parts are row-major over the VMs (VM 0 most significant). Feature
    columns are ordered VM-major, then level, then PM.
    """

    def __init__(self, num_vms: int, num_pms: int, num_levels: int):
        if num_vms < 1 or num_pms < 1 or num_levels < 1:
            raise InputError("StateMapper needs positive sizes")
        self.num_vms = num_vms
        self.num_pms = num_pms
        self.num_levels = num_levels
        self.level_dims = (num_levels,) * num_vms
        self.placement_dims = (num_pms,) * num_vms

    @property
    def num_level_vectors(self) -> int:
        return self.num_levels ** self.num_vms

    @property
    def num_placements(self) -> int:
        return self.num_pms ** self.num_vms

    @property
    def size(self) -> int:
        return self.num_level_vectors * self.num_placements

    @property
    def features_per_vm(self) -> int:
        return self.num_levels * self.num_pms

    @property
    def num_features(self) -> int:
        return self.num_vms * self.features_per_vm

    def level_index(self, demand_levels: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(demand_levels), self.level_dims))

    def placement_index(self, placement: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(placement), self.placement_dims))

    def pack(self, state: SystemState) -> int:
        try:
            return self.level_index(state.demand_levels) * self.num_placements \
                + self.placement_index(state.placement)
        except ValueError as e:
            raise InputError(f"State {state} does not fit the index space: {e}")

    def unpack(self, index: int) -> SystemState:
        if not 0 <= index < self.size:
            raise InputError(f"Joint index {index} outside [0, {self.size})")
        level_part, placement_part = divmod(int(index), self.num_placements)
        return SystemState(self.level_vector(level_part), self.placement(placement_part))

    def level_vector(self, level_index: int) -> Tuple[int, ...]:
        return tuple(int(x) for x in np.unravel_index(level_index, self.level_dims))

    def placement(self, placement_index: int) -> Tuple[int, ...]:
        return tuple(int(x) for x in np.unravel_index(placement_index, self.placement_dims))

    @cached_property
    def all_level_vectors(self) -> np.ndarray:
        """(num_level_vectors, num_vms) table"""
        return np.array(np.unravel_index(np.arange(self.num_level_vectors), self.level_dims)).T

    @cached_property
    def all_placements(self) -> np.ndarray:
        """(num_placements, num_vms) table"""
        return np.array(np.unravel_index(np.arange(self.num_placements), self.placement_dims)).T

    def feature_index(self, vm: int, level: int, pm: int) -> int:
        return vm * self.features_per_vm + level * self.num_pms + pm

    def feature_columns(self, state: SystemState) -> np.ndarray:
        return np.array([self.feature_index(vm, level, pm) for vm, (level, pm)
                         in enumerate(zip(state.demand_levels, state.placement))])

    def feature_vector(self, state: SystemState) -> np.ndarray:
        """F(S): one indicator per VM"""
        features = np.zeros(self.num_features)
        features[self.feature_columns(state)] = 1.0
        return features

    def feature_matrix(self) -> np.ndarray:
        """Rows F(S) for every joint state, in index order"""
        levels = np.repeat(self.all_level_vectors, self.num_placements, axis=0)
        placements = np.tile(self.all_placements, (self.num_level_vectors, 1))
        vm_offsets = np.arange(self.num_vms) * self.features_per_vm
        columns = vm_offsets + levels * self.num_pms + placements
        matrix = np.zeros((self.size, self.num_features))
        np.put_along_axis(matrix, columns, 1.0, axis=1)
        return matrix
