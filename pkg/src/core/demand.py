"""
Demand model for the MadVM simulator
Per-VM CPU demand as a quantized Markov chain: learning, stationary
behaviour, feature states and synthetic traces
"""

from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from utils.errors import InputError

ROW_SUM_TOLERANCE = 1e-9
QUANTIZE_EPS = 1e-12
# self-loop weight mixed into the transition operators the value iterations sweep
APERIODICITY = 0.05


@dataclass(frozen=True)
class DemandLevelSet:
    """Ordered quantization levels r_0 < ... < r_{L-1}, as fractions of T_r"""
    values: Tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        object.__setattr__(self, 'values', values)
        if len(values) < 2:
            raise InputError("A level set needs at least two levels")
        if values[0] < 0:
            raise InputError(f"Lowest level must be non-negative, got {values[0]}")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise InputError(f"Levels must be strictly increasing: {values}")

    @classmethod
    def uniform(cls, lambda_levels: int, cap_multiple: float = 1.0) -> 'DemandLevelSet':
        """r_k = k / (L - 1) * cap_multiple"""
        if lambda_levels < 2:
            raise InputError("A level set needs at least two levels")
        return cls(tuple(k / (lambda_levels - 1) * cap_multiple for k in range(lambda_levels)))

    @property
    def lambda_levels(self) -> int:
        return len(self.values)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def value(self, index: int) -> float:
        return self.values[index]

    def check_index(self, index: int):
        if not 0 <= int(index) < self.lambda_levels:
            raise InputError(f"Level index {index} outside [0, {self.lambda_levels - 1}]")


@dataclass(frozen=True, eq=False)
class DemandChain:
    """Row-stochastic transition matrix; matrix[current][next]"""
    matrix: np.ndarray
    levels: DemandLevelSet

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=float, copy=True)
        size = self.levels.lambda_levels
        if matrix.shape != (size, size):
            raise InputError(f"Chain must be {size}x{size}, got {matrix.shape}")
        if np.any(matrix < 0) or np.any(matrix > 1):
            raise InputError("Transition probabilities must lie in [0, 1]")
        row_sums = matrix.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > ROW_SUM_TOLERANCE):
            raise InputError(f"Chain rows must sum to 1, got {row_sums.tolist()}")
        matrix.setflags(write=False)
        object.__setattr__(self, 'matrix', matrix)

    @classmethod
    def uniform(cls, levels: DemandLevelSet) -> 'DemandChain':
        size = levels.lambda_levels
        return cls(np.full((size, size), 1.0 / size), levels)

    @classmethod
    def identity(cls, levels: DemandLevelSet) -> 'DemandChain':
        return cls(np.eye(levels.lambda_levels), levels)

    @property
    def size(self) -> int:
        return self.levels.lambda_levels

    def row(self, level: int) -> np.ndarray:
        return self.matrix[level]

    def to_dict(self) -> Dict[str, list]:
        return {'levels': list(self.levels.values), 'matrix': self.matrix.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, list]) -> 'DemandChain':
        try:
            levels = DemandLevelSet(tuple(data['levels']))
            return cls(np.asarray(data['matrix'], dtype=float), levels)
        except KeyError as e:
            raise InputError(f"Chain record is missing '{e.args[0]}'")


class SlidingWindowEstimator:
    """
    Maximum-likelihood transition estimate over the last T_w observations
    of one VM. Counts are maintained incrementally as the window slides.
    """

    def __init__(self, levels: DemandLevelSet, window_slots: int):
        if window_slots < 2:
            raise InputError(f"Sliding window needs at least 2 slots, got {window_slots}")
        self.levels = levels
        self.window_slots = window_slots
        size = levels.lambda_levels
        self.buffer: Deque[int] = deque()
        self.transition_counts = np.zeros((size, size), dtype=np.int64)
        # visits to each level as the source of a transition inside the window
        self.state_counts = np.zeros(size, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.buffer)

    def observe(self, level: int):
        """Append one observation, evicting history beyond the window"""
        self.levels.check_index(level)
        level = int(level)
        if len(self.buffer) == self.window_slots:
            oldest = self.buffer.popleft()
            self.transition_counts[oldest, self.buffer[0]] -= 1
            self.state_counts[oldest] -= 1
        if self.buffer:
            last = self.buffer[-1]
            self.transition_counts[last, level] += 1
            self.state_counts[last] += 1
        self.buffer.append(level)

    def estimate(self) -> DemandChain:
        """Current MLE chain; rows never visited fall back to uniform"""
        size = self.levels.lambda_levels
        matrix = np.full((size, size), 1.0 / size)
        visited = self.state_counts > 0
        matrix[visited] = self.transition_counts[visited] / self.state_counts[visited, None]
        return DemandChain(matrix, self.levels)

    def recount(self) -> Tuple[np.ndarray, np.ndarray]:
        """Rebuild counts from the ring buffer"""
        size = self.levels.lambda_levels
        transitions = np.zeros((size, size), dtype=np.int64)
        states = np.zeros(size, dtype=np.int64)
        history = list(self.buffer)
        for current, following in zip(history, history[1:]):
            transitions[current, following] += 1
            states[current] += 1
        return transitions, states

    def is_consistent(self) -> bool:
        transitions, states = self.recount()
        return (np.array_equal(transitions, self.transition_counts)
                and np.array_equal(states, self.state_counts))

    @property
    def last_level(self) -> Optional[int]:
        return self.buffer[-1] if self.buffer else None


@dataclass(frozen=True, eq=False)
class DemandTrace:
    """Raw CPU demand per (vm, slot) as a fraction of T_r"""
    demands: np.ndarray

    def __post_init__(self):
        demands = np.array(self.demands, dtype=float, copy=True)
        if demands.ndim != 2:
            raise InputError("A demand trace is a (num_vms, num_slots) array")
        if demands.shape[0] < 1 or demands.shape[1] < 1:
            raise InputError("A demand trace needs at least one VM and one slot")
        if not np.all(np.isfinite(demands)):
            raise InputError("Demand trace contains non-finite values")
        if np.any(demands < 0):
            vm, slot = np.argwhere(demands < 0)[0]
            raise InputError(f"Negative demand for vm {vm} at slot {slot}")
        demands.setflags(write=False)
        object.__setattr__(self, 'demands', demands)

    @property
    def num_vms(self) -> int:
        return self.demands.shape[0]

    @property
    def num_slots(self) -> int:
        return self.demands.shape[1]

    def slot(self, t: int) -> np.ndarray:
        return self.demands[:, t]

    def quantized(self, levels: DemandLevelSet) -> np.ndarray:
        """Level index per (vm, slot)"""
        return quantize_many(self.demands, levels)

    def scaled(self, factor: float) -> 'DemandTrace':
        if factor < 0:
            raise InputError(f"Demand scale must be non-negative, got {factor}")
        return DemandTrace(self.demands * factor)

    def __eq__(self, other):
        if isinstance(other, DemandTrace):
            return np.array_equal(self.demands, other.demands)
        return NotImplemented


@dataclass(frozen=True)
class FeatureState:
    """Expected demand level of a VM paired with its current PM"""
    expected_level_index: int
    location: int

    def as_pair(self) -> Tuple[int, int]:
        return self.expected_level_index, self.location


@dataclass(frozen=True)
class StationaryResult:
    distribution: np.ndarray
    converged: bool
    iterations: int
    residual: float = field(default=0.0)


def quantize(raw: float, levels: DemandLevelSet) -> int:
    """Smallest level index k with r_k >= raw; clamps above the top level"""
    if raw < 0:
        raise InputError(f"Demand must be non-negative, got {raw}")
    index = int(np.searchsorted(levels.array, raw - QUANTIZE_EPS, side='left'))
    return min(index, levels.lambda_levels - 1)


def quantize_many(raw: np.ndarray, levels: DemandLevelSet) -> np.ndarray:
    """Vectorised quantize over an array of demands"""
    raw = np.asarray(raw, dtype=float)
    if np.any(raw < 0):
        raise InputError("Demand must be non-negative")
    index = np.searchsorted(levels.array, raw - QUANTIZE_EPS, side='left')
    return np.minimum(index, levels.lambda_levels - 1).astype(np.int64)


def observe_and_estimate(estimator: SlidingWindowEstimator, new_level: int) -> DemandChain:
    estimator.observe(new_level)
    return estimator.estimate()


def default_max_iter(lambda_levels: int) -> int:
    return 10 * lambda_levels * 1000


def stationary_distribution(chain: DemandChain, start: Optional[Sequence[float]] = None,
                            tol: float = 1e-9,
                            max_iter: Optional[int] = None) -> StationaryResult:
    """
    Power iteration on the lazy chain (I + P) / 2 from `start` (the
    indicator of the current level in the controller). The lazy chain has
    the same fixed point and converges on periodic P too. Stops once
    ||pi - pi P||_inf <= tol and returns that pi; otherwise the last
    iterate, flagged non-converged.
    """
    if not isinstance(chain, DemandChain):
        chain = DemandChain(np.asarray(chain), DemandLevelSet.uniform(len(chain)))
    size = chain.size
    if start is None:
        pi = np.full(size, 1.0 / size)
    else:
        pi = np.asarray(start, dtype=float)
        if pi.shape != (size,) or np.any(pi < 0) or abs(pi.sum() - 1.0) > ROW_SUM_TOLERANCE:
            raise InputError(f"Start vector is not a distribution over {size} levels")
    max_iter = max_iter if max_iter is not None else default_max_iter(size)

    matrix = chain.matrix
    residual = float('inf')
    for iteration in range(max_iter):
        following = pi @ matrix
        residual = float(np.max(np.abs(following - pi)))
        if residual <= tol:
            return StationaryResult(pi, True, iteration, residual)
        pi = 0.5 * (pi + following)
    logger.debug(f"Stationary distribution did not reach tol {tol} in {max_iter} iterations")
    return StationaryResult(pi, False, max_iter, residual)


def expected_demand(pi_inf: np.ndarray, levels: DemandLevelSet) -> float:
    return float(np.dot(levels.array, pi_inf))


def feature_state(pi_inf: Sequence[float], levels: DemandLevelSet, location: int) -> FeatureState:
    """Expected demand under pi_inf rounded up to a level, plus location"""
    pi = np.asarray(pi_inf, dtype=float)
    if pi.shape != (levels.lambda_levels,) or np.any(pi < -ROW_SUM_TOLERANCE) \
            or abs(pi.sum() - 1.0) > 1e-6:
        raise InputError("feature_state needs a distribution over the level set")
    expected = max(expected_demand(pi, levels), 0.0)
    return FeatureState(quantize(expected, levels), int(location))


def indicator(level: int, size: int) -> np.ndarray:
    start = np.zeros(size)
    start[level] = 1.0
    return start


def sample_next(row: np.ndarray, u: float) -> int:
    """Inverse-CDF draw from one chain row"""
    index = int(np.searchsorted(np.cumsum(row), u, side='right'))
    return min(index, len(row) - 1)


def synthesize_trace(ground_truth: Sequence[DemandChain],
                     regime_schedule: Sequence[Tuple[int, Sequence[DemandChain]]],
                     num_slots: int, seed: int,
                     start_levels: Optional[Sequence[int]] = None) -> DemandTrace:
    """
    Sample one level path per VM from its active chain. At each scheduled
    slot the chains are swapped for the replacement list; the transition
    that produces slot t uses the chains active at t.
    """
    if not ground_truth:
        raise InputError("synthesize_trace needs at least one chain")
    if num_slots < 1:
        raise InputError(f"num_slots must be positive, got {num_slots}")
    levels = ground_truth[0].levels
    num_vms = len(ground_truth)
    schedule_slots = [slot for slot, _ in regime_schedule]
    if any(b <= a for a, b in zip(schedule_slots, schedule_slots[1:])):
        raise InputError("Regime schedule slots must be strictly increasing")
    for slot, replacement in regime_schedule:
        if len(replacement) != num_vms:
            raise InputError(f"Regime at slot {slot} has {len(replacement)} chains, expected {num_vms}")

    rng = np.random.default_rng(seed)
    if start_levels is None:
        current = rng.integers(0, levels.lambda_levels, size=num_vms)
    else:
        if len(start_levels) != num_vms:
            raise InputError("start_levels must give one level per VM")
        for level in start_levels:
            levels.check_index(level)
        current = np.asarray(start_levels, dtype=np.int64)

    schedule = dict(regime_schedule)
    active: List[DemandChain] = list(ground_truth)
    path = np.zeros((num_vms, num_slots), dtype=np.int64)
    path[:, 0] = current
    for t in range(1, num_slots):
        if t in schedule:
            active = list(schedule[t])
        draws = rng.random(num_vms)
        for vm in range(num_vms):
            current[vm] = sample_next(active[vm].row(current[vm]), draws[vm])
        path[:, t] = current
    return DemandTrace(levels.array[path])


def random_chain(levels: DemandLevelSet, rng: np.random.Generator, home_level: int,
                 stickiness: float = 0.8, concentration: float = 20.0,
                 max_level: Optional[int] = None) -> DemandChain:
    """
    A mean-reverting chain around `home_level`: each row keeps `stickiness`
    mass near the current level and drifts the rest towards home, with
    Dirichlet noise so chains differ between VMs. No row puts mass above
    `max_level`.
    """
    size = levels.lambda_levels
    ceiling = size - 1 if max_level is None else min(max_level, size - 1)
    support = np.arange(ceiling + 1)
    matrix = np.zeros((size, size))
    for j in range(size):
        stay = np.exp(-np.abs(support - j) * 2.0)
        drift = np.exp(-np.abs(support - home_level) * 1.5)
        weights = stickiness * stay / stay.sum() + (1 - stickiness) * drift / drift.sum()
        matrix[j, :ceiling + 1] = rng.dirichlet(weights * concentration + 1e-3)
    return DemandChain(matrix, levels)


def synthesize_quasi_static(levels: DemandLevelSet, num_vms: int, num_slots: int, seed: int,
                            regime_period: int, max_level: Optional[int] = None,
                            stickiness: float = 0.8) -> Tuple[DemandTrace, List[DemandChain], List[Tuple[int, List[DemandChain]]]]:
    """
    Quasi-static workload: every `regime_period` slots each VM draws a new
    home level and a fresh chain. Returns the trace, the initial chains and
    the regime schedule.
    """
    rng = np.random.default_rng(seed)
    top = levels.lambda_levels - 1 if max_level is None else min(max_level, levels.lambda_levels - 1)

    def draw_regime() -> List[DemandChain]:
        homes = rng.integers(0, top + 1, size=num_vms)
        return [random_chain(levels, rng, int(home), stickiness, max_level=top) for home in homes]

    initial = draw_regime()
    schedule = []
    if regime_period > 0:
        for slot in range(regime_period, num_slots, regime_period):
            schedule.append((slot, draw_regime()))
    start = [int(rng.integers(0, top + 1)) for _ in range(num_vms)]
    trace = synthesize_trace(initial, schedule, num_slots, int(rng.integers(0, 2**31 - 1)), start)
    logger.debug(f"Synthesized {num_vms}x{num_slots} trace with {len(schedule)} regime switches")
    return trace, initial, schedule
