"""
Analysis tools for the MadVM simulator
Numerical checks of per-VM value iteration convergence, the approximation
error bound against the exact solver, and windowed transition heatmaps of
demand traces.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from core.cluster import ClusterSpec, SystemState
from core.demand import (DemandChain, DemandLevelSet, DemandTrace, FeatureState, SlidingWindowEstimator,
                         feature_state, stationary_distribution)
from core.exact_mdp import MAX_EVALUATION_STATES, value_iteration
from core.madvm import PerVMProblem, StackedIterationMap, WeightVector, build_key_states
from mappers.state_mapper import StateMapper
from utils.errors import BudgetExceededError, InputError

DEFAULT_RIDGE = 1e-12
# norms below this fraction of ||V*|| are rounding noise
ZERO_NORM = 1e-9
DEFAULT_EPSILON = 0.05


@dataclass(frozen=True, eq=False)
class MappingMatrix:
    """
    M maps a weight vector onto every joint state (V = M W); M_dag picks,
    for every weight coordinate (vm, level, pm), the matching key state.
    """
    m: np.ndarray
    m_dag: np.ndarray
    mapper: StateMapper
    feature_states: tuple

    @property
    def a(self) -> float:
        return float(np.sqrt(self.mapper.num_vms * self.mapper.size))


def build_mapping(spec: ClusterSpec, levels: DemandLevelSet,
                  feature_states: Optional[Sequence[FeatureState]] = None,
                  max_states: int = MAX_EVALUATION_STATES) -> MappingMatrix:
    mapper = StateMapper(spec.num_vms, spec.num_pms, levels.lambda_levels)
    if mapper.size > max_states:
        raise BudgetExceededError(f"Mapping matrix needs {mapper.size} states, budget is {max_states}")
    if feature_states is None:
        feature_states = [FeatureState(0, 0)] * spec.num_vms

    m_dag = np.zeros((mapper.num_features, mapper.size))
    for vm in range(spec.num_vms):
        key_states = build_key_states(vm, feature_states, levels, spec)
        for level in range(levels.lambda_levels):
            for pm in range(spec.num_pms):
                m_dag[mapper.feature_index(vm, level, pm), mapper.pack(key_states.state(level, pm))] = 1.0
    return MappingMatrix(mapper.feature_matrix(), m_dag, mapper, tuple(feature_states))


@dataclass(frozen=True)
class BoundReport:
    error: float
    lower: float
    upper: Optional[float]
    n: Optional[int]
    beta_contraction: Optional[float]
    c: Optional[float]
    certified: bool
    lower_holds: bool
    upper_holds: Optional[bool]

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


def least_squares_weights(mapping: MappingMatrix, v_star: np.ndarray, ridge: float = DEFAULT_RIDGE) -> np.ndarray:
    """X* = argmin ||M X - V*||, ridge-stabilised minimum-norm solution"""
    m = mapping.m
    if ridge > 0:
        m = np.vstack([m, np.sqrt(ridge) * np.eye(m.shape[1])])
        v_star = np.concatenate([v_star, np.zeros(mapping.m.shape[1])])
    solution, *_ = np.linalg.lstsq(m, v_star, rcond=None)
    return solution


def bound_check(v_star: np.ndarray, weights: WeightVector, mapping: MappingMatrix,
                iteration_map: StackedIterationMap, n_max: int = 50, ridge: float = DEFAULT_RIDGE,
                slack: float = 1e-6) -> BoundReport:
    """
    Error of the linear approximation against the exact relative values,
    with the least-squares lower bound and the contraction-based upper
    bound. (n, beta, c) are measured along the iteration trajectory; the
    tightest certified n wins.
    """
    v_star = np.asarray(v_star, dtype=float)
    zero = ZERO_NORM * max(1.0, float(np.linalg.norm(v_star)))

    def norm(vector: np.ndarray) -> float:
        value = float(np.linalg.norm(vector))
        return value if value > zero else 0.0

    w = weights.vector
    error = float(np.linalg.norm(mapping.m @ w - v_star))
    x_star = least_squares_weights(mapping, v_star, ridge)
    lower = float(np.linalg.norm(mapping.m @ x_star - v_star))
    selected = mapping.m_dag @ v_star
    gap = norm(x_star - selected)
    distance = norm(w - x_star)

    best = None
    fw, fx = w.copy(), x_star.copy()
    c = 0.0
    previous = gap
    for n in range(1, n_max + 1):
        fw, fx = iteration_map(fw), iteration_map(fx)
        current = norm(fx - selected)
        if previous > 0:
            c = max(c, current / previous)
        elif current > 0:
            c = float('inf')
        previous = current
        beta = float(np.linalg.norm(fw - fx)) / distance if distance > 0 else 0.0
        if beta < 1.0 and c < 1.0:
            upper = mapping.a * (c ** n + 1.0) / (1.0 - beta) * gap + lower
            if best is None or upper < best[0]:
                best = (upper, n, beta, c)

    lower_holds = lower <= error + slack
    if best is None:
        logger.warning(f"No contraction constants with beta < 1 found within n_max={n_max}; bound not certified")
        return BoundReport(error, lower, None, None, None, None, False, lower_holds, None)
    upper, n, beta, c_n = best
    return BoundReport(error, lower, upper, n, beta, c_n, True, lower_holds, error <= upper + slack)


@dataclass(frozen=True, eq=False)
class BoundFixture:
    report: BoundReport
    v_star: np.ndarray
    weights: WeightVector
    mapping: MappingMatrix
    beta_exact: float


def run_bound_check(chains: Sequence[DemandChain], spec: ClusterSpec, levels: DemandLevelSet,
                    state: Optional[SystemState] = None, n_max: int = 50, exact_tol: float = 1e-9,
                    per_vm_tol: float = 1e-9, max_iter: int = 10_000) -> BoundFixture:
    """Solve one instance both ways and compare them"""
    if state is None:
        state = SystemState((0,) * spec.num_vms, (0,) * spec.num_vms)
    features = []
    for vm, chain in enumerate(chains):
        pi = stationary_distribution(chain).distribution
        features.append(feature_state(pi, levels, state.placement[vm]))
    mapping = build_mapping(spec, levels, features)
    reference = SystemState(tuple(f.expected_level_index for f in features), tuple(f.location for f in features))

    exact = value_iteration(chains, spec, levels, reference=reference, tol=exact_tol, max_iter=max_iter)
    problems = [PerVMProblem(build_key_states(vm, features, levels, spec), chain, levels, spec)
                for vm, chain in enumerate(chains)]
    utilities = [problem.solve(per_vm_tol, max_iter) for problem in problems]
    weights = WeightVector.from_utilities(utilities)
    report = bound_check(exact.values, weights, mapping, StackedIterationMap(problems), n_max)
    logger.info(f"Bound check: error={report.error:.6g} lower={report.lower:.6g} upper={report.upper}")
    return BoundFixture(report, exact.values, weights, mapping, exact.beta)


@dataclass(frozen=True)
class DecayReport:
    differences: tuple
    ratio: float
    contracting: bool
    flagged: bool

    def reached_below(self, threshold: float) -> Optional[int]:
        """1-based iteration at which the difference first drops below threshold"""
        for iteration, diff in enumerate(self.differences, start=1):
            if diff < threshold:
                return iteration
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {'differences': list(self.differences), 'ratio': self.ratio,
                'contracting': self.contracting, 'flagged': self.flagged}


def convergence_diagnostics(differences: Sequence[float]) -> DecayReport:
    """Geometric decay fit over successive max-norm differences"""
    diffs = np.asarray(differences, dtype=float)
    if diffs.size < 3:
        raise InputError(f"Need at least 3 recorded iterations, got {diffs.size}")
    positive = np.flatnonzero(diffs > 0)
    if positive.size == 0:
        return DecayReport(tuple(diffs.tolist()), 0.0, True, False)
    # a run that hits exactly zero has stopped decaying geometrically
    head = diffs[:positive[-1] + 1]
    if np.any(head <= 0) or head.size < 2:
        ratio = 0.0
    else:
        slope = np.polyfit(np.arange(head.size), np.log(head), 1)[0]
        ratio = float(np.exp(slope))
    contracting = ratio < 1.0 and diffs[-1] <= diffs[0]
    return DecayReport(tuple(diffs.tolist()), ratio, contracting, not contracting)


@dataclass(frozen=True, eq=False)
class HeatmapReport:
    vm: int
    window: int
    stride: int
    offsets: np.ndarray
    matrices: np.ndarray
    score: float
    stability: np.ndarray
    epsilon: float = DEFAULT_EPSILON

    def to_frame(self) -> pd.DataFrame:
        size = self.matrices.shape[1]
        rows = [{'offset': int(offset), 'from_level': i, 'to_level': j, 'probability': float(matrix[i, j])}
                for offset, matrix in zip(self.offsets, self.matrices)
                for i in range(size) for j in range(size)]
        return pd.DataFrame(rows, columns=['offset', 'from_level', 'to_level', 'probability'])

    def to_csv(self, path: str):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format='%.9f')

    def summary(self) -> Dict[str, Any]:
        return {'vm': self.vm, 'window': self.window, 'stride': self.stride,
                'num_windows': int(len(self.offsets)), 'quasi_static_score': self.score,
                'min_stability': float(self.stability.min()),
                'least_stable_offset': int(self.offsets[int(np.argmin(self.stability))])}


def segment_runs(series: np.ndarray, epsilon: float) -> np.ndarray:
    """Run starts; a value joins the current run while within epsilon of the run mean"""
    starts = np.zeros(series.size, dtype=bool)
    if series.size == 0:
        return starts
    starts[0] = True
    total, count = float(series[0]), 1
    for k in range(1, series.size):
        if abs(series[k] - total / count) <= epsilon:
            total += float(series[k])
            count += 1
        else:
            starts[k] = True
            total, count = float(series[k]), 1
    return starts


def longest_run(starts: np.ndarray) -> int:
    positions = np.flatnonzero(starts).tolist() + [starts.size]
    return max(b - a for a, b in zip(positions, positions[1:]))


def transition_heatmap(trace: DemandTrace, levels: DemandLevelSet, window: int, vm: int = 0,
                       stride: int = 1, epsilon: float = DEFAULT_EPSILON) -> HeatmapReport:
    """
    Windowed MLE transition matrix at every stride offset, with a
    quasi-static score (mean longest-run fraction over entries) and a
    per-offset stability series (share of entries continuing their run).
    """
    if not 0 <= vm < trace.num_vms:
        raise InputError(f"Trace has no VM {vm}")
    if stride < 1:
        raise InputError(f"Stride must be positive, got {stride}")
    if trace.num_slots <= window:
        raise InputError(f"Trace of {trace.num_slots} slots is too short for window {window}")

    path = trace.quantized(levels)[vm]
    estimator = SlidingWindowEstimator(levels, window)
    offsets, matrices = [], []
    for slot, level in enumerate(path):
        estimator.observe(int(level))
        offset = slot - window + 1
        if offset >= 0 and offset % stride == 0:
            offsets.append(offset)
            matrices.append(estimator.estimate().matrix)
    stack = np.array(matrices)

    size = levels.lambda_levels
    series = stack.reshape(len(offsets), size * size).T
    starts = np.array([segment_runs(entry, epsilon) for entry in series])
    score = float(np.mean([longest_run(entry) / len(offsets) for entry in starts]))
    stability = 1.0 - starts.mean(axis=0)
    stability[0] = 1.0
    return HeatmapReport(vm, window, stride, np.array(offsets), stack, score, stability, epsilon)


class TraceAnalyzer:
    """Heatmap analysis over the VMs of one trace, saved and summarised like a run report"""

    def __init__(self, trace: DemandTrace, levels: DemandLevelSet, window: int, stride: int = 1,
                 epsilon: float = DEFAULT_EPSILON):
        self.trace = trace
        self.levels = levels
        self.window = window
        self.stride = stride
        self.epsilon = epsilon
        self.reports: List[HeatmapReport] = []
        self.analysis_results: Dict[str, Any] = {}

    def analyze(self, vms: Optional[Sequence[int]] = None) -> Dict[str, Any]:
        vms = list(range(self.trace.num_vms)) if vms is None else list(vms)
        logger.info(f"Analyzing transition stability for {len(vms)} VMs, window {self.window}")
        self.reports = [transition_heatmap(self.trace, self.levels, self.window, vm, self.stride, self.epsilon)
                        for vm in vms]
        scores = [report.score for report in self.reports]
        self.analysis_results = {
            'window': self.window,
            'stride': self.stride,
            'epsilon': self.epsilon,
            'num_slots': self.trace.num_slots,
            'mean_quasi_static_score': float(np.mean(scores)),
            'vms': [report.summary() for report in self.reports],
        }
        return self.analysis_results

    def save(self, output_dir: str) -> Path:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        for report in self.reports:
            report.to_csv(str(out / f"heatmap_vm{report.vm}.csv"))
        path = out / 'trace_analysis.json'
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.analysis_results, f, indent=2, sort_keys=True)
        logger.info(f"Analysis saved to {path}")
        return path

    def display_summary(self):
        results = self.analysis_results
        print("\n" + "=" * 60)
        print("TRACE TRANSITION ANALYSIS")
        print("=" * 60)
        print(f"  Slots: {results.get('num_slots', 0):,}  Window: {results.get('window')}  "
              f"Stride: {results.get('stride')}")
        print(f"  Mean quasi-static score: {results.get('mean_quasi_static_score', 0.0):.3f}")
        for vm in results.get('vms', []):
            print(f"  VM {vm['vm']}: score {vm['quasi_static_score']:.3f}, "
                  f"least stable at offset {vm['least_stable_offset']}")
        print("=" * 60 + "\n")
