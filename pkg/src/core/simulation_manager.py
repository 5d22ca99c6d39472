"""
Simulation Manager for the MadVM simulator
Orchestrates the slotted simulation: trace, estimators, controller and metrics
"""

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from tqdm import tqdm

from adapters.trace_adapter import load_trace
from core.analyzer import BoundFixture, run_bound_check
from core.baselines import (PatternConsolidatorController, PredictiveScalerController, StaticFirstFitController,
                            static_first_fit)
from core.cluster import (MigrationPlan, Placement, SystemState, active_pms, check_plan, pm_loads, pm_occupancy,
                          power_vector)
from core.config_manager import SimConfig
from core.controller import Controller, SlotContext
from core.demand import (DemandChain, DemandTrace, SlidingWindowEstimator, expected_demand, indicator,
                         stationary_distribution, synthesize_quasi_static)
from core.exact_mdp import ExactOracleController, Policy, UtilityVector, oracle_report, solve
from core.madvm import MadVMController
from core.metrics import MetricsReport, comparison_table
from utils.errors import ConfigError, ConstraintError, InputError, InvariantViolation


def build_controller(config: SimConfig, name: Optional[str] = None) -> Controller:
    name = name or config.controller
    spec, levels = config.cluster, config.level_set()
    if name == 'madvm':
        options = config.madvm
        return MadVMController(spec, levels, mode=options.mode, tol=options.tol, max_iter=options.max_iter,
                               warm_start=options.warm_start, ranking=options.ranking,
                               gain_epsilon=options.gain_epsilon, max_workers=config.performance.max_workers,
                               debug_dump=options.debug_dump)
    if name == 'static_first_fit':
        return StaticFirstFitController(spec, levels)
    if name == 'predictive_scaler':
        return PredictiveScalerController(spec, levels, config.baselines.prediction_window)
    if name == 'pattern_consolidator':
        return PatternConsolidatorController(spec, levels, config.baselines.repack_period)
    if name == 'exact_oracle':
        oracle = config.oracle
        return ExactOracleController(spec, levels, oracle.resolve_period, oracle.tol, oracle.max_iter,
                                     oracle.max_states)
    raise ConfigError(f"Unknown controller '{name}'")


def estimate_chains(trace: DemandTrace, config: SimConfig,
                    num_slots: Optional[int] = None) -> Tuple[List[DemandChain], List[SlidingWindowEstimator]]:
    """Windowed MLE chains after replaying the first num_slots slots"""
    levels = config.level_set()
    path = trace.quantized(levels)
    num_slots = trace.num_slots if num_slots is None else min(num_slots, trace.num_slots)
    estimators = [SlidingWindowEstimator(levels, config.window_slots) for _ in range(trace.num_vms)]
    for vm, estimator in enumerate(estimators):
        for level in path[vm, :max(num_slots, 1)]:
            estimator.observe(int(level))
    return [estimator.estimate() for estimator in estimators], estimators


class SimulationManager:
    def __init__(self, config: SimConfig, trace: Optional[DemandTrace] = None):
        self.config = config
        self.spec = config.cluster
        self.levels = config.level_set()
        self._trace = trace

    @property
    def progress(self) -> bool:
        return self.config.logging.progress

    def load_trace(self) -> DemandTrace:
        """Trace from file or synthesis, scaled by trace.demand_scale"""
        if self._trace is None:
            source = self.config.trace
            if source.path:
                trace = load_trace(source.path)
            else:
                synthesis = source.synthesis
                seed = synthesis.seed if synthesis.seed is not None else self.config.seed
                trace, _, _ = synthesize_quasi_static(self.levels, self.spec.num_vms, synthesis.num_slots, seed,
                                                      synthesis.regime_period, synthesis.max_level,
                                                      synthesis.stickiness)
            if source.demand_scale != 1.0:
                trace = trace.scaled(source.demand_scale)
            self._trace = trace
        if self._trace.num_vms != self.spec.num_vms:
            raise InputError(f"Trace has {self._trace.num_vms} VMs, cluster has {self.spec.num_vms}")
        return self._trace

    def expected_demands(self, trace: DemandTrace) -> np.ndarray:
        """Stationary expected demand per VM from the profiling slots"""
        chains, estimators = estimate_chains(trace, self.config, self.config.profile_slots)
        expected = []
        for chain, estimator in zip(chains, estimators):
            start = indicator(estimator.last_level, self.levels.lambda_levels)
            pi = stationary_distribution(chain, start).distribution
            expected.append(expected_demand(pi, self.levels))
        return np.array(expected)

    def initial_placement(self, controller: Controller, trace: DemandTrace) -> Placement:
        expected = self.expected_demands(trace)
        placement = controller.initial_placement(expected)
        if placement is None:
            placement = static_first_fit(expected, self.spec)
        logger.debug(f"Initial placement {list(placement)}")
        return tuple(placement)

    def run(self, controller_name: Optional[str] = None) -> MetricsReport:
        """Run the slot loop once and return the metrics"""
        trace = self.load_trace()
        controller = build_controller(self.config, controller_name)
        report = MetricsReport(controller.name, self.spec.num_vms, self.spec.num_pms,
                               self.spec.lambda_weight, warm_up_slots=self.config.window_slots)
        path = trace.quantized(self.levels)
        estimators = [SlidingWindowEstimator(self.levels, self.config.window_slots) for _ in range(trace.num_vms)]
        logger.info(f"Simulating {controller.name}: {trace.num_vms} VMs, {self.spec.num_pms} PMs, "
                    f"{trace.num_slots} slots, lambda={self.spec.lambda_weight:g}")

        try:
            placement = self.initial_placement(controller, trace)
            for t in tqdm(range(trace.num_slots), desc=controller.name, disable=not self.progress):
                for vm, estimator in enumerate(estimators):
                    estimator.observe(int(path[vm, t]))
                state = SystemState(tuple(path[:, t]), placement)
                context = SlotContext(t, state, estimators, trace.demands[:, :t + 1], self.levels, self.spec)
                plan = controller.plan(context)
                migrations = self._checked(plan, placement, t, controller.name)

                raw = trace.slot(t)
                loads = pm_loads(raw, placement, self.spec)
                occupancy = pm_occupancy(placement, self.spec)
                power = float(power_vector(loads, occupancy, self.spec).sum())
                shortage = float(np.maximum(loads - 1.0, 0.0).sum())
                report.record(t, power, shortage, migrations, active_pms(placement, self.spec))
                placement = plan.targets
        finally:
            controller.close()

        aggregates = report.aggregates
        logger.info(f"{controller.name} done: avg_power={aggregates['avg_power']:.2f} W, "
                    f"avg_shortage_per_vm={aggregates['avg_shortage_per_vm']:.6f}, "
                    f"avg_migrations={aggregates['avg_migrations']:.3f}")
        return report

    def _checked(self, plan: MigrationPlan, placement: Placement, slot: int, name: str) -> int:
        try:
            return check_plan(plan, placement, self.spec)
        except (ConstraintError, InputError) as e:
            raise InvariantViolation(f"Controller {name} emitted an invalid plan at slot {slot}: {e}")

    def save_report(self, report: MetricsReport, name: Optional[str] = None) -> Dict[str, str]:
        return report.save(self.config.output.directory, name or self.config.output.report_name)

    def learned_chains(self) -> List[DemandChain]:
        """Chains learned over the last window of the trace"""
        chains, _ = estimate_chains(self.load_trace(), self.config)
        return chains

    def run_oracle(self, chains: Optional[Sequence[DemandChain]] = None) -> Tuple[UtilityVector, Policy, Dict]:
        """Exact solution for the given chains, or for the learned ones"""
        if chains is None:
            chains = self.learned_chains()
        oracle = self.config.oracle
        reference = None
        if oracle.reference_levels is not None and oracle.reference_placement is not None:
            reference = SystemState(tuple(oracle.reference_levels), tuple(oracle.reference_placement))
            reference.validate(self.levels, self.spec)
        utility, policy = solve(chains, self.spec, self.levels, reference, oracle.tol, oracle.max_iter,
                                oracle.max_states)
        return utility, policy, oracle_report(utility, policy)

    def run_bound_check(self) -> BoundFixture:
        trace = self.load_trace()
        chains, _ = estimate_chains(trace, self.config)
        placement = static_first_fit(self.expected_demands(trace), self.spec)
        state = SystemState(tuple(trace.quantized(self.levels)[:, -1]), placement)
        return run_bound_check(chains, self.spec, self.levels, state, self.config.analysis.n_max)


def run_simulation(config: SimConfig, trace: Optional[DemandTrace] = None) -> MetricsReport:
    return SimulationManager(config, trace).run()


def _base_trace(config: SimConfig) -> DemandTrace:
    return SimulationManager(config).load_trace()


def sweep_lambda(config: SimConfig, lambdas: Sequence[float],
                 trace: Optional[DemandTrace] = None) -> List[MetricsReport]:
    """One run per lambda on an identical trace and seed"""
    if not lambdas:
        raise InputError("sweep_lambda needs at least one lambda")
    trace = trace or _base_trace(config)
    reports = []
    for weight in lambdas:
        logger.info(f"Sweep point lambda={weight:g}")
        reports.append(run_simulation(config.with_updates({'cluster': {'lambda_weight': float(weight)}}), trace))
    return reports


def sweep_demand_scale(config: SimConfig, factors: Sequence[float],
                       trace: Optional[DemandTrace] = None) -> List[MetricsReport]:
    """Replays the same trace at several demand multiples"""
    if not factors:
        raise InputError("sweep_demand_scale needs at least one factor")
    base = trace or _base_trace(config.with_updates({'trace': {'demand_scale': 1.0}}))
    reports = []
    for factor in factors:
        logger.info(f"Sweep point demand_scale={factor:g}")
        reports.append(run_simulation(config, base.scaled(factor)))
    return reports


def sweep_num_pms(config: SimConfig, pm_counts: Sequence[int],
                  trace: Optional[DemandTrace] = None) -> List[MetricsReport]:
    """Shrinks or grows the PM pool under the same trace"""
    if not pm_counts:
        raise InputError("sweep_num_pms needs at least one PM count")
    trace = trace or _base_trace(config)
    reports = []
    for count in pm_counts:
        logger.info(f"Sweep point num_pms={count}")
        reports.append(run_simulation(config.with_updates({'cluster': {'num_pms': int(count)}}), trace))
    return reports


def compare_controllers(config: SimConfig, controllers: Sequence[str],
                        trace: Optional[DemandTrace] = None) -> Tuple[Dict[str, MetricsReport], pd.DataFrame]:
    """Same trace and seed under every controller"""
    if not controllers:
        raise InputError("compare_controllers needs at least one controller")
    trace = trace or _base_trace(config)
    reports = {}
    for name in controllers:
        reports[name] = SimulationManager(config, trace).run(name)
    return reports, comparison_table(reports)


def write_sweep(reports: Sequence[MetricsReport], key: str, values: Sequence[float], path: str):
    """One JSON file pairing sweep values with their aggregates"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    records = [{key: value, 'aggregates': report.aggregates, 'post_warm_up': report.post_warm_up}
               for value, report in zip(values, reports)]
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(records, f, indent=2, sort_keys=True)
    logger.info(f"Sweep written to {path}")
