#!/usr/bin/env python3
"""
MadVM energy-aware VM placement simulator
Main entry point for simulations, oracles and analyses
"""

import json
import sys
from pathlib import Path
from typing import List, Optional

import click
from loguru import logger

# Add src to path for imports
sys.path.append(str(Path(__file__).parent))

from adapters.trace_adapter import TraceAdapter, load_trace, write_trace
from core.config_manager import CONTROLLERS, ConfigManager, SimConfig
from core.simulation_manager import (SimulationManager, compare_controllers, sweep_demand_scale, sweep_lambda,
                                     sweep_num_pms, write_sweep)
from utils.errors import InputError, exit_code_for
from utils.logger import setup_logger
from utils.validator import ConfigValidator

DEFAULT_CONFIG = 'config/simulation_config.json'


def _load(config_path: str) -> SimConfig:
    config = ConfigManager(config_path).load_config()
    setup_logger(config.logging.model_dump())
    return config


def _validated(config_path: str) -> SimConfig:
    config = _load(config_path)
    validator = ConfigValidator(config)
    if not validator.validate():
        raise InputError("Configuration validation failed: " + '; '.join(validator.errors))
    return config


def _fail(error: Exception):
    logger.error(f"{type(error).__name__}: {error}")
    print(f"Error: {error}", file=sys.stderr)
    sys.exit(exit_code_for(error))


def _parse_list(raw: str, cast=float) -> List:
    try:
        values = [cast(item) for item in raw.split(',') if item.strip()]
    except ValueError as e:
        raise InputError(f"Cannot parse list '{raw}': {e}")
    if not values:
        raise InputError(f"Empty list '{raw}'")
    return values


def _write_json(data, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True)


@click.group()
@click.version_option(version="1.0.0")
def cli():
    """MadVM energy-aware VM placement simulator"""
    pass


@cli.command()
@click.option('--config', '-c', default=DEFAULT_CONFIG, help='Path to configuration file')
@click.option('--controller', type=click.Choice(CONTROLLERS), help='Override the configured controller')
def simulate(config: str, controller: str):
    """Run one simulation and write the slot CSV and summary JSON"""
    try:
        sim_config = _validated(config)
        if controller:
            sim_config = sim_config.with_updates({'controller': controller})
        manager = SimulationManager(sim_config)
        report = manager.run()
        manager.save_report(report)
        report.show_summary()
    except Exception as e:
        _fail(e)


@cli.command(name='gen-trace')
@click.option('--config', '-c', default=DEFAULT_CONFIG, help='Path to configuration file')
@click.option('--out', '-o', required=True, help='Destination CSV')
def gen_trace(config: str, out: str):
    """Synthesize a quasi-static trace from the configured synthesis block"""
    try:
        sim_config = _load(config)
        if sim_config.trace.path:
            raise InputError("gen-trace needs a 'synthesis' trace block, not a trace path")
        trace = SimulationManager(sim_config).load_trace()
        write_trace(trace, out)
    except Exception as e:
        _fail(e)


@cli.command()
@click.option('--trace', '-t', 'trace_path', required=True, help='Trace CSV')
@click.option('--window', '-w', required=True, type=int, help='Sliding window in slots')
@click.option('--config', '-c', default=None, help='Optional configuration for levels and logging')
@click.option('--vm', 'vms', multiple=True, type=int, help='VMs to analyze (default: all)')
@click.option('--stride', default=None, type=int, help='Offset between windows')
@click.option('--out-dir', default=None, help='Where heatmap CSVs and the summary go')
def analyze(trace_path: str, window: int, config: str, vms, stride: int, out_dir: str):
    """Windowed transition heatmaps and quasi-static scores for a trace"""
    try:
        from core.analyzer import TraceAnalyzer
        sim_config = _load(config) if config else SimConfig()
        if not config:
            setup_logger({'level': sim_config.logging.level, 'file': None})
        trace = load_trace(trace_path)
        analyzer = TraceAnalyzer(trace, sim_config.level_set(), window, stride or sim_config.analysis.stride,
                                 sim_config.analysis.epsilon)
        analyzer.analyze(list(vms) if vms else None)
        analyzer.save(out_dir or sim_config.output.directory)
        analyzer.display_summary()
    except Exception as e:
        _fail(e)


@cli.command()
@click.option('--config', '-c', default=DEFAULT_CONFIG, help='Path to configuration file')
@click.option('--chains', 'chains_path', default=None, help='Chain JSON to solve instead of learning from the trace')
def oracle(config: str, chains_path: Optional[str]):
    """Solve the exact MDP for the learned chains (small instances only)"""
    try:
        sim_config = _validated(config)
        manager = SimulationManager(sim_config)
        chains = TraceAdapter(chains_path).load_chains() if chains_path else manager.learned_chains()
        utility, policy, report = manager.run_oracle(chains)
        out_dir = Path(sim_config.output.directory)
        TraceAdapter(str(out_dir / 'chains.json')).write_chains(chains)
        path = out_dir / 'oracle.json'
        _write_json(report, path)
        print(f"beta={utility.beta:.6f} converged={utility.converged} iterations={utility.iterations}")
        print(f"Oracle written to {path}")
    except Exception as e:
        _fail(e)


@cli.command(name='bound-check')
@click.option('--config', '-c', default=DEFAULT_CONFIG, help='Path to configuration file')
def bound_check(config: str):
    """Compare the linear approximation with the exact relative values"""
    try:
        sim_config = _validated(config)
        fixture = SimulationManager(sim_config).run_bound_check()
        path = Path(sim_config.output.directory) / 'bound_report.json'
        _write_json(fixture.report.to_dict(), path)
        report = fixture.report
        print(f"error={report.error:.6g} lower={report.lower:.6g} upper={report.upper} "
              f"certified={report.certified}")
        print(f"Bound report written to {path}")
    except Exception as e:
        _fail(e)


@cli.command()
@click.option('--config', '-c', default=DEFAULT_CONFIG, help='Path to configuration file')
@click.option('--lambdas', help='Comma-separated shortage weights')
@click.option('--scales', help='Comma-separated demand multipliers')
@click.option('--pm-counts', help='Comma-separated PM counts')
def sweep(config: str, lambdas: str, scales: str, pm_counts: str):
    """Repeat the simulation over lambda, demand scale or PM count"""
    try:
        sim_config = _validated(config)
        if sum(bool(x) for x in (lambdas, scales, pm_counts)) != 1:
            raise InputError("Give exactly one of --lambdas, --scales or --pm-counts")
        out = Path(sim_config.output.directory)
        if lambdas:
            values = _parse_list(lambdas)
            reports, key = sweep_lambda(sim_config, values), 'lambda_weight'
        elif scales:
            values = _parse_list(scales)
            reports, key = sweep_demand_scale(sim_config, values), 'demand_scale'
        else:
            values = _parse_list(pm_counts, int)
            reports, key = sweep_num_pms(sim_config, values), 'num_pms'
        write_sweep(reports, key, values, str(out / f"sweep_{key}.json"))
        for value, report in zip(values, reports):
            aggregates = report.aggregates
            print(f"{key}={value:g}: avg_power={aggregates['avg_power']:.2f} "
                  f"avg_shortage_per_vm={aggregates['avg_shortage_per_vm']:.6f}")
    except Exception as e:
        _fail(e)


@cli.command()
@click.option('--config', '-c', default=DEFAULT_CONFIG, help='Path to configuration file')
@click.option('--controllers', default='madvm,static_first_fit,predictive_scaler,pattern_consolidator',
              help='Comma-separated controllers to compare')
def compare(config: str, controllers: str):
    """Run every controller on the same trace and tabulate the averages"""
    try:
        sim_config = _validated(config)
        names = [name.strip() for name in controllers.split(',') if name.strip()]
        unknown = [name for name in names if name not in CONTROLLERS]
        if unknown:
            raise InputError(f"Unknown controllers: {unknown}")
        reports, table = compare_controllers(sim_config, names)
        out = Path(sim_config.output.directory)
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / 'comparison.csv', float_format='%.9f')
        for name, report in reports.items():
            report.write_json(str(out / f"compare_{name}_summary.json"))
        print(table[['avg_power', 'avg_shortage_per_vm', 'avg_migrations', 'avg_active_pms']].to_string())
    except Exception as e:
        _fail(e)


@cli.command()
@click.option('--config', '-c', default=DEFAULT_CONFIG, help='Path to configuration file')
def validate(config: str):
    """Validate configuration"""
    try:
        sim_config = _load(config)
        validator = ConfigValidator(sim_config)
        valid = validator.validate()
        print(json.dumps(validator.get_validation_summary(), indent=2))
        if not valid:
            sys.exit(1)
    except Exception as e:
        _fail(e)


if __name__ == '__main__':
    cli()
