"""
Configuration Manager for the MadVM simulator
Handles loading, validation, and management of simulation configuration files
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from core.cluster import ClusterSpec
from core.demand import DemandLevelSet
from utils.errors import ConfigError, InputError

CONTROLLERS = ('madvm', 'static_first_fit', 'predictive_scaler', 'pattern_consolidator', 'exact_oracle')


class Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class LevelsConfig(Section):
    lambda_levels: int = Field(5, ge=2)
    values: Optional[List[float]] = None
    cap_multiple: float = Field(1.0, gt=0)

    @model_validator(mode='after')
    def _check_values(self) -> 'LevelsConfig':
        if self.values is not None and len(self.values) != self.lambda_levels:
            raise ValueError(f"levels.values has {len(self.values)} entries, lambda_levels is {self.lambda_levels}")
        return self

    def build(self) -> DemandLevelSet:
        try:
            if self.values is not None:
                return DemandLevelSet(tuple(self.values))
            return DemandLevelSet.uniform(self.lambda_levels, self.cap_multiple)
        except InputError as e:
            raise ConfigError(f"Invalid level set: {e}")


class SynthesisConfig(Section):
    num_slots: int = Field(2000, ge=1)
    regime_period: int = Field(432, ge=0)
    stickiness: float = Field(0.8, ge=0, le=1)
    max_level: Optional[int] = Field(None, ge=0)
    seed: Optional[int] = None


class TraceConfig(Section):
    path: Optional[str] = None
    synthesis: Optional[SynthesisConfig] = None
    demand_scale: float = Field(1.0, ge=0)

    @model_validator(mode='after')
    def _one_source(self) -> 'TraceConfig':
        if self.path and self.synthesis:
            raise ValueError("trace takes either 'path' or 'synthesis', not both")
        if not self.path and self.synthesis is None:
            self.synthesis = SynthesisConfig()
        return self


class MadVMConfig(Section):
    mode: Literal['centralized', 'distributed'] = 'centralized'
    tol: float = Field(1e-3, gt=0)
    max_iter: int = Field(1000, ge=1)
    warm_start: bool = False
    ranking: Literal['gain', 'ascending', 'maximum'] = 'gain'
    gain_epsilon: float = Field(1e-6, ge=0)
    debug_dump: Optional[str] = None


class BaselinesConfig(Section):
    prediction_window: int = Field(18, ge=1)
    repack_period: int = Field(144, ge=1)


class OracleConfig(Section):
    tol: float = Field(1e-6, gt=0)
    max_iter: int = Field(10_000, ge=1)
    max_states: int = Field(100_000, ge=1)
    resolve_period: int = Field(1, ge=1)
    reference_levels: Optional[List[int]] = None
    reference_placement: Optional[List[int]] = None


class AnalysisConfig(Section):
    n_max: int = Field(50, ge=1)
    epsilon: float = Field(0.05, gt=0)
    stride: int = Field(1, ge=1)


class OutputConfig(Section):
    directory: str = './data'
    report_name: str = 'simulation'


class LoggingConfig(Section):
    level: str = 'INFO'
    file: Optional[str] = './logs/simulation.log'
    max_file_size: str = '100MB'
    backup_count: int = 5
    format: str = '{time:YYYY-MM-DD HH:mm:ss} | {level} | {message}'
    progress: bool = True


class PerformanceConfig(Section):
    max_workers: int = Field(1, ge=1)


class SimConfig(Section):
    """Complete simulation configuration"""
    cluster: ClusterSpec = Field(default_factory=ClusterSpec)
    levels: LevelsConfig = Field(default_factory=LevelsConfig)
    window_slots: int = Field(432, ge=2)
    slot_minutes: int = Field(10, ge=1)
    seed: int = 0
    profile_slots: int = Field(0, ge=0)
    controller: Literal['madvm', 'static_first_fit', 'predictive_scaler',
                        'pattern_consolidator', 'exact_oracle'] = 'madvm'
    trace: TraceConfig = Field(default_factory=TraceConfig)
    madvm: MadVMConfig = Field(default_factory=MadVMConfig)
    baselines: BaselinesConfig = Field(default_factory=BaselinesConfig)
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)
    performance: PerformanceConfig = Field(default_factory=PerformanceConfig)

    def level_set(self) -> DemandLevelSet:
        return self.levels.build()

    def with_updates(self, updates: Dict[str, Any]) -> 'SimConfig':
        """Copy with nested overrides, re-validated"""
        data = self.model_dump()
        _update_nested_dict(data, updates)
        return parse_config(data)


def _update_nested_dict(base_dict: Dict[str, Any], updates: Dict[str, Any]):
    """Recursively update nested dictionary"""
    for key, value in updates.items():
        if key in base_dict and isinstance(base_dict[key], dict) and isinstance(value, dict):
            _update_nested_dict(base_dict[key], value)
        else:
            base_dict[key] = value


def _format_validation_error(error: ValidationError) -> str:
    problems = []
    for item in error.errors():
        location = '.'.join(str(part) for part in item['loc']) or '<root>'
        problems.append(f"{location}: {item['msg']}")
    return '; '.join(problems)


def parse_config(data: Optional[Dict[str, Any]]) -> SimConfig:
    try:
        return SimConfig.model_validate(data or {})
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {_format_validation_error(e)}")


class ConfigManager:
    def __init__(self, config_path: str):
        self.config_path = Path(config_path)
        self.config_data: Optional[Dict[str, Any]] = None
        self.config: Optional[SimConfig] = None

    def load_config(self) -> SimConfig:
        """Load configuration from a JSON (or YAML) file"""
        if not self.config_path.exists():
            raise ConfigError(f"Configuration file not found: {self.config_path}")

        try:
            with open(self.config_path, 'r', encoding='utf-8') as file:
                self.config_data = yaml.safe_load(file) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Invalid configuration syntax: {e}")

        if not isinstance(self.config_data, dict):
            raise ConfigError("Configuration root must be an object")

        self.config = parse_config(self.config_data)
        self._check_referenced_files()
        return self.config

    def _check_referenced_files(self):
        trace_path = self.config.trace.path
        if trace_path and not Path(trace_path).exists():
            raise ConfigError(f"Trace file not found: {trace_path}")

    def update_config(self, updates: Dict[str, Any]) -> SimConfig:
        """Update configuration with new values"""
        if self.config is None:
            self.load_config()
        self.config = self.config.with_updates(updates)
        self.config_data = self.config.model_dump(mode='json')
        return self.config

    def save_config(self, output_path: Optional[str] = None):
        """Save the effective configuration as JSON"""
        if self.config is None:
            raise ConfigError("No configuration loaded")

        save_path = Path(output_path) if output_path else self.config_path
        save_path.parent.mkdir(parents=True, exist_ok=True)
        with open(save_path, 'w', encoding='utf-8') as file:
            json.dump(self.config.model_dump(mode='json'), file, indent=2, sort_keys=True)

    def create_backup(self) -> Path:
        """Create backup of current configuration"""
        if self.config is None:
            self.load_config()

        backup_path = self.config_path.with_suffix('.json.backup')
        self.save_config(str(backup_path))
        return backup_path

    def get_logging_config(self) -> Dict[str, Any]:
        if self.config is None:
            self.load_config()
        return self.config.logging.model_dump()
