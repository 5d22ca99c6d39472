"""
Configuration Validator for the MadVM simulator
Semantic checks layered on top of the schema validation
"""

import os
from pathlib import Path
from typing import Any, Dict

from loguru import logger

from core.config_manager import SimConfig


class ConfigValidator:
    def __init__(self, config: SimConfig):
        self.config = config
        self.errors = []
        self.warnings = []

    def validate(self) -> bool:
        """Validate complete configuration"""
        self.errors = []
        self.warnings = []

        self._validate_cluster_config()
        self._validate_estimation_config()
        self._validate_trace_config()
        self._validate_controller_config()
        self._validate_output_config()
        self._validate_performance_config()

        if self.errors:
            logger.error("Configuration validation failed:")
            for error in self.errors:
                logger.error(f"  - {error}")

        if self.warnings:
            logger.warning("Configuration warnings:")
            for warning in self.warnings:
                logger.warning(f"  - {warning}")

        return len(self.errors) == 0

    def _validate_cluster_config(self):
        cluster = self.config.cluster
        if cluster.t_m > cluster.num_vms:
            self.warnings.append(f"Cluster: t_m {cluster.t_m} exceeds the number of VMs ({cluster.num_vms})")
        if cluster.t_m == 0:
            self.warnings.append("Cluster: t_m is 0, no controller can migrate")
        if cluster.num_vms > 50 * cluster.num_pms:
            self.warnings.append(f"Cluster: {cluster.num_vms} VMs on {cluster.num_pms} PMs seems unusual")

    def _validate_estimation_config(self):
        lambda_levels = self.config.levels.lambda_levels
        if self.config.window_slots < lambda_levels ** 2:
            self.warnings.append(
                f"Window of {self.config.window_slots} slots is shorter than lambda_levels^2 "
                f"({lambda_levels ** 2}); many chain rows will fall back to uniform")
        if self.config.levels.values is not None and self.config.levels.values[0] < 0:
            self.errors.append("Levels: values must be non-negative")

    def _validate_trace_config(self):
        trace = self.config.trace
        if trace.path:
            if not Path(trace.path).exists():
                self.errors.append(f"Trace: file not found: {trace.path}")
        elif trace.synthesis is not None:
            synthesis = trace.synthesis
            if synthesis.num_slots <= self.config.window_slots:
                self.warnings.append(f"Trace: {synthesis.num_slots} slots do not outlast the "
                                     f"{self.config.window_slots}-slot window")
            if synthesis.max_level is not None and synthesis.max_level >= self.config.levels.lambda_levels:
                self.warnings.append(f"Trace: max_level {synthesis.max_level} is above the top level")

    def _validate_controller_config(self):
        if self.config.controller == 'exact_oracle':
            cluster = self.config.cluster
            states = (self.config.levels.lambda_levels * cluster.num_pms) ** cluster.num_vms
            if states > self.config.oracle.max_states:
                self.errors.append(f"Oracle: exact_oracle needs {states} joint states, "
                                   f"budget is {self.config.oracle.max_states}")
        if self.config.madvm.ranking != 'gain':
            self.warnings.append(f"MadVM: ranking '{self.config.madvm.ranking}' is experimental")
        if self.config.madvm.tol > 1.0:
            self.warnings.append(f"MadVM: tolerance {self.config.madvm.tol} seems loose")

    def _validate_output_config(self):
        directory = Path(self.config.output.directory)
        existing = directory
        while not existing.exists() and existing != existing.parent:
            existing = existing.parent
        if not os.access(existing, os.W_OK):
            self.errors.append(f"Output: cannot create {directory}")

    def _validate_performance_config(self):
        workers = self.config.performance.max_workers
        if workers > (os.cpu_count() or 1) * 4:
            self.warnings.append(f"Performance: {workers} workers seems unusual")

    def get_validation_summary(self) -> Dict[str, Any]:
        """Get validation summary"""
        return {
            'valid': len(self.errors) == 0,
            'error_count': len(self.errors),
            'warning_count': len(self.warnings),
            'errors': self.errors,
            'warnings': self.warnings
        }
