"""
Exception hierarchy for the MadVM simulator
Maps failures onto the CLI exit codes
"""

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_INVARIANT_VIOLATION = 2


class SimulationError(Exception):
    """Base class for every error raised by the simulator"""
    exit_code = EXIT_INPUT_ERROR


class InputError(SimulationError, ValueError):
    """User-supplied data is invalid (trace rows, level indices, distributions)"""


class ConfigError(InputError):
    """Configuration file is missing or does not match the schema"""


class BudgetExceededError(InputError):
    """An oracle-only computation was asked to run on a too-large instance"""


class ConstraintError(SimulationError):
    """A migration plan violates the per-slot migration cap"""
    exit_code = EXIT_INVARIANT_VIOLATION


class InvariantViolation(SimulationError):
    """Internal invariant broken while simulating"""
    exit_code = EXIT_INVARIANT_VIOLATION


def exit_code_for(error: BaseException) -> int:
    """Exit code the CLI reports for an exception"""
    if isinstance(error, SimulationError):
        return error.exit_code
    return EXIT_INPUT_ERROR
