"""
Logger utility for the MadVM simulator
Provides consistent logging configuration
"""

import sys
from pathlib import Path
from typing import Any, Dict, Optional

from loguru import logger


def setup_logger(config: Optional[Dict[str, Any]] = None):
    """Setup logger with configuration"""
    config = config or {}
    try:
        # Remove default logger
        logger.remove()

        log_level = config.get('level', 'INFO')
        log_file = config.get('file', './logs/simulation.log')
        max_file_size = config.get('max_file_size', '100MB')
        backup_count = config.get('backup_count', 5)
        log_format = config.get('format',
                                '{time:YYYY-MM-DD HH:mm:ss} | {level} | {message}')

        # Console goes to stderr so report output on stdout stays clean
        logger.add(
            sys.stderr,
            format=log_format,
            level=log_level,
            colorize=True
        )

        if log_file:
            log_path = Path(log_file)
            log_path.parent.mkdir(parents=True, exist_ok=True)
            logger.add(
                log_file,
                format=log_format,
                level=log_level,
                rotation=max_file_size,
                retention=backup_count,
                compression="zip"
            )

        logger.debug("Logger configured")
        return logger

    except Exception as e:
        print(f"Failed to setup logger: {e}", file=sys.stderr)
        # Fallback to basic logging
        logger.add(sys.stderr, format="{time} | {level} | {message}")
        return logger