#!/usr/bin/env python3
"""
Structured Logging Configuration for the Lasso-Ridge Toolkit

Provides centralized logging configuration with:
- Structured JSON logging with timestamps and run context
- Optional run-specific rotating log files
- Console output on stderr so reports can go to stdout
- Experiment, replication and timing events
"""

import logging
import logging.config
import itertools
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Optional

_RESERVED = {
    'name', 'msg', 'args', 'levelname', 'levelno', 'pathname', 'filename', 'module',
    'lineno', 'funcName', 'created', 'msecs', 'relativeCreated', 'thread', 'threadName',
    'processName', 'process', 'exc_info', 'exc_text', 'stack_info', 'message', 'asctime',
    'taskName',
}

VERBOSITY_LEVELS = {0: 'WARNING', 1: 'INFO'}
_EVENT_IDS = itertools.count(1)


class StructuredFormatter(logging.Formatter):
    """Custom formatter for structured JSON logging"""

    def format(self, record):
        log_entry = {
            "timestamp": datetime.fromtimestamp(record.created, tz=timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno
        }

        if record.exc_info:
            log_entry["exception"] = self.formatException(record.exc_info)

        # run_id, replication, cell and any other extra= fields
        for key, value in record.__dict__.items():
            if key not in _RESERVED and not key.startswith('_'):
                log_entry[key] = value

        return json.dumps(log_entry, default=str)


class ExperimentLoggerAdapter(logging.LoggerAdapter):
    """Logger adapter that adds run context to log records"""

    def __init__(self, logger, extra=None):
        super().__init__(logger, extra or {})

    def process(self, msg, kwargs):
        kwargs.setdefault('extra', {})
        kwargs['extra'].update(self.extra)
        return msg, kwargs


def setup_logging(
    log_dir: Optional[str] = None,
    log_level: str = "WARNING",
    run_id: Optional[str] = None,
    enable_console: bool = True,
    enable_json: bool = False
) -> Dict[str, logging.Logger]:
    """
    Setup logging for the toolkit.

    Args:
        log_dir: Directory for log files; no files are written when None
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR)
        run_id: Optional run ID for a run-specific log directory and context
        enable_console: Enable console logging on stderr
        enable_json: Use the structured JSON formatter for the console too

    Returns:
        Dictionary of configured loggers, carrying run_id when one is given
    """
    handlers = {}
    formatters = {
        'simple': {
            'format': '%(asctime)s - %(name)s - [%(levelname)s] - %(message)s',
            'datefmt': '%Y-%m-%d %H:%M:%S'
        },
        'structured': {
            '()': StructuredFormatter
        }
    }

    if enable_console:
        handlers['console'] = {
            'class': 'logging.StreamHandler',
            'level': log_level,
            'formatter': 'structured' if enable_json else 'simple',
            'stream': 'ext://sys.stderr'
        }

    if log_dir:
        log_path = Path(log_dir)
        if run_id:
            log_path = log_path / run_id
        log_path.mkdir(parents=True, exist_ok=True)

        handlers['file'] = {
            'class': 'logging.handlers.RotatingFileHandler',
            'level': 'DEBUG',
            'formatter': 'structured',
            'filename': str(log_path / 'experiment.log'),
            'maxBytes': 10485760,  # 10MB
            'backupCount': 5
        }
        handlers['error_file'] = {
            'class': 'logging.handlers.RotatingFileHandler',
            'level': 'ERROR',
            'formatter': 'structured',
            'filename': str(log_path / 'errors.log'),
            'maxBytes': 10485760,  # 10MB
            'backupCount': 3
        }

    logger_config = {
        'version': 1,
        'disable_existing_loggers': False,
        'formatters': formatters,
        'handlers': handlers,
        'loggers': {
            'lasso_ridge': {
                'level': 'DEBUG' if log_dir else log_level,
                'handlers': list(handlers),
                'propagate': False
            }
        },
        'root': {
            'level': log_level,
            'handlers': ['console'] if enable_console else []
        }
    }

    logging.config.dictConfig(logger_config)

    loggers = {
        'lasso_ridge': logging.getLogger('lasso_ridge'),
        'root': logging.getLogger()
    }

    if run_id:
        for name, logger in loggers.items():
            loggers[name] = ExperimentLoggerAdapter(logger, {'run_id': run_id})

    return loggers


def configure_cli_logging(verbosity: int, log_dir: Optional[str] = None,
                          run_id: Optional[str] = None) -> Dict[str, logging.Logger]:
    """Map -v counts to levels: none -> WARNING, -v -> INFO, -vv -> DEBUG"""
    return setup_logging(
        log_dir=log_dir,
        log_level=VERBOSITY_LEVELS.get(verbosity, 'DEBUG'),
        run_id=run_id,
        enable_console=True,
        enable_json=False
    )


def log_experiment_event(
    logger: logging.Logger,
    event_type: str,
    message: str,
    level: str = 'INFO',
    **kwargs
):
    """Log a structured experiment event"""
    extra = {
        'event_type': event_type,
        'event_id': next(_EVENT_IDS),
        **kwargs
    }
    logger.log(getattr(logging, level.upper()), message, extra=extra)


def log_replication_event(
    logger: logging.Logger,
    replication: int,
    cell: str,
    message: str,
    level: str = 'INFO',
    **kwargs
):
    """Log one replication of a scenario cell"""
    extra = {
        'replication': replication,
        'cell': cell,
        **kwargs
    }
    logger.log(getattr(logging, level.upper()), message, extra=extra)


class PerformanceTimer:
    """Context manager for timing operations"""

    def __init__(self, logger: logging.Logger, operation: str, **context):
        self.logger = logger
        self.operation = operation
        self.context = context
        self.start_time = None
        self.duration = None

    def __enter__(self):
        self.start_time = datetime.now(timezone.utc)
        log_experiment_event(
            self.logger,
            'performance_start',
            f"Starting {self.operation}",
            level='DEBUG',
            operation=self.operation,
            **self.context
        )
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.duration = (datetime.now(timezone.utc) - self.start_time).total_seconds()

        level = 'ERROR' if exc_type else 'INFO'
        message = f"Completed {self.operation} in {self.duration:.3f}s"
        if exc_type:
            message += f" with error: {exc_val}"

        log_experiment_event(
            self.logger,
            'performance_end',
            message,
            level=level,
            operation=self.operation,
            duration_seconds=self.duration,
            success=exc_type is None,
            **self.context
        )
