import logging
import os
import sys
import json
from datetime import datetime

LOGGER_NAME = "disaster-synth"


def setup_logging():
    """Set up logging configuration"""
    log_level = os.environ.get("LOG_LEVEL", "INFO").upper()
    log_file = os.environ.get("LOG_FILE", None)

    # Create logger
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(getattr(logging, log_level, logging.INFO))

    # Create formatter
    formatter = logging.Formatter(
        "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )

    # Replace handlers from an earlier call instead of stacking them
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    # Create console handler
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    # Create file handler if log file is specified
    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger


def get_logger(component: str):
    """Child logger of the package logger"""
    return logging.getLogger(f"{LOGGER_NAME}.{component}")


class StageLogger:
    """Logger for pipeline stages: start, progress, completion and errors"""

    def __init__(self, logger, run_id: str):
        self.logger = logger
        self.run_id = run_id

    def log_start(self, stage, config=None):
        """Log the start of a stage"""
        try:
            self.logger.info(f"Stage {self.run_id}: {stage} started")
            self._debug_details(stage, "start", {"config": config})
        except Exception as log_error:
            self.logger.error(f"Error logging start of {stage} ({self.run_id}): {str(log_error)}")

    def log_progress(self, stage, step, metrics):
        """Log a training or generation step"""
        try:
            summary = ", ".join(f"{k}={_fmt(v)}" for k, v in metrics.items())
            self.logger.info(f"Stage {self.run_id}: {stage} step {step}: {summary}")
            self._debug_details(stage, "progress", {"step": step, "metrics": metrics})
        except Exception as log_error:
            self.logger.error(f"Error logging progress of {stage} ({self.run_id}): {str(log_error)}")

    def log_end(self, stage, result=None):
        """Log the completion of a stage"""
        try:
            self.logger.info(f"Stage {self.run_id}: {stage} finished")
            self._debug_details(stage, "end", {"result": result})
        except Exception as log_error:
            self.logger.error(f"Error logging end of {stage} ({self.run_id}): {str(log_error)}")

    def log_error(self, stage, error_message, error_type=None):
        """Log a stage failure"""
        self.logger.error(f"Stage {self.run_id}: {stage} failed: {error_message}")
        self._debug_details(stage, "error", {"error_message": error_message, "error_type": error_type})

    def _debug_details(self, stage, event, payload):
        # Full payloads only in debug mode
        if not self.logger.isEnabledFor(logging.DEBUG):
            return
        log_data = {
            "timestamp": datetime.now().isoformat(),
            "run_id": self.run_id,
            "stage": stage,
            "event": event,
            **payload,
        }
        try:
            log_message = json.dumps(log_data, default=str)
        except Exception as e:
            log_message = f"(Error serializing details: {str(e)})"
        self.logger.debug(f"Stage details {self.run_id}: {log_message}")


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)
