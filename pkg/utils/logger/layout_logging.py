"""
Layout-Specific Logging Helpers

Provides structured log builders for reconstruction pipeline events:
- Stage completion (counts, latency)
- Optimizer progress and outcome
- Per-run results and quality-control decisions
- Warnings and errors with traceback
"""

import uuid
from datetime import datetime, timezone
from typing import Dict, Any, Optional

from utils.logger.session_manager import SessionManager


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds") + "Z"


class LayoutLogger:
    """Centralized reconstruction logging utilities."""

    def __init__(self):
        self.sm = SessionManager()

    @staticmethod
    def generate_request_id() -> str:
        """Generate a unique request/trace ID."""
        return str(uuid.uuid4())

    def log_stage(
        self,
        request_id: str,
        stage: str,
        counts: Optional[Dict[str, Any]] = None,
        latency_ms: Optional[float] = None,
        severity: str = "INFO",
    ) -> None:
        """
        Log completion of one pipeline stage.

        Args:
            request_id: Run or scene identifier.
            stage: Event name, e.g. "tracks_built".
            counts: Stage-specific counters (tracks, elements, edge points...).
            latency_ms: Time the stage took (optional).
            severity: Log severity.
        """
        entry = {
            "event": stage,
            "request_id": request_id,
            "timestamp": _timestamp(),
            "counts": counts or {},
            "latency_ms": latency_ms,
        }
        self.sm.log(entry, severity=severity)

    def log_optimizer(
        self,
        request_id: str,
        event: str,
        iteration: int,
        loss: float,
        best_loss: float,
        learning_rate: float,
        terms: Optional[Dict[str, float]] = None,
    ) -> None:
        """
        Log optimizer progress (DEBUG) or outcome (INFO).

        Args:
            request_id: Run identifier.
            event: "solver_progress" or "solver_finished".
            iteration: Current iteration count.
            loss: Joint loss at this iteration.
            best_loss: Best joint loss so far.
            learning_rate: Current step size.
            terms: Individual loss terms (tracks, edges, perp).
        """
        if not self.sm.is_enabled_for("DEBUG") and event == "solver_progress":
            return
        entry = {
            "event": event,
            "request_id": request_id,
            "timestamp": _timestamp(),
            "optimizer": {
                "iteration": iteration,
                "loss": loss,
                "best_loss": best_loss,
                "learning_rate": learning_rate,
                "terms": terms or {},
            },
        }
        severity = "DEBUG" if event == "solver_progress" else "INFO"
        self.sm.log(entry, severity=severity)

    def log_run(
        self,
        request_id: str,
        run_index: int,
        seed: int,
        mean_iou: float,
        iterations: int,
        final_loss: Optional[float],
        latency_ms: Optional[float] = None,
        error_type: Optional[str] = None,
    ) -> None:
        """
        Log the outcome of one reconstruction run.

        Args:
            request_id: Scene identifier shared by all runs.
            run_index: Position of the run in the sweep.
            seed: Seed the run used.
            mean_iou: Reprojection IoU (0 for failed runs).
            iterations: Optimizer iterations executed.
            final_loss: Best joint loss, None if the run failed earlier.
            latency_ms: Wall time of the run.
            error_type: Exception class name when the run failed.
        """
        entry = {
            "event": "run_failed" if error_type else "run_complete",
            "request_id": request_id,
            "timestamp": _timestamp(),
            "run": {
                "run_index": run_index,
                "seed": seed,
                "mean_iou": mean_iou,
                "iterations": iterations,
                "final_loss": final_loss,
                "error_type": error_type,
            },
            "latency_ms": latency_ms,
        }
        self.sm.log(entry, severity="WARNING" if error_type else "INFO")

    def log_warning(
        self,
        request_id: str,
        message: str,
        event_type: str = "warning",
        context: Optional[Dict[str, Any]] = None,
    ) -> None:
        """
        Log a warning event (e.g. dropped polygon, unconstrained plane).

        Args:
            request_id: Unique request identifier.
            message: Warning message.
            event_type: Type of warning.
            context: Optional extra fields.
        """
        entry = {
            "event": event_type,
            "request_id": request_id,
            "timestamp": _timestamp(),
            "message": message,
        }
        if context:
            entry.update(context)
        self.sm.log(entry, severity="WARNING")

    def log_error(
        self,
        request_id: str,
        error_type: str,
        error_message: str,
        traceback_str: Optional[str] = None,
    ) -> None:
        """
        Log an error event.

        Args:
            request_id: Unique request identifier.
            error_type: Exception class name.
            error_message: Error message.
            traceback_str: Full traceback (optional).
        """
        entry = {
            "event": "error",
            "request_id": request_id,
            "timestamp": _timestamp(),
            "error": {
                "type": error_type,
                "message": error_message,
                "traceback": traceback_str,
            },
        }
        self.sm.log(entry, severity="ERROR")

    def log(
        self,
        request_id: str,
        event: str,
        severity: str = "INFO",
        message: str = "",
        context: Optional[Dict[str, Any]] = None,
    ) -> None:
        """
        Generic log method for arbitrary events.

        Args:
            request_id: Unique request identifier.
            event: Event type/name.
            severity: Log severity (DEBUG, INFO, WARNING, ERROR).
            message: Optional message.
            context: Optional context dictionary with additional fields.
        """
        entry = {
            "event": event,
            "request_id": request_id,
            "timestamp": _timestamp(),
        }
        if message:
            entry["message"] = message
        if context:
            entry.update(context)
        self.sm.log(entry, severity=severity)
