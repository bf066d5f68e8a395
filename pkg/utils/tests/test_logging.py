"""
Test suite for the layout logging system.
"""

import json
import os

import numpy as np
import pytest

from utils.logger import LayoutLogger, SessionManager, technical_trace


def _entries(request_id=None):
    """Parsed lines of the current session file, optionally for one request."""
    with open(SessionManager().get_log_file_path(), "r") as f:
        entries = [json.loads(line) for line in f if line.strip()]
    if request_id is None:
        return entries
    return [e for e in entries if e.get("request_id") == request_id]


@pytest.fixture
def debug_level():
    sm = SessionManager()
    old = sm._threshold
    sm.set_level("DEBUG")
    yield sm
    sm._threshold = old


class TestSessionManager:
    """Test session-based log file management."""

    def test_singleton(self):
        assert SessionManager() is SessionManager()

    def test_log_file_creation(self):
        log_path = SessionManager().get_log_file_path()
        assert os.path.exists(log_path)
        assert log_path.endswith(f"_{os.getpid()}.log")

    def test_session_header(self, tmp_path):
        old_instance = SessionManager._instance
        old_log_dir = SessionManager.LOG_DIR
        SessionManager.LOG_DIR = str(tmp_path)
        SessionManager._instance = None
        try:
            sm = SessionManager()
            with open(sm.get_log_file_path(), "r") as f:
                header = json.loads(f.readline())
            assert header["event"] == "session_start"
            assert header["session_id"] == sm.get_session_id()
            assert header["process_id"] == os.getpid()
            sm.close()
        finally:
            SessionManager._instance = old_instance
            SessionManager.LOG_DIR = old_log_dir

    def test_json_logging(self):
        sm = SessionManager()
        sm.log({"event": "test", "message": "Hello"})
        last = _entries()[-1]
        assert last["event"] == "test"
        assert last["message"] == "Hello"
        assert last["severity"] == "INFO"
        assert last["session_id"] == sm.get_session_id()

    def test_severity_threshold(self):
        sm = SessionManager()
        old = sm._threshold
        sm.set_level("WARNING")
        try:
            assert not sm.is_enabled_for("INFO")
            sm.log({"event": "filtered_out"})
            sm.log({"event": "kept"}, severity="ERROR")
        finally:
            sm._threshold = old
        events = [e["event"] for e in _entries()]
        assert "filtered_out" not in events
        assert events[-1] == "kept"

    def test_numpy_values_serialised(self):
        SessionManager().log({"event": "array_value", "value": np.float64(0.5), "shape": np.array([1, 2])})
        last = _entries()[-1]
        assert last["event"] == "array_value"
        assert last["value"] in (0.5, "0.5")


class TestTechnicalTrace:
    """Test function tracing decorator."""

    def test_successful_trace(self, debug_level):
        @technical_trace
        def sample_function(x, y):
            return x + y

        assert sample_function(2, 3) == 5
        entries = [e for e in _entries() if e.get("function_name") == "sample_function"]
        assert [e["event"] for e in entries[-2:]] == ["function_call", "function_return"]
        assert entries[-1]["return_value_type"] == "int"

    def test_arrays_summarised(self, debug_level):
        @technical_trace
        def takes_array(values):
            return values.sum()

        takes_array(np.zeros((4, 3)))
        call = [e for e in _entries() if e.get("function_name") == "takes_array"][-2]
        assert call["args"] == ["ndarray(4, 3)"]

    def test_exception_trace(self):
        @technical_trace
        def failing_function():
            raise ValueError("Test error")

        with pytest.raises(ValueError):
            failing_function()
        last = _entries()[-1]
        assert last["event"] == "function_exception"
        assert last["error_type"] == "ValueError"
        assert last["severity"] == "ERROR"


class TestLayoutLogger:
    """Test reconstruction-specific logging."""

    def setup_method(self):
        self.logger = LayoutLogger()
        self.request_id = self.logger.generate_request_id()

    def test_generate_request_id(self):
        assert len(self.request_id) > 0
        assert "-" in self.request_id  # UUID format
        assert self.logger.generate_request_id() != self.request_id

    def test_log_stage(self):
        self.logger.log_stage(self.request_id, "tracks_built", counts={"tracks": 12}, latency_ms=3.5)
        (entry,) = _entries(self.request_id)
        assert entry["event"] == "tracks_built"
        assert entry["counts"] == {"tracks": 12}
        assert entry["latency_ms"] == 3.5

    def test_optimizer_progress_needs_debug(self):
        old = self.logger.sm._threshold
        self.logger.sm.set_level("INFO")
        try:
            self.logger.log_optimizer(self.request_id, "solver_progress", 10, 0.5, 0.4, 0.1)
            self.logger.log_optimizer(self.request_id, "solver_finished", 20, 0.3, 0.3, 0.05, {"tracks": 0.3})
        finally:
            self.logger.sm._threshold = old
        entries = _entries(self.request_id)
        assert [e["event"] for e in entries] == ["solver_finished"]
        assert entries[0]["optimizer"]["terms"] == {"tracks": 0.3}

    def test_optimizer_progress_at_debug(self, debug_level):
        self.logger.log_optimizer(self.request_id, "solver_progress", 10, 0.5, 0.4, 0.1)
        (entry,) = _entries(self.request_id)
        assert entry["severity"] == "DEBUG"
        assert entry["optimizer"]["iteration"] == 10

    def test_log_run(self):
        self.logger.log_run(self.request_id, 0, 7, 0.91, 1200, 0.02)
        self.logger.log_run(self.request_id, 1, 8, 0.0, 0, None, error_type="DivergedError")
        ok, failed = _entries(self.request_id)
        assert ok["event"] == "run_complete"
        assert ok["run"]["seed"] == 7
        assert failed["event"] == "run_failed"
        assert failed["severity"] == "WARNING"
        assert failed["run"]["error_type"] == "DivergedError"

    def test_log_warning_with_context(self):
        self.logger.log_warning(self.request_id, "no host", event_type="orphan_opening", context={"element_id": 4})
        (entry,) = _entries(self.request_id)
        assert entry["event"] == "orphan_opening"
        assert entry["element_id"] == 4
        assert entry["message"] == "no host"

    def test_log_error(self):
        self.logger.log_error(self.request_id, "TriangulationError", "bad ring", "Traceback ...")
        (entry,) = _entries(self.request_id)
        assert entry["error"] == {"type": "TriangulationError", "message": "bad ring", "traceback": "Traceback ..."}
        assert entry["severity"] == "ERROR"

    def test_generic_log(self):
        self.logger.log(self.request_id, "reconstruction_started", context={"runs": 3})
        (entry,) = _entries(self.request_id)
        assert entry["runs"] == 3
        assert "message" not in entry
