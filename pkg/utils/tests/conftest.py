"""Shared pytest fixtures: keep session logs out of the working tree."""

import pytest

from utils.logger.session_manager import SessionManager


def _reset_session_manager():
    if SessionManager._instance is not None:
        SessionManager._instance.close()
    SessionManager._instance = None


@pytest.fixture(autouse=True, scope="session")
def _session_log_dir(tmp_path_factory):
    log_dir = tmp_path_factory.mktemp("logs")
    old_dir = SessionManager.LOG_DIR
    old_to_file = SessionManager.LOG_TO_FILE
    _reset_session_manager()
    SessionManager.LOG_DIR = str(log_dir)
    SessionManager.LOG_TO_FILE = True
    yield log_dir
    _reset_session_manager()
    SessionManager.LOG_DIR = old_dir
    SessionManager.LOG_TO_FILE = old_to_file
