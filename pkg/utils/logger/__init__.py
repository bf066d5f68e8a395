"""
Layout Logging Module

Provides structured JSON logging with session management, technical
tracing, and reconstruction-specific event builders for observability.
"""

from utils.logger.session_manager import SessionManager
from utils.logger.trace import technical_trace
from utils.logger.layout_logging import LayoutLogger

__all__ = ["SessionManager", "technical_trace", "LayoutLogger"]
