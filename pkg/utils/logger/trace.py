"""
Technical Trace Decorator

Wraps pipeline stage functions to log entry, exit and exceptions with
context: module, function name, thread/process ID, argument summary,
return type and duration.
"""

import functools
import os
import threading
import time
import traceback
from typing import Callable, Any

from utils.logger.session_manager import SessionManager


def _summarize(value: Any, limit: int = 200) -> str:
    """Short repr; arrays and long containers are reduced to type and size."""
    shape = getattr(value, "shape", None)
    if shape is not None:
        return f"{type(value).__name__}{tuple(shape)}"
    if isinstance(value, (list, tuple, dict, set)) and len(value) > 8:
        return f"{type(value).__name__}[{len(value)}]"
    return repr(value)[:limit]


def technical_trace(func: Callable) -> Callable:
    """
    Decorator to log function entry, exit, and exceptions with technical context.

    Entries are DEBUG (entry/exit) and ERROR (exception); the exception is
    always re-raised.
    """

    @functools.wraps(func)
    def wrapper(*args, **kwargs) -> Any:
        sm = SessionManager()
        base = {
            "function_name": func.__name__,
            "module": func.__module__,
            "thread_id": threading.get_ident(),
            "process_id": os.getpid(),
        }
        start_time = time.time()

        if sm.is_enabled_for("DEBUG"):
            sm.log(
                {
                    "event": "function_call",
                    **base,
                    "args": [_summarize(a) for a in args][:6],
                    "kwargs": {k: _summarize(v) for k, v in list(kwargs.items())[:6]},
                },
                severity="DEBUG",
            )

        try:
            result = func(*args, **kwargs)
        except Exception as e:
            sm.log(
                {
                    "event": "function_exception",
                    **base,
                    "duration_ms": (time.time() - start_time) * 1000,
                    "error_type": type(e).__name__,
                    "error_message": str(e),
                    "traceback": traceback.format_exc(),
                },
                severity="ERROR",
            )
            raise

        if sm.is_enabled_for("DEBUG"):
            sm.log(
                {
                    "event": "function_return",
                    **base,
                    "duration_ms": (time.time() - start_time) * 1000,
                    "return_value_type": type(result).__name__,
                },
                severity="DEBUG",
            )
        return result

    return wrapper
