"""
Run profiler for the LegoFormer pipeline
Tracks timing of training phases, dataset building and evaluation sweeps
"""

import functools
import logging
import time
from typing import Dict, List

import pandas as pd

logger = logging.getLogger(__name__)


class RunProfiler:
    """Profile pipeline operations and track wall-clock timings"""

    def __init__(self):
        self.timings: Dict[str, List[float]] = {}
        self.current_session: Dict[str, float] = {}
        self.enabled = True
        self.echo = False

    def start_timer(self, operation: str) -> None:
        """Start timing an operation"""
        if not self.enabled:
            return
        self.current_session[operation] = time.perf_counter()

    def end_timer(self, operation: str) -> float:
        """End timing an operation and record the duration"""
        if not self.enabled or operation not in self.current_session:
            return 0.0

        duration = time.perf_counter() - self.current_session.pop(operation)
        self.timings.setdefault(operation, []).append(duration)
        return duration

    def profile_function(self, operation_name: str):
        """Decorator to profile a function"""
        def decorator(func):
            @functools.wraps(func)
            def wrapper(*args, **kwargs):
                self.start_timer(operation_name)
                try:
                    return func(*args, **kwargs)
                finally:
                    duration = self.end_timer(operation_name)
                    if self.enabled and self.echo:
                        print(f"⏱️  {operation_name}: {duration:.3f}s")
            return wrapper
        return decorator

    def get_stats(self) -> Dict[str, Dict[str, float]]:
        """Get timing statistics per operation"""
        stats = {}
        for operation, times in self.timings.items():
            if times:
                stats[operation] = {
                    'count': len(times),
                    'total': sum(times),
                    'average': sum(times) / len(times),
                    'min': min(times),
                    'max': max(times),
                    'last': times[-1],
                }
        return stats

    def summary_frame(self) -> pd.DataFrame:
        """One row per operation, slowest total first"""
        stats = self.get_stats()
        columns = ['count', 'total', 'average', 'min', 'max', 'last']
        if not stats:
            return pd.DataFrame(columns=columns)
        frame = pd.DataFrame.from_dict(stats, orient='index')[columns]
        frame.index.name = 'operation'
        return frame.sort_values('total', ascending=False)

    def log_summary(self, level: int = logging.INFO) -> None:
        frame = self.summary_frame()
        if frame.empty:
            logger.log(level, "no profiling data recorded")
            return
        logger.log(level, "timing summary:\n%s", frame.to_string(float_format=lambda v: f"{v:.3f}"))

    def clear_stats(self) -> None:
        """Clear all timing statistics"""
        self.timings.clear()
        self.current_session.clear()

    def enable(self) -> None:
        self.enabled = True

    def disable(self) -> None:
        self.enabled = False


# Global profiler instance
profiler = RunProfiler()


class timer:
    """Context manager for timing operations"""

    def __init__(self, operation_name: str, show_result: bool = False):
        self.operation_name = operation_name
        self.show_result = show_result
        self.duration = 0.0

    def __enter__(self):
        profiler.start_timer(self.operation_name)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.duration = profiler.end_timer(self.operation_name)
        if self.show_result and profiler.enabled:
            print(f"⏱️  {self.operation_name}: {self.duration:.3f}s")
