from __future__ import annotations

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Dict, Iterator, Optional

import numpy as np

logger = logging.getLogger("sketchlu.core.memory")

FLOAT_BYTES = 8


class AllocationTracker:
    """
    Ledger of the buffers a kernel owns, in bytes.

    Kernels register what they allocate (Lanczos vectors, sketch store, QR
    outputs, transform scratch) and release it when it goes out of use. The
    tracker keeps the running total and its peak, reported in 64-bit float
    units so it can be compared with the closed-form memory budgets.

    Only algorithm-owned buffers are counted. Interpreter overhead and
    temporaries created inside numpy/BLAS calls are not.
    """

    def __init__(self) -> None:
        self._live: Dict[str, int] = {}
        self._current = 0
        self._peak = 0
        self._counter = 0

    # -----------------------------
    # Writes
    # -----------------------------
    def allocate(self, label: str, nbytes: int) -> str:
        self._counter += 1
        handle = f"{label}#{self._counter}"
        self._live[handle] = int(nbytes)
        self._current += int(nbytes)
        self._peak = max(self._peak, self._current)
        return handle

    def allocate_array(self, label: str, array: np.ndarray) -> str:
        return self.allocate(label, array.nbytes)

    def release(self, handle: Optional[str]) -> None:
        if handle is None:
            return
        nbytes = self._live.pop(handle, None)
        if nbytes is None:
            logger.warning("Release of unknown allocation", extra={"handle": handle})
            return
        self._current -= nbytes

    # -----------------------------
    # Reads
    # -----------------------------
    @property
    def current_floats(self) -> float:
        return self._current / FLOAT_BYTES

    @property
    def peak_floats(self) -> float:
        return self._peak / FLOAT_BYTES

    def live_labels(self) -> Dict[str, int]:
        return dict(self._live)


class _NullTracker(AllocationTracker):
    """Tracker used when nobody is measuring; accepts and forgets everything."""

    def allocate(self, label: str, nbytes: int) -> str:
        return label

    def release(self, handle: Optional[str]) -> None:
        return None


_NULL = _NullTracker()
_active: ContextVar[Optional[AllocationTracker]] = ContextVar(
    "sketchlu_allocation_tracker", default=None
)


def current_tracker() -> AllocationTracker:
    """Returns the tracker bound to the current context, or a no-op one."""
    tracker = _active.get()
    return tracker if tracker is not None else _NULL


@contextmanager
def track_allocations() -> Iterator[AllocationTracker]:
    """
    Bind a fresh AllocationTracker for the duration of the block.

    Example:
        with track_allocations() as tracker:
            sketched_lanczos(op, k, S, seed)
        tracker.peak_floats
    """
    tracker = AllocationTracker()
    token = _active.set(tracker)
    try:
        yield tracker
    finally:
        _active.reset(token)
        logger.debug(
            "Allocation tracking finished",
            extra={"peak_floats": tracker.peak_floats},
        )
