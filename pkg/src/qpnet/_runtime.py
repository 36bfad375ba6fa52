"""Process-level tuning for long numpy workloads."""

import ctypes
import ctypes.util
import logging

log = logging.getLogger(__name__)

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_done = False


def tune_allocator():
    """Keep large temporaries on the glibc heap instead of fresh mmaps.

    Every training step allocates hundreds of multi-megabyte arrays; serving
    them from recycled heap pages avoids repeated page faults. No-op off glibc.
    """
    global _done
    if _done:
        return
    _done = True
    name = ctypes.util.find_library("c")
    if not name:
        return
    try:
        libc = ctypes.CDLL(name)
        libc.mallopt(_M_MMAP_THRESHOLD, 32 << 20)
        libc.mallopt(_M_TRIM_THRESHOLD, (1 << 31) - 1)
    except (OSError, AttributeError):
        log.debug("mallopt unavailable; allocator left at defaults")
