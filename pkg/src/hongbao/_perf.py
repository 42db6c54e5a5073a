"""Allocator tuning for long Monte Carlo loops.

Large numpy temporaries are served by fresh ``mmap`` calls under glibc's default
thresholds and returned to the OS on free, so every replicate pays the page
faults again.  Raising the mmap/trim thresholds keeps that memory in the heap.
No-op on platforms without glibc.
"""
import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3

_done = False


def tune_allocator() -> bool:
    global _done
    if _done:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = mallopt(_M_MMAP_THRESHOLD, 1 << 30) and mallopt(_M_TRIM_THRESHOLD, 1 << 30)
    mallopt(_M_TOP_PAD, 64 << 20)
    _done = bool(ok)
    return _done
