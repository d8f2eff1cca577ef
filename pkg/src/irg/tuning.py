"""Process-level knobs for steady large-array workloads.

Training and sampling allocate the same handful of multi-megabyte buffers
thousands of times.  glibc serves those from fresh mmap regions by default
and returns them to the kernel on free, so every hot-loop iteration pays
page faults for memory it just gave back.  Raising the mmap and trim
thresholds keeps the arenas resident.  Safe to call more than once.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3

_done = False


def tune_allocator() -> bool:
    """Apply the thresholds; returns whether tuning is in effect."""
    global _done
    if _done:
        return True
    if not sys.platform.startswith("linux"):
        return False
    name = ctypes.util.find_library("c") or "libc.so.6"
    try:
        libc = ctypes.CDLL(name, use_errno=True)
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30)
    except (OSError, AttributeError):
        return False
    _done = True
    return True
