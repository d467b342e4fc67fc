"""glibc allocator tuning for the many mid-sized temporaries of the numpy MLP.

With default thresholds glibc hands each ~0.5 MB activation array back to the
kernel on free and faults it in again on the next allocation, which costs
more than the arithmetic. Raising the trim/mmap thresholds keeps that memory
in the heap. No-op where glibc's ``mallopt`` is unavailable.
"""

import ctypes
import ctypes.util
import os

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3
_done = False


def tune_allocator() -> bool:
    global _done
    if _done or os.environ.get("CFLOWNETS_NO_MALLOPT"):
        return _done
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = mallopt(_M_MMAP_THRESHOLD, 64 << 20) and mallopt(_M_TRIM_THRESHOLD, 256 << 20)
    mallopt(_M_TOP_PAD, 16 << 20)
    _done = bool(ok)
    return _done
