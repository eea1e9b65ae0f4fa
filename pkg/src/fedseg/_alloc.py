"""Keep glibc from returning large buffers to the kernel.

Training allocates and frees hundreds of MB of patch matrices per step; with
default malloc tunables each step pays mmap/munmap plus kernel page zeroing.
Raising the mmap threshold and disabling trim lets the heap recycle those
blocks. No effect on results, only on speed; opt out with
FEDSEG_NO_MALLOC_TUNING=1.
"""

import ctypes
import os
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator():
    if os.environ.get("FEDSEG_NO_MALLOC_TUNING"):
        return
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(_M_TRIM_THRESHOLD, -1)
    except OSError:
        pass
