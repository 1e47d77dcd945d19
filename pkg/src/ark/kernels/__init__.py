"""Hot per-pixel kernels with two interchangeable backends.

The numba backend jit-compiles the scalar loops; the numpy backend runs the
same arithmetic vectorized.  Both perform the operations in the same order
on f64 values, so results are bit-identical.  Selection:

    ARK_NUMBA=0 (or "false"/"no"/"off")  -> force the pure-numpy path
    ARK_NUMBA=1                          -> require numba (ImportError if absent)
    unset / anything else                -> numba if importable, else numpy

Kernel surface:
    polygon_mask(px, py, xs, ys, ring_offsets) -> bool[n]
        Even-odd interiority of each point against a set of rings, with
        points exactly on an edge counting as inside.
    bin_points(cols, rows, width, height) -> int64[height, width]
        Per-cell counts of points by integer cell index; out-of-range
        points are dropped.
    nearest_gather(src, cols, rows, fill) -> f64[m]
        src[rows[i], cols[i]] where in bounds, fill elsewhere.
"""

from __future__ import annotations

import os

_flag = os.environ.get("ARK_NUMBA", "auto").strip().lower()

if _flag in ("0", "false", "no", "off"):
    from . import numpy_backend as _impl

    BACKEND = "numpy"
elif _flag in ("1", "true", "yes", "on"):
    from . import numba_backend as _impl

    BACKEND = "numba"
else:
    try:
        from . import numba_backend as _impl

        BACKEND = "numba"
    except ImportError:
        from . import numpy_backend as _impl

        BACKEND = "numpy"

polygon_mask = _impl.polygon_mask
bin_points = _impl.bin_points
nearest_gather = _impl.nearest_gather
