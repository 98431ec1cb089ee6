"""Backend selection for the hot kernels.

The compiled extension (speedups) is used when it is importable and the call
shape supports it (d in {1, 2}, built-in chi); everything else runs on the
numpy reference implementation. Set ADHESIM_BACKEND=numpy or =cython to force
the choice; forcing cython raises if the extension is missing.
"""

import importlib
import os

import numpy as np

from . import numpy_ref
from .numpy_ref import (  # noqa: F401
    CHI_CUSTOM,
    CHI_EXP_SATURATING,
    CHI_LINEAR,
    CHI_SATURATING,
    active_box,
)

_forced = os.environ.get("ADHESIM_BACKEND", "").strip().lower()
# import_module, not `from . import`: the sentinel assignment below would
# otherwise satisfy the from-import via getattr and mask the extension
speedups = None
if _forced != "numpy":
    try:
        speedups = importlib.import_module(__name__ + ".speedups")
    except ImportError:
        speedups = None
        if _forced in ("cython", "compiled"):
            raise ImportError(
                "ADHESIM_BACKEND=cython requested but the compiled core is unavailable"
            )

BACKEND = "numpy" if speedups is None else "cython"


def convolve_stencil(values, stencil, cell_volume, out_lo=None, out_hi=None):
    if out_lo is None:
        out_lo = np.zeros(values.ndim, dtype=int)
        out_hi = np.array(values.shape, dtype=int)
    out_lo = np.asarray(out_lo, dtype=int)
    out_hi = np.asarray(out_hi, dtype=int)
    if speedups is not None and values.ndim in (1, 2):
        return speedups.convolve_stencil(
            np.ascontiguousarray(values, dtype=np.float64),
            np.ascontiguousarray(stencil, dtype=np.float64),
            float(cell_volume),
            out_lo,
            out_hi,
        )
    return numpy_ref.convolve_stencil(values, stencil, cell_volume, out_lo, out_hi)


def fv_step(u, vel, dt, h, epsilon, chi_kind, chi_c, chi_fn=None, box=None):
    if box is None:
        box = numpy_ref.active_box(u, pad=1)
        if box is None:
            return u.copy(), 0.0
    if speedups is not None and u.ndim in (1, 2) and chi_kind != CHI_CUSTOM:
        vel_arr = None if vel is None else np.ascontiguousarray(vel, dtype=np.float64)
        return speedups.fv_step(
            np.ascontiguousarray(u, dtype=np.float64),
            vel_arr,
            float(dt),
            float(h),
            float(epsilon),
            int(chi_kind),
            float(chi_c),
            np.asarray(box[0], dtype=int),
            np.asarray(box[1], dtype=int),
        )
    return numpy_ref.fv_step(u, vel, dt, h, epsilon, chi_kind, chi_c, chi_fn, box)
