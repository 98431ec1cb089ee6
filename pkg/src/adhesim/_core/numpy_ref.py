"""Pure numpy reference implementation of the hot kernels.

Shape-generic over dimension, operating on raw value arrays (no Grid
objects). The compiled backend mirrors these signatures for d=1 and d=2;
the dispatcher in __init__ falls back here for everything else.
"""

import numpy as np
from scipy.signal import convolve

CHI_CUSTOM = 0
CHI_LINEAR = 1
CHI_SATURATING = 2
CHI_EXP_SATURATING = 3


def active_box(values, pad=0):
    """Half-open index box [lo, hi) around the nonzero entries, dilated by
    pad and clipped to the array. None when the array is identically zero."""
    nz = np.nonzero(values)
    if len(nz[0]) == 0:
        return None
    lo = np.array([int(ix.min()) - pad for ix in nz])
    hi = np.array([int(ix.max()) + 1 + pad for ix in nz])
    np.clip(lo, 0, None, out=lo)
    hi = np.minimum(hi, values.shape)
    return lo, hi


def convolve_stencil(values, stencil, cell_volume, out_lo, out_hi):
    """out[i] = cell_volume * sum_j stencil[(i - j) + R] * values[j].

    stencil has odd extent 2R+1 per axis. Output computed only inside the
    half-open box [out_lo, out_hi), zero elsewhere; input restricted to the
    nonzero bounding box of values.
    """
    out = np.zeros_like(values)
    box = active_box(values)
    if box is None:
        return out
    in_lo, in_hi = box
    radius = np.array([(s - 1) // 2 for s in stencil.shape])
    out_lo = np.asarray(out_lo, dtype=int)
    out_hi = np.asarray(out_hi, dtype=int)
    sub = values[tuple(slice(a, b) for a, b in zip(in_lo, in_hi))]
    # direct summation, not FFT: no wraparound near the truncated boundary
    full = convolve(sub, stencil, mode="full", method="direct")
    # full[m] holds the sum for global index i = in_lo - R + m
    f_lo = in_lo - radius
    lo = np.maximum(out_lo, f_lo)
    hi = np.minimum(out_hi, f_lo + np.array(full.shape))
    if np.any(lo >= hi):
        return out
    src = tuple(slice(a - o, b - o) for a, b, o in zip(lo, hi, f_lo))
    dst = tuple(slice(a, b) for a, b in zip(lo, hi))
    out[dst] = full[src] * cell_volume
    return out


def _axslice(a, axis, start, stop):
    idx = (slice(None),) * axis + (slice(start, stop),)
    return a[idx]


def _g_of(chi_kind, chi_c, chi_fn, u):
    """Advected nonlinearity g(u) = u * chi(u)."""
    if chi_kind == CHI_LINEAR:
        return chi_c * u * u
    if chi_kind == CHI_SATURATING:
        return chi_c * u * u / (1.0 + u)
    if chi_kind == CHI_EXP_SATURATING:
        return -chi_c * u * np.expm1(-u)
    return u * chi_fn(u)


def fv_step(u, vel, dt, h, epsilon, chi_kind, chi_c, chi_fn=None, box=None):
    """One forward-Euler finite-volume step. Returns (u_new, clipped_mass).

    Face flux along each axis: (eps + uL + uR)(uR - uL)/h diffusive part
    minus Vf * g(upwind u), Vf = (VL + VR)/2 from the cell-centered velocity
    components vel (shape (d, *u.shape); None disables advection). Cells
    outside the array are Dirichlet-0 ghosts. Negative overshoot is clipped
    to zero; clipped_mass is the removed mass (times h^d).

    box, when given, must contain the support of u dilated by one cell.
    """
    d = u.ndim
    if box is None:
        box = active_box(u, pad=1)
        if box is None:
            return u.copy(), 0.0
    lo = np.maximum(np.asarray(box[0], dtype=int), 0)
    hi = np.minimum(np.asarray(box[1], dtype=int), u.shape)
    sl = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
    P = np.pad(u[sl], 1)
    acc = np.zeros_like(P)
    for k in range(d):
        uL = _axslice(P, k, 0, -1)
        uR = _axslice(P, k, 1, None)
        F = (epsilon + uL + uR) * (uR - uL) / h
        if vel is not None:
            Vp = np.pad(vel[k][sl], 1, mode="edge")
            Vf = 0.5 * (_axslice(Vp, k, 0, -1) + _axslice(Vp, k, 1, None))
            u_up = np.where(Vf >= 0.0, uL, uR)
            F = F - Vf * _g_of(chi_kind, chi_c, chi_fn, u_up)
        _axslice(acc, k, 0, -1)[...] += F
        _axslice(acc, k, 1, None)[...] -= F
    new = P + (dt / h) * acc
    core = new[(slice(1, -1),) * d]
    neg = core < 0.0
    clipped = -float(core[neg].sum()) * h**d if neg.any() else 0.0
    out = u.copy()
    out[sl] = np.where(neg, 0.0, core)
    return out, clipped
