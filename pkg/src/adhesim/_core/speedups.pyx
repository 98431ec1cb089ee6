# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled mirrors of the numpy_ref hot kernels, d in {1, 2} only.

Same contracts as numpy_ref.convolve_stencil / fv_step on contiguous float64
input, built-in chi kinds only; the dispatcher in __init__ guards the call
shapes. The convolution walks nonzero source cells and scatters stencil
windows, which wins while the support occupies a small fraction of the grid.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport expm1

cnp.import_array()

cdef enum:
    KIND_LINEAR = 1
    KIND_SATURATING = 2
    KIND_EXP_SATURATING = 3


cdef inline double g_of(int kind, double c, double x) noexcept nogil:
    # advected nonlinearity g(u) = u * chi(u)
    if kind == KIND_LINEAR:
        return c * x * x
    if kind == KIND_SATURATING:
        return c * x * x / (1.0 + x)
    return -c * x * expm1(-x)


cdef inline Py_ssize_t imax(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    return a if a > b else b


cdef inline Py_ssize_t imin(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    return a if a < b else b


cdef inline Py_ssize_t iclamp(Py_ssize_t x, Py_ssize_t lo, Py_ssize_t hi) noexcept nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


# ---------------------------------------------------------------------------
# truncated stencil convolution


cdef void _conv1(const double[::1] v, const double[::1] st, double cv,
                 Py_ssize_t lo, Py_ssize_t hi, double[::1] out) noexcept nogil:
    cdef Py_ssize_t n = v.shape[0]
    cdef Py_ssize_t R = (st.shape[0] - 1) // 2
    cdef Py_ssize_t j, i, i0, i1
    cdef double vj
    for j in range(n):
        vj = v[j]
        if vj == 0.0:
            continue
        i0 = imax(j - R, lo)
        i1 = imin(j + R + 1, hi)
        for i in range(i0, i1):
            out[i] += vj * st[i - j + R]
    for i in range(lo, hi):
        out[i] *= cv


cdef void _conv2(const double[:, ::1] v, const double[:, ::1] st, double cv,
                 Py_ssize_t lo0, Py_ssize_t lo1, Py_ssize_t hi0, Py_ssize_t hi1,
                 double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t n0 = v.shape[0], n1 = v.shape[1]
    cdef Py_ssize_t R0 = (st.shape[0] - 1) // 2
    cdef Py_ssize_t R1 = (st.shape[1] - 1) // 2
    cdef Py_ssize_t j0, j1, i0, i1, a0, b0, a1, b1
    cdef double vj
    for j0 in range(n0):
        for j1 in range(n1):
            vj = v[j0, j1]
            if vj == 0.0:
                continue
            a0 = imax(j0 - R0, lo0)
            b0 = imin(j0 + R0 + 1, hi0)
            a1 = imax(j1 - R1, lo1)
            b1 = imin(j1 + R1 + 1, hi1)
            for i0 in range(a0, b0):
                for i1 in range(a1, b1):
                    out[i0, i1] += vj * st[i0 - j0 + R0, i1 - j1 + R1]
    for i0 in range(lo0, hi0):
        for i1 in range(lo1, hi1):
            out[i0, i1] *= cv


def convolve_stencil(values, stencil, double cell_volume, out_lo, out_hi):
    """out[i] = cell_volume * sum_j stencil[(i - j) + R] * values[j], written
    only inside the half-open box [out_lo, out_hi)."""
    out = np.zeros_like(values)
    cdef Py_ssize_t lo0, hi0, lo1, hi1
    if values.ndim == 1:
        lo0 = imax(int(out_lo[0]), 0)
        hi0 = imin(int(out_hi[0]), values.shape[0])
        if lo0 < hi0:
            _conv1(values, stencil, cell_volume, lo0, hi0, out)
        return out
    lo0 = imax(int(out_lo[0]), 0)
    hi0 = imin(int(out_hi[0]), values.shape[0])
    lo1 = imax(int(out_lo[1]), 0)
    hi1 = imin(int(out_hi[1]), values.shape[1])
    if lo0 < hi0 and lo1 < hi1:
        _conv2(values, stencil, cell_volume, lo0, lo1, hi0, hi1, out)
    return out


# ---------------------------------------------------------------------------
# one forward-Euler finite-volume step


cdef double _fv1(const double[::1] u, const double[::1] vel, bint has_vel,
                 double dt, double h, double eps, int kind, double c,
                 Py_ssize_t lo, Py_ssize_t hi, double[::1] out) noexcept nogil:
    cdef Py_ssize_t n = hi - lo
    cdef Py_ssize_t i
    cdef double F, Vf, up, val, clipped = 0.0
    cdef double r = dt / h
    # face i joins cells (lo+i-1, lo+i), i = 0..n, ghosts outside the box;
    # a cell gains r * (F_right - F_left), folded in as the faces stream by
    cdef double F_prev = 0.0
    cdef double PL = 0.0, PR
    for i in range(n + 1):
        PL = u[lo + i - 1] if i >= 1 else 0.0
        PR = u[lo + i] if i < n else 0.0
        F = (eps + PL + PR) * (PR - PL) / h
        if has_vel:
            Vf = 0.5 * (vel[iclamp(lo + i - 1, lo, hi - 1)]
                        + vel[iclamp(lo + i, lo, hi - 1)])
            up = PL if Vf >= 0.0 else PR
            F = F - Vf * g_of(kind, c, up)
        if i >= 1:
            val = PL + r * (F - F_prev)
            if val < 0.0:
                clipped -= val
                val = 0.0
            out[lo + i - 1] = val
        F_prev = F
    return clipped


cdef double _fv2(const double[:, ::1] u, const double[:, :, ::1] vel, bint has_vel,
                 double dt, double h, double eps, int kind, double c,
                 Py_ssize_t lo0, Py_ssize_t lo1, Py_ssize_t hi0, Py_ssize_t hi1,
                 double[:, ::1] acc) noexcept nogil:
    cdef Py_ssize_t n0 = hi0 - lo0, n1 = hi1 - lo1
    cdef Py_ssize_t i, j, gi, gj
    cdef double uL, uR, F, Vf, up, clipped = 0.0
    cdef double r = dt / h

    # axis-0 faces: between core rows (lo0+i-1) and (lo0+i), i = 0..n0
    for i in range(n0 + 1):
        for j in range(n1):
            gj = lo1 + j
            uL = u[lo0 + i - 1, gj] if i >= 1 else 0.0
            uR = u[lo0 + i, gj] if i < n0 else 0.0
            if uL == 0.0 and uR == 0.0:
                continue
            F = (eps + uL + uR) * (uR - uL) / h
            if has_vel:
                Vf = 0.5 * (vel[0, iclamp(lo0 + i - 1, lo0, hi0 - 1), gj]
                            + vel[0, iclamp(lo0 + i, lo0, hi0 - 1), gj])
                up = uL if Vf >= 0.0 else uR
                F = F - Vf * g_of(kind, c, up)
            if i >= 1:
                acc[i - 1, j] += F
            if i < n0:
                acc[i, j] -= F

    # axis-1 faces: between core columns (lo1+j-1) and (lo1+j), j = 0..n1
    for i in range(n0):
        gi = lo0 + i
        for j in range(n1 + 1):
            uL = u[gi, lo1 + j - 1] if j >= 1 else 0.0
            uR = u[gi, lo1 + j] if j < n1 else 0.0
            if uL == 0.0 and uR == 0.0:
                continue
            F = (eps + uL + uR) * (uR - uL) / h
            if has_vel:
                Vf = 0.5 * (vel[1, gi, iclamp(lo1 + j - 1, lo1, hi1 - 1)]
                            + vel[1, gi, iclamp(lo1 + j, lo1, hi1 - 1)])
                up = uL if Vf >= 0.0 else uR
                F = F - Vf * g_of(kind, c, up)
            if j >= 1:
                acc[i, j - 1] += F
            if j < n1:
                acc[i, j] -= F
    return clipped


def fv_step(u, vel, double dt, double h, double epsilon, int chi_kind,
            double chi_c, box_lo, box_hi):
    """One conservative forward-Euler step; returns (u_new, clipped_mass).

    Mirrors numpy_ref.fv_step for d in {1, 2} with built-in chi kinds; the
    box must contain the support of u dilated by one cell.
    """
    cdef Py_ssize_t lo0, hi0, lo1, hi1, i, j
    cdef double clipped, r, val
    cdef bint has_vel = vel is not None

    out = u.copy()
    if u.ndim == 1:
        lo0 = imax(int(box_lo[0]), 0)
        hi0 = imin(int(box_hi[0]), u.shape[0])
        if lo0 >= hi0:
            return out, 0.0
        clipped = _fv1(u, vel[0] if has_vel else u, has_vel, dt, h, epsilon,
                       chi_kind, chi_c, lo0, hi0, out)
        return out, clipped * h

    lo0 = imax(int(box_lo[0]), 0)
    hi0 = imin(int(box_hi[0]), u.shape[0])
    lo1 = imax(int(box_lo[1]), 0)
    hi1 = imin(int(box_hi[1]), u.shape[1])
    if lo0 >= hi0 or lo1 >= hi1:
        return out, 0.0
    acc = np.zeros((hi0 - lo0, hi1 - lo1), dtype=np.float64)
    # memoryview arguments cannot be None; an unused view of u stands in
    _fv2(u, vel if has_vel else u[None, ...], has_vel, dt, h, epsilon,
         chi_kind, chi_c, lo0, lo1, hi0, hi1, acc)

    cdef double[:, ::1] acc_v = acc
    cdef double[:, ::1] u_v = u
    cdef double[:, ::1] out_v = out
    clipped = 0.0
    r = dt / h
    with nogil:
        for i in range(hi0 - lo0):
            for j in range(hi1 - lo1):
                val = u_v[lo0 + i, lo1 + j] + r * acc_v[i, j]
                if val < 0.0:
                    clipped -= val
                    val = 0.0
                out_v[lo0 + i, lo1 + j] = val
    return out, clipped * h * h
