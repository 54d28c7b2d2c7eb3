# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled per-step hot kernels.

Must stay bit-identical to ringflow._ring_kernel_py (the parity tests use
exact float64 equality): same operations in the same order, with libm
pow/sqrt/fmax matching NumPy's float64 loops for finite inputs.
"""
from libc.math cimport sqrt, pow, fmax, floor

import numpy as np


cdef inline double _pow_delta(double x, double delta, long k, bint integral) noexcept nogil:
    # mirrors _ring_kernel_py._pow_delta: exact multiply chain for integral
    # exponents, libm pow otherwise
    cdef double acc, base
    if integral:
        acc = 1.0
        base = x
        while k:
            if k & 1:
                acc = acc * base
            k >>= 1
            if k:
                base = base * base
        return acc
    return pow(x, delta)


cdef inline void _delta_mode(double delta, long* k, bint* integral) noexcept nogil:
    k[0] = <long> delta
    integral[0] = (<double> k[0] == delta) and 1 <= k[0] <= 64


def idm_accel_ring(const double[::1] v, const double[::1] v_lead,
                   const double[::1] gap, double v0, double T, double a,
                   double b, double delta, double s0):
    """Noise-free IDM acceleration, one entry per vehicle (gap > 0)."""
    cdef Py_ssize_t n = v.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double two_sqrt_ab = 2.0 * sqrt(a * b)
    cdef double dv, interaction, s_star, ratio
    cdef long dk
    cdef bint integral
    cdef Py_ssize_t i
    _delta_mode(delta, &dk, &integral)
    for i in range(n):
        dv = v_lead[i] - v[i]
        interaction = v[i] * T - v[i] * dv / two_sqrt_ab
        s_star = s0 + fmax(0.0, interaction)
        ratio = s_star / gap[i]
        o[i] = a * (1.0 - _pow_delta(v[i] / v0, delta, dk, integral) - ratio * ratio)
    return out


def idm_accel_open(const double[::1] v, const double[::1] v_lead,
                   const double[::1] gap, const unsigned char[::1] has_leader,
                   const double[::1] v0_arr, double T, double a, double b,
                   double delta, double s0):
    """IDM acceleration with per-vehicle desired speed and optional leader."""
    cdef Py_ssize_t n = v.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double two_sqrt_ab = 2.0 * sqrt(a * b)
    cdef double dv, interaction, s_star, ratio
    cdef long dk
    cdef bint integral
    cdef Py_ssize_t i
    _delta_mode(delta, &dk, &integral)
    for i in range(n):
        if has_leader[i]:
            dv = v_lead[i] - v[i]
            interaction = v[i] * T - v[i] * dv / two_sqrt_ab
            s_star = s0 + fmax(0.0, interaction)
            ratio = s_star / gap[i]
        else:
            ratio = 0.0
        o[i] = a * (1.0 - _pow_delta(v[i] / v0_arr[i], delta, dk, integral) - ratio * ratio)
    return out


def euler_ring(const double[::1] pos, const double[::1] vel,
               const double[::1] gap, const double[::1] accel, double dt):
    """One explicit-Euler step of a cyclic vehicle string.

    Returns (pos', vel', gap', collided) with positions left unwrapped.
    """
    cdef Py_ssize_t n = pos.shape[0]
    pos_new = np.empty(n, dtype=np.float64)
    vel_new = np.empty(n, dtype=np.float64)
    gap_new = np.empty(n, dtype=np.float64)
    disp = np.empty(n, dtype=np.float64)
    cdef double[::1] p = pos_new
    cdef double[::1] w = vel_new
    cdef double[::1] g = gap_new
    cdef double[::1] d = disp
    cdef bint collided = False
    cdef Py_ssize_t i, lead
    for i in range(n):
        w[i] = fmax(0.0, vel[i] + accel[i] * dt)
        d[i] = w[i] * dt
        p[i] = pos[i] + d[i]
    for i in range(n):
        lead = i + 1
        if lead == n:
            lead = 0
        g[i] = gap[i] + (d[lead] - d[i])
        if g[i] <= 0.0:
            collided = True
    return pos_new, vel_new, gap_new, bool(collided)
