"""Pure-NumPy reference implementation of the per-step hot kernels.

Mirrors ringflow._ring_kernel operation for operation: the compiled and
interpreted backends must produce bit-identical float64 results, which the
parity tests assert with exact equality. Keep the arithmetic order in both
files in lockstep when editing either.
"""
from __future__ import annotations

import math

import numpy as np

_libm_pow = np.frompyfunc(math.pow, 2, 1)


def _pow_delta(x, delta):
    """x ** delta, elementwise, reproducible across backends.

    NumPy's SIMD power kernel can differ from libm pow by 1 ulp, so for
    integral exponents both backends use the same binary-exponentiation
    multiply sequence (exact IEEE ops, hence identical), and otherwise
    both call libm pow itself.
    """
    k = int(delta)
    if k == delta and 1 <= k <= 64:
        acc = np.ones_like(x)
        base = x
        while k:
            if k & 1:
                acc = acc * base
            k >>= 1
            if k:
                base = base * base
        return acc
    return _libm_pow(x, delta).astype(np.float64)


def idm_accel_ring(v, v_lead, gap, v0, T, a, b, delta, s0):
    """Noise-free IDM acceleration, one entry per vehicle.

    gap entries must be > 0 (caller-enforced).
    """
    two_sqrt_ab = 2.0 * np.sqrt(a * b)
    dv = v_lead - v
    interaction = v * T - v * dv / two_sqrt_ab
    s_star = s0 + np.maximum(0.0, interaction)
    ratio = s_star / gap
    return a * (1.0 - _pow_delta(v / v0, delta) - ratio * ratio)


def idm_accel_open(v, v_lead, gap, has_leader, v0_arr, T, a, b, delta, s0):
    """IDM acceleration with per-vehicle desired speed and optional leader.

    Entries with has_leader == 0 get the free-road law (no interaction
    term); their v_lead/gap entries are ignored and may hold anything.
    """
    lead = has_leader.astype(bool)
    safe_gap = np.where(lead, gap, 1.0)
    two_sqrt_ab = 2.0 * np.sqrt(a * b)
    dv = v_lead - v
    interaction = v * T - v * dv / two_sqrt_ab
    s_star = s0 + np.maximum(0.0, interaction)
    ratio = np.where(lead, s_star / safe_gap, 0.0)
    return a * (1.0 - _pow_delta(v / v0_arr, delta) - ratio * ratio)


def euler_ring(pos, vel, gap, accel, dt):
    """One explicit-Euler step of a cyclic vehicle string.

    Returns (pos', vel', gap', collided); positions are left unwrapped
    (pos' may reach [L, L + v*dt)), and gap' is propagated from the speed
    changes so no modular arithmetic is involved. collided is True when
    any gap' <= 0.
    """
    vel_new = np.maximum(0.0, vel + accel * dt)
    disp = vel_new * dt
    pos_new = pos + disp
    gap_new = gap + (np.roll(disp, -1) - disp)
    collided = bool(np.any(gap_new <= 0.0))
    return pos_new, vel_new, gap_new, collided
