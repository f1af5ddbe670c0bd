"""Double-double arithmetic on numpy arrays.

A value is carried as an unevaluated sum ``hi + lo`` of two float64s with
``|lo| <= ulp(hi) / 2``, giving roughly 106 bits of significand.  All helpers
are elementwise and accept scalars or arrays.  Products use Dekker's split, so
inputs must stay well below 2**996 in magnitude and their products
must not underflow.
"""

from __future__ import annotations

import numpy as np

_SPLITTER = 134217729.0  # 2**27 + 1


def two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def fast_two_sum(a, b):
    # requires |a| >= |b| (or a == 0)
    s = a + b
    return s, b - (s - a)


def _split(a):
    t = _SPLITTER * a
    hi = t - (t - a)
    return hi, a - hi


def two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


def add(ah, al, bh, bl):
    s, e = two_sum(ah, bh)
    return fast_two_sum(s, e + (al + bl))


def sub(ah, al, bh, bl):
    return add(ah, al, -bh, -bl)


def mul(ah, al, bh, bl):
    p, e = two_prod(ah, bh)
    return fast_two_sum(p, e + (ah * bl + al * bh))


def div(ah, al, bh, bl):
    q1 = ah / bh
    ph, pl = mul(q1, 0.0 * q1, bh, bl)
    rh, rl = sub(ah, al, ph, pl)
    q2 = rh / bh
    ph, pl = mul(q2, 0.0 * q2, bh, bl)
    rh, rl = sub(rh, rl, ph, pl)
    q3 = rh / bh
    q1, q2 = fast_two_sum(q1, q2)
    return add(q1, q2, q3, 0.0 * q3)


def _extract(x):
    """Split each row of ``x`` into ``q + r`` where the row sums of ``q`` are exact.

    ``q`` keeps the leading bits of every entry relative to a power of two
    ``sigma`` chosen per row so that any summation order of ``q`` is free of
    rounding (the extraction step of Rump, Ogita and Oishi's AccSum).
    """
    top = np.abs(x).max(axis=-1, keepdims=True)
    _, exp = np.frexp(top)
    # an all-zero row gives q = 0 whatever sigma is, so no special case
    sigma = np.ldexp(1.0, exp + (x.shape[-1] + 2).bit_length())
    q = (sigma + x) - sigma
    return q.sum(axis=-1), x - q


def sum_last(hi, lo):
    """Sum of the double-double array ``hi + lo`` over its last axis.

    Two error-free extraction passes followed by a plain sum of what is
    left, so the result is accurate to about eps**2 relative to the sum of
    magnitudes regardless of cancellation.
    """
    x = np.concatenate([np.asarray(hi, dtype=np.float64), np.asarray(lo, dtype=np.float64)], axis=-1)
    if x.shape[-1] == 0:
        z = np.zeros(x.shape[:-1])
        return z, z.copy()
    t1, x = _extract(x)
    t2, x = _extract(x)
    s, e = two_sum(t1, t2)
    return fast_two_sum(s, e + x.sum(axis=-1))


def dot_rows(Ah, Al, bh, bl):
    """Row-wise dot products of the matrix ``A`` with the vector ``b``."""
    p, e = two_prod(Ah, bh)
    return sum_last(p, e + (Ah * bl + Al * bh))


def combine(ch, cl, Th, Tl):
    """``sum_i c_i * T[i]`` for coefficients ``c`` and matrix rows ``T[i]``."""
    Th = np.asarray(Th).T
    Tl = np.asarray(Tl).T
    p, e = two_prod(ch, Th)
    return sum_last(p, e + (ch * Tl + cl * Th))
