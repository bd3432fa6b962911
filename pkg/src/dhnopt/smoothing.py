"""Smoothed replacements for the nonsmooth primitives of the network model.

The quasi-steady network equations contain |q|, max(q, 0), min(q, 0) and a
signed square root (valve law).  Adjoint gradients and quasi-Newton steps
need C1 residuals, so every nonsmooth primitive is replaced by a smooth
surrogate controlled by a small parameter:

    sabs(x)  = sqrt(x^2 + delta^2)            ~ |x|
    smax(x)  = (x + sabs(x)) / 2              ~ max(x, 0)
    smin(x)  = (x - sabs(x)) / 2              ~ min(x, 0)
    ssqrt(x) = x / (x^2 + delta^2)^(1/4)      ~ sign(x) sqrt(|x|)
    sfloor(x, lo) = lo + smax(x - lo)         ~ max(x, lo)

All surrogates converge pointwise to the exact operator as delta -> 0 and
satisfy smax - smin = sabs and smax + smin = identity exactly.

Every function accepts scalars or numpy arrays; the *_d variants also
return the first derivative, which the analytic Jacobians consume.
"""

from __future__ import annotations

import numpy as np

# Default smoothing width for flow-like quantities, in m^3/s.  Small against
# operational flows (1e-4..1e-1) but large enough to keep the Jacobian
# nonsingular on dead branches.
FLOW_DELTA = 1.0e-7

# Smoothing width of the signed square root in the valve law, in Pa.
PRESSURE_DELTA = 1.0


def sabs(x, delta=FLOW_DELTA):
    """Smooth |x|."""
    return np.sqrt(np.square(x) + delta * delta)


def sabs_d(x, delta=FLOW_DELTA):
    """Smooth |x| and its derivative x / sabs(x)."""
    s = np.sqrt(np.square(x) + delta * delta)
    return s, x / s


def smax(x, delta=FLOW_DELTA):
    """Smooth max(x, 0)."""
    return 0.5 * (x + sabs(x, delta))


def smax_d(x, delta=FLOW_DELTA):
    s, ds = sabs_d(x, delta)
    return 0.5 * (x + s), 0.5 * (1.0 + ds)


def smin(x, delta=FLOW_DELTA):
    """Smooth min(x, 0)."""
    return 0.5 * (x - sabs(x, delta))


def smin_d(x, delta=FLOW_DELTA):
    s, ds = sabs_d(x, delta)
    return 0.5 * (x - s), 0.5 * (1.0 - ds)


def smin2_d(a, b, delta=FLOW_DELTA):
    """Smooth elementwise min(a, b) with derivatives w.r.t. a and b."""
    s, ds = sabs_d(a - b, delta)
    return 0.5 * (a + b - s), 0.5 * (1.0 - ds), 0.5 * (1.0 + ds)


def smax2_d(a, b, delta=FLOW_DELTA):
    """Smooth elementwise max(a, b) with derivatives w.r.t. a and b."""
    s, ds = sabs_d(a - b, delta)
    return 0.5 * (a + b + s), 0.5 * (1.0 + ds), 0.5 * (1.0 - ds)


def ssqrt(x, delta=PRESSURE_DELTA):
    """Smooth signed square root, ~ sign(x) sqrt(|x|) away from 0."""
    return x * np.power(np.square(x) + delta * delta, -0.25)


def ssqrt_d(x, delta=PRESSURE_DELTA):
    w = np.square(x) + delta * delta
    v = x * np.power(w, -0.25)
    # d/dx [x w^-1/4] = w^-5/4 (x^2/2 + delta^2)
    dv = np.power(w, -1.25) * (0.5 * np.square(x) + delta * delta)
    return v, dv


def sfloor_d(x, lo, delta):
    """Smooth max(x, lo) and its derivative; keeps model terms in their
    valid domain (e.g. LMTD arguments > 0) during Newton iterations."""
    m, dm = smax_d(x - lo, delta)
    return lo + m, dm
