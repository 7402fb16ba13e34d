"""Quadrature nodes shared by the analytic solvers."""

import math
from functools import lru_cache

import numpy as np
from scipy.special import roots_legendre

from errors import NumericalError

N_ANGULAR = 256
SINH_CLUSTER = 8.0


@lru_cache(maxsize=32)
def _legendre(n):
    x, w = roots_legendre(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def legendre_nodes(a, b, n):
    """Gauss–Legendre nodes and weights on (a, b)."""
    x, w = _legendre(n)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def radial_nodes(n):
    """Nodes on (0, inf) via v = tan(s), s Gauss–Legendre on (0, pi/2).

    The returned weights include the Jacobian sec²(s).
    """
    s, w = legendre_nodes(0.0, 0.5 * math.pi, n)
    v = np.tan(s)
    return v, w / np.cos(s) ** 2


def angular_crowding(theta, alpha):
    """Node-crowding factor for angular rules around the colocated point.

    The capture term 1 / (1 + D / theta) at unit distance is a spike of width
    theta^(1/alpha) around angle 0; the square root splits the resolution
    between that spike and the rest of the circle. Never above 1.
    """
    return min(1.0, math.sqrt(theta ** (1.0 / alpha)))


def angular_nodes(n=N_ANGULAR, width=1.0):
    """Periodic midpoint rule on [0, 2pi); never lands on angle 0.

    With width < 1 the nodes follow phi = 2 atan(width tan(s/2)) for uniform
    s, which crowds them toward 0 and keeps the rule periodic.
    """
    s = 2.0 * math.pi * (np.arange(n) + 0.5) / n
    if width >= 1.0:
        return s, np.full(n, 2.0 * math.pi / n)
    half = 0.5 * s
    phi = np.mod(2.0 * np.arctan(width * np.tan(half)), 2.0 * math.pi)
    jacobian = width / (np.cos(half) ** 2 + width ** 2 * np.sin(half) ** 2)
    return phi, jacobian * (2.0 * math.pi / n)


def clustered_nodes(a, b, n, cluster=SINH_CLUSTER):
    """Gauss–Legendre nodes on (a, b) crowded toward a by t = a + (b-a) sinh(c s)/sinh(c)."""
    s, w = legendre_nodes(0.0, 1.0, n)
    scale = (b - a) / math.sinh(cluster)
    t = a + scale * np.sinh(cluster * s)
    return t, w * scale * cluster * np.cosh(cluster * s)


def refine(evaluate, n0=32, rtol=1e-6, max_n=2048, atol=0.0):
    """Double the node count until successive results agree to `rtol` (or `atol`).

    `evaluate(n)` returns a scalar or array; the check is applied to every
    component. Returns (value, n).
    """
    n = n0
    previous = np.asarray(evaluate(n), dtype=float)
    residuals = []
    while n < max_n:
        n *= 2
        current = np.asarray(evaluate(n), dtype=float)
        scale = np.maximum(np.abs(current), max(atol / rtol, 1e-300))
        change = float(np.max(np.abs(current - previous) / scale))
        residuals.append(change)
        if change < rtol:
            return current, n
        previous = current
    raise NumericalError(f"quadrature did not settle below {rtol:g} with {max_n} nodes", residuals)
