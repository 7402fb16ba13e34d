# =====================================================================
#  analytic.py — conditional AoI, success probability, stability, AoI
# =====================================================================

import logging
import math
from collections import namedtuple
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import integrate, optimize

from errors import NumericalError, UnstableError
from quadrature import N_ANGULAR, angular_crowding, angular_nodes, radial_nodes, refine

log = logging.getLogger("analytic")

PS_FLOOR = 1e-12
PS_XTOL = 1e-15
PS_RESIDUAL = 1e-9
XI_XTOL = 1e-12
MASS_TOL = 1e-9
# relative offset above xi/p where the stable-link FCFS integral starts
STABLE_MARGIN = 1e-3

ConditionalAoi = namedtuple("ConditionalAoi", "avg peak stable")
PsSolution = namedtuple("PsSolution", "p_s residual method")
StabilityResult = namedtuple("StabilityResult", "p_s xi_c residual")


class Method(str, Enum):
    EXACT_META = "exact_meta"
    BETA_META = "beta_meta"
    MEAN_APPROX = "mean_approx"


class LcfsPeak(str, Enum):
    # 1 - (1 - xi)(1 - p t), from deconditioning the single-queue result
    SERVICE = "service"
    # 1 - (1 - xi)(1 - xi t), weighting by the arrival probability instead
    ARRIVAL = "arrival"


# -------------------------------------------------------------------
# 1. Single-queue results
# -------------------------------------------------------------------
def h_theta(x, y, z, *, xi, theta, alpha):
    """Activity threshold of an interferer at normalized distance x and angle y.

    xi/z + xi/(1 - z + (1 + x² - 2x cos y)^(alpha/2) / theta). Infinite at the
    colocated point x = 1, y = 0 when z = 1.
    """
    distance = np.maximum(1.0 + np.square(x) - 2.0 * x * np.cos(y), 0.0) ** (0.5 * alpha)
    denom = 1.0 - z + distance / theta
    assert np.all(denom >= 0.0), "negative activity-threshold denominator"
    return xi / z + xi / denom


def cond_aoi_fcfs(xi, service):
    if not (0.0 < xi <= 1.0 and 0.0 < service <= 1.0):
        raise ValueError(f"xi and service must lie in (0, 1], got {xi}, {service}")
    if xi >= service:
        raise UnstableError(f"unstable queue: xi={xi:g} >= service={service:g}")
    peak = 1.0 / xi + (1.0 - xi) / (service - xi)
    avg = peak + xi / service - xi / service ** 2 - 1.0
    return ConditionalAoi(avg, peak, True)


def cond_aoi_lcfs(xi, service):
    """Preemptive LCFS; defined for any rate pair, `stable` flags xi < service."""
    if service <= 0.0:
        raise ValueError("service must be positive")
    if not 0.0 < xi <= 1.0:
        raise ValueError(f"xi must lie in (0, 1], got {xi}")
    avg = 1.0 / xi + 1.0 / service - 1.0
    peak = avg + 1.0 / (1.0 - (1.0 - xi) * (1.0 - service)) - 1.0
    return ConditionalAoi(avg, peak, xi < service)


def activity_prob(xi, service):
    """Fraction of slots with a nonempty queue (Little's law, saturating at 1)."""
    xi = np.asarray(xi, dtype=float)
    service = np.asarray(service, dtype=float)
    with np.errstate(divide="ignore"):
        value = np.where(service <= xi, 1.0, xi / service)
    return float(value) if value.ndim == 0 else value


# -------------------------------------------------------------------
# 2. Success probability
# -------------------------------------------------------------------
class ExactKernel:
    """Double integral over (v, phi) with the activity average over psi."""

    def __init__(self, config, n_radial, n_angular=N_ANGULAR):
        v, w = radial_nodes(n_radial)
        phi, dphi = angular_nodes(n_angular, angular_crowding(config.theta, config.alpha))
        base = np.maximum(1.0 + v[:, None] ** 2 - 2.0 * v[:, None] * np.cos(phi)[None, :], 0.0)
        spread = base ** (0.5 * config.alpha)
        self.share = dphi / (2.0 * math.pi)
        self.capture = np.sum(dphi / (1.0 + spread / config.theta), axis=1)
        with np.errstate(divide="ignore"):
            self.boost = 1.0 + config.theta / spread
        self.radial_weight = w * v

    def load(self, ps, xi, p):
        busy = np.minimum(xi / ps * self.boost, p) @ self.share
        return float(np.sum(self.radial_weight * busy * self.capture))


class FastKernel:
    """Single integral after averaging the interferer position."""

    def __init__(self, config, n_radial):
        u, w = radial_nodes(n_radial)
        half = 0.5 * config.alpha
        self.boost = 1.0 + u ** -half
        self.weight = w / (1.0 + u ** half) * math.pi * config.theta ** config.delta

    def load(self, ps, xi, p):
        return float(np.sum(self.weight * np.minimum(xi / ps * self.boost, p)))


KERNELS = {"exact": ExactKernel, "fast": FastKernel}


def success_kernel(config, method="exact"):
    """Kernel with the radial node count refined until the load settles."""
    try:
        build = KERNELS[method]
    except KeyError:
        raise ValueError(f"unknown success-probability method {method!r}") from None
    trial_ps = (1.0, 0.5, 0.1)

    def evaluate(n):
        kernel = build(config, n)
        return [kernel.load(ps, config.xi, config.access_p) for ps in trial_ps]

    # the load enters the exponent scaled by lam r²
    atol = 1e-10 / max(config.lam * config.link_distance_r ** 2, 1e-300)
    _, n = refine(evaluate, n0=32, rtol=1e-6, max_n=2048, atol=atol)
    return build(config, n)


def _fixed_point_map(config, kernel, xi):
    scale = config.lam * config.link_distance_r ** 2

    def g(ps):
        return math.exp(-config.noise_term - scale * kernel.load(ps, xi, config.access_p))

    return g


def solve_ps(config, method="exact", kernel=None, xi=None):
    """Success probability of the typical link, p_s = g(p_s), by bisection."""
    xi = config.xi if xi is None else xi
    if config.lam * config.link_distance_r ** 2 == 0.0:
        return PsSolution(math.exp(-config.noise_term), 0.0, method)

    kernel = kernel or success_kernel(config, method)
    g = _fixed_point_map(config, kernel, xi)
    if g(1.0) >= 1.0:
        log.warning("g(1) >= 1; reporting p_s = 1")
        return PsSolution(1.0, g(1.0) - 1.0, method)
    if g(PS_FLOOR) <= PS_FLOOR:
        log.warning("g(%g) <= %g; reporting the floor", PS_FLOOR, PS_FLOOR)
        return PsSolution(PS_FLOOR, abs(g(PS_FLOOR) - PS_FLOOR), method)

    ps = optimize.bisect(lambda x: g(x) - x, PS_FLOOR, 1.0, xtol=PS_XTOL, maxiter=200)
    residual = abs(g(ps) - ps)
    if residual > PS_RESIDUAL:
        log.warning("p_s residual %.2e above %.0e", residual, PS_RESIDUAL)
    return PsSolution(ps, residual, method)


def critical_xi(config, method="exact"):
    """sup{xi : xi <= p * p_s(xi)} with p_s re-solved at each candidate."""
    p = config.access_p
    kernel = None if config.lam == 0.0 else success_kernel(config, method)

    def gap(xi):
        return xi - p * solve_ps(config, method, kernel, xi=xi).p_s

    lo = 1e-9 * p
    if gap(p) <= 0.0:
        xi_c = p
    elif gap(lo) >= 0.0:
        log.warning("p * p_s vanishes near xi = 0; reporting floor %g", lo)
        xi_c = lo
    else:
        xi_c = optimize.bisect(gap, lo, p, xtol=XI_XTOL, maxiter=200)
    solution = solve_ps(config, method, kernel, xi=xi_c)
    return StabilityResult(solution.p_s, xi_c, abs(xi_c - p * solution.p_s))


def is_stable(config, p_s):
    return config.xi < config.access_p * p_s


# -------------------------------------------------------------------
# 3. Network AoI
# -------------------------------------------------------------------
@dataclass(frozen=True)
class AoiPrediction:
    avg_fcfs: float
    peak_fcfs: float
    avg_lcfs: float
    peak_lcfs: float
    method: Method
    p_s: float = math.nan
    mass_below: float = 0.0
    avg_fcfs_stable: float = math.nan
    peak_fcfs_stable: float = math.nan

    def as_row(self):
        return {
            "avg_fcfs": self.avg_fcfs,
            "peak_fcfs": self.peak_fcfs,
            "avg_lcfs": self.avg_lcfs,
            "peak_lcfs": self.peak_lcfs,
            "avg_fcfs_stable": self.avg_fcfs_stable,
            "peak_fcfs_stable": self.peak_fcfs_stable,
            "mass_below": self.mass_below,
        }


def _lcfs_peak_term(xi, service_t, t, variant):
    if LcfsPeak(variant) is LcfsPeak.ARRIVAL:
        return 1.0 / (1.0 - (1.0 - xi) * (1.0 - xi * t))
    return 1.0 / (1.0 - (1.0 - xi) * (1.0 - service_t))


def aoi_predict(config, meta=None, method=Method.BETA_META, lcfs_peak=LcfsPeak.SERVICE, p_s=None):
    """Average and peak AoI of the typical link under both disciplines.

    For the meta methods the conditional formulas are integrated against the
    law of the link success probability over t in (xi/p, 1]; any mass at or
    below xi/p makes the FCFS values infinite. The `_stable` FCFS values
    condition on t > (xi/p)(1 + STABLE_MARGIN) instead and stay finite; they
    equal the plain FCFS values when no mass lies below xi/p. `mean_approx`
    plugs p_s in directly.
    """
    method = Method(method)
    xi, p = config.xi, config.access_p
    if p_s is None:
        p_s = solve_ps(config).p_s
    if not is_stable(config, p_s):
        raise UnstableError(f"unstable: AoI infinite (xi={xi:g} >= p*p_s={p * p_s:.6g})")

    if method is Method.MEAN_APPROX:
        service = p * p_s
        fcfs = cond_aoi_fcfs(xi, service)
        lcfs = cond_aoi_lcfs(xi, service)
        lcfs_peak_value = lcfs.avg + _lcfs_peak_term(xi, service, p_s, lcfs_peak) - 1.0
        return AoiPrediction(fcfs.avg, fcfs.peak, lcfs.avg, lcfs_peak_value, method, p_s,
                             avg_fcfs_stable=fcfs.avg, peak_fcfs_stable=fcfs.peak)

    if meta is None:
        raise ValueError(f"method {method.value} needs a meta distribution")
    lower = xi / p

    def terms(t):
        s = p * t
        return np.stack([
            1.0 / (s - xi),
            1.0 / s,
            1.0 / s ** 2,
            _lcfs_peak_term(xi, s, t, lcfs_peak),
        ])

    values, mass_below = meta.expect(terms, lower)
    if values is None:
        raise UnstableError(f"unstable: all success-probability mass lies below xi/p={lower:g}")
    e_pole, e_inv, e_inv2, e_peak = (float(v) for v in values)

    avg_lcfs = 1.0 / xi + e_inv - 1.0
    peak_lcfs = 1.0 / xi + e_inv + e_peak - 2.0
    if mass_below > MASS_TOL:
        log.warning("mass %.3g at or below xi/p; FCFS AoI is infinite", mass_below)
        avg_fcfs = peak_fcfs = math.inf
        avg_stable, peak_stable = _stable_fcfs(meta, terms, xi, lower * (1.0 + STABLE_MARGIN))
    else:
        avg_fcfs, peak_fcfs = _fcfs_from_moments(xi, e_pole, e_inv, e_inv2)
        avg_stable, peak_stable = avg_fcfs, peak_fcfs
    return AoiPrediction(avg_fcfs, peak_fcfs, avg_lcfs, peak_lcfs, method, p_s, mass_below,
                         avg_fcfs_stable=avg_stable, peak_fcfs_stable=peak_stable)


def _fcfs_from_moments(xi, e_pole, e_inv, e_inv2):
    peak = 1.0 / xi + (1.0 - xi) * e_pole
    return peak + xi * e_inv - xi * e_inv2 - 1.0, peak


def _stable_fcfs(meta, terms, xi, cutoff):
    """FCFS (avg, peak) over links with success probability above `cutoff`."""
    values, mass_below = meta.expect(terms, cutoff)
    share = 1.0 - mass_below
    if values is None or share <= 0.0:
        return math.inf, math.inf
    e_pole, e_inv, e_inv2 = (float(v) / share for v in values[:3])
    return _fcfs_from_moments(xi, e_pole, e_inv, e_inv2)


# -------------------------------------------------------------------
# 4. Limiting regimes
# -------------------------------------------------------------------
def dominant_integral(alpha):
    """int_0^inf dv / (1 + v^(alpha/2)) = pi delta / sin(pi delta)."""
    delta = 2.0 / alpha
    return math.pi * delta / math.sin(math.pi * delta)


def dominant_integral_numeric(alpha):
    value, _ = integrate.quad(lambda v: 1.0 / (1.0 + v ** (0.5 * alpha)), 0.0, math.inf)
    return value


def dominant_load(config):
    """lam pi r² theta^delta times the dominant integral: outage exponent per unit p."""
    return (config.lam * math.pi * config.link_distance_r ** 2
            * config.theta ** config.delta * dominant_integral(config.alpha))


def dominant_success_probability(config, p=None):
    """Success probability when every transmitter always has a packet."""
    p = config.access_p if p is None else p
    return math.exp(-config.noise_term - p * dominant_load(config))


def dominant_opt_p(config):
    load = dominant_load(config)
    return 1.0 if load <= 0.0 else min(1.0 / load, 1.0)


def throughput(config, p, method="exact"):
    return p * solve_ps(config.replace(access_p=p), method).p_s


def throughput_curve(config, grid, method="exact"):
    return np.array([throughput(config, float(p), method) for p in grid])


def optimal_access_p(config, grid=None, method="exact"):
    grid = np.linspace(0.02, 1.0, 50) if grid is None else np.asarray(grid)
    curve = throughput_curve(config, grid, method)
    return float(grid[int(np.argmax(curve))])


def throughput_derivative(config, p=None, step=1e-4, method="exact"):
    """d(p p_s)/dp by central difference, one-sided at p = 1."""
    p = config.access_p if p is None else p
    hi = min(p + step, 1.0)
    lo = max(hi - 2.0 * step, step)
    return (throughput(config, hi, method) - throughput(config, lo, method)) / (hi - lo)


def throughput_derivative_bound(config, p=None, method="exact"):
    """Lower bound (1 - p * load) * p_s on the throughput derivative."""
    p = config.access_p if p is None else p
    ps = solve_ps(config.replace(access_p=p), method).p_s
    return (1.0 - p * dominant_load(config)) * ps


SparseAoi = namedtuple("SparseAoi", "p_s avg_fcfs peak_fcfs avg_lcfs peak_lcfs")
SpecialCases = namedtuple("SpecialCases", "dominant_opt_p sparse_aoi_tuple throughput_derivative_sign "
                                          "dominant_integral dominant_integral_numeric derivative_bound")


def sparse_aoi(config):
    """AoI with no interferers; FCFS is infinite when the link itself is unstable."""
    ps = math.exp(-config.noise_term)
    service = config.access_p * ps
    lcfs = cond_aoi_lcfs(config.xi, service)
    if config.xi < service:
        fcfs = cond_aoi_fcfs(config.xi, service)
        return SparseAoi(ps, fcfs.avg, fcfs.peak, lcfs.avg, lcfs.peak)
    return SparseAoi(ps, math.inf, math.inf, lcfs.avg, lcfs.peak)


def special_cases(config, method="exact"):
    closed = dominant_integral(config.alpha)
    numeric = dominant_integral_numeric(config.alpha)
    if abs(closed - numeric) > 1e-6 * closed:
        raise NumericalError(f"dominant integral mismatch: {closed:.10g} vs {numeric:.10g}")
    derivative = throughput_derivative(config, method=method)
    return SpecialCases(
        dominant_opt_p=dominant_opt_p(config),
        sparse_aoi_tuple=sparse_aoi(config),
        throughput_derivative_sign=int(np.sign(derivative)),
        dominant_integral=closed,
        dominant_integral_numeric=numeric,
        derivative_bound=throughput_derivative_bound(config, method=method),
    )
