# =====================================================================
#  meta_distribution.py — distribution of the per-link success probability
# =====================================================================

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import stats
from scipy.special import betainc, betaln, binom, digamma, gammaln, loggamma, polygamma

from analytic import h_theta
from errors import NumericalError
from quadrature import N_ANGULAR, angular_crowding, angular_nodes, clustered_nodes, legendre_nodes, radial_nodes, refine

log = logging.getLogger("meta")

PICARD_TOL = 1e-6
EXACT_TOL = 1e-4
MAX_ITERATIONS = 50
VARIANCE_FLOOR = 1e-14
FINE_SEGMENTS = 2000
EXACT_GRID = np.linspace(0.0, 1.0, 401)


class MetaKind(str, Enum):
    BETA = "beta"
    TABULATED = "tabulated"
    DEGENERATE = "degenerate"


# -------------------------------------------------------------------
# 1. Moment matching
# -------------------------------------------------------------------
def match_beta(c1, c2):
    """Beta shapes (a, b) with mean c1 and second moment c2; None for zero variance."""
    variance = c2 - c1 * c1
    if variance <= VARIANCE_FLOOR:
        return None
    total = c1 * (1.0 - c1) / variance - 1.0
    if total <= 0.0:
        raise NumericalError(f"moments c1={c1:.6g}, c2={c2:.6g} admit no Beta fit")
    return c1 * total, (1.0 - c1) * total


def kolmogorov_distance(F1, F2):
    return float(np.nanmax(np.abs(np.asarray(F1) - np.asarray(F2))))


@dataclass(frozen=True)
class MetaDistribution:
    kind: MetaKind
    moments: tuple
    shape_a: float = None
    shape_b: float = None
    point: float = None
    cdf_u: np.ndarray = None
    cdf_F: np.ndarray = None
    iterations_used: int = 0
    converged_residual: float = 0.0

    @classmethod
    def degenerate(cls, m, **kw):
        return cls(MetaKind.DEGENERATE, (m, m * m), point=float(m), **kw)

    @classmethod
    def beta(cls, a, b, **kw):
        m = a / (a + b)
        c2 = a * (a + 1.0) / ((a + b) * (a + b + 1.0))
        return cls(MetaKind.BETA, (m, c2), shape_a=float(a), shape_b=float(b), **kw)

    @classmethod
    def from_moments(cls, c1, c2, **kw):
        shapes = match_beta(c1, c2)
        if shapes is None:
            return cls.degenerate(c1, **kw)
        return cls(MetaKind.BETA, (c1, c2), shape_a=shapes[0], shape_b=shapes[1], **kw)

    @classmethod
    def tabulated(cls, u, F, moments, **kw):
        F = np.maximum.accumulate(np.clip(np.asarray(F, dtype=float), 0.0, 1.0))
        F[0], F[-1] = 0.0, 1.0
        return cls(MetaKind.TABULATED, tuple(moments), cdf_u=np.asarray(u, dtype=float), cdf_F=F, **kw)

    # Beta parameterization by mean and b
    @property
    def beta_kappa(self):
        return self.moments[0] if self.kind is MetaKind.BETA else None

    @property
    def beta_beta(self):
        return self.shape_b

    @property
    def mean(self):
        return self.moments[0]

    def cdf(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind is MetaKind.BETA:
            return stats.beta.cdf(u, self.shape_a, self.shape_b)
        if self.kind is MetaKind.DEGENERATE:
            return (u >= self.point).astype(float)
        return np.interp(u, self.cdf_u, self.cdf_F)

    def pdf(self, u):
        if self.kind is not MetaKind.BETA:
            raise TypeError("pdf is only defined for the Beta kind")
        return stats.beta.pdf(u, self.shape_a, self.shape_b)

    def segments(self):
        """(midpoint, mass) pairs partitioning [0, 1]."""
        if self.kind is MetaKind.DEGENERATE:
            return np.array([self.point]), np.array([1.0])
        if self.kind is MetaKind.TABULATED:
            u, F = self.cdf_u, self.cdf_F
        else:
            u = np.linspace(0.0, 1.0, FINE_SEGMENTS + 1)
            F = self.cdf(u)
        return 0.5 * (u[:-1] + u[1:]), np.diff(F)

    def activity_moment(self, h, k):
        """E[min(h / mu, 1)^k] for thresholds h (any shape)."""
        h = np.asarray(h, dtype=float)
        if self.kind is MetaKind.DEGENERATE:
            return np.minimum(h / self.point, 1.0) ** k
        hc = np.clip(h, 0.0, 1.0)
        if self.kind is MetaKind.BETA and self.shape_a > k:
            a, b = self.shape_a, self.shape_b
            ratio = math.exp(betaln(a - k, b) - betaln(a, b))
            return betainc(a, b, hc) + hc ** k * ratio * (1.0 - betainc(a - k, b, hc))
        t, dF = self.segments()
        below = np.concatenate(([0.0], np.cumsum(dF)))
        tail = np.concatenate((np.cumsum((t ** -float(k) * dF)[::-1])[::-1], [0.0]))
        idx = np.searchsorted(t, hc, side="right")
        return below[idx] + hc ** k * tail[idx]

    def expect(self, fn, lower, rtol=1e-6):
        """Integrate fn(t) dF(t) over (lower, 1]; returns (values, mass at or below lower).

        `fn` maps an array of t to an array whose last axis runs over t.
        """
        mass_below = float(self.cdf(lower))
        if self.kind is MetaKind.DEGENERATE:
            if self.point <= lower:
                return None, 1.0
            return np.asarray(fn(np.array([self.point])))[..., 0], 0.0
        if self.kind is MetaKind.TABULATED:
            t, dF = self.segments()
            keep = t > lower
            return np.sum(np.asarray(fn(t[keep])) * dF[keep], axis=-1), mass_below

        if lower >= 1.0:
            return None, 1.0
        a, b = self.shape_a, self.shape_b
        mid = 0.5 * (lower + 1.0)
        gap = 1.0 - mid
        # u^(1/b) substitution near 1 absorbs the (1 - t)^(b-1) endpoint factor
        power = 1.0 / min(b, 1.0)
        log_norm = betaln(a, b)

        def evaluate(n):
            t_low, w_low = clustered_nodes(lower, mid, n)
            u, w_u = legendre_nodes(0.0, 1.0, n)
            log_tail = math.log(gap) + power * np.log(u)
            t_high = -np.expm1(log_tail)
            log_weight = ((a - 1.0) * np.log1p(-np.exp(log_tail)) + (b - 1.0) * log_tail - log_norm
                          + math.log(gap * power) + (power - 1.0) * np.log(u))
            low = np.sum(np.asarray(fn(t_low)) * self.pdf(t_low) * w_low, axis=-1)
            high = np.sum(np.asarray(fn(t_high)) * np.exp(log_weight) * w_u, axis=-1)
            return low + high

        try:
            value, _ = refine(evaluate, n0=64, rtol=rtol, max_n=8192)
        except NumericalError as e:
            log.warning("endpoint integral not settled (%s); using 8192 nodes", e)
            value = evaluate(8192)
        return value, mass_below


# -------------------------------------------------------------------
# 2. Interferer load
# -------------------------------------------------------------------
def initial_eta(config, k):
    """Load integral of order k when every interferer transmits at rate xi*p."""
    delta = config.delta
    return (abs(binom(delta - 1.0, k - 1))
            * 2.0 * math.pi ** 2 * config.theta ** delta * (config.xi * config.access_p) ** k
            / (config.alpha * math.sin(math.pi * delta)))


def moments_from_eta(config, eta1, eta2):
    scale = config.lam * config.link_distance_r ** 2
    c1 = math.exp(-config.noise_term - scale * eta1)
    c2 = math.exp(-2.0 * config.noise_term - scale * (2.0 * eta1 - eta2))
    return c1, c2


class LoadGeometry:
    """Angular quantities of an interferer at normalized distance v from the receiver.

    `attempt[i, j]` is p / (1 + D) for the interferer's own orientation psi_j
    and `threshold[i, j]` the activity threshold H(v_i, phi_j, p) set by the
    typical transmitter's position relative to the interferer's receiver.
    An interferer with success probability mu is busy with probability
    min(H / mu, 1) given the typical link transmits.
    """

    def __init__(self, config, n_radial, n_angular=N_ANGULAR):
        v, w = radial_nodes(n_radial)
        phi, dphi = angular_nodes(n_angular, angular_crowding(config.theta, config.alpha))
        base = np.maximum(1.0 + v[:, None] ** 2 - 2.0 * v[:, None] * np.cos(phi)[None, :], 0.0)
        spread = base ** (0.5 * config.alpha) / config.theta
        p = config.access_p
        self.attempt = p / (1.0 + spread)
        with np.errstate(divide="ignore"):
            self.threshold = h_theta(v[:, None], phi[None, :], p,
                                     xi=config.xi, theta=config.theta, alpha=config.alpha)
        self.radial_weight = w * v
        self.dpsi = dphi
        self.share = dphi / (2.0 * math.pi)
        self.n_radial = n_radial

    def eta(self, meta, k):
        angular = np.sum(self.attempt ** k * self.dpsi, axis=1)
        busy = meta.activity_moment(self.threshold, k) @ self.share
        return float(np.sum(self.radial_weight * angular * busy))

    def load_measure(self, meta, n_q=512, n_y=4096):
        """Bin the per-interferer outage factors x = p q / (1 + D) into a weighted measure."""
        t, dF = meta.segments()
        keep = dF > 0.0
        t, dF = t[keep], dF[keep]
        q_lo = max(float(np.min(self.threshold)), 1e-12)
        q_edges = np.linspace(min(q_lo, 1.0 - 1e-9), 1.0, n_q + 1)
        xs, ws = [], []
        for i in range(self.n_radial):
            H = self.threshold[i][:, None]
            busy = np.broadcast_to(t[None, :] <= H, (len(H), len(t)))
            q = np.where(busy, 1.0, H / t[None, :])
            mass = self.share[:, None] * dF[None, :]
            atom = float(np.sum(mass[q >= 1.0]))
            partial_mask = q < 1.0
            q_mass, _ = np.histogram(q[partial_mask], bins=q_edges, weights=mass[partial_mask])
            q_sum, _ = np.histogram(q[partial_mask], bins=q_edges, weights=(q * mass)[partial_mask])
            nz = q_mass > 0.0
            q_vals = np.concatenate((q_sum[nz] / q_mass[nz], [1.0]))
            q_w = np.concatenate((q_mass[nz], [atom]))
            xs.append((self.attempt[i][:, None] * q_vals[None, :]).ravel())
            ws.append((self.radial_weight[i] * self.dpsi[:, None] * q_w[None, :]).ravel())
        return LoadMeasure.from_samples(np.concatenate(xs), np.concatenate(ws), n_y)


class LoadMeasure:
    """Weighted outage factors x with y = -ln(1 - x).

    For interferers of intensity lam r² over this measure,
    ln E[mu^s] = -s * noise - lam r² * sum w (1 - (1 - x)^s).
    """

    def __init__(self, x, y, w):
        self.x, self.y, self.w = x, y, w

    @classmethod
    def from_samples(cls, x, w, n_bins=4096):
        keep = (w > 0.0) & (x > 0.0)
        x = np.minimum(x[keep], 1.0 - 1e-15)
        w = w[keep]
        y = -np.log1p(-x)
        edges = np.geomspace(max(float(y.min()), 1e-300), float(y.max()) * (1.0 + 1e-12), n_bins + 1)
        edges[0] = 0.0
        mass, _ = np.histogram(y, bins=edges, weights=w)
        y_sum, _ = np.histogram(y, bins=edges, weights=w * y)
        x_sum, _ = np.histogram(y, bins=edges, weights=w * x)
        nz = mass > 0.0
        return cls(x_sum[nz] / mass[nz], y_sum[nz] / mass[nz], mass[nz])

    def eta(self, k):
        return float(np.sum(self.w * self.x ** k))

    def exponent(self, s, chunk=2048):
        """sum w (1 - (1 - x)^s) for an array of complex s."""
        s = np.atleast_1d(np.asarray(s, dtype=complex))
        out = np.empty(s.shape, dtype=complex)
        for start in range(0, len(s), chunk):
            block = s[start:start + chunk]
            out[start:start + chunk] = (-np.expm1(-block[:, None] * self.y[None, :])) @ self.w
        return out

    def series_exponent(self, s, order):
        """Same quantity from the binomial expansion truncated after `order` terms."""
        s = np.atleast_1d(np.asarray(s, dtype=complex))
        k = np.arange(1, order + 1)
        eta = np.array([self.eta(j) for j in k])
        signs = np.where(k % 2 == 1, 1.0, -1.0)
        return complex_binomial(s, order) @ (signs * eta)

    def log_mgf(self, s, config):
        scale = config.lam * config.link_distance_r ** 2
        return -s * config.noise_term - scale * self.exponent(s)

    def moments(self, config):
        return tuple(float(np.real(np.exp(self.log_mgf(m, config)[0]))) for m in (1.0, 2.0))


def complex_binomial(s, order):
    """binom(s, k) for k = 1..order, via log-gamma; rows follow s."""
    s = np.atleast_1d(np.asarray(s, dtype=complex))[:, None]
    k = np.arange(1, order + 1)[None, :]
    return np.exp(loggamma(s + 1.0) - gammaln(k + 1.0) - loggamma(s - k + 1.0))


# -------------------------------------------------------------------
# 3. Characteristic-function inversion
# -------------------------------------------------------------------
def gil_pelaez_cdf(log_cf, u, mean, std, tol=EXACT_TOL, max_doublings=8, nodes_per_panel=8):
    """P(Y < ln u) from ln E[exp(j w Y)], Y = ln(mu).

    F(u) = 1/2 - (1/pi) int_0^inf Im{exp(-j w ln u) M(j w)} / w dw, truncated
    at Omega and doubled until two truncations agree to `tol`.
    """
    log_u = np.log(np.asarray(u, dtype=float))
    if std <= 0.0:
        raise NumericalError("zero-variance law has no smooth inversion")
    f_max = float(np.max(np.abs(log_u - mean))) + 10.0 * std
    width = 2.0 / f_max
    base_x, base_w = legendre_nodes(0.0, 1.0, nodes_per_panel)

    def integrate(a, b):
        panels = max(1, int(math.ceil((b - a) / width)))
        edges = np.linspace(a, b, panels + 1)
        h = np.diff(edges)
        omega = (edges[:-1, None] + h[:, None] * base_x[None, :]).ravel()
        weight = (h[:, None] * base_w[None, :]).ravel()
        total = np.zeros(len(log_u))
        for start in range(0, len(omega), 4096):
            w_blk = omega[start:start + 4096]
            cf = log_cf(w_blk)
            phase = np.exp(cf[None, :] - 1j * w_blk[None, :] * log_u[:, None])
            total += (phase.imag / w_blk[None, :]) @ weight[start:start + 4096]
        return total

    omega = 6.0 / std
    acc = integrate(0.0, omega)
    previous = 0.5 - acc / math.pi
    residuals = []
    for _ in range(max_doublings):
        acc = acc + integrate(omega, 2.0 * omega)
        omega *= 2.0
        current = 0.5 - acc / math.pi
        change = float(np.max(np.abs(current - previous)))
        residuals.append(change)
        if change < tol:
            return current
        previous = current
    raise NumericalError(f"Gil-Pelaez integral unsettled at Omega={omega:.3g}; "
                         "raise the cutoff or use the beta method", residuals)


def beta_log_cf(a, b):
    """ln E[X^{j w}] for X ~ Beta(a, b), with the mean and std of ln X."""
    const = gammaln(a + b) - gammaln(a)

    def log_cf(w):
        s = 1j * np.asarray(w, dtype=float)
        return loggamma(a + s) - loggamma(a + b + s) + const

    mean = float(digamma(a) - digamma(a + b))
    std = float(math.sqrt(polygamma(1, a) - polygamma(1, a + b)))
    return log_cf, mean, std


# -------------------------------------------------------------------
# 4. Fixed points
# -------------------------------------------------------------------
def _interference_free(config):
    return config.lam * config.link_distance_r ** 2 == 0.0


def initial_meta(config):
    c1, c2 = moments_from_eta(config, initial_eta(config, 1), initial_eta(config, 2))
    return MetaDistribution.from_moments(c1, c2)


def beta_meta(config, tol=PICARD_TOL, max_iterations=MAX_ITERATIONS, n_radial=None):
    """Beta approximation of the success-probability law by Picard iteration on (eta1, eta2)."""
    if _interference_free(config):
        return MetaDistribution.degenerate(math.exp(-config.noise_term))

    meta = initial_meta(config)
    eta = np.array([initial_eta(config, 1), initial_eta(config, 2)])
    if n_radial is None:
        _, n_radial = refine(lambda n: [LoadGeometry(config, n).eta(meta, k) for k in (1, 2)],
                             n0=32, rtol=1e-6, max_n=1024,
                             atol=1e-10 / (config.lam * config.link_distance_r ** 2))
    geometry = LoadGeometry(config, n_radial)

    trace = []
    for iteration in range(1, max_iterations + 1):
        new_eta = np.array([geometry.eta(meta, 1), geometry.eta(meta, 2)])
        residual = float(np.max(np.abs(new_eta - eta)))
        trace.append(residual)
        eta = new_eta
        c1, c2 = moments_from_eta(config, *eta)
        meta = MetaDistribution.from_moments(c1, c2, iterations_used=iteration,
                                             converged_residual=residual)
        if residual < tol:
            log.info("beta meta converged in %d iterations: c1=%.6f c2=%.6f a=%s b=%s",
                     iteration, c1, c2, meta.shape_a, meta.shape_b)
            return meta
    raise NumericalError(f"beta meta distribution did not converge in {max_iterations} iterations", trace)


def exact_meta_cdf(config, u_grid=None, tol=EXACT_TOL, max_iterations=MAX_ITERATIONS,
                   n_radial=48, n_angular=128, series_order=None, start=None):
    """Tabulated success-probability law by Picard iteration and Gil-Pelaez inversion.

    Each step rebuilds the interferer load measure against the previous CDF
    (Stieltjes sums on the tabulation grid) and inverts the resulting moment
    generating function. With `series_order` set, the exponent is taken from
    the binomial series truncated at that order instead of the direct sum;
    the series is only well conditioned for small |s|.
    """
    if _interference_free(config):
        return MetaDistribution.degenerate(math.exp(-config.noise_term))

    grid = EXACT_GRID if u_grid is None else np.asarray(u_grid, dtype=float)
    inner = grid[(grid > 0.0) & (grid < 1.0)]
    geometry = LoadGeometry(config, n_radial, n_angular)
    scale = config.lam * config.link_distance_r ** 2

    meta = start or initial_meta(config)
    previous = meta.cdf(grid)
    trace = []
    for iteration in range(1, max_iterations + 1):
        measure = geometry.load_measure(meta)
        if series_order:
            def log_cf(w, measure=measure):
                s = 1j * w
                return -s * config.noise_term - scale * measure.series_exponent(s, series_order)
        else:
            def log_cf(w, measure=measure):
                return measure.log_mgf(1j * w, config)

        mean = -config.noise_term - scale * float(np.sum(measure.w * measure.y))
        std = math.sqrt(scale * float(np.sum(measure.w * measure.y ** 2)))
        if std < 1e-9:
            return MetaDistribution.degenerate(math.exp(mean), iterations_used=iteration)

        F = np.empty(len(grid))
        F[grid <= 0.0] = 0.0
        F[grid >= 1.0] = 1.0
        F[(grid > 0.0) & (grid < 1.0)] = gil_pelaez_cdf(log_cf, inner, mean, std)
        residual = float(np.max(np.abs(np.maximum.accumulate(np.clip(F, 0.0, 1.0)) - previous)))
        trace.append(residual)
        meta = MetaDistribution.tabulated(grid, F, measure.moments(config),
                                          iterations_used=iteration, converged_residual=residual)
        previous = meta.cdf_F
        log.info("exact meta iteration %d: sup change %.2e, c1=%.6f", iteration, residual, meta.moments[0])
        if residual < tol:
            return meta
    raise NumericalError(f"exact meta distribution did not converge in {max_iterations} iterations", trace)
