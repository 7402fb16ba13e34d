# =====================================================================
#  simulator.py — slotted ALOHA network with per-link AoI queues
# =====================================================================

import logging
import math
import multiprocessing
from collections import deque, namedtuple
from dataclasses import dataclass, field
from functools import partial

import numpy as np
import pandas as pd
from scipy import sparse, stats
from tqdm import tqdm

from config import Discipline
from geometry import build_pathloss, sample_nonempty
from rng import RngContract

log = logging.getLogger("simulator")

U_GRID = np.round(np.linspace(0.0, 1.0, 101), 2)
SLOT_CHUNK = 512
DRAW_BUDGET = 4_000_000  # random values held per stream block
SLOPE_THRESHOLD = 1e-3

LINK_COLUMNS = ["realization", "link_id", "avg_aoi", "peak_aoi", "mu_hat",
                "activity", "attempts", "resets", "queue_slope"]

DeliveryRecord = namedtuple("DeliveryRecord", "slot gen_time caused_reset")
Traffic = namedtuple("Traffic", "xi access_p")
SlotOutcome = namedtuple("SlotOutcome", "active success served gen_times fresh")


# -------------------------------------------------------------------
# 1. Link state
# -------------------------------------------------------------------
class LinkStates:
    """Dynamic state of every link, one array entry (or deque) per link."""

    def __init__(self, n_links, discipline, record_log=False):
        self.discipline = Discipline(discipline)
        self.queues = [deque() for _ in range(n_links)]
        self.queue_len = np.zeros(n_links, dtype=np.int64)
        self.active_now = np.zeros(n_links, dtype=bool)
        # A(t) at the start of the current slot
        self.aoi = np.ones(n_links, dtype=np.int64)
        self.last_delivered_gen_time = np.full(n_links, -1, dtype=np.int64)
        self.delivery_log = [[] for _ in range(n_links)] if record_log else None
        self.busy_slots = np.zeros(n_links, dtype=np.int64)
        self.elapsed_slots = 0
        self.arrivals = np.zeros(n_links, dtype=np.int64)
        self.departures = np.zeros(n_links, dtype=np.int64)

    @property
    def n_links(self):
        return len(self.queues)

    def push(self, idx, t):
        for i in idx:
            self.queues[i].append(t)
        self.queue_len[idx] += 1
        self.arrivals[idx] += 1

    def pop(self, idx):
        """Remove the packet each link in idx transmits: head (FCFS) or newest (LCFS-PR)."""
        if self.discipline is Discipline.FCFS:
            take = deque.popleft
        else:
            take = deque.pop
        gen = np.fromiter((take(self.queues[i]) for i in idx), dtype=np.int64, count=len(idx))
        self.queue_len[idx] -= 1
        self.departures[idx] += 1
        return gen


# -------------------------------------------------------------------
# 2. Channels
# -------------------------------------------------------------------
class FixedChannel:
    """Each attempt succeeds with a fixed per-link probability."""

    draw_kind = "uniform"

    def __init__(self, success_prob, n_links):
        self.success_prob = np.broadcast_to(np.asarray(success_prob, dtype=float), (n_links,))
        self.draw_width = n_links

    def success(self, active, draw):
        return active & (draw < self.success_prob)


class SinrChannel:
    """Rayleigh-faded SINR test against theta over a culled deployment.

    "explicit" draws an Exp(1) fade for every (transmitter, receiver) entry of
    the pathloss table each slot and evaluates the SINR. "marginal" uses one
    uniform per receiver against the success probability conditioned on the
    active set, exp(-theta r^a / rho) * prod_j 1 / (1 + theta g_ji / g_ii),
    which has the same law because fades are independent across receivers.
    """

    def __init__(self, deployment, config, fading="marginal"):
        if fading not in ("marginal", "explicit"):
            raise ValueError(f"unknown fading mode {fading!r}")
        gain = deployment.pathloss_to_rx.tocsr()
        n = gain.shape[0]
        self.fading = fading
        self.theta = config.theta
        self.signal = gain.diagonal().copy()
        self.noise = config.noise_power / config.tx_power

        cross = gain.copy()
        cross.setdiag(0.0)
        cross.eliminate_zeros()
        self.cross = cross

        if fading == "marginal":
            rows = np.repeat(np.arange(n), np.diff(cross.indptr))
            log_factor = np.log1p(self.theta * cross.data / self.signal[rows])
            self.log_outage = sparse.csr_matrix((log_factor, cross.indices, cross.indptr), shape=cross.shape)
            self.noise_exponent = self.theta * self.noise / self.signal
            self.draw_kind = "uniform"
            self.draw_width = n
        else:
            self.draw_kind = "exponential"
            self.draw_width = n + cross.nnz

    def success_probability(self, active):
        load = self.log_outage @ active.astype(float)
        return np.exp(-self.noise_exponent - load)

    def sinr(self, active, fades):
        n = len(self.signal)
        faded = sparse.csr_matrix((self.cross.data * fades[n:], self.cross.indices, self.cross.indptr),
                                  shape=self.cross.shape)
        interference = faded @ active.astype(float)
        return self.signal * fades[:n] / (interference + self.noise)

    def success(self, active, draw):
        if self.fading == "marginal":
            return active & (draw < self.success_probability(active))
        return active & (self.sinr(active, draw) > self.theta)


# -------------------------------------------------------------------
# 3. Random draws
# -------------------------------------------------------------------
class SlotDraws:
    """Per-slot random vectors, generated in fixed blocks of slots.

    Row t of each stream belongs to slot t and column i to link i (or to
    pathloss entry i for explicit fading), so which links happen to be active
    never shifts anybody else's draws.
    """

    def __init__(self, rng, realization, n_links, channel):
        self._arrival = rng.stream(realization, "arrival")
        self._access = rng.stream(realization, "access")
        self._channel = rng.stream(realization, "channel")
        self.n_links = n_links
        self.channel_kind = channel.draw_kind
        self.channel_width = channel.draw_width
        self.chunk = max(1, min(SLOT_CHUNK, DRAW_BUDGET // max(n_links, self.channel_width)))
        self._start = None

    def _refill(self, start):
        shape = (self.chunk, self.n_links)
        self.arrival = self._arrival.random(shape)
        self.access = self._access.random(shape)
        if self.channel_kind == "uniform":
            self.channel = self._channel.random((self.chunk, self.channel_width))
        else:
            self.channel = self._channel.standard_exponential((self.chunk, self.channel_width))
        self._start = start

    def slot(self, t):
        if self._start is None or t >= self._start + self.chunk:
            self._refill(t - t % self.chunk)
        row = t - self._start
        return self.arrival[row], self.access[row], self.channel[row]


# -------------------------------------------------------------------
# 4. Slot dynamics
# -------------------------------------------------------------------
class WindowStats:
    """Accumulators over the measurement window."""

    def __init__(self, n_links, slope_start):
        self.slots = 0
        self.aoi_sum = np.zeros(n_links)
        self.peak_sum = np.zeros(n_links)
        self.peak_count = np.zeros(n_links, dtype=np.int64)
        self.resets = np.zeros(n_links, dtype=np.int64)
        self.attempts = np.zeros(n_links, dtype=np.int64)
        self.successes = np.zeros(n_links, dtype=np.int64)
        self.busy = np.zeros(n_links, dtype=np.int64)
        self.slope_start = slope_start
        self.s_n = 0
        self.s_t = 0.0
        self.s_tt = 0.0
        self.s_q = np.zeros(n_links)
        self.s_tq = np.zeros(n_links)

    def queue_slope(self):
        """Least-squares slope of queue length against slot index."""
        denom = self.s_n * self.s_tt - self.s_t ** 2
        if self.s_n < 2 or denom <= 0.0:
            return np.zeros_like(self.s_q)
        return (self.s_n * self.s_tq - self.s_t * self.s_q) / denom


def step(states, channel, traffic, draws, t, *, saturate=False, peak_sampling="resetting", window=None):
    """Advance every link through slot t.

    Order inside the slot: Bernoulli(xi) arrival, Bernoulli(p) access for
    backlogged links (every link when `saturate`), channel outcome, departure
    (head under FCFS, newest under LCFS-PR) and the AoI update
    A(t+1) = min(t - G, A(t)) + 1 on delivery, A(t) + 1 otherwise.
    """
    arrival, access, channel_draw = draws.slot(t)

    states.push(np.flatnonzero(arrival < traffic.xi), t)
    nonempty = states.queue_len > 0
    gate = access < traffic.access_p
    active = gate if saturate else gate & nonempty
    states.active_now = active

    success = channel.success(active, channel_draw)
    served = np.flatnonzero(success & nonempty)

    aoi_now = states.aoi
    next_aoi = aoi_now + 1
    gen = states.pop(served)
    fresh = gen > states.last_delivered_gen_time[served]
    next_aoi[served] = np.minimum(t - gen, aoi_now[served]) + 1
    states.last_delivered_gen_time[served[fresh]] = gen[fresh]

    if states.delivery_log is not None:
        for i, g, f in zip(served.tolist(), gen.tolist(), fresh.tolist()):
            states.delivery_log[i].append(DeliveryRecord(t, g, f))

    states.busy_slots += nonempty
    states.elapsed_slots += 1

    if window is not None:
        window.slots += 1
        window.aoi_sum += aoi_now
        window.attempts += active
        window.successes += success
        window.busy += nonempty
        sampled = served if peak_sampling == "all" else served[fresh]
        window.peak_sum[sampled] += aoi_now[sampled]
        window.peak_count[sampled] += 1
        window.resets[served[fresh]] += 1
        if t >= window.slope_start:
            tau = float(t - window.slope_start)
            window.s_n += 1
            window.s_t += tau
            window.s_tt += tau * tau
            window.s_q += states.queue_len
            window.s_tq += tau * states.queue_len

    states.aoi = next_aoi
    return SlotOutcome(active, success, served, gen, fresh)


def run_slots(states, channel, traffic, draws, slots, warmup, *, saturate=False,
              peak_sampling="resetting", queue_cap=1_000_000):
    """Run `slots` steps; returns (window stats, slot at which the cap aborted or None).

    Slots are indexed from 0, so the window holds slot indices warmup .. slots-1:
    the first `warmup` slots are discarded and `slots - warmup` are measured.
    """
    slope_start = warmup + (slots - warmup) // 2
    window = WindowStats(states.n_links, slope_start)
    for t in range(slots):
        measured = t >= warmup
        step(states, channel, traffic, draws, t, saturate=saturate, peak_sampling=peak_sampling,
             window=window if measured else None)
        if states.queue_len.max(initial=0) > queue_cap:
            log.warning("queue cap %d exceeded at slot %d, aborting realization", queue_cap, t)
            return window, t
    return window, None


# -------------------------------------------------------------------
# 5. Results
# -------------------------------------------------------------------
@dataclass
class SimResults:
    realization: np.ndarray
    link_id: np.ndarray
    avg_aoi: np.ndarray
    peak_aoi: np.ndarray
    mu_hat: np.ndarray
    activity: np.ndarray
    attempts: np.ndarray
    resets: np.ndarray
    queue_slope: np.ndarray
    arrivals: np.ndarray
    departures: np.ndarray
    final_queue: np.ndarray
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_window(cls, window, states, realization, *, min_attempts, min_resets, metadata):
        n = states.n_links
        measured = max(window.slots, 1)
        with np.errstate(invalid="ignore", divide="ignore"):
            peak = np.where(window.peak_count >= min_resets, window.peak_sum / window.peak_count, np.nan)
            mu = np.where(window.attempts >= min_attempts, window.successes / window.attempts, np.nan)
        return cls(
            realization=np.full(n, realization, dtype=np.int64),
            link_id=np.arange(n, dtype=np.int64),
            avg_aoi=window.aoi_sum / measured,
            peak_aoi=peak,
            mu_hat=mu,
            activity=window.busy / measured,
            attempts=window.attempts.copy(),
            resets=window.resets.copy(),
            queue_slope=window.queue_slope(),
            arrivals=states.arrivals.copy(),
            departures=states.departures.copy(),
            final_queue=states.queue_len.copy(),
            metadata=metadata,
        )

    @classmethod
    def merge(cls, parts):
        """Concatenate per-realization results in the given order."""
        parts = list(parts)
        arrays = {name: np.concatenate([getattr(p, name) for p in parts])
                  for name in cls.__dataclass_fields__ if name != "metadata"}
        first = parts[0].metadata
        metadata = {
            "seed": first.get("seed"),
            "slots": first.get("slots"),
            "warmup": first.get("warmup"),
            "discipline": first.get("discipline"),
            "realizations": [r for p in parts for r in p.metadata.get("realizations", [])],
            "resample_events": sum(p.metadata.get("resample_events", 0) for p in parts),
            "aborted": [r for p in parts for r in p.metadata.get("aborted", [])],
        }
        return cls(**arrays, metadata=metadata)

    @property
    def n_realizations(self):
        return len(self.metadata.get("realizations", []))

    @property
    def network_avg_aoi(self):
        if self.metadata.get("aborted"):
            return math.inf
        return float(np.mean(self.avg_aoi))

    @property
    def network_peak_aoi(self):
        if self.metadata.get("aborted"):
            return math.inf
        if np.all(np.isnan(self.peak_aoi)):
            return math.nan
        return float(np.nanmean(self.peak_aoi))

    @property
    def no_reset_links(self):
        return int(np.sum(self.resets == 0))

    @property
    def excluded_mu_links(self):
        return int(np.sum(np.isnan(self.mu_hat)))

    @property
    def median_queue_slope(self):
        return float(np.median(self.queue_slope))

    def is_unstable(self, threshold=SLOPE_THRESHOLD):
        return bool(self.metadata.get("aborted")) or self.median_queue_slope > threshold

    def empirical_mu_cdf(self, grid=U_GRID):
        mu = self.mu_hat[~np.isnan(self.mu_hat)]
        if mu.size == 0:
            return np.full(len(grid), np.nan)
        mu = np.sort(mu)
        return np.searchsorted(mu, grid, side="right") / mu.size

    def links_frame(self):
        return pd.DataFrame({name: getattr(self, name) for name in LINK_COLUMNS})

    def _realization_means(self):
        frame = pd.DataFrame({"realization": self.realization, "avg": self.avg_aoi, "peak": self.peak_aoi})
        return frame.groupby("realization", sort=True).mean()

    def summary(self, threshold=SLOPE_THRESHOLD):
        """Network aggregates with 95% half-widths across realizations."""
        unstable = self.is_unstable(threshold)
        per_real = self._realization_means()
        count = len(per_real)
        quantile = stats.t.ppf(0.975, count - 1) if count > 1 else math.nan

        def half_width(values):
            values = values[~np.isnan(values)]
            if unstable or values.size < 2:
                return math.nan
            return float(quantile * np.std(values, ddof=1) / math.sqrt(values.size))

        return {
            "realizations": self.n_realizations,
            "links": int(len(self.link_id)),
            "network_avg_aoi": math.inf if unstable else self.network_avg_aoi,
            "network_avg_aoi_hw": half_width(per_real["avg"].to_numpy()),
            "network_peak_aoi": math.inf if unstable else self.network_peak_aoi,
            "network_peak_aoi_hw": half_width(per_real["peak"].to_numpy()),
            "mean_mu_hat": float(np.nanmean(self.mu_hat)) if self.excluded_mu_links < len(self.mu_hat) else math.nan,
            "mean_activity": float(np.mean(self.activity)),
            "median_queue_slope": self.median_queue_slope,
            "excluded_mu_links": self.excluded_mu_links,
            "no_reset_links": self.no_reset_links,
            "resample_events": int(self.metadata.get("resample_events", 0)),
            "unstable": unstable,
        }


# -------------------------------------------------------------------
# 6. Network runs
# -------------------------------------------------------------------
def run_realization(config, sim, rng, realization=0, *, saturate=False, record_log=False, states_out=None):
    """Sample a deployment and run `sim.slots` slots on it."""
    deployment = sample_nonempty(config, rng, realization)
    deployment = build_pathloss(deployment, config, sim.culling_radius)
    channel = SinrChannel(deployment, config, sim.fading)
    states = LinkStates(deployment.n_links, config.discipline, record_log=record_log)
    draws = SlotDraws(rng, realization, deployment.n_links, channel)
    traffic = Traffic(config.xi, config.access_p)

    window, aborted_at = run_slots(states, channel, traffic, draws, sim.slots, sim.warmup_slots,
                                   saturate=saturate, peak_sampling=sim.peak_sampling,
                                   queue_cap=sim.queue_cap)
    if states_out is not None:
        states_out.append(states)
    metadata = {
        "seed": rng.master_seed,
        "slots": sim.slots,
        "warmup": sim.warmup_slots,
        "discipline": config.discipline.value,
        "realizations": [realization],
        "resample_events": deployment.resamples,
        "aborted": [realization] if aborted_at is not None else [],
    }
    return SimResults.from_window(window, states, realization, min_attempts=sim.min_attempts,
                                  min_resets=sim.min_resets, metadata=metadata)


def _realization_task(config, sim, saturate, realization):
    return run_realization(config, sim, RngContract(sim.seed), realization, saturate=saturate)


def simulate_network(config, sim, workers=1, *, saturate=False, progress=False, realizations=None):
    """Run realizations 0..n-1, in a process pool when workers > 1."""
    indices = list(range(sim.realizations if realizations is None else realizations))
    if not indices:
        raise ValueError("at least one realization is required")
    task = partial(_realization_task, config, sim, saturate)
    log.info("simulating %d realizations x %d slots (%s, xi=%.4g, workers=%d)",
             len(indices), sim.slots, config.discipline.value, config.xi, workers)
    if workers <= 1:
        parts = [task(i) for i in tqdm(indices, desc="realizations", disable=not progress)]
    else:
        with multiprocessing.Pool(workers) as pool:
            parts = list(tqdm(pool.imap(task, indices), total=len(indices),
                              desc="realizations", disable=not progress))
    return SimResults.merge(parts)


MuCdf = namedtuple("MuCdf", "u F included excluded")


def estimate_mu_cdf(config, sim, grid=U_GRID, workers=1, *, saturate=False, results=None):
    """Pooled CDF of per-link success ratios (links with enough attempts)."""
    results = results or simulate_network(config, sim, workers, saturate=saturate)
    included = int(np.sum(~np.isnan(results.mu_hat)))
    return MuCdf(np.asarray(grid), results.empirical_mu_cdf(grid), included, results.excluded_mu_links)


StabilityVerdict = namedtuple("StabilityVerdict", "median_slope unstable queue_slope aborted")


def stability_probe(config, sim, slots=100_000, realizations=1, workers=1, threshold=SLOPE_THRESHOLD):
    """Queue-growth check: slopes are fitted over the second half of the run."""
    settings = sim.replace(slots=int(slots), warmup_slots=0, realizations=realizations)
    results = simulate_network(config, settings, workers)
    median = results.median_queue_slope
    aborted = bool(results.metadata.get("aborted"))
    verdict = StabilityVerdict(median, aborted or median > threshold, results.queue_slope, aborted)
    log.info("stability check xi=%.4g: median slope %.3e -> %s",
             config.xi, median, "unstable" if verdict.unstable else "stable")
    return verdict


# -------------------------------------------------------------------
# 7. Isolated Geo/Geo/1 queues
# -------------------------------------------------------------------
def simulate_single_queue(xi, service, discipline, slots, warmup=None, seed=0,
                          peak_sampling="resetting", access_p=1.0):
    """Independent single-server queues with fixed per-slot service probability.

    `xi`, `service` and `access_p` broadcast to one entry per queue; the
    attempt succeeds with probability `service` once access is granted.
    Returns one row per queue.
    """
    xi, service, access_p = np.broadcast_arrays(np.atleast_1d(np.asarray(xi, dtype=float)),
                                                np.asarray(service, dtype=float),
                                                np.asarray(access_p, dtype=float))
    n = len(xi)
    warmup = min(max(slots // 5, 2000), slots // 2) if warmup is None else warmup
    channel = FixedChannel(service, n)
    states = LinkStates(n, discipline)
    draws = SlotDraws(RngContract(seed), 0, n, channel)
    window, _ = run_slots(states, channel, Traffic(xi, access_p), draws, slots, warmup,
                          peak_sampling=peak_sampling, queue_cap=max(slots, 1))
    measured = max(window.slots, 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return pd.DataFrame({
            "xi": xi,
            "service": service * access_p,
            "avg_aoi": window.aoi_sum / measured,
            "peak_aoi": window.peak_sum / window.peak_count,
            "activity": window.busy / measured,
            "mu_hat": window.successes / window.attempts,
            "arrivals": states.arrivals,
            "departures": states.departures,
            "final_queue": states.queue_len,
        })
