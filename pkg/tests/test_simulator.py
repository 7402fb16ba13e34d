import math

import numpy as np
import pytest

from config import DEFAULT_NETWORK, Discipline, validate, validate_simulation
from geometry import build_pathloss, sample_nonempty
from rng import RngContract
from simulator import (FixedChannel, LinkStates, SinrChannel, SlotDraws, Traffic, estimate_mu_cdf,
                       run_realization, run_slots, simulate_network, stability_probe, step)


class ScriptedDraws:
    """Feeds fixed arrival/access/channel rows: 0.0 means "happens", 1.0 means "does not"."""

    def __init__(self, arrivals, channel, access=None):
        self.arrivals = np.asarray(arrivals, dtype=float)
        self.channel = np.asarray(channel, dtype=float)
        self.access = np.zeros_like(self.arrivals) if access is None else np.asarray(access, dtype=float)

    def slot(self, t):
        return self.arrivals[t], self.access[t], self.channel[t]


def _script(discipline):
    # arrivals in slots 0 and 1, successful attempts in slots 2 and 3
    draws = ScriptedDraws(arrivals=[[0.0], [0.0], [1.0], [1.0]], channel=[[1.0], [1.0], [0.0], [0.0]])
    states = LinkStates(1, discipline, record_log=True)
    channel = FixedChannel(0.5, 1)
    traffic = Traffic(0.5, 0.5)
    ages = []
    for t in range(4):
        ages.append(int(states.aoi[0]))
        step(states, channel, traffic, draws, t)
    ages.append(int(states.aoi[0]))
    return states, ages


def test_fcfs_serves_head_of_line():
    states, ages = _script(Discipline.FCFS)
    assert ages == [1, 2, 3, 3, 3]
    assert [r.gen_time for r in states.delivery_log[0]] == [0, 1]
    assert all(r.caused_reset for r in states.delivery_log[0])


def test_lcfs_serves_newest_and_stale_delivery_does_not_reset():
    states, ages = _script(Discipline.LCFS_PR)
    assert ages == [1, 2, 3, 2, 3]
    log = states.delivery_log[0]
    assert [r.gen_time for r in log] == [1, 0]
    assert [r.caused_reset for r in log] == [True, False]


def test_same_slot_delivery_resets_to_one():
    draws = ScriptedDraws(arrivals=[[0.0]] * 3, channel=[[0.0]] * 3)
    states = LinkStates(1, Discipline.FCFS)
    for t in range(3):
        step(states, FixedChannel(1.0, 1), Traffic(0.5, 0.5), draws, t)
    assert states.aoi[0] == 1
    assert states.queue_len[0] == 0


def test_empty_queue_does_not_transmit_unless_saturated():
    draws = ScriptedDraws(arrivals=[[1.0, 1.0]], channel=[[0.0, 0.0]])
    states = LinkStates(2, Discipline.FCFS)
    out = step(states, FixedChannel(1.0, 2), Traffic(0.5, 0.5), draws, 0)
    assert not out.active.any()
    states = LinkStates(2, Discipline.FCFS)
    out = step(states, FixedChannel(1.0, 2), Traffic(0.5, 0.5), draws, 0, saturate=True)
    assert out.active.all()
    assert len(out.served) == 0


def test_peak_sampling_all_includes_stale_deliveries():
    rows = dict(arrivals=[[0.0], [0.0], [1.0], [1.0]], channel=[[1.0], [1.0], [0.0], [0.0]])
    counts = {}
    for mode in ("resetting", "all"):
        states = LinkStates(1, Discipline.LCFS_PR)
        window, _ = run_slots(states, FixedChannel(0.5, 1), Traffic(0.5, 0.5), ScriptedDraws(**rows),
                              4, 0, peak_sampling=mode)
        counts[mode] = int(window.peak_count[0])
    assert counts == {"resetting": 1, "all": 2}


def _small(**overrides):
    return validate({**DEFAULT_NETWORK, "area_km2": 0.25, **overrides})


def _sim(**overrides):
    return validate_simulation({"slots": 800, "warmup_slots": 200, "realizations": 3, "seed": 17, **overrides})


def test_marginal_channel_matches_explicit_fading():
    config = _small(lambda_per_m2=4e-4)
    dep = build_pathloss(sample_nonempty(config, RngContract(2)), config)
    marginal = SinrChannel(dep, config, "marginal")
    explicit = SinrChannel(dep, config, "explicit")
    gen = np.random.default_rng(0)
    active = gen.random(dep.n_links) < 0.5
    trials = 4000
    hits = np.zeros(dep.n_links)
    for _ in range(trials):
        fades = gen.standard_exponential(explicit.draw_width)
        hits += explicit.success(active, fades)
    expected = marginal.success_probability(active) * active
    np.testing.assert_allclose(hits / trials, expected, atol=0.035)


def test_realization_is_reproducible():
    config, sim = _small(), _sim()
    a = run_realization(config, sim, RngContract(sim.seed), 1)
    b = run_realization(config, sim, RngContract(sim.seed), 1)
    np.testing.assert_array_equal(a.avg_aoi, b.avg_aoi)
    np.testing.assert_array_equal(a.mu_hat, b.mu_hat)


def test_parallel_run_matches_serial():
    config, sim = _small(), _sim()
    serial = simulate_network(config, sim, workers=1)
    parallel = simulate_network(config, sim, workers=2)
    assert serial.links_frame().equals(parallel.links_frame())
    assert serial.metadata["realizations"] == [0, 1, 2]


def test_results_fields_and_summary():
    config, sim = _small(), _sim(realizations=2)
    results = simulate_network(config, sim)
    summary = results.summary()
    assert summary["realizations"] == 2
    assert summary["links"] == len(results.link_id)
    assert math.isfinite(summary["network_avg_aoi"])
    assert summary["network_avg_aoi"] >= 1.0
    assert 0.0 < summary["mean_activity"] < 1.0
    assert not summary["unstable"]
    # every delivered packet arrived, nothing left the queue twice
    assert np.all(results.departures + results.final_queue == results.arrivals)


def test_overloaded_network_is_flagged_unstable():
    config = _small(xi=1.0, access_p=0.3)
    results = simulate_network(config, _sim(slots=4000, warmup_slots=1000, realizations=1))
    summary = results.summary()
    assert summary["unstable"]
    assert summary["network_avg_aoi"] == math.inf


def test_queue_cap_aborts():
    config = _small(xi=1.0, access_p=0.3)
    results = simulate_network(config, _sim(queue_cap=5, realizations=1))
    assert results.metadata["aborted"] == [0]
    assert results.network_avg_aoi == math.inf


def test_stability_probe_separates_regimes():
    stable = stability_probe(_small(xi=0.1), _sim(), slots=6000)
    unstable = stability_probe(_small(xi=1.0, access_p=0.3), _sim(), slots=6000)
    assert not stable.unstable
    assert unstable.unstable


def test_saturated_success_matches_dominant_system():
    from analytic import dominant_success_probability

    config = _small(lambda_per_m2=5e-4, area_km2=1.0)
    sim = _sim(slots=1500, warmup_slots=0, realizations=4, culling_radius_m=400.0)
    results = simulate_network(config, sim, saturate=True)
    assert np.nanmean(results.mu_hat) == pytest.approx(dominant_success_probability(config), abs=0.04)


def test_empirical_mu_cdf_is_a_cdf():
    config, sim = _small(), _sim()
    cdf = estimate_mu_cdf(config, sim)
    assert np.all(np.diff(cdf.F) >= 0.0)
    assert cdf.F[-1] == pytest.approx(1.0)
    assert cdf.included + cdf.excluded > 0


def _replay_ages(log, slots, warmup):
    """Rebuild the age sums from the delivery log: +1 per slot, reset to t - G + 1 on fresh delivery."""
    age, aoi_sum, peak_sum, previous_gen = 1, 0, 0, None
    resets = {r.slot: r.gen_time for r in log if r.caused_reset}
    for t in range(slots):
        if t >= warmup:
            aoi_sum += age
        if t in resets:
            if previous_gen is not None:
                assert age == t - previous_gen
            if t >= warmup:
                peak_sum += age
            previous_gen = resets[t]
            age = t - resets[t] + 1
        else:
            age += 1
    return aoi_sum, peak_sum


@pytest.mark.parametrize("discipline", [Discipline.FCFS, Discipline.LCFS_PR])
def test_age_sample_path_follows_delivery_log(discipline):
    n, slots, warmup = 3, 3000, 37
    channel = FixedChannel([0.6, 0.8, 0.45], n)
    states = LinkStates(n, discipline, record_log=True)
    draws = SlotDraws(RngContract(5), 0, n, channel)
    window, _ = run_slots(states, channel, Traffic(0.3, 1.0), draws, slots, warmup)
    for i in range(n):
        aoi_sum, peak_sum = _replay_ages(states.delivery_log[i], slots, warmup)
        assert window.aoi_sum[i] == aoi_sum
        assert window.peak_sum[i] == peak_sum


def test_window_skips_exactly_the_warmup_slots():
    draws = ScriptedDraws(arrivals=[[1.0]] * 10, channel=[[1.0]] * 10)
    states = LinkStates(1, Discipline.FCFS)
    window, _ = run_slots(states, FixedChannel(0.5, 1), Traffic(0.5, 0.5), draws, 10, 4)
    assert window.slots == 6
    # no deliveries: ages 1..10, the window holds slot indices 4..9
    assert window.aoi_sum[0] == sum(range(5, 11))


def test_saturated_channel_outcomes_do_not_depend_on_discipline():
    sim = _sim(realizations=1)
    runs = {}
    for discipline in (Discipline.FCFS, Discipline.LCFS_PR):
        config = _small(discipline=discipline.value)
        runs[discipline] = run_realization(config, sim, RngContract(sim.seed), 0, saturate=True)
    fcfs, lcfs = runs[Discipline.FCFS], runs[Discipline.LCFS_PR]
    np.testing.assert_array_equal(fcfs.attempts, lcfs.attempts)
    np.testing.assert_array_equal(fcfs.mu_hat, lcfs.mu_hat)
    np.testing.assert_array_equal(fcfs.activity, lcfs.activity)


def test_culled_success_probability_matches_full_interference():
    config = _small(area_km2=4.0)
    dep = sample_nonempty(config, RngContract(3))
    culled = SinrChannel(build_pathloss(dep, config), config)
    full = SinrChannel(build_pathloss(dep, config, culling_radius=1500.0), config)
    active = np.ones(dep.n_links, dtype=bool)
    ratio = culled.success_probability(active) / full.success_probability(active)
    assert np.all(ratio >= 1.0 - 1e-12)
    assert np.max(ratio - 1.0) < 0.005


@pytest.mark.slow
def test_busy_fraction_follows_littles_law():
    config = _small(area_km2=1.0, xi=0.2)
    results = simulate_network(config, _sim(slots=20000, warmup_slots=4000, realizations=2))
    predicted = config.xi / (config.access_p * results.mu_hat)
    stable = np.isfinite(predicted) & (predicted < 0.8)
    assert stable.sum() > 50
    error = np.abs(results.activity[stable] - predicted[stable]) / predicted[stable]
    assert np.median(error) < 0.05


@pytest.mark.slow
def test_stability_threshold_brackets_critical_rate():
    from analytic import critical_xi

    config = _small(area_km2=1.0)
    xi_c = critical_xi(config).xi_c
    sim = _sim(realizations=2)
    below = stability_probe(config.replace(xi=0.9 * xi_c), sim, slots=40000, realizations=2)
    above = stability_probe(config.replace(xi=1.1 * xi_c), sim, slots=40000, realizations=2)
    assert not below.unstable
    assert above.unstable
