# =====================================================================
#  experiments.py — sweeps, result rows and figure data
# =====================================================================

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from analytic import Method, aoi_predict, critical_xi, solve_ps
from config import Discipline, validate
from errors import AoiError, ConfigError, NumericalError, UnstableError
from meta_distribution import beta_meta, exact_meta_cdf
from simulator import U_GRID, estimate_mu_cdf, simulate_network

log = logging.getLogger("experiments")

# sweepable parameter -> key of the `network` config section
SWEEP_PARAMS = {
    "xi": "xi",
    "access_p": "access_p",
    "lambda": "lambda_per_m2",
    "link_distance_m": "link_distance_m",
    "theta_db": "theta_db",
}

METHODS = ("sim", "beta", "exact", "mean")
METHOD_TAGS = {
    "beta": Method.BETA_META,
    "exact": Method.EXACT_META,
    "mean": Method.MEAN_APPROX,
}

ANALYTIC_COLUMNS = ["lambda", "r", "xi", "p", "theta_db", "method", "p_s", "xi_c", "c1", "c2",
                    "beta_a", "beta_b", "avg_fcfs", "peak_fcfs", "avg_lcfs", "peak_lcfs",
                    "avg_fcfs_stable", "peak_fcfs_stable", "mass_below", "iterations", "residual"]
AOI_FIELDS = ("avg_fcfs", "peak_fcfs", "avg_lcfs", "peak_lcfs")
STABLE_FIELDS = ("avg_fcfs_stable", "peak_fcfs_stable")
# the aoi_vs_p panel at 2e-3 links/m² is unstable at the default xi = 0.3
DENSE_PANEL_XI = 0.1


# -------------------------------------------------------------------
# 1. Sweep definition
# -------------------------------------------------------------------
def parse_values(text):
    """"START:STOP:STEP" (stop inclusive) or a comma-separated list."""
    text = str(text).strip()
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            if step <= 0.0 or stop < start:
                raise ConfigError("values", f"empty range {text!r}")
            count = int(round((stop - start) / step)) + 1
            return tuple(float(round(start + i * step, 12)) for i in range(count))
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError("values", f"cannot parse {text!r}") from None


@dataclass(frozen=True)
class SweepSpec:
    param: str
    values: tuple
    methods: tuple = ("beta",)
    realizations: int = None
    slots: int = None

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise ConfigError("param", f"expected one of {sorted(SWEEP_PARAMS)}")
        if not self.values:
            raise ConfigError("values", "at least one value is required")
        if not self.methods:
            raise ConfigError("method", "at least one method is required")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError("method", f"unknown method {unknown[0]!r}; expected {METHODS}")

    @classmethod
    def parse(cls, param, values, methods="beta", realizations=None, slots=None):
        if isinstance(methods, str):
            methods = tuple(m.strip() for m in methods.split(",") if m.strip())
        return cls(param, parse_values(values), tuple(methods), realizations, slots)


def point_config(network, param, value):
    """Network config with one parameter replaced, re-validated."""
    raw = network.as_raw()
    raw[SWEEP_PARAMS[param]] = value
    return validate(raw)


def run_settings(sim, realizations=None, slots=None):
    if realizations is not None:
        sim = sim.replace(realizations=int(realizations))
    if slots is not None:
        sim = sim.replace(slots=int(slots))
    return sim


def point_key(config, sim, methods):
    """Manifest key: the config hash plus everything else that shapes a point's rows."""
    extra = json.dumps({"sim": asdict(sim), "methods": list(methods)}, sort_keys=True)
    return f"{config.config_hash()}-{hashlib.sha256(extra.encode('utf-8')).hexdigest()[:8]}"


# -------------------------------------------------------------------
# 2. Rows
# -------------------------------------------------------------------
def _nan_aoi():
    return dict.fromkeys(AOI_FIELDS, math.nan)


def _inf_aoi():
    return {**dict.fromkeys(AOI_FIELDS + STABLE_FIELDS, math.inf), "mass_below": math.nan}


def solve_meta(config, method):
    method = Method(method)
    if method is Method.BETA_META:
        return beta_meta(config)
    if method is Method.EXACT_META:
        return exact_meta_cdf(config)
    return None


def analytic_row(config, method, meta=None):
    """One analytic.csv row; AoI fields are inf outside the stability region."""
    method = Method(method)
    ps = solve_ps(config)
    stability = critical_xi(config)
    if meta is None:
        meta = solve_meta(config, method)
    try:
        aoi = aoi_predict(config, meta, method, p_s=ps.p_s).as_row()
    except UnstableError as e:
        log.info("%s", e)
        aoi = _inf_aoi()

    row = {
        "lambda": config.lam,
        "r": config.link_distance_r,
        "xi": config.xi,
        "p": config.access_p,
        "theta_db": config.theta_db,
        "method": method.value,
        "p_s": ps.p_s,
        "xi_c": stability.xi_c,
        "c1": math.nan,
        "c2": math.nan,
        "beta_a": math.nan,
        "beta_b": math.nan,
        **aoi,
        "iterations": 0,
        "residual": ps.residual,
    }
    if meta is not None:
        row.update(c1=meta.moments[0], c2=meta.moments[1], iterations=meta.iterations_used,
                   residual=meta.converged_residual)
        if meta.shape_a is not None:
            row.update(beta_a=meta.shape_a, beta_b=meta.shape_b)
    return row


def sim_summary_row(config, sim, results):
    return {
        "config_hash": config.config_hash(),
        "discipline": config.discipline.value,
        "lambda": config.lam,
        "r": config.link_distance_r,
        "xi": config.xi,
        "p": config.access_p,
        "theta_db": config.theta_db,
        "seed": sim.seed,
        "slots": sim.slots,
        "warmup_slots": sim.warmup_slots,
        **results.summary(),
    }


def simulated_aoi(config, sim, workers=1):
    """Network AoI under both disciplines on the same deployments and draws."""
    out = _nan_aoi()
    if sim.realizations <= 0:
        return out
    for discipline, tag in ((Discipline.FCFS, "fcfs"), (Discipline.LCFS_PR, "lcfs")):
        summary = simulate_network(config.replace(discipline=discipline), sim, workers).summary()
        out[f"avg_{tag}"] = summary["network_avg_aoi"]
        out[f"peak_{tag}"] = summary["network_peak_aoi"]
    return out


def analytic_aoi(config, method=Method.BETA_META):
    try:
        meta = solve_meta(config, method)
        return aoi_predict(config, meta, method).as_row()
    except UnstableError:
        return _inf_aoi()


# -------------------------------------------------------------------
# 3. Sweeps
# -------------------------------------------------------------------
def method_tag(name):
    return METHOD_TAGS[name].value if name in METHOD_TAGS else name


def _point_rows(config, sim, sweep, value, workers):
    rows = []
    for name in sweep.methods:
        base = {"config_hash": config.config_hash(), "param": sweep.param,
                "value": value, "method": method_tag(name)}
        if name == "sim":
            aoi = simulated_aoi(config, sim, workers)
            rows.append({**base, **point_fields(config), **aoi})
        else:
            rows.append({**base, **analytic_row(config, METHOD_TAGS[name])})
    return pd.DataFrame(rows)


def point_fields(config):
    return {"lambda": config.lam, "r": config.link_distance_r, "xi": config.xi,
            "p": config.access_p, "theta_db": config.theta_db}


def run_sweep(experiment, sweep, store, manifest, workers=1):
    """Evaluate every sweep point, skipping those the manifest marks done.

    Each point is written to points/<key>.csv; the combined long-format frame
    (one row per point and method) is returned in sweep order.
    """
    sim = run_settings(experiment.simulation, sweep.realizations, sweep.slots)
    frames = []
    failed = 0
    for value in sweep.values:
        config = point_config(experiment.network, sweep.param, value)
        key = point_key(config, sim, sweep.methods)
        name = f"points/{key}.csv"
        if manifest.is_done(key) and store.exists(name):
            log.info("%s=%g already done (%s)", sweep.param, value, key)
            frames.append(store.read_frame(name))
            continue
        manifest.record(key, "running", point_hash=config.config_hash(), param=sweep.param,
                        value=value, seed=sim.seed, methods=list(sweep.methods))
        try:
            frame = _point_rows(config, sim, sweep, value, workers)
        except ConfigError:
            raise
        except AoiError as e:
            failed += 1
            log.error("%s=%g failed: %s", sweep.param, value, e)
            manifest.record(key, "failed", error=str(e))
            continue
        store.write_frame(frame, name)
        # read back so fresh and resumed runs see the same parsed values
        frames.append(store.read_frame(name))
        manifest.record(key, "done", outputs=[name], rows=len(frame))
    if failed:
        log.warning("%d of %d sweep points failed", failed, len(sweep.values))
    if not frames:
        return pd.DataFrame()
    return pd.concat(frames, ignore_index=True)


# -------------------------------------------------------------------
# 4. Figure data
# -------------------------------------------------------------------
def figure_cdf(experiment, workers=1, r=25.0, xis=(0.1, 0.3, 0.5), with_exact=True):
    frames = []
    sim = experiment.simulation
    for xi in xis:
        config = validate({**experiment.network.as_raw(), "link_distance_m": r, "xi": xi})
        F_beta = beta_meta(config).cdf(U_GRID)
        F_exact = np.full(len(U_GRID), np.nan)
        if with_exact:
            try:
                F_exact = exact_meta_cdf(config).cdf(U_GRID)
            except NumericalError as e:
                log.warning("exact CDF at xi=%g unavailable: %s", xi, e)
        if sim.realizations > 0:
            F_sim = estimate_mu_cdf(config, sim, U_GRID, workers).F
        else:
            F_sim = np.full(len(U_GRID), np.nan)
        frames.append(pd.DataFrame({"u": U_GRID, "F_sim": F_sim, "F_beta": F_beta,
                                    "F_exact": F_exact, "xi": xi}))
    return pd.concat(frames, ignore_index=True)


def figure_stability(experiment, workers=1, distances=None):
    distances = np.arange(5.0, 55.0, 5.0) if distances is None else distances
    rows = []
    for r in distances:
        config = validate({**experiment.network.as_raw(), "link_distance_m": float(r)})
        rows.append({"r_m": float(r), "xi_c": critical_xi(config).xi_c})
    return pd.DataFrame(rows)


def _aoi_sweep(experiment, key, values, workers, extra=None, method=Method.BETA_META):
    rows = []
    for value in values:
        raw = {**experiment.network.as_raw(), **(extra or {}), key: float(value)}
        config = validate(raw)
        sim_aoi = simulated_aoi(config, experiment.simulation, workers)
        ana_aoi = analytic_aoi(config, method)
        row = {name: raw[name] for name in (extra or {})}
        row[key] = float(value)
        row.update({f"{k}_sim": v for k, v in sim_aoi.items()})
        row.update({f"{k}_ana": v for k, v in ana_aoi.items()})
        rows.append(row)
    return pd.DataFrame(rows)


def figure_aoi_vs_xi(experiment, workers=1, values=None):
    values = parse_values("0.05:0.6:0.05") if values is None else values
    return _aoi_sweep(experiment, "xi", values, workers)


def figure_aoi_vs_p(experiment, workers=1, values=None, panels=((1e-4, None), (2e-3, DENSE_PANEL_XI))):
    """AoI against p for each (density, xi) panel; a panel xi of None keeps the configured one."""
    values = parse_values("0.1:1.0:0.1") if values is None else values
    frames = []
    for lam, xi in panels:
        extra = {"lambda_per_m2": lam, "xi": experiment.network.xi if xi is None else xi}
        frames.append(_aoi_sweep(experiment, "access_p", values, workers, extra=extra))
    frame = pd.concat(frames, ignore_index=True)
    return frame.rename(columns={"lambda_per_m2": "lambda", "access_p": "p"})


def figure_aoi_vs_lambda(experiment, workers=1, values=None):
    values = np.geomspace(1e-5, 1e-3, 9) if values is None else values
    frame = _aoi_sweep(experiment, "lambda_per_m2", values, workers)
    return frame.rename(columns={"lambda_per_m2": "lambda"})


FIGURES = {
    "cdf": figure_cdf,
    "stability": figure_stability,
    "aoi_vs_xi": figure_aoi_vs_xi,
    "aoi_vs_p": figure_aoi_vs_p,
    "aoi_vs_lambda": figure_aoi_vs_lambda,
}


def build_figure(which, experiment, workers=1):
    try:
        builder = FIGURES[which]
    except KeyError:
        raise ConfigError("figure", f"unknown figure {which!r}; expected one of {sorted(FIGURES)}") from None
    log.info("building figure data %s", which)
    return builder(experiment, workers)
