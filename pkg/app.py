# =====================================================================
#  app.py — command line: simulate, analyze, sweep, figure
# =====================================================================

import argparse
import logging
import sys
from datetime import datetime, timezone

import pandas as pd

from analytic import Method
from config import AOI_LOG_LEVEL, AOI_WORKERS, ExperimentConfig, load_config
from errors import AoiError, ConfigError
from experiments import (ANALYTIC_COLUMNS, FIGURES, METHOD_TAGS, SweepSpec, analytic_row,
                         build_figure, run_settings, run_sweep, sim_summary_row, solve_meta)
from geometry import dump_deployment, sample_nonempty
from meta_distribution import kolmogorov_distance
from rng import RngContract
from simulator import U_GRID, simulate_network
from store import ResultStore, RunManifest

log = logging.getLogger("app")


# -------------------------------------------------------------------
# 1. Environment / Config
# -------------------------------------------------------------------
def configure_logging(level=AOI_LOG_LEVEL):
    logging.basicConfig(level=str(level).upper(), format="[%(name)s] %(message)s", force=True)


def resolve_workers(value):
    if value is not None:
        return max(int(value), 1)
    if AOI_WORKERS:
        try:
            return max(int(AOI_WORKERS), 1)
        except ValueError:
            raise ConfigError("AOI_WORKERS", f"expected an integer, got {AOI_WORKERS!r}") from None
    return 1


def load_experiment(args):
    experiment = load_config(args.config)
    sim = experiment.simulation
    if getattr(args, "seed", None) is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("seed", "seed must be an unsigned 64-bit integer")
        sim = sim.replace(seed=args.seed)
    sim = run_settings(sim, getattr(args, "realizations", None), getattr(args, "slots", None))
    return ExperimentConfig(experiment.network, sim)


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# -------------------------------------------------------------------
# 2. Commands
# -------------------------------------------------------------------
def cmd_simulate(args):
    experiment = load_experiment(args)
    config, sim = experiment.network, experiment.simulation
    workers = resolve_workers(args.workers)
    store = ResultStore(args.out)
    manifest = RunManifest(store)
    started = _now()

    if args.dump_deployments:
        rng = RngContract(sim.seed)
        for realization in range(sim.realizations):
            dump_deployment(sample_nonempty(config, rng, realization), store)

    results = simulate_network(config, sim, workers, progress=sys.stderr.isatty())
    outputs = [
        store.write_frame(results.links_frame(), "sim_links.csv"),
        store.write_frame(pd.DataFrame([sim_summary_row(config, sim, results)]), "sim_summary.csv"),
    ]
    manifest.record(config.config_hash(), "done", command="simulate", seed=sim.seed,
                    slots=sim.slots, realizations=sim.realizations, started=started,
                    finished=_now(), outputs=outputs)
    summary = results.summary()
    log.info("avg AoI %s, peak AoI %s, unstable=%s", summary["network_avg_aoi"],
             summary["network_peak_aoi"], summary["unstable"])
    return 0


def cmd_analyze(args):
    experiment = load_experiment(args)
    config = experiment.network
    method = METHOD_TAGS.get(args.method) or Method(args.method)
    store = ResultStore(args.out)
    manifest = RunManifest(store)
    started = _now()

    meta = solve_meta(config, method)
    row = analytic_row(config, method, meta)
    info = {}
    if method is Method.EXACT_META and meta is not None:
        beta = solve_meta(config, Method.BETA_META)
        info["kolmogorov_to_beta"] = kolmogorov_distance(meta.cdf(U_GRID), beta.cdf(U_GRID))
        log.info("Kolmogorov distance exact vs beta: %.4f", info["kolmogorov_to_beta"])

    path = store.write_frame(pd.DataFrame([row], columns=ANALYTIC_COLUMNS), "analytic.csv")
    manifest.record(config.config_hash(), "done", command="analyze", method=method.value,
                    started=started, finished=_now(), outputs=[path], **info)
    log.info("p_s=%.6f xi_c=%.6f avg FCFS %s, avg LCFS %s", row["p_s"], row["xi_c"],
             row["avg_fcfs"], row["avg_lcfs"])
    return 0


def cmd_sweep(args):
    experiment = load_experiment(args)
    sweep = SweepSpec.parse(args.param, args.values, args.method or "beta")
    store = ResultStore(args.out)
    manifest = RunManifest(store)
    frame = run_sweep(experiment, sweep, store, manifest, resolve_workers(args.workers))
    store.write_frame(frame, "sweep.csv")
    return 0


def cmd_figure(args):
    if args.which not in FIGURES:
        valid = ", ".join(sorted(FIGURES))
        raise ConfigError("figure", f"unknown figure {args.which!r}; valid names: {valid}")
    experiment = load_experiment(args)
    store = ResultStore(args.out)
    manifest = RunManifest(store)
    started = _now()
    frame = build_figure(args.which, experiment, resolve_workers(args.workers))
    path = store.write_frame(frame, f"fig_{args.which}.csv")
    manifest.record(f"figure-{args.which}-{experiment.network.config_hash()}", "done",
                    command="figure", seed=experiment.simulation.seed, started=started,
                    finished=_now(), outputs=[path])
    return 0


# -------------------------------------------------------------------
# 3. Argument parsing
# -------------------------------------------------------------------
def build_parser():
    parser = argparse.ArgumentParser(prog="aoi", description="AoI in Poisson bipolar ALOHA networks")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (default: AOI_CONFIG or built-in)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--realizations", type=int)
    common.add_argument("--slots", type=int)
    common.add_argument("--workers", type=int, help="worker processes (default: AOI_WORKERS or 1)")

    sub = parser.add_subparsers(dest="command", required=True)
    simulate = sub.add_parser("simulate", parents=[common], help="run the network simulator")
    simulate.add_argument("--dump-deployments", action="store_true")
    simulate.set_defaults(func=cmd_simulate)

    analyze = sub.add_parser("analyze", parents=[common], help="evaluate the analytic model")
    analyze.add_argument("--method", default="beta", choices=["beta", "exact", "mean"])
    analyze.set_defaults(func=cmd_analyze)

    sweep = sub.add_parser("sweep", parents=[common], help="sweep one parameter")
    sweep.add_argument("--param", required=True)
    sweep.add_argument("--values", required=True, help="START:STOP:STEP or a comma list")
    sweep.add_argument("--method", help="comma list of sim, beta, exact, mean")
    sweep.set_defaults(func=cmd_sweep)

    figure = sub.add_parser("figure", parents=[common], help="emit figure data")
    figure.add_argument("which")
    figure.set_defaults(func=cmd_figure)
    return parser


# -------------------------------------------------------------------
# 4. Error handler
# -------------------------------------------------------------------
def handle_exception(e):
    code = e.exit_code if isinstance(e, AoiError) else 1
    logging.getLogger("app").error("[ERROR] %r", e)
    return code


# -------------------------------------------------------------------
# 5. Run
# -------------------------------------------------------------------
def main(argv=None):
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:
        return handle_exception(e)


if __name__ == "__main__":
    sys.exit(main())
