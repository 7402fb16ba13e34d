# =====================================================================
#  geometry.py — Poisson bipolar deployments on a torus
# =====================================================================

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.spatial import cKDTree

from errors import AoiError, ConfigError

log = logging.getLogger("geometry")

# Truncated mean interference beyond the culling radius, relative to the
# mean interference from transmitters farther than r.
CULLING_TAIL_FRACTION = 1e-3
MAX_RESAMPLES = 10000


@dataclass(frozen=True)
class Deployment:
    """One static realization of transmitter/receiver pairs.

    `pathloss_to_rx` is a CSR matrix with one row per receiver and one column
    per transmitter; entry (i, j) is ||X_j - y_i||^-alpha under the torus
    metric, present only for transmitters within the culling radius. The
    diagonal carries the signal term r^-alpha.
    """

    tx_positions: np.ndarray
    rx_positions: np.ndarray
    region_side: float
    link_distance_r: float
    alpha: float
    realization: int = 0
    resamples: int = 0
    culling_radius: float = None
    pathloss_to_rx: sparse.csr_matrix = None

    @property
    def n_links(self):
        return len(self.tx_positions)

    def interferers_of(self, i):
        """(transmitter, coefficient) pairs seen by receiver i, own link included."""
        row = self.pathloss_to_rx.getrow(i)
        return list(zip(row.indices.tolist(), row.data.tolist()))

    def to_frame(self):
        return pd.DataFrame({
            "link_id": np.arange(self.n_links),
            "tx_x": self.tx_positions[:, 0],
            "tx_y": self.tx_positions[:, 1],
            "rx_x": self.rx_positions[:, 0],
            "rx_y": self.rx_positions[:, 1],
        })


# -------------------------------------------------------------------
# Torus metric
# -------------------------------------------------------------------
def torus_delta(a, b, side):
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return d - side * np.round(d / side)


def torus_distance(a, b, side):
    d = torus_delta(a, b, side)
    return np.sqrt(np.sum(d * d, axis=-1))


def wrap(points, side):
    points = np.mod(points, side)
    # np.mod can round a tiny negative value up to exactly `side`
    points[points >= side] -= side
    return points


def default_culling_radius(config):
    """Radius beyond which the mean interference tail is below 0.1%.

    For a power-law field the mean interference from distances above R is
    proportional to R^(2 - alpha), so R = r * fraction^(1 / (2 - alpha)).
    """
    return config.link_distance_r * CULLING_TAIL_FRACTION ** (1.0 / (2.0 - config.alpha))


# -------------------------------------------------------------------
# Sampling
# -------------------------------------------------------------------
def sample_deployment(config, rng, realization=0, attempt=0):
    """Draw one Poisson bipolar realization; None when it holds no links."""
    gen = rng.stream(realization, "geometry", attempt=attempt)
    side = config.region_side
    n = int(gen.poisson(config.lam * config.region_area))
    if n == 0:
        log.info("realization %d attempt %d is empty, resampling", realization, attempt)
        return None

    tx = gen.uniform(0.0, side, size=(n, 2))
    angle = gen.uniform(0.0, 2.0 * math.pi, size=n)
    offset = config.link_distance_r * np.column_stack((np.cos(angle), np.sin(angle)))
    rx = wrap(tx + offset, side)
    return Deployment(
        tx_positions=tx,
        rx_positions=rx,
        region_side=side,
        link_distance_r=config.link_distance_r,
        alpha=config.alpha,
        realization=realization,
    )


def sample_nonempty(config, rng, realization=0):
    for attempt in range(MAX_RESAMPLES):
        deployment = sample_deployment(config, rng, realization, attempt)
        if deployment is not None:
            return replace(deployment, resamples=attempt)
    raise AoiError(f"no nonempty realization after {MAX_RESAMPLES} attempts "
                   f"(expected {config.lam * config.region_area:.3g} links)")


def build_pathloss(deployment, config, culling_radius=None):
    radius = default_culling_radius(config) if culling_radius is None else float(culling_radius)
    if radius <= config.link_distance_r:
        raise ConfigError("culling_radius_m", "culling radius must exceed the link distance")

    side = deployment.region_side
    n = deployment.n_links
    rx_tree = cKDTree(deployment.rx_positions, boxsize=side)
    tx_tree = cKDTree(deployment.tx_positions, boxsize=side)
    neighbors = rx_tree.query_ball_tree(tx_tree, radius)

    counts = np.fromiter((len(nb) for nb in neighbors), dtype=np.int64, count=n)
    rows = np.repeat(np.arange(n), counts)
    cols = np.fromiter((j for nb in neighbors for j in nb), dtype=np.int64, count=int(counts.sum()))

    # the own transmitter sits at exactly r, inside any admissible radius
    own = np.zeros(n, dtype=bool)
    own[rows[rows == cols]] = True
    missing = np.flatnonzero(~own)
    if missing.size:
        rows = np.concatenate((rows, missing))
        cols = np.concatenate((cols, missing))

    dist = torus_distance(deployment.rx_positions[rows], deployment.tx_positions[cols], side)
    coef = dist ** (-config.alpha)
    pathloss = sparse.csr_matrix((coef, (rows, cols)), shape=(n, n))
    pathloss.sort_indices()

    log.debug("realization %d: %d links, %.1f interferers/receiver within %.0f m",
              deployment.realization, n, pathloss.nnz / n - 1.0, radius)
    return replace(deployment, pathloss_to_rx=pathloss, culling_radius=radius)


def dump_deployment(deployment, store, name=None):
    name = name or f"deployment_{deployment.realization}.csv"
    return store.write_frame(deployment.to_frame(), name)
