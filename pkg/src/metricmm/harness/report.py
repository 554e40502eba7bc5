"""Latent-distance vs shortest-path agreement on gridworld."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable

import numpy as np
from scipy import stats

from metricmm.envs.gridworld import GridWorldEnv, all_pairs_distances
from metricmm.errors import ConfigurationError
from metricmm.harness.csvio import METRIC_COLUMNS, write_csv
from metricmm.harness.models import load_run
from metricmm.harness.train import TAG_HELDOUT, random_walks, stream
from metricmm.model import MetricMM, mean_encode

log = logging.getLogger(__name__)

TAG_PAIRS = 7


def cell_embeddings(env: GridWorldEnv, embed: Callable[[tuple], np.ndarray]) -> dict:
    return {c: np.asarray(embed(c), dtype=np.float64) for c in env.cells}


def metric_report(env: GridWorldEnv, embed: Callable[[tuple], np.ndarray], rng: np.random.Generator,
                  pairs: int = 500, heldout_transitions: int = 2000) -> dict:
    """Correlate latent distance with BFS distance over random cell pairs.

    ``embed`` maps an (x, y) cell to its latent vector. Adjacent-pair
    statistics use transitions from fresh random walks that moved to a
    different cell.
    """
    emb = cell_embeddings(env, embed)
    cells = list(emb)
    if len(cells) < 2:
        raise ConfigurationError("map needs at least two open cells")
    dist = all_pairs_distances(env.walls)
    lat, geo = [], []
    for _ in range(pairs):
        i, j = rng.choice(len(cells), size=2, replace=False)
        a, b = cells[i], cells[j]
        d = dist[a][b[1], b[0]]
        if d < 0:  # unreachable: no ground truth
            continue
        lat.append(float(np.linalg.norm(emb[a] - emb[b])))
        geo.append(float(d))
    lat, geo = np.array(lat), np.array(geo)
    degenerate = len(lat) < 2 or np.ptp(lat) == 0.0 or np.ptp(geo) == 0.0
    if degenerate:
        log.warning("degenerate distances (%d pairs); correlations undefined", len(lat))
        rho = r = math.nan
    else:
        rho = float(stats.spearmanr(lat, geo).statistic)
        r = float(stats.pearsonr(lat, geo).statistic)

    walks = random_walks(env, heldout_transitions, rng)
    moved = np.any(walks.cells != walks.next_cells, axis=1)
    steps = [
        float(np.linalg.norm(emb[tuple(c1)] - emb[tuple(c0)]))
        for c0, c1 in zip(walks.cells[moved], walks.next_cells[moved])
    ]
    steps = np.array(steps)
    dev = np.abs(steps - 1.0)
    return {
        "pairs": len(lat),
        "spearman": rho,
        "pearson": r,
        "adjacent_pairs": len(steps),
        "adjacent_dev_mean": float(dev.mean()) if len(dev) else math.nan,
        "adjacent_dev_max": float(dev.max()) if len(dev) else math.nan,
        "adjacent_dist_mean": float(steps.mean()) if len(steps) else math.nan,
        "degenerate": bool(degenerate),
    }


def checkpoint_embedder(rep, env: GridWorldEnv):
    """Mean encoding of the clean observations at a cell."""
    def embed(cell):
        obs = env.observe_cell(cell)
        return mean_encode(rep.encoders, [o[None] for o in obs])[0]
    return embed


def run_metric_report(checkpoint, out_path=None, pairs: int = 500, seed: int = 0) -> dict:
    art = load_run(checkpoint)
    if art.meta.get("env") != "gridworld":
        raise ConfigurationError(f"{checkpoint} is not a gridworld checkpoint")
    if not isinstance(art.representation, MetricMM):
        raise ConfigurationError(f"{checkpoint} does not hold a metric representation")
    walls = np.array(art.meta["walls"], dtype=bool)
    env = GridWorldEnv(walls, episode_length=art.meta["config"]["walk_length"])
    rng = stream(seed, TAG_HELDOUT, TAG_PAIRS)
    row = dict(checkpoint=str(checkpoint), **metric_report(env, checkpoint_embedder(art.representation, env), rng, pairs))
    if out_path is not None:
        write_csv(out_path, METRIC_COLUMNS, [row])
    return row


def fusion_robustness(rep: MetricMM, env: GridWorldEnv, rng: np.random.Generator, steps: int = 1000,
                      failed: int = 0) -> dict:
    """Fraction of steps where the fused estimate beats the corrupted mean encoding.

    Modality ``failed`` is replaced by zeros at every step after the first
    of each episode while the walk is random. Distances are measured to the
    mean encoding of the clean observation.
    """
    from metricmm.harness.models import action_encoder
    from metricmm.model import MetricEstimator

    est = MetricEstimator(rep, action_encoder("gridworld"))
    wins, d_fused, d_mean = [], [], []
    obs, t = None, 0
    while len(wins) < steps:
        if obs is None or t >= env.episode_length:
            obs, t = env.reset(rng), 0
            est.reset()
            est(obs)  # step 0 is never corrupted
            continue
        a = int(rng.integers(env.n_actions))
        obs, _, _ = env.step(a)
        t += 1
        bad = list(obs)
        bad[failed] = np.zeros_like(obs[failed])
        z = est(bad, a)
        clean = mean_encode(rep.encoders, [o[None] for o in obs])[0]
        corrupted = mean_encode(rep.encoders, [o[None] for o in bad])[0]
        df, dm = np.linalg.norm(z - clean), np.linalg.norm(corrupted - clean)
        wins.append(df < dm)
        d_fused.append(df)
        d_mean.append(dm)
    return {
        "steps": len(wins),
        "win_rate": float(np.mean(wins)),
        "fused_dist_mean": float(np.mean(d_fused)),
        "mean_dist_mean": float(np.mean(d_mean)),
    }
