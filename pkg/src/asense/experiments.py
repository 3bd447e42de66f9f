"""Comparison sweeps over a test suite, and CSV export of trajectories.

Episodes are grouped into fixed chunks (one seed's worth of suite images) that
run in lockstep.  Workers only decide which thread runs which chunk, so the
numbers do not depend on the worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .active import TRAJECTORY_COLUMNS, EpisodeConfig, Trajectory, run_episodes
from .basis import GRID
from .data import Dataset, write_csv
from .models import NetworkBundle

SVI_METHODS = ("pvae", "svi@10", "svi@20", "svi@40", "svi@60")
CRITERIA_COLUMNS = ("step", "criterion", "candidates", "mean_ssim", "mean_mse")


def episode_seed(base_seed: int, *keys: int) -> int:
    """Derived per-episode seed; stable across platforms and worker counts."""
    return int(np.random.SeedSequence([int(base_seed), *map(int, keys)]).generate_state(1)[0])


def run_suite(targets, bundle: NetworkBundle, template: EpisodeConfig, seeds, workers: int = 1,
              tag: int = 0) -> list[list[Trajectory]]:
    """Run ``template`` on every target for every seed; returns trajectories[seed][image].

    ``tag`` separates the seed streams of different sweep arms.
    """
    targets = list(targets)
    chunks = [[replace(template, rng_seed=episode_seed(s, tag, i)) for i in range(len(targets))] for s in seeds]
    if workers <= 1 or len(chunks) == 1:
        return [run_episodes(targets, bundle, c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: run_episodes(targets, bundle, c), chunks))


def _metric(trajs, name) -> np.ndarray:
    """(episodes, steps) array of a per-step metric."""
    flat = [t for per_seed in trajs for t in per_seed]
    return np.array([[getattr(r, name) for r in t.records] for t in flat])


def compare_svi(targets, bundle, template: EpisodeConfig, seeds, methods=SVI_METHODS, workers=1):
    """Vary the posterior update; one row per step with a (mse, ssim) column pair per method."""
    schema = ["step"]
    cols = {}
    for arm, method in enumerate(methods):
        trajs = run_suite(targets, bundle, replace(template, posterior_update=method), seeds, workers, tag=arm)
        cols[f"{method}_mse"] = _metric(trajs, "mse").mean(0)
        cols[f"{method}_ssim"] = _metric(trajs, "ssim").mean(0)
        schema += [f"{method}_mse", f"{method}_ssim"]
    rows = [{"step": k + 1, **{c: v[k] for c, v in cols.items()}} for k in range(template.steps)]
    return rows, schema


def compare_criteria(targets, bundle, template: EpisodeConfig, seeds, criteria=("qp", "mi", "ho"),
                     candidate_counts=(1, 10, 100), workers=1):
    """Mean SSIM and MSE per step for every criterion x candidate count."""
    rows = []
    for a, crit in enumerate(criteria):
        for b, n in enumerate(candidate_counts):
            cfg = replace(template, criterion=crit, candidates=int(n))
            trajs = run_suite(targets, bundle, cfg, seeds, workers, tag=100 * a + b)
            ssim, mse = _metric(trajs, "ssim").mean(0), _metric(trajs, "mse").mean(0)
            rows += [{"step": k + 1, "criterion": crit, "candidates": int(n),
                      "mean_ssim": ssim[k], "mean_mse": mse[k]} for k in range(cfg.steps)]
    return rows, list(CRITERIA_COLUMNS)


def suite_from(dataset: Dataset, n_classes: int = 10) -> Dataset:
    suite = dataset.one_per_class(n_classes)
    if len(suite) == 0:
        raise ValueError("dataset has no labelled images")
    return suite


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def write_trajectory(traj: Trajectory, path) -> Path:
    write_csv(traj.rows(), TRAJECTORY_COLUMNS, path)
    return Path(path)


def write_info_maps(traj: Trajectory, out_dir) -> list[Path]:
    """One 7x7 CSV grid per step (rows y, columns x); needs ``record_info_maps``."""
    out_dir = Path(out_dir)
    paths = []
    for rec in traj.records:
        if rec.info_map is None:
            raise ValueError("trajectory was run without record_info_maps")
        p = out_dir / f"info_map_step{rec.step:03d}.csv"
        write_csv(rec.info_map.tolist(), [f"x{x}" for x in range(GRID)], p)
        paths.append(p)
    return paths
