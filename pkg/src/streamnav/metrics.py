"""Navigation metrics: SR, SPL, OSR, NE, nDTW, and horizon strata."""

from dataclasses import dataclass

import numpy as np

from .gridworld import FORWARD, STEP_SIZE, SUCCESS_RADIUS, GridMap, expert_plan, run_episode, ExpertPolicy


@dataclass(frozen=True)
class Metrics:
    sr: float
    spl: float
    osr: float
    ne: float
    ndtw: float
    count: int


def dtw_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Classic dynamic-time-warping distance between 2-d point sequences
    under the euclidean ground metric."""
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise ValueError("dtw over an empty path")
    cost = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j], acc[i, j - 1],
                                                 acc[i - 1, j - 1])
    return float(acc[n, m])


def path_length(path: np.ndarray) -> float:
    if len(path) < 2:
        return 0.0
    return float(np.hypot(np.diff(path[:, 0]), np.diff(path[:, 1])).sum())


def expert_reference(gmap: GridMap, success_radius: float = SUCCESS_RADIUS):
    """(expert executed path, shortest-path length) for one map."""
    plan = expert_plan(gmap, success_radius=success_radius)
    result = run_episode(ExpertPolicy(plan), gmap, instruction=None,
                         success_radius=success_radius)
    shortest = STEP_SIZE * sum(1 for a in plan if a == FORWARD)
    return result.path, shortest


def compute_metrics(results, maps, success_radius: float = SUCCESS_RADIUS,
                    references=None) -> Metrics:
    """Aggregate a batch of episodes against their maps' expert references.

    SR   mean success
    SPL  mean success * l / max(p, l), l = shortest-path length, p = executed
    OSR  mean [closest approach <= radius]
    NE   mean final distance to goal
    nDTW mean exp(-DTW(path, expert) / (|expert| * radius))

    ``references`` may carry precomputed ``expert_reference`` pairs to avoid
    replanning when the same maps are scored many times.
    """
    if len(results) == 0:
        raise ValueError("no episodes to aggregate")
    if len(results) != len(maps):
        raise ValueError("results/maps length mismatch")
    if references is None:
        references = [expert_reference(g, success_radius) for g in maps]
    sr = spl = osr = ne = ndtw = 0.0
    for res, gmap, (ref_path, shortest) in zip(results, maps, references):
        executed = path_length(res.path)
        if shortest > 0:
            ratio = shortest / max(executed, shortest)
        else:
            ratio = 1.0  # start already within the radius
        sr += res.success
        spl += res.success * ratio
        osr += float(res.distances.min() <= success_radius)
        ne += res.final_distance
        ndtw += np.exp(-dtw_distance(res.path, ref_path)
                       / (len(ref_path) * success_radius))
    n = len(results)
    return Metrics(sr / n, spl / n, osr / n, ne / n, ndtw / n, n)


STRATA = (("short", 0, 19), ("medium", 20, 60), ("long", 61, None))


def stratify(results, ref_steps=None):
    """Indices per horizon stratum.

    Keyed by the episode's reference difficulty (expert executed steps) when
    ``ref_steps`` is given, so the same episode lands in the same stratum for
    every model scored on it; otherwise by the result's own step count.
    """
    out = {name: [] for name, _, _ in STRATA}
    for i, res in enumerate(results):
        steps = res.steps if ref_steps is None else int(ref_steps[i])
        for name, lo, hi in STRATA:
            if steps >= lo and (hi is None or steps <= hi):
                out[name].append(i)
                break
    return out
