"""Experiment plumbing shared by the command-line verbs.

Seeding discipline: every randomized stage pulls an independent Philox
stream keyed by (master seed, stage). Two runs with the same master seed
therefore see identical maps, instructions, parameter draws, and shuffles,
which is what makes reruns byte-identical and ablation cells comparable
(all cells of one seed share training data and the evaluation suite).
"""

import hashlib

import numpy as np

from . import gridworld as gw
from . import metrics as mx
from .config import RunConfig, rng_stream
from .policy import StreamPolicy
from .training import LossWeights, build_dataset, run_training

# rng purpose keys
_K_TRAIN_MAPS = 0
_K_EVAL_MAPS = 1
_K_SHUFFLE = 2
_K_INIT = 3
_K_REPLICATE = 4

CARDINAL_HEADINGS = (0, 6, 12, 18)

# comparison grid: three mask variants under the full loss, plus the loss
# ablations under the strict mask (the strict/full cell appears once)
ABLATION_CELLS = (
    ("strict-full", "strict", "full"),
    ("leaky-full", "leaky", "full"),
    ("noiso-full", "noiso", "full"),
    ("strict-gamma0", "strict", "gamma0"),
    ("strict-2d-only", "strict", "2d_only"),
    ("strict-3d-only", "strict", "3d_only"),
)
MASK_CELLS = ABLATION_CELLS[:3]
MODULE_CELLS = (ABLATION_CELLS[0],) + ABLATION_CELLS[3:]


def suffix_map(gmap: gw.GridMap, plan, rng) -> gw.GridMap:
    """Same map with the start moved to an intermediate pose of the expert
    route; short suffixes concentrate stop-near-goal supervision."""
    poses = [gmap.start]
    for act in plan:
        pose, _ = gw.step_env(gmap, poses[-1], act)
        poses.append(pose)
    k = int(rng.integers(1, max(2, len(plan) - 1)))
    return gw.GridMap(gmap.width, gmap.height, gmap.occupied, gmap.color,
                      poses[k], gmap.goal)


def training_samples(cfg: RunConfig, seed: int):
    """Expert dataset: base maps, suffix-started variants of them, and an
    optional share of long-horizon maps that exercise window eviction and
    the condensed-memory path during training."""
    rng = rng_stream(seed, _K_TRAIN_MAPS)
    episodes = cfg.get("training", "episodes")
    n_long = int(round(episodes * cfg.get("training", "long_fraction")))
    n_suffix = int(round((episodes - n_long)
                         * cfg.get("training", "suffix_fraction")))
    n_base = max(1, episodes - n_long - n_suffix)
    kw = cfg.map_kwargs()
    maps = [gw.random_map(rng, **kw) for _ in range(n_base)]
    for i in range(n_suffix):
        parent = maps[i % n_base]
        plan = gw.expert_plan(parent)
        if len(plan) <= 2:
            continue
        maps.append(suffix_map(parent, plan, rng))
    long_kw = cfg.long_map_kwargs()
    maps.extend(gw.random_map(rng, **long_kw) for _ in range(n_long))
    samples, _ = build_dataset(maps, rng)
    return samples


def _sample_in_band(rng, kw, lo, hi, attempts=400):
    """Rejection-sample a map whose expert takes lo..hi executed steps."""
    for _ in range(attempts):
        gmap = gw.random_map(rng, **kw)
        plan = gw.expert_plan(gmap)
        if lo <= len(plan) <= (hi if hi is not None else len(plan)):
            return gmap, plan
    raise RuntimeError(
        f"no map with expert steps in [{lo}, {hi}] after {attempts} draws")


def eval_suite(cfg: RunConfig, seed: int):
    """Held-out maps with instructions; identical for every model that is
    evaluated under the same master seed.

    With eval.stratified the suite splits evenly across the three horizon
    strata: short and medium episodes come from the base map distribution,
    long ones from the long pool, each rejection-sampled into its band of
    expert steps.
    """
    rng = rng_stream(seed, _K_EVAL_MAPS)
    episodes = cfg.get("eval", "episodes")
    suite = []
    if cfg.get("eval", "stratified"):
        n_long = episodes // 3
        n_medium = episodes // 3
        n_short = episodes - n_long - n_medium
        plan_for = []
        base_kw, long_kw = cfg.map_kwargs(), cfg.long_map_kwargs()
        for count, kw, (lo, hi) in ((n_short, base_kw, (1, mx.STRATA[0][2])),
                                    (n_medium, base_kw, mx.STRATA[1][1:]),
                                    (n_long, long_kw, mx.STRATA[2][1:])):
            for _ in range(count):
                plan_for.append(_sample_in_band(rng, kw, lo, hi))
        for gmap, plan in plan_for:
            suite.append((gmap, gw.gen_instruction(gmap, plan, rng)))
        return suite
    kw = cfg.map_kwargs()
    for _ in range(episodes):
        gmap = gw.random_map(rng, **kw)
        plan = gw.expert_plan(gmap)
        instruction = gw.gen_instruction(gmap, plan, rng)
        suite.append((gmap, instruction))
    return suite


def suite_digest(suite) -> str:
    """Fingerprint of the evaluation episode set. Rows of a comparison table
    that carry the same digest were scored on identical episodes."""
    h = hashlib.sha256()
    for gmap, instruction in suite:
        h.update(gw.map_to_text(gmap).encode())
        h.update(np.asarray(instruction, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


def train_model(cfg: RunConfig, seed: int, samples=None, *, variant=None,
                weights: LossWeights | None = None, log=None):
    """Build and train one policy; returns (model, per-step stats rows)."""
    if samples is None:
        samples = training_samples(cfg, seed)
    if weights is None:
        weights = cfg.loss_weights()
    variant = variant or cfg.get("training", "variant")
    pc = cfg.policy_config()
    if not weights.predictive:
        # the latent branch owns parameters only while a loss can reach them
        pc = type(pc)(**{**pc.__dict__, "predictive": False})
    model = StreamPolicy(pc, seed=int(rng_stream(seed, _K_INIT).integers(2**32)),
                         teacher_seed=cfg.get("training", "teacher_seed"))
    rows = run_training(
        model, samples, weights,
        epochs=cfg.get("training", "epochs"),
        batch_size=cfg.get("training", "batch_size"),
        lr=cfg.get("training", "lr"),
        variant=variant,
        seed=int(rng_stream(seed, _K_SHUFFLE).integers(2**32)),
        log=log)
    return model, rows


def evaluate_model(model_agent, cfg: RunConfig, suite):
    """Closed-loop rollouts over the suite; returns (overall Metrics,
    stratified rows, raw results)."""
    max_steps = cfg.get("eval", "max_steps")
    results, maps, refs = [], [], []
    for gmap, instruction in suite:
        results.append(gw.run_episode(model_agent, gmap, instruction,
                                      max_steps=max_steps))
        maps.append(gmap)
        refs.append(mx.expert_reference(gmap))
    overall = mx.compute_metrics(results, maps, references=refs)
    # stratum membership keys on expert difficulty, not the model's own steps
    strata = mx.stratify(results, [len(path) - 1 for path, _ in refs])
    return overall, strata, results


def expert_agents(suite):
    """Expert replay policies matching the suite, one per episode."""
    return [gw.ExpertPolicy(gw.expert_plan(gmap)) for gmap, _ in suite]


def evaluate_expert(cfg: RunConfig, suite):
    """Oracle rollouts: each episode replayed by its own expert plan."""
    max_steps = cfg.get("eval", "max_steps")
    results, maps, refs = [], [], []
    for agent, (gmap, instruction) in zip(expert_agents(suite), suite):
        results.append(gw.run_episode(agent, gmap, instruction,
                                      max_steps=max_steps))
        maps.append(gmap)
        refs.append(mx.expert_reference(gmap))
    overall = mx.compute_metrics(results, maps, references=refs)
    strata = mx.stratify(results, [len(path) - 1 for path, _ in refs])
    return overall, strata, results


def replicate_seeds(master_seed: int, n: int) -> list:
    """Deterministic per-replicate seeds fanned out from one master seed."""
    return [int(rng_stream(master_seed, _K_REPLICATE, r).integers(2 ** 31))
            for r in range(n)]


def cell_weights(base: LossWeights, loss_cell: str) -> LossWeights:
    """Loss weights of one ablation cell, derived from the config's."""
    if loss_cell == "full":
        return base
    if loss_cell == "gamma0":
        return LossWeights(0.0, base.alpha, base.beta)
    if loss_cell == "2d_only":
        return LossWeights(base.gamma, base.alpha, 0.0)
    if loss_cell == "3d_only":
        return LossWeights(base.gamma, 0.0, base.beta)
    raise ValueError(f"unknown loss cell {loss_cell!r}")


def _strata_fields(strata, results):
    out = {}
    for name, idx in strata.items():
        out[f"n_{name}"] = len(idx)
        out[f"sr_{name}"] = (float(np.mean([results[i].success for i in idx]))
                             if idx else float("nan"))
    return out


def run_ablation(cfg: RunConfig, master_seed: int, replicates: int = 5,
                 cells=ABLATION_CELLS, log=None):
    """Train and score every grid cell for each replicate seed.

    All cells of one replicate share training data and parameter init (the
    latent-branch parameters are drawn after the shared trunk, so ablated
    models start from the identical trunk); every row is scored on the one
    suite drawn from the master seed. Returns a list of row dicts.
    """
    suite = eval_suite(cfg, master_seed)
    digest = suite_digest(suite)
    base_w = cfg.loss_weights()
    rows = []
    for rep, rep_seed in enumerate(replicate_seeds(master_seed, replicates)):
        samples = training_samples(cfg, rep_seed)
        for name, variant, loss_cell in cells:
            weights = cell_weights(base_w, loss_cell)
            model, _ = train_model(cfg, rep_seed, samples=samples,
                                   variant=variant, weights=weights)
            overall, strata, results = evaluate_model(model.agent(), cfg, suite)
            row = {"cell": name, "replicate": rep, "seed": rep_seed,
                   "digest": digest, "episodes": len(results),
                   "sr": overall.sr, "spl": overall.spl, "osr": overall.osr,
                   "ne": overall.ne, "ndtw": overall.ndtw}
            row.update(_strata_fields(strata, results))
            rows.append(row)
            if log:
                log(row)
    return rows


def ablation_means(rows):
    """Per-cell arithmetic means over the replicate rows (numeric fields)."""
    out = []
    for name in dict.fromkeys(r["cell"] for r in rows):
        group = [r for r in rows if r["cell"] == name]
        mean = {"cell": name, "replicate": "mean", "seed": "",
                "digest": group[0]["digest"]}
        for key, val in group[0].items():
            if key in mean:
                continue
            mean[key] = float(np.mean([g[key] for g in group])) \
                if isinstance(val, float) else val if all(
                    g[key] == val for g in group) else ""
        out.append(mean)
    return out
