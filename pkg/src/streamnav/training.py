"""Teacher-forced training of the streaming policy.

Each sample is one expert episode: the dense forward runs all turns at once
under a chosen mask variant, cross-entropy supervises the four action slots
per turn against the expert chunk, and (when enabled) the latent branch
decodes next-frame feature predictions that regress onto frozen teacher
features of the following observation. The training table carries the same
per-turn memory snapshots and window clipping as streaming, so long episodes
train the condenser and the eviction behavior rather than meeting them for
the first time at evaluation.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoders as enc
from .gridworld import CHUNK, STOP, MapError, expert_plan, gen_instruction, \
    render_obs, step_env


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 0.01
    alpha: float = 0.25
    beta: float = 0.75

    def __post_init__(self):
        if min(self.gamma, self.alpha, self.beta) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def predictive(self) -> bool:
        return self.gamma * (self.alpha + self.beta) > 0


def loss_all(nav: float, l2d: float, l3d: float,
             weights: LossWeights = LossWeights()) -> float:
    """nav + gamma * (alpha * l2d + beta * l3d), plain float arithmetic."""
    if min(nav, l2d, l3d) < 0:
        raise ValueError("loss terms must be non-negative")
    return nav + weights.gamma * (weights.alpha * l2d + weights.beta * l3d)


@dataclass(frozen=True)
class TrainSample:
    """One expert episode: turns+1 observations bracket the action chunks."""
    instruction: np.ndarray
    observations: list
    actions: list               # per turn, CHUNK action ids

    def __post_init__(self):
        if len(self.observations) != len(self.actions) + 1:
            raise ValueError("need exactly one observation more than turns")
        if any(len(a) != CHUNK for a in self.actions):
            raise ValueError(f"every action chunk must have {CHUNK} entries")

    @property
    def turns(self) -> int:
        return len(self.actions)


def compute_targets(sample: TrainSample, teachers: enc.Teachers):
    """Frozen teacher features of the *next* observation for every turn.

    The 3D teacher is rolled over the full observation sequence from reset,
    so target t carries the recurrent state after t+1 frames. Returns
    (targets2d, targets3d) stacked over turns: (turns*tokens, d2/d3).
    """
    f3d, state = [], enc.reset_3d(teachers.dims)
    for obs in sample.observations:
        tok, state = enc.encode_3d_step(obs, state, teachers)
        f3d.append(tok)
    f2d = [enc.encode_2d(obs, teachers) for obs in sample.observations[1:]]
    return np.vstack(f2d), np.vstack(f3d[1:])


def episode_terms(model, leaves, sample: TrainSample, variant: str,
                  predictive: bool):
    """Per-episode (nav, l2d, l3d) loss Tensors; latent terms None when the
    predictive branch is off."""
    logits, e2d, e3d = model.forward_teacher_forced(
        leaves, sample.instruction, sample.observations[:-1], sample.actions,
        variant, predictive)
    flat = np.asarray(sample.actions, dtype=np.int64).reshape(-1)
    nav = ad.cross_entropy(ad.concat_rows(*logits), flat)
    if not predictive:
        return nav, None, None
    if model.config.masked_tokens_per_modality != model.config.dims.tokens:
        raise ValueError("latent targets need masked_tokens_per_modality == "
                         "encoder tokens")
    conds2 = [model._pool_cond(b) for b in e2d]
    conds3 = [model._pool_cond(b) for b in e3d]
    f2d_hat, f3d_hat = model._decode_latents(leaves, conds2, conds3)
    t2d, t3d = compute_targets(sample, model.teachers)
    return nav, ad.cosine_distance(f2d_hat, t2d), ad.mse(f3d_hat, t3d)


def _mean(terms):
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))


def train_step(model, batch, weights: LossWeights, opt_state, lr: float,
               variant: str = "strict"):
    """One Adam update over a batch of episodes; single tape, one backward.

    Returns (stats, opt_state). Non-finite values abort by raising
    NumericError out of the op that produced them.
    """
    if not batch:
        raise ValueError("empty batch")
    predictive = weights.predictive and model.config.predictive
    tape = ad.Tape()
    leaves = model.leaves(tape)
    navs, l2ds, l3ds = [], [], []
    for sample in batch:
        nav, l2d, l3d = episode_terms(model, leaves, sample, variant, predictive)
        navs.append(nav)
        if predictive:
            l2ds.append(l2d)
            l3ds.append(l3d)
    nav = _mean(navs)
    if predictive:
        l2d, l3d = _mean(l2ds), _mean(l3ds)
        latent = ad.add(ad.scale(l2d, weights.alpha), ad.scale(l3d, weights.beta))
        total = ad.add(nav, ad.scale(latent, weights.gamma))
    else:
        l2d = l3d = None
        total = nav
    names = list(leaves)
    grads = dict(zip(names, ad.backward(tape, total, [leaves[n] for n in names])))
    if opt_state is None:
        opt_state = ad.adam_init(model.params)
    ad.adam_step(model.params, grads, opt_state, lr)
    stats = {
        "nav_loss": float(nav.data),
        "l2d": float(l2d.data) if predictive else 0.0,
        "l3d": float(l3d.data) if predictive else 0.0,
        "loss_all": float(total.data),
    }
    return stats, opt_state


def build_dataset(maps, rng, dims: enc.EncoderDims = enc.DEFAULT_DIMS):
    """Expert-supervised samples from solvable maps.

    The plan is cut into 4-action chunks (last one padded with Stop);
    observations are rendered at the pose before each chunk plus the final
    pose, giving turns+1 frames. Returns (samples, skipped_count).
    """
    samples, skipped = [], 0
    for gmap in maps:
        try:
            plan = expert_plan(gmap)
        except MapError:
            skipped += 1
            continue
        instruction = gen_instruction(gmap, plan, rng)
        poses = [gmap.start]
        for act in plan:
            pose, blocked = step_env(gmap, poses[-1], act)
            if blocked:
                raise MapError("expert plan walked into a wall")
            poses.append(pose)
        turns = math.ceil(len(plan) / CHUNK)
        actions = []
        for t in range(turns):
            chunk = list(plan[t * CHUNK:(t + 1) * CHUNK])
            chunk += [STOP] * (CHUNK - len(chunk))
            actions.append(chunk)
        obs = [render_obs(gmap, poses[min(t * CHUNK, len(plan))], dims)
               for t in range(turns + 1)]
        samples.append(TrainSample(instruction, obs, actions))
    return samples, skipped


def run_training(model, samples, weights: LossWeights, *, epochs: int,
                 batch_size: int, lr: float, variant: str = "strict",
                 seed: int = 0, log=None):
    """Shuffled mini-batch loop; returns the per-step stats rows."""
    if not samples:
        raise ValueError("no training samples")
    rng = np.random.default_rng(seed)
    opt_state = None
    rows, step = [], 0
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        for lo in range(0, len(order), batch_size):
            batch = [samples[i] for i in order[lo:lo + batch_size]]
            stats, opt_state = train_step(model, batch, weights, opt_state,
                                          lr, variant)
            step += 1
            row = {"step": step, **stats}
            rows.append(row)
            if log is not None:
                log(row)
    return rows
