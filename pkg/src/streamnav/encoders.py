"""Frozen teacher encoders, cross-attention fusion, projection, condensation.

The two teachers are tiny fixed seeded networks standing in for large
pretrained vision models: a per-patch 2D encoder whose tokens are unit-norm,
and a recurrent 3D encoder whose tokens depend on the whole observation
stream since the last reset. They are plain numpy (never on a tape), so no
gradient can reach them. Fusion, projection, and keyframe condensation are
trainable and run through the autodiff ops with caller-supplied parameters.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class EncoderDims:
    height: int = 16
    width: int = 16
    channels: int = 3
    patch: int = 4
    d2: int = 32          # 2D token dim
    d3: int = 32          # 3D token dim
    d_pre: int = 32       # 3D pre-feature dim
    d_state: int = 64
    d_pose: int = 16

    @property
    def tokens(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


DEFAULT_DIMS = EncoderDims()

# ordered (name, shape-fn) table; also the checkpoint serialization order
_TEACHER_FIELDS = (
    ("proj2d_w", lambda d: (d.patch_dim, d.d2)),
    ("proj2d_b", lambda d: (d.d2,)),
    ("pre_w", lambda d: (d.patch_dim, d.d_pre)),
    ("pre_b", lambda d: (d.d_pre,)),
    ("state_a", lambda d: (d.d_state, d.d_state)),
    ("state_b", lambda d: (d.d_pre, d.d_state)),
    ("out_c", lambda d: (d.d_pre + d.d_state + d.d_pose, d.d3)),
    ("pose_p", lambda d: (d.d_pose,)),
)


@dataclass(frozen=True)
class Teachers:
    dims: EncoderDims
    weights: dict  # name -> read-only float64 array

    def __getattr__(self, name):
        try:
            return self.weights[name]
        except KeyError:
            raise AttributeError(name) from None

    def state_dict(self) -> dict:
        return dict(self.weights)


def make_teachers(seed: int, dims: EncoderDims = DEFAULT_DIMS) -> Teachers:
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape_fn in _TEACHER_FIELDS:
        shape = shape_fn(dims)
        fan_in = shape[0] if len(shape) > 1 else 1
        scale = 1.0 / np.sqrt(fan_in)
        if name == "state_a":
            # keep the recurrence contractive (fading memory) so states on
            # streams far longer than any training episode stay bounded and
            # in-distribution
            scale *= 0.35
        w = rng.normal(scale=scale, size=shape)
        w.flags.writeable = False
        weights[name] = w
    return Teachers(dims, weights)


def teachers_from_state(state: dict, dims: EncoderDims = DEFAULT_DIMS) -> Teachers:
    weights = {}
    for name, shape_fn in _TEACHER_FIELDS:
        w = np.ascontiguousarray(state[name], dtype=np.float64)
        if w.shape != shape_fn(dims):
            raise ValueError(f"teacher weight {name}: shape {w.shape} != {shape_fn(dims)}")
        w.flags.writeable = False
        weights[name] = w
    return Teachers(dims, weights)


def make_observation(arr) -> np.ndarray:
    """Clamp an H x W x C float grid into [0, 1]."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError("observation must be H x W x C")
    return np.clip(arr, 0.0, 1.0)


def patchify(obs: np.ndarray, dims: EncoderDims) -> np.ndarray:
    """Non-overlapping patches in row-major order -> (tokens, patch_dim)."""
    h, w, c = dims.height, dims.width, dims.channels
    if obs.shape != (h, w, c):
        raise ValueError(f"observation shape {obs.shape} != ({h}, {w}, {c})")
    p = dims.patch
    grid = obs.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4)
    return grid.reshape(dims.tokens, dims.patch_dim)


def encode_2d(obs: np.ndarray, teachers: Teachers) -> np.ndarray:
    """Frozen 2D teacher: patch projection, tanh, per-token l2 normalize."""
    x = np.tanh(patchify(obs, teachers.dims) @ teachers.proj2d_w + teachers.proj2d_b)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@dataclass(frozen=True)
class Cut3rState:
    s: np.ndarray
    counter: int


def reset_3d(dims: EncoderDims = DEFAULT_DIMS) -> Cut3rState:
    return Cut3rState(np.zeros(dims.d_state), 0)


def encode_3d_step(obs: np.ndarray, state: Cut3rState, teachers: Teachers):
    """Frozen recurrent 3D teacher; returns (tokens, advanced state)."""
    d = teachers.dims
    pre = patchify(obs, d) @ teachers.pre_w + teachers.pre_b
    s_next = np.tanh(state.s @ teachers.state_a + pre.mean(axis=0) @ teachers.state_b)
    stacked = np.concatenate(
        [pre,
         np.broadcast_to(s_next, (d.tokens, d.d_state)),
         np.broadcast_to(teachers.pose_p, (d.tokens, d.d_pose))], axis=1)
    return stacked @ teachers.out_c, Cut3rState(s_next, state.counter + 1)


def encode_2d_trainable(obs: np.ndarray, dims: EncoderDims, w, b):
    """Differentiable twin of encode_2d for a policy-side trainable copy."""
    patches = patchify(obs, dims)
    return ad.l2_normalize(ad.tanh(ad.add(ad.matmul(patches, w), b)))


def fuse(f2d, f3d, wq, wk, wv):
    """Cross-attention with 2D tokens as queries over 3D keys/values.

    softmax((f2d Wq)(f3d Wk)^T / sqrt(d_k)) (f3d Wv); one output token per
    2D token. Differentiable in all five inputs.
    """
    q = ad.matmul(f2d, wq)
    k = ad.matmul(f3d, wk)
    v = ad.matmul(f3d, wv)
    d_k = q.shape[1]
    if k.shape[1] != d_k:
        raise ValueError("query/key projection dims differ")
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d_k))
    probs = ad.masked_softmax(scores, np.ones((q.shape[0], k.shape[0]), dtype=bool))
    return ad.matmul(probs, v)


def project(fused, layers):
    """MLP into the model embedding space; GELU between layers, none after
    the last. ``layers`` is a list of (weight, bias) pairs."""
    if not layers:
        raise ValueError("project needs at least one layer")
    x = fused
    for i, (w, b) in enumerate(layers):
        x = ad.add(ad.matmul(x, w), b)
        if i + 1 < len(layers):
            x = ad.gelu(x)
    return x


def condense_keyframe(fused, w, b):
    """Mean-pool the tokens, then a trainable linear map; one memory token."""
    if fused.shape[0] < 1:
        raise ValueError("condense_keyframe: empty input")
    return ad.add(ad.matmul(ad.mean_rows(fused), w), b)
