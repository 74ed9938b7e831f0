"""Reverse-mode automatic differentiation over float64 numpy arrays.

A deliberately small fixed op set (matmul, adds, layernorm, GELU, masked
softmax, fused attention, row plumbing, three losses) recorded on a Tape.
Every op checks its output for NaN/Inf and raises NumericError instead of
propagating. Ops called with plain arrays (or tape=None leaves) skip
recording, which is the inference fast path.

Gradients: ``backward(tape, loss, wrt)`` accumulates into the requested
leaves; leaves not on the path to the loss get exact zeros.
"""

from __future__ import annotations

import math

import numpy as np

from . import _kernels


class NumericError(RuntimeError):
    """A computation produced NaN/Inf or an otherwise unusable value."""


def _check_finite(op, arr):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by op {op!r}")


def _unbroadcast(grad, shape):
    # Reduce a broadcasted gradient back to the operand's shape.
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Handle to one node: an immutable array plus its position on a tape."""

    __slots__ = ("tape", "id", "data")

    def __init__(self, tape, node_id, data):
        self.tape = tape
        self.id = node_id
        self.data = data

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, taped={self.tape is not None})"


class OpRecord:
    __slots__ = ("op", "input_ids", "output_id", "params", "saved")

    def __init__(self, op, input_ids, output_id, params, saved):
        self.op = op
        self.input_ids = input_ids
        self.output_id = output_id
        self.params = params
        self.saved = saved


class Tape:
    """Ordered op log. Single writer per forward/backward pass."""

    def __init__(self):
        self.values = []
        self.records = []

    def leaf(self, array) -> Tensor:
        data = np.asarray(array, dtype=np.float64)
        _check_finite("leaf", data)
        data = data.copy()
        data.flags.writeable = False
        self.values.append(data)
        return Tensor(self, len(self.values) - 1, data)

    def _record(self, op, inputs, out, params, saved) -> Tensor:
        out.flags.writeable = False
        self.values.append(out)
        out_id = len(self.values) - 1
        self.records.append(OpRecord(op, tuple(t.id for t in inputs), out_id, params, saved))
        return Tensor(self, out_id, out)

    def replay_check(self) -> bool:
        """Recompute every recorded op from stored inputs; True iff all
        outputs are reproduced bit-exactly."""
        for rec in self.records:
            ins = [self.values[i] for i in rec.input_ids]
            out, _ = _FORWARD[rec.op](ins, rec.params)
            if not np.array_equal(np.asarray(out), self.values[rec.output_id]):
                return False
        return True


def _coerce(args):
    """Find the common tape (None in eval mode) and raw input arrays."""
    tape = None
    for a in args:
        if isinstance(a, Tensor) and a.tape is not None:
            if tape is not None and tape is not a.tape:
                raise ValueError("operands recorded on different tapes")
            tape = a.tape
    arrays = []
    for a in args:
        if isinstance(a, Tensor):
            arrays.append(a.data)
        else:
            arrays.append(np.asarray(a, dtype=np.float64))
    return tape, arrays


def _apply(op, args, params=None):
    params = params or {}
    tape, arrays = _coerce(args)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out, saved = _FORWARD[op](arrays, params)
    out = np.asarray(out)
    _check_finite(op, out)
    if tape is None:
        return Tensor(None, -1, out)
    tensors = [a if isinstance(a, Tensor) else tape.leaf(a) for a in args]
    return tape._record(op, tensors, out, params, saved)


# ---------------------------------------------------------------- primitives

def _fwd_add(ins, p):
    return ins[0] + ins[1], None


def _bwd_add(g, ins, out, saved, p):
    return [_unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)]


def _fwd_mul(ins, p):
    return ins[0] * ins[1], None


def _bwd_mul(g, ins, out, saved, p):
    return [_unbroadcast(g * ins[1], ins[0].shape), _unbroadcast(g * ins[0], ins[1].shape)]


def _fwd_scale(ins, p):
    return ins[0] * p["c"], None


def _bwd_scale(g, ins, out, saved, p):
    return [g * p["c"]]


def _fwd_matmul(ins, p):
    a, b = ins
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b, None


def _bwd_matmul(g, ins, out, saved, p):
    a, b = ins
    return [g @ b.T, a.T @ g]


def _fwd_transpose(ins, p):
    if ins[0].ndim != 2:
        raise ValueError("transpose expects a 2-d tensor")
    return ins[0].T.copy(), None


def _bwd_transpose(g, ins, out, saved, p):
    return [g.T]


def _fwd_tanh(ins, p):
    return np.tanh(ins[0]), None


def _bwd_tanh(g, ins, out, saved, p):
    return [g * (1.0 - out * out)]


_GELU_C = math.sqrt(2.0 / math.pi)


def _fwd_gelu(ins, p):
    # tanh approximation; in-place chain keeps this off the profile
    x = ins[0]
    u = x * x
    u *= x
    u *= 0.044715
    u += x
    u *= _GELU_C
    np.tanh(u, out=u)
    t = u
    out = t + 1.0
    out *= 0.5
    out *= x
    return out, {"t": t}


def _bwd_gelu(g, ins, out, saved, p):
    x = ins[0]
    t = saved["t"]
    du = x * x
    du *= 3 * 0.044715
    du += 1.0
    du *= _GELU_C
    du *= 1.0 - t * t
    du *= x
    du += 1.0 + t
    du *= 0.5
    du *= g
    return [du]


_LN_EPS = 1e-5


def _fwd_layernorm(ins, p):
    x, gain, bias = ins
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return xhat * gain + bias, {"xhat": xhat, "inv": inv}


def _bwd_layernorm(g, ins, out, saved, p):
    x, gain, _ = ins
    xhat, inv = saved["xhat"], saved["inv"]
    dxhat = g * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    axes = tuple(range(g.ndim - 1))
    return [dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)]


def _fwd_masked_softmax(ins, p):
    probs = _kernels.masked_softmax_fwd(ins[0], p["mask"])
    return probs, None


def _bwd_masked_softmax(g, ins, out, saved, p):
    return [_kernels.masked_softmax_bwd(g, out)]


def _fwd_attention(ins, p):
    q, k, v = ins
    out, probs = _kernels.attn_fwd(q, k, v, p["mask"], p["n_heads"])
    return out, {"probs": probs}


def _bwd_attention(g, ins, out, saved, p):
    q, k, v = ins
    gq, gk, gv = _kernels.attn_bwd(g, q, k, v, saved["probs"], p["n_heads"])
    return [gq, gk, gv]


def _fwd_concat_rows(ins, p):
    return np.concatenate(ins, axis=0), None


def _bwd_concat_rows(g, ins, out, saved, p):
    grads, ofs = [], 0
    for a in ins:
        grads.append(g[ofs:ofs + a.shape[0]])
        ofs += a.shape[0]
    return grads


def _fwd_slice_rows(ins, p):
    return ins[0][p["start"]:p["stop"]].copy(), None


def _bwd_slice_rows(g, ins, out, saved, p):
    gx = np.zeros_like(ins[0])
    gx[p["start"]:p["stop"]] = g
    return [gx]


def _fwd_gather_rows(ins, p):
    return ins[0][p["idx"]].copy(), None


def _bwd_gather_rows(g, ins, out, saved, p):
    gx = np.zeros_like(ins[0])
    np.add.at(gx, p["idx"], g)
    return [gx]


def _fwd_mean_rows(ins, p):
    return ins[0].mean(axis=0, keepdims=True), None


def _bwd_mean_rows(g, ins, out, saved, p):
    n = ins[0].shape[0]
    return [np.broadcast_to(g / n, ins[0].shape).copy()]


def _fwd_l2_normalize(ins, p):
    x = ins[0]
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if (norms <= 1e-12).any():
        raise NumericError("l2_normalize: near-zero row")
    return x / norms, {"norms": norms}


def _bwd_l2_normalize(g, ins, out, saved, p):
    inner = (g * out).sum(axis=-1, keepdims=True)
    return [(g - out * inner) / saved["norms"]]


def _fwd_cosine_distance(ins, p):
    a, b = ins
    if a.shape != b.shape:
        raise ValueError("cosine_distance: shape mismatch")
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if (na <= 1e-12).any() or (nb <= 1e-12).any():
        raise NumericError("cosine_distance: zero row")
    # clamp: float rounding can push |cos| past 1, which would leave [0,2]
    cos = np.clip((a * b).sum(axis=-1, keepdims=True) / (na * nb), -1.0, 1.0)
    loss = np.asarray(np.mean(1.0 - cos))
    return loss, {"na": na, "nb": nb, "cos": cos}


def _bwd_cosine_distance(g, ins, out, saved, p):
    a, b = ins
    na, nb, cos = saved["na"], saved["nb"], saved["cos"]
    n_rows = a.shape[0] if a.ndim > 1 else 1
    c = float(g) / n_rows
    ga = -c * (b / (na * nb) - cos * a / (na * na))
    gb = -c * (a / (na * nb) - cos * b / (nb * nb))
    return [ga, gb]


def _fwd_mse(ins, p):
    a, b = ins
    if a.shape != b.shape:
        raise ValueError("mse: shape mismatch")
    d = a - b
    return np.asarray(np.mean(d * d)), None


def _bwd_mse(g, ins, out, saved, p):
    a, b = ins
    c = 2.0 * float(g) / a.size
    d = a - b
    return [c * d, -c * d]


def _fwd_cross_entropy(ins, p):
    logits = ins[0]
    targets = p["targets"]
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ValueError("cross_entropy: target index out of range")
    mx = logits.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(logits - mx).sum(axis=1))
    picked = logits[np.arange(logits.shape[0]), targets]
    return np.asarray(np.mean(lse - picked)), {"lse": lse}


def _bwd_cross_entropy(g, ins, out, saved, p):
    logits = ins[0]
    targets = p["targets"]
    probs = np.exp(logits - saved["lse"][:, None])
    probs[np.arange(logits.shape[0]), targets] -= 1.0
    return [probs * (float(g) / logits.shape[0])]


_FORWARD = {
    "add": _fwd_add, "mul": _fwd_mul, "scale": _fwd_scale, "matmul": _fwd_matmul,
    "transpose": _fwd_transpose,
    "tanh": _fwd_tanh, "gelu": _fwd_gelu, "layernorm": _fwd_layernorm,
    "masked_softmax": _fwd_masked_softmax, "attention": _fwd_attention,
    "concat_rows": _fwd_concat_rows, "slice_rows": _fwd_slice_rows,
    "gather_rows": _fwd_gather_rows, "mean_rows": _fwd_mean_rows,
    "l2_normalize": _fwd_l2_normalize, "cosine_distance": _fwd_cosine_distance,
    "mse": _fwd_mse, "cross_entropy": _fwd_cross_entropy,
}

_BACKWARD = {
    "add": _bwd_add, "mul": _bwd_mul, "scale": _bwd_scale, "matmul": _bwd_matmul,
    "transpose": _bwd_transpose,
    "tanh": _bwd_tanh, "gelu": _bwd_gelu, "layernorm": _bwd_layernorm,
    "masked_softmax": _bwd_masked_softmax, "attention": _bwd_attention,
    "concat_rows": _bwd_concat_rows, "slice_rows": _bwd_slice_rows,
    "gather_rows": _bwd_gather_rows, "mean_rows": _bwd_mean_rows,
    "l2_normalize": _bwd_l2_normalize, "cosine_distance": _bwd_cosine_distance,
    "mse": _bwd_mse, "cross_entropy": _bwd_cross_entropy,
}


# ------------------------------------------------------------------- op API

def add(a, b):
    return _apply("add", [a, b])


def mul(a, b):
    return _apply("mul", [a, b])


def scale(a, c: float):
    return _apply("scale", [a], {"c": float(c)})


def matmul(a, b):
    return _apply("matmul", [a, b])


def transpose(a):
    return _apply("transpose", [a])


def tanh(a):
    return _apply("tanh", [a])


def gelu(a):
    """Gaussian error linear unit, tanh approximation."""
    return _apply("gelu", [a])


def layernorm(x, gain, bias):
    return _apply("layernorm", [x, gain, bias])


def masked_softmax(scores, mask):
    """Row-wise softmax over permitted keys. mask: bool[q, k], every row
    must permit at least one key (a fully-masked row raises)."""
    mask = np.asarray(mask, dtype=bool)
    return _apply("masked_softmax", [scores], {"mask": mask})


def attention(q, k, v, mask, n_heads: int):
    """Fused multi-head scaled-dot-product attention with a shared boolean
    mask; scaling by 1/sqrt(head_dim) happens inside the kernel."""
    mask = np.asarray(mask, dtype=bool)
    return _apply("attention", [q, k, v], {"mask": mask, "n_heads": int(n_heads)})


def concat_rows(*tensors):
    return _apply("concat_rows", list(tensors))


def slice_rows(x, start: int, stop: int):
    return _apply("slice_rows", [x], {"start": int(start), "stop": int(stop)})


def gather_rows(x, idx):
    idx = np.asarray(idx, dtype=np.int64)
    return _apply("gather_rows", [x], {"idx": idx})


def mean_rows(x):
    return _apply("mean_rows", [x])


def l2_normalize(x):
    return _apply("l2_normalize", [x])


def cosine_distance(a, b):
    """Mean over rows of 1 - cos(a_i, b_i). Range [0, 2]."""
    return _apply("cosine_distance", [a, b])


def mse(a, b):
    return _apply("mse", [a, b])


def cross_entropy(logits, targets):
    targets = np.asarray(targets, dtype=np.int64)
    return _apply("cross_entropy", [logits], {"targets": targets})


# ----------------------------------------------------------------- backward

def backward(tape: Tape, loss: Tensor, wrt):
    """Reverse-accumulate d(loss)/d(leaf) for each tensor in ``wrt``.

    loss must be a scalar node on ``tape``. Leaves that do not reach the
    loss get zero gradients of matching shape.
    """
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    if loss.data.shape != ():
        raise ValueError("loss must be scalar")
    grads = {loss.id: np.asarray(1.0)}
    for rec in reversed(tape.records):
        g = grads.get(rec.output_id)
        if g is None:
            continue
        ins = [tape.values[i] for i in rec.input_ids]
        out = tape.values[rec.output_id]
        in_grads = _BACKWARD[rec.op](g, ins, out, rec.saved, rec.params)
        for node_id, ig in zip(rec.input_ids, in_grads):
            if ig is None:
                continue
            _check_finite(rec.op + ".grad", ig)
            if node_id in grads:
                grads[node_id] = grads[node_id] + ig
            else:
                grads[node_id] = ig
    return [grads.get(t.id, np.zeros_like(t.data)) for t in wrt]


# -------------------------------------------------------------------- adam

def adam_init(params: dict) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params: dict, grads: dict, state: dict, lr: float,
              betas=(0.9, 0.999), eps=1e-8) -> None:
    """One in-place Adam update with bias correction."""
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        _check_finite("adam_step", update)
        params[name] = p - update


# -------------------------------------------------------- gradient checking

def finite_difference_check(make_loss, params: dict, step=1e-5, n_coords=6, rng=None):
    """Compare autodiff gradients against central finite differences.

    make_loss(tape, leaves) -> scalar Tensor, where leaves maps names to
    tape leaves built from ``params``. Returns the max relative error over
    the sampled coordinates (denominator floored at 1e-4).
    """
    rng = rng or np.random.default_rng(0)
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    loss = make_loss(tape, leaves)
    names = list(params)
    grads = dict(zip(names, backward(tape, loss, [leaves[k] for k in names])))

    def eval_loss(mutated):
        t = Tape()
        return float(make_loss(t, {k: t.leaf(v) for k, v in mutated.items()}).data)

    worst = 0.0
    for name in names:
        flat = params[name].reshape(-1)
        k = min(n_coords, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        for c in coords:
            bump = np.zeros_like(flat)
            bump[c] = step
            bump = bump.reshape(params[name].shape)
            hi = dict(params)
            lo = dict(params)
            hi[name] = params[name] + bump
            lo[name] = params[name] - bump
            fd = (eval_loss(hi) - eval_loss(lo)) / (2.0 * step)
            ad = float(grads[name].reshape(-1)[c])
            rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-4)
            worst = max(worst, rel)
    return worst
