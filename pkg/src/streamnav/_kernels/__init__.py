"""Kernel backend selection and input validation.

The compiled extension is preferred when importable, with a pure-numpy
fallback otherwise. Set STREAMNAV_KERNELS to "numpy" or "cython" to force a
backend; forcing "cython" raises if the extension was not built.

Both backends implement:
    masked_softmax_fwd(scores, mask)          -> probs
    masked_softmax_bwd(grad_out, probs)       -> grad_scores
    attn_fwd(q, k, v, mask, n_heads)          -> (out, probs)
    attn_bwd(grad_out, q, k, v, probs, heads) -> (grad_q, grad_k, grad_v)

Masked score entries produce exactly-zero probabilities. A query row with no
permitted key is a caller bug and raises ValueError here, before dispatch.
"""

import os

import numpy as np

from . import numpy_impl


def get_impl(name):
    """Return a backend module by name ("numpy" or "cython")."""
    if name == "numpy":
        return numpy_impl
    if name == "cython":
        from . import _cyimpl

        return _cyimpl
    raise ValueError(f"unknown kernel backend {name!r}")


def _select():
    forced = os.environ.get("STREAMNAV_KERNELS", "").strip().lower()
    if forced == "numpy":
        return numpy_impl
    if forced == "cython":
        return get_impl("cython")
    if forced:
        raise ValueError(f"unknown STREAMNAV_KERNELS value {forced!r}")
    try:
        return get_impl("cython")
    except ImportError:
        return numpy_impl


_impl = _select()
BACKEND = _impl.BACKEND


def _f64(a, name):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite values")
    return a


def _mask_u8(mask, n_rows, n_cols):
    mask = np.ascontiguousarray(mask, dtype=bool)
    if mask.shape != (n_rows, n_cols):
        raise ValueError(f"mask shape {mask.shape} != ({n_rows}, {n_cols})")
    if not mask.any(axis=1).all():
        raise ValueError("attention mask has a fully-masked query row")
    return mask.view(np.uint8)


def masked_softmax_fwd(scores, mask):
    scores = _f64(scores, "scores")
    if scores.ndim != 2:
        raise ValueError("scores must be 2-d")
    return _impl.masked_softmax_fwd(scores, _mask_u8(mask, *scores.shape))


def masked_softmax_bwd(grad_out, probs):
    return _impl.masked_softmax_bwd(
        np.ascontiguousarray(grad_out, dtype=np.float64),
        np.ascontiguousarray(probs, dtype=np.float64),
    )


def attn_fwd(q, k, v, mask, n_heads):
    q = _f64(q, "q")
    k = _f64(k, "k")
    v = _f64(v, "v")
    if q.ndim != 2 or k.shape != v.shape or q.shape[1] != k.shape[1]:
        raise ValueError("bad attention input shapes")
    if q.shape[1] % n_heads != 0:
        raise ValueError(f"model dim {q.shape[1]} not divisible by {n_heads} heads")
    return _impl.attn_fwd(q, k, v, _mask_u8(mask, q.shape[0], k.shape[0]), n_heads)


def attn_bwd(grad_out, q, k, v, probs, n_heads):
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (grad_out, q, k, v, probs)]
    return _impl.attn_bwd(*args, n_heads)
