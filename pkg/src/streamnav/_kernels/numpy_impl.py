"""Pure-numpy kernels: masked softmax and fused multi-head masked attention.

Reference implementation for the compiled backend in ``_cyimpl.pyx``; both
backends expose the same four functions with identical semantics. Inputs are
validated by the wrappers in ``streamnav._kernels``; these functions assume
C-contiguous float64 arrays and at least one permitted key per query row.
"""

import numpy as np

BACKEND = "numpy"


def masked_softmax_fwd(scores, mask):
    """Row-wise softmax over permitted keys; masked entries are exactly 0."""
    neg = np.where(mask, scores, -np.inf)
    mx = neg.max(axis=-1, keepdims=True)
    e = np.exp(neg - mx)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax_bwd(grad_out, probs):
    inner = (grad_out * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_out - inner)


def attn_fwd(q, k, v, mask, n_heads):
    """Fused masked attention over all heads.

    q: (Tq, D), k/v: (Tk, D), mask: (Tq, Tk) bool shared across heads.
    Returns (out (Tq, D), probs (H, Tq, Tk)); scaling 1/sqrt(D/H) is internal.
    """
    tq, d = q.shape
    tk = k.shape[0]
    hd = d // n_heads
    scale = 1.0 / np.sqrt(hd)
    qh = q.reshape(tq, n_heads, hd).transpose(1, 0, 2)
    kh = k.reshape(tk, n_heads, hd).transpose(1, 2, 0)
    vh = v.reshape(tk, n_heads, hd).transpose(1, 0, 2)
    scores = np.where(mask, (qh @ kh) * scale, -np.inf)
    mx = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - mx)
    probs = e / e.sum(axis=-1, keepdims=True)
    out = (probs @ vh).transpose(1, 0, 2).reshape(tq, d)
    return out, probs


def attn_bwd(grad_out, q, k, v, probs, n_heads):
    """Backward of attn_fwd; returns (grad_q, grad_k, grad_v)."""
    tq, d = q.shape
    tk = k.shape[0]
    hd = d // n_heads
    scale = 1.0 / np.sqrt(hd)
    gh = grad_out.reshape(tq, n_heads, hd).transpose(1, 0, 2)
    qh = q.reshape(tq, n_heads, hd).transpose(1, 0, 2)
    kh = k.reshape(tk, n_heads, hd).transpose(1, 0, 2)
    vh = v.reshape(tk, n_heads, hd).transpose(1, 0, 2)
    gprobs = gh @ vh.transpose(0, 2, 1)
    gscores = probs * (gprobs - (gprobs * probs).sum(axis=-1, keepdims=True))
    gscores *= scale
    gq = (gscores @ kh).transpose(1, 0, 2).reshape(tq, d)
    gk = (gscores.transpose(0, 2, 1) @ qh).transpose(1, 0, 2).reshape(tk, d)
    gv = (probs.transpose(0, 2, 1) @ gh).transpose(1, 0, 2).reshape(tk, d)
    return gq, gk, gv
