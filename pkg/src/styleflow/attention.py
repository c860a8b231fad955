"""Multi-head scaled dot-product attention on the autodiff tape."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import DimensionError, constant, add, matmul, reshape, scale, softmax, transpose


@dataclass
class AttentionCounter:
    """Tallies work done by :func:`multi_head_attention` calls.

    ``score_entries`` counts query/key pairs per pass (independent of head
    count); ``macs`` counts multiply-accumulates in the two attention matmuls.
    """

    passes: list = field(default_factory=list)

    def record(self, n_q, n_k, d):
        self.passes.append({"n_q": n_q, "n_k": n_k, "score_entries": n_q * n_k, "macs": 2 * n_q * n_k * d})

    @property
    def score_entries(self):
        return sum(p["score_entries"] for p in self.passes)

    @property
    def macs(self):
        return sum(p["macs"] for p in self.passes)


def split_heads(x, heads):
    n, d = x.shape
    return transpose(reshape(x, (n, heads, d // heads)), (1, 0, 2))


def merge_heads(x):
    h, n, dh = x.shape
    return reshape(transpose(x, (1, 0, 2)), (n, h * dh))


def multi_head_attention(q, k, v, heads, key_mask=None, counter=None, probs_out=None):
    """``softmax(q k^T / sqrt(d_head)) v`` per head, heads concatenated.

    ``key_mask`` is an optional boolean vector over keys; ``False`` entries are
    excluded from every query's softmax.  When ``probs_out`` is a list the
    attention probabilities ``(heads, n_q, n_k)`` are appended to it.
    """
    n_q, d = q.shape
    n_k = k.shape[0]
    if d % heads:
        raise DimensionError(f"width {d} is not divisible by {heads} heads")
    if k.shape[1] != d or v.shape != k.shape:
        raise DimensionError(f"attention shapes q={q.shape} k={k.shape} v={v.shape} disagree")
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = scale(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(d // heads))
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)
        if mask.shape != (n_k,) or not mask.any():
            raise DimensionError("key_mask must be a boolean vector over keys with at least one True")
        bias = np.where(mask, 0.0, -1e30).astype(q.dtype)
        scores = add(scores, constant(np.broadcast_to(bias, scores.shape), q.dtype))
    probs = softmax(scores, axis=-1)
    if probs_out is not None:
        probs_out.append(probs.data)
    if counter is not None:
        counter.record(n_q, n_k, d)
    return merge_heads(matmul(probs, vh))
