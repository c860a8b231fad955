"""Joint image/text/style transformer blocks with additive edge conditioning."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import multi_head_attention
from .msm import ffn
from .numerics import (
    DimensionError,
    add,
    concat,
    constant,
    gelu,
    layer_norm,
    linear,
    matmul,
    reshape,
    rows,
    scale,
)
from .tokenizer import TokenSequence


class ParameterError(ValueError):
    pass


def check_lambda(lam):
    lam = float(lam)
    if not 0.0 <= lam <= 1.0 or math.isnan(lam):
        raise ParameterError(f"lambda must lie in [0, 1], got {lam}")
    return lam


@dataclass
class ConditionBundle:
    """Everything the block stack conditions on besides the noisy image.

    ``canny`` may be ``None`` for the edge-free variant of the model.
    """

    text: TokenSequence
    style: TokenSequence
    canny: TokenSequence | None
    lam: float = 1.0

    def __post_init__(self):
        self.lam = check_lambda(self.lam)


def init_params(store, cfg):
    d = cfg.d
    store.normal("time.W1", (2 * cfg.time_features, d))
    store.zeros("time.b1", (d,))
    store.normal("time.W2", (d, d))
    store.zeros("time.b2", (d,))
    for i in range(cfg.blocks):
        p = f"block{i}"
        store.ones(f"{p}.ln1.g", (d,))
        store.zeros(f"{p}.ln1.b", (d,))
        for w in ("Wq", "Wk", "Wv", "Wo"):
            store.normal(f"{p}.{w}", (d, d))
        store.ones(f"{p}.ln2.g", (d,))
        store.zeros(f"{p}.ln2.b", (d,))
        store.normal(f"{p}.ffn.W1", (d, 4 * d))
        store.zeros(f"{p}.ffn.b1", (4 * d,))
        store.normal(f"{p}.ffn.W2", (4 * d, d))
        store.zeros(f"{p}.ffn.b2", (d,))
    store.ones("head.ln.g", (d,))
    store.zeros("head.ln.b", (d,))
    store.normal("head.W", (d, cfg.patch_dim))
    store.zeros("head.b", (cfg.patch_dim,))


def timestep_features(t, n_features, dtype=np.float64):
    """Sinusoidal features of ``t`` in [0, 1], shape ``(1, 2 * n_features)``."""
    freqs = np.exp(-math.log(10000.0) * np.arange(n_features) / n_features)
    args = 1000.0 * float(t) * freqs
    return np.concatenate([np.sin(args), np.cos(args)])[None, :].astype(dtype)


def time_embedding(t, params):
    n_features = params["time.W1"].shape[0] // 2
    feats = constant(timestep_features(t, n_features, params.dtype), params.dtype)
    h = gelu(linear(feats, params["time.W1"], params["time.b1"]))
    return linear(h, params["time.W2"], params["time.b2"])


def fuse_canny(image_seq, canny_seq, lam):
    """``lam * canny + image``, elementwise."""
    lam = check_lambda(lam)
    if canny_seq.tokens.shape != image_seq.tokens.shape:
        raise DimensionError(
            f"canny tokens {canny_seq.tokens.shape} do not match image tokens {image_seq.tokens.shape}"
        )
    return TokenSequence(add(scale(canny_seq.tokens, lam), image_seq.tokens), image_seq.kind, image_seq.grid)


def mma(segments, params, block, temb, heads, key_mask=None, counter=None, probs_out=None):
    """One joint-attention transformer block over the concatenated segments.

    Returns the updated segments, split at the original boundaries.
    """
    p = f"block{block}"
    lengths = [len(s) for s in segments]
    x = concat([s.tokens for s in segments]) if len(segments) > 1 else segments[0].tokens
    h = layer_norm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
    h = add(h, reshape(temb, (temb.shape[-1],)))
    q = matmul(h, params[f"{p}.Wq"])
    k = matmul(h, params[f"{p}.Wk"])
    v = matmul(h, params[f"{p}.Wv"])
    att = multi_head_attention(q, k, v, heads, key_mask=key_mask, counter=counter, probs_out=probs_out)
    x = add(x, matmul(att, params[f"{p}.Wo"]))
    x = add(x, ffn(layer_norm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"]), params, f"{p}.ffn"))
    if x.shape[0] != sum(lengths):
        raise RuntimeError("segment bookkeeping mismatch")
    out, start = [], 0
    for seg, n in zip(segments, lengths):
        out.append(TokenSequence(rows(x, start, start + n), seg.kind, seg.grid, seg.segments))
        start += n
    return out


def stydit_block(image_seq, bundle, params, block, temb, heads, key_mask=None):
    """Fuse the edge tokens into the image tokens, then run joint attention.

    Returns ``(image, text, style)`` for the next block.
    """
    fused = fuse_canny(image_seq, bundle.canny, bundle.lam) if bundle.canny is not None else image_seq
    img, text, style = mma([fused, bundle.text, bundle.style], params, block, temb, heads, key_mask=key_mask)
    return img, text, style


def stack_forward(image_seq, bundle, params, t, cfg, key_mask=None):
    """Run every block; text and style segments are carried forward, the edge
    tokens and ``lam`` are re-applied unchanged at each block."""
    temb = time_embedding(t, params)
    img, text, style = image_seq, bundle.text, bundle.style
    for b in range(cfg.blocks):
        carried = ConditionBundle(text, style, bundle.canny, bundle.lam)
        img, text, style = stydit_block(img, carried, params, b, temb, cfg.heads, key_mask=key_mask)
    return img


def output_head(image_seq, params, norm=True):
    """Per-token velocity in patch-pixel space; ``norm=False`` bypasses the layer norm."""
    x = image_seq.tokens
    if norm:
        x = layer_norm(x, params["head.ln.g"], params["head.ln.b"])
    return linear(x, params["head.W"], params["head.b"])
