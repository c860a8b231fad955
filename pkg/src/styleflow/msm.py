"""Multi-view style modulator.

Local style patches are merged position-wise, compressed to one token per
position by a predicted convex combination, concatenated after the global
style tokens and refined with two self-attention passes and an FFN.
"""
from __future__ import annotations

from .attention import multi_head_attention
from .numerics import (
    DimensionError,
    add,
    concat,
    gelu,
    layer_norm,
    linear,
    matmul,
    reshape,
    softmax,
)
from .tokenizer import TokenSequence


def init_params(store, cfg, n=None):
    n = n or cfg.n_patches
    d = cfg.d
    store.normal("msm.mlp.W1", (n * d, 2 * n * d))
    store.zeros("msm.mlp.b1", (2 * n * d,))
    store.normal("msm.mlp.W2", (2 * n * d, n))
    store.zeros("msm.mlp.b2", (n,))
    for w in ("Wq", "Wk", "Wv"):
        store.normal(f"msm.{w}", (d, d))
    store.normal("msm.ffn.W1", (d, 4 * d))
    store.zeros("msm.ffn.b1", (4 * d,))
    store.normal("msm.ffn.W2", (4 * d, d))
    store.zeros("msm.ffn.b2", (d,))
    for ln in ("ln1", "ln2"):
        store.ones(f"msm.{ln}.g", (d,))
        store.zeros(f"msm.{ln}.b", (d,))


def merge_local(local_seqs):
    """Stack n aligned ``(L, d)`` sequences into ``(L, n, d)`` groups."""
    local_seqs = list(local_seqs)
    if not local_seqs:
        raise DimensionError("merge_local needs at least one patch sequence")
    shape = local_seqs[0].tokens.shape
    for s in local_seqs:
        if s.tokens.shape != shape:
            raise DimensionError(f"patch sequences differ in shape: {shape} vs {s.tokens.shape}")
    L, d = shape
    return concat([reshape(s.tokens, (L, 1, d)) for s in local_seqs], axis=1)


def compression_weights(merged, params):
    """Softmax-normalised per-position weights ``(L, n)`` predicted by the shared MLP."""
    L, n, d = merged.shape
    W1 = params["msm.mlp.W1"]
    if W1.shape[0] != n * d:
        raise DimensionError(f"weight predictor expects {W1.shape[0] // d} patches, got {n}")
    flat = reshape(merged, (L, n * d))
    hidden = gelu(linear(flat, W1, params["msm.mlp.b1"]))
    return softmax(linear(hidden, params["msm.mlp.W2"], params["msm.mlp.b2"]), axis=-1)


def compress(merged, params, return_weights=False):
    L, n, d = merged.shape
    alpha = compression_weights(merged, params)
    out = reshape(matmul(reshape(alpha, (L, 1, n)), merged), (L, d))
    seq = TokenSequence(out, "style-local")
    return (seq, alpha) if return_weights else seq


def mix(compressed, global_seq):
    """Sequence-axis concatenation, global tokens first."""
    if compressed.tokens.shape != global_seq.tokens.shape:
        raise DimensionError(
            f"global {global_seq.tokens.shape} and local {compressed.tokens.shape} tokens differ"
        )
    out = TokenSequence(concat([global_seq.tokens, compressed.tokens]), "style-global")
    out.segments = (("style-global", len(global_seq)), ("style-local", len(compressed)))
    return out


def ffn(x, params, prefix):
    h = gelu(linear(x, params[f"{prefix}.W1"], params[f"{prefix}.b1"]))
    return linear(h, params[f"{prefix}.W2"], params[f"{prefix}.b2"])


def style_attention(mixed, params, heads, counter=None, probs_out=None):
    x = mixed.tokens
    d = x.shape[1]
    if d % heads:
        raise DimensionError(f"d={d} is not divisible by heads={heads}")
    g1, b1 = params["msm.ln1.g"], params["msm.ln1.b"]
    h = layer_norm(x, g1, b1)
    q = matmul(h, params["msm.Wq"])
    k = matmul(h, params["msm.Wk"])
    v = matmul(h, params["msm.Wv"])
    x1 = add(multi_head_attention(q, k, v, heads, counter=counter, probs_out=probs_out), q)
    # Second pass queries with the refined tokens but keeps the original keys/values.
    x2 = add(multi_head_attention(layer_norm(x1, g1, b1), k, v, heads,
                                  counter=counter, probs_out=probs_out), x1)
    out = add(ffn(layer_norm(x2, params["msm.ln2.g"], params["msm.ln2.b"]), params, "msm.ffn"), x2)
    return TokenSequence(out, mixed.kind)


def msm_forward(global_seq, local_seqs, params, heads, counter=None):
    merged = merge_local(local_seqs)
    return style_attention(mix(compress(merged, params), global_seq), params, heads, counter=counter)
