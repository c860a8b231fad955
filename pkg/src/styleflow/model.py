"""Wiring of tokenizer, style modulator and block stack into one velocity model."""
from __future__ import annotations

import numpy as np

from . import msm, stydit, tokenizer
from .numerics import ParamStore
from .stydit import ConditionBundle
from .tokenizer import ModelConfig, edges_as_image, embed_image, embed_text


def to_model_space(img):
    return 2.0 * np.asarray(img, dtype=np.float64) - 1.0


def to_pixel_space(x):
    return np.clip((np.asarray(x, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def init_model(cfg=None, seed=0, dtype=np.float32):
    """Fresh parameters: N(0, 0.02) projections, zero biases, unit gains."""
    cfg = cfg or ModelConfig()
    store = ParamStore(dtype, seed=seed)
    tokenizer.init_params(store, cfg)
    msm.init_params(store, cfg)
    stydit.init_params(store, cfg)
    return store


def param_group(name):
    """Coarse grouping used in gradient-check reports."""
    head = name.split(".")[0]
    if head in ("embed", "pos", "kind", "text"):
        return "tokenizer"
    if head.startswith("block"):
        return "stydit." + head
    return head


def encode_conditions(params, cfg, global_img, crops, edges, prompt, lam=1.0, counter=None):
    """Token-space conditions for the block stack.

    ``edges=None`` builds the edge-free variant: no edge tokens are embedded and
    the blocks skip the fusion step entirely.
    """
    global_seq = embed_image(to_model_space(global_img), "style-global", params, cfg)
    locals_ = [embed_image(to_model_space(c), "style-local", params, cfg) for c in crops]
    style = msm.msm_forward(global_seq, locals_, params, cfg.heads, counter=counter)
    text = embed_text(prompt, params, cfg.text_tokens)
    canny = None if edges is None else embed_image(edges_as_image(edges, cfg.channels), "canny", params, cfg)
    return ConditionBundle(text, style, canny, lam)


def predict_velocity(params, cfg, x_t, t, bundle, key_mask=None):
    """Velocity prediction ``(L, patch_px**2 * C)`` for a model-space image ``x_t``."""
    noisy = embed_image(x_t, "noise", params, cfg)
    img = stydit.stack_forward(noisy, bundle, params, t, cfg, key_mask=key_mask)
    return stydit.output_head(img, params)
