"""Rectified-flow training and Euler sampling in pixel space.

Training reconstructs the resized style image under its own text, edge and
style conditions.  Images live in [-1, 1] inside the model; the interpolant is
``x_t = (1 - t) x0 + t eps`` and the regression target is ``eps - x0``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import imaging
from .model import encode_conditions, predict_velocity, to_model_space, to_pixel_space
from .numerics import NonFiniteError, backward, mse, no_grad, scale
from .stydit import check_lambda
from .tokenizer import patchify, unpatchify

log = logging.getLogger(__name__)

DEFAULT_STEP_SIZE = 1e-2
DEFAULT_MOMENTUM = 0.9
DEFAULT_SAMPLE_STEPS = 20


@dataclass
class TrainItem:
    source: np.ndarray
    global_img: np.ndarray
    crops: list
    edges: np.ndarray
    prompt: str
    id: str = ""


def style_views(style, cfg, seed=0):
    """Global view at base resolution plus ``n_patches`` local views.

    Sources at least twice the base resolution are cropped; anything smaller
    is resized and the resized image duplicated.
    """
    style = imaging.to_channels(style, cfg.channels)
    base = cfg.base_resolution
    global_img = imaging.resize_bilinear(style, base, base)
    if min(style.shape[:2]) >= 2 * base:
        crops = imaging.crop_patches(style, base, cfg.n_patches, seed=seed)
    else:
        crops = [global_img.copy() for _ in range(cfg.n_patches)]
    return global_img, crops


def make_train_item(source, prompt, cfg, seed=0, item_id=""):
    global_img, crops = style_views(source, cfg, seed=seed)
    edges = imaging.canny(global_img)
    return TrainItem(np.asarray(source, dtype=np.float64), global_img, crops, edges, prompt, item_id)


def flow_interpolate(x0, eps, t):
    """Return ``(x_t, velocity_target)``."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    return (1.0 - t) * x0 + t * eps, eps - x0


@dataclass
class SGDMomentum:
    step_size: float = DEFAULT_STEP_SIZE
    momentum: float = DEFAULT_MOMENTUM
    buffers: dict = field(default_factory=dict)

    def step(self, params):
        for name, p in params:
            if p.grad is None:
                continue
            buf = self.buffers.get(name)
            buf = p.grad.copy() if buf is None else self.momentum * buf + p.grad
            self.buffers[name] = buf
            p.data -= p.data.dtype.type(self.step_size) * buf.astype(p.data.dtype)


def sample_lambda(cfg, rng):
    if cfg.lambda_policy == "uniform":
        return float(rng.uniform(0.0, 1.0))
    return 1.0 if cfg.lambda_policy == "one" else 0.0


def item_loss(params, cfg, item, t, eps, lam):
    x0 = to_model_space(item.global_img)
    x_t, target = flow_interpolate(x0, eps, t)
    bundle = encode_conditions(params, cfg, item.global_img, item.crops, item.edges, item.prompt, lam)
    pred = predict_velocity(params, cfg, x_t.astype(params.dtype), t, bundle)
    return mse(pred, patchify(target, cfg.patch_px).astype(params.dtype))


def draw_noise(items, cfg, rng):
    """Per-item ``(t, eps, lam)`` drawn in a fixed order from ``rng``."""
    shape = (cfg.base_resolution, cfg.base_resolution, cfg.channels)
    draws = []
    for _ in items:
        t = float(rng.uniform(0.0, 1.0))
        eps = rng.standard_normal(shape)
        draws.append((t, eps, sample_lambda(cfg, rng)))
    return draws


def training_step(items, params, optimizer, cfg, rng):
    """One optimizer update on the mean loss over ``items``; returns that loss."""
    params.zero_grad()
    total = 0.0
    for item, (t, eps, lam) in zip(items, draw_noise(items, cfg, rng)):
        loss = scale(item_loss(params, cfg, item, t, eps, lam), 1.0 / len(items))
        value = float(loss.data)
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite loss for item {item.id!r} at t={t:.4f}")
        backward(loss)
        total += value
    optimizer.step(params)
    params.zero_grad()
    return total


def evaluation_loss(params, cfg, items, seed=1234, draws=8):
    """Mean loss over a fixed set of ``(t, eps, lam)`` draws; comparable across training."""
    rng = np.random.default_rng(seed)
    total = 0.0
    with no_grad():
        for _ in range(draws):
            for item, (t, eps, lam) in zip(items, draw_noise(items, cfg, rng)):
                total += float(item_loss(params, cfg, item, t, eps, lam).data)
    return total / (draws * len(items))


def train(items, params, cfg, steps, step_size=DEFAULT_STEP_SIZE, momentum=DEFAULT_MOMENTUM,
          seed=0, callback=None):
    """Run ``steps`` updates; ``callback(step, loss, wall_ms)`` after each.  Returns the losses."""
    rng = np.random.default_rng(seed)
    opt = SGDMomentum(step_size, momentum)
    losses = []
    for step in range(steps):
        t0 = time.perf_counter()
        loss = training_step(items, params, opt, cfg, rng)
        wall_ms = (time.perf_counter() - t0) * 1e3
        losses.append(loss)
        if callback is not None:
            callback(step, loss, wall_ms)
        if step % 100 == 0:
            log.debug("step %d loss %.6f", step, loss)
    return losses


def model_velocity(params, cfg, bundle):
    """Velocity field ``v(x, t)`` on model-space images, evaluated without a tape."""

    def v(x, t):
        with no_grad():
            pred = predict_velocity(params, cfg, x.astype(params.dtype), t, bundle)
        return unpatchify(pred.data.astype(np.float64), cfg.grid, cfg.patch_px, cfg.channels)

    return v


def euler_integrate(velocity, x1, steps):
    """Integrate from t=1 to t=0 in ``steps`` uniform Euler steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x1, dtype=np.float64)
    dt = 1.0 / steps
    for k in range(steps):
        t = 1.0 - k * dt
        x = x - dt * velocity(x, t)
    return x


def initial_noise(cfg, seed):
    shape = (cfg.base_resolution, cfg.base_resolution, cfg.channels)
    return np.random.default_rng(seed).standard_normal(shape)


def sample(params, cfg, bundle, steps=DEFAULT_SAMPLE_STEPS, seed=0, velocity=None):
    """Generate an image in [0, 1]; ``velocity`` overrides the learned field."""
    v = velocity or model_velocity(params, cfg, bundle)
    return to_pixel_space(euler_integrate(v, initial_noise(cfg, seed), steps))


def stylize(content, style, params, cfg, lam=1.0, prompt="", steps=DEFAULT_SAMPLE_STEPS, seed=0,
            use_edges=True):
    """Render ``content``'s edge structure in ``style``.

    ``use_edges=False`` drops the edge pathway entirely (reference for lam=0).
    """
    lam = check_lambda(lam)
    content = imaging.check_image(content, name="content")
    base = cfg.base_resolution
    edges = imaging.canny(imaging.resize_bilinear(content, base, base)) if use_edges else None
    global_img, crops = style_views(style, cfg, seed=seed)
    with no_grad():
        bundle = encode_conditions(params, cfg, global_img, crops, edges, prompt, lam)
    return sample(params, cfg, bundle, steps=steps, seed=seed)


def gradcheck_config():
    """Smallest full-stack config used for gradient checks: d=8, L=4, n=3, one block."""
    from .tokenizer import ModelConfig

    return ModelConfig(d=8, patch_px=4, base_resolution=8, n_patches=3, heads=2, blocks=1,
                       text_tokens=3, vocab=16, time_features=4)


def grad_check_model(cfg=None, seed=0, tol=1e-4, t=0.37, lam=0.6, max_per_param=None):
    """Check tokenizer + modulator + block stack + head gradients in float64.

    Raises :class:`~styleflow.numerics.GradCheckError` when any scalar exceeds ``tol``.
    """
    from .model import init_model, param_group
    from .numerics import grad_check

    cfg = cfg or gradcheck_config()
    params = init_model(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    size = 2 * cfg.base_resolution
    source = rng.uniform(0.0, 1.0, (size, size, cfg.channels))
    item = make_train_item(source, "a small test prompt", cfg, seed=seed)
    # Deterministic non-empty edge map so the edge pathway carries gradient.
    item.edges = (rng.uniform(size=item.edges.shape) > 0.6).astype(np.uint8)
    eps = rng.standard_normal(item.global_img.shape)
    return grad_check(lambda: item_loss(params, cfg, item, t, eps, lam), params, tol=tol,
                      group_of=param_group, max_per_param=max_per_param, seed=seed)
