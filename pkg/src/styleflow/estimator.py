"""scikit-learn style wrappers around the trainer, sampler and edge detector."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import diffusion, imaging
from .model import init_model
from .tokenizer import ModelConfig


def _check_images(X, name="X"):
    if isinstance(X, np.ndarray) and X.ndim in (2, 3) and X.dtype != object:
        X = [X]
    imgs = [imaging.check_image(x, name=f"{name}[{i}]") for i, x in enumerate(X)]
    if not imgs:
        raise ValueError(f"{name} is empty")
    return imgs


class StyleTransferModel(BaseEstimator):
    """Train on style images, then render content images in a given style.

    ``fit(X, y)`` takes style images and their prompts; ``predict(X, styles)``
    returns one image per content image.
    """

    def __init__(self, d=32, patch_px=4, base_resolution=16, n_patches=4, heads=4, blocks=2,
                 channels=3, steps=2000, step_size=diffusion.DEFAULT_STEP_SIZE,
                 momentum=diffusion.DEFAULT_MOMENTUM, batch_repeat=1, lam=1.0,
                 sample_steps=diffusion.DEFAULT_SAMPLE_STEPS, seed=0):
        self.d = d
        self.patch_px = patch_px
        self.base_resolution = base_resolution
        self.n_patches = n_patches
        self.heads = heads
        self.blocks = blocks
        self.channels = channels
        self.steps = steps
        self.step_size = step_size
        self.momentum = momentum
        self.batch_repeat = batch_repeat
        self.lam = lam
        self.sample_steps = sample_steps
        self.seed = seed

    def model_config(self):
        return ModelConfig(d=self.d, patch_px=self.patch_px, base_resolution=self.base_resolution,
                           n_patches=self.n_patches, heads=self.heads, blocks=self.blocks,
                           channels=self.channels)

    def fit(self, X, y=None):
        imgs = _check_images(X)
        prompts = [""] * len(imgs) if y is None else [str(p) for p in y]
        if len(prompts) != len(imgs):
            raise ValueError(f"got {len(imgs)} images but {len(prompts)} prompts")
        self.config_ = self.model_config()
        self.items_ = [diffusion.make_train_item(im, p, self.config_, seed=self.seed + i, item_id=str(i))
                       for i, (im, p) in enumerate(zip(imgs, prompts))]
        self.params_ = init_model(self.config_, seed=self.seed)
        self.initial_loss_ = diffusion.evaluation_loss(self.params_, self.config_, self.items_)
        self.loss_curve_ = diffusion.train(self.items_ * int(self.batch_repeat), self.params_, self.config_,
                                           int(self.steps), step_size=self.step_size,
                                           momentum=self.momentum, seed=self.seed)
        self.final_loss_ = diffusion.evaluation_loss(self.params_, self.config_, self.items_)
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("StyleTransferModel is not fitted; call fit first")

    def predict(self, X, styles, prompts=None):
        self._check_fitted()
        contents = _check_images(X, "X")
        styles = _check_images(styles, "styles")
        if len(styles) == 1:
            styles = styles * len(contents)
        if len(styles) != len(contents):
            raise ValueError(f"got {len(contents)} content images but {len(styles)} styles")
        prompts = [""] * len(contents) if prompts is None else list(prompts)
        return np.stack([
            diffusion.stylize(c, s, self.params_, self.config_, lam=self.lam, prompt=p,
                              steps=self.sample_steps, seed=self.seed)
            for c, s, p in zip(contents, styles, prompts)
        ])

    def score(self, X=None, y=None):
        """Negative evaluation loss on the training items (higher is better)."""
        self._check_fitted()
        return -self.final_loss_


class CannyEdges(TransformerMixin, BaseEstimator):
    """Stateless transformer: images -> stacked uint8 edge maps."""

    def __init__(self, low=imaging.CANNY_LOW, high=imaging.CANNY_HIGH):
        self.low = low
        self.high = high

    def fit(self, X, y=None):
        if self.low >= self.high:
            raise ValueError(f"low threshold {self.low} must be below high threshold {self.high}")
        return self

    def transform(self, X):
        return np.stack([imaging.canny(im, self.low, self.high) for im in _check_images(X)])
