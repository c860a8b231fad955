"""Images, edge maps and prompts to token sequences, and patch tokens back to pixels."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import INIT_STD, DimensionError, Tensor, add, concat, constant, gather, linear

KINDS = ("image", "text", "canny", "style-global", "style-local", "noise")
# Kinds whose tokens come from a raster through the shared patch embedder.
IMAGE_KINDS = ("image", "canny", "style-global", "style-local", "noise")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Model hyperparameters.  Defaults are the desk-scale configuration."""

    d: int = 32
    patch_px: int = 4
    base_resolution: int = 16
    n_patches: int = 10
    heads: int = 4
    blocks: int = 2
    channels: int = 3
    text_tokens: int = 8
    vocab: int = 1024
    time_features: int = 16
    lambda_policy: str = "uniform"

    def __post_init__(self):
        if self.base_resolution % self.patch_px:
            raise ConfigError(
                f"base_resolution {self.base_resolution} is not divisible by patch_px {self.patch_px}"
            )
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.n_patches < 1 or self.blocks < 1:
            raise ConfigError("n_patches and blocks must be >= 1")
        if self.lambda_policy not in ("uniform", "one", "zero"):
            raise ConfigError(f"unknown lambda_policy {self.lambda_policy!r}")

    @property
    def grid(self):
        g = self.base_resolution // self.patch_px
        return (g, g)

    @property
    def seq_len(self):
        r, c = self.grid
        return r * c

    @property
    def patch_dim(self):
        return self.patch_px * self.patch_px * self.channels

    def to_dict(self):
        return asdict(self)


@dataclass
class TokenSequence:
    tokens: Tensor
    kind: str
    grid: tuple | None = None
    # (kind, length) runs for sequences assembled from several sources.
    segments: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown token kind {self.kind!r}")
        if self.tokens.data.ndim != 2:
            raise DimensionError(f"token matrix must be 2-D, got {self.tokens.shape}")
        if self.grid is not None and self.grid[0] * self.grid[1] != self.tokens.shape[0]:
            raise DimensionError(f"grid {self.grid} does not match {self.tokens.shape[0]} tokens")

    def __len__(self):
        return self.tokens.shape[0]

    @property
    def width(self):
        return self.tokens.shape[1]


def init_params(store, cfg):
    store.normal("embed.W", (cfg.patch_dim, cfg.d))
    store.zeros("embed.b", (cfg.d,))
    # One draw shared by every raster kind: tables train separately but start
    # aligned, so grid positions match across image, edge and style tokens.
    pos = store.rng.normal(0.0, INIT_STD, size=(cfg.seq_len, cfg.d))
    for kind in IMAGE_KINDS:
        store.add(f"pos.{kind}", pos)
    store.normal("pos.text", (cfg.text_tokens, cfg.d))
    for kind in KINDS:
        store.normal(f"kind.{kind}", (cfg.d,))
    store.normal("text.table", (cfg.vocab, cfg.d))
    store.normal("text.pad", (1, cfg.d))


def patchify(img, patch_px):
    """Flatten non-overlapping patches in row-major order: ``(L, patch_px**2 * C)``."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    if h % patch_px or w % patch_px:
        raise DimensionError(f"{w}x{h} image is not divisible into {patch_px}px patches")
    gh, gw = h // patch_px, w // patch_px
    blocks = arr.reshape(gh, patch_px, gw, patch_px, c).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(gh * gw, patch_px * patch_px * c)


def unpatchify(patches, grid, patch_px, channels=3):
    """Inverse of :func:`patchify`; no clamping."""
    arr = np.asarray(patches)
    gh, gw = grid
    if arr.shape != (gh * gw, patch_px * patch_px * channels):
        raise DimensionError(
            f"patch matrix {arr.shape} does not match grid {grid} with {patch_px}px x {channels}ch"
        )
    blocks = arr.reshape(gh, gw, patch_px, patch_px, channels).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(gh * patch_px, gw * patch_px, channels)


def edges_as_image(edges, channels=3):
    """Edge map as a float image so it can share the patch embedder."""
    e = np.asarray(edges, dtype=np.float64)
    return np.repeat(e[:, :, None], channels, axis=2)


def embed(raw, kind, params, grid=None):
    """Linear patch embedding plus positional table and kind vector."""
    if kind not in IMAGE_KINDS:
        raise ValueError(f"{kind!r} is not an image-derived kind")
    W = params["embed.W"]
    raw = raw if isinstance(raw, Tensor) else constant(raw, params.dtype)
    if raw.shape[1] != W.shape[0]:
        raise DimensionError(f"patch width {raw.shape[1]} != embedder input {W.shape[0]}")
    pos = params[f"pos.{kind}"]
    if raw.shape[0] != pos.shape[0]:
        raise DimensionError(f"{raw.shape[0]} patches but positional table has {pos.shape[0]} rows")
    tokens = add(add(linear(raw, W, params["embed.b"]), pos), params[f"kind.{kind}"])
    return TokenSequence(tokens, kind, grid)


def embed_image(img, kind, params, cfg):
    return embed(patchify(img, cfg.patch_px), kind, params, grid=cfg.grid)


def text_bucket(word, vocab):
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab


def text_ids(prompt, max_tokens, vocab):
    """Bucket ids of the first ``max_tokens`` whitespace tokens; ``-1`` marks padding."""
    ids = [text_bucket(w, vocab) for w in prompt.split()[:max_tokens]]
    return ids + [-1] * (max_tokens - len(ids))


def embed_text(prompt, params, max_tokens=None):
    table = params["text.table"]
    vocab = table.shape[0]
    max_tokens = max_tokens or params["pos.text"].shape[0]
    ids = np.array(text_ids(prompt, max_tokens, vocab))
    # Padding rows point one past the table, at the appended pad vector.
    full = np.where(ids < 0, vocab, ids)
    rows = gather(concat([table, params["text.pad"]]), full)
    tokens = add(add(rows, params["pos.text"]), params["kind.text"])
    return TokenSequence(tokens, "text")
