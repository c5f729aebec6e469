"""Miniature patch-token transformer encoder.

Produces per-patch features (post final LayerNorm) and exports the
last layer's head-averaged attention map.  No CLS token: every matrix
downstream is N x N over patch tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

LN_EPS = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    depth: int = 2
    dim: int = 32
    heads: int = 4
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2


@dataclass
class EncoderOutput:
    features: Tensor        # (N, dim)
    attention_last: Tensor  # (N, N), row-stochastic, head-averaged


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std, the usual ViT init."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def init_params(cfg: EncoderConfig) -> dict[str, Tensor]:
    """Truncated-normal weights, zero biases, learned position embeddings."""
    rng = np.random.default_rng(cfg.seed)
    p: dict[str, np.ndarray] = {}
    p["patch_embed.weight"] = trunc_normal(rng, (cfg.patch_dim, cfg.dim))
    p["patch_embed.bias"] = np.zeros(cfg.dim)
    p["pos_embed"] = trunc_normal(rng, (cfg.num_patches, cfg.dim))
    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        p[f"{pre}.norm1.weight"] = np.ones(cfg.dim)
        p[f"{pre}.norm1.bias"] = np.zeros(cfg.dim)
        p[f"{pre}.qkv.weight"] = trunc_normal(rng, (cfg.dim, 3 * cfg.dim))
        p[f"{pre}.qkv.bias"] = np.zeros(3 * cfg.dim)
        p[f"{pre}.proj.weight"] = trunc_normal(rng, (cfg.dim, cfg.dim))
        p[f"{pre}.proj.bias"] = np.zeros(cfg.dim)
        p[f"{pre}.norm2.weight"] = np.ones(cfg.dim)
        p[f"{pre}.norm2.bias"] = np.zeros(cfg.dim)
        p[f"{pre}.fc1.weight"] = trunc_normal(rng, (cfg.dim, cfg.mlp_ratio * cfg.dim))
        p[f"{pre}.fc1.bias"] = np.zeros(cfg.mlp_ratio * cfg.dim)
        p[f"{pre}.fc2.weight"] = trunc_normal(rng, (cfg.mlp_ratio * cfg.dim, cfg.dim))
        p[f"{pre}.fc2.bias"] = np.zeros(cfg.dim)
    p["norm.weight"] = np.ones(cfg.dim)
    p["norm.bias"] = np.zeros(cfg.dim)
    return {name: Tensor(arr, requires_grad=True) for name, arr in p.items()}


def param_count(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


def patchify(img: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """(C, H, W) image to (N, C*P*P) row-major patch matrix."""
    c, h, w = img.shape
    if (c, h, w) != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ConfigError(
            f"image shape {img.shape} does not match config "
            f"({cfg.channels},{cfg.image_size},{cfg.image_size})"
        )
    n = cfg.image_size // cfg.patch_size
    x = img.reshape(c, n, cfg.patch_size, n, cfg.patch_size)
    return x.transpose(1, 3, 0, 2, 4).reshape(n * n, cfg.patch_dim)


def _linear(x: Tensor, params: dict[str, Tensor], name: str,
            adapters=None, training: bool = False, rng=None) -> Tensor:
    w = params[f"{name}.weight"]
    y = x @ w
    if adapters is not None and name in adapters:
        y = y + adapters[name].delta(x, training=training, rng=rng)
    return y + params[f"{name}.bias"]


def encode(img, params: dict[str, Tensor], cfg: EncoderConfig, *,
           adapters=None, training: bool = False,
           rng: np.random.Generator | None = None,
           use_pos_embed: bool = True) -> EncoderOutput:
    """Forward pass; pure in (img, params), deterministic unless dropout is live."""
    data = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    patches = Tensor(patchify(data, cfg))
    x = _linear(patches, params, "patch_embed", adapters, training, rng)
    if use_pos_embed:
        x = x + params["pos_embed"]

    dh = cfg.dim // cfg.heads
    inv_sqrt_dh = 1.0 / np.sqrt(dh)
    attention_last = None
    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        h = ad.layernorm(x, params[f"{pre}.norm1.weight"], params[f"{pre}.norm1.bias"],
                         eps=LN_EPS)
        qkv = _linear(h, params, f"{pre}.qkv", adapters, training, rng)
        head_outs = []
        head_maps = []
        for j in range(cfg.heads):
            q = qkv[:, j * dh:(j + 1) * dh]
            k = qkv[:, cfg.dim + j * dh:cfg.dim + (j + 1) * dh]
            v = qkv[:, 2 * cfg.dim + j * dh:2 * cfg.dim + (j + 1) * dh]
            attn = ad.softmax_rows((q @ ad.transpose(k)) * inv_sqrt_dh)
            head_maps.append(attn)
            head_outs.append(attn @ v)
        if i == cfg.depth - 1:
            mean_map = head_maps[0]
            for m in head_maps[1:]:
                mean_map = mean_map + m
            attention_last = mean_map * (1.0 / cfg.heads)
        merged = ad.concat(head_outs, axis=1)
        x = x + _linear(merged, params, f"{pre}.proj", adapters, training, rng)

        h = ad.layernorm(x, params[f"{pre}.norm2.weight"], params[f"{pre}.norm2.bias"],
                         eps=LN_EPS)
        h = ad.gelu(_linear(h, params, f"{pre}.fc1", adapters, training, rng))
        x = x + _linear(h, params, f"{pre}.fc2", adapters, training, rng)

    features = ad.layernorm(x, params["norm.weight"], params["norm.bias"], eps=LN_EPS)
    return EncoderOutput(features=features, attention_last=attention_last)
