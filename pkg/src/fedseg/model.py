"""Hybrid conv + transformer segmentation network for 4-modality volumes.

Layout: a UNet-style conv encoder (double conv3d/batchnorm/ReLU per level,
max-pool downsampling, channels doubling), a patch-token transformer at the
bottleneck for global context, a skip-connected decoder (transposed-conv
upsampling, concat, double conv refinement), and a 1x1x1 projection to the
four output classes {background, edema, tumor core, enhancing tumor}.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .conv import batchnorm3d, conv3d, conv_transpose3d, maxpool3d
from .params import ParameterStore
from .tensor import (
    Tensor,
    add,
    add_bias,
    concat,
    gelu,
    layernorm,
    linear,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
    transpose,
)

NUM_CLASSES = 4
CLASS_NAMES = ("background", "edema", "tumor_core", "enhancing_tumor")


@dataclass(frozen=True)
class VitConfig:
    patch_size: int = 4
    embed_dim: int = 64
    heads: int = 2
    layers: int = 1
    mlp_ratio: int = 2


@dataclass(frozen=True)
class ModelConfig:
    in_modalities: int = 4
    num_classes: int = NUM_CLASSES
    base_channels: int = 8
    encoder_levels: int = 2
    input_extent: int = 32
    vit: VitConfig = field(default_factory=VitConfig)

    def validate(self):
        if self.input_extent % (2**self.encoder_levels) != 0:
            raise ValueError(
                f"input_extent {self.input_extent} not divisible by "
                f"2^encoder_levels = {2 ** self.encoder_levels}"
            )
        if self.bottleneck_extent % self.vit.patch_size != 0:
            raise ValueError(
                f"bottleneck extent {self.bottleneck_extent} not divisible by "
                f"patch_size {self.vit.patch_size}"
            )
        if self.vit.embed_dim % self.vit.heads != 0:
            raise ValueError(
                f"embed_dim {self.vit.embed_dim} not divisible by heads "
                f"{self.vit.heads}"
            )

    @property
    def bottleneck_extent(self) -> int:
        return self.input_extent // (2**self.encoder_levels)

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2 ** (self.encoder_levels - 1)

    def level_channels(self, level: int) -> int:
        return self.base_channels * 2**level

    @property
    def tokens(self) -> int:
        return (self.bottleneck_extent // self.vit.patch_size) ** 3

    @property
    def patch_dim(self) -> int:
        return self.bottleneck_channels * self.vit.patch_size**3

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        return cls(
            base_channels=16,
            encoder_levels=4,
            input_extent=128,
            vit=VitConfig(patch_size=8, embed_dim=256, heads=4),
        )

    @classmethod
    def micro(cls) -> "ModelConfig":
        """Smallest config that exercises every layer type (for gradient checks)."""
        return cls(
            base_channels=2,
            encoder_levels=2,
            input_extent=8,
            vit=VitConfig(patch_size=1, embed_dim=8, heads=2),
        )

    def with_extent(self, extent: int) -> "ModelConfig":
        return replace(self, input_extent=extent)


def _he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, shape)


def _add_conv(store, rng, name, c_out, c_in, k):
    store.add(f"{name}.weight", _he_uniform(rng, (c_out, c_in, k, k, k), c_in * k**3))
    store.add(f"{name}.bias", np.zeros(c_out))


def _add_bn(store, rng, name, c):
    store.add(f"{name}.gamma", np.ones(c))
    store.add(f"{name}.beta", np.zeros(c))
    store.add(f"{name}.running_mean", np.zeros(c), buffer=True)
    store.add(f"{name}.running_var", np.ones(c), buffer=True)


def _add_linear(store, rng, name, f_out, f_in):
    store.add(f"{name}.weight", _he_uniform(rng, (f_out, f_in), f_in))
    store.add(f"{name}.bias", np.zeros(f_out))


def build_model(config: ModelConfig, seed: int) -> ParameterStore:
    """Deterministic initialization; identical (config, seed) gives an
    identical store byte for byte."""
    config.validate()
    rng = np.random.default_rng(seed)
    store = ParameterStore()

    c_in = config.in_modalities
    for lvl in range(config.encoder_levels):
        c = config.level_channels(lvl)
        _add_conv(store, rng, f"enc{lvl}.conv1", c, c_in, 3)
        _add_bn(store, rng, f"enc{lvl}.bn1", c)
        _add_conv(store, rng, f"enc{lvl}.conv2", c, c, 3)
        _add_bn(store, rng, f"enc{lvl}.bn2", c)
        c_in = c

    vit = config.vit
    _add_linear(store, rng, "vit.patch_embed", vit.embed_dim, config.patch_dim)
    store.add("vit.pos_embed", rng.normal(0.0, 0.02, (config.tokens, vit.embed_dim)))
    for i in range(vit.layers):
        p = f"vit.block{i}"
        store.add(f"{p}.ln1.gamma", np.ones(vit.embed_dim))
        store.add(f"{p}.ln1.beta", np.zeros(vit.embed_dim))
        for proj in ("q", "k", "v", "out"):
            _add_linear(store, rng, f"{p}.attn.{proj}", vit.embed_dim, vit.embed_dim)
        store.add(f"{p}.ln2.gamma", np.ones(vit.embed_dim))
        store.add(f"{p}.ln2.beta", np.zeros(vit.embed_dim))
        hidden = vit.embed_dim * vit.mlp_ratio
        _add_linear(store, rng, f"{p}.mlp.fc1", hidden, vit.embed_dim)
        _add_linear(store, rng, f"{p}.mlp.fc2", vit.embed_dim, hidden)
    _add_linear(store, rng, "vit.unpatch", config.patch_dim, vit.embed_dim)

    deep = config.bottleneck_channels
    for lvl in reversed(range(config.encoder_levels)):
        c = config.level_channels(lvl)
        store.add(
            f"dec{lvl}.up.weight", _he_uniform(rng, (deep, c, 2, 2, 2), deep * 8)
        )
        store.add(f"dec{lvl}.up.bias", np.zeros(c))
        _add_conv(store, rng, f"dec{lvl}.conv1", c, 2 * c, 3)
        _add_bn(store, rng, f"dec{lvl}.bn1", c)
        _add_conv(store, rng, f"dec{lvl}.conv2", c, c, 3)
        _add_bn(store, rng, f"dec{lvl}.bn2", c)
        deep = c

    _add_conv(store, rng, "head", config.num_classes, config.base_channels, 1)
    return store


def _conv_bn_relu(store, x, name_conv, name_bn, mode):
    y = conv3d(x, store[f"{name_conv}.weight"], store[f"{name_conv}.bias"], padding=1)
    y = batchnorm3d(
        y,
        store[f"{name_bn}.gamma"],
        store[f"{name_bn}.beta"],
        store[f"{name_bn}.running_mean"],
        store[f"{name_bn}.running_var"],
        mode,
    )
    return relu(y)


def encoder_block(store: ParameterStore, x: Tensor, level: int, mode: str):
    """Two conv/bn/relu stages then 2x pooling; returns (pooled, skip)."""
    p = f"enc{level}"
    h = _conv_bn_relu(store, x, f"{p}.conv1", f"{p}.bn1", mode)
    skip = _conv_bn_relu(store, h, f"{p}.conv2", f"{p}.bn2", mode)
    pooled, _ = maxpool3d(skip)
    return pooled, skip


def decoder_block(store: ParameterStore, x: Tensor, skip: Tensor, level: int, mode: str):
    """Upsample x to the skip's grid, concat, refine with two conv stages."""
    p = f"dec{level}"
    up = conv_transpose3d(x, store[f"{p}.up.weight"], store[f"{p}.up.bias"])
    if up.data.shape[2:] != skip.data.shape[2:]:
        raise ValueError(
            f"decoder level {level}: upsampled extent {up.data.shape[2:]} "
            f"!= skip extent {skip.data.shape[2:]}"
        )
    h = concat([up, skip], axis=1)
    h = _conv_bn_relu(store, h, f"{p}.conv1", f"{p}.bn1", mode)
    return _conv_bn_relu(store, h, f"{p}.conv2", f"{p}.bn2", mode)


def vit_bottleneck(
    store: ParameterStore,
    x: Tensor,
    config: ModelConfig,
    attn_sink: Optional[list] = None,
) -> Tensor:
    """Patch-token transformer over the deepest feature map.

    Output has the input's exact shape; tokens are re-projected onto the
    conv grid. ``attn_sink`` collects raw attention weights for inspection.
    """
    n, c = x.data.shape[:2]
    e = x.data.shape[2]
    vit = config.vit
    p = vit.patch_size
    if e % p != 0:
        raise ValueError(f"vit bottleneck: extent {e} not divisible by patch {p}")
    q = e // p
    t = q**3
    pd = c * p**3

    h = reshape(x, (n, c, q, p, q, p, q, p))
    h = transpose(h, (0, 2, 4, 6, 1, 3, 5, 7))
    tokens = reshape(h, (n, t, pd))

    tok = linear(tokens, store["vit.patch_embed.weight"], store["vit.patch_embed.bias"])
    tok = add_bias(tok, store["vit.pos_embed"])

    heads = vit.heads
    hd = vit.embed_dim // heads
    scale = 1.0 / np.sqrt(hd)
    for i in range(vit.layers):
        blk = f"vit.block{i}"
        hn = layernorm(tok, store[f"{blk}.ln1.gamma"], store[f"{blk}.ln1.beta"])

        def split_heads(z):
            return transpose(reshape(z, (n, t, heads, hd)), (0, 2, 1, 3))

        qh = split_heads(linear(hn, store[f"{blk}.attn.q.weight"], store[f"{blk}.attn.q.bias"]))
        kh = split_heads(linear(hn, store[f"{blk}.attn.k.weight"], store[f"{blk}.attn.k.bias"]))
        vh = split_heads(linear(hn, store[f"{blk}.attn.v.weight"], store[f"{blk}.attn.v.bias"]))
        scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), scale)
        attn = softmax(scores, axis=3)
        if attn_sink is not None:
            attn_sink.append(attn.data)
        ctx = reshape(transpose(matmul(attn, vh), (0, 2, 1, 3)), (n, t, vit.embed_dim))
        ctx = linear(ctx, store[f"{blk}.attn.out.weight"], store[f"{blk}.attn.out.bias"])
        tok = add(tok, ctx)

        hn = layernorm(tok, store[f"{blk}.ln2.gamma"], store[f"{blk}.ln2.beta"])
        m = gelu(linear(hn, store[f"{blk}.mlp.fc1.weight"], store[f"{blk}.mlp.fc1.bias"]))
        m = linear(m, store[f"{blk}.mlp.fc2.weight"], store[f"{blk}.mlp.fc2.bias"])
        tok = add(tok, m)

    out = linear(tok, store["vit.unpatch.weight"], store["vit.unpatch.bias"])
    out = reshape(out, (n, q, q, q, c, p, p, p))
    out = transpose(out, (0, 4, 1, 5, 2, 6, 3, 7))
    return reshape(out, (n, c, e, e, e))


def forward(
    store: ParameterStore,
    x: Tensor,
    config: ModelConfig,
    mode: str = "train",
    attn_sink: Optional[list] = None,
) -> Tensor:
    """Full pass: logits with one channel per class, same spatial shape."""
    if x.data.ndim != 5 or x.data.shape[1] != config.in_modalities:
        raise ValueError(
            f"forward: expected [N,{config.in_modalities},S,S,S] input, "
            f"got {x.data.shape}"
        )
    skips = []
    h = x
    for lvl in range(config.encoder_levels):
        h, skip = encoder_block(store, h, lvl, mode)
        skips.append(skip)
    h = vit_bottleneck(store, h, config, attn_sink=attn_sink)
    for lvl in reversed(range(config.encoder_levels)):
        h = decoder_block(store, h, skips[lvl], lvl, mode)
    return conv3d(h, store["head.weight"], store["head.bias"])
