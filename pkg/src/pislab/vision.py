"""Toy frozen vision backbone and the instruction-conditioned mask head.

The backbone cuts the image into non-overlapping 4x4 patches, projects each
patch linearly, adds a learned position embedding and runs two transformer
blocks. The head fuses text into the patch tokens with one cross-attention
layer, applies the routed head adapters (``head.S``, ``head.C``), and scores
each patch by a scaled dot product with the pooled instruction embedding.
Patch logits are upsampled to pixels by nearest neighbour.

The single fusion layer stands in for the detector of the original system,
whose internals are not modelled here.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    ParameterGroup,
    Tensor,
    clamp_prob,
    matmul,
    relu,
    sigmoid,
    take_rows,
    upsample_nearest,
)
from .nn import (
    AdapterModule,
    adapter_forward,
    attention,
    block,
    init_adapter,
    init_attention,
    init_block,
    init_linear,
    init_norm,
    linear,
    norm,
)
from .text import route


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, P, patch*patch*3), patches in row-major order."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} is not divisible into {patch}x{patch} patches")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


def init_vision_params(params: ParameterGroup, d: int, image_size: int, patch: int,
                       layers: int, rng) -> None:
    n = (image_size // patch) ** 2
    init_linear(params, "vision.patch", patch * patch * 3, d, rng)
    params.add("vision.pos", (0.5 * rng.standard_normal((n, d))).astype(np.float32))
    for i in range(layers):
        init_block(params, f"vision.layers.{i}", d, rng)
    init_norm(params, "vision.ln_f", d)


def init_head_params(params: ParameterGroup, d: int, bottleneck: int, rng) -> None:
    init_norm(params, "head.fusion.ln_q", d)
    init_attention(params, "head.fusion.xattn", d, rng)
    init_norm(params, "head.fusion.ln_ffn", d)
    init_linear(params, "head.fusion.ffn1", d, 2 * d, rng)
    init_linear(params, "head.fusion.ffn2", 2 * d, d, rng)
    init_norm(params, "head.ln", d)
    params.add("head.scale", np.full((1,), 1.0 / np.sqrt(d), dtype=np.float32))
    params.add("head.bias", np.zeros((1,), dtype=np.float32))
    for kind in ("S", "C"):
        init_adapter(params, f"head.{kind}", d, bottleneck, rng)


def patch_embed(params: ParameterGroup, images: np.ndarray, patch: int) -> Tensor:
    """Linear patch projection before positions are added."""
    return linear(params, "vision.patch", Tensor(patchify(images, patch)))


def embed_image(params: ParameterGroup, images: np.ndarray, patch: int, layers: int,
                heads: int, image_size: int | None = None) -> Tensor:
    """Frozen backbone features, shape (B, P, d)."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    if image_size is not None and images.shape[1:3] != (image_size, image_size):
        raise ValueError(f"expected {image_size}x{image_size} images, got {images.shape[1:3]}")
    x = patch_embed(params, images, patch)
    n = x.shape[1]
    if params["vision.pos"].shape[0] != n:
        raise ValueError(f"backbone built for {params['vision.pos'].shape[0]} patches, image has {n}")
    x = x + take_rows(params["vision.pos"], np.arange(n))
    for i in range(layers):
        x = block(params, f"vision.layers.{i}", x, heads)
    return norm(params, "vision.ln_f", x)


def predict_logits(params: ParameterGroup, patches: Tensor, text_seq: Tensor, pooled: Tensor,
                   key_mask: np.ndarray, mode: str, heads: int) -> Tensor:
    """Per-patch logits, shape (B, P)."""
    q = norm(params, "head.fusion.ln_q", patches)
    x = patches + attention(params, "head.fusion.xattn", q, text_seq, heads, key_mask)
    h = norm(params, "head.fusion.ln_ffn", x)
    x = x + linear(params, "head.fusion.ffn2", relu(linear(params, "head.fusion.ffn1", h)))
    for kind in route(mode):
        x = adapter_forward(x, AdapterModule.from_params(params, f"head.{kind}", heads))
    f = norm(params, "head.ln", x)
    b, p, d = f.shape
    score = matmul(f, pooled.reshape(b, d, 1)).reshape(b, p)
    return score * params["head.scale"] + params["head.bias"]


def predict_mask(params: ParameterGroup, patches: Tensor, text_seq: Tensor, pooled: Tensor,
                 key_mask: np.ndarray, mode: str, heads: int = 4, patch: int = 4) -> Tensor:
    """Clamped per-pixel mask probabilities, shape (B, H, W)."""
    logits = predict_logits(params, patches, text_seq, pooled, key_mask, mode, heads)
    b, p = logits.shape
    side = int(round(np.sqrt(p)))
    probs = sigmoid(logits.reshape(b, side, side))
    return clamp_prob(upsample_nearest(probs, patch))
