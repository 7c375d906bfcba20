"""Functional transformer pieces over a ParameterGroup.

Every block reads its weights by dotted name from a ParameterGroup, so the
same code serves the frozen base path, the adapters and the checkpoint
layout. Activations are batched: ``(batch, tokens, width)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParameterGroup, Tensor, layer_norm, matmul, relu, softmax

MASK_VALUE = -1e9


def init_linear(params: ParameterGroup, name: str, fan_in: int, fan_out: int, rng,
                bias: bool = True, zero: bool = False) -> None:
    if zero:
        w = np.zeros((fan_in, fan_out), dtype=np.float32)
    else:
        w = (rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(np.float32)
    params.add(f"{name}.w", w)
    if bias:
        params.add(f"{name}.b", np.zeros(fan_out, dtype=np.float32))


def init_norm(params: ParameterGroup, name: str, width: int) -> None:
    params.add(f"{name}.g", np.ones(width, dtype=np.float32))
    params.add(f"{name}.b", np.zeros(width, dtype=np.float32))


def linear(params: ParameterGroup, name: str, x: Tensor) -> Tensor:
    y = matmul(x, params[f"{name}.w"])
    b = f"{name}.b"
    return y + params[b] if b in params else y


def norm(params: ParameterGroup, name: str, x: Tensor) -> Tensor:
    return layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def key_bias(key_mask: np.ndarray | None, dtype=np.float32) -> np.ndarray | None:
    """Additive attention bias of shape (B, 1, 1, Tk) that hides padded keys."""
    if key_mask is None:
        return None
    return np.where(key_mask, 0.0, MASK_VALUE).astype(dtype)[:, None, None, :]


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, w = x.shape
    return x.reshape(b, t, heads, w // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int, bias: np.ndarray | None) -> Tensor:
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(qh.shape[-1]))
    if bias is not None:
        scores = scores + bias
    return merge_heads(matmul(softmax(scores, axis=-1), vh))


def init_attention(params, name, width, rng) -> None:
    for part in ("q", "k", "v", "o"):
        init_linear(params, f"{name}.{part}", width, width, rng)


def attention(params, name, x_q: Tensor, x_kv: Tensor, heads: int,
              key_mask: np.ndarray | None = None) -> Tensor:
    q = linear(params, f"{name}.q", x_q)
    k = linear(params, f"{name}.k", x_kv)
    v = linear(params, f"{name}.v", x_kv)
    out = attend(q, k, v, heads, key_bias(key_mask, q.dtype))
    return linear(params, f"{name}.o", out)


def init_block(params, name, width, rng, ffn_mult: int = 2) -> None:
    init_norm(params, f"{name}.ln1", width)
    init_attention(params, f"{name}.attn", width, rng)
    init_norm(params, f"{name}.ln2", width)
    init_linear(params, f"{name}.ffn1", width, ffn_mult * width, rng)
    init_linear(params, f"{name}.ffn2", ffn_mult * width, width, rng)


def block(params, name, x: Tensor, heads: int, key_mask=None) -> Tensor:
    """Pre-norm self-attention + feed-forward sublayers with residuals."""
    h = norm(params, f"{name}.ln1", x)
    x = x + attention(params, f"{name}.attn", h, h, heads, key_mask)
    h = norm(params, f"{name}.ln2", x)
    return x + linear(params, f"{name}.ffn2", relu(linear(params, f"{name}.ffn1", h)))


# -- cascaded adapters -------------------------------------------------------------

@dataclass
class AdapterModule:
    """Bottleneck adapter with self-attention at bottleneck width.

    ``down``: d x r, ``up``: r x d, ``wq``/``wk``: r x r. Attention values are
    the bottleneck activations themselves, split across heads, so attention
    over a single token is the identity.
    """

    down: Tensor
    up: Tensor
    wq: Tensor
    wk: Tensor
    kind: str
    heads: int = 4

    @classmethod
    def from_params(cls, params: ParameterGroup, prefix: str, heads: int = 4) -> AdapterModule:
        kind = next(p for p in prefix.split(".") if p in ("S", "C"))
        return cls(params[f"{prefix}.down"], params[f"{prefix}.up"], params[f"{prefix}.wq"],
                   params[f"{prefix}.wk"], kind, heads)


def init_adapter(params: ParameterGroup, prefix: str, width: int, bottleneck: int, rng) -> None:
    if bottleneck >= width:
        raise ValueError(f"bottleneck {bottleneck} must be smaller than width {width}")
    params.add(f"{prefix}.down", (rng.standard_normal((width, bottleneck)) / np.sqrt(width)).astype(np.float32))
    params.add(f"{prefix}.up", np.zeros((bottleneck, width), dtype=np.float32))
    for part in ("wq", "wk"):
        params.add(f"{prefix}.{part}",
                   (rng.standard_normal((bottleneck, bottleneck)) / np.sqrt(bottleneck)).astype(np.float32))


def adapter_forward(h: Tensor, a: AdapterModule, key_mask: np.ndarray | None = None) -> Tensor:
    """``h + up(mhsa(relu(down(h))))``; output shape equals input shape."""
    if h.shape[-1] != a.down.shape[0]:
        raise ValueError(f"adapter expects width {a.down.shape[0]}, got input {h.shape}")
    squeeze = h.ndim == 2
    if squeeze:
        h = h.reshape(1, *h.shape)
        key_mask = None if key_mask is None else np.asarray(key_mask).reshape(1, -1)
    z = relu(matmul(h, a.down))
    mixed = attend(matmul(z, a.wq), matmul(z, a.wk), z, a.heads, key_bias(key_mask, z.dtype))
    out = h + matmul(mixed, a.up)
    return out.reshape(*out.shape[1:]) if squeeze else out
