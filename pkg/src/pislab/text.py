"""Word-level text encoder with instruction-aware cascaded adapters.

Each encoder layer runs its frozen self-attention and feed-forward sublayers,
then the adapters selected by the routing mode: none for concept prompts,
``S`` for simple instructions, ``S`` then ``C`` for complex ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParameterGroup, Tensor, take_rows
from .nn import AdapterModule, adapter_forward, block, init_adapter, init_block, init_norm, norm
from .scenes import grammar_words

UNK, PAD, QMARK = "<unk>", "<pad>", "<qmark>"
UNK_ID, PAD_ID, QMARK_ID = 0, 1, 2

ROUTES = {"concept": (), "simple": ("S",), "complex": ("S", "C")}


def route(mode: str) -> tuple[str, ...]:
    try:
        return ROUTES[mode]
    except KeyError:
        raise ValueError(f"unknown routing mode {mode!r}; expected one of {sorted(ROUTES)}") from None


@dataclass(frozen=True)
class EncoderConfig:
    model_dim: int = 64
    layers: int = 2
    heads: int = 4
    bottleneck_dim: int = 16
    max_len: int = 32

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.bottleneck_dim % self.heads:
            raise ValueError("bottleneck_dim must be divisible by heads")
        if self.bottleneck_dim >= self.model_dim:
            raise ValueError("bottleneck_dim must be smaller than model_dim")


class Vocab:
    def __init__(self, words):
        self.itos = [UNK, PAD, QMARK] + [w for w in words if w not in (UNK, PAD, QMARK)]
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def from_grammar(cls) -> Vocab:
        return cls(grammar_words())

    def __len__(self) -> int:
        return len(self.itos)

    def __getitem__(self, word: str) -> int:
        return self.stoi.get(word, 0)


def tokenize(text: str, vocab: Vocab, max_len: int = 32) -> list[int]:
    """Lowercase, split on whitespace, a trailing '?' becomes its own token."""
    words = text.lower().split()
    if not words:
        raise ValueError("cannot tokenize empty text")
    ids = []
    for w in words:
        q = w.endswith("?")
        w = w.rstrip("?")
        if w:
            ids.append(vocab[w])
        if q:
            ids.append(vocab[QMARK])
    return ids[:max_len]


def pad_batch(token_lists: list[list[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    if not token_lists or any(len(t) == 0 for t in token_lists):
        raise ValueError("every token sequence must be non-empty")
    t = max(len(x) for x in token_lists)
    ids = np.full((len(token_lists), t), pad_id, dtype=np.int64)
    mask = np.zeros((len(token_lists), t), dtype=bool)
    for i, x in enumerate(token_lists):
        ids[i, :len(x)] = x
        mask[i, :len(x)] = True
    return ids, mask


def init_text_params(params: ParameterGroup, cfg: EncoderConfig, vocab_size: int, rng) -> None:
    d = cfg.model_dim
    params.add("text.embed", (rng.standard_normal((vocab_size, d))).astype(np.float32))
    params.add("text.pos", (0.1 * rng.standard_normal((cfg.max_len, d))).astype(np.float32))
    for i in range(cfg.layers):
        init_block(params, f"text.layers.{i}", d, rng)
    init_norm(params, "text.ln_f", d)
    for kind in ("S", "C"):
        for i in range(cfg.layers):
            init_adapter(params, f"text.{kind}.{i}", d, cfg.bottleneck_dim, rng)


def encode_batch(params: ParameterGroup, cfg: EncoderConfig, ids: np.ndarray, mask: np.ndarray,
                 mode: str) -> tuple[Tensor, Tensor]:
    """Encode padded token ids; returns ``(sequence[B,T,d], pooled[B,d])``."""
    kinds = route(mode)
    t = ids.shape[1]
    x = take_rows(params["text.embed"], ids) + take_rows(params["text.pos"], np.arange(t))
    for i in range(cfg.layers):
        x = block(params, f"text.layers.{i}", x, cfg.heads, mask)
        for kind in kinds:
            x = adapter_forward(x, AdapterModule.from_params(params, f"text.{kind}.{i}", cfg.heads), mask)
    x = norm(params, "text.ln_f", x)
    weights = (mask / mask.sum(axis=1, keepdims=True)).astype(x.dtype)[:, :, None]
    pooled = (x * weights).sum(axis=1)
    return x, pooled


def encode(tokens: list[int], mode: str, params: ParameterGroup,
           cfg: EncoderConfig = EncoderConfig()) -> tuple[Tensor, Tensor]:
    """Single-prompt convenience wrapper: ``(sequence[T,d], pooled[d])``."""
    ids, mask = pad_batch([tokens], PAD_ID)
    seq, pooled = encode_batch(params, cfg, ids, mask, mode)
    return seq.reshape(seq.shape[1:]), pooled.reshape(pooled.shape[1:])
