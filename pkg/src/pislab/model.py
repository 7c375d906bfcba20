"""Whole-model glue: parameter layout, image features and routed forward pass."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ParameterGroup, Tensor
from .text import EncoderConfig, PAD_ID, Vocab, encode_batch, init_text_params, pad_batch, tokenize
from .vision import embed_image, init_head_params, init_vision_params, predict_mask

ADAPTER_PREFIXES = ("text.S.", "text.C.", "head.S.", "head.C.")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    image_size: int = 32
    patch: int = 4
    vision_layers: int = 2

    @property
    def d(self) -> int:
        return self.encoder.model_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        return cls(encoder=EncoderConfig(**d.pop("encoder")), **d)


def init_params(cfg: ModelConfig, seed: int, vocab: Vocab | None = None) -> ParameterGroup:
    vocab = vocab or Vocab.from_grammar()
    rng = np.random.default_rng(seed)
    params = ParameterGroup()
    init_vision_params(params, cfg.d, cfg.image_size, cfg.patch, cfg.vision_layers, rng)
    init_text_params(params, cfg.encoder, len(vocab), rng)
    init_head_params(params, cfg.d, cfg.encoder.bottleneck_dim, rng)
    return params


def is_adapter(name: str) -> bool:
    return name.startswith(ADAPTER_PREFIXES)


def base_names(params: ParameterGroup) -> list[str]:
    return [n for n in params if not is_adapter(n)]


def adapter_names(params: ParameterGroup, kind: str) -> list[str]:
    return [n for n in params if n.startswith((f"text.{kind}.", f"head.{kind}."))]


def randomize_adapters(params: ParameterGroup, seed: int, gain: float = 1.0) -> None:
    """Give every adapter, including the zero-initialised up-projections, random
    weights with standard deviation ``gain / sqrt(fan_in)``."""
    rng = np.random.default_rng(seed)
    for n in params:
        if is_adapter(n):
            t = params[n]
            std = gain / np.sqrt(t.shape[0])
            t.data = (std * rng.standard_normal(t.shape)).astype(t.data.dtype)


class PisModel:
    """Stateless forward helpers around a ParameterGroup."""

    def __init__(self, params: ParameterGroup, cfg: ModelConfig = ModelConfig(),
                 vocab: Vocab | None = None):
        self.params = params
        self.cfg = cfg
        self.vocab = vocab or Vocab.from_grammar()

    def image_features(self, images: np.ndarray) -> Tensor:
        c = self.cfg
        return embed_image(self.params, images, c.patch, c.vision_layers, c.encoder.heads,
                           c.image_size)

    def tokens(self, texts: list[str]) -> tuple[np.ndarray, np.ndarray]:
        ids = [tokenize(t, self.vocab, self.cfg.encoder.max_len) for t in texts]
        return pad_batch(ids, PAD_ID)

    def forward(self, features: Tensor | np.ndarray, texts: list[str], mode: str) -> Tensor:
        """Mask probabilities (B, H, W) for one prompt per image."""
        if not isinstance(features, Tensor):
            features = Tensor(features)
        ids, mask = self.tokens(texts)
        seq, pooled = encode_batch(self.params, self.cfg.encoder, ids, mask, mode)
        return predict_mask(self.params, features, seq, pooled, mask, mode,
                            self.cfg.encoder.heads, self.cfg.patch)

    def predict(self, images: np.ndarray, texts: list[str], mode: str) -> np.ndarray:
        return self.forward(self.image_features(images), texts, mode).data
