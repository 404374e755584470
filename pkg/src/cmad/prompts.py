"""Class-specific text prompts, frozen text encoding, and token fusion.

The text encoder is pluggable and always frozen: a deterministic hash-seeded
stub ships by default so the pipeline runs without pretrained weights; a CLIP
adapter can be pointed at local weights. Only the projection to the 256-d
token width is trainable.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch
import yaml
from torch import nn

from .backbone import D_MODEL, TokenSequence, as_token_tensor
from .config import PromptsConfig
from .errors import ConfigError, ShapeError

STUB_DIM = 512


@dataclass
class ClassPromptSet:
    class_id: str
    normal_texts: list[str]
    anomaly_texts: list[str]

    def all_texts(self) -> list[str]:
        return list(self.normal_texts) + list(self.anomaly_texts)


@dataclass
class TextEmbedding:
    vector: torch.Tensor  # (256,)
    source_dim: int
    encoder_kind: str


@dataclass
class PromptBundle:
    visual_tokens: TokenSequence
    text_embedding: TextEmbedding
    class_id: str


def load_registry(path: str | Path | None = None) -> dict[str, ClassPromptSet]:
    """Read the prompt registry (packaged default when no path is given)."""
    if path is None:
        text = resources.files("cmad").joinpath("data/prompt_registry.yaml").read_text()
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"prompt registry not found: {p}")
        text = p.read_text()
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse prompt registry: {exc}") from exc
    registry = {}
    for cls, record in raw.items():
        normal = record.get("normal") or []
        anomalies = record.get("anomalies") or []
        if not normal or not anomalies:
            raise ConfigError(f"registry entry {cls!r} needs nonempty normal and anomalies lists")
        registry[cls] = ClassPromptSet(cls, [str(t) for t in normal], [str(t) for t in anomalies])
    return registry


def build_prompt_texts(class_id: str, registry: dict[str, ClassPromptSet]) -> ClassPromptSet:
    """Registered prompt set for the class, or a templated fallback."""
    if class_id in registry:
        return registry[class_id]
    return ClassPromptSet(
        class_id=class_id,
        normal_texts=[f"a photo of a normal {class_id}"],
        anomaly_texts=[f"a photo of a {class_id} with a defect"],
    )


class StubTextEncoder:
    """Deterministic text encoder: per string, a hash-seeded Gaussian vector
    normalized to unit length. Has no parameters and nothing to train."""

    kind = "stub"
    source_dim = STUB_DIM

    def encode(self, texts: list[str]) -> np.ndarray:
        rows = []
        for text in texts:
            seed = int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")
            rng = np.random.Generator(np.random.PCG64(seed & 0x7FFFFFFFFFFFFFFF))
            v = rng.standard_normal(self.source_dim)
            rows.append(v / np.linalg.norm(v))
        return np.stack(rows).astype(np.float32)


class ClipTextEncoder:
    """Frozen CLIP text encoder loaded from a local transformers checkpoint."""

    kind = "clip_frozen"

    def __init__(self, weights_path: str):
        if weights_path is None:
            raise ConfigError(
                "prompts.encoder='clip_frozen' requires prompts.clip_weights_path "
                "(a local CLIP text-model directory)"
            )
        try:
            from transformers import CLIPTextModel, CLIPTokenizer
        except ImportError as exc:  # pragma: no cover
            raise ConfigError("clip_frozen encoder requires the transformers package") from exc
        self.tokenizer = CLIPTokenizer.from_pretrained(weights_path)
        self.model = CLIPTextModel.from_pretrained(weights_path).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.source_dim = int(self.model.config.hidden_size)

    def encode(self, texts: list[str]) -> np.ndarray:
        tokens = self.tokenizer(texts, padding=True, return_tensors="pt")
        with torch.no_grad():
            out = self.model(**tokens).pooler_output
        return out.numpy().astype(np.float32)


def make_text_encoder(cfg: PromptsConfig):
    if cfg.encoder == "stub":
        return StubTextEncoder()
    if cfg.encoder == "clip_frozen":
        return ClipTextEncoder(cfg.clip_weights_path)
    raise ConfigError(f"unknown prompts.encoder {cfg.encoder!r}")


class TextProjection(nn.Module):
    """The one trainable piece of the prompt path: source_dim -> 256."""

    def __init__(self, source_dim: int, pooling: str = "mean",
                 generator: torch.Generator | None = None):
        super().__init__()
        if pooling not in ("mean", "concat_project"):
            raise ConfigError(f"unknown pooling {pooling!r}")
        self.pooling = pooling
        in_dim = source_dim if pooling == "mean" else 2 * source_dim
        self.proj = nn.Linear(in_dim, D_MODEL)
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        with torch.no_grad():
            w = torch.randn(self.proj.weight.shape, generator=generator)
            self.proj.weight.copy_(w / math.sqrt(self.proj.in_features))
            self.proj.bias.zero_()

    def pool(self, prompt_set: ClassPromptSet, encoder) -> torch.Tensor:
        """Encode and pool a prompt set to the projection's input vector."""
        if not prompt_set.all_texts():
            raise ValueError("prompt set has no texts")
        if self.pooling == "mean":
            vecs = encoder.encode(prompt_set.all_texts())
            pooled = vecs.mean(axis=0)
        else:
            normal = encoder.encode(prompt_set.normal_texts).mean(axis=0)
            anomaly = encoder.encode(prompt_set.anomaly_texts).mean(axis=0)
            pooled = np.concatenate([normal, anomaly])
        return torch.from_numpy(pooled)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.proj(pooled)


def encode_texts(prompt_set: ClassPromptSet, encoder, projection: TextProjection) -> TextEmbedding:
    """Encode each text, pool across the set, and project to 256 dims."""
    pooled = projection.pool(prompt_set, encoder)
    return TextEmbedding(
        vector=projection(pooled), source_dim=encoder.source_dim, encoder_kind=encoder.kind
    )


def fuse_prompts(visual_tokens, text_embedding: TextEmbedding, mode: str = "add"):
    """Fuse the class text embedding into every visual prompt token."""
    tokens = as_token_tensor(visual_tokens)
    vec = text_embedding.vector if isinstance(text_embedding, TextEmbedding) else text_embedding
    if tokens.shape[-1] != vec.shape[-1]:
        raise ShapeError(
            f"token width {tokens.shape[-1]} != text embedding width {vec.shape[-1]}"
        )
    if tokens.ndim == 3 and vec.ndim == 2:  # batched tokens, per-sample embeddings
        vec = vec[:, None, :]
    if mode == "add":
        fused = tokens + vec
    elif mode == "mul":
        fused = tokens * vec
    else:
        raise ConfigError(f"unknown fusion mode {mode!r}")
    if isinstance(visual_tokens, TokenSequence):
        return TokenSequence(tokens=fused, grid=visual_tokens.grid, d_model=visual_tokens.d_model)
    return fused
