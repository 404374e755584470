"""Prompt-guided transformer decoder and reconstruction error maps.

Each layer runs self-attention over the target tokens, cross-attention with
the fused prompt tokens as keys/values, and a feed-forward block, all with
pre-norm residual connections. Cross-attention KV projections can be computed
once per prompt and reused across samples that share a class.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import GRID, TokenSequence, as_token_tensor
from .config import DecoderConfig
from .errors import ShapeError
from .prompts import PromptBundle, fuse_prompts


def _split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    b, l, d = x.shape
    return x.view(b, l, n_heads, d // n_heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, l, dh = x.shape
    return x.transpose(1, 2).reshape(b, l, h * dh)


def _attend(q, k, v, dropout: float, training: bool, need_weights: bool):
    if need_weights:
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        probs = torch.softmax(scores, dim=-1)
        if dropout > 0 and training:
            probs = F.dropout(probs, p=dropout)
        return probs @ v, probs
    out = F.scaled_dot_product_attention(q, k, v, dropout_p=dropout if training else 0.0)
    return out, None


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.dropout = dropout
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, need_weights: bool = False):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = (_split_heads(t, self.n_heads) for t in (q, k, v))
        ctx, probs = _attend(q, k, v, self.dropout, self.training, need_weights)
        return self.out(_merge_heads(ctx)), probs


class CrossAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.dropout = dropout
        self.q = nn.Linear(d_model, d_model)
        self.kv = nn.Linear(d_model, 2 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def project_kv(self, mem: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        k, v = self.kv(mem).chunk(2, dim=-1)
        return _split_heads(k, self.n_heads), _split_heads(v, self.n_heads)

    def forward(self, x: torch.Tensor, kv: tuple[torch.Tensor, torch.Tensor],
                need_weights: bool = False):
        q = _split_heads(self.q(x), self.n_heads)
        ctx, probs = _attend(q, kv[0], kv[1], self.dropout, self.training, need_weights)
        return self.out(_merge_heads(ctx)), probs


class DecoderLayer(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        d = cfg.d_model
        self.self_attn = SelfAttention(d, cfg.n_heads, cfg.dropout)
        self.cross_attn = CrossAttention(d, cfg.n_heads, cfg.dropout)
        self.ff = nn.Sequential(
            nn.Linear(d, cfg.ff_dim),
            nn.GELU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.ff_dim, d),
        )
        self.ln1 = nn.LayerNorm(d)
        self.ln2 = nn.LayerNorm(d)
        self.ln3 = nn.LayerNorm(d)

    def forward(self, x, kv, need_weights: bool = False):
        sa, p_self = self.self_attn(self.ln1(x), need_weights)
        x = x + sa
        ca, p_cross = self.cross_attn(self.ln2(x), kv, need_weights)
        x = x + ca
        x = x + self.ff(self.ln3(x))
        return x, (p_self, p_cross)


class PromptDecoder(nn.Module):
    """Stack of decoder layers with a final norm; output width equals input."""

    def __init__(self, cfg: DecoderConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_layers))
        self.final_ln = nn.LayerNorm(cfg.d_model)
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        with torch.no_grad():
            for mod in self.modules():
                if isinstance(mod, nn.Linear):
                    w = torch.randn(mod.weight.shape, generator=generator)
                    mod.weight.copy_(w / math.sqrt(mod.in_features))
                    mod.bias.zero_()

    def project_kv(self, mem: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        return [layer.cross_attn.project_kv(mem) for layer in self.layers]

    def forward_with_kv(self, x: torch.Tensor, kvs, need_weights: bool = False):
        if x.shape[-1] != self.cfg.d_model:
            raise ShapeError(f"token width {x.shape[-1]} != d_model {self.cfg.d_model}")
        weights = [] if need_weights else None
        for layer, kv in zip(self.layers, kvs):
            x, probs = layer(x, kv, need_weights)
            if need_weights:
                weights.append(probs)
        return self.final_ln(x), weights

    def forward(self, x: torch.Tensor, mem: torch.Tensor, need_weights: bool = False):
        if mem.shape[-1] != self.cfg.d_model:
            raise ShapeError(f"prompt width {mem.shape[-1]} != d_model {self.cfg.d_model}")
        return self.forward_with_kv(x, self.project_kv(mem), need_weights)


def reconstruct(
    decoder: PromptDecoder,
    target_tokens: TokenSequence,
    prompt: PromptBundle,
    fusion: str = "add",
    use_text: bool = True,
) -> TokenSequence:
    """Reconstruct one token sequence under prompt guidance."""
    mem = (
        fuse_prompts(prompt.visual_tokens, prompt.text_embedding, fusion)
        if use_text
        else prompt.visual_tokens
    )
    x = as_token_tensor(target_tokens).unsqueeze(0)
    y, _ = decoder(x, as_token_tensor(mem).unsqueeze(0))
    return TokenSequence(tokens=y[0])


def error_map(reconstructed, query) -> torch.Tensor:
    """Channel-mean absolute difference per token, reshaped to the 14x14 grid."""
    a = as_token_tensor(reconstructed)
    b = as_token_tensor(query)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    err = (a - b).abs().mean(dim=-1)
    if err.ndim == 1:
        return err.view(GRID, GRID)
    return err.view(err.shape[0], GRID, GRID)


def restoration_target(target_tokens, pseudo_mask=None, clean_tokens=None):
    """Supervision target: the clean counterpart's tokens for pseudo-anomalous
    inputs, the input tokens themselves otherwise."""
    if pseudo_mask is not None and bool(torch.as_tensor(pseudo_mask).any()):
        if clean_tokens is None:
            raise ValueError("pseudo-anomalous input needs clean counterpart tokens")
        return clean_tokens
    return target_tokens
