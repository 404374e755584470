"""The assembled detector: frozen extractor, tokenizer, prompt path, decoder,
and segmentor, with per-class prompt state cached as buffers.

Construction draws every trainable parameter from one init generator in a
fixed order, so models built from the same seed are bitwise identical
regardless of which components are toggled on.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import dataio
from .backbone import FUSED_CHANNELS, GRID, Tokenizer, fuse_levels, make_extractor
from .config import PipelineConfig
from .decoder import PromptDecoder, error_map
from .errors import UnknownClassError
from .prompts import TextProjection, build_prompt_texts, load_registry, make_text_encoder
from .rng import derive_seed
from .segmentor import OUT_RES, Segmentor


class CalibrationHead(nn.Module):
    """Two-parameter affine + sigmoid mapping raw error maps to [0, 1];
    carries the segmentation losses when the full segmentor is disabled."""

    def __init__(self):
        super().__init__()
        self.scale = nn.Parameter(torch.tensor(4.0))
        self.bias = nn.Parameter(torch.tensor(-2.0))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.scale * x + self.bias)


class AnomalyModel(nn.Module):
    def __init__(self, cfg: PipelineConfig, classes: list[str],
                 generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.classes = list(classes)
        self.class_to_idx = {c: i for i, c in enumerate(self.classes)}
        self.extractor = make_extractor(cfg.backbone)
        self.tokenizer = Tokenizer(generator)
        encoder = make_text_encoder(cfg.prompts)
        self._encoder = encoder
        self.text_projection = TextProjection(encoder.source_dim, cfg.prompts.pooling, generator)
        self.decoder = PromptDecoder(cfg.decoder, generator)
        self.segmentor = Segmentor(cfg.segmentor, tuple(self.extractor.level_channel_counts),
                                   generator)
        self.calibration = CalibrationHead()
        n = len(self.classes)
        self.register_buffer("prompt_feats", torch.zeros(n, FUSED_CHANNELS, GRID, GRID))
        self.register_buffer("text_pooled",
                             torch.zeros(n, self.text_projection.proj.in_features))

    # -- prompt state -------------------------------------------------------

    def attach_corpus(self, corpus: dataio.CorpusIndex) -> None:
        """Cache per-class prompt features and pooled text vectors (frozen)."""
        registry = load_registry(self.cfg.prompts.registry_path)
        with torch.no_grad():
            for cls in self.classes:
                idx = self.class_to_idx[cls]
                prompt_img = dataio.select_prompt_image(corpus, cls)
                x = torch.from_numpy(prompt_img.pixels).permute(2, 0, 1)[None].float()
                self.prompt_feats[idx] = fuse_levels(self.extractor(x))[0]
                prompt_set = build_prompt_texts(cls, registry)
                self.text_pooled[idx] = self.text_projection.pool(prompt_set, self._encoder)

    def class_indices(self, class_ids: list[str]) -> torch.Tensor:
        try:
            return torch.tensor([self.class_to_idx[c] for c in class_ids], dtype=torch.long)
        except KeyError as exc:
            raise UnknownClassError(f"class {exc.args[0]!r} unknown to this model") from exc

    def prompt_memory(self, class_idx: torch.Tensor):
        """Fused prompt tokens and projected text embeddings for a batch.

        Returns (memory (B, 196, 256), text (B, 256) or None). Text fusion is
        skipped entirely when the VLM toggle is off.
        """
        vis = self.tokenizer(self.prompt_feats[class_idx])
        if not self.cfg.train.toggles.use_vlm:
            return vis, None
        text = self.text_projection(self.text_pooled[class_idx])
        if self.cfg.prompts.fusion == "mul":
            mem = vis * text[:, None, :]
        else:
            mem = vis + text[:, None, :]
        return mem, text

    # -- shared forward pieces ----------------------------------------------

    def embed_images(self, images: torch.Tensor, need_grad_tokens: bool = True):
        """Frozen feature extraction plus (trainable) tokenization."""
        images = images.contiguous(memory_format=torch.channels_last)  # faster convs
        with torch.no_grad():
            levels = self.extractor(images)
            fused = fuse_levels(levels)
        if need_grad_tokens:
            tokens = self.tokenizer(fused)
        else:
            with torch.no_grad():
                tokens = self.tokenizer(fused)
        return tokens, levels, fused

    def reconstruct_tokens(self, tokens: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        out, _ = self.decoder(tokens, memory)
        return out

    def anomaly_map_from_error(self, err_grid: torch.Tensor, levels, text, seed):
        """Map the 14x14 error grid to a full-resolution score map."""
        err = err_grid.unsqueeze(1)
        if self.cfg.train.toggles.use_segmentor:
            return self.segmentor.predict(err, levels, text, seed)
        up = F.interpolate(err, size=(OUT_RES, OUT_RES), mode="bilinear", align_corners=False)
        return self.calibration(up)

    # -- inference ----------------------------------------------------------

    @torch.no_grad()
    def predict_map_batch(self, images: torch.Tensor, class_ids: list[str],
                          seed: int) -> torch.Tensor:
        self.eval()
        idx = self.class_indices(class_ids)
        tokens, levels, _ = self.embed_images(images, need_grad_tokens=False)
        memory, text = self.prompt_memory(idx)
        recon = self.reconstruct_tokens(tokens, memory)
        err = error_map(recon, tokens)
        return self.anomaly_map_from_error(err, levels, text, seed)[:, 0]

    def predict_map(self, sample: dataio.ImageSample) -> np.ndarray:
        """Single-sample scoring; the protocol expected by metrics.evaluate.

        Diffusion noise is seeded per sample id, so repeated evaluations of
        the same corpus are identical.
        """
        images = torch.from_numpy(sample.pixels).permute(2, 0, 1)[None].float()
        seed = derive_seed(self.cfg.eval.map_seed, sample.sample_id)
        amap = self.predict_map_batch(images, [sample.class_id], seed)
        return amap[0].numpy()


def build_model(cfg: PipelineConfig, corpus: dataio.CorpusIndex,
                generator: torch.Generator | None = None) -> AnomalyModel:
    model = AnomalyModel(cfg, corpus.classes, generator)
    model.attach_corpus(corpus)
    return model
