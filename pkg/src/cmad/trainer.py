"""Training loop, learning-rate schedule, and versioned checkpointing.

Determinism contract: given one config (seed included) and one corpus, two
runs produce bitwise-identical checkpoints. All randomness flows through the
named streams in :mod:`cmad.rng`; data loading is single-threaded.
"""

from __future__ import annotations

import hashlib
import io
import json
import pickle
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import fuse_levels
from .config import PipelineConfig, from_dict, to_dict
from .dataio import CorpusIndex, PseudoAnomalySpec, synthesize_pseudo_anomaly
from .decoder import error_map
from .errors import CheckpointError, DataError
from .losses import FocalParams, LossWeights, composite_objective, mse_loss
from .model import AnomalyModel
from .rng import RngStreams, derive_seed
from .segmentor import OUT_RES, WORK_RES

CHECKPOINT_MAGIC = b"CMADCKP\0"
CHECKPOINT_VERSION = 1


def lr_at_epoch(cfg: PipelineConfig, epoch: int) -> float:
    """Step schedule: lr * decay^floor(epoch / step_size)."""
    step = cfg.train.step_lr
    return cfg.train.lr * step.decay ** (epoch // step.step_size)


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------


def _to_plain(obj):
    # tensors serialize as raw bytes + dtype string so the pickle stream is
    # canonical (numpy's own reducers memoize dtype/class objects by identity,
    # which makes byte output depend on object-sharing history)
    if isinstance(obj, torch.Tensor):
        arr = obj.detach().cpu().contiguous().numpy()
        return {
            "__tensor__": True,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "data": arr.tobytes(),
        }
    if isinstance(obj, np.ndarray):
        return _to_plain(torch.from_numpy(obj))
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_to_plain(v) for v in obj)
    return obj


def _from_plain(obj):
    if isinstance(obj, dict):
        if obj.get("__tensor__") is True:
            arr = np.frombuffer(obj["data"], dtype=np.dtype(obj["dtype"]))
            return torch.from_numpy(arr.reshape(obj["shape"]).copy())
        return {k: _from_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_from_plain(v) for v in obj)
    return obj


def save_checkpoint(path: str | Path, payload: dict) -> None:
    """Single binary file: magic, version, payload length, payload hash, then
    a pickled payload. Identical payloads serialize to identical bytes."""
    blob = pickle.dumps(_to_plain(payload), protocol=4)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(hashlib.sha256(blob).digest())
    buf.write(blob)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path: str | Path) -> dict:
    raw = Path(path).read_bytes()
    header = len(CHECKPOINT_MAGIC) + 4 + 8 + 32
    if len(raw) < header or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    (length,) = struct.unpack_from("<Q", raw, off + 4)
    digest = raw[off + 12 : off + 44]
    blob = raw[header:]
    if len(blob) != length or hashlib.sha256(blob).digest() != digest:
        raise CheckpointError(f"{path}: checkpoint is truncated or corrupt")
    return _from_plain(pickle.loads(blob))


def load_checkpoint(path: str | Path, corpus: CorpusIndex | None = None):
    """Rebuild (model, config, meta) from a checkpoint file.

    When a corpus is supplied its fingerprint must match the one recorded at
    save time.
    """
    payload = read_checkpoint(path)
    cfg = from_dict(payload["config"])
    if corpus is not None and corpus.fingerprint() != payload["corpus_fingerprint"]:
        raise CheckpointError(
            f"{path}: corpus fingerprint mismatch; this checkpoint was trained on a "
            "different corpus"
        )
    model = AnomalyModel(cfg, payload["classes"])
    model.load_state_dict(payload["model_state"])
    meta = {
        "epoch": payload["epoch"],
        "optimizer_state": payload["optimizer_state"],
        "rng_state": payload["rng_state"],
        "corpus_fingerprint": payload["corpus_fingerprint"],
    }
    return model, cfg, meta


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _config_key(cfg: PipelineConfig) -> str:
    d = to_dict(cfg)
    d["train"].pop("epochs")  # resuming with a larger epoch budget is fine
    return json.dumps(d, sort_keys=True)


def _precompute_clean_fused(model: AnomalyModel, samples, batch: int = 16) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for i in range(0, len(samples), batch):
            imgs = torch.stack(
                [torch.from_numpy(s.pixels).permute(2, 0, 1) for s in samples[i : i + batch]]
            ).float()
            outs.append(fuse_levels(model.extractor(imgs)))
    return torch.cat(outs)


class TrainLogger:
    def __init__(self, path: Path | None):
        self.path = path
        self._fh = open(path, "a") if path else None

    def log(self, record: dict) -> None:
        if self._fh:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def train(
    cfg: PipelineConfig,
    corpus: CorpusIndex,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> tuple[AnomalyModel, Path]:
    """Run the full optimization and write ``checkpoint.bin`` under out_dir.

    Returns the trained model together with the checkpoint path.
    """
    cfg.validate()
    train_samples = corpus.train_samples()
    if not train_samples:
        raise DataError("corpus has no train split")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    streams = RngStreams(cfg.train.seed)
    # dropout (if enabled) draws from the global generator
    torch.manual_seed(derive_seed(cfg.train.seed, "torch_global"))
    model = AnomalyModel(cfg, corpus.classes, streams.init)
    model.attach_corpus(corpus)
    fingerprint = corpus.fingerprint()

    optimizer = torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=cfg.train.lr,
        weight_decay=cfg.train.weight_decay,
    )
    start_epoch = 0
    if resume_from is not None:
        payload = read_checkpoint(resume_from)
        if _config_key(from_dict(payload["config"])) != _config_key(cfg):
            raise CheckpointError("resume config differs from checkpoint config")
        if payload["corpus_fingerprint"] != fingerprint:
            raise CheckpointError("resume corpus differs from checkpoint corpus")
        model.load_state_dict(payload["model_state"])
        optimizer.load_state_dict(_from_plain(payload["optimizer_state"]))
        streams.load_state_dict(payload["rng_state"])
        start_epoch = payload["epoch"]

    frozen_state = {
        k: v.clone() for k, v in model.state_dict().items()
        if k.startswith("extractor.") or k in ("text_pooled", "prompt_feats")
    }
    clean_fused = _precompute_clean_fused(model, train_samples)
    weights = LossWeights(
        w_mse=cfg.losses.w_mse,
        w_dice=cfg.losses.w_dice,
        w_focal=cfg.losses.w_focal if cfg.train.toggles.use_focal else 0.0,
    )
    focal = FocalParams(cfg.losses.alpha, cfg.losses.gamma, cfg.losses.alpha_balanced)
    logger = TrainLogger(out_dir / "train_log.jsonl")
    n = len(train_samples)
    bsz = cfg.train.batch_size
    model.train()

    try:
        for epoch in range(start_epoch, cfg.train.epochs):
            lr = lr_at_epoch(cfg, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            perm = streams.data_order.permutation(n)
            for step, lo in enumerate(range(0, n, bsz)):
                batch_idx = perm[lo : lo + bsz]
                loss, terms = _train_step(model, cfg, streams, train_samples, clean_fused,
                                          batch_idx, weights, focal)
                if not torch.isfinite(loss):
                    ids = [train_samples[i].sample_id for i in batch_idx]
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch} step {step}; batch: {ids}"
                    )
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                logger.log(
                    {"epoch": epoch, "step": step, "lr": lr, "total": float(loss.detach())}
                    | {k: float(v) for k, v in terms.items()}
                )
    finally:
        logger.close()

    for key, ref in frozen_state.items():
        if not torch.equal(model.state_dict()[key], ref):  # pragma: no cover
            raise RuntimeError(f"frozen component {key} changed during training")

    ckpt_path = out_dir / "checkpoint.bin"
    save_checkpoint(
        ckpt_path,
        {
            "version": CHECKPOINT_VERSION,
            "config": to_dict(cfg),
            "classes": corpus.classes,
            "model_state": model.state_dict(),
            "optimizer_state": optimizer.state_dict(),
            "epoch": cfg.train.epochs,
            "rng_state": streams.state_dict(),
            "corpus_fingerprint": fingerprint,
        },
    )
    model.eval()
    return model, ckpt_path


def _train_step(model, cfg, streams, train_samples, clean_fused, batch_idx, weights, focal):
    tcfg = cfg.train
    b = len(batch_idx)
    n_pseudo = int(round(tcfg.pseudo_anomaly_ratio * b))
    pseudo_positions = set(
        streams.pseudo_anomaly.choice(b, size=n_pseudo, replace=False).tolist()
    ) if n_pseudo else set()

    images, masks, is_pseudo = [], [], []
    for pos, idx in enumerate(batch_idx):
        sample = train_samples[idx]
        if pos in pseudo_positions:
            spec = PseudoAnomalySpec(
                min_area_fraction=tcfg.pseudo_min_area,
                max_area_fraction=tcfg.pseudo_max_area,
                patch_source="self",
                seed=int(streams.pseudo_anomaly.integers(2**62)),
            )
            pseudo, mask = synthesize_pseudo_anomaly(sample, spec)
            images.append(pseudo.pixels)
            masks.append(mask.astype(np.float32))
            is_pseudo.append(True)
        else:
            images.append(sample.pixels)
            masks.append(np.zeros(sample.pixels.shape[:2], dtype=np.float32))
            is_pseudo.append(False)

    image_t = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float()
    mask_t = torch.from_numpy(np.stack(masks))[:, None]  # (B, 1, H, W)
    class_idx = model.class_indices([train_samples[i].class_id for i in batch_idx])

    tokens, levels, _ = model.embed_images(image_t)
    # prompt state is shared within a class; project it once per unique class
    # and gather per sample
    uniq, inverse = torch.unique(class_idx, return_inverse=True)
    memory_u, text_u = model.prompt_memory(uniq)
    kvs = [(k[inverse], v[inverse]) for k, v in model.decoder.project_kv(memory_u)]
    text = text_u[inverse] if text_u is not None else None
    recon, _ = model.decoder.forward_with_kv(tokens, kvs)

    # restoration targets: clean-counterpart tokens for pseudo items, the
    # input tokens themselves otherwise (both detached)
    target = tokens.detach().clone()
    pseudo_rows = [pos for pos, flag in enumerate(is_pseudo) if flag]
    if pseudo_rows:
        with torch.no_grad():
            clean_tok = model.tokenizer(clean_fused[[batch_idx[r] for r in pseudo_rows]])
        target[pseudo_rows] = clean_tok

    recon_pair = (recon, target)
    if cfg.decoder.bidirectional:
        memory = memory_u[inverse]
        rev, _ = model.decoder(memory, tokens.detach())
        recon_pair = (
            torch.cat([recon, rev]),
            torch.cat([target, memory.detach()]),
        )

    err = error_map(recon, tokens.detach()).unsqueeze(1)
    terms_extra = {}
    if tcfg.toggles.use_segmentor:
        t_steps = torch.randint(
            0, cfg.segmentor.diffusion_steps, (b,), generator=streams.diffusion
        )
        noise = torch.randn(b, 1, WORK_RES, WORK_RES, generator=streams.diffusion)
        (eps_pred, eps_last), amap, init_pred, mask_lo = model.segmentor.train_outputs(
            err, levels, text, mask_t, t_steps, noise
        )
        denoise = 0.5 * (mse_loss(eps_pred, noise) + mse_loss(eps_last, noise))
        # fit the inference-time error calibration to the downsampled masks
        calib = mse_loss(init_pred, mask_lo)
    else:
        up = F.interpolate(err, size=(OUT_RES, OUT_RES), mode="bilinear", align_corners=False)
        amap = model.calibration(up)
        denoise = torch.zeros(())
        calib = torch.zeros(())

    total, terms = composite_objective(
        recon_pair, amap, mask_t, weights, focal, cfg.losses.dice_smooth
    )
    if tcfg.toggles.use_segmentor and tcfg.denoise_weight > 0:
        total = total + tcfg.denoise_weight * (denoise + calib)
    terms_extra["denoise"] = denoise.detach()
    terms_extra["calib"] = calib.detach()
    return total, {**{k: v.detach() for k, v in terms.items()}, **terms_extra}
