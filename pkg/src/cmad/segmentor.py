"""Text-guided refinement of reconstruction error maps into full-resolution
anomaly maps.

Pipeline: a multi-scale residual CNN fuses the error grid with backbone
features at the native 14x14 token resolution, transformer spatial attention
adds global context, a small conditional denoiser refines the map over a
short diffusion schedule, and a U-Net-style upsampler restores 224x224
resolution through skip connections taken at 28 and 56. Everything is a
deterministic function of (params, inputs, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import SegmentorConfig
from .decoder import SelfAttention
from .errors import CheckpointError, ConfigError, ScheduleError, ShapeError

BETA_START = 1e-4
BETA_END = 0.02
WORK_RES = 14  # refinement / diffusion resolution (native token grid)
OUT_RES = 224


# ---------------------------------------------------------------------------
# Diffusion schedule
# ---------------------------------------------------------------------------


@dataclass
class BetaSchedule:
    betas: torch.Tensor  # float64, strictly increasing
    alphas: torch.Tensor
    alpha_bars: torch.Tensor
    T: int


def make_beta_schedule(T: int) -> BetaSchedule:
    """Linear schedule from 1e-4 to 0.02 over T steps; T must be >= 2 so the
    endpoints do not coincide."""
    if T < 2:
        raise ScheduleError(f"diffusion schedule needs T >= 2, got {T}")
    betas = torch.linspace(BETA_START, BETA_END, T, dtype=torch.float64)
    alphas = 1.0 - betas
    return BetaSchedule(betas=betas, alphas=alphas, alpha_bars=torch.cumprod(alphas, dim=0), T=T)


def timestep_embedding(t, d_t: int) -> torch.Tensor:
    """Sinusoidal encoding: [sin(t * f_k)..., cos(t * f_k)...] with geometric
    frequencies f_k = 10000^(-2k/d_t)."""
    if d_t % 2 != 0:
        raise ConfigError(f"timestep embedding width must be even, got {d_t}")
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    k = torch.arange(d_t // 2, dtype=torch.float32)
    freqs = torch.pow(torch.tensor(10000.0), -2.0 * k / d_t)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def forward_noise(x0: torch.Tensor, t, noise: torch.Tensor, schedule: BetaSchedule) -> torch.Tensor:
    """Closed-form forward marginal x_t = sqrt(ab_t) x0 + sqrt(1-ab_t) noise."""
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    ab = schedule.alpha_bars.to(x0.dtype)[t].view(-1, *([1] * (x0.ndim - 1)))
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise


class TimeConditioner(nn.Module):
    """Maps the sinusoidal encoding to the block-conditioning width with
    exactly two affine layers."""

    def __init__(self, d_t: int, emb_dim: int):
        super().__init__()
        self.d_t = d_t
        self.fc1 = nn.Linear(d_t, emb_dim)
        self.fc2 = nn.Linear(emb_dim, emb_dim)

    def forward(self, t) -> torch.Tensor:
        emb = timestep_embedding(t, self.d_t).to(self.fc1.weight.dtype)
        return self.fc2(F.silu(self.fc1(emb)))


# ---------------------------------------------------------------------------
# Refinement CNN + spatial attention
# ---------------------------------------------------------------------------


def _norm_groups(channels: int) -> int:
    return math.gcd(8, channels)


class ResidualBlock(nn.Module):
    """x + branch(x) where branch is Conv-BN-ReLU-Conv-BN."""

    def __init__(self, channels: int):
        super().__init__()
        self.branch = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.BatchNorm2d(channels),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.BatchNorm2d(channels),
        )

    def forward(self, x):
        return x + self.branch(x)


class RefineCNN(nn.Module):
    """Fuses the error grid with the backbone feature levels.

    The main path runs at the 14x14 working resolution; reduced copies of the
    finer levels are returned as skips for the upsampler. Stride plan for
    224 inputs: skips at 56 and 28, stem downsampling 56 -> 28 -> 14.
    """

    def __init__(self, level_channels: tuple[int, ...], width: int):
        super().__init__()
        c0, c1, c2 = level_channels
        self.skip56_width = max(width // 4, 8)
        self.skip28_width = max(width // 2, 8)
        self.skip56 = nn.Conv2d(c0, self.skip56_width, 1)
        self.skip28 = nn.Conv2d(c1, self.skip28_width, 1)
        self.stem1 = nn.Conv2d(self.skip56_width, 16, 3, stride=2, padding=1)
        self.stem1_bn = nn.BatchNorm2d(16)
        self.stem2 = nn.Conv2d(16, width, 3, stride=2, padding=1)
        self.stem2_bn = nn.BatchNorm2d(width)
        self.fuse = nn.Conv2d(width + c1 + c2 + 1, width, 1)
        self.fuse_bn = nn.BatchNorm2d(width)
        self.blocks = nn.Sequential(ResidualBlock(width), ResidualBlock(width))
        self.out_res = WORK_RES
        self.skip_resolutions = (2 * WORK_RES, 4 * WORK_RES)

    def forward(self, error_grid: torch.Tensor, levels: list[torch.Tensor]):
        if error_grid.ndim != 4 or error_grid.shape[1] != 1:
            raise ShapeError(f"error grid must be (B, 1, h, w), got {tuple(error_grid.shape)}")
        r56, r28, r14 = 4 * WORK_RES, 2 * WORK_RES, WORK_RES
        l0, l1, l2 = (
            t if t.shape[-1] == res else F.interpolate(t, size=(res, res), mode="bilinear",
                                                       align_corners=False)
            for t, res in zip(levels, (r56, r28, r14))
        )
        err = (error_grid if error_grid.shape[-1] == r14
               else F.interpolate(error_grid, size=(r14, r14), mode="bilinear",
                                  align_corners=False))
        s56 = F.relu(self.skip56(l0))
        s28 = F.relu(self.skip28(l1))
        x = F.relu(self.stem1_bn(self.stem1(s56)))
        x = F.relu(self.stem2_bn(self.stem2(x)))
        l1_14 = F.interpolate(l1, size=(r14, r14), mode="bilinear", align_corners=False)
        x = F.relu(self.fuse_bn(self.fuse(torch.cat([x, l1_14, l2, err], dim=1))))
        return self.blocks(x), [s28, s56]


class SpatialAttention(nn.Module):
    """Multi-head self-attention over the (H*W) patch sequence with a
    residual connection and layer norm; shape preserving."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads != 0:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        self.attn = SelfAttention(channels, heads)
        self.ln = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor, need_weights: bool = False):
        b, c, h, w = x.shape
        seq = x.flatten(2).transpose(1, 2)  # (B, H*W, C)
        out, probs = self.attn(seq, need_weights)
        seq = self.ln(seq + out)
        y = seq.transpose(1, 2).reshape(b, c, h, w)
        return (y, probs) if need_weights else y


def spatial_attend(module: SpatialAttention, features: torch.Tensor) -> torch.Tensor:
    """Public single-image wrapper around :class:`SpatialAttention`."""
    single = features.ndim == 3
    x = features.unsqueeze(0) if single else features
    y = module(x)
    return y[0] if single else y


# ---------------------------------------------------------------------------
# Conditional denoiser
# ---------------------------------------------------------------------------


class DenoiserBlock(nn.Module):
    """Residual block with the conditioning vector added between convs."""

    def __init__(self, channels: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(channels), channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.emb = nn.Linear(emb_dim, channels)
        self.norm2 = nn.GroupNorm(_norm_groups(channels), channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class Denoiser(nn.Module):
    """Lightweight 2D U-Net noise predictor with two downsampling stages,
    conditioned on the timestep embedding and the class text embedding."""

    def __init__(self, cfg: SegmentorConfig, text_dim: int = 256):
        super().__init__()
        w = cfg.denoiser_width
        emb = 2 * w
        self.cond_channels = cfg.cond_channels
        self.time = TimeConditioner(cfg.d_t, emb)
        self.text = nn.Linear(text_dim, emb)
        self.in_conv = nn.Conv2d(1 + cfg.cond_channels, w, 3, padding=1)
        self.block0 = DenoiserBlock(w, emb)
        self.down1 = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.block1 = DenoiserBlock(2 * w, emb)
        self.down2 = nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1)
        self.mid = DenoiserBlock(2 * w, emb)
        self.up1 = nn.Conv2d(4 * w, 2 * w, 1)
        self.block_up1 = DenoiserBlock(2 * w, emb)
        self.up2 = nn.Conv2d(3 * w, w, 1)
        self.block_up2 = DenoiserBlock(w, emb)
        self.out_norm = nn.GroupNorm(_norm_groups(w), w)
        self.out_conv = nn.Conv2d(w, 1, 3, padding=1)

    def forward(self, x_t, t, text_vec=None, cond=None):
        b = x_t.shape[0]
        if cond is None:
            cond = x_t.new_zeros(b, self.cond_channels, *x_t.shape[-2:])
        emb = self.time(t).to(x_t.dtype)
        if emb.shape[0] == 1 and b > 1:
            emb = emb.expand(b, -1)
        if text_vec is not None:
            emb = emb + self.text(text_vec)
        h0 = self.block0(self.in_conv(torch.cat([x_t, cond], dim=1)), emb)
        h1 = self.block1(self.down1(h0), emb)
        h2 = self.mid(self.down2(h1), emb)
        u1 = F.interpolate(h2, size=h1.shape[-2:], mode="bilinear", align_corners=False)
        u1 = self.block_up1(self.up1(torch.cat([u1, h1], dim=1)), emb)
        u2 = F.interpolate(u1, size=h0.shape[-2:], mode="bilinear", align_corners=False)
        u2 = self.block_up2(self.up2(torch.cat([u2, h0], dim=1)), emb)
        return self.out_conv(F.silu(self.out_norm(u2)))


def diffusion_refine(
    denoiser: Denoiser,
    initial_map: torch.Tensor,
    text_vec: torch.Tensor | None,
    schedule: BetaSchedule,
    seed: int | torch.Generator,
    cond: torch.Tensor | None = None,
    init_mode: str = "noised_map",
) -> torch.Tensor:
    """Reverse diffusion over all T steps, starting from the forward-noised
    initial map at step T-1 (or pure noise). Noise draws are taken from the
    seeded generator, so the output is bitwise reproducible."""
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(seed)
    if init_mode not in ("noised_map", "pure_noise"):
        raise ConfigError(f"unknown diffusion init mode {init_mode!r}")
    betas = schedule.betas.to(initial_map.dtype)
    alphas = schedule.alphas.to(initial_map.dtype)
    alpha_bars = schedule.alpha_bars.to(initial_map.dtype)
    eps0 = torch.randn(initial_map.shape, generator=gen, dtype=initial_map.dtype)
    if init_mode == "noised_map":
        x = forward_noise(initial_map, schedule.T - 1, eps0, schedule)
    else:
        x = eps0
    for t in range(schedule.T - 1, -1, -1):
        eps_hat = denoiser(x, torch.tensor([t]), text_vec, cond)
        mean = (x - betas[t] / torch.sqrt(1.0 - alpha_bars[t]) * eps_hat) / torch.sqrt(alphas[t])
        if t > 0:
            var = betas[t] * (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t])
            z = torch.randn(x.shape, generator=gen, dtype=x.dtype)
            x = mean + torch.sqrt(var) * z
        else:
            x = mean
    return x


# ---------------------------------------------------------------------------
# Upsampler and the assembled segmentor
# ---------------------------------------------------------------------------


class ChannelMix(nn.Module):
    """1x1 convolution computed as a channel matmul.

    Few-channel conv kernels at large spatial sizes fall off a performance
    cliff in single-threaded backward passes; a plain linear over the channel
    axis computes the same map through well-tuned GEMMs.
    """

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.lin = nn.Linear(cin, cout)

    @property
    def weight(self):
        return self.lin.weight

    @property
    def bias(self):
        return self.lin.bias

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.lin(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class MapUpsampler(nn.Module):
    """Progressive 2x upsampling (14 -> 224) with skip concatenation at 28
    and 56; sigmoid output.

    Spatial convolutions stop at 56; the logit map is decoded there and the
    remaining 2x stages upsample the single-channel logits (conv backward at
    112+ resolution with few channels is degenerate on CPU and would
    dominate the training step).
    """

    def __init__(self, context_width: int, skip28_width: int, skip56_width: int):
        super().__init__()
        self.skip_dims = (context_width, skip28_width, skip56_width)
        self.conv14 = nn.Conv2d(1 + context_width, 16, 3, padding=1)
        self.conv28 = nn.Conv2d(16 + skip28_width, 12, 3, padding=1)
        self.conv56 = nn.Conv2d(12 + skip56_width, 8, 3, padding=1)
        self.head = ChannelMix(8, 1)

    @staticmethod
    def _up(x, mode="nearest"):
        # nearest keeps constants exact and is cheap; the stage convs smooth
        return F.interpolate(x, scale_factor=2, mode=mode)

    def forward(self, refined: torch.Tensor, skips=None) -> torch.Tensor:
        b = refined.shape[0]
        h, w = refined.shape[-2:]
        if skips is None:
            skips = [
                refined.new_zeros(b, self.skip_dims[0], h, w),
                refined.new_zeros(b, self.skip_dims[1], 2 * h, 2 * w),
                refined.new_zeros(b, self.skip_dims[2], 4 * h, 4 * w),
            ]
        x = F.relu(self.conv14(torch.cat([refined, skips[0]], dim=1)))
        x = self._up(x)
        x = F.relu(self.conv28(torch.cat([x, skips[1]], dim=1)))
        x = self._up(x)
        x = F.relu(self.conv56(torch.cat([x, skips[2]], dim=1)))
        logits = self.head(x)
        logits = F.interpolate(logits, scale_factor=4, mode="bilinear", align_corners=False)
        return torch.sigmoid(logits)


class Segmentor(nn.Module):
    """Assembled refiner: CNN + attention + conditional diffusion + upsampler."""

    def __init__(
        self,
        cfg: SegmentorConfig,
        level_channels: tuple[int, ...] = (24, 56, 192),
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.cfg = cfg
        self.schedule = make_beta_schedule(cfg.diffusion_steps)
        self.refine = RefineCNN(level_channels, cfg.refine_width)
        self.attend = SpatialAttention(cfg.refine_width, cfg.heads)
        self.cond_conv = nn.Conv2d(cfg.refine_width, cfg.cond_channels, 1)
        self.denoiser = Denoiser(cfg)
        self.upsampler = MapUpsampler(
            cfg.refine_width, self.refine.skip28_width, self.refine.skip56_width
        )
        # global affine calibrating raw L1 errors onto the mask value scale;
        # shared across samples so image-level score ordering is preserved
        self.init_scale = nn.Parameter(torch.tensor(10.0))
        self.init_bias = nn.Parameter(torch.tensor(-2.0))
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        with torch.no_grad():
            for mod in self.modules():
                if isinstance(mod, (nn.Conv2d, nn.Linear)):
                    fan_in = mod.weight[0].numel()
                    w = torch.randn(mod.weight.shape, generator=generator)
                    mod.weight.copy_(w * math.sqrt(2.0 / fan_in))
                    if mod.bias is not None:
                        mod.bias.zero_()
            # noise prediction starts at zero so early reverse steps are mild
            self.denoiser.out_conv.weight.zero_()

    def cnn_refine(self, error_grid: torch.Tensor, levels: list[torch.Tensor]):
        return self.refine(error_grid, levels)

    def context_features(self, error_grid: torch.Tensor, levels: list[torch.Tensor]):
        """CNN + attention pass shared by training and inference paths."""
        feats, skips = self.refine(error_grid, levels)
        return self.attend(feats), skips

    def initial_map(self, error_grid: torch.Tensor) -> torch.Tensor:
        """Calibrated error grid: a monotone map onto the mask value scale.

        The affine is shared across samples (trained to match downsampled
        pseudo-anomaly masks), so unlike per-sample normalization it keeps
        scores comparable between images.
        """
        if error_grid.shape[-1] != WORK_RES:
            error_grid = F.interpolate(error_grid, size=(WORK_RES, WORK_RES),
                                       mode="bilinear", align_corners=False)
        return torch.sigmoid(self.init_scale * error_grid + self.init_bias)

    def diffusion_refine(self, initial_map, text_vec, seed, cond=None,
                         schedule: BetaSchedule | None = None):
        if schedule is not None and schedule.T != self.cfg.diffusion_steps:
            raise CheckpointError(
                f"schedule has T={schedule.T} but denoiser was configured for "
                f"T={self.cfg.diffusion_steps}"
            )
        return diffusion_refine(
            self.denoiser, initial_map, text_vec, schedule or self.schedule, seed,
            cond=cond, init_mode=self.cfg.init,
        )

    def predict(self, error_grid, levels, text_vec, seed) -> torch.Tensor:
        """Full inference path -> (B, 1, 224, 224) scores in [0, 1]."""
        a14, skips = self.context_features(error_grid, levels)
        init = self.initial_map(error_grid)
        refined = self.diffusion_refine(init, text_vec, seed, cond=self.cond_conv(a14))
        return self.upsampler(refined, [a14, *skips])

    def train_outputs(self, error_grid, levels, text_vec, mask, t, noise):
        """Noise-prediction targets plus the map decoded from a clean-map
        estimate; used by the trainer.

        The noise predictor trains at the uniformly sampled per-item t; the
        upsampler is fed the estimate implied at the last step (T-1), the
        noise level the reverse process actually starts from at inference.
        Also returns the calibrated initial map and the downsampled mask so
        the trainer can fit the error calibration.
        """
        a14, skips = self.context_features(error_grid, levels)
        cond = self.cond_conv(a14)
        x0 = F.interpolate(mask, size=(WORK_RES, WORK_RES), mode="area")
        x_t = forward_noise(x0, t, noise, self.schedule)
        eps_pred = self.denoiser(x_t, t, text_vec, cond)
        t_last = torch.full_like(torch.as_tensor(t), self.schedule.T - 1)
        x_last = forward_noise(x0, t_last, noise, self.schedule)
        eps_last = self.denoiser(x_last, t_last, text_vec, cond)
        ab = self.schedule.alpha_bars.to(x_t.dtype)[-1]
        x0_hat = (x_last - torch.sqrt(1.0 - ab) * eps_last) / torch.sqrt(ab)
        amap = self.upsampler(x0_hat.clamp(0.0, 1.0), [a14, *skips])
        return (eps_pred, eps_last), amap, self.initial_map(error_grid), x0
