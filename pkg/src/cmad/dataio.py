"""Corpus ingestion and synthesis.

Two corpus sources share one index type: a disk tree in the MVTec-AD layout
(``<root>/<class>/train/good/*.png`` etc.) and a fully synthetic generator
that plants defects with exact ground-truth masks. CutPaste-style
pseudo-anomaly synthesis for training lives here as well.

All randomness is driven by explicit seeds; per-sample generators are derived
by hashing, so corpora are byte-identical across runs and platforms.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CorpusNotFoundError, CorruptSampleError, InvalidSpecError, UnknownClassError

IMAGE_SIZE = 224

_FAMILIES = ("checker", "dots", "grating", "stripes")
_DEFECT_KINDS = ("blob", "scratch", "swap")


@dataclass
class ImageSample:
    """One image with optional ground truth.

    pixels: float32 (H, W, 3) in [0, 1]; mask: bool (H, W) where True marks
    anomalous pixels (all-False for normal test samples, None for train);
    clean_pixels keeps the pre-defect image for synthetic/pseudo anomalies.
    """

    pixels: np.ndarray
    class_id: str
    split: str  # {train, test}
    is_anomalous: bool
    sample_id: str
    mask: np.ndarray | None = None
    clean_pixels: np.ndarray | None = None
    defect_kind: str = "good"
    path: str | None = None


@dataclass
class CorpusIndex:
    """Ordered, read-only view of a corpus. Safe to share across workers."""

    samples: list[ImageSample]
    classes: list[str]
    counts: dict[str, int] = field(default_factory=dict)

    def train_samples(self, class_id: str | None = None) -> list[ImageSample]:
        return [
            s for s in self.samples
            if s.split == "train" and (class_id is None or s.class_id == class_id)
        ]

    def test_samples(self, class_id: str | None = None) -> list[ImageSample]:
        return [
            s for s in self.samples
            if s.split == "test" and (class_id is None or s.class_id == class_id)
        ]

    def fingerprint(self) -> str:
        """Content hash over sample identities and pixel/mask bytes."""
        h = hashlib.sha256()
        for s in self.samples:
            h.update(s.sample_id.encode())
            h.update(s.split.encode())
            h.update(np.ascontiguousarray(s.pixels).tobytes())
            if s.mask is not None:
                h.update(np.ascontiguousarray(s.mask.astype(np.uint8)).tobytes())
        return h.hexdigest()


@dataclass
class PseudoAnomalySpec:
    """Parameters for CutPaste-style patch synthesis."""

    min_area_fraction: float = 0.02
    max_area_fraction: float = 0.15
    patch_source: str = "self"  # {self, other_sample}
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.min_area_fraction <= self.max_area_fraction < 1.0:
            raise InvalidSpecError(
                "area fractions must satisfy 0 < min <= max < 1, got "
                f"[{self.min_area_fraction}, {self.max_area_fraction}]"
            )
        if self.patch_source not in ("self", "other_sample"):
            raise InvalidSpecError(f"unknown patch_source {self.patch_source!r}")


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFFFFFFFFFFFFFF


# ---------------------------------------------------------------------------
# Disk ingestion
# ---------------------------------------------------------------------------


def _load_image(path: Path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if img.size != (IMAGE_SIZE, IMAGE_SIZE):
        img = img.resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def _load_mask(path: Path, image_path: Path, image_size: tuple[int, int]) -> np.ndarray:
    img = Image.open(path).convert("L")
    if img.size != image_size:
        raise CorruptSampleError(
            f"mask {path} has size {img.size}, image {image_path} has size {image_size}"
        )
    if img.size != (IMAGE_SIZE, IMAGE_SIZE):
        img = img.resize((IMAGE_SIZE, IMAGE_SIZE), Image.NEAREST)
    return np.asarray(img) > 0


def load_corpus(root_path: str | Path, layout: str = "mvtec") -> CorpusIndex:
    """Walk an MVTec-style tree (the synthetic layout mirrors it).

    Sample order is lexicographic by path, so two loads of the same tree are
    identical. Images are resized bilinearly, masks with nearest neighbour.
    """
    if layout not in ("mvtec", "synthetic"):
        raise ValueError(f"unknown layout {layout!r}")
    root = Path(root_path)
    if not root.is_dir():
        raise CorpusNotFoundError(f"corpus root does not exist: {root}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise CorpusNotFoundError(f"no class directories under {root}")

    samples: list[ImageSample] = []
    counts = {"train": 0, "test": 0}
    for cdir in class_dirs:
        cls = cdir.name
        for img_path in sorted((cdir / "train").rglob("*.png")):
            samples.append(
                ImageSample(
                    pixels=_load_image(img_path),
                    class_id=cls,
                    split="train",
                    is_anomalous=False,
                    sample_id=str(img_path.relative_to(root)),
                    path=str(img_path),
                )
            )
            counts["train"] += 1
        test_dir = cdir / "test"
        if not test_dir.is_dir():
            continue
        for label_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
            label = label_dir.name
            for img_path in sorted(label_dir.glob("*.png")):
                with Image.open(img_path) as probe:
                    image_size = probe.size
                if label == "good":
                    mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
                    anomalous = False
                else:
                    mask_path = cdir / "ground_truth" / label / f"{img_path.stem}_mask.png"
                    mask = (
                        _load_mask(mask_path, img_path, image_size)
                        if mask_path.is_file()
                        else None
                    )
                    anomalous = True
                samples.append(
                    ImageSample(
                        pixels=_load_image(img_path),
                        class_id=cls,
                        split="test",
                        is_anomalous=anomalous,
                        sample_id=str(img_path.relative_to(root)),
                        mask=mask,
                        defect_kind=label,
                        path=str(img_path),
                    )
                )
                counts["test"] += 1

    samples.sort(key=lambda s: s.sample_id)
    return CorpusIndex(samples=samples, classes=[d.name for d in class_dirs], counts=counts)


def write_corpus(corpus: CorpusIndex, root_path: str | Path) -> None:
    """Write a corpus as 8-bit PNGs in the MVTec-style layout."""
    root = Path(root_path)
    for s in corpus.samples:
        if s.split == "train":
            out = root / s.class_id / "train" / "good" / Path(s.sample_id).name
        else:
            out = root / s.class_id / "test" / s.defect_kind / Path(s.sample_id).name
        out.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(s.pixels * 255.0).astype(np.uint8)).save(out)
        if s.split == "test" and s.defect_kind != "good" and s.mask is not None:
            mpath = (
                root / s.class_id / "ground_truth" / s.defect_kind / f"{out.stem}_mask.png"
            )
            mpath.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray((s.mask.astype(np.uint8) * 255)).save(mpath)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


def _texture(family: str, params: dict, rng: np.random.Generator) -> np.ndarray:
    """One clean texture image as float (H, W, 3); per-sample jitter via rng."""
    n = IMAGE_SIZE
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float32)
    if family == "grating":
        phase = rng.uniform(0, 2 * np.pi)
        arg = 2 * np.pi * (params["fx"] * xx + params["fy"] * yy) / n + phase
        base = 0.5 + 0.35 * np.sin(arg)
    elif family == "checker":
        s = params["cell"]
        ox, oy = rng.integers(0, s, size=2)
        par = (((xx + ox) // s + (yy + oy) // s) % 2).astype(np.float32)
        base = params["lo"] + (params["hi"] - params["lo"]) * par
    elif family == "dots":
        s = params["spacing"]
        ox, oy = rng.uniform(0, s, size=2)
        dx = (xx + ox) % s - s / 2
        dy = (yy + oy) % s - s / 2
        base = 0.25 + 0.6 * np.exp(-(dx**2 + dy**2) / (2 * params["sigma"] ** 2))
    elif family == "stripes":
        phase = rng.uniform(0, 2 * np.pi)
        arg = 2 * np.pi * (xx + yy) / params["period"] + phase
        base = 0.45 + 0.3 * np.sign(np.sin(arg)) * np.abs(np.sin(arg)) ** 0.5
    else:
        raise ValueError(f"unknown family {family!r}")
    base = base + rng.normal(0.0, 0.01)  # per-sample brightness jitter
    img = np.clip(base[..., None] * np.asarray(params["tint"], dtype=np.float32), 0.0, 1.0)
    return img.astype(np.float32)


def _family_params(family: str, class_rng: np.random.Generator) -> dict:
    tint = class_rng.uniform(0.55, 1.0, size=3)
    if family == "grating":
        return {"fx": int(class_rng.integers(4, 9)), "fy": int(class_rng.integers(0, 3)), "tint": tint}
    if family == "checker":
        return {
            "cell": int(class_rng.integers(18, 30)),
            "lo": float(class_rng.uniform(0.15, 0.3)),
            "hi": float(class_rng.uniform(0.65, 0.85)),
            "tint": tint,
        }
    if family == "dots":
        return {
            "spacing": float(class_rng.uniform(26, 40)),
            "sigma": float(class_rng.uniform(4, 7)),
            "tint": tint,
        }
    return {"period": float(class_rng.uniform(24, 44)), "tint": tint}


def _shift_values(values: np.ndarray, amp: float) -> np.ndarray:
    """Move every value by exactly +-amp while staying inside [0, 1]."""
    up = values + amp
    down = values - amp
    return np.where(up <= 1.0, up, down)


def _disk_footprint(rng: np.random.Generator) -> np.ndarray:
    n = IMAGE_SIZE
    r = rng.integers(10, 25)
    cy = rng.integers(r + 2, n - r - 2)
    cx = rng.integers(r + 2, n - r - 2)
    yy, xx = np.ogrid[0:n, 0:n]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2


def _line_footprint(rng: np.random.Generator) -> np.ndarray:
    n = IMAGE_SIZE
    length = rng.uniform(60, 160)
    theta = rng.uniform(0, np.pi)
    cy, cx = rng.uniform(0.25 * n, 0.75 * n, size=2)
    dy, dx = np.sin(theta), np.cos(theta)
    y0, x0 = cy - dy * length / 2, cx - dx * length / 2
    y1, x1 = cy + dy * length / 2, cx + dx * length / 2
    width = rng.uniform(2.0, 5.0)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float32)
    # distance from each pixel to the segment
    vy, vx = y1 - y0, x1 - x0
    t = np.clip(((yy - y0) * vy + (xx - x0) * vx) / (vy**2 + vx**2), 0.0, 1.0)
    dist = np.hypot(yy - (y0 + t * vy), xx - (x0 + t * vx))
    return dist <= width / 2


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _plant_defect(clean_u8: np.ndarray, kind: str, rng: np.random.Generator):
    """Plant one defect; returns (defected_u8, mask) with mask = changed pixels."""
    clean = clean_u8.astype(np.float32) / 255.0
    amp = rng.uniform(0.27, 0.5)
    if kind == "blob":
        foot = _disk_footprint(rng)
        out = clean.copy()
        out[foot] = _shift_values(clean[foot], amp)
    elif kind == "scratch":
        foot = _line_footprint(rng)
        out = clean.copy()
        out[foot] = _shift_values(clean[foot], amp)
    elif kind == "swap":
        n = IMAGE_SIZE
        h = int(rng.integers(20, 48))
        w = int(rng.integers(20, 48))
        sy, sx = rng.integers(0, n - h), rng.integers(0, n - w)
        dy, dx = rng.integers(0, n - h), rng.integers(0, n - w)
        out = clean.copy()
        out[dy : dy + h, dx : dx + w] = clean[sy : sy + h, sx : sx + w]
        foot = np.zeros((n, n), dtype=bool)
        foot[dy : dy + h, dx : dx + w] = True
        # pasted content may coincide with the original; force a change there
        same = np.all(_quantize(out) == clean_u8, axis=-1) & foot
        out[same] = _shift_values(clean[same], amp)
    else:
        raise ValueError(f"unknown defect kind {kind!r}")
    out_u8 = _quantize(out)
    changed = np.any(out_u8 != clean_u8, axis=-1)
    if not np.array_equal(changed, foot):  # pragma: no cover - guards generator bugs
        raise AssertionError("defect footprint does not match changed pixels")
    return out_u8, foot


def generate_synthetic_corpus(
    n_classes: int, n_train: int, n_test: int, seed: int
) -> CorpusIndex:
    """Desk-scale corpus of parametric textures with planted, exactly-masked defects.

    Deterministic given the seed; pixels are pre-quantized to the 8-bit grid so
    a PNG round trip through :func:`write_corpus`/:func:`load_corpus` is exact.
    Half of each class's test split is anomalous.
    """
    if min(n_classes, n_train, n_test) < 1:
        raise ValueError("all counts must be >= 1")
    samples: list[ImageSample] = []
    family_of = {
        f"{_FAMILIES[i % len(_FAMILIES)]}{i:02d}": _FAMILIES[i % len(_FAMILIES)]
        for i in range(n_classes)
    }
    classes = sorted(family_of)
    for cls in classes:
        family = family_of[cls]
        params = _family_params(
            family, np.random.Generator(np.random.PCG64(_stable_seed(seed, cls, "params")))
        )
        for idx in range(n_train):
            rng = np.random.Generator(np.random.PCG64(_stable_seed(seed, cls, "train", idx)))
            u8 = _quantize(_texture(family, params, rng))
            samples.append(
                ImageSample(
                    pixels=u8.astype(np.float32) / 255.0,
                    class_id=cls,
                    split="train",
                    is_anomalous=False,
                    sample_id=f"{cls}/train/good/{idx:03d}.png",
                )
            )
        n_anom = n_test // 2
        kind_counters = dict.fromkeys(_DEFECT_KINDS, 0)
        for idx in range(n_test):
            rng = np.random.Generator(np.random.PCG64(_stable_seed(seed, cls, "test", idx)))
            clean_u8 = _quantize(_texture(family, params, rng))
            if idx < n_anom:
                kind = _DEFECT_KINDS[idx % len(_DEFECT_KINDS)]
                out_u8, mask = _plant_defect(clean_u8, kind, rng)
                num = kind_counters[kind]
                kind_counters[kind] += 1
                samples.append(
                    ImageSample(
                        pixels=out_u8.astype(np.float32) / 255.0,
                        class_id=cls,
                        split="test",
                        is_anomalous=True,
                        sample_id=f"{cls}/test/{kind}/{num:03d}.png",
                        mask=mask,
                        clean_pixels=clean_u8.astype(np.float32) / 255.0,
                        defect_kind=kind,
                    )
                )
            else:
                samples.append(
                    ImageSample(
                        pixels=clean_u8.astype(np.float32) / 255.0,
                        class_id=cls,
                        split="test",
                        is_anomalous=False,
                        sample_id=f"{cls}/test/good/{idx - n_anom:03d}.png",
                        mask=np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool),
                        defect_kind="good",
                    )
                )
    samples.sort(key=lambda s: s.sample_id)
    counts = {
        "train": sum(s.split == "train" for s in samples),
        "test": sum(s.split == "test" for s in samples),
    }
    return CorpusIndex(samples=samples, classes=classes, counts=counts)


# ---------------------------------------------------------------------------
# CutPaste pseudo-anomalies
# ---------------------------------------------------------------------------


def _patch_dims(spec: PseudoAnomalySpec, rng: np.random.Generator, h_img: int, w_img: int):
    frac = rng.uniform(spec.min_area_fraction, spec.max_area_fraction)
    # log-uniform aspect covers scar-like strips as well as square patches
    aspect = float(np.exp(rng.uniform(np.log(0.15), np.log(1 / 0.15))))
    area = frac * h_img * w_img
    h = int(np.clip(round(np.sqrt(area * aspect)), 1, h_img - 1))
    w = int(np.clip(round(area / h), 1, w_img - 1))
    realized = h * w / (h_img * w_img)
    if not (0.9 * spec.min_area_fraction <= realized <= 1.1 * spec.max_area_fraction):
        raise InvalidSpecError(
            f"cannot realize patch area fraction in [{spec.min_area_fraction}, "
            f"{spec.max_area_fraction}] on a {h_img}x{w_img} image (got {realized:.2g})"
        )
    return h, w


def synthesize_pseudo_anomaly(
    sample: ImageSample, spec: PseudoAnomalySpec, donor: ImageSample | None = None
) -> tuple[ImageSample, np.ndarray]:
    """Cut a rectangular patch and paste it elsewhere (CutPaste variant).

    Rotation is restricted to multiples of 90 degrees so the pasted footprint
    stays an axis-aligned rectangle and the returned mask marks exactly the
    pasted pixels. Deterministic given ``spec.seed``.
    """
    if sample.is_anomalous:
        raise ValueError("pseudo-anomaly synthesis requires a normal sample")
    if spec.patch_source == "other_sample" and donor is None:
        raise ValueError("patch_source='other_sample' requires a donor sample")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    h_img, w_img = sample.pixels.shape[:2]
    h, w = _patch_dims(spec, rng, h_img, w_img)
    k = int(rng.integers(0, 4))  # quarter-turn count
    src = sample.pixels if spec.patch_source == "self" else donor.pixels
    sy = int(rng.integers(0, h_img - h + 1))
    sx = int(rng.integers(0, w_img - w + 1))
    patch = np.rot90(src[sy : sy + h, sx : sx + w], k)
    ph, pw = patch.shape[:2]
    dy = int(rng.integers(0, h_img - ph + 1))
    dx = int(rng.integers(0, w_img - pw + 1))

    pixels = sample.pixels.copy()
    pixels[dy : dy + ph, dx : dx + pw] = patch
    mask = np.zeros((h_img, w_img), dtype=bool)
    mask[dy : dy + ph, dx : dx + pw] = True
    out = ImageSample(
        pixels=pixels,
        class_id=sample.class_id,
        split=sample.split,
        is_anomalous=True,
        sample_id=sample.sample_id,
        mask=mask,
        clean_pixels=sample.pixels,
        defect_kind="cutpaste",
        path=sample.path,
    )
    return out, mask


def select_prompt_image(corpus: CorpusIndex, class_id: str) -> ImageSample:
    """The class's reference normal image: first train sample in sorted order."""
    if class_id not in corpus.classes:
        raise UnknownClassError(f"class {class_id!r} not in corpus {corpus.classes}")
    train = corpus.train_samples(class_id)
    if not train:
        raise UnknownClassError(f"class {class_id!r} has no train samples")
    return train[0]
