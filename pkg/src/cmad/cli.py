"""Command-line entry points: train / eval / infer / synth-data / ablate / bench.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 runtime error.
Every command writes one JSON manifest (resolved config, config hash, seed,
timestamps, output paths) next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import heatmap
from .config import PipelineConfig, apply_overrides, config_hash, load_config, to_dict
from .dataio import generate_synthetic_corpus, load_corpus, write_corpus
from .errors import CmadError, ConfigError, DataError, UsageError
from .metrics import evaluate
from .trainer import load_checkpoint, train

ABLATION_CONFIGS = {
    # Toggle triples (use_vlm, use_focal, use_segmentor) for the six ablation rows.
    "baseline": (False, False, False),
    "only_segmentor": (False, False, True),
    "only_vlm": (True, False, False),
    "vlm_segmentor_no_focal": (True, False, True),
    "only_focal": (False, True, False),
    "full": (True, True, True),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if args.override:
        apply_overrides(cfg, args.override)
    cfg.validate()
    return cfg


def _write_manifest(path: Path, command: str, cfg: PipelineConfig, args,
                    outputs: list[str], started: str) -> None:
    manifest = {
        "command": command,
        "config": to_dict(cfg),
        "config_hash": config_hash(cfg),
        "overrides": list(args.override or []),
        "seed": cfg.train.seed,
        "started_at": started,
        "finished_at": _now(),
        "outputs": outputs,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2) + "\n")


def _load_corpus_arg(args):
    if not args.data_root:
        raise UsageError("--data-root is required for this command")
    return load_corpus(args.data_root, layout=getattr(args, "layout", "mvtec"))


def _check_masks(corpus) -> None:
    broken = sorted(
        {s.class_id for s in corpus.samples
         if s.split == "test" and s.is_anomalous and s.mask is None}
    )
    if broken:
        raise DataError(f"classes with anomalous test samples missing masks: {broken}")


def cmd_train(args) -> int:
    started = _now()
    cfg = _resolve_config(args)
    corpus = _load_corpus_arg(args)
    out_dir = Path(args.out)
    _, ckpt = train(cfg, corpus, out_dir, resume_from=args.resume)
    _write_manifest(out_dir / "manifest.json", "train", cfg, args,
                    [str(ckpt), str(out_dir / "train_log.jsonl")], started)
    print(f"checkpoint written to {ckpt}")
    return 0


def cmd_eval(args) -> int:
    started = _now()
    model, cfg, _ = load_checkpoint(args.checkpoint)
    if args.override:
        apply_overrides(cfg, args.override)
        model.cfg = cfg
    corpus = _load_corpus_arg(args)
    _check_masks(corpus)
    report = evaluate(model, corpus, smooth_sigma=cfg.eval.smooth_sigma)
    report_path = Path(args.out)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.format_table())
    json_path = report_path.with_suffix(".json")
    json_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    _write_manifest(report_path.parent / f"{report_path.stem}.manifest.json", "eval",
                    cfg, args, [str(report_path), str(json_path)], started)
    print(report.format_table())
    return 0


def cmd_infer(args) -> int:
    started = _now()
    model, cfg, _ = load_checkpoint(args.checkpoint)
    out_dir = Path(args.out)
    maps_dir = out_dir / "maps"
    maps_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    if args.image:
        if not args.class_id:
            raise UsageError("--class-id is required with --image")
        from .dataio import ImageSample, _load_image

        sample = ImageSample(
            pixels=_load_image(Path(args.image)),
            class_id=args.class_id,
            split="test",
            is_anomalous=False,
            sample_id=Path(args.image).name,
        )
        samples = [sample]
    else:
        corpus = _load_corpus_arg(args)
        samples = corpus.test_samples()
    for s in samples:
        amap = model.predict_map(s)
        stem = s.sample_id.replace("/", "_").removesuffix(".png")
        npy = maps_dir / f"{stem}.npy"
        png = maps_dir / f"{stem}.png"
        np.save(npy, amap.astype(np.float32))
        heatmap.save_heatmap(png, amap)
        outputs += [str(npy), str(png)]
    _write_manifest(out_dir / "manifest.json", "infer", cfg, args, outputs, started)
    print(f"wrote {len(samples)} anomaly maps to {maps_dir}")
    return 0


def cmd_synth_data(args) -> int:
    started = _now()
    cfg = PipelineConfig()
    corpus = generate_synthetic_corpus(args.n_classes, args.n_train, args.n_test,
                                       args.seed if args.seed is not None else 0)
    out_dir = Path(args.out)
    write_corpus(corpus, out_dir)
    _write_manifest(out_dir / "manifest.json", "synth-data", cfg, args, [str(out_dir)], started)
    print(f"synthetic corpus ({len(corpus.samples)} samples, "
          f"{len(corpus.classes)} classes) written to {out_dir}")
    return 0


def cmd_ablate(args) -> int:
    started = _now()
    base_cfg = _resolve_config(args)
    corpus = _load_corpus_arg(args)
    _check_masks(corpus)
    out_dir = Path(args.out)
    rows = {}
    for name, (use_vlm, use_focal, use_segmentor) in ABLATION_CONFIGS.items():
        cfg = _resolve_config(args)  # fresh copy per run
        cfg.train.toggles.use_vlm = use_vlm
        cfg.train.toggles.use_focal = use_focal
        cfg.train.toggles.use_segmentor = use_segmentor
        model, _ = train(cfg, corpus, out_dir / name)
        report = evaluate(model, corpus, smooth_sigma=cfg.eval.smooth_sigma)
        rows[name] = report.mean | {
            "toggles": {"use_vlm": use_vlm, "use_focal": use_focal,
                        "use_segmentor": use_segmentor}
        }
        print(f"[{name}] " + "  ".join(f"{k}={100 * v:.2f}" for k, v in report.mean.items()))
    report_path = out_dir / "ablation.json"
    report_path.write_text(json.dumps(rows, indent=2) + "\n")
    _write_manifest(out_dir / "manifest.json", "ablate", base_cfg, args,
                    [str(report_path)], started)
    print(f"ablation report written to {report_path}")
    return 0


def cmd_bench(args) -> int:
    started = _now()
    model, cfg, _ = load_checkpoint(args.checkpoint)
    gen = torch.Generator().manual_seed(cfg.train.seed)
    images = torch.rand(args.n_samples + args.warmup, 3, 224, 224, generator=gen)
    cls = model.classes[0]
    times = []
    for i in range(images.shape[0]):
        t0 = time.perf_counter()
        model.predict_map_batch(images[i : i + 1], [cls], seed=i)
        elapsed = time.perf_counter() - t0
        if i >= args.warmup:  # warmup iterations excluded from statistics
            times.append(elapsed)
    times_ms = [t * 1e3 for t in times]
    report = {
        "n_samples": args.n_samples,
        "warmup": args.warmup,
        "mean_ms": statistics.mean(times_ms),
        "median_ms": statistics.median(times_ms),
        "p95_ms": float(np.percentile(times_ms, 95)),
        "fps": 1000.0 / statistics.mean(times_ms),
    }
    out_dir = Path(args.out) if args.out else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "bench.json"
    report_path.write_text(json.dumps(report, indent=2) + "\n")
    _write_manifest(out_dir / "manifest.json", "bench", cfg, args, [str(report_path)], started)
    print(json.dumps(report, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data_root=True):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--out", required=True, help="output directory (or report path)")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--override", action="append", default=[], metavar="K=V",
                       help="dotted config override, repeatable")
        if data_root:
            p.add_argument("--data-root", help="corpus root directory")
            p.add_argument("--layout", choices=("mvtec", "synthetic"), default="mvtec")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, write a metrics report")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write anomaly maps and heatmaps")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", help="score a single image instead of the test split")
    p.add_argument("--class-id", help="class id for --image")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("synth-data", help="generate a synthetic corpus on disk")
    common(p, data_root=False)
    p.add_argument("--n-classes", type=int, default=4)
    p.add_argument("--n-train", type=int, default=50)
    p.add_argument("--n-test", type=int, default=20)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("ablate", help="run the six ablation configurations")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="measure per-sample inference latency")
    common(p, data_root=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-samples", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # -h/--help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except CmadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))
