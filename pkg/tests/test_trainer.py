import json
from pathlib import Path

import numpy as np
import pytest
import torch

from cmad.config import PipelineConfig, StepLRConfig, to_dict
from cmad.dataio import generate_synthetic_corpus
from cmad.errors import CheckpointError, DataError
from cmad.metrics import evaluate
from cmad.model import AnomalyModel, build_model
from cmad.trainer import (
    CHECKPOINT_MAGIC,
    load_checkpoint,
    lr_at_epoch,
    read_checkpoint,
    save_checkpoint,
    train,
)
from conftest import tiny_config


class TestLrSchedule:
    def test_base_rate_at_epoch_zero(self):
        cfg = PipelineConfig()
        assert lr_at_epoch(cfg, 0) == 1e-4

    def test_one_decay_applied(self):
        cfg = PipelineConfig()
        cfg.train.step_lr = StepLRConfig(step_size=800, decay=0.1)
        assert abs(lr_at_epoch(cfg, 800) - 1e-5) < 1e-18

    def test_two_decays_applied(self):
        cfg = PipelineConfig()
        cfg.train.step_lr = StepLRConfig(step_size=800, decay=0.1)
        # floor(1599/800) = 1: still one decay; the second applies at 1600
        assert abs(lr_at_epoch(cfg, 1599) - 1e-5) < 1e-18
        assert abs(lr_at_epoch(cfg, 1600) - 1e-6) < 1e-18


class TestDecoupledWeightDecay:
    def test_zero_grad_param_still_shrinks(self):
        p = torch.nn.Parameter(torch.full((4,), 2.0))
        opt = torch.optim.AdamW([p], lr=0.1, weight_decay=0.5)
        p.grad = torch.zeros_like(p)
        opt.step()
        # decoupled decay: p <- p * (1 - lr * wd); zero grads add nothing
        assert torch.allclose(p.detach(), torch.full((4,), 2.0 * (1 - 0.1 * 0.5)))


class TestTraining:
    def test_smoke_train_writes_loadable_checkpoint(self, tiny_corpus, tmp_path):
        cfg = tiny_config()
        model, ckpt = train(cfg, tiny_corpus, tmp_path)
        assert ckpt.is_file()
        loaded, cfg2, meta = load_checkpoint(ckpt, tiny_corpus)
        assert meta["epoch"] == cfg.train.epochs
        for k, v in model.state_dict().items():
            assert torch.equal(v, loaded.state_dict()[k])
        log = (tmp_path / "train_log.jsonl").read_text().strip().splitlines()
        rec = json.loads(log[0])
        assert {"epoch", "step", "lr", "total", "mse", "dice", "focal"} <= rec.keys()

    def test_two_runs_bitwise_identical(self, tiny_corpus, tmp_path):
        cfg = tiny_config()
        _, ckpt_a = train(cfg, tiny_corpus, tmp_path / "a")
        _, ckpt_b = train(tiny_config(), tiny_corpus, tmp_path / "b")
        assert ckpt_a.read_bytes() == ckpt_b.read_bytes()

    def test_focal_toggle_logs_exact_zero(self, tiny_corpus, tmp_path):
        cfg = tiny_config()
        cfg.train.toggles.use_focal = False
        train(cfg, tiny_corpus, tmp_path)
        for line in (tmp_path / "train_log.jsonl").read_text().strip().splitlines():
            assert json.loads(line)["focal"] == 0.0

    def test_frozen_components_unchanged(self, tiny_corpus, tmp_path):
        cfg = tiny_config()
        streams_model = AnomalyModel(cfg, tiny_corpus.classes)
        reference = {
            k: v.clone() for k, v in streams_model.state_dict().items()
            if k.startswith("extractor.")
        }
        model, _ = train(cfg, tiny_corpus, tmp_path)
        for k, v in reference.items():
            assert torch.equal(model.state_dict()[k], v)

    def test_empty_train_split_rejected(self, tiny_corpus, tmp_path):
        import copy

        corpus = copy.deepcopy(tiny_corpus)
        corpus.samples = [s for s in corpus.samples if s.split != "train"]
        with pytest.raises(DataError):
            train(tiny_config(), corpus, tmp_path)

    def test_nonfinite_loss_aborts_with_batch_id(self, tiny_corpus, tmp_path, monkeypatch):
        import cmad.trainer as trainer_mod

        def bad_objective(*args, **kwargs):
            nan = torch.tensor(float("nan"), requires_grad=True)
            return nan, {"mse": nan, "dice": nan, "focal": nan}

        monkeypatch.setattr(trainer_mod, "composite_objective", bad_objective)
        with pytest.raises(RuntimeError, match="batch"):
            train(tiny_config(), tiny_corpus, tmp_path)

    def test_resume_equals_uninterrupted(self, tiny_corpus, tmp_path):
        cfg_two = tiny_config()
        cfg_two.train.epochs = 2
        _, ckpt_full = train(cfg_two, tiny_corpus, tmp_path / "full")

        cfg_one = tiny_config()
        cfg_one.train.epochs = 1
        _, ckpt_half = train(cfg_one, tiny_corpus, tmp_path / "half")
        cfg_resume = tiny_config()
        cfg_resume.train.epochs = 2
        _, ckpt_resumed = train(cfg_resume, tiny_corpus, tmp_path / "resumed",
                                resume_from=ckpt_half)
        assert ckpt_resumed.read_bytes() == ckpt_full.read_bytes()

    def test_resume_rejects_other_corpus(self, tiny_corpus, tmp_path):
        cfg = tiny_config()
        _, ckpt = train(cfg, tiny_corpus, tmp_path)
        other = generate_synthetic_corpus(2, 4, 4, seed=8)
        with pytest.raises(CheckpointError):
            train(tiny_config(), other, tmp_path / "x", resume_from=ckpt)


class TestStreamIsolation:
    @staticmethod
    def _rng_states(tmp_path, cfg):
        _, ckpt = train(cfg, generate_synthetic_corpus(2, 4, 4, seed=7), tmp_path)
        payload = read_checkpoint(ckpt)
        return payload["rng_state"]

    def test_vlm_toggle_leaves_all_streams_alone(self, tmp_path):
        cfg_on = tiny_config()
        cfg_off = tiny_config()
        cfg_off.train.toggles.use_vlm = False
        a = self._rng_states(tmp_path / "on", cfg_on)
        b = self._rng_states(tmp_path / "off", cfg_off)
        for name in ("data_order", "pseudo_anomaly", "diffusion", "init"):
            assert a[name] == b[name]

    def test_segmentor_toggle_isolated_to_diffusion_stream(self, tmp_path):
        cfg_on = tiny_config()
        cfg_off = tiny_config()
        cfg_off.train.toggles.use_segmentor = False
        a = self._rng_states(tmp_path / "on", cfg_on)
        b = self._rng_states(tmp_path / "off", cfg_off)
        for name in ("data_order", "pseudo_anomaly", "init"):
            assert a[name] == b[name]
        assert a["diffusion"] != b["diffusion"]  # consumed only when enabled


class TestCheckpointFormat:
    def test_round_trip_bytes_identical(self, tmp_path):
        payload = {
            "version": 1,
            "config": to_dict(tiny_config()),
            "classes": ["a"],
            "model_state": {"w": torch.arange(6, dtype=torch.float32)},
            "optimizer_state": {"state": {}},
            "epoch": 3,
            "rng_state": {"seed": 1},
            "corpus_fingerprint": "f" * 64,
        }
        p1 = tmp_path / "a.bin"
        p2 = tmp_path / "b.bin"
        save_checkpoint(p1, payload)
        save_checkpoint(p2, read_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_file_rejected(self, tiny_corpus, tmp_path):
        cfg = tiny_config()
        _, ckpt = train(cfg, tiny_corpus, tmp_path)
        data = ckpt.read_bytes()
        bad = tmp_path / "trunc.bin"
        bad.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError, match="truncated|corrupt"):
            read_checkpoint(bad)

    def test_wrong_magic_rejected(self, tmp_path):
        bad = tmp_path / "junk.bin"
        bad.write_bytes(b"NOTACKPT" + b"\0" * 64)
        with pytest.raises(CheckpointError):
            read_checkpoint(bad)

    def test_version_mismatch_rejected(self, tmp_path):
        import struct

        bad = tmp_path / "v9.bin"
        blob = b"x"
        bad.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", 9) + struct.pack("<Q", 1)
                        + b"\0" * 32 + blob)
        with pytest.raises(CheckpointError, match="version"):
            read_checkpoint(bad)

    def test_load_checkpoint_fingerprint_mismatch(self, tiny_corpus, tmp_path):
        _, ckpt = train(tiny_config(), tiny_corpus, tmp_path)
        other = generate_synthetic_corpus(2, 4, 4, seed=8)
        with pytest.raises(CheckpointError, match="fingerprint"):
            load_checkpoint(ckpt, other)


class TestModel:
    def test_predict_map_deterministic(self, tiny_corpus):
        model = build_model(tiny_config(), tiny_corpus)
        model.eval()
        sample = tiny_corpus.test_samples()[0]
        a = model.predict_map(sample)
        b = model.predict_map(sample)
        assert np.array_equal(a, b)
        assert a.shape == (224, 224)
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_same_seed_same_model(self, tiny_corpus):
        gen_a = torch.Generator().manual_seed(3)
        gen_b = torch.Generator().manual_seed(3)
        a = build_model(tiny_config(), tiny_corpus, gen_a)
        b = build_model(tiny_config(), tiny_corpus, gen_b)
        for k, v in a.state_dict().items():
            assert torch.equal(v, b.state_dict()[k])

    def test_toggles_do_not_change_init(self, tiny_corpus):
        cfg_on = tiny_config()
        cfg_off = tiny_config()
        cfg_off.train.toggles.use_vlm = False
        cfg_off.train.toggles.use_segmentor = False
        a = build_model(cfg_on, tiny_corpus, torch.Generator().manual_seed(3))
        b = build_model(cfg_off, tiny_corpus, torch.Generator().manual_seed(3))
        for k, v in a.state_dict().items():
            assert torch.equal(v, b.state_dict()[k])

    def test_segmentor_off_path(self, tiny_corpus):
        cfg = tiny_config()
        cfg.train.toggles.use_segmentor = False
        model = build_model(cfg, tiny_corpus)
        model.eval()
        amap = model.predict_map(tiny_corpus.test_samples()[0])
        assert amap.shape == (224, 224)
        assert 0.0 <= amap.min() and amap.max() <= 1.0

    def test_unknown_class_rejected(self, tiny_corpus):
        from cmad.errors import UnknownClassError

        model = build_model(tiny_config(), tiny_corpus)
        with pytest.raises(UnknownClassError):
            model.class_indices(["widget"])

    def test_trained_model_evaluates(self, tiny_corpus, tmp_path):
        model, _ = train(tiny_config(), tiny_corpus, tmp_path)
        report = evaluate(model, tiny_corpus)
        assert set(report.per_class) == set(tiny_corpus.classes)
        for m in report.per_class.values():
            for v in m.values():
                assert 0.0 <= v <= 1.0
