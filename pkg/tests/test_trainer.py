import json
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
import torch

from occreid.dcdmmd import KernelConfig
from occreid.objective import LossWeights, parts_ce_loss
from occreid.synthdata import generate_atlas, render_sample, write_split
from occreid.trainer import (Checkpoint, ConfigError,
                             CheckpointError, TrainConfig, compute_losses,
                             load_checkpoint, pk_sample_batch, pretrain_teacher,
                             save_checkpoint, train, train_step)

from conftest import make_batch as _make_batch, tiny_model, tiny_model_cfg


def make_batch(seed):
    return _make_batch(np.random.default_rng(seed))


def make_dataset(root, num_ids=8, per_id=6, seed=0):
    """Write a small train/query/gallery dataset and return a TrainConfig."""
    atlas = generate_atlas(num_ids, seed)
    train_imgs, q_imgs, g_imgs = [], [], []
    for i in range(num_ids):
        for j in range(per_id):
            train_imgs.append(render_sample(atlas, i, j % 2, j))
        q_imgs.append(render_sample(atlas, i, 0, 100))
        g_imgs.append(render_sample(atlas, i, 1, 200))
    write_split(root, "train", train_imgs)
    write_split(root, "query", q_imgs)
    write_split(root, "gallery", g_imgs)
    return TrainConfig(train_dir=str(root / "train"),
                       query_dir=str(root / "query"),
                       gallery_dir=str(root / "gallery"),
                       P=4, K=2, epochs_pretrain=1, epochs_joint=2,
                       seed=seed, eval_every=0, strict_deterministic=True)


@pytest.fixture(scope="module")
def dataset_cfg(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    return make_dataset(root)


class TestConfig:
    def test_validate_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            TrainConfig(train_dir="x", P=1).validate()
        with pytest.raises(ConfigError):
            TrainConfig(train_dir="x", lr=0.0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(train_dir="x", mode="semi").validate()
        with pytest.raises(ConfigError):
            TrainConfig(train_dir="x", mode="sup").validate()
        with pytest.raises(ConfigError):
            TrainConfig(train_dir="x", dtype="float16").validate()

    def test_roundtrip_through_dict(self):
        cfg = TrainConfig(train_dir="a", P=4, K=3, seed=7,
                          kernel=KernelConfig(bandwidths=(0.5, 2.0), mode="fixed"),
                          weights=LossWeights(lambda1=0.25))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_roundtrip_through_json(self):
        cfg = TrainConfig(train_dir="a", image_hw=(32, 16))
        blob = json.dumps(cfg.to_dict())
        assert TrainConfig.from_dict(json.loads(blob)) == cfg


class TestPkSampling:
    def make_images(self, num_ids=10, per_id=5):
        from occreid.synthdata import LabeledImage
        px = np.zeros((4, 2, 3), dtype=np.float32)
        return [LabeledImage(px, i, 0, False, "holistic")
                for i in range(num_ids) for _ in range(per_id)]

    def test_shape_and_counts(self):
        imgs = self.make_images()
        batch, _ = pk_sample_batch(imgs, 4, 3, np.random.default_rng(0))
        assert len(batch) == 12
        counts = Counter(im.identity for im in batch)
        assert len(counts) == 4
        assert all(v == 3 for v in counts.values())

    def test_deterministic_given_seed(self):
        imgs = self.make_images()
        b1, _ = pk_sample_batch(imgs, 4, 3, np.random.default_rng(42))
        b2, _ = pk_sample_batch(imgs, 4, 3, np.random.default_rng(42))
        assert [im.identity for im in b1] == [im.identity for im in b2]

    def test_replacement_when_short(self):
        imgs = self.make_images(num_ids=3, per_id=2)
        batch, _ = pk_sample_batch(imgs, 3, 4, np.random.default_rng(1))
        counts = Counter(im.identity for im in batch)
        assert all(v == 4 for v in counts.values())

    def test_too_few_identities(self):
        imgs = self.make_images(num_ids=2)
        with pytest.raises(ValueError):
            pk_sample_batch(imgs, 4, 2, np.random.default_rng(0))

    def test_identity_coverage_over_many_batches(self):
        imgs = self.make_images(num_ids=6)
        rng = np.random.default_rng(3)
        seen = Counter()
        for _ in range(200):
            batch, rng = pk_sample_batch(imgs, 3, 2, rng)
            seen.update({im.identity for im in batch})
        # every identity drawn roughly 200 * 3/6 = 100 times
        assert all(60 < seen[i] < 140 for i in range(6))


class TestComputeLosses:
    def test_ce_only_path_is_bitwise(self):
        """With alpha=1, recon/DCD/occ weights zero, the total equals the sum
        of the two CE terms computed by hand, bitwise."""
        model = tiny_model(seed=5)
        tb = make_batch(0)
        sb = make_batch(1)
        w = LossWeights(lambda_recon=0.0, lambda1=0.0, lambda2=0.0,
                        lambda3=0.0, alpha=1.0, occ_cls_weight=0.0)
        kernel = KernelConfig(bandwidths=(1.0,), mode="fixed")
        total, bd = compute_losses(model, tb, sb, w, kernel)

        t_out = model.forward_teacher(tb["noisy"])
        s_out = model.forward_student(sb["noisy"])
        expect = (parts_ce_loss(t_out["logits"], tb["labels"])
                  + parts_ce_loss(s_out["logits"], sb["labels"]))
        assert total.item() == expect.item()
        assert bd.l_d == 0.0 and bd.occ_bce == 0.0 and bd.recon_teacher == 0.0

    def test_breakdown_composition(self):
        model = tiny_model(seed=6)
        tb, sb = make_batch(2), make_batch(3)
        w = LossWeights()
        kernel = KernelConfig(bandwidths=(1.0,), mode="fixed")
        total, bd = compute_losses(model, tb, sb, w, kernel)
        expect = (w.alpha * (bd.joint_teacher + bd.joint_student)
                  + (1 - w.alpha) * bd.l_d + w.occ_cls_weight * bd.occ_bce)
        assert total.item() == pytest.approx(expect, rel=1e-6)

    def test_train_step_changes_parameters(self):
        model = tiny_model(seed=7)
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        before = [p.clone() for p in model.parameters()]
        bd = train_step(model, opt, make_batch(4), make_batch(5),
                        LossWeights(), KernelConfig(bandwidths=(1.0,), mode="fixed"))
        assert np.isfinite(bd.total)
        changed = any(not torch.equal(a, b)
                      for a, b in zip(before, model.parameters()))
        assert changed

    def test_nan_aborts(self):
        model = tiny_model(seed=8)
        with torch.no_grad():
            model.encoder.net[0].weight.fill_(float("nan"))
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        with pytest.raises(FloatingPointError, match="NaN"):
            train_step(model, opt, make_batch(6), make_batch(7),
                       LossWeights(), KernelConfig(bandwidths=(1.0,), mode="fixed"))


class TestPretrain:
    def test_student_heads_untouched(self, dataset_cfg):
        cfg = replace(dataset_cfg, epochs_pretrain=2)
        from occreid.trainer import _Run
        from occreid.model import build_model
        run = _Run(cfg, None)
        ref = build_model(run.model_cfg, cfg.seed, cfg.torch_dtype)
        ckpt = pretrain_teacher(cfg)
        trained = ckpt.model_state
        init = ref.state_dict()
        for key in trained:
            if key.startswith(("attention.", "student_heads.", "occlusion_head.")):
                assert torch.equal(trained[key], init[key]), key

    def test_loss_decreases(self, dataset_cfg):
        cfg = replace(dataset_cfg, epochs_pretrain=4)
        ckpt = pretrain_teacher(cfg)
        first = ckpt.history[0]["mean_joint_teacher"]
        last = ckpt.history[-1]["mean_joint_teacher"]
        assert last < first

    def test_zero_epochs_is_identity(self, dataset_cfg):
        cfg = replace(dataset_cfg, epochs_pretrain=0)
        from occreid.trainer import _Run
        from occreid.model import build_model
        run = _Run(cfg, None)
        ref = build_model(run.model_cfg, cfg.seed, cfg.torch_dtype)
        ckpt = pretrain_teacher(cfg)
        for key, val in ckpt.model_state.items():
            assert torch.equal(val, ref.state_dict()[key]), key


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        model = tiny_model(seed=9)
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        train_step(model, opt, make_batch(8), make_batch(9), LossWeights(),
                   KernelConfig(bandwidths=(1.0,), mode="fixed"))
        cfg = TrainConfig(train_dir="unused")
        ckpt = Checkpoint(model.state_dict(), opt.state_dict(), 3, "joint",
                          cfg, [{"epoch": 3}], tiny_model_cfg())
        path = tmp_path / "c.bin"
        save_checkpoint(path, ckpt)
        loaded = load_checkpoint(path)
        assert loaded.epoch == 3 and loaded.phase == "joint"
        assert loaded.config == cfg
        assert loaded.model_cfg == tiny_model_cfg()
        for key, val in ckpt.model_state.items():
            assert torch.equal(val, loaded.model_state[key])
        assert json.loads((tmp_path / "c.manifest.json").read_text())["epoch"] == 3

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "nope.bin")

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "old.bin"
        torch.save({"version": "occreid-ckpt-0"}, path)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)


class TestTrain:
    def test_run_produces_artifacts(self, dataset_cfg, tmp_path):
        ckpt = train(dataset_cfg, tmp_path / "run")
        out = tmp_path / "run"
        assert (out / "config.json").exists()
        assert (out / "log.jsonl").exists()
        for ep in range(0, dataset_cfg.epochs_joint + 1):
            assert (out / f"ckpt_{ep}.bin").exists()
        assert ckpt.epoch == dataset_cfg.epochs_joint
        lines = [json.loads(l) for l in (out / "log.jsonl").read_text().splitlines()]
        assert any(l.get("phase") == "pretrain" for l in lines)
        assert any("dcd_overlap" in l for l in lines)

    def test_joint_loss_decreases(self, dataset_cfg, tmp_path):
        cfg = replace(dataset_cfg, epochs_joint=6)
        ckpt = train(cfg, tmp_path / "run")
        joint = [h["mean_total"] for h in ckpt.history if "mean_total" in h]
        assert joint[-1] < joint[0]

    def test_strict_deterministic_logs_identical(self, dataset_cfg, tmp_path):
        train(dataset_cfg, tmp_path / "a")
        train(dataset_cfg, tmp_path / "b")
        assert ((tmp_path / "a" / "log.jsonl").read_bytes()
                == (tmp_path / "b" / "log.jsonl").read_bytes())

    def test_resume_matches_unsplit(self, dataset_cfg, tmp_path):
        cfg = replace(dataset_cfg, epochs_joint=4)
        full = train(cfg, tmp_path / "full")
        half = replace(cfg, epochs_joint=2)
        train(half, tmp_path / "half")
        resumed = train(cfg, tmp_path / "resumed",
                        resume=tmp_path / "half" / "ckpt_2.bin")
        full_state = full.model_state
        for key, val in resumed.model_state.items():
            assert torch.allclose(val.double(), full_state[key].double(),
                                  atol=1e-9), key

    def test_eval_entries_present(self, dataset_cfg, tmp_path):
        cfg = replace(dataset_cfg, eval_every=2, epochs_joint=2)
        ckpt = train(cfg, tmp_path / "run")
        final = ckpt.history[-1]
        assert "rank1" in final and "map" in final
        assert 0.0 <= final["map"] <= 1.0

    def test_empty_train_dir(self, tmp_path):
        (tmp_path / "empty").mkdir()
        cfg = TrainConfig(train_dir=str(tmp_path / "empty"))
        with pytest.raises(ConfigError, match="empty"):
            train(cfg, tmp_path / "run")
