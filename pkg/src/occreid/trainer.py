"""Training loop: teacher pretraining, joint student-teacher training with PK
batch sampling, Adam, JSON-line loss logs and resumable checkpoints.

Every batch and every erasing rectangle is derived from (seed, epoch, step),
so a run resumed from any checkpoint replays the exact steps of an unsplit
run, and strict-deterministic mode makes loss logs byte-identical.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import evalkit
from .dcdmmd import KernelConfig, dcd_loss, pairwise_part_distances
from .model import ModelConfig, ReidModel, build_model, global_pool
from .objective import (LossBreakdown, LossWeights, joint_loss, occlusion_bce,
                        parts_ce_loss, recon_loss, total_loss)
from .synthdata import ErasingParams, LabeledImage, apply_random_erasing, read_split

CKPT_VERSION = "occreid-ckpt-1"


class ConfigError(ValueError):
    """Invalid training configuration."""


class CheckpointError(RuntimeError):
    """Checkpoint missing, corrupt, or of an incompatible version."""


@dataclass(frozen=True)
class TrainConfig:
    train_dir: str = ""
    occluded_train_dir: str | None = None
    query_dir: str | None = None
    gallery_dir: str | None = None
    mode: str = "unsup"                 # "unsup": occluded batch = erased holistic
    P: int = 8
    K: int = 4
    epochs_pretrain: int = 5
    epochs_joint: int = 30
    lr: float = 3e-4
    seed: int = 0
    parts: int = 4
    feat_dim: int = 128
    reduction: int = 4
    image_hw: tuple[int, int] = (64, 32)
    eval_every: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    use_global_loss: bool = True
    erase: ErasingParams = field(default_factory=ErasingParams)
    teacher_erase_prob: float = 0.5
    dtype: str = "float32"
    strict_deterministic: bool = False
    freeze_attention: bool = False

    def validate(self) -> None:
        if self.P < 2 or self.K < 2:
            raise ConfigError(f"P and K must both be >= 2, got P={self.P} K={self.K}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.mode not in ("unsup", "sup"):
            raise ConfigError(f"mode must be 'unsup' or 'sup', got {self.mode!r}")
        if self.mode == "sup" and not self.occluded_train_dir:
            raise ConfigError("sup mode requires occluded_train_dir")
        if self.epochs_pretrain < 0 or self.epochs_joint < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        try:
            self.weights.validate()
            self.kernel.validate()
            self.erase.validate()
            self.model_config(2, 2).validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def model_config(self, n_teacher: int, n_student: int) -> ModelConfig:
        return ModelConfig(image_hw=tuple(self.image_hw),
                           channels=(32, 64, 128, self.feat_dim),
                           parts=self.parts, reduction=self.reduction,
                           num_classes_teacher=n_teacher, num_classes_student=n_student)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        if isinstance(d.get("kernel"), dict):
            k = dict(d["kernel"])
            k["bandwidths"] = tuple(k["bandwidths"])
            d["kernel"] = KernelConfig(**k)
        if isinstance(d.get("erase"), dict):
            e = dict(d["erase"])
            e["area_range"] = tuple(e["area_range"])
            e["aspect_range"] = tuple(e["aspect_range"])
            d["erase"] = ErasingParams(**e)
        if "image_hw" in d:
            d["image_hw"] = tuple(d["image_hw"])
        return cls(**d)


@dataclass
class Checkpoint:
    model_state: dict
    optimizer_state: dict | None
    epoch: int                       # 0 = after pretraining, before joint training
    phase: str                       # "pretrain" | "joint"
    config: TrainConfig
    history: list = field(default_factory=list)
    model_cfg: ModelConfig | None = None


def save_checkpoint(path: Path | str, ckpt: Checkpoint) -> None:
    path = Path(path)
    payload = {"version": CKPT_VERSION, "model_state": ckpt.model_state,
               "optimizer_state": ckpt.optimizer_state, "epoch": ckpt.epoch,
               "phase": ckpt.phase, "config": ckpt.config.to_dict(),
               "history": ckpt.history,
               "model_cfg": asdict(ckpt.model_cfg) if ckpt.model_cfg else None}
    torch.save(payload, path)
    manifest = {"version": CKPT_VERSION, "epoch": ckpt.epoch, "phase": ckpt.phase,
                "seed": ckpt.config.seed, "config": ckpt.config.to_dict(),
                "last_history": ckpt.history[-1] if ckpt.history else None}
    with open(path.with_suffix(".manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, weights_only=False)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    version = payload.get("version") if isinstance(payload, dict) else None
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version mismatch: expected {CKPT_VERSION}, "
                              f"got {version!r}")
    return Checkpoint(model_state=payload["model_state"],
                      optimizer_state=payload["optimizer_state"],
                      epoch=payload["epoch"], phase=payload["phase"],
                      config=TrainConfig.from_dict(payload["config"]),
                      history=payload["history"],
                      model_cfg=_model_cfg_from_dict(payload.get("model_cfg")))


def _model_cfg_from_dict(d: dict | None) -> ModelConfig | None:
    if d is None:
        return None
    d = dict(d)
    d["image_hw"] = tuple(d["image_hw"])
    d["channels"] = tuple(d["channels"])
    return ModelConfig(**d)


def pk_sample_batch(images: list[LabeledImage], P: int, K: int,
                    rng: np.random.Generator) -> tuple[list[LabeledImage], np.random.Generator]:
    """Sample P distinct identities with exactly K instances each.

    Identities with fewer than K images are sampled with replacement. The
    generator advances in place and is returned for chaining.
    """
    by_id: dict[int, list[int]] = {}
    for i, img in enumerate(images):
        by_id.setdefault(img.identity, []).append(i)
    ids = sorted(by_id)
    if len(ids) < P:
        raise ValueError(f"need >= {P} identities, dataset has {len(ids)}")
    chosen = rng.choice(len(ids), size=P, replace=False)
    batch = []
    for c in chosen:
        pool = by_id[ids[int(c)]]
        picks = rng.choice(len(pool), size=K, replace=len(pool) < K)
        batch.extend(images[pool[int(j)]] for j in picks)
    return batch, rng


def _to_tensors(images: list[LabeledImage], label_map: dict[int, int],
                dtype: torch.dtype) -> dict[str, torch.Tensor]:
    pixels = torch.from_numpy(np.stack([im.pixels for im in images])).to(dtype)
    labels = torch.tensor([label_map[im.identity] for im in images], dtype=torch.long)
    flags = torch.tensor([im.occluded_flag for im in images], dtype=torch.bool)
    return {"pixels": pixels, "labels": labels, "flags": flags}


def _erase_batch(images: list[LabeledImage], params: ErasingParams,
                 rng: np.random.Generator) -> list[LabeledImage]:
    return [apply_random_erasing(im, params, int(rng.integers(2 ** 62)))
            for im in images]


def _check_finite(breakdown: LossBreakdown) -> None:
    for name, value in breakdown.to_dict().items():
        if math.isnan(value):
            raise FloatingPointError(f"NaN in loss component '{name}'")


def compute_losses(model: ReidModel,
                   teacher_batch: dict[str, torch.Tensor],
                   student_batch: dict[str, torch.Tensor],
                   weights: LossWeights, kernel: KernelConfig,
                   use_global: bool = True,
                   freeze_attention: bool = False) -> tuple[torch.Tensor, LossBreakdown]:
    """Forward both domains through the shared encoder and assemble the total loss.

    Batches carry "noisy" inputs (erased), "clean" reconstruction targets,
    "labels" and occlusion "flags". Terms with zero weight are skipped so a
    reduced objective takes exactly the same gradient path as a hand-built one.
    Teacher features are detached inside the DCD loss.
    """
    b = LossBreakdown()
    zero = torch.zeros((), dtype=teacher_batch["noisy"].dtype)

    t_out = model.forward_teacher(teacher_batch["noisy"])
    s_out = model.forward_student(student_batch["noisy"], freeze_attention=freeze_attention)

    ce_n = parts_ce_loss(t_out["logits"], teacher_batch["labels"])
    ce_o = parts_ce_loss(s_out["logits"], student_batch["labels"])
    if weights.lambda_recon > 0:
        rec_n = recon_loss(teacher_batch["clean"], t_out["recon"])
        rec_o = recon_loss(student_batch["clean"], s_out["recon"])
    else:
        rec_n = rec_o = zero
    jn = joint_loss(ce_n, rec_n, weights)
    jo = joint_loss(ce_o, rec_o, weights)

    if weights.alpha < 1.0 and (weights.lambda1 > 0 or weights.lambda2 > 0
                                or weights.lambda3 > 0):
        l_d, parts_bd = dcd_loss(t_out["parts"], teacher_batch["labels"],
                                 s_out["attended"], student_batch["labels"],
                                 kernel, weights, student_raw_parts=s_out["parts"],
                                 use_global=use_global)
    else:
        l_d = zero
        parts_bd = {"l_d_wc": zero, "l_d_bc": zero, "l_global": zero}

    if weights.occ_cls_weight > 0:
        # Teacher batch only: its erasing probability leaves it roughly
        # half-and-half, whereas the student batch is all-occluded and would
        # teach the classifier the class prior instead of occludedness.
        occ_logits = model.occlusion_head(global_pool(t_out["fmap"]))
        occ = occlusion_bce(occ_logits, teacher_batch["flags"])
    else:
        occ = zero

    total = total_loss(jn, jo, l_d, occ, weights)

    b.ce_teacher, b.ce_student = ce_n.item(), ce_o.item()
    b.recon_teacher, b.recon_student = rec_n.item(), rec_o.item()
    b.joint_teacher, b.joint_student = jn.item(), jo.item()
    b.l_d_wc, b.l_d_bc = parts_bd["l_d_wc"].item(), parts_bd["l_d_bc"].item()
    b.l_global, b.l_d = parts_bd["l_global"].item(), l_d.item()
    b.occ_bce, b.total = occ.item(), total.item()
    return total, b


def train_step(model: ReidModel, optimizer: torch.optim.Optimizer,
               teacher_batch: dict[str, torch.Tensor],
               student_batch: dict[str, torch.Tensor],
               weights: LossWeights, kernel: KernelConfig,
               use_global: bool = True,
               freeze_attention: bool = False) -> LossBreakdown:
    """One Adam update of all trainable parameters; aborts on the first NaN
    loss component."""
    total, b = compute_losses(model, teacher_batch, student_batch, weights,
                              kernel, use_global=use_global,
                              freeze_attention=freeze_attention)
    _check_finite(b)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return b


class _Run:
    """Shared state for one training run (datasets, model, log file)."""

    def __init__(self, config: TrainConfig, out_dir: Path):
        config.validate()
        self.config = config
        self.out_dir = out_dir
        if config.strict_deterministic:
            torch.set_num_threads(1)

        self.train_images = read_split(Path(config.train_dir).parent,
                                       Path(config.train_dir).name)
        if not self.train_images:
            raise ConfigError(f"empty training set in {config.train_dir}")
        teacher_ids = sorted({im.identity for im in self.train_images})
        if config.mode == "sup":
            self.occ_images = read_split(Path(config.occluded_train_dir).parent,
                                         Path(config.occluded_train_dir).name)
            if not self.occ_images:
                raise ConfigError(f"empty occluded set in {config.occluded_train_dir}")
            student_ids = sorted({im.identity for im in self.occ_images})
        else:
            self.occ_images = self.train_images
            student_ids = teacher_ids
        self.teacher_map = {y: i for i, y in enumerate(teacher_ids)}
        self.student_map = {y: i for i, y in enumerate(student_ids)}
        self.model_cfg = config.model_config(len(teacher_ids), len(student_ids))
        self.model_cfg.validate()
        self.steps_per_epoch = max(1, len(self.train_images) // (config.P * config.K))
        self.teacher_erase = replace(config.erase, probability=config.teacher_erase_prob)

    def teacher_batch(self, epoch: int, step: int, phase: int) -> dict[str, torch.Tensor]:
        cfg = self.config
        rng = np.random.default_rng((cfg.seed, phase, epoch, step, 1))
        imgs, _ = pk_sample_batch(self.train_images, cfg.P, cfg.K, rng)
        noisy = _erase_batch(imgs, self.teacher_erase, rng)
        batch = _to_tensors(noisy, self.teacher_map, cfg.torch_dtype)
        batch["noisy"] = batch.pop("pixels")
        batch["clean"] = _to_tensors(imgs, self.teacher_map, cfg.torch_dtype)["pixels"]
        return batch

    def student_batch(self, epoch: int, step: int, phase: int) -> dict[str, torch.Tensor]:
        cfg = self.config
        rng = np.random.default_rng((cfg.seed, phase, epoch, step, 2))
        imgs, _ = pk_sample_batch(self.occ_images, cfg.P, cfg.K, rng)
        if cfg.mode == "unsup":
            noisy = _erase_batch(imgs, cfg.erase, rng)
        else:
            # real occluded images: light erasing acts as denoising noise only
            noisy = _erase_batch(imgs, self.teacher_erase, rng)
        batch = _to_tensors(noisy, self.student_map, cfg.torch_dtype)
        batch["noisy"] = batch.pop("pixels")
        batch["clean"] = _to_tensors(imgs, self.student_map, cfg.torch_dtype)["pixels"]
        return batch


def pretrain_teacher(config: TrainConfig, out_dir: Path | str | None = None,
                     model: ReidModel | None = None,
                     log_lines: list | None = None) -> Checkpoint:
    """Optimize the teacher joint loss (CE + recon) only.

    The attention embedding, student classifiers and occlusion head are not in
    the optimizer and stay bitwise at their initialization.
    """
    run = _Run(config, Path(out_dir) if out_dir else Path("."))
    if model is None:
        model = build_model(run.model_cfg, config.seed, config.torch_dtype)
    model.train()
    params = (list(model.encoder.parameters()) + list(model.decoder.parameters())
              + list(model.teacher_heads.parameters()))
    opt = torch.optim.Adam(params, lr=config.lr)
    history = []
    for epoch in range(1, config.epochs_pretrain + 1):
        epoch_losses = []
        for step in range(run.steps_per_epoch):
            tb = run.teacher_batch(epoch, step, phase=0)
            out = model.forward_teacher(tb["noisy"])
            ce = parts_ce_loss(out["logits"], tb["labels"])
            rec = recon_loss(tb["clean"], out["recon"])
            loss = joint_loss(ce, rec, config.weights)
            if math.isnan(loss.item()):
                raise FloatingPointError("NaN in pretraining joint loss")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            line = {"phase": "pretrain", "epoch": epoch, "step": step,
                    "ce_teacher": ce.item(), "recon_teacher": rec.item(),
                    "joint_teacher": loss.item()}
            epoch_losses.append(loss.item())
            if log_lines is not None:
                log_lines.append(line)
        history.append({"phase": "pretrain", "epoch": epoch,
                        "mean_joint_teacher": float(np.mean(epoch_losses))})
    return Checkpoint(model_state=model.state_dict(), optimizer_state=None,
                      epoch=0, phase="pretrain", config=config, history=history,
                      model_cfg=run.model_cfg)


def _dcd_diagnostic(model: ReidModel, run: _Run, num_batches: int = 6) -> dict:
    """Within/between overlap of attended occluded features on fixed batches."""
    cfg = run.config
    model.eval()
    within, between = [], []
    with torch.no_grad():
        for k in range(num_batches):
            rng = np.random.default_rng((cfg.seed, 0xDCD, k))
            imgs, _ = pk_sample_batch(run.occ_images, cfg.P, cfg.K, rng)
            if cfg.mode == "unsup":
                imgs = _erase_batch(imgs, cfg.erase, rng)
            batch = _to_tensors(imgs, run.student_map, cfg.torch_dtype)
            out = model.forward_student(batch["pixels"],
                                        freeze_attention=cfg.freeze_attention)
            for pair in pairwise_part_distances(out["attended"], batch["labels"]):
                within.append(pair.within)
                between.append(pair.between)
    model.train()
    w = torch.cat(within)
    b = torch.cat(between)
    return {"dcd_overlap": evalkit.dcd_overlap(w, b),
            "mean_within": w.mean().item(), "mean_between": b.mean().item()}


def _retrieval_eval(model: ReidModel, config: TrainConfig) -> dict | None:
    if not (config.query_dir and config.gallery_dir):
        return None
    q = read_split(Path(config.query_dir).parent, Path(config.query_dir).name)
    g = read_split(Path(config.gallery_dir).parent, Path(config.gallery_dir).name)
    dt = config.torch_dtype
    q_sig = extract_all(model, q, dt)
    g_sig = extract_all(model, g, dt)
    dist = evalkit.distance_matrix(q_sig, g_sig).numpy()
    rep = evalkit.cmc_map(dist, [i.identity for i in q], [i.camera for i in q],
                          [i.identity for i in g], [i.camera for i in g])
    return {"rank1": rep.cmc[0], "rank5": rep.cmc[min(4, len(rep.cmc) - 1)],
            "map": rep.map}


def extract_all(model: ReidModel, images: list[LabeledImage],
                dtype: torch.dtype, batch_size: int = 64) -> torch.Tensor:
    sigs = []
    for i in range(0, len(images), batch_size):
        px = torch.from_numpy(np.stack([im.pixels for im in images[i:i + batch_size]])).to(dtype)
        sigs.append(evalkit.extract_signatures(model, px))
    return torch.cat(sigs)


def train(config: TrainConfig, out_dir: Path | str,
          resume: Path | str | None = None) -> Checkpoint:
    """Full run: pretrain (unless resuming) then joint training with checkpoints.

    Writes config.json, log.jsonl and ckpt_<epoch>.bin(+manifest) under out_dir.
    """
    out = Path(out_dir)
    run = _Run(config, out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
    log_f = open(out / "log.jsonl", "w")

    def log_line(d: dict) -> None:
        log_f.write(json.dumps(d, sort_keys=True) + "\n")
        log_f.flush()

    try:
        model = build_model(run.model_cfg, config.seed, config.torch_dtype)
        if resume is not None:
            ckpt = load_checkpoint(resume)
            model.load_state_dict(ckpt.model_state)
            optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
            if ckpt.optimizer_state is not None:
                optimizer.load_state_dict(ckpt.optimizer_state)
            start_epoch = ckpt.epoch
            history = list(ckpt.history)
        else:
            lines: list = []
            pre = pretrain_teacher(config, out, model=model, log_lines=lines)
            for line in lines:
                log_line(line)
            history = list(pre.history)
            optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
            start_epoch = 0
            diag = _dcd_diagnostic(model, run)
            entry = {"phase": "joint", "epoch": 0, **diag}
            ev = _retrieval_eval(model, config)
            if ev:
                entry.update(ev)
            history.append(entry)
            log_line(entry)
            save_checkpoint(out / "ckpt_0.bin",
                            Checkpoint(model.state_dict(), optimizer.state_dict(),
                                       0, "joint", config, history, run.model_cfg))

        model.train()
        ckpt = Checkpoint(model.state_dict(), optimizer.state_dict(), start_epoch,
                          "joint", config, history, run.model_cfg)
        for epoch in range(start_epoch + 1, config.epochs_joint + 1):
            totals = []
            for step in range(run.steps_per_epoch):
                tb = run.teacher_batch(epoch, step, phase=1)
                sb = run.student_batch(epoch, step, phase=1)
                bd = train_step(model, optimizer, tb, sb, config.weights,
                                config.kernel, use_global=config.use_global_loss,
                                freeze_attention=config.freeze_attention)
                log_line({"phase": "joint", "epoch": epoch, "step": step,
                          **bd.to_dict()})
                totals.append(bd.total)
            entry = {"phase": "joint", "epoch": epoch,
                     "mean_total": float(np.mean(totals))}
            if config.eval_every > 0 and (epoch % config.eval_every == 0
                                          or epoch == config.epochs_joint):
                entry.update(_dcd_diagnostic(model, run))
                ev = _retrieval_eval(model, config)
                if ev:
                    entry.update(ev)
            history.append(entry)
            log_line(entry)
            ckpt = Checkpoint(model.state_dict(), optimizer.state_dict(), epoch,
                              "joint", config, history, run.model_cfg)
            save_checkpoint(out / f"ckpt_{epoch}.bin", ckpt)
        return ckpt
    finally:
        log_f.close()
