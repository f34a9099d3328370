"""Command-line entry point: gen-data, pretrain, train, eval, analyze-dcd.

One reproducible workflow: every command is deterministic given the config
and seed, validates its configuration before touching disk, and exits with
0 on success, 2 on config errors, 3 on runtime/numeric errors, 4 on IO errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import evalkit, synthdata
from .dcdmmd import mmd, pairwise_part_distances
from .model import ReidModel
from .synthdata import DatasetParseError, apply_random_erasing
from .trainer import (CheckpointError, ConfigError, TrainConfig, extract_all,
                      load_checkpoint, pretrain_teacher, save_checkpoint, train)


@dataclass(frozen=True)
class RunConfig:
    """Full run configuration: data generation + training + eval options."""

    # synthetic dataset
    num_identities: int = 50
    images_per_id_train: int = 20
    images_per_id_gallery: int = 5
    images_per_id_query: int = 5
    num_cameras: int = 3
    # occlusion of the generated query split (unsup mode): heavier than the
    # training-time erasing and with a different fill, so test-time occluders
    # are statistics the model never trained on
    query_erase_area: tuple[float, float] = (0.45, 0.65)
    query_erase_fill: str = "uniform-random"
    query_erase_aspect: tuple[float, float] = (0.3, 3.33)
    # eval options
    metric: str = "euclidean"
    num_bins: int = 50
    # training
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if self.num_identities < 2:
            raise ConfigError(f"num_identities must be >= 2, got {self.num_identities}")
        for name in ("images_per_id_train", "images_per_id_gallery",
                     "images_per_id_query", "num_cameras"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.metric not in ("euclidean", "cosine"):
            raise ConfigError(f"metric must be euclidean or cosine, got {self.metric!r}")
        if self.num_bins < 1:
            raise ConfigError("num_bins must be >= 1")
        lo, hi = self.query_erase_area
        if not (0.0 < lo <= hi < 1.0):
            raise ConfigError(f"bad query_erase_area {self.query_erase_area}")
        if self.query_erase_fill not in ("uniform-random", "mean-value"):
            raise ConfigError(f"bad query_erase_fill {self.query_erase_fill!r}")
        alo, ahi = self.query_erase_aspect
        if not (0.0 < alo <= ahi):
            raise ConfigError(f"bad query_erase_aspect {self.query_erase_aspect}")
        if self.train.P > self.num_identities:
            raise ConfigError(f"P={self.train.P} exceeds num_identities={self.num_identities}")
        self.train.validate()


def load_run_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """Parse the JSON config file; unknown keys are rejected."""
    doc = {}
    if path is not None:
        try:
            with open(path) as f:
                doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if overrides:
        doc.update({k: v for k, v in overrides.items() if v is not None})

    top_names = {f.name for f in fields(RunConfig)} - {"train"}
    train_names = {f.name for f in fields(TrainConfig)}
    unknown = set(doc) - top_names - train_names - {"train"}
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")

    train_doc = dict(doc.pop("train", {}))
    bad = set(train_doc) - train_names
    if bad:
        raise ConfigError(f"unknown train config key(s): {sorted(bad)}")
    for k in list(doc):
        if k in train_names:
            train_doc[k] = doc.pop(k)
    for key in ("query_erase_area", "query_erase_aspect"):
        if key in doc:
            doc[key] = tuple(doc[key])
    try:
        cfg = RunConfig(**doc, train=TrainConfig.from_dict(train_doc))
    except TypeError as e:
        raise ConfigError(str(e)) from e
    cfg.validate()
    return cfg


def _runs_dir(out: str | None) -> Path:
    if out:
        return Path(out)
    return Path(os.environ.get("HG_RUNS_DIR", "runs")) / "run"


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config, {"seed": args.seed} if args.seed is not None else {})
    query_erase = replace(cfg.train.erase, area_range=tuple(cfg.query_erase_area),
                          fill_mode=cfg.query_erase_fill,
                          aspect_range=tuple(cfg.query_erase_aspect))
    out = Path(args.out)
    seed = cfg.train.seed
    atlas = synthdata.generate_atlas(cfg.num_identities, seed)

    counts = {}
    index = 0
    splits = {"train": cfg.images_per_id_train, "gallery": cfg.images_per_id_gallery,
              "query": cfg.images_per_id_query}
    for split, per_id in splits.items():
        images = []
        for ident in range(cfg.num_identities):
            for j in range(per_id):
                camera = 1 + (j + (split == "query")) % cfg.num_cameras
                img = synthdata.render_sample(atlas, ident, camera,
                                              jitter_seed=index)
                if split == "query" and cfg.train.mode == "unsup":
                    img = apply_random_erasing(img, query_erase, seed=index)
                images.append(img)
                index += 1
        synthdata.write_split(out, split, images)
        counts[split] = len(images)
    print(f"wrote {counts['train']} train / {counts['query']} query / "
          f"{counts['gallery']} gallery images for {cfg.num_identities} identities "
          f"to {out}")
    return 0


def _train_overrides(args) -> dict:
    o = {"seed": args.seed, "mode": args.mode,
         "occluded_train_dir": args.occluded_train,
         "epochs_pretrain": args.epochs_pretrain,
         "epochs_joint": args.epochs_joint}
    if args.strict_deterministic:
        o["strict_deterministic"] = True
    return o


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config, _train_overrides(args))
    out = _runs_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = pretrain_teacher(cfg.train, out)
    save_checkpoint(out / "ckpt_pretrain.bin", ckpt)
    print(f"pretrained teacher for {cfg.train.epochs_pretrain} epochs -> "
          f"{out / 'ckpt_pretrain.bin'}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, _train_overrides(args))
    out = _runs_dir(args.out)
    ckpt = train(cfg.train, out, resume=args.resume)
    print(f"trained to epoch {ckpt.epoch}; run directory: {out}")
    return 0


def _load_model(ckpt_path: str) -> tuple[ReidModel, "TrainConfig"]:
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.model_cfg is None:
        raise CheckpointError(f"checkpoint {ckpt_path} carries no model config")
    model = ReidModel(ckpt.model_cfg).to(ckpt.config.torch_dtype)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model, ckpt.config


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, {}) if args.config else RunConfig()
    metric = args.metric or cfg.metric
    model, tcfg = _load_model(args.ckpt)
    q_root, q_split = Path(args.query).parent, Path(args.query).name
    g_root, g_split = Path(args.gallery).parent, Path(args.gallery).name
    q = synthdata.read_split(q_root, q_split)
    g = synthdata.read_split(g_root, g_split)

    q_sig = extract_all(model, q, tcfg.torch_dtype)
    g_sig = extract_all(model, g, tcfg.torch_dtype)
    dist = evalkit.distance_matrix(q_sig, g_sig, metric=metric).numpy()

    exclude_self = None
    same_dir = Path(args.query).resolve() == Path(args.gallery).resolve()
    if same_dir and not args.allow_self:
        exclude_self = np.arange(len(q))
    report = evalkit.cmc_map(dist, [i.identity for i in q], [i.camera for i in q],
                             [i.identity for i in g], [i.camera for i in g],
                             cam_exclusion=not args.no_cam_exclusion, metric=metric,
                             exclude_self=exclude_self)
    out = _runs_dir(args.out)
    evalkit.export_figures(out, report, num_bins=cfg.num_bins)
    cmc = report.cmc
    r = lambda k: cmc[min(k - 1, len(cmc) - 1)]
    print(f"R1={r(1):.4f} R5={r(5):.4f} R10={r(10):.4f} mAP={report.map:.4f}")
    return 0


def cmd_analyze_dcd(args) -> int:
    cfg = load_run_config(args.config, {}) if args.config else RunConfig()
    model, tcfg = _load_model(args.ckpt)
    holistic = synthdata.read_split(Path(args.holistic).parent, Path(args.holistic).name)
    if args.occluded:
        occluded = synthdata.read_split(Path(args.occluded).parent, Path(args.occluded).name)
    else:
        occluded = [apply_random_erasing(im, tcfg.erase, seed=i)
                    for i, im in enumerate(holistic)]

    def features(images):
        px = torch.from_numpy(np.stack([im.pixels for im in images])).to(tcfg.torch_dtype)
        labels = torch.tensor([im.identity for im in images])
        with torch.no_grad():
            out = model.forward_student(px)
        return out, labels

    def pooled_dcd(parts, labels, domain):
        pairs = pairwise_part_distances(parts, labels, domain=domain)
        return (torch.cat([p.within for p in pairs]),
                torch.cat([p.between for p in pairs]), pairs)

    h_out, h_labels = features(holistic)
    o_out, o_labels = features(occluded)
    h_w, h_b, h_pairs = pooled_dcd(h_out["parts"], h_labels, "holistic")
    or_w, or_b, _ = pooled_dcd(o_out["parts"], o_labels, "occluded_raw")
    oa_w, oa_b, oa_pairs = pooled_dcd(o_out["attended"], o_labels, "occluded_attended")

    kernel = tcfg.kernel
    summary = {
        "overlap_holistic": evalkit.dcd_overlap(h_w, h_b, cfg.num_bins),
        "overlap_occluded_raw": evalkit.dcd_overlap(or_w, or_b, cfg.num_bins),
        "overlap_occluded_attended": evalkit.dcd_overlap(oa_w, oa_b, cfg.num_bins),
        "mmd_wc": mmd(h_w, oa_w, kernel).item(),
        "mmd_bc": mmd(h_b, oa_b, kernel).item(),
    }

    out = _runs_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "dcd_summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    with open(out / "dcd.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["part", "domain", "kind", "distance"])
        for domain, pairs in (("holistic", h_pairs), ("occluded_attended", oa_pairs)):
            for pair in pairs:
                for v in pair.within.tolist():
                    w.writerow([pair.part, domain, "wc", repr(v)])
                for v in pair.between.tolist():
                    w.writerow([pair.part, domain, "bc", repr(v)])

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, axes = plt.subplots(1, 3, figsize=(14, 4))
    for ax, (name, w_, b_) in zip(axes, [("holistic", h_w, h_b),
                                         ("occluded raw", or_w, or_b),
                                         ("occluded attended", oa_w, oa_b)]):
        ax.hist(w_.numpy(), bins=cfg.num_bins, alpha=0.6, label="within", density=True)
        ax.hist(b_.numpy(), bins=cfg.num_bins, alpha=0.6, label="between", density=True)
        ax.set_title(name)
        ax.legend()
    fig.savefig(out / "dcd_hist.png", dpi=100)
    plt.close(fig)

    print(json.dumps(summary, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="occreid",
                                 description="occlusion-robust re-identification pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset splits")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    for name, func in (("pretrain", cmd_pretrain), ("train", cmd_train)):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--mode", choices=["unsup", "sup"], default=None)
        p.add_argument("--occluded-train", default=None)
        p.add_argument("--epochs-pretrain", type=int, default=None)
        p.add_argument("--epochs-joint", type=int, default=None)
        p.add_argument("--resume", default=None)
        p.add_argument("--strict-deterministic", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="retrieval evaluation of a checkpoint")
    common(p)
    p.add_argument("ckpt")
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--metric", choices=["euclidean", "cosine"], default=None)
    p.add_argument("--no-cam-exclusion", action="store_true")
    p.add_argument("--allow-self", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-dcd", help="distance-distribution diagnostics")
    common(p)
    p.add_argument("ckpt")
    p.add_argument("--holistic", required=True)
    p.add_argument("--occluded", default=None)
    p.set_defaults(func=cmd_analyze_dcd)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DatasetParseError, CheckpointError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return 4
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 4
    except (ValueError, FloatingPointError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
