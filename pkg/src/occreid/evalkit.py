"""Test-time feature extraction, retrieval metrics and DCD diagnostics.

Only the student path is used at test time: the signature is the global
pooled feature concatenated with all attended part features. Matching
follows the standard single-gallery-shot protocol: gallery entries sharing
the query's identity and camera are excluded before ranking.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .model import ReidModel, global_pool, part_pool, apply_attention

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    cmc: list[float]
    map: float
    per_query_rank: list[int]          # rank of first correct match, 1-based (-1 if skipped)
    metric: str = "euclidean"
    cam_exclusion: bool = True
    num_skipped_queries: int = 0
    dcd_overlap: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def extract_signatures(model: ReidModel, images: torch.Tensor) -> torch.Tensor:
    """Signatures (B, C*(1+p)): [global pool ; attended part features].

    Inference mode: batch-norm running statistics, no augmentation, decoder
    not invoked.
    """
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            fmap = model.encode(images)
            gfeat = global_pool(fmap)
            parts = part_pool(fmap, model.cfg.parts)
            attended = apply_attention(parts, model.attention(parts))
            B = images.shape[0]
            return torch.cat([gfeat, attended.reshape(B, -1)], dim=1)
    finally:
        if was_training:
            model.train()


def distance_matrix(query: torch.Tensor, gallery: torch.Tensor,
                    metric: str = "euclidean") -> torch.Tensor:
    """Q x G distances; euclidean L2 or cosine distance 1 - cos."""
    if query.shape[1] != gallery.shape[1]:
        raise ValueError(f"width mismatch: {query.shape[1]} vs {gallery.shape[1]}")
    if metric == "euclidean":
        sq = (query.pow(2).sum(1)[:, None] + gallery.pow(2).sum(1)[None, :]
              - 2.0 * query @ gallery.t())
        return torch.sqrt(sq.clamp_min(0.0))
    if metric == "cosine":
        qn = query.norm(dim=1)
        gn = gallery.norm(dim=1)
        for name, norms in (("query", qn), ("gallery", gn)):
            bad = torch.nonzero(norms == 0)
            if bad.numel():
                raise ValueError(f"zero {name} vector at index {int(bad[0])} under cosine metric")
        return 1.0 - (query / qn[:, None]) @ (gallery / gn[:, None]).t()
    raise ValueError(f"unknown metric {metric!r}")


def cmc_map(dist: np.ndarray, query_labels, query_cams, gallery_labels, gallery_cams,
            cam_exclusion: bool = True, metric: str = "euclidean",
            exclude_self: np.ndarray | None = None) -> EvalReport:
    """CMC curve and mAP under the single-shot retrieval protocol.

    Ties are broken by gallery index so rankings are deterministic. Queries
    left with no valid match after exclusion are skipped (with a logged count).
    `exclude_self[q]` optionally names one gallery index to drop for query q
    (used when gallery == query).
    """
    dist = np.asarray(dist, dtype=np.float64)
    q_ids = np.asarray(query_labels)
    q_cams = np.asarray(query_cams)
    g_ids = np.asarray(gallery_labels)
    g_cams = np.asarray(gallery_cams)
    Q, G = dist.shape

    cmc_acc = np.zeros(G)
    aps = []
    ranks = []
    skipped = 0
    for q in range(Q):
        valid = np.ones(G, dtype=bool)
        if cam_exclusion:
            valid &= ~((g_ids == q_ids[q]) & (g_cams == q_cams[q]))
        if exclude_self is not None and exclude_self[q] >= 0:
            valid[exclude_self[q]] = False
        idx = np.nonzero(valid)[0]
        rel = g_ids[idx] == q_ids[q]
        if not rel.any():
            skipped += 1
            ranks.append(-1)
            continue
        order = np.lexsort((idx, dist[q, idx]))
        rel = rel[order]
        first = int(np.argmax(rel))
        ranks.append(first + 1)
        cmc_acc[first:] += 1.0
        hits = np.cumsum(rel)
        precision = hits / (np.arange(rel.size) + 1.0)
        aps.append(float((precision * rel).sum() / rel.sum()))

    n_eval = Q - skipped
    if n_eval == 0:
        raise ValueError("no query has a valid gallery match after exclusion")
    if skipped:
        log.warning("cmc_map: skipped %d/%d queries with no valid gallery match", skipped, Q)
    return EvalReport(cmc=(cmc_acc / n_eval).tolist(), map=float(np.mean(aps)),
                      per_query_rank=ranks, metric=metric,
                      cam_exclusion=cam_exclusion, num_skipped_queries=skipped)


def dcd_overlap(within, between, num_bins: int = 50) -> float:
    """Histogram intersection of the two distance distributions, in [0, 1].

    Shared equal-width bins span [min, max] of the pooled samples; a
    degenerate zero-width range counts as full overlap.
    """
    w = np.asarray(torch.as_tensor(within).detach().cpu(), dtype=np.float64).reshape(-1)
    b = np.asarray(torch.as_tensor(between).detach().cpu(), dtype=np.float64).reshape(-1)
    if w.size == 0 or b.size == 0:
        raise ValueError("dcd_overlap requires non-empty sample lists")
    if num_bins < 1:
        raise ValueError(f"num_bins must be >= 1, got {num_bins}")
    lo = min(w.min(), b.min())
    hi = max(w.max(), b.max())
    if hi == lo:
        return 1.0
    hw, edges = np.histogram(w, bins=num_bins, range=(lo, hi))
    hb, _ = np.histogram(b, bins=num_bins, range=(lo, hi))
    return float(np.minimum(hw / w.size, hb / b.size).sum())


def export_figures(out_dir: Path | str, report: EvalReport,
                   dcd_samples: dict[str, tuple[np.ndarray, np.ndarray]] | None = None,
                   attention_maps: np.ndarray | None = None,
                   sample_images: np.ndarray | None = None,
                   num_bins: int = 50) -> list[Path]:
    """Write CMC/DCD figures plus CSV/JSON sidecars of every plotted number.

    dcd_samples maps a domain name to (within, between) arrays. attention_maps
    is (N, p) per-part attention magnitudes rendered as horizontal bands over
    the matching sample_images (N, H, W, 3).
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    with open(out / "report.json", "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    written.append(out / "report.json")

    with open(out / "cmc.csv", "w", newline="") as f:
        wcsv = csv.writer(f)
        wcsv.writerow(["rank", "accuracy"])
        for k, v in enumerate(report.cmc, start=1):
            wcsv.writerow([k, repr(v)])
    written.append(out / "cmc.csv")

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(np.arange(1, len(report.cmc) + 1), report.cmc)
    ax.set_xlabel("rank k")
    ax.set_ylabel("CMC@k")
    ax.set_ylim(0, 1.02)
    fig.savefig(out / "cmc.png", dpi=100)
    plt.close(fig)
    written.append(out / "cmc.png")

    if dcd_samples:
        rows = []
        fig, axes = plt.subplots(1, len(dcd_samples), figsize=(5 * len(dcd_samples), 4),
                                 squeeze=False)
        for ax, (domain, (w, b)) in zip(axes[0], dcd_samples.items()):
            w = np.asarray(w).reshape(-1)
            b = np.asarray(b).reshape(-1)
            lo = min(w.min(), b.min())
            hi = max(w.max(), b.max())
            bins = np.linspace(lo, hi, num_bins + 1) if hi > lo else num_bins
            ax.hist(w, bins=bins, alpha=0.6, label="within", density=True)
            ax.hist(b, bins=bins, alpha=0.6, label="between", density=True)
            ax.set_title(domain)
            ax.legend()
            rows += [(i, domain, "wc", repr(float(v))) for i, v in enumerate(w)]
            rows += [(i, domain, "bc", repr(float(v))) for i, v in enumerate(b)]
        fig.savefig(out / "dcd_hist.png", dpi=100)
        plt.close(fig)
        written.append(out / "dcd_hist.png")
        with open(out / "dcd.csv", "w", newline="") as f:
            wcsv = csv.writer(f)
            wcsv.writerow(["index", "domain", "kind", "distance"])
            wcsv.writerows(rows)
        written.append(out / "dcd.csv")

    if attention_maps is not None and sample_images is not None:
        att = np.asarray(attention_maps)
        n, p = att.shape
        fig, axes = plt.subplots(2, n, figsize=(1.6 * n, 6), squeeze=False)
        for j in range(n):
            axes[0][j].imshow(sample_images[j])
            axes[0][j].axis("off")
            # one horizontal band per part, stretched to image height
            band = np.repeat(att[j][:, None], sample_images[j].shape[1], axis=1)
            axes[1][j].imshow(band, aspect="auto", cmap="viridis", vmin=0, vmax=1)
            axes[1][j].axis("off")
        fig.savefig(out / "attention.png", dpi=100)
        plt.close(fig)
        written.append(out / "attention.png")

    return written
