"""Scalar training losses and their composition into the total objective."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    lambda_recon: float = 0.01
    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda3: float = 1.0
    alpha: float = 0.5
    occ_cls_weight: float = 0.1

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0,1], got {self.alpha}")
        for name in ("lambda_recon", "lambda1", "lambda2", "lambda3", "occ_cls_weight"):
            v = getattr(self, name)
            if not (v >= 0.0 and v == v and abs(v) != float("inf")):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    """Per-step diagnostic decomposition; all plain floats for JSON logging."""

    ce_teacher: float = 0.0
    ce_student: float = 0.0
    recon_teacher: float = 0.0
    recon_student: float = 0.0
    joint_teacher: float = 0.0
    joint_student: float = 0.0
    l_d_wc: float = 0.0
    l_d_bc: float = 0.0
    l_global: float = 0.0
    l_d: float = 0.0
    occ_bce: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def parts_ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy, mean over the batch per part, summed over parts."""
    if logits.dim() != 3:
        raise ValueError(f"expected (B, p, num_classes) logits, got {tuple(logits.shape)}")
    B, p, n_cls = logits.shape
    labels = torch.as_tensor(labels)
    if labels.min() < 0 or labels.max() >= n_cls:
        raise ValueError(f"labels out of range [0, {n_cls})")
    return sum(F.cross_entropy(logits[:, i], labels) for i in range(p))


def recon_loss(original: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    """Mean absolute reconstruction error against the clean pre-erasing image."""
    if original.shape != reconstructed.shape:
        raise ValueError(f"shape mismatch: {tuple(original.shape)} vs "
                         f"{tuple(reconstructed.shape)}")
    return (original - reconstructed).abs().mean()


def joint_loss(ce: torch.Tensor, recon: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """Joint generative-discriminative loss for one domain: ce + lambda*recon."""
    return ce + weights.lambda_recon * recon


def occlusion_bce(logits: torch.Tensor, occluded_flags: torch.Tensor) -> torch.Tensor:
    """Mean sigmoid binary cross-entropy for the occluded-vs-clean head."""
    flags = torch.as_tensor(occluded_flags).to(logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, flags)


def total_loss(joint_n: torch.Tensor, joint_o: torch.Tensor, l_d: torch.Tensor,
               occ_bce: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """alpha * (joint_N + joint_O) + (1 - alpha) * L_D + occ_weight * BCE.

    The occlusion term sits outside the convex pair so it can be switched off
    without disturbing the alpha trade-off.
    """
    return (weights.alpha * (joint_n + joint_o)
            + (1.0 - weights.alpha) * l_d
            + weights.occ_cls_weight * occ_bce)
