"""Forward components: shared encoder/decoder, part pooling, attention gate,
per-part identity classifiers and the binary occlusion classifier.

Images cross the API boundary as (B, H, W, 3) float tensors in [0, 1];
feature maps are (B, C, h, w). All modules are plain torch so gradients and
determinism come for free.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class ModelConfig:
    image_hw: tuple[int, int] = (64, 32)
    channels: tuple[int, ...] = (32, 64, 128, 128)  # last entry is C
    parts: int = 4
    reduction: int = 4
    num_classes_teacher: int = 2
    num_classes_student: int = 2

    @property
    def feat_dim(self) -> int:
        return self.channels[-1]

    @property
    def map_hw(self) -> tuple[int, int]:
        # stride-2 downsampling in every block except the last
        s = 2 ** (len(self.channels) - 1)
        return self.image_hw[0] // s, self.image_hw[1] // s

    def validate(self) -> None:
        h, w = self.map_hw
        if h % self.parts != 0:
            raise ValueError(f"feature-map height {h} not divisible by parts={self.parts}")
        if self.feat_dim % self.reduction != 0:
            raise ValueError(f"feat_dim {self.feat_dim} not divisible by reduction={self.reduction}")
        if self.image_hw[0] % (2 ** (len(self.channels) - 1)) != 0 or \
           self.image_hw[1] % (2 ** (len(self.channels) - 1)) != 0:
            raise ValueError(f"image size {self.image_hw} incompatible with {len(self.channels)} blocks")


class Encoder(nn.Module):
    """Stack of (3x3 conv, BN, relu) blocks; stride 2 everywhere but the last."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        in_ch = 3
        for i, ch in enumerate(cfg.channels):
            stride = 2 if i < len(cfg.channels) - 1 else 1
            layers += [nn.Conv2d(in_ch, ch, 3, stride=stride, padding=1),
                       nn.BatchNorm2d(ch), nn.ReLU(inplace=True)]
            in_ch = ch
        self.net = nn.Sequential(*layers)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        H, W = self.cfg.image_hw
        if images.dim() != 4 or images.shape[1:] != (H, W, 3):
            raise ValueError(f"expected images of shape (B, {H}, {W}, 3), got {tuple(images.shape)}")
        return self.net(images.permute(0, 3, 1, 2))


class Decoder(nn.Module):
    """Mirror of the encoder: nearest upsample + 3x3 conv per block, sigmoid output.

    The resize-then-convolve layout avoids checkerboard artifacts that plain
    transposed convolutions produce.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        chans = list(cfg.channels[::-1])  # C -> ... -> 32
        layers = []
        for in_ch, out_ch in zip(chans[:-1], chans[1:]):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(in_ch, out_ch, 3, padding=1),
                       nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True)]
        layers += [nn.Conv2d(chans[-1], 3, 3, padding=1), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        h, w = self.cfg.map_hw
        if fmap.dim() != 4 or fmap.shape[1:] != (self.cfg.feat_dim, h, w):
            raise ValueError(f"expected map of shape (B, {self.cfg.feat_dim}, {h}, {w}), "
                             f"got {tuple(fmap.shape)}")
        return self.net(fmap).permute(0, 2, 3, 1)


def part_pool(fmap: torch.Tensor, p: int) -> torch.Tensor:
    """Average-pool a (B, C, h, w) map into p horizontal stripes -> (B, p, C).

    Stripe i covers rows [i*h/p, (i+1)*h/p); together they tile [0, h) exactly.
    """
    B, C, h, w = fmap.shape
    if h % p != 0:
        raise ValueError(f"map height {h} not divisible by p={p}")
    return fmap.reshape(B, C, p, h // p, w).mean(dim=(3, 4)).permute(0, 2, 1)


def global_pool(fmap: torch.Tensor) -> torch.Tensor:
    """Spatial average over the whole map -> (B, C)."""
    return fmap.mean(dim=(2, 3))


def apply_attention(parts: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
    """Gate part vectors elementwise: f_a = f * A."""
    if parts.shape != attention.shape:
        raise ValueError(f"shape mismatch: parts {tuple(parts.shape)} vs "
                         f"attention {tuple(attention.shape)}")
    return parts * attention


class AttentionEmbedding(nn.Module):
    """Shared two-layer gate producing per-channel attention in (0, 1) per part.

    1x1 convolutions on a pooled part vector reduce to linear layers; batch-norm
    statistics pool over the B*p axis so one embedding serves any part count.
    """

    def __init__(self, feat_dim: int, reduction: int = 4):
        super().__init__()
        if feat_dim % reduction != 0:
            raise ValueError(f"feat_dim {feat_dim} not divisible by reduction {reduction}")
        self.fc1 = nn.Linear(feat_dim, feat_dim // reduction)
        self.fc2 = nn.Linear(feat_dim // reduction, feat_dim)
        self.bn = nn.BatchNorm1d(feat_dim)

    def forward(self, parts: torch.Tensor) -> torch.Tensor:
        B, p, C = parts.shape
        x = parts.reshape(B * p, C)
        x = self.fc2(torch.relu(self.fc1(x)))
        x = self.bn(x)
        return torch.sigmoid(x).reshape(B, p, C)


class PartClassifiers(nn.Module):
    """One independent affine classifier per part."""

    def __init__(self, parts: int, feat_dim: int, num_classes: int):
        super().__init__()
        self.heads = nn.ModuleList(nn.Linear(feat_dim, num_classes) for _ in range(parts))

    def forward(self, part_feats: torch.Tensor) -> torch.Tensor:
        if part_feats.shape[1] != len(self.heads):
            raise ValueError(f"expected {len(self.heads)} parts, got {part_feats.shape[1]}")
        return torch.stack([h(part_feats[:, i]) for i, h in enumerate(self.heads)], dim=1)


class OcclusionClassifier(nn.Module):
    """Binary occluded-vs-clean head on the global feature; one logit per sample."""

    def __init__(self, feat_dim: int):
        super().__init__()
        self.fc = nn.Linear(feat_dim, 1)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.fc(feats).squeeze(-1)


class ReidModel(nn.Module):
    """Full student-teacher model; encoder and decoder are shared between branches."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.attention = AttentionEmbedding(cfg.feat_dim, cfg.reduction)
        self.teacher_heads = PartClassifiers(cfg.parts, cfg.feat_dim, cfg.num_classes_teacher)
        self.student_heads = PartClassifiers(cfg.parts, cfg.feat_dim, cfg.num_classes_student)
        self.occlusion_head = OcclusionClassifier(cfg.feat_dim)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def decode(self, fmap: torch.Tensor) -> torch.Tensor:
        return self.decoder(fmap)

    def forward_teacher(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        fmap = self.encoder(images)
        parts = part_pool(fmap, self.cfg.parts)
        return {"fmap": fmap, "parts": parts,
                "logits": self.teacher_heads(parts),
                "recon": self.decoder(fmap)}

    def forward_student(self, images: torch.Tensor,
                        freeze_attention: bool = False) -> dict[str, torch.Tensor]:
        fmap = self.encoder(images)
        parts = part_pool(fmap, self.cfg.parts)
        if freeze_attention:
            attention = torch.full_like(parts, 0.5)
        else:
            attention = self.attention(parts)
        attended = apply_attention(parts, attention)
        gfeat = global_pool(fmap)
        return {"fmap": fmap, "parts": parts, "attention": attention,
                "attended": attended, "global": gfeat,
                "logits": self.student_heads(attended),
                "occ_logit": self.occlusion_head(gfeat),
                "recon": self.decoder(fmap)}


def build_model(cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> ReidModel:
    """Seeded construction so two builds with the same config are identical."""
    gen_state = torch.get_rng_state()
    torch.manual_seed(seed)
    model = ReidModel(cfg).to(dtype)
    torch.set_rng_state(gen_state)
    return model
