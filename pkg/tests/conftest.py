import numpy as np
import torch

from occreid.model import ModelConfig, build_model
from occreid.synthdata import LabeledImage


def tiny_model_cfg(**kw):
    """Smallest config that still exercises every component (map 2x1, p=2)."""
    defaults = dict(image_hw=(16, 8), channels=(8, 8, 8, 16), parts=2,
                    reduction=4, num_classes_teacher=4, num_classes_student=4)
    defaults.update(kw)
    return ModelConfig(**defaults)


def tiny_model(seed=0, dtype=torch.float64, **kw):
    return build_model(tiny_model_cfg(**kw), seed=seed, dtype=dtype)


def random_images(rng, n, hw=(16, 8)):
    return torch.from_numpy(rng.random((n, hw[0], hw[1], 3))).to(torch.float64)


def pk_labels(P, K):
    return torch.arange(P).repeat_interleave(K)


def make_batch(rng, P=3, K=2, hw=(16, 8)):
    """PK-structured batch dict as used by the trainer."""
    n = P * K
    return {"noisy": random_images(rng, n, hw),
            "clean": random_images(rng, n, hw),
            "labels": pk_labels(P, K),
            "flags": torch.tensor([i % 2 == 0 for i in range(n)])}


def fd_grad(loss_fn, tensor, flat_idx, eps=1e-4):
    """Central finite difference of loss_fn w.r.t. one scalar parameter."""
    flat = tensor.view(-1)
    with torch.no_grad():
        orig = flat[flat_idx].item()
        flat[flat_idx] = orig + eps
        lp = loss_fn().item()
        flat[flat_idx] = orig - eps
        lm = loss_fn().item()
        flat[flat_idx] = orig
    return (lp - lm) / (2.0 * eps)


def labeled_image(rng, identity=0, camera=1, hw=(64, 32), occluded=False):
    px = rng.random((hw[0], hw[1], 3)).astype(np.float32)
    return LabeledImage(px, identity, camera, occluded,
                        "occluded" if occluded else "holistic")
