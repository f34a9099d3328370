"""Procedural identity dataset with controllable occlusion.

Generates small person-like images (layered head/torso/leg shapes on a noisy
background) so the whole pipeline can be exercised and verified without any
external ReID dataset. Every function is a pure function of its arguments and
seeds; there is no shared RNG state.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_H = 64
IMAGE_W = 32

# minimum per-channel separation enforced between identity base colors
_MIN_COLOR_SEP = 0.08

_FILENAME_RE = re.compile(r"^(\d{4})_c(\d+)_o([01])_(\d{6})\.png$")

SPLITS = ("train", "query", "gallery")


class DatasetParseError(ValueError):
    """A file in a dataset split does not follow the naming convention."""


@dataclass(frozen=True)
class IdentityAtlas:
    """Deterministic appearance parameters for a set of synthetic identities.

    Colors come from a small shared palette, so identity is carried mostly by
    the spatial arrangement (pattern id, stripe scale, color pairing) rather
    than by a unique color: a model that only averages colors cannot separate
    the identities, which keeps occluded matching non-trivial.
    """

    num_identities: int
    seed: int
    base_color: np.ndarray      # (N, 3) torso primary color in [0, 1]
    second_color: np.ndarray    # (N, 3) torso secondary color
    leg_color: np.ndarray       # (N, 3) leg primary color
    torso_pattern: np.ndarray   # (N,) ints in [1, 4): stripes/checker only
    leg_pattern: np.ndarray     # (N,) ints in [0, 4)
    pattern_scale: np.ndarray   # (N,) stripe widths in {2, 3, 4}
    proportions: np.ndarray     # (N, 2) torso-width / head-size factors in [0.7, 1.3]


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray          # (H, W, 3) float32 in [0, 1]
    identity: int
    camera: int
    occluded_flag: bool
    domain: str                 # "holistic" | "occluded"


@dataclass(frozen=True)
class ErasingParams:
    probability: float = 1.0
    area_range: tuple[float, float] = (0.1, 0.35)
    aspect_range: tuple[float, float] = (0.3, 3.33)
    fill_mode: str = "uniform-random"  # or "mean-value"

    def validate(self) -> None:
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must be in [0,1], got {self.probability}")
        lo, hi = self.area_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"bad area range {self.area_range}")
        alo, ahi = self.aspect_range
        if not (0.0 < alo <= ahi):
            raise ValueError(f"bad aspect range {self.aspect_range}")
        if self.fill_mode not in ("uniform-random", "mean-value"):
            raise ValueError(f"unknown fill mode {self.fill_mode!r}")


_PALETTE_SIZE = 6


def generate_atlas(num_identities: int, seed: int) -> IdentityAtlas:
    """Draw pairwise-distinct appearance parameters for `num_identities` people."""
    if num_identities < 2:
        raise ValueError(f"need at least 2 identities, got {num_identities}")
    max_ids = _PALETTE_SIZE * (_PALETTE_SIZE - 1) * _PALETTE_SIZE
    if num_identities > max_ids:
        raise ValueError(f"at most {max_ids} identities supported, "
                         f"got {num_identities}")
    rng = np.random.default_rng((seed, 0x0A71A5))

    # shared palette; rejection sampling keeps the palette entries separated
    palette = np.empty((_PALETTE_SIZE, 3))
    for i in range(_PALETTE_SIZE):
        for _ in range(1000):
            c = rng.uniform(0.05, 0.95, size=3)
            if i == 0 or np.abs(palette[:i] - c).max(axis=1).min() >= _MIN_COLOR_SEP:
                break
        palette[i] = c

    # identity = distinct (color pairing, pattern, stripe scale) combination
    seen: set[tuple] = set()
    rows = []
    while len(rows) < num_identities:
        a = int(rng.integers(0, _PALETTE_SIZE))
        b = int(rng.integers(0, _PALETTE_SIZE - 1))
        b = b + 1 if b >= a else b
        leg = int(rng.integers(0, _PALETTE_SIZE))
        tp = int(rng.integers(1, 4))
        lp = int(rng.integers(0, 4))
        sc = int(rng.integers(2, 5))
        # distinct color triples keep every identity pair separable by more
        # than pattern alone (and by mean color, if only slightly)
        key = (a, b, leg)
        if key in seen:
            continue
        seen.add(key)
        rows.append((a, b, leg, tp, lp, sc))
    rows_arr = np.array(rows)
    props = rng.uniform(0.7, 1.3, size=(num_identities, 2))
    return IdentityAtlas(num_identities, seed,
                         base_color=palette[rows_arr[:, 0]],
                         second_color=palette[rows_arr[:, 1]],
                         leg_color=palette[rows_arr[:, 2]],
                         torso_pattern=rows_arr[:, 3],
                         leg_pattern=rows_arr[:, 4],
                         pattern_scale=rows_arr[:, 5],
                         proportions=props)


def _pattern_fill(rows: int, cols: int, pattern: int, color_a: np.ndarray,
                  color_b: np.ndarray, scale: int = 4) -> np.ndarray:
    """Fill an rows×cols patch with one of four simple two-color patterns."""
    patch = np.empty((rows, cols, 3))
    rr = (np.arange(rows)[:, None] // scale) % 2
    cc = (np.arange(cols)[None, :] // scale) % 2
    if pattern == 0:
        mask = np.zeros((rows, cols), dtype=bool)
    elif pattern == 1:
        mask = np.broadcast_to(rr.astype(bool), (rows, cols))
    elif pattern == 2:
        mask = np.broadcast_to(cc.astype(bool), (rows, cols))
    else:
        mask = ((rr + cc) % 2).astype(bool)
    patch[:] = color_a
    patch[mask] = color_b
    return patch


def _camera_effect(camera: int) -> tuple[np.ndarray, np.ndarray]:
    cam_rng = np.random.default_rng((0xCA3E7A, camera))
    gain = cam_rng.uniform(0.9, 1.1, size=3)
    bias = cam_rng.uniform(-0.05, 0.05, size=3)
    return gain, bias


def render_sample(atlas: IdentityAtlas, identity: int, camera: int,
                  jitter_seed: int) -> LabeledImage:
    """Render one holistic image of `identity` as seen by `camera`.

    The jitter seed drives background noise, position offset and brightness,
    so two renders of the same identity differ while sharing appearance
    parameters from the atlas.
    """
    if not 0 <= identity < atlas.num_identities:
        raise ValueError(f"identity {identity} out of range [0, {atlas.num_identities})")
    H, W = IMAGE_H, IMAGE_W
    rng = np.random.default_rng((atlas.seed, identity, camera, jitter_seed, 0x3E11D))

    img = 0.45 + 0.06 * rng.standard_normal((H, W, 3))
    dx = int(rng.integers(-3, 4))
    dy = int(rng.integers(-2, 3))
    brightness = 1.0 + 0.06 * rng.uniform(-1.0, 1.0)

    color = atlas.base_color[identity]
    color2 = atlas.second_color[identity]
    scale = int(atlas.pattern_scale[identity])
    torso_w_f, head_f = atlas.proportions[identity]

    # head: ellipse near the top
    cy, cx = 9 + dy, W // 2 + dx
    ry, rx = 5.0 * head_f, 4.0 * head_f
    yy, xx = np.ogrid[:H, :W]
    head_mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    img[head_mask] = 0.3 + 0.6 * color[::-1]

    # torso: patterned rectangle in the middle band
    half_w = int(round(9 * torso_w_f))
    r0, r1 = 16 + dy, 38 + dy
    c0 = max(0, W // 2 + dx - half_w)
    c1 = min(W, W // 2 + dx + half_w)
    img[r0:r1, c0:c1] = _pattern_fill(r1 - r0, c1 - c0,
                                      int(atlas.torso_pattern[identity]),
                                      color, color2, scale)

    # legs: two narrower patterned strips
    leg_color = atlas.leg_color[identity]
    r0, r1 = 38 + dy, 58 + dy
    for sign in (-1, 1):
        lc = W // 2 + dx + sign * 4
        c0, c1 = max(0, lc - 3), min(W, lc + 3)
        img[r0:r1, c0:c1] = _pattern_fill(r1 - r0, c1 - c0,
                                          int(atlas.leg_pattern[identity]),
                                          leg_color, color, scale)

    gain, bias = _camera_effect(camera)
    img = np.clip(img * gain * brightness + bias, 0.0, 1.0)
    return LabeledImage(img.astype(np.float32), identity, camera, False, "holistic")


def apply_random_erasing(image: LabeledImage, params: ErasingParams,
                         seed: int) -> LabeledImage:
    """Overwrite one seeded random rectangle of the image (with prob. `probability`).

    Output is tagged domain="occluded"; occluded_flag is set iff a rectangle
    was actually applied.
    """
    params.validate()
    rng = np.random.default_rng((seed, 0xE3A5E))
    H, W, _ = image.pixels.shape
    if rng.random() >= params.probability:
        return replace(image, domain="occluded", occluded_flag=False)

    area = rng.uniform(*params.area_range) * H * W
    aspect = rng.uniform(*params.aspect_range)
    h = math.ceil(math.sqrt(area * aspect))
    w = math.ceil(math.sqrt(area / aspect))
    top = int(rng.integers(0, max(H - h, 0) + 1))
    left = int(rng.integers(0, max(W - w, 0) + 1))
    h_eff = min(h, H - top)
    w_eff = min(w, W - left)

    pixels = image.pixels.copy()
    if params.fill_mode == "uniform-random":
        fill = rng.random((h_eff, w_eff, 3))
    else:
        fill = np.broadcast_to(image.pixels.mean(axis=(0, 1)), (h_eff, w_eff, 3))
    pixels[top:top + h_eff, left:left + w_eff] = fill
    return replace(image, pixels=pixels.astype(np.float32),
                   occluded_flag=True, domain="occluded")


def _filename(img: LabeledImage, index: int) -> str:
    return f"{img.identity:04d}_c{img.camera}_o{int(img.occluded_flag)}_{index:06d}.png"


def parse_filename(name: str) -> tuple[int, int, bool, int]:
    """Parse `<id>_c<cam>_o<0|1>_<index>.png` into (identity, camera, occluded, index)."""
    m = _FILENAME_RE.match(name)
    if m is None:
        raise DatasetParseError(f"filename {name!r} does not match the dataset convention")
    return int(m.group(1)), int(m.group(2)), m.group(3) == "1", int(m.group(4))


def write_split(root: Path | str, split: str, images: list[LabeledImage]) -> list[Path]:
    """Write images as 8-bit PNGs under `<root>/<split>/`."""
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    out = Path(root) / split
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for idx, img in enumerate(images):
        arr = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
        p = out / _filename(img, idx)
        Image.fromarray(arr, mode="RGB").save(p)
        paths.append(p)
    return paths


def read_split(root: Path | str, split: str) -> list[LabeledImage]:
    """Read a split written by `write_split`; sorted by filename."""
    d = Path(root) / split
    if not d.is_dir():
        raise FileNotFoundError(f"split directory not found: {d}")
    images = []
    for p in sorted(d.glob("*.png")):
        identity, camera, occluded, _ = parse_filename(p.name)
        arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
        domain = "occluded" if occluded else "holistic"
        images.append(LabeledImage(arr, identity, camera, occluded, domain))
    return images


def dataset_io(root: Path | str, split: str,
               images: list[LabeledImage] | None = None) -> list[LabeledImage]:
    """Write (if `images` given) then read a split; read-only when `images` is None."""
    if images is not None:
        write_split(root, split, images)
    return read_split(root, split)
