"""Dataset ingestion, CLAHE contrast enhancement, preprocessing, splitting,
and batching.

Dataset layout on disk is one subdirectory per class under a root, with
PNG or binary PPM images inside. Preprocessing follows the classifier's
input contract: bilinear resize to the network side, contrast-limited
adaptive histogram equalization on the luminance channel, then scaling to
[0,1] in channel-first order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .imaging import bilinear_resize, read_image
from .tensor import Array

_IMAGE_SUFFIXES = {".png", ".ppm"}


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass
class LabeledImage:
    pixels: Array  # (H, W, 3) uint8
    class_id: int
    class_name: str
    path: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DataError(f"{self.path or '<memory>'}: image must be (H, W, 3), "
                            f"got {self.pixels.shape}")
        if self.class_id < 0:
            raise DataError(f"class_id must be non-negative, got {self.class_id}")


@dataclass
class DatasetSplit:
    train: list[LabeledImage]
    test: list[LabeledImage]
    class_names: list[str]
    seed: int
    ratio: float

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "ratio": self.ratio,
            "classes": self.class_names,
            "train": [im.path for im in self.train],
            "test": [im.path for im in self.test],
        }


def load_dataset(root) -> tuple[list[LabeledImage], list[str]]:
    """Read `root/<class_name>/<image>.png|.ppm` into memory.

    Class names are the sorted subdirectory names; within a class, images
    are sorted by filename so ordering is reproducible.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist or is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"dataset root {root} contains no class subdirectories")
    images: list[LabeledImage] = []
    names: list[str] = []
    for class_id, cdir in enumerate(class_dirs):
        names.append(cdir.name)
        files = sorted(p for p in cdir.iterdir()
                       if p.suffix.lower() in _IMAGE_SUFFIXES and p.is_file())
        if not files:
            raise DataError(f"class directory {cdir} holds no .png or .ppm images")
        for f in files:
            images.append(LabeledImage(read_image(f), class_id, cdir.name, str(f)))
    return images, names


# ---------------------------------------------------------------------------
# CLAHE
# ---------------------------------------------------------------------------

def _tile_edges(extent: int, tiles: int) -> list[tuple[int, int]]:
    cuts = [_round_half_up(extent * t / tiles) for t in range(tiles + 1)]
    return [(cuts[t], cuts[t + 1]) for t in range(tiles)]


def _tile_lut(hist: Array, clip_limit: float) -> Array:
    """Equalization lookup table for one tile's 256-bin luminance histogram.

    Counts above clip_limit x uniform level are clipped and the excess is
    redistributed uniformly (remainder goes one-per-bin from bin 0). A
    histogram with a single occupied bin maps to the identity so constant
    regions are fixed points.
    """
    total = int(hist.sum())
    if total == 0 or np.count_nonzero(hist) == 1:
        return np.arange(256, dtype=np.float64)
    if np.isfinite(clip_limit):
        ceiling = max(1, int(clip_limit * total / 256.0))
        excess = int(np.maximum(hist - ceiling, 0).sum())
        hist = np.minimum(hist, ceiling).astype(np.int64)
        hist += excess // 256
        rem = excess % 256
        if rem:
            hist[:rem] += 1
    cdf = np.cumsum(hist, dtype=np.float64)
    return np.floor(cdf * 255.0 / cdf[-1] + 0.5)


def clahe(image: Array, clip_limit: float = 2.0, tiles: int = 8) -> Array:
    """Contrast-limited adaptive histogram equalization on the luma channel.

    Luminance (BT.601) is equalized tile by tile with clipped histograms;
    each pixel takes the bilinear blend of the four nearest tile mappings,
    and the luma delta is added back onto all three channels so chroma is
    untouched. Returns uint8 RGB of the input shape.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise DataError(f"clahe expects (H, W, 3) uint8, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    if h == 0 or w == 0:
        raise DataError("clahe: zero-area image")
    if clip_limit <= 0:
        raise DataError(f"clip_limit must be positive, got {clip_limit}")
    if tiles < 1:
        raise DataError(f"tiles must be >= 1, got {tiles}")

    rgb = image.astype(np.float64)
    luma = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    luma_int = np.clip(np.floor(luma + 0.5), 0, 255).astype(np.int64)

    rows = _tile_edges(h, tiles)
    cols = _tile_edges(w, tiles)
    luts = np.empty((tiles, tiles, 256), dtype=np.float64)
    centers_y = np.empty(tiles)
    centers_x = np.empty(tiles)
    for ti, (y0, y1) in enumerate(rows):
        centers_y[ti] = (y0 + y1 - 1) / 2.0
        for tj, (x0, x1) in enumerate(cols):
            centers_x[tj] = (x0 + x1 - 1) / 2.0
            hist = np.bincount(luma_int[y0:y1, x0:x1].ravel(), minlength=256)
            luts[ti, tj] = _tile_lut(hist, clip_limit)

    # bilinear weights between the four nearest tile centres, clamped at
    # the borders so corner pixels use their own tile's mapping alone
    yy = np.arange(h, dtype=np.float64)
    xx = np.arange(w, dtype=np.float64)
    t_y0 = np.clip(np.searchsorted(centers_y, yy, side="right") - 1, 0, tiles - 1)
    t_x0 = np.clip(np.searchsorted(centers_x, xx, side="right") - 1, 0, tiles - 1)
    t_y1 = np.minimum(t_y0 + 1, tiles - 1)
    t_x1 = np.minimum(t_x0 + 1, tiles - 1)
    span_y = centers_y[t_y1] - centers_y[t_y0]
    span_x = centers_x[t_x1] - centers_x[t_x0]
    wy = np.where(span_y > 0, np.clip((yy - centers_y[t_y0]) / np.where(span_y > 0, span_y, 1), 0, 1), 0.0)
    wx = np.where(span_x > 0, np.clip((xx - centers_x[t_x0]) / np.where(span_x > 0, span_x, 1), 0, 1), 0.0)

    gy0 = t_y0[:, None]
    gy1 = t_y1[:, None]
    gx0 = t_x0[None, :]
    gx1 = t_x1[None, :]
    wy2 = wy[:, None]
    wx2 = wx[None, :]
    blended = (luts[gy0, gx0, luma_int] * (1 - wy2) * (1 - wx2)
               + luts[gy0, gx1, luma_int] * (1 - wy2) * wx2
               + luts[gy1, gx0, luma_int] * wy2 * (1 - wx2)
               + luts[gy1, gx1, luma_int] * wy2 * wx2)

    delta = blended - luma_int
    out = np.clip(np.floor(rgb + delta[:, :, None] + 0.5), 0, 255)
    return out.astype(np.uint8)


def preprocess(image: Array, side: int) -> Array:
    """uint8 (H, W, 3) image -> float32 (3, side, side) network input in [0,1].

    Bilinear resize to side x side, division by 255, channel-first
    transpose. Contrast enhancement is a separate step (see ``clahe``);
    the pipeline applies it at native resolution before this call.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"preprocess expects (H, W, 3), got {image.shape}")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise DataError("preprocess: zero-area image")
    if side < 1:
        raise DataError(f"side must be positive, got {side}")
    resized = np.clip(np.floor(bilinear_resize(image.astype(np.float64), side, side) + 0.5),
                      0, 255).astype(np.float32)
    return (resized / 255.0).transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# splitting and batching
# ---------------------------------------------------------------------------

def split_dataset(images: list[LabeledImage], class_names: list[str],
                  ratio: float = 0.8, seed: int = 0) -> DatasetSplit:
    """Stratified train/test split: per class, round(ratio x class size)
    samples go to train after a seeded shuffle. Deterministic."""
    if not 0.0 < ratio < 1.0:
        raise DataError(f"split ratio must be in (0,1), got {ratio}")
    rng = np.random.default_rng(seed)
    train: list[LabeledImage] = []
    test: list[LabeledImage] = []
    for class_id, name in enumerate(class_names):
        members = [im for im in images if im.class_id == class_id]
        if len(members) < 2:
            raise DataError(f"class {name!r} has {len(members)} sample(s); "
                            f"need at least 2 to split")
        order = rng.permutation(len(members))
        n_train = _round_half_up(ratio * len(members))
        for k, idx in enumerate(order):
            (train if k < n_train else test).append(members[idx])
    return DatasetSplit(train, test, list(class_names), seed, ratio)


def save_split_manifest(split: DatasetSplit, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(split.manifest(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def prepare_part(part: list[LabeledImage], side: int,
                 enhance: bool = True) -> tuple[Array, Array]:
    """CLAHE (unless disabled) + preprocess a split part once into
    (X: (n,3,side,side) float32, y: (n,) int64) for repeated batching."""
    if not part:
        raise DataError("empty split part")
    x = np.stack([preprocess(clahe(im.pixels) if enhance else im.pixels, side)
                  for im in part])
    y = np.array([im.class_id for im in part], dtype=np.int64)
    return x, y


def balanced_order(labels: Array, seed=None) -> Array:
    """Index order that round-robins the classes: one sample of each class
    in turn, per-class order shuffled when ``seed`` is given. With equal
    class counts and a batch size divisible by the class count, cutting
    this order into batches makes every batch class-balanced.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DataError("empty split part")
    rng = None if seed is None else np.random.default_rng(seed)
    queues = []
    for c in np.unique(labels):
        q = np.flatnonzero(labels == c)
        queues.append(q if rng is None else rng.permutation(q))
    rounds = max(len(q) for q in queues)
    return np.array([q[i] for i in range(rounds) for q in queues if i < len(q)])


def batches(x: Array, y: Array, batch_size: int, seed=None, balanced: bool = False):
    """Yield (batch_x, batch_y) covering every sample exactly once; the
    final partial batch is emitted. ``seed`` of None keeps source order,
    otherwise a seeded permutation is applied. ``balanced`` interleaves
    the classes round-robin (see balanced_order) instead of permuting."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    n = len(x)
    if n == 0:
        raise DataError("empty split part")
    if balanced:
        order = balanced_order(y, seed)
    else:
        order = np.arange(n) if seed is None else np.random.default_rng(seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield x[idx], y[idx]


def one_hot(labels: Array, classes: int) -> Array:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or (labels.size and labels.max() >= classes):
        raise DataError(f"labels must lie in [0,{classes}), got range "
                        f"[{labels.min()},{labels.max()}]")
    out = np.zeros((len(labels), classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out
