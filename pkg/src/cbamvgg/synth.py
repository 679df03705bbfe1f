"""Synthetic 4-class leaf-lesion dataset for desk-scale experiments.

Every image is a noisy green leaf texture; three of the classes stamp a
class-specific lesion motif on top (filled brown spot, elongated yellow
streak, dark ring) and the fourth stays clean. Each lesioned sample
carries the lesion's bounding box so localization checks can compare
attribution mass inside the box against chance.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datapipe import LabeledImage
from .imaging import write_png
from .tensor import Array

CLASS_NAMES = ("clean", "ring", "spot", "streak")


@dataclass
class SynthSample:
    image: LabeledImage
    bbox: tuple[int, int, int, int] | None  # (y0, y1, x0, x1), half-open


def _leaf_background(rng: np.random.Generator, side: int) -> Array:
    base = np.array([62.0, 118.0, 52.0])
    noise = rng.uniform(-14.0, 14.0, size=(side, side, 3))
    return base[None, None, :] + noise


def _stamp_spot(rng, canvas, side):
    r = int(rng.integers(6, 9))
    cy, cx = (int(rng.integers(r + 2, side - r - 2)) for _ in range(2))
    yy, xx = np.mgrid[0:side, 0:side]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    color = np.array([132.0, 72.0, 28.0]) + rng.uniform(-8, 8, size=3)
    canvas[mask] = color + rng.uniform(-6, 6, size=(int(mask.sum()), 3))
    return (cy - r, cy + r + 1, cx - r, cx + r + 1)


def _stamp_streak(rng, canvas, side):
    length = int(rng.integers(18, 25))
    width = int(rng.integers(4, 6))
    color = np.array([172.0, 160.0, 58.0]) + rng.uniform(-8, 8, size=3)
    if rng.integers(2) == 0:  # horizontal
        y0 = int(rng.integers(2, side - width - 2))
        x0 = int(rng.integers(2, side - length - 2))
        y1, x1 = y0 + width, x0 + length
    else:
        y0 = int(rng.integers(2, side - length - 2))
        x0 = int(rng.integers(2, side - width - 2))
        y1, x1 = y0 + length, x0 + width
    patch = canvas[y0:y1, x0:x1]
    canvas[y0:y1, x0:x1] = color + rng.uniform(-6, 6, size=patch.shape)
    return (y0, y1, x0, x1)


def _stamp_ring(rng, canvas, side):
    r = int(rng.integers(9, 12))
    thickness = int(rng.integers(4, 6))
    cy, cx = (int(rng.integers(r + 2, side - r - 2)) for _ in range(2))
    yy, xx = np.mgrid[0:side, 0:side]
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    mask = (d2 <= r * r) & (d2 >= (r - thickness) ** 2)
    color = np.array([38.0, 32.0, 22.0]) + rng.uniform(-6, 6, size=3)
    canvas[mask] = color + rng.uniform(-5, 5, size=(int(mask.sum()), 3))
    return (cy - r, cy + r + 1, cx - r, cx + r + 1)


_STAMPS = {"clean": None, "ring": _stamp_ring, "spot": _stamp_spot,
           "streak": _stamp_streak}


def make_lesion_dataset(per_class: int = 100, side: int = 32,
                        seed: int = 7) -> list[SynthSample]:
    """``per_class`` samples of each of the four classes, class-major order."""
    rng = np.random.default_rng(seed)
    samples: list[SynthSample] = []
    for class_id, name in enumerate(CLASS_NAMES):
        stamp = _STAMPS[name]
        for k in range(per_class):
            canvas = _leaf_background(rng, side)
            bbox = stamp(rng, canvas, side) if stamp else None
            pixels = np.clip(np.floor(canvas + 0.5), 0, 255).astype(np.uint8)
            image = LabeledImage(pixels, class_id, name, f"{name}/{name}_{k:03d}.png")
            samples.append(SynthSample(image, bbox))
    return samples


def write_dataset(samples: list[SynthSample], root) -> None:
    """Materialize samples as `root/<class>/<name>.png` plus a bbox table."""
    root = Path(root)
    bbox_lines = []
    for sample in samples:
        im = sample.image
        path = root / im.path
        path.parent.mkdir(parents=True, exist_ok=True)
        write_png(path, im.pixels)
        if sample.bbox is not None:
            y0, y1, x0, x1 = sample.bbox
            bbox_lines.append(f"{im.path}\t{y0}\t{y1}\t{x0}\t{x1}")
    (root / "bboxes.tsv").write_text("\n".join(bbox_lines) + "\n", encoding="utf-8")


def main(argv=None) -> int:
    import argparse

    parser = argparse.ArgumentParser(description="generate the synthetic "
                                     "4-class lesion dataset")
    parser.add_argument("--out", required=True, help="output dataset root")
    parser.add_argument("--per-class", type=int, default=100)
    parser.add_argument("--side", type=int, default=32)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)
    write_dataset(make_lesion_dataset(args.per_class, args.side, args.seed),
                  args.out)
    print(f"wrote {4 * args.per_class} images under {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
