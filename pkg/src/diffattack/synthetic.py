"""Synthetic two-class image set used for desk-scale training and evaluation.

Each image is a smooth color gradient background with one soft Gaussian ridge
on top. Class 0 ("horizontal") lays the ridge roughly flat, class 1
("vertical") roughly upright; position, colors, amplitude and a +-30 degree
orientation jitter are nuisance factors. The jitter leaves a clean margin for
a small classifier while keeping typical images near enough to the decision
boundary to be attackable, and the family is smooth enough for a small
autoencoder to compress well.
"""
from __future__ import annotations

import argparse
import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backbone import ImageTensor

CLASS_NAMES = ("horizontal", "vertical")


def generate_images(count: int, size: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (images [N, C, H, W] float64 in [0,1], labels [N] int64)."""
    g = torch.Generator().manual_seed(seed)
    labels = torch.randint(0, 2, (count,), generator=g)
    yy, xx = torch.meshgrid(
        torch.arange(size, dtype=torch.float64),
        torch.arange(size, dtype=torch.float64),
        indexing="ij",
    )
    images = []
    for i in range(count):
        y = int(labels[i])
        base = 0.3 + 0.4 * torch.rand(3, generator=g, dtype=torch.float64)
        gx = (torch.rand(1, generator=g, dtype=torch.float64) - 0.5) * 0.3
        gy = (torch.rand(1, generator=g, dtype=torch.float64) - 0.5) * 0.3
        img = base[:, None, None] + gx * (xx / size - 0.5) + gy * (yy / size - 0.5)
        cx = (0.3 + 0.4 * torch.rand(1, generator=g, dtype=torch.float64)) * size
        cy = (0.3 + 0.4 * torch.rand(1, generator=g, dtype=torch.float64)) * size
        color = 0.2 + 0.8 * torch.rand(3, generator=g, dtype=torch.float64)
        amp = 0.6 + 0.35 * torch.rand(1, generator=g, dtype=torch.float64)
        jitter = (float(torch.rand(1, generator=g, dtype=torch.float64)) - 0.5) * (math.pi / 3)
        theta = jitter if y == 0 else math.pi / 2 + jitter
        s_long = size * (0.30 + 0.10 * torch.rand(1, generator=g, dtype=torch.float64))
        s_short = size * (0.055 + 0.02 * torch.rand(1, generator=g, dtype=torch.float64))
        u = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
        v = -(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
        ridge = torch.exp(-(u**2 / (2 * s_long**2) + v**2 / (2 * s_short**2)))[None]
        img = img + amp * ridge * (color[:, None, None] - img)
        images.append(img.clamp(0.0, 1.0))
    return torch.stack(images), labels


def as_image_tensors(images: torch.Tensor) -> list[ImageTensor]:
    """Convert a [N, C, H, W] batch to per-image [H, W, C] ImageTensors."""
    return [ImageTensor(img.permute(1, 2, 0).contiguous()) for img in images]


def save_png(img: ImageTensor, path: Path) -> None:
    arr = (img.data.detach().numpy() * 255.0).round().clip(0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path: Path) -> ImageTensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return ImageTensor(torch.from_numpy(arr))


def write_dataset(out_dir: Path, count: int, size: int, seed: int) -> Path:
    """Write PNGs plus a `labels.tsv` (filename<TAB>class_index<TAB>class name).

    Returns the labels file path. Filenames are zero-padded so lexicographic
    order matches generation order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images, labels = generate_images(count, size, seed)
    lines = []
    for i, img in enumerate(as_image_tensors(images)):
        name = f"img_{i:04d}.png"
        save_png(img, out_dir / name)
        label = int(labels[i])
        lines.append(f"{name}\t{label}\t{CLASS_NAMES[label]}")
    labels_path = out_dir / "labels.tsv"
    labels_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return labels_path


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Write a synthetic two-class dataset.")
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--count", type=int, default=64)
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    labels_path = write_dataset(args.out_dir, args.count, args.size, args.seed)
    print(f"wrote {args.count} images and {labels_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
