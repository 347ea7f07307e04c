"""Aggregation of tapped attention maps and the losses/masks built from them."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import AttentionRecord
from .errors import DegenerateInputError, DomainError

SOFT = "soft"
HARD = "hard"


@dataclass
class AggregatedCrossMap:
    """Per-pixel attention mass toward selected prompt tokens.

    Averaged over steps, layers and the selected token columns, on the grid
    of the largest tapped resolution. ``values`` is flat [h*w].
    """

    values: torch.Tensor
    resolution: tuple[int, int]

    def grid(self) -> torch.Tensor:
        h, w = self.resolution
        return self.values.reshape(h, w)


@dataclass
class Mask:
    """Spatial mask at image resolution; soft in [0, 1] or hard in {0, 1}."""

    values: torch.Tensor
    kind: str


def _resize_map(grid: torch.Tensor, target: tuple[int, int], mode: str) -> torch.Tensor:
    if grid.shape == target:
        return grid
    kwargs = {} if mode == "nearest" else {"align_corners": False}
    out = F.interpolate(grid[None, None], size=target, mode=mode, **kwargs)
    return out[0, 0]


def accumulate_cross(
    records: Sequence[AttentionRecord], token_indices: Sequence[int]
) -> AggregatedCrossMap:
    """Average cross-attention toward the given token columns over all records.

    Each record's selected columns are averaged, the per-record map is
    resized (bilinear) to the largest tapped resolution, and the stack is
    averaged over (step, layer). Differentiable.
    """
    if not records:
        raise DomainError("no attention records to accumulate")
    token_indices = list(token_indices)
    if not token_indices:
        raise DomainError("token_indices must be non-empty")
    for r in records:
        n_tokens = r.cross.shape[1]
        if min(token_indices) < 0 or max(token_indices) >= n_tokens:
            raise DomainError(
                f"token indices {token_indices} invalid for {n_tokens} tokens"
            )
    target = max((r.resolution for r in records), key=lambda hw: hw[0] * hw[1])
    maps = []
    for r in records:
        per_pixel = r.cross[:, token_indices].mean(dim=1)
        grid = per_pixel.reshape(r.resolution)
        maps.append(_resize_map(grid, target, "bilinear"))
    avg = torch.stack(maps).mean(dim=0)
    return AggregatedCrossMap(values=avg.reshape(-1), resolution=target)


def variance_loss(m: AggregatedCrossMap) -> torch.Tensor:
    """Population variance of the aggregated map over pixels.

    Zero exactly when the map is constant; minimizing it spreads attention
    evenly across the image.
    """
    return m.values.var(correction=0)


def structure_loss(
    self_maps: Sequence[torch.Tensor], self_maps_fix: Sequence[torch.Tensor]
) -> torch.Tensor:
    """Sum over (step, layer) of mean squared self-attention differences.

    The mean (not sum) over map elements keeps the loss weight insensitive to
    map size; gradients flow only through ``self_maps``.
    """
    if len(self_maps) != len(self_maps_fix):
        raise DomainError(
            f"self-map lists misaligned: {len(self_maps)} vs {len(self_maps_fix)}"
        )
    if not self_maps:
        raise DomainError("self-map lists are empty")
    total = None
    for cur, fix in zip(self_maps, self_maps_fix):
        if cur.shape != fix.shape:
            raise DomainError(f"self-map shapes differ: {cur.shape} vs {fix.shape}")
        term = ((cur - fix.detach()) ** 2).mean()
        total = term if total is None else total + term
    return total


def soft_mask(
    m: AggregatedCrossMap, target: tuple[int, int], mode: str = "bilinear"
) -> Mask:
    """Max-normalize the aggregated map, then upsample to the target size."""
    if mode not in ("nearest", "bilinear"):
        raise DomainError(f"unsupported upsampling mode {mode!r}")
    peak = float(m.values.max())
    if peak <= 0.0:
        raise DegenerateInputError("cannot normalize an all-zero attention map")
    grid = (m.grid() / peak).detach()
    up = _resize_map(grid, target, mode).clamp(0.0, 1.0)
    return Mask(values=up, kind=SOFT)


def hard_mask(soft: Mask) -> Mask:
    """Threshold a soft mask at 0.5 (strictly greater goes to 1)."""
    if soft.kind != SOFT:
        raise DomainError("hard_mask expects a soft mask")
    return Mask(values=(soft.values > 0.5).to(soft.values.dtype), kind=HARD)


def ext_attention_loss(maps: Sequence[AggregatedCrossMap]) -> torch.Tensor:
    """Mean attention toward secondary categories minus the primary one.

    ``maps[0]`` is the primary category. The value is an objective to
    maximize; the composite loss folds in the sign.
    """
    if len(maps) < 2:
        raise DomainError("extended attention loss needs at least two category maps")
    res = maps[0].resolution
    for m in maps[1:]:
        if m.resolution != res:
            raise DomainError("category maps must share one resolution")
    rest = torch.stack([m.values for m in maps[1:]]).mean(dim=0)
    return rest.mean() - maps[0].values.mean()


def save_mask_png(mask: Mask, path: Path) -> None:
    """Export a mask as an 8-bit grayscale image for inspection."""
    from PIL import Image

    arr = (mask.values.detach().numpy() * 255.0).round().clip(0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def save_map_npy(m: AggregatedCrossMap, path: Path) -> None:
    np.save(path, m.grid().detach().numpy())
