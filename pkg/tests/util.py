"""Shared test helpers: finite-difference oracles and tiny stub components."""
from __future__ import annotations

import torch

from diffattack.backbone import (
    CONDITIONAL,
    DiffusionBackbone,
    ImageTensor,
    LatentTensor,
    TextEmbedding,
)
from diffattack.evaluation import Classifier


def fd_gradient(fn, x: torch.Tensor, index: tuple, h: float = 1e-6) -> float:
    """Central finite difference of scalar fn at one coordinate of x."""
    xp = x.detach().clone()
    xm = x.detach().clone()
    xp[index] += h
    xm[index] -= h
    return (float(fn(xp)) - float(fn(xm))) / (2.0 * h)


def check_grads(fn, x: torch.Tensor, n_coords: int = 10, rel_tol: float = 1e-3, seed: int = 0):
    """Compare autograd gradients of scalar fn(x) against central differences
    at n random coordinates; returns the worst relative error."""
    leaf = x.detach().clone().requires_grad_(True)
    value = fn(leaf)
    value.backward()
    grad = leaf.grad.detach()
    g = torch.Generator().manual_seed(seed)
    flat_indices = torch.randperm(x.numel(), generator=g)[:n_coords]
    worst = 0.0
    for flat in flat_indices:
        index = tuple(int(v) for v in torch.unravel_index(flat, x.shape))
        fd = fd_gradient(fn, x, index)
        an = float(grad[index])
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
        worst = max(worst, rel)
        assert rel < rel_tol, f"coord {index}: autograd {an:.6e} vs fd {fd:.6e} (rel {rel:.2e})"
    return worst


class ConstantNoiseBackbone(DiffusionBackbone):
    """Stub: noise prediction is 1 for conditional text, 0 for unconditional."""

    def __init__(self):
        self.image_shape = (8, 8, 3)
        self.latent_shape = (1, 2, 2)
        self.text_shape = (2, 2)
        self.max_timestep = 10

    def encode_image(self, img: ImageTensor) -> LatentTensor:
        self._check_image(img)
        return LatentTensor(torch.zeros(self.latent_shape, dtype=torch.float64))

    def decode_latent(self, z: LatentTensor) -> ImageTensor:
        self._check_latent(z)
        return ImageTensor(torch.zeros(self.image_shape, dtype=torch.float64))

    def encode_text(self, prompt: str) -> TextEmbedding:
        kind = "unconditional" if not prompt.split() else CONDITIONAL
        return TextEmbedding(torch.zeros(self.text_shape, dtype=torch.float64), kind=kind)

    def predict_noise(self, z, t, e, tap=None):
        self._check_latent(z)
        self._check_timestep(t)
        fill = 1.0 if e.kind == CONDITIONAL else 0.0
        return LatentTensor(torch.full(self.latent_shape, fill, dtype=torch.float64))


class FixedLogitClassifier(Classifier):
    """Stub classifier returning preset logits regardless of the image."""

    def __init__(self, logits, label_set=("a", "b"), name="stub"):
        self._logits = torch.as_tensor(logits, dtype=torch.float64)
        self.label_set = tuple(label_set)
        self.name = name

    def logits(self, image: ImageTensor) -> torch.Tensor:
        return self._logits + 0.0 * image.data.sum()
