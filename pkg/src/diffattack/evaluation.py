"""Classifier interface, accuracy/transfer metrics, and the Frechet-distance
imperceptibility metric with a pluggable feature extractor.

Desk-scale Frechet values use a fixed random-projection extractor and are
only comparable within one run configuration.
"""
from __future__ import annotations

import hashlib
import math
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import ImageTensor
from .errors import ConfigurationError, DomainError, NumericError


class Classifier(ABC):
    """Deterministic image classifier with an ordered label set."""

    name: str
    label_set: tuple[str, ...]

    @abstractmethod
    def logits(self, image: ImageTensor) -> torch.Tensor:
        """Return a [K] logit vector, differentiable w.r.t. the image data."""


def top1(logits) -> int:
    """Index of the maximum logit; ties break toward the lowest index."""
    arr = np.asarray(
        logits.detach().numpy() if isinstance(logits, torch.Tensor) else logits,
        dtype=np.float64,
    ).reshape(-1)
    if arr.size == 0:
        raise DomainError("empty logits")
    return int(np.argmax(arr))


def accuracy(classifier: Classifier, images: Sequence[ImageTensor], labels: Sequence[int]) -> float:
    if len(images) != len(labels):
        raise DomainError(f"{len(images)} images vs {len(labels)} labels")
    if not images:
        raise DomainError("cannot compute accuracy of an empty set")
    correct = 0
    with torch.no_grad():
        for img, y in zip(images, labels):
            correct += int(top1(classifier.logits(img)) == int(y))
    return correct / len(images)


@dataclass
class TransferRow:
    name: str
    adv_accuracy: float
    clean_accuracy: float


@dataclass
class TransferReport:
    rows: list[TransferRow]
    surrogate_name: str
    avg_adv_wo_self: Optional[float]
    avg_clean_wo_self: Optional[float]
    metadata: dict = field(default_factory=dict)


def transfer_matrix(
    adversarial_set: Sequence[ImageTensor],
    clean_set: Sequence[ImageTensor],
    labels: Sequence[int],
    targets: Sequence[Classifier],
    surrogate_name: str,
) -> TransferReport:
    """Top-1 accuracy of each target on the clean and adversarial sets.

    The summary averages exclude any target named like the surrogate; with no
    non-surrogate target the averages are undefined and flagged None.
    """
    if not targets:
        raise DomainError("need at least one target classifier")
    if not (len(adversarial_set) == len(clean_set) == len(labels)):
        raise DomainError("adversarial/clean/label sets must be aligned")
    rows = [
        TransferRow(
            name=t.name,
            adv_accuracy=accuracy(t, adversarial_set, labels),
            clean_accuracy=accuracy(t, clean_set, labels),
        )
        for t in targets
    ]
    others = [r for r in rows if r.name != surrogate_name]
    if others:
        avg_adv = sum(r.adv_accuracy for r in others) / len(others)
        avg_clean = sum(r.clean_accuracy for r in others) / len(others)
    else:
        avg_adv = avg_clean = None
    return TransferReport(
        rows=rows,
        surrogate_name=surrogate_name,
        avg_adv_wo_self=avg_adv,
        avg_clean_wo_self=avg_clean,
        metadata={"n_images": len(labels), "avg_excludes": surrogate_name},
    )


def _as_moments(mu, sigma) -> tuple[np.ndarray, np.ndarray]:
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim == 0:
        sigma = sigma.reshape(1, 1)
    elif sigma.ndim == 1:
        sigma = np.diag(sigma)
    if sigma.shape != (mu.size, mu.size):
        raise DomainError(f"covariance shape {sigma.shape} does not fit mean {mu.shape}")
    return mu, sigma


def _psd_sqrt(sigma: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    sym = 0.5 * (sigma + sigma.T)
    if not np.allclose(sigma, sym, atol=1e-8):
        raise NumericError("covariance is not symmetric")
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < -tol:
        raise NumericError(f"covariance has eigenvalue {vals.min():.3g} below -{tol}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)) between two Gaussians.

    The cross term is evaluated through the symmetrized product
    sqrt(S1) S2 sqrt(S1) with eigenvalues clipped at zero.
    """
    mu1, sigma1 = _as_moments(mu1, sigma1)
    mu2, sigma2 = _as_moments(mu2, sigma2)
    if mu1.shape != mu2.shape:
        raise DomainError("moment dimensions differ")
    root1 = _psd_sqrt(sigma1)
    inner = root1 @ sigma2 @ root1
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    cross = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    d2 = float(((mu1 - mu2) ** 2).sum() + np.trace(sigma1) + np.trace(sigma2) - 2.0 * cross)
    return max(d2, 0.0)


class RandomProjectionFeatures:
    """Default desk-scale feature extractor: mean-pool then a fixed random projection."""

    def __init__(self, seed: int = 0, out_dim: int = 8, pool: int = 4) -> None:
        self.out_dim = out_dim
        self.pool = pool
        self._seed = seed
        self._proj: Optional[np.ndarray] = None

    def _projection(self, in_dim: int) -> np.ndarray:
        if self._proj is None or self._proj.shape[0] != in_dim:
            rng = np.random.default_rng(self._seed)
            self._proj = rng.standard_normal((in_dim, self.out_dim)) / math.sqrt(in_dim)
        return self._proj

    def __call__(self, image: ImageTensor) -> np.ndarray:
        x = image.data.detach().permute(2, 0, 1).unsqueeze(0)
        pooled = F.adaptive_avg_pool2d(x, self.pool).reshape(-1).numpy()
        return pooled @ self._projection(pooled.size)


def fit_gaussian(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = features.mean(axis=0)
    centered = features - mu
    denom = max(features.shape[0] - 1, 1)
    return mu, (centered.T @ centered) / denom


def fid(
    feature_extractor: Callable[[ImageTensor], np.ndarray],
    set_a: Sequence[ImageTensor],
    set_b: Sequence[ImageTensor],
) -> float:
    """Frechet distance between Gaussian fits of extracted features."""
    if not set_a or not set_b:
        raise DomainError("feature sets must be non-empty")
    feats_a = np.stack([feature_extractor(img) for img in set_a])
    feats_b = np.stack([feature_extractor(img) for img in set_b])
    dim = feats_a.shape[1]
    if min(len(set_a), len(set_b)) <= dim:
        warnings.warn(
            f"set sizes ({len(set_a)}, {len(set_b)}) <= feature dim {dim}; "
            "covariance estimates will be poor",
            stacklevel=2,
        )
    mu_a, sig_a = fit_gaussian(feats_a)
    mu_b, sig_b = fit_gaussian(feats_b)
    return frechet_distance(mu_a, sig_a, mu_b, sig_b)


def psnr(a: ImageTensor, b: ImageTensor) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images."""
    if a.shape != b.shape:
        raise DomainError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(((a.data - b.data) ** 2).mean())
    return 10.0 * math.log10(1.0 / max(mse, 1e-300))


class _ToyClassifierNet(nn.Module):
    def __init__(self, k: int, width: int) -> None:
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, 2, 1), nn.SiLU(),
            nn.Conv2d(width, 2 * width, 3, 2, 1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(2), nn.Flatten(),
            nn.Linear(2 * width * 4, k),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class ToyClassifier(Classifier):
    """Small convolutional classifier for the synthetic set.

    Raw network outputs are divided by a fixed scale: a fully converged toy
    net saturates its softmax and the attack gradient vanishes otherwise.
    Argmax (and therefore every accuracy metric) is unaffected.
    """

    LOGIT_SCALE = 10.0

    def __init__(self, seed: int, label_set: Sequence[str], width: int = 16) -> None:
        if len(label_set) < 2:
            raise DomainError("need at least two classes")
        self.seed = seed
        self.label_set = tuple(label_set)
        self.name = f"toy-cnn-s{seed}"
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.net = _ToyClassifierNet(len(self.label_set), width).to(torch.float64)
        self.net.eval()

    def logits(self, image: ImageTensor) -> torch.Tensor:
        x = image.data.permute(2, 0, 1).unsqueeze(0).to(torch.float64)
        return self.net(x)[0] / self.LOGIT_SCALE

    def weights_digest(self) -> str:
        h = hashlib.sha256()
        for p in self.net.parameters():
            h.update(p.detach().numpy().tobytes())
        return h.hexdigest()


def build_toy_classifier(seed: int, k: int = 2, label_set: Optional[Sequence[str]] = None) -> ToyClassifier:
    if k < 2:
        raise DomainError("need K >= 2")
    if label_set is None:
        label_set = tuple(f"class{i}" for i in range(k))
    if len(label_set) != k:
        raise ConfigurationError(f"label_set has {len(label_set)} names, expected {k}")
    return build_labeled_toy_classifier(seed, label_set)


def build_labeled_toy_classifier(seed: int, label_set: Sequence[str]) -> ToyClassifier:
    return ToyClassifier(seed, label_set)


def train_toy_classifier(
    classifier: ToyClassifier,
    dataset: Sequence[tuple[ImageTensor, int]],
    epochs: int = 500,
    lr: float = 2e-3,
    batch_size: int = 32,
) -> ToyClassifier:
    """Train in place on (image, label) pairs; deterministic under the classifier's seed."""
    if not dataset:
        raise DomainError("empty training dataset")
    images = torch.stack([img.data.permute(2, 0, 1) for img, _ in dataset]).to(torch.float64)
    labels = torch.tensor([int(y) for _, y in dataset], dtype=torch.long)
    net = classifier.net.train()
    for p in net.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    g = torch.Generator().manual_seed(classifier.seed * 31 + 5)
    n = len(dataset)
    for _ in range(epochs):
        perm = torch.randperm(n, generator=g)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            loss = F.cross_entropy(net(images[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return classifier
