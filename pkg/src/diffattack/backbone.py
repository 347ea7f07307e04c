"""Domain types and the abstract interface to a latent text-conditioned diffusion model.

The backbone owns four operations: image <-> latent autoencoding, text
encoding, and noise prediction with attention taps. Everything downstream
(inversion, denoising, the attack itself) is written against the abstract
interface so an external pretrained model can be wired in through
:class:`ExternalBackboneAdapter` without touching the rest of the code.
"""
from __future__ import annotations

import hashlib
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Optional

import torch

from .errors import ConfigurationError, DomainError

CONDITIONAL = "conditional"
UNCONDITIONAL = "unconditional"


def _require_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise DomainError(f"{what} contains non-finite values")


@dataclass
class ImageTensor:
    """An image as a float tensor of shape [H, W, C] with values in [0, 1]."""

    data: torch.Tensor

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise DomainError(f"image must be [H, W, C], got shape {tuple(self.data.shape)}")
        _require_finite(self.data, "image")
        values = self.data.detach()
        lo, hi = float(values.min()), float(values.max())
        if lo < 0.0 or hi > 1.0:
            raise DomainError(f"image values must lie in [0, 1], got [{lo:.4g}, {hi:.4g}]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]


@dataclass
class LatentTensor:
    """A diffusion latent of shape [c, h, w], optionally tagged with its timestep."""

    data: torch.Tensor
    timestep_tag: Optional[int] = None

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise DomainError(f"latent must be [c, h, w], got shape {tuple(self.data.shape)}")
        _require_finite(self.data, "latent")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]


@dataclass
class TextEmbedding:
    """Token embeddings [L, d] for one prompt.

    ``word_spans`` lists, in prompt order, each source word with the half-open
    token index range it occupies; ``token_spans`` is the dict view of it.
    Begin/end marker and padding tokens are never covered by a span.
    """

    tokens: torch.Tensor
    kind: str = CONDITIONAL
    word_spans: tuple[tuple[str, tuple[int, int]], ...] = ()

    def __post_init__(self) -> None:
        if self.tokens.ndim != 2:
            raise DomainError(f"text embedding must be [L, d], got {tuple(self.tokens.shape)}")
        if self.kind not in (CONDITIONAL, UNCONDITIONAL):
            raise DomainError(f"unknown embedding kind {self.kind!r}")

    @property
    def token_spans(self) -> dict[str, tuple[int, int]]:
        return dict(self.word_spans)

    def word_token_indices(self) -> list[int]:
        """Token indices of all prompt words (markers and padding excluded)."""
        out: list[int] = []
        for _, (a, b) in self.word_spans:
            out.extend(range(a, b))
        return out


@dataclass
class AttentionRecord:
    """Attention maps tapped from one layer during one denoising step.

    ``cross`` is [h*w, L] (pixels x text tokens) and ``self_attn`` is
    [h*w, h*w]; rows of both are softmax-normalized. The stored tensors stay
    on the autograd graph so losses can differentiate through them; use
    :meth:`detached` for analysis/export.
    """

    step: int
    layer_id: str
    resolution: tuple[int, int]
    cross: torch.Tensor
    self_attn: torch.Tensor

    def detached(self) -> "AttentionRecord":
        return AttentionRecord(
            step=self.step,
            layer_id=self.layer_id,
            resolution=self.resolution,
            cross=self.cross.detach().clone(),
            self_attn=self.self_attn.detach().clone(),
        )


class AttentionRecorder:
    """Collects AttentionRecords from noise-prediction calls.

    A recorder is owned by exactly one run; it is not safe to share across
    concurrent attacks.
    """

    def __init__(self) -> None:
        self.records: list[AttentionRecord] = []

    def add(self, record: AttentionRecord) -> None:
        self.records.append(record)

    def clear(self) -> None:
        self.records.clear()

    def self_maps(self) -> list[torch.Tensor]:
        """Self-attention maps in recording order, one per (step, layer)."""
        return [r.self_attn for r in self.records]

    def __len__(self) -> int:
        return len(self.records)


class DiffusionBackbone(ABC):
    """Interface every diffusion backbone (toy or external) must expose."""

    image_shape: tuple[int, int, int]  # (H, W, C)
    latent_shape: tuple[int, int, int]  # (c, h, w)
    text_shape: tuple[int, int]  # (L, d)
    max_timestep: int

    @abstractmethod
    def encode_image(self, img: ImageTensor) -> LatentTensor:
        """Map an image to its latent. Deterministic."""

    @abstractmethod
    def decode_latent(self, z: LatentTensor) -> ImageTensor:
        """Map a latent back to an image with values clamped to [0, 1]."""

    @abstractmethod
    def encode_text(self, prompt: str) -> TextEmbedding:
        """Deterministically embed a prompt; "" yields the null embedding."""

    @abstractmethod
    def predict_noise(
        self,
        z: LatentTensor,
        t: int,
        e: TextEmbedding,
        tap: Optional[AttentionRecorder] = None,
    ) -> LatentTensor:
        """Predict the noise content of latent ``z`` at timestep ``t``.

        Output has the latent's shape and is differentiable w.r.t. both
        ``z.data`` and ``e.tokens``. When ``tap`` is given, one
        AttentionRecord per tapped layer is appended.
        """

    # ---- shared validation helpers ----
    def _check_image(self, img: ImageTensor) -> None:
        if img.shape != self.image_shape:
            raise ConfigurationError(
                f"image shape {img.shape} does not match backbone {self.image_shape}"
            )

    def _check_latent(self, z: LatentTensor) -> None:
        if z.shape != self.latent_shape:
            raise ConfigurationError(
                f"latent shape {z.shape} does not match backbone {self.latent_shape}"
            )

    def _check_timestep(self, t: int) -> None:
        if not 0 <= t <= self.max_timestep:
            raise DomainError(f"timestep {t} outside [0, {self.max_timestep}]")


class ExternalBackboneAdapter(DiffusionBackbone):
    """Wrap user-supplied callables from a pretrained model behind the backbone interface.

    The adapter performs the same shape/timestep validation as the toy
    backbone; the callables receive and return raw tensors. Wiring a real
    latent diffusion model means providing its autoencoder, text encoder and
    noise-prediction (with optional attention hook) here.
    """

    def __init__(
        self,
        *,
        image_shape: tuple[int, int, int],
        latent_shape: tuple[int, int, int],
        text_shape: tuple[int, int],
        max_timestep: int,
        encode_image_fn: Callable[[torch.Tensor], torch.Tensor],
        decode_latent_fn: Callable[[torch.Tensor], torch.Tensor],
        encode_text_fn: Callable[[str], TextEmbedding],
        predict_noise_fn: Callable[..., torch.Tensor],
    ) -> None:
        self.image_shape = image_shape
        self.latent_shape = latent_shape
        self.text_shape = text_shape
        self.max_timestep = max_timestep
        self._encode_image = encode_image_fn
        self._decode_latent = decode_latent_fn
        self._encode_text = encode_text_fn
        self._predict_noise = predict_noise_fn

    def encode_image(self, img: ImageTensor) -> LatentTensor:
        self._check_image(img)
        return LatentTensor(self._encode_image(img.data))

    def decode_latent(self, z: LatentTensor) -> ImageTensor:
        self._check_latent(z)
        return ImageTensor(self._decode_latent(z.data).clamp(0.0, 1.0))

    def encode_text(self, prompt: str) -> TextEmbedding:
        return self._encode_text(prompt)

    def predict_noise(
        self,
        z: LatentTensor,
        t: int,
        e: TextEmbedding,
        tap: Optional[AttentionRecorder] = None,
    ) -> LatentTensor:
        self._check_latent(z)
        self._check_timestep(t)
        return LatentTensor(self._predict_noise(z.data, t, e, tap), timestep_tag=t)


def stable_token_seed(token: str, base_seed: int) -> int:
    """Deterministic, platform-independent seed for one token string."""
    digest = hashlib.sha256(f"{base_seed}:{token}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)
