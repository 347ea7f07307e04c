"""Deterministic toy diffusion backbone for desk-scale verification.

A miniature of the production setup with identical interfaces: a conv
autoencoder with 8x spatial reduction into 4 latent channels, a hash-seeded
text encoder, and a two-block noise-prediction network where each block holds
one self-attention and one cross-attention layer (block 0 at latent
resolution, block 1 at half resolution; both are tapped). Weights are seeded
and lightly trained on the synthetic image family so inversion and
reconstruction are meaningful.

Everything runs in float64: the package's algebra and gradient checks are
specified at tolerances that float32 does not reliably meet.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from . import synthetic
from .backbone import (
    CONDITIONAL,
    UNCONDITIONAL,
    AttentionRecord,
    AttentionRecorder,
    DiffusionBackbone,
    ImageTensor,
    LatentTensor,
    TextEmbedding,
    stable_token_seed,
)

BOS, EOS, PAD = "<bos>", "<eos>", "<pad>"


@dataclass(frozen=True)
class ToyBackboneConfig:
    image_size: int = 32
    image_channels: int = 3
    latent_channels: int = 4
    spatial_reduction: int = 8
    base_channels: int = 16
    text_len: int = 8
    text_dim: int = 16
    attn_heads: int = 2
    # Fixed residual gate on cross-attention: keeps conditional and
    # unconditional predictions close so deterministic inversion round-trips
    # stay accurate, without affecting the attention probabilities themselves.
    cross_attn_gate: float = 0.05
    # Temperature on cross-attention logits: peaks text-to-pixel attention the
    # way large pretrained models do, so normalized maps have real background.
    cross_attn_sharpness: float = 4.0
    time_dim: int = 32
    max_timestep: int = 1000
    seed: int = 0
    train_pool: int = 256
    train_pool_seed: int = 1234
    autoencoder_steps: int = 1400
    autoencoder_lr: float = 3e-3
    noise_steps: int = 150
    noise_batch: int = 8
    noise_lr: float = 2e-3

    @property
    def latent_hw(self) -> int:
        if self.image_size % self.spatial_reduction:
            raise ValueError("image_size must be divisible by the spatial reduction")
        return self.image_size // self.spatial_reduction


def timestep_embedding(t: float, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    )
    angles = t * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)])


class ToyAutoencoder(nn.Module):
    def __init__(self, cfg: ToyBackboneConfig) -> None:
        super().__init__()
        c_img, c_lat = cfg.image_channels, cfg.latent_channels
        self.enc = nn.Sequential(
            nn.Conv2d(c_img, 32, 3, 2, 1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, 2, 1), nn.SiLU(),
            nn.Conv2d(64, c_lat, 3, 2, 1),
        )
        self.dec = nn.Sequential(
            nn.ConvTranspose2d(c_lat, 64, 4, 2, 1), nn.SiLU(),
            nn.ConvTranspose2d(64, 32, 4, 2, 1), nn.SiLU(),
            nn.ConvTranspose2d(32, 16, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(16, c_img, 3, 1, 1),
        )

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.enc(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        # sigmoid keeps decoded values inside [0, 1] with nonzero gradient
        return torch.sigmoid(self.dec(z))


class _Attention(nn.Module):
    """Single-layer multi-head attention over flattened pixels.

    Returns the output features and the head-averaged attention probabilities
    (rows sum to 1); the probabilities stay on the autograd graph.
    """

    def __init__(self, ch: int, kv_dim: int, heads: int, sharpness: float = 1.0) -> None:
        super().__init__()
        self.heads = heads
        self.sharpness = sharpness
        self.norm = nn.LayerNorm(ch)
        self.q = nn.Linear(ch, ch, bias=False)
        self.k = nn.Linear(kv_dim, ch, bias=False)
        self.v = nn.Linear(kv_dim, ch, bias=False)
        self.out = nn.Linear(ch, ch, bias=False)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None):
        h = self.norm(x)
        src = h if context is None else context
        hw, ch = h.shape
        dh = ch // self.heads
        q = self.q(h).reshape(hw, self.heads, dh).permute(1, 0, 2)
        k = self.k(src).reshape(src.shape[0], self.heads, dh).permute(1, 0, 2)
        v = self.v(src).reshape(src.shape[0], self.heads, dh).permute(1, 0, 2)
        logits = self.sharpness * (q @ k.transpose(1, 2)) / math.sqrt(dh)
        probs = torch.softmax(logits, dim=-1)
        out = (probs @ v).permute(1, 0, 2).reshape(hw, ch)
        return self.out(out), probs.mean(dim=0)


class _Block(nn.Module):
    def __init__(self, ch: int, cfg: ToyBackboneConfig) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, 1, 1)
        self.time_proj = nn.Linear(cfg.time_dim, ch)
        self.self_attn = _Attention(ch, ch, cfg.attn_heads)
        self.cross_attn = _Attention(
            ch, cfg.text_dim, cfg.attn_heads, sharpness=cfg.cross_attn_sharpness
        )
        self.conv2 = nn.Conv2d(ch, ch, 3, 1, 1)
        self.cross_gate = cfg.cross_attn_gate

    def forward(self, x: torch.Tensor, temb: torch.Tensor, text: torch.Tensor):
        _, c, h, w = x.shape
        hidden = self.conv1(F.silu(x)) + self.time_proj(temb)[None, :, None, None]
        seq = hidden.reshape(c, h * w).t()
        sa_out, self_map = self.self_attn(seq)
        seq = seq + sa_out
        ca_out, cross_map = self.cross_attn(seq, text)
        seq = seq + self.cross_gate * ca_out
        hidden = seq.t().reshape(1, c, h, w)
        return x + self.conv2(F.silu(hidden)), (h, w), self_map, cross_map


class ToyNoiseNet(nn.Module):
    def __init__(self, cfg: ToyBackboneConfig) -> None:
        super().__init__()
        c = cfg.base_channels
        self.time_dim = cfg.time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(),
            nn.Linear(cfg.time_dim, cfg.time_dim),
        )
        self.stem = nn.Conv2d(cfg.latent_channels, c, 3, 1, 1)
        self.block0 = _Block(c, cfg)
        self.down = nn.Conv2d(c, 2 * c, 3, 2, 1)
        self.block1 = _Block(2 * c, cfg)
        self.up = nn.ConvTranspose2d(2 * c, c, 4, 2, 1)
        self.head = nn.Conv2d(c, cfg.latent_channels, 3, 1, 1)
        # Zero-initialized head: the untrained net predicts zero noise, and
        # light training keeps predictions small and smooth, which is what
        # makes first-order inversion nearly exact.
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, z: torch.Tensor, t: int, text: torch.Tensor):
        temb = self.time_mlp(timestep_embedding(float(t), self.time_dim))
        h = self.stem(z)
        h0, res0, s0, c0 = self.block0(h, temb, text)
        h1 = self.down(h0)
        h1, res1, s1, c1 = self.block1(h1, temb, text)
        h = h0 + self.up(h1)
        eps = self.head(F.silu(h))
        taps = [("block0", res0, s0, c0), ("block1", res1, s1, c1)]
        return eps, taps


class ToyBackbone(DiffusionBackbone):
    """Frozen toy backbone; safe for concurrent read-only use."""

    def __init__(
        self,
        cfg: ToyBackboneConfig,
        autoencoder: ToyAutoencoder,
        noise_net: ToyNoiseNet,
        latent_scale: float,
    ) -> None:
        self.config = cfg
        hw = cfg.latent_hw
        self.image_shape = (cfg.image_size, cfg.image_size, cfg.image_channels)
        self.latent_shape = (cfg.latent_channels, hw, hw)
        self.text_shape = (cfg.text_len, cfg.text_dim)
        self.max_timestep = cfg.max_timestep
        self.autoencoder = autoencoder.eval()
        self.noise_net = noise_net.eval()
        self.latent_scale = latent_scale
        for p in self.autoencoder.parameters():
            p.requires_grad_(False)
        for p in self.noise_net.parameters():
            p.requires_grad_(False)
        self._token_cache: dict[str, torch.Tensor] = {}

    # ---- text ----
    def _token_embedding(self, token: str) -> torch.Tensor:
        cached = self._token_cache.get(token)
        if cached is None:
            g = torch.Generator().manual_seed(stable_token_seed(token, self.config.seed))
            cached = torch.randn(self.config.text_dim, generator=g, dtype=torch.float64)
            self._token_cache[token] = cached
        return cached

    def encode_text(self, prompt: str) -> TextEmbedding:
        words = prompt.split()
        capacity = self.config.text_len - 2
        words = words[:capacity]  # markers always fit
        rows = [self._token_embedding(BOS)]
        spans = []
        for i, word in enumerate(words):
            rows.append(self._token_embedding(word))
            spans.append((word, (i + 1, i + 2)))
        rows.append(self._token_embedding(EOS))
        while len(rows) < self.config.text_len:
            rows.append(self._token_embedding(PAD))
        kind = UNCONDITIONAL if not words else CONDITIONAL
        return TextEmbedding(torch.stack(rows), kind=kind, word_spans=tuple(spans))

    # ---- autoencoder ----
    def encode_image(self, img: ImageTensor) -> LatentTensor:
        self._check_image(img)
        x = img.data.permute(2, 0, 1).unsqueeze(0).to(torch.float64)
        z = self.autoencoder.encode(x)[0] * self.latent_scale
        return LatentTensor(z, timestep_tag=0)

    def decode_latent(self, z: LatentTensor) -> ImageTensor:
        self._check_latent(z)
        x = self.autoencoder.decode(z.data.unsqueeze(0) / self.latent_scale)[0]
        return ImageTensor(x.permute(1, 2, 0).clamp(0.0, 1.0))

    # ---- noise prediction ----
    def predict_noise(
        self,
        z: LatentTensor,
        t: int,
        e: TextEmbedding,
        tap: Optional[AttentionRecorder] = None,
    ) -> LatentTensor:
        self._check_latent(z)
        self._check_timestep(t)
        eps, taps = self.noise_net(z.data.unsqueeze(0), t, e.tokens)
        if tap is not None:
            for layer_id, res, self_map, cross_map in taps:
                tap.add(
                    AttentionRecord(
                        step=t,
                        layer_id=layer_id,
                        resolution=res,
                        cross=cross_map,
                        self_attn=self_map,
                    )
                )
        return LatentTensor(eps[0], timestep_tag=t)


def _alpha_bar_grid(max_t: int) -> torch.Tensor:
    # mirrors the default linear-beta schedule used by the engine
    betas = torch.cat(
        [torch.zeros(1, dtype=torch.float64),
         torch.linspace(1e-4, 2e-2, max_t, dtype=torch.float64)]
    )
    return torch.cumprod(1.0 - betas, dim=0)


def build_toy_backbone(cfg: ToyBackboneConfig = ToyBackboneConfig()) -> ToyBackbone:
    """Construct and lightly train the toy backbone. Deterministic under cfg.seed."""
    images, labels = synthetic.generate_images(
        cfg.train_pool, cfg.image_size, cfg.train_pool_seed + cfg.seed
    )
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        autoencoder = ToyAutoencoder(cfg).to(torch.float64)
        torch.manual_seed(cfg.seed + 1)
        noise_net = ToyNoiseNet(cfg).to(torch.float64)

    # stage 1: autoencoder reconstruction
    opt = torch.optim.Adam(autoencoder.parameters(), lr=cfg.autoencoder_lr)
    g = torch.Generator().manual_seed(cfg.seed * 7919 + 4242)
    for _ in range(cfg.autoencoder_steps):
        idx = torch.randint(0, cfg.train_pool, (16,), generator=g)
        batch = images[idx]
        loss = F.mse_loss(autoencoder.decode(autoencoder.encode(batch)), batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
    for p in autoencoder.parameters():
        p.requires_grad_(False)

    with torch.no_grad():
        latents = autoencoder.encode(images)
        latent_scale = 1.0 / float(latents.std())
        latents = latents * latent_scale

    # stage 2: noise prediction on scaled latents, conditioned on class names
    # (10% unconditional dropout so the null embedding is trained too)
    backbone_tmp = ToyBackbone(cfg, autoencoder, noise_net, latent_scale)
    class_texts = [backbone_tmp.encode_text(name).tokens for name in synthetic.CLASS_NAMES]
    null_tokens = backbone_tmp.encode_text("").tokens
    alpha_bars = _alpha_bar_grid(cfg.max_timestep)
    for p in noise_net.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(noise_net.parameters(), lr=cfg.noise_lr)
    g = torch.Generator().manual_seed(cfg.seed * 6007 + 99)
    for _ in range(cfg.noise_steps):
        opt.zero_grad()
        for _ in range(cfg.noise_batch):
            i = int(torch.randint(0, cfg.train_pool, (1,), generator=g))
            z0 = latents[i : i + 1]
            t = int(torch.randint(1, cfg.max_timestep + 1, (1,), generator=g))
            eps = torch.randn(z0.shape, generator=g, dtype=torch.float64)
            ab = float(alpha_bars[t])
            zt = math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps
            drop = float(torch.rand(1, generator=g, dtype=torch.float64)) < 0.1
            text = null_tokens if drop else class_texts[int(labels[i])]
            pred, _ = noise_net(zt, t, text)
            (F.mse_loss(pred, eps) / cfg.noise_batch).backward()
        opt.step()

    return ToyBackbone(cfg, autoencoder, noise_net, latent_scale)
