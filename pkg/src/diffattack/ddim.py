"""Noise schedule, deterministic DDIM stepping, inversion, guided denoising,
and per-step unconditional-embedding (null-text) optimization.

Timestep convention: 0 is the clean point with cumulative alpha exactly 1;
trained timesteps run 1..T. A DDIM segment between two timesteps is a single
affine map in the latent given a frozen noise estimate, so stepping down and
back up with the same estimate is an exact round trip.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import (
    AttentionRecorder,
    DiffusionBackbone,
    LatentTensor,
    TextEmbedding,
)
from .errors import DomainError

# toy default linear-beta range; the schedule math itself is range-agnostic
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative-noise bookkeeping for T trained timesteps.

    ``betas``/``alphas``/``alpha_bars`` are indexed by timestep 0..T where
    index 0 is the clean sentinel (beta 0, cumulative alpha 1).
    ``sample_steps`` is the strictly increasing subset of timesteps the DDIM
    sampler visits.
    """

    total_timesteps: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor
    sample_steps: tuple[int, ...]

    @classmethod
    def from_betas(
        cls,
        betas: Sequence[float],
        sample_steps: Optional[Sequence[int]] = None,
    ) -> "NoiseSchedule":
        """Build a schedule from per-timestep betas (timesteps 1..T).

        Zero betas are permitted here for degenerate test paths; use
        :func:`make_schedule` for validated production schedules.
        """
        b = torch.as_tensor(list(betas), dtype=torch.float64)
        if b.ndim != 1 or b.numel() == 0:
            raise DomainError("betas must be a non-empty 1-D sequence")
        if float(b.min()) < 0.0 or float(b.max()) >= 1.0:
            raise DomainError("betas must lie in [0, 1)")
        total = int(b.numel())
        b = torch.cat([torch.zeros(1, dtype=torch.float64), b])
        alphas = 1.0 - b
        alpha_bars = torch.cumprod(alphas, dim=0)
        steps = tuple(sample_steps) if sample_steps is not None else tuple(range(1, total + 1))
        if list(steps) != sorted(set(steps)):
            raise DomainError("sample_steps must be strictly increasing")
        if steps and (steps[0] < 1 or steps[-1] > total):
            raise DomainError("sample_steps must lie within 1..T")
        return cls(total, b, alphas, alpha_bars, steps)

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.total_timesteps:
            raise DomainError(f"timestep {t} outside [0, {self.total_timesteps}]")
        return float(self.alpha_bars[t])


def make_schedule(
    total_timesteps: int,
    beta_start: float,
    beta_end: float,
    n_sample_steps: int,
) -> NoiseSchedule:
    """Linear-beta schedule with evenly spaced DDIM sample steps."""
    if n_sample_steps < 1 or total_timesteps < n_sample_steps:
        raise DomainError("need total_timesteps >= n_sample_steps >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise DomainError("need 0 < beta_start <= beta_end < 1")
    betas = torch.linspace(beta_start, beta_end, total_timesteps, dtype=torch.float64)
    steps = tuple((i + 1) * total_timesteps // n_sample_steps for i in range(n_sample_steps))
    sched = NoiseSchedule.from_betas(betas, steps)
    diffs = sched.alpha_bars[1:] - sched.alpha_bars[:-1]
    if not bool((diffs < 0).all()):
        raise DomainError("cumulative alphas must be strictly decreasing")
    return sched


def _check_pair(a: LatentTensor, b: LatentTensor) -> None:
    if a.shape != b.shape:
        raise DomainError(f"latent shapes differ: {a.shape} vs {b.shape}")


def forward_sample(
    x0: LatentTensor, t: int, eps: LatentTensor, sched: NoiseSchedule
) -> LatentTensor:
    """Closed-form noising: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    _check_pair(x0, eps)
    ab = sched.alpha_bar(t)
    out = math.sqrt(ab) * x0.data + math.sqrt(1.0 - ab) * eps.data
    return LatentTensor(out, timestep_tag=t)


def _ddim_segment(
    x: torch.Tensor, ab_from: float, ab_to: float, eps_hat: torch.Tensor
) -> torch.Tensor:
    pred_x0 = (x - math.sqrt(1.0 - ab_from) * eps_hat) / math.sqrt(ab_from)
    return math.sqrt(ab_to) * pred_x0 + math.sqrt(1.0 - ab_to) * eps_hat


def ddim_denoise_step(
    x_t: LatentTensor, t: int, t_prev: int, eps_hat: LatentTensor, sched: NoiseSchedule
) -> LatentTensor:
    """Deterministic (sigma = 0) DDIM step from timestep t down to t_prev."""
    _check_pair(x_t, eps_hat)
    if t_prev > t:
        raise DomainError(f"t_prev={t_prev} must not exceed t={t}")
    if t_prev == t:
        return LatentTensor(x_t.data, timestep_tag=t_prev)
    out = _ddim_segment(x_t.data, sched.alpha_bar(t), sched.alpha_bar(t_prev), eps_hat.data)
    return LatentTensor(out, timestep_tag=t_prev)


def ddim_invert_step(
    x_t: LatentTensor, t: int, t_next: int, eps_hat: LatentTensor, sched: NoiseSchedule
) -> LatentTensor:
    """Algebraic reversal of the denoise step: timestep t up to t_next."""
    _check_pair(x_t, eps_hat)
    if t_next < t:
        raise DomainError(f"t_next={t_next} must not precede t={t}")
    if t_next == t:
        return LatentTensor(x_t.data, timestep_tag=t_next)
    out = _ddim_segment(x_t.data, sched.alpha_bar(t), sched.alpha_bar(t_next), eps_hat.data)
    return LatentTensor(out, timestep_tag=t_next)


def guided_noise(
    backbone: DiffusionBackbone,
    z: LatentTensor,
    t: int,
    cond: TextEmbedding,
    uncond: TextEmbedding,
    scale: float,
    tap: Optional[AttentionRecorder] = None,
) -> LatentTensor:
    """Classifier-free-guided prediction: eps_u + scale * (eps_c - eps_u).

    Attention taps come from the conditional pass. The scale 0 and 1
    endpoints return the unconditional / conditional prediction exactly (the
    redundant pass is skipped unless a tap requires it).
    """
    if scale < 0:
        raise DomainError("guidance scale must be non-negative")
    if scale == 1.0:
        return backbone.predict_noise(z, t, cond, tap)
    if scale == 0.0:
        eps_u = backbone.predict_noise(z, t, uncond)
        if tap is not None:
            backbone.predict_noise(z, t, cond, tap)
        return eps_u
    eps_u = backbone.predict_noise(z, t, uncond)
    eps_c = backbone.predict_noise(z, t, cond, tap)
    return LatentTensor(eps_u.data + scale * (eps_c.data - eps_u.data), timestep_tag=t)


@dataclass
class Trajectory:
    """Latents visited by inversion, ordered clean -> noisy.

    ``timesteps[i]`` is the schedule position of ``latents[i]``;
    ``uncond_embeds`` (top-down order, one per denoising step) is filled in
    after null-text optimization.
    """

    latents: list[LatentTensor]
    timesteps: list[int]
    guidance_scale: float
    uncond_embeds: Optional[list[TextEmbedding]] = None

    @property
    def top(self) -> LatentTensor:
        return self.latents[-1]

    @property
    def n_steps(self) -> int:
        return len(self.latents) - 1


def invert(
    backbone: DiffusionBackbone,
    x0_latent: LatentTensor,
    sched: NoiseSchedule,
    n_invert_steps: int,
    prompt: TextEmbedding,
    scale: float = 0.0,
) -> Trajectory:
    """Run deterministic inversion for n steps from the clean latent.

    Guidance defaults to 0 during inversion, i.e. the unconditional
    prediction drives the reversal. The estimate for each segment is taken at
    the current latent with the segment's upper timestep, matching the
    timestep the denoise direction uses for that segment.
    """
    if not 0 <= n_invert_steps <= len(sched.sample_steps):
        raise DomainError(
            f"n_invert_steps={n_invert_steps} outside 0..{len(sched.sample_steps)}"
        )
    null = backbone.encode_text("")
    positions = [0] + list(sched.sample_steps[:n_invert_steps])
    latents = [LatentTensor(x0_latent.data, timestep_tag=0)]
    z = latents[0]
    with torch.no_grad():
        for i in range(n_invert_steps):
            t_from, t_to = positions[i], positions[i + 1]
            eps = guided_noise(backbone, z, t_to, prompt, null, scale=scale)
            z = ddim_invert_step(z, t_from, t_to, eps, sched)
            latents.append(z)
    return Trajectory(latents=latents, timesteps=positions, guidance_scale=scale)


def denoise(
    backbone: DiffusionBackbone,
    x_t: LatentTensor,
    sched: NoiseSchedule,
    prompt: TextEmbedding,
    uncond_embeds: Sequence[TextEmbedding],
    scale: float,
    tap: Optional[AttentionRecorder] = None,
) -> LatentTensor:
    """Guided denoising back to the clean point; one uncond embedding per step.

    The number of steps is len(uncond_embeds); it must match the latent's
    timestep tag when one is present. Fully differentiable w.r.t. x_t and the
    embeddings.
    """
    n = len(uncond_embeds)
    if n > len(sched.sample_steps):
        raise DomainError("more unconditional embeddings than sample steps")
    positions = [0] + list(sched.sample_steps[:n])
    if x_t.timestep_tag is not None and x_t.timestep_tag != positions[-1]:
        raise DomainError(
            f"latent tagged t={x_t.timestep_tag} but {n} embeddings imply t={positions[-1]}"
        )
    z = x_t
    for i in range(n, 0, -1):
        eps = guided_noise(
            backbone, z, positions[i], prompt, uncond_embeds[n - i], scale, tap
        )
        z = ddim_denoise_step(z, positions[i], positions[i - 1], eps, sched)
    return z


@dataclass
class NullTextResult:
    """Optimized per-step unconditional embeddings plus gap diagnostics."""

    embeddings: list[TextEmbedding]
    initial_gaps: list[float]
    final_gaps: list[float]


def optimize_null_text(
    backbone: DiffusionBackbone,
    traj: Trajectory,
    sched: NoiseSchedule,
    prompt: TextEmbedding,
    scale: float,
    iters: int = 10,
    lr: float = 1e-2,
) -> NullTextResult:
    """Per-step unconditional-embedding optimization against the inversion trajectory.

    For each denoising step (top-down), the embedding is tuned so the guided
    step lands on the recorded trajectory latent; each step initializes from
    the previous step's result and the best iterate is kept, so no step's gap
    can exceed its initialization. At guidance scale 1 the unconditional
    branch cancels and the optimization is a no-op on the gap.
    """
    k = traj.n_steps
    null = backbone.encode_text("")
    embeddings: list[TextEmbedding] = []
    initial_gaps: list[float] = []
    final_gaps: list[float] = []
    z = LatentTensor(traj.top.data.detach(), timestep_tag=traj.timesteps[-1])
    u_tokens = null.tokens.clone()
    for i in range(k, 0, -1):
        t_from, t_to = traj.timesteps[i], traj.timesteps[i - 1]
        ab_from, ab_to = sched.alpha_bar(t_from), sched.alpha_bar(t_to)
        target = traj.latents[i - 1].data.detach()
        with torch.no_grad():
            eps_c = backbone.predict_noise(z, t_from, prompt).data
        u_tokens = u_tokens.detach().clone().requires_grad_(True)
        opt = torch.optim.Adam([u_tokens], lr=lr)
        best_tokens = u_tokens.detach().clone()
        best_gap = math.inf
        init_gap = math.inf
        for it in range(iters + 1):
            u = TextEmbedding(u_tokens, kind=null.kind, word_spans=null.word_spans)
            eps_u = backbone.predict_noise(z, t_from, u).data
            eps = eps_u + scale * (eps_c - eps_u)
            gap = F.mse_loss(_ddim_segment(z.data, ab_from, ab_to, eps), target)
            gap_val = float(gap.detach())
            if it == 0:
                init_gap = gap_val
            if gap_val < best_gap:
                best_gap = gap_val
                best_tokens = u_tokens.detach().clone()
            if it == iters:
                break
            opt.zero_grad()
            gap.backward()
            opt.step()
        initial_gaps.append(init_gap)
        final_gaps.append(best_gap)
        u_tokens = best_tokens
        best = TextEmbedding(best_tokens, kind=null.kind, word_spans=null.word_spans)
        embeddings.append(best)
        with torch.no_grad():
            eps_u = backbone.predict_noise(z, t_from, best).data
            eps = eps_u + scale * (eps_c - eps_u)
            z = LatentTensor(_ddim_segment(z.data, ab_from, ab_to, eps), timestep_tag=t_to)
    return NullTextResult(embeddings, initial_gaps, final_gaps)


def save_trajectory(traj: Trajectory, path: Path) -> None:
    """Binary debug dump: stacked latents plus the visited timesteps."""
    stacked = np.stack([lat.data.detach().numpy() for lat in traj.latents])
    np.savez(
        path,
        latents=stacked,
        timesteps=np.asarray(traj.timesteps, dtype=np.int64),
        guidance_scale=np.asarray([traj.guidance_scale]),
    )


def load_trajectory(path: Path) -> Trajectory:
    data = np.load(path)
    timesteps = [int(t) for t in data["timesteps"]]
    latents = [
        LatentTensor(torch.from_numpy(arr.copy()), timestep_tag=t)
        for arr, t in zip(data["latents"], timesteps)
    ]
    return Trajectory(
        latents=latents,
        timesteps=timesteps,
        guidance_scale=float(data["guidance_scale"][0]),
    )
