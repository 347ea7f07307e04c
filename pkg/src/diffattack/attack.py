"""The latent-space attack: loss composition and the optimization loops.

The attack inverts an image into the diffusion latent space, freezes a copy
of the inverted latent, then optimizes the live copy so the re-denoised image
(a) misleads the surrogate classifier, (b) spreads the model's cross-attention
evenly over pixels, and (c) keeps self-attention structure close to the frozen
copy's. Variants: pseudo-mask blending, multi-category captions, and a
text-embedding attack that perturbs the prompt instead of the latent.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from . import attention as attn
from .backbone import (
    CONDITIONAL,
    AttentionRecorder,
    DiffusionBackbone,
    ImageTensor,
    LatentTensor,
    TextEmbedding,
)
from .ddim import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    NoiseSchedule,
    denoise,
    invert,
    make_schedule,
    optimize_null_text,
)
from .errors import ConfigurationError, DomainError

MASK_MODES = ("none", "soft", "hard")


@dataclass(frozen=True)
class AttackConfig:
    """All attack hyperparameters; defaults reproduce the reference settings."""

    n_sample_steps: int = 20
    n_invert_steps: int = 5
    guidance_inversion: float = 0.0
    guidance_denoise: float = 2.5
    lr: float = 1e-2
    iterations: int = 30
    alpha: float = 10.0
    beta: float = 10000.0
    gamma: float = 100.0
    mask_mode: str = "none"
    top_n: int = 1
    text_attack: bool = False
    ext_loss_weight: float = 100.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise DomainError("iterations must be >= 0")
        if min(self.alpha, self.beta, self.gamma, self.ext_loss_weight) < 0:
            raise DomainError("loss weights must be >= 0")
        if not 1 <= self.n_invert_steps <= self.n_sample_steps:
            raise DomainError("need 1 <= n_invert_steps <= n_sample_steps")
        if self.mask_mode not in MASK_MODES:
            raise DomainError(f"mask_mode must be one of {MASK_MODES}")
        if self.top_n < 1:
            raise DomainError("top_n must be >= 1")
        if min(self.guidance_inversion, self.guidance_denoise) < 0:
            raise DomainError("guidance scales must be >= 0")
        if self.lr <= 0:
            raise DomainError("lr must be > 0")


@dataclass
class LossTraceEntry:
    attack: float
    transfer: float
    structure: float
    total: float
    ext: Optional[float] = None


@dataclass
class AttackResult:
    adversarial: ImageTensor
    loss_trace: list[LossTraceEntry]
    mask: Optional[attn.Mask]
    success_on_surrogate: bool
    elapsed: float
    caption: str = ""
    label: int = -1
    pred_clean: int = -1
    pred_adv: int = -1


def attack_loss(classifier, x_prime: ImageTensor, y: int) -> torch.Tensor:
    """Negative cross-entropy of the classifier at label y (to be minimized)."""
    k = len(classifier.label_set)
    if not 0 <= y < k:
        raise DomainError(f"label {y} outside 0..{k - 1}")
    logits = classifier.logits(x_prime)
    return F.log_softmax(logits, dim=-1)[y]


def multi_category_loss(
    classifier, x_prime: ImageTensor, categories: Sequence[int]
) -> torch.Tensor:
    """-J(x', c1) + sum_i>=2 J(x', c_i); reduces to attack_loss for one category."""
    cats = list(categories)
    if not cats:
        raise DomainError("need at least one category")
    if len(set(cats)) != len(cats):
        raise DomainError("categories must be distinct")
    k = len(classifier.label_set)
    for c in cats:
        if not 0 <= c < k:
            raise DomainError(f"label {c} outside 0..{k - 1}")
    logp = F.log_softmax(classifier.logits(x_prime), dim=-1)
    loss = logp[cats[0]]
    for c in cats[1:]:
        loss = loss - logp[c]
    return loss


def masked_blend(x_prime: ImageTensor, x: ImageTensor, m: attn.Mask) -> ImageTensor:
    """Per-pixel blend x' * M + x * (1 - M); background (M=0) stays bit-identical."""
    if x_prime.shape != x.shape:
        raise DomainError(f"image shapes differ: {x_prime.shape} vs {x.shape}")
    if tuple(m.values.shape) != x.shape[:2]:
        raise DomainError(
            f"mask shape {tuple(m.values.shape)} does not match image {x.shape[:2]}"
        )
    w = m.values.unsqueeze(-1)
    return ImageTensor(x_prime.data * w + x.data * (1.0 - w))


def composite_loss(
    l_attack: torch.Tensor,
    l_transfer: torch.Tensor,
    l_structure: torch.Tensor,
    cfg: AttackConfig,
    l_ext: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """alpha * attack + beta * transfer + gamma * structure, minus the weighted
    extended term (which is an objective to maximize) when present."""
    total = cfg.alpha * l_attack + cfg.beta * l_transfer + cfg.gamma * l_structure
    if l_ext is not None:
        total = total - cfg.ext_loss_weight * l_ext
    return total


def _category_token_indices(
    cond: TextEmbedding, words_per_category: Sequence[Sequence[str]]
) -> list[list[int]]:
    """Token index groups per category, using the embedding's ordered word spans."""
    spans = list(cond.word_spans)
    total_words = sum(len(w) for w in words_per_category)
    if len(spans) < total_words:
        raise DomainError(
            f"caption needs {total_words} word tokens but the backbone kept {len(spans)}"
        )
    groups: list[list[int]] = []
    offset = 0
    for words in words_per_category:
        idx: list[int] = []
        for k in range(offset, offset + len(words)):
            a, b = spans[k][1]
            idx.extend(range(a, b))
        groups.append(idx)
        offset += len(words)
    return groups


def _resolve_caption_and_label(
    surrogate, caption: Optional[str], clean_logits: torch.Tensor
) -> tuple[str, int]:
    if caption is None:
        caption = surrogate.label_set[int(torch.argmax(clean_logits))]
    if not caption:
        raise DomainError("caption must be non-empty")
    try:
        label = list(surrogate.label_set).index(caption)
    except ValueError:
        raise DomainError(f"caption {caption!r} is not a class name of {surrogate.name}")
    return caption, label


def _decode_step(backbone, z0: LatentTensor) -> ImageTensor:
    img = backbone.decode_latent(z0)
    return ImageTensor(img.data.clamp(0.0, 1.0))


def run_attack(
    backbone: DiffusionBackbone,
    surrogate,
    image: ImageTensor,
    caption: Optional[str] = None,
    cfg: AttackConfig = AttackConfig(),
) -> AttackResult:
    """Craft an adversarial image by optimizing the inverted latent.

    ``caption`` names the ground-truth class; when omitted, the surrogate's
    prediction is used instead. Deterministic for a given configuration.
    """
    started = time.perf_counter()
    if image.shape != backbone.image_shape:
        raise ConfigurationError(
            f"image shape {image.shape} does not match backbone {backbone.image_shape}"
        )
    sched = make_schedule(
        backbone.max_timestep, DEFAULT_BETA_START, DEFAULT_BETA_END, cfg.n_sample_steps
    )
    with torch.no_grad():
        clean_logits = surrogate.logits(image)
    pred_clean = int(torch.argmax(clean_logits))
    caption, label = _resolve_caption_and_label(surrogate, caption, clean_logits)

    if cfg.top_n > 1:
        if cfg.top_n > len(surrogate.label_set):
            raise DomainError("top_n exceeds the surrogate's label count")
        order = torch.argsort(clean_logits, descending=True)
        categories = [int(c) for c in order[: cfg.top_n]]
        cat_names = [surrogate.label_set[c] for c in categories]
        full_caption = ", ".join(cat_names)
        words_per_cat = [
            (name + ",").split() if i + 1 < len(cat_names) else name.split()
            for i, name in enumerate(cat_names)
        ]
    else:
        categories = [label]
        full_caption = caption
        words_per_cat = [caption.split()]

    cond = backbone.encode_text(full_caption)
    cat_token_groups = _category_token_indices(cond, words_per_cat)
    var_tokens = cat_token_groups[0] if cfg.top_n > 1 else cond.word_token_indices()

    z0 = backbone.encode_image(image)
    traj = invert(backbone, z0, sched, cfg.n_invert_steps, cond,
                  scale=cfg.guidance_inversion)
    null_res = optimize_null_text(
        backbone, traj, sched, cond, cfg.guidance_denoise
    )
    unconds = null_res.embeddings

    # frozen-copy pass: structure reference, mask source, reconstruction baseline
    with torch.no_grad():
        fix_tap = AttentionRecorder()
        z_fix = denoise(
            backbone, traj.top, sched, cond, unconds, cfg.guidance_denoise, fix_tap
        )
        recon = _decode_step(backbone, z_fix)
    fix_self_maps = [m.detach() for m in fix_tap.self_maps()]

    mask: Optional[attn.Mask] = None
    if cfg.mask_mode != "none":
        agg_fix = attn.accumulate_cross(fix_tap.records, var_tokens)
        mask = attn.soft_mask(agg_fix, image.shape[:2], mode="bilinear")
        if cfg.mask_mode == "hard":
            mask = attn.hard_mask(mask)

    def finish(img: ImageTensor) -> ImageTensor:
        return masked_blend(img, image, mask) if mask is not None else img

    top_tag = traj.timesteps[-1]
    x = traj.top.data.detach().clone().requires_grad_(True)
    optimizer = torch.optim.AdamW([x], lr=cfg.lr)
    trace: list[LossTraceEntry] = []
    for _ in range(cfg.iterations):
        tap = AttentionRecorder()
        z_out = denoise(
            backbone,
            LatentTensor(x, timestep_tag=top_tag),
            sched,
            cond,
            unconds,
            cfg.guidance_denoise,
            tap,
        )
        adv = finish(_decode_step(backbone, z_out))
        l_attack = multi_category_loss(surrogate, adv, categories)
        l_transfer = attn.variance_loss(attn.accumulate_cross(tap.records, var_tokens))
        l_structure = attn.structure_loss(tap.self_maps(), fix_self_maps)
        l_ext = None
        if cfg.top_n > 1:
            maps = [attn.accumulate_cross(tap.records, g) for g in cat_token_groups]
            l_ext = attn.ext_attention_loss(maps)
        total = composite_loss(l_attack, l_transfer, l_structure, cfg, l_ext)
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        trace.append(
            LossTraceEntry(
                attack=float(l_attack.detach()),
                transfer=float(l_transfer.detach()),
                structure=float(l_structure.detach()),
                total=float(total.detach()),
                ext=None if l_ext is None else float(l_ext.detach()),
            )
        )

    with torch.no_grad():
        if cfg.iterations == 0:
            adv = finish(recon)
        else:
            z_out = denoise(
                backbone,
                LatentTensor(x.detach(), timestep_tag=top_tag),
                sched,
                cond,
                unconds,
                cfg.guidance_denoise,
            )
            adv = finish(_decode_step(backbone, z_out))
        pred_adv = int(torch.argmax(surrogate.logits(adv)))

    return AttackResult(
        adversarial=adv,
        loss_trace=trace,
        mask=mask,
        success_on_surrogate=pred_adv != label,
        elapsed=time.perf_counter() - started,
        caption=full_caption,
        label=label,
        pred_clean=pred_clean,
        pred_adv=pred_adv,
    )


def run_text_attack(
    backbone: DiffusionBackbone,
    surrogate,
    image: ImageTensor,
    c1: int,
    c2: int,
    cfg: AttackConfig = AttackConfig(),
) -> AttackResult:
    """Targeted prompt-perturbation variant: the latent stays fixed and only
    the conditional embedding of the runner-up class c2 is optimized so the
    classifier flips to c2.

    c1/c2 are the surrogate's first and second most likely labels for the
    clean image; the cross-attention spread term is dropped and the structure
    term is kept.
    """
    started = time.perf_counter()
    if image.shape != backbone.image_shape:
        raise ConfigurationError(
            f"image shape {image.shape} does not match backbone {backbone.image_shape}"
        )
    k = len(surrogate.label_set)
    if not (0 <= c1 < k and 0 <= c2 < k):
        raise DomainError(f"labels must lie in 0..{k - 1}")
    if c1 == c2:
        raise DomainError("c1 and c2 must differ")

    sched = make_schedule(
        backbone.max_timestep, DEFAULT_BETA_START, DEFAULT_BETA_END, cfg.n_sample_steps
    )
    cond1 = backbone.encode_text(surrogate.label_set[c1])
    cond2_init = backbone.encode_text(surrogate.label_set[c2])

    with torch.no_grad():
        pred_clean = int(torch.argmax(surrogate.logits(image)))
        z0 = backbone.encode_image(image)
    traj = invert(backbone, z0, sched, cfg.n_invert_steps, cond1,
                  scale=cfg.guidance_inversion)
    unconds = optimize_null_text(
        backbone, traj, sched, cond1, cfg.guidance_denoise
    ).embeddings

    with torch.no_grad():
        fix_tap = AttentionRecorder()
        denoise(backbone, traj.top, sched, cond1, unconds, cfg.guidance_denoise, fix_tap)
    fix_self_maps = [m.detach() for m in fix_tap.self_maps()]

    x_fixed = LatentTensor(traj.top.data.detach(), timestep_tag=traj.timesteps[-1])
    tokens = cond2_init.tokens.detach().clone().requires_grad_(True)
    optimizer = torch.optim.AdamW([tokens], lr=cfg.lr)
    trace: list[LossTraceEntry] = []

    def current_cond() -> TextEmbedding:
        return TextEmbedding(tokens, kind=CONDITIONAL, word_spans=cond2_init.word_spans)

    for _ in range(cfg.iterations):
        tap = AttentionRecorder()
        z_out = denoise(
            backbone, x_fixed, sched, current_cond(), unconds, cfg.guidance_denoise, tap
        )
        adv = _decode_step(backbone, z_out)
        target_ce = -F.log_softmax(surrogate.logits(adv), dim=-1)[c2]
        l_structure = attn.structure_loss(tap.self_maps(), fix_self_maps)
        total = cfg.alpha * target_ce + cfg.gamma * l_structure
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        trace.append(
            LossTraceEntry(
                attack=float(target_ce.detach()),
                transfer=0.0,
                structure=float(l_structure.detach()),
                total=float(total.detach()),
            )
        )

    with torch.no_grad():
        z_out = denoise(
            backbone,
            x_fixed,
            sched,
            TextEmbedding(tokens.detach(), kind=CONDITIONAL,
                          word_spans=cond2_init.word_spans),
            unconds,
            cfg.guidance_denoise,
        )
        adv = _decode_step(backbone, z_out)
        pred_adv = int(torch.argmax(surrogate.logits(adv)))

    return AttackResult(
        adversarial=adv,
        loss_trace=trace,
        mask=None,
        success_on_surrogate=pred_adv == c2,
        elapsed=time.perf_counter() - started,
        caption=surrogate.label_set[c2],
        label=c1,
        pred_clean=pred_clean,
        pred_adv=pred_adv,
    )
