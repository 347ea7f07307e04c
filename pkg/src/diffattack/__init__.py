"""Imperceptible, transferable adversarial examples crafted in the latent
space of a text-conditioned diffusion model."""

__version__ = "0.1.0"

from .attack import (  # noqa: F401
    AttackConfig,
    AttackResult,
    attack_loss,
    composite_loss,
    masked_blend,
    multi_category_loss,
    run_attack,
    run_text_attack,
)
from .attention import (  # noqa: F401
    AggregatedCrossMap,
    Mask,
    accumulate_cross,
    ext_attention_loss,
    hard_mask,
    soft_mask,
    structure_loss,
    variance_loss,
)
from .backbone import (  # noqa: F401
    AttentionRecord,
    AttentionRecorder,
    DiffusionBackbone,
    ExternalBackboneAdapter,
    ImageTensor,
    LatentTensor,
    TextEmbedding,
)
from .ddim import (  # noqa: F401
    NoiseSchedule,
    Trajectory,
    ddim_denoise_step,
    ddim_invert_step,
    denoise,
    forward_sample,
    guided_noise,
    invert,
    make_schedule,
    optimize_null_text,
)
from .evaluation import (  # noqa: F401
    Classifier,
    RandomProjectionFeatures,
    ToyClassifier,
    TransferReport,
    accuracy,
    build_toy_classifier,
    fid,
    frechet_distance,
    psnr,
    top1,
    train_toy_classifier,
    transfer_matrix,
)
from .toy import ToyBackbone, ToyBackboneConfig, build_toy_backbone  # noqa: F401
