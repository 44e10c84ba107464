"""promptforge: a differentiable visual-prompting engine for frozen models.

The package learns input-space prompts (a constrained affine warp, a
multiplicative color field, and a masked additive pattern) that adapt a
fixed-weight classifier to a shifted domain, entirely in numpy.
"""

from . import errors
from .augment import CORRUPTION_KINDS, CorruptionSpec, corrupt, trivial_augment
from .color import AdditivePrompt, ColorPrompt, constrain_color, generate_mask
from .data import (
    Dataset,
    ShiftConfig,
    default_shift,
    gen_shapes,
    load_idx,
    shift_domain,
    split,
)
from .estimators import PromptedClassifier
from .evalbench import (
    CorruptionReport,
    EvalReport,
    TimingReport,
    bench_timing,
    corruption_eval,
    default_bench_params,
    evaluate,
)
from .model import (
    FrozenModel,
    PretrainConfig,
    checksum_model,
    init_model,
    load_model,
    model_forward,
    pretrain_source,
    save_model,
)
from .pipeline import (
    DEFAULT_EVP_SCALE,
    VARIANTS,
    BaselineConfig,
    PreparedPrompt,
    PromptParams,
    acavp_backward,
    acavp_forward,
    baseline_backward,
    baseline_forward,
    embed_autovp_as_acavp,
    embed_evp_as_acavp,
    init_params,
    load_baseline,
    load_params,
    prepare_baseline,
    prepare_prompt,
    save_baseline,
    save_params,
)
from .rng import RngStream
from .train import TrainConfig, TrainResult, cosine_lr, train_prompt
from .warp import (
    AffineRanges,
    AffineRaw,
    build_matrix,
    constrain_affine,
    warp_bilinear,
)

__version__ = "0.1.0"

__all__ = [
    "errors",
    "__version__",
    # prompts and the forward/backward pipeline
    "PromptParams",
    "BaselineConfig",
    "PreparedPrompt",
    "VARIANTS",
    "DEFAULT_EVP_SCALE",
    "init_params",
    "acavp_forward",
    "acavp_backward",
    "baseline_forward",
    "baseline_backward",
    "prepare_prompt",
    "prepare_baseline",
    "embed_evp_as_acavp",
    "embed_autovp_as_acavp",
    "save_params",
    "load_params",
    "save_baseline",
    "load_baseline",
    # pipeline stages
    "AffineRaw",
    "AffineRanges",
    "constrain_affine",
    "build_matrix",
    "warp_bilinear",
    "ColorPrompt",
    "AdditivePrompt",
    "constrain_color",
    "generate_mask",
    # frozen model
    "FrozenModel",
    "PretrainConfig",
    "init_model",
    "model_forward",
    "pretrain_source",
    "checksum_model",
    "save_model",
    "load_model",
    # training
    "TrainConfig",
    "TrainResult",
    "train_prompt",
    "cosine_lr",
    # data and augmentation
    "Dataset",
    "gen_shapes",
    "load_idx",
    "split",
    "ShiftConfig",
    "default_shift",
    "shift_domain",
    "trivial_augment",
    "corrupt",
    "CorruptionSpec",
    "CORRUPTION_KINDS",
    # evaluation
    "EvalReport",
    "CorruptionReport",
    "TimingReport",
    "evaluate",
    "corruption_eval",
    "bench_timing",
    "default_bench_params",
    # misc
    "RngStream",
    "PromptedClassifier",
]
