from __future__ import annotations

# Public API in one import for the CLI and notebooks

from .config import CFG, logger
from .errors import (
    DfkdError,
    ShapeError,
    SpecError,
    ConfigError,
    CheckpointError,
    NonFiniteLossError,
    RunAbortedError,
)
from .models import (
    DatasetSpec,
    ConvNetSpec,
    GeneratorSpec,
    Hyperparams,
    EpochRecord,
    RunReport,
    PretrainHistory,
    Config,
    ABLATION_ROWS,
)
from .toy_data import LabeledImageSet, synth_fgvc_dataset, split, evaluate_accuracy, part_region, cached_fgvc_dataset
from .classifier import (
    ConvNet,
    Adapter,
    build_model,
    forward_with_taps,
    collect_bn_running_stats,
    batch_stats_under_forward,
    adapt_channels,
    pretrain,
)
from .generator import AttentionGenerator, sample_noise, sam_encode, sam_decode, sam_apply, spectral_normalize, generate
from .mha import MixedHighOrderAttention, mha_attention, mha_apply, mhad_loss
from .sfcl import ProjectionHead, EmbeddingBatch, project, pairwise_cosine, sfcl_loss
from .objectives import kd_loss, bn_regularization, generator_objective, student_objective
from .checkpoint import save_classifier, load_classifier
from .engine import DistillState, build_state, generator_phase, student_phase, run, save_checkpoint, load_checkpoint
from .reports import append_metrics_row, read_metrics, plot_history, save_image_grid, summarize_runs, build_workbook
from .services import pretrain_logic, distill_logic, evaluate_logic, emit_samples_logic, ablate_logic, ablation_grid
