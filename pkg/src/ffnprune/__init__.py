"""Structured FFN-channel pruning for decoder transformers.

Pipeline: one calibration forward pass -> per-block retention budgets from
transformation saliency -> per-channel scores -> physical row slicing with
width rounding -> optional importance-guided low-rank recovery. Baseline
scorers and an evaluation harness round out the toolkit.
"""

from .calibration import (
    ActivationSummary,
    CalibrationSet,
    collect_summaries,
    load_summary,
    sample_calibration,
    save_summary,
)
from .checkpoint import load_checkpoint, load_config, save_checkpoint
from .corpus import load_corpus, save_corpus
from .errors import (
    CapacityError,
    CheckpointError,
    ConfigError,
    FFNPruneError,
    InputError,
    PlanError,
    ShapeError,
    ValidationError,
)
from .evaluation import (
    EvalReport,
    ablation_run,
    benchmark_latency,
    efficiency_report,
    perplexity,
)
from .importance import (
    CoarseScores,
    FineScores,
    RetentionBudget,
    adjust_dimensions,
    allocate_retention,
    angular_distance,
    coarse_scores,
    fine_scores,
    global_sort_allocation,
    magnitude_scores,
    normalize_scores,
    score_blocks,
    wanda_scores,
)
from .model import (
    ActivationTrace,
    CaptureFlags,
    ModelCheckpoint,
    ModelConfig,
    TransformerBlock,
    count_macs,
    count_params,
    forward,
)
from .pruner import (
    SparsityPlan,
    apply_plan,
    build_plan,
    load_plan,
    masked_forward,
    save_plan,
    verify_equivalence,
)
from .recovery import (
    AdaptedModel,
    LoRAAdapter,
    RankAllocation,
    TrainConfig,
    allocate_ranks,
    attach_adapters,
    merge_adapters,
    train,
)

__version__ = "0.1.0"
