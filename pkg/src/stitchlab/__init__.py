"""Functional similarity of neural networks via model stitching."""

from .adversarial import EVAL_ATTACK, AttackSpec, accuracy, pgd_attack, robust_accuracy
from .analysis import (
    CrossLayerGrid,
    StitchingPlot,
    build_cross_layer_grid,
    build_stitching_plot,
    evaluate_baseline,
    linear_cka,
    penultimate_similarity_probe,
    self_accuracy,
    subset_class_curve,
)
from .data import DatasetSpec, ImageDataset, augment_batch, denormalize, load_dataset, normalize
from .errors import (
    ConfigError,
    InvalidTap,
    LabelError,
    NumericsError,
    RankWarning,
    ShapeError,
    StitchlabError,
    TrainingError,
)
from .nets import (
    ActivationBatch,
    TappedNetwork,
    build_network,
    deterministic_mode,
    forward_from,
    forward_to,
    load_network,
    norm_stats_checksum,
    params_checksum,
    save_network,
    set_frozen_with_rs_update,
)
from .objectives import (
    ATConfig,
    FuLAWeights,
    ObjectiveKind,
    at_mixture_loss,
    fula_loss,
    hint_loss,
    make_fula_weights,
    slm_loss,
    stitch_objective_loss,
    tlm_loss,
)
from .shortcuts import ShortcutSpec, apply_shortcut, shortcut_gap
from .stitch import (
    StitchLayer,
    StitchedModel,
    dm_init,
    identity_stitch_layer,
    load_stitch_layer,
    resize_bilinear,
    save_stitch_layer,
    stitched_forward,
)
from .trainer import (
    BaseTrainRecipe,
    MetricsLog,
    StitchResult,
    StitchTask,
    StitchTrainRecipe,
    evaluate_stitched,
    run_stitch_task,
    train_base,
    train_stitch,
)

__version__ = "0.1.0"
