"""Geometry-ordered group-wise autoregressive reconstruction of missing
channels in multichannel time series."""

from .montage import (
    GroupSchedule,
    LayoutSpec,
    Montage,
    anchor_distance,
    build_schedule,
    load_layout,
    load_montage,
    make_layout,
    missing_channels,
    save_layout,
    save_montage,
    schedule_from_sizes,
    select_ld_layout,
)
from .predictor import (
    ModelArtifact,
    PredictorHyper,
    PredictorParams,
    init_params,
    load_model,
    save_model,
)
from .rollout import (
    init_state,
    make_context,
    merge_step,
    run_inference,
    run_inference_batch,
    run_oneshot,
    run_oneshot_batch,
)
from .signals import (
    ChannelStats,
    SignalBlock,
    apply_denormalize,
    apply_normalize,
    fit_stats,
    load_block,
    save_block,
)
from .synthdata import (
    Dataset,
    GenConfig,
    gen_block,
    gen_linear_block,
    gen_montage,
    inject_anchor_noise,
    load_dataset,
    make_dataset,
)
from .training import EpochCache, TrainConfig, fit, refresh_cache

__version__ = "0.1.0"
