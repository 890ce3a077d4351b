"""Point-cloud completion network, its training loop and inference."""

from .model import (
    AdamState,
    CompletionConfig,
    CompletionModel,
    Normalizer,
    adam_step,
    backward,
    forward,
    global_latent,
    load_model,
    loss,
    resample_input,
    save_model,
)
from .training import (
    PairOptions,
    TrainOptions,
    TrainReport,
    complete,
    complete_many,
    scan_pairs,
    set_deterministic,
    train,
)

__all__ = [
    "AdamState", "CompletionConfig", "CompletionModel", "Normalizer", "adam_step", "backward",
    "forward", "global_latent", "load_model", "loss", "resample_input", "save_model",
    "PairOptions", "TrainOptions", "TrainReport", "complete", "complete_many", "scan_pairs",
    "set_deterministic", "train",
]
