from .base import (
    KINDS, L2R, R2L, ArchitectureSpec, BasicModel, Checkpoint, CheckpointError, ContractError,
    InputError, SpecError, StepState, default_arch, derive_rng, init_model, load_checkpoint,
    pad_batch, sample, sample_batch, save_checkpoint,
)
from .networks import NEG_INF

__all__ = [
    "KINDS", "L2R", "R2L", "ArchitectureSpec", "BasicModel", "Checkpoint", "CheckpointError",
    "ContractError", "InputError", "SpecError", "StepState", "default_arch", "derive_rng",
    "init_model", "load_checkpoint", "pad_batch", "sample", "sample_batch", "save_checkpoint",
    "NEG_INF",
]
