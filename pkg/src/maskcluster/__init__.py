"""Desk-scale masked-reconstruction + clustering self-supervised
pretraining with split self/cross attention for masked inputs."""

from .attention import TokenPartition, efficient_attention, score_entry_count
from .encoder import EncoderConfig
from .losses import ClusterConfig, ReconConfig
from .masking import BlockMask, CorruptionPolicy, corrupt, sample_block_mask
from .tensor import Tensor
from .trainer import TrainerConfig, TrainState, init_train_state, train_step

__all__ = [
    "BlockMask",
    "ClusterConfig",
    "CorruptionPolicy",
    "EncoderConfig",
    "ReconConfig",
    "Tensor",
    "TokenPartition",
    "TrainState",
    "TrainerConfig",
    "corrupt",
    "efficient_attention",
    "init_train_state",
    "sample_block_mask",
    "score_entry_count",
    "train_step",
]

__version__ = "0.1.0"
