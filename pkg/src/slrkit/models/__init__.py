"""Pose-sequence classifiers: attention BiLSTM, CLS transformer and ST-GCN."""

from .base import PoseClassifier, collate, frame_mask
from .config import LSTMConfig, ModelConfig, STGCNConfig, TransformerConfig, toy_config
from .lstm import LSTMClassifier
from .params import (
    CheckpointMismatch,
    ParameterSet,
    backward,
    build_model,
    init_parameters,
    load_parameters,
    model_from_checkpoint,
    parameter_count,
    reset_head,
)
from .stgcn import STGCNClassifier, STGCNEncoder
from .transformer import TransformerClassifier


def lstm_forward(model: LSTMClassifier, pose):
    return model.classify(pose)


def transformer_forward(model: TransformerClassifier, pose):
    return model.classify(pose)


def stgcn_forward(model: STGCNClassifier, pose, graph=None):
    x, lengths = collate([pose])
    return model(x, lengths, graph)[0]


__all__ = [
    "CheckpointMismatch", "LSTMClassifier", "LSTMConfig", "ModelConfig", "ParameterSet", "PoseClassifier",
    "STGCNClassifier", "STGCNConfig", "STGCNEncoder", "TransformerClassifier", "TransformerConfig",
    "backward", "build_model", "collate", "frame_mask", "init_parameters", "load_parameters",
    "lstm_forward", "model_from_checkpoint", "parameter_count", "reset_head", "stgcn_forward",
    "toy_config", "transformer_forward",
]
