"""Graph-transformer performance predictor for neural-architecture DAGs.

Sibling-aware masked attention, a bidirectional graph-aggregating
feed-forward network, a numpy reverse-mode autodiff engine, the training
recipe and ranking metrics.
"""

from .dag import Dag, MaskSet, MaskVariant, NodeDescriptor, build_mask_set, sibling_masks, validate_dag
from .datasets import DagRecord, SynthConfig, generate_synthetic, load_jsonl, save_jsonl, split
from .encoding import EncodingConfig, encode_graph
from .metrics import EvalReport, acc_delta, evaluate, kendall_tau, mape
from .model import (
    FfnVariant,
    ModelConfig,
    Readout,
    asma_forward,
    bgiffn_forward,
    init_params,
    load_checkpoint,
    model_forward,
    save_checkpoint,
)
from .train import Predictor, TrainConfig, fit, lr_at

__all__ = [
    "Dag", "MaskSet", "MaskVariant", "NodeDescriptor", "build_mask_set", "sibling_masks",
    "validate_dag", "DagRecord", "SynthConfig", "generate_synthetic", "load_jsonl", "save_jsonl",
    "split", "EncodingConfig", "encode_graph", "EvalReport", "acc_delta", "evaluate",
    "kendall_tau", "mape", "FfnVariant", "ModelConfig", "Readout", "asma_forward",
    "bgiffn_forward", "init_params", "load_checkpoint", "model_forward", "save_checkpoint",
    "Predictor", "TrainConfig", "fit", "lr_at",
]

__version__ = "0.1.0"
