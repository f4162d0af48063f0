"""Mixture-of-sparse-adapters fine-tuning toolkit.

A self-contained float64 stack: tape-based autodiff, a tiny frozen ViT-style
backbone, shared-weight sparse adapter experts with stochastic-activation
training, lossless jigsaw merging for inference, binary dataset/checkpoint
formats, and a CLI over all of it.
"""

from .adapters import (AdapterConfig, AdapterSet, LoraModule, MaskSet,
                       SparseExpertAdapter, adapter_forward_expert,
                       adapter_forward_standard, build_adapter_set,
                       build_sparse_adapter_baseline, lora_forward, split_masks)
from .autodiff import GradCheckReport, Tensor, grad_check
from .backbone import BackboneConfig, FrozenModel, build_backbone, forward
from .config import (RunConfig, load_run, parse_config, read_config, save_run,
                     serialize_config, setup_run)
from .dataio import Dataset, gen_synthetic, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .inference import EvalReport, count_trainable_params, evaluate, infer, merge_experts
from .rng import Rng
from .training import TrainPlan, sample_experts, train, train_reference

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig", "AdapterSet", "BackboneConfig", "Dataset", "EvalReport",
    "FrozenModel", "GradCheckReport", "LoraModule", "MaskSet", "Rng", "RunConfig",
    "SparseExpertAdapter", "Tensor", "TrainPlan", "adapter_forward_expert",
    "adapter_forward_standard", "build_adapter_set", "build_backbone",
    "build_sparse_adapter_baseline", "count_trainable_params", "evaluate",
    "forward", "gen_synthetic", "grad_check", "infer", "load_checkpoint",
    "load_dataset", "load_run", "lora_forward", "merge_experts", "parse_config",
    "read_config", "sample_experts", "save_checkpoint", "save_dataset",
    "save_run", "serialize_config", "setup_run", "split_masks", "train",
    "train_reference",
]
