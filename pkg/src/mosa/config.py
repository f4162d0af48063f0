"""Flat key=value run configuration and run-state assembly.

A run config is UTF-8 text, one ``key=value`` per line, ``#`` comments.
Unknown keys are rejected; missing keys take their defaults and produce a
notice the CLI logs.  The same canonical text is embedded in checkpoints, so
a checkpoint fully describes how to rebuild its model.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapters import AdapterConfig, AdapterSet, MaskSet, build_adapter_set, sparsify_adapter_set
from .backbone import BackboneConfig, FrozenModel, build_backbone
from .dataio import load_checkpoint, parse_config_text, save_checkpoint
from .errors import ConfigError, FormatError
from .rng import STREAM_ADAPTERS, STREAM_INIT, STREAM_PRUNE, Rng
from .training import TrainPlan

METHODS = ("mosa", "adapter", "sparse_adapter", "linear_probe", "bias",
           "lora", "sparse_lora", "mosl")

_SINGLE_EXPERT_METHODS = ("adapter", "sparse_adapter", "lora", "sparse_lora")


@dataclass(frozen=True)
class RunConfig:
    # backbone
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 10
    use_cls_token: bool = True
    # method / adapter
    method: str = "mosa"
    bottleneck_dim: int = 16
    num_experts: int = 4
    hierarchical: bool = True
    sparsify_down: bool = False
    sparsify_up: bool = True
    insertion: str = "parallel_ffn"
    activation: str = "relu"
    adapter_scale: float = 1.0
    use_bias: bool = True
    retain_fraction: float = 0.25
    # training plan
    epochs: int = 100
    warmup_epochs: int = 10
    batch_size: int = 128
    base_lr: float = 0.005
    weight_decay: float = 0.01
    alpha: float = 1.0
    beta: float = 1.0
    alignment: str = "shallow"
    expert_sampling: str = "per_batch"
    two_pass_distinct: bool = True
    expert_pairing: str = "independent"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = False
    log_every_step: bool = False
    # data / output
    train_data: str = ""
    val_data: str = ""
    output_dir: str = ""


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, text: str):
    kind = _FIELDS[key].type
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(text)
            return low == "true"
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_from_pairs(pairs: dict[str, str]) -> tuple[RunConfig, list[str]]:
    """Build a config from raw key=value pairs; returns (config, notices) where
    notices name every defaulted key."""
    values = {}
    for key, raw in pairs.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    rc = RunConfig(**values)
    if rc.method not in METHODS:
        raise ConfigError(f"unknown method {rc.method!r}")
    notices = [f"using default {name}={_format_value(getattr(rc, name))}"
               for name in _FIELDS if name not in values]
    return rc, notices


def parse_config(text: str) -> tuple[RunConfig, list[str]]:
    return config_from_pairs(parse_config_text(text))


def read_config(path) -> tuple[RunConfig, list[str]]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(p.read_text(encoding="utf-8"))


def apply_overrides(rc: RunConfig, overrides: list[str]) -> RunConfig:
    updates = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _parse_value(key, raw.strip())
    rc = dataclasses.replace(rc, **updates)
    if rc.method not in METHODS:
        raise ConfigError(f"unknown method {rc.method!r}")
    return rc


def serialize_config(rc: RunConfig) -> str:
    return "".join(f"{name}={_format_value(getattr(rc, name))}\n"
                   for name in sorted(_FIELDS))


def config_pairs(rc: RunConfig) -> dict[str, str]:
    return {name: _format_value(getattr(rc, name)) for name in _FIELDS}


# ---------------------------------------------------------------------------
# component builders


def backbone_config(rc: RunConfig) -> BackboneConfig:
    return BackboneConfig(image_size=rc.image_size, patch_size=rc.patch_size,
                          channels=rc.channels, embed_dim=rc.embed_dim,
                          num_layers=rc.num_layers, num_heads=rc.num_heads,
                          mlp_ratio=rc.mlp_ratio, num_classes=rc.num_classes,
                          use_cls_token=rc.use_cls_token)


def uses_adapters(method: str) -> bool:
    return method not in ("linear_probe", "bias")


def adapter_config(rc: RunConfig) -> AdapterConfig | None:
    if not uses_adapters(rc.method):
        return None
    lora = rc.method in ("lora", "sparse_lora", "mosl")
    experts = rc.num_experts if rc.method in ("mosa", "mosl") else 1
    hierarchical = True if rc.method == "mosl" else rc.hierarchical
    return AdapterConfig(kind="lora" if lora else "adapter",
                         bottleneck_dim=rc.bottleneck_dim,
                         num_experts=experts,
                         hierarchical=hierarchical,
                         sparsify_down=False if lora else rc.sparsify_down,
                         sparsify_up=True if lora else rc.sparsify_up,
                         insertion=rc.insertion,
                         activation=rc.activation,
                         scale=rc.adapter_scale,
                         use_bias=rc.use_bias)


def train_plan(rc: RunConfig) -> TrainPlan:
    return TrainPlan(epochs=rc.epochs, warmup_epochs=rc.warmup_epochs,
                     batch_size=rc.batch_size, base_lr=rc.base_lr,
                     weight_decay=rc.weight_decay, alpha=rc.alpha, beta=rc.beta,
                     alignment=rc.alignment, expert_sampling=rc.expert_sampling,
                     two_pass_distinct=rc.two_pass_distinct,
                     expert_pairing=rc.expert_pairing, seed=rc.seed,
                     beta1=rc.beta1, beta2=rc.beta2, eps=rc.eps,
                     augment=rc.augment, log_every_step=rc.log_every_step)


def setup_run(rc: RunConfig) -> tuple[FrozenModel, AdapterSet | None]:
    """Build the frozen backbone and adapters for a config.

    Streams: backbone init draws from split(STREAM_INIT), adapters from
    split(STREAM_ADAPTERS), prune masks from split(STREAM_PRUNE), all children
    of Rng(seed), so changing one component never shifts another's draws.
    """
    bcfg = backbone_config(rc)
    root = Rng(rc.seed)
    model = build_backbone(bcfg, root.split(STREAM_INIT))
    if rc.method == "bias":
        model.mark_bias_trainable()
    adapters = None
    acfg = adapter_config(rc)
    if acfg is not None:
        adapters = build_adapter_set(bcfg, acfg, root.split(STREAM_ADAPTERS))
        if rc.method in ("sparse_adapter", "sparse_lora"):
            adapters = sparsify_adapter_set(adapters, rc.retain_fraction,
                                            root.split(STREAM_PRUNE))
    return model, adapters


# ---------------------------------------------------------------------------
# run-state checkpoints


def checkpoint_state(rc: RunConfig, model: FrozenModel, adapters: AdapterSet | None):
    """Flatten a run into (config, tensors, masks) for the checkpoint format."""
    config = config_pairs(rc)
    config["merged"] = _format_value(bool(adapters is not None and adapters.merged))
    tensors = {name: t.data for name, t in model.params.items()}
    masks: dict[str, np.ndarray] = {}
    if adapters is not None:
        for name, t in adapters.named_params():
            tensors[name] = t.data
        for prefix, a in adapters.adapters():
            for label, ms in (("down", a.down_masks), ("up", a.up_masks)):
                if ms is not None:
                    for k in range(ms.num_masks):
                        masks[f"{prefix}.{label}.{k}"] = ms.mask(k)
            if a.retain_down is not None:
                masks[f"{prefix}.retain_down"] = a.retain_down
                masks[f"{prefix}.retain_up"] = a.retain_up
        for prefix, m in adapters.loras():
            if m.masks is not None:
                for k in range(m.masks.num_masks):
                    masks[f"{prefix}.mask.{k}"] = m.masks.mask(k)
            if m.retain_a is not None:
                masks[f"{prefix}.retain_a"] = m.retain_a
                masks[f"{prefix}.retain_b"] = m.retain_b
    return config, tensors, masks


def save_run(path, rc: RunConfig, model: FrozenModel, adapters: AdapterSet | None) -> None:
    config, tensors, masks = checkpoint_state(rc, model, adapters)
    save_checkpoint(path, config, tensors, masks)


def _restore_maskset(masks: dict[str, np.ndarray], prefix: str, seed: int) -> MaskSet | None:
    stack = []
    while f"{prefix}.{len(stack)}" in masks:
        stack.append(masks[f"{prefix}.{len(stack)}"])
    if not stack:
        return None
    return MaskSet(np.stack(stack), seed=seed)


def _assign(name: str, tensor, tensors: dict[str, np.ndarray], path) -> None:
    if name not in tensors:
        raise FormatError(f"{path}: checkpoint is missing tensor {name!r}")
    if tensors[name].shape != tensor.data.shape:
        raise FormatError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                          f"expected {tensor.data.shape}")
    tensor.data = tensors[name]


def load_run(path) -> tuple[RunConfig, FrozenModel, AdapterSet | None]:
    """Rebuild a model and adapters from a checkpoint, bit-exactly."""
    config, tensors, masks = load_checkpoint(path)
    merged = config.pop("merged", "false") == "true"
    rc, _ = config_from_pairs(config)
    model, adapters = setup_run(rc)
    for name, t in model.params.items():
        _assign(name, t, tensors, path)
    if adapters is not None:
        for name, t in adapters.named_params():
            _assign(name, t, tensors, path)
        for prefix, a in adapters.adapters():
            a.down_masks = _restore_maskset(masks, f"{prefix}.down", rc.seed) or a.down_masks
            a.up_masks = _restore_maskset(masks, f"{prefix}.up", rc.seed) or a.up_masks
            if f"{prefix}.retain_down" in masks:
                a.retain_down = masks[f"{prefix}.retain_down"]
                a.retain_up = masks[f"{prefix}.retain_up"]
        for prefix, m in adapters.loras():
            m.masks = _restore_maskset(masks, f"{prefix}.mask", rc.seed) or m.masks
            if f"{prefix}.retain_a" in masks:
                m.retain_a = masks[f"{prefix}.retain_a"]
                m.retain_b = masks[f"{prefix}.retain_b"]
        adapters.merged = merged
    return rc, model, adapters
