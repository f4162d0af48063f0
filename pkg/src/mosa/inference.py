"""Jigsaw merging, inference mechanisms, evaluation, and parameter accounting.

Because experts share one dense weight pair and masks form an exact partition,
merging is the identity on storage: it validates the partition and flags the
set to use the full dense matrices.  Four inference mechanisms are supported:
``fixed`` (always one expert), ``stochastic`` (fresh expert per batch),
``ensemble`` (mean of all single-expert logits, N x the adapter compute), and
``merge`` (dense weights, 1 x).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .adapters import ADAPTER_FLOPS, DENSE, AdapterConfig, AdapterSet, expert_mode
from .backbone import BackboneConfig, FrozenModel, forward
from .errors import ConfigError, DataError, IndexRangeError
from .rng import Rng

MODES = ("fixed", "stochastic", "ensemble", "merge")

EVAL_CSV_HEADER = "mode,top1,params_excl_head,flops_adapter,seed"


@dataclass
class EvalReport:
    mode: str
    top1: float
    num_eval_samples: int
    trainable_params_excl_classifier: int
    forward_matmul_flops: int
    seed: int

    def csv_row(self) -> str:
        return (f"{self.mode},{self.top1!r},{self.trainable_params_excl_classifier},"
                f"{self.forward_matmul_flops},{self.seed}")


def merge_experts(adapters: AdapterSet) -> AdapterSet:
    """Recombine the expert views into one dense adapter per block.

    Validates that every mask set is a disjoint, exhaustive, balanced
    partition, then returns the set flagged to use the full shared matrices.
    With shared storage the merged weight at each entry is exactly the value
    held by the expert owning that entry.
    """
    for _, a in adapters.adapters():
        if a.down_masks is not None:
            a.down_masks.validate_partition()
        if a.up_masks is not None:
            a.up_masks.validate_partition()
    for _, m in adapters.loras():
        if m.masks is not None:
            m.masks.validate_partition()
    return replace(adapters, merged=True)


def _down_split(adapters: AdapterSet) -> bool:
    if adapters.cfg.kind == "lora":
        return False
    return any(a.down_masks is not None for _, a in adapters.adapters())


def infer(model: FrozenModel, adapters: AdapterSet | None, images: np.ndarray,
          mode: str = "merge", fixed_index: int = 0, rng: Rng | None = None) -> np.ndarray:
    """Logits for one batch under the requested inference mechanism."""
    if mode not in MODES:
        raise ConfigError(f"unknown inference mode {mode!r}")
    if adapters is None or adapters.merged or adapters.num_experts == 1 or mode == "merge":
        return forward(model, images, adapters, DENSE)[0].data

    n = adapters.num_experts
    split_down = _down_split(adapters)
    if mode == "fixed":
        if not 0 <= fixed_index < n:
            raise IndexRangeError(f"fixed expert index {fixed_index} outside [0, {n})")
        k = fixed_index
        return forward(model, images, adapters,
                       expert_mode(k if split_down else None, k))[0].data
    if mode == "stochastic":
        rng = rng if rng is not None else Rng(0)
        up = rng.randint(n)
        down = rng.randint(n) if split_down else None
        return forward(model, images, adapters, expert_mode(down, up))[0].data
    # ensemble: mean of the N single-expert logits
    acc = None
    for k in range(n):
        logits = forward(model, images, adapters,
                         expert_mode(k if split_down else None, k))[0].data
        acc = logits if acc is None else acc + logits
    return acc / n


def evaluate(model: FrozenModel, adapters: AdapterSet | None, data, mode: str = "merge",
             batch_size: int = 256, seed: int = 0, fixed_index: int = 0,
             feature_dump=None) -> EvalReport:
    """Deterministic top-1 over a split; fills parameter and flop counts.

    Stochastic mode derives one child stream per batch index from ``seed``.
    ``feature_dump`` writes the final-block class-token features of a dense
    pass to the given path (.npy) for external embedding tools.
    """
    if len(data) == 0:
        raise DataError("evaluation split is empty")
    if mode == "merge" and adapters is not None:
        adapters = merge_experts(adapters)
    ADAPTER_FLOPS.reset()
    correct = 0
    for b, start in enumerate(range(0, len(data), batch_size)):
        images = data.images[start:start + batch_size]
        labels = data.labels[start:start + batch_size]
        logits = infer(model, adapters, images, mode, fixed_index, rng=Rng(seed).split(b))
        correct += int((np.argmax(logits, axis=-1) == labels).sum())
    flops = ADAPTER_FLOPS.macs
    if feature_dump is not None:
        feats = []
        for start in range(0, len(data), batch_size):
            _, taps = forward(model, data.images[start:start + batch_size], adapters, DENSE)
            last = taps[-1].data
            feats.append(last[:, 0, :] if model.cfg.use_cls_token else last.mean(axis=1))
        np.save(feature_dump, np.concatenate(feats, axis=0))
    return EvalReport(mode=mode, top1=correct / len(data), num_eval_samples=len(data),
                      trainable_params_excl_classifier=count_trainable_params(model, adapters),
                      forward_matmul_flops=flops, seed=seed)


# ---------------------------------------------------------------------------
# parameter accounting


def count_trainable_params(model: FrozenModel, adapters: AdapterSet | None) -> int:
    """Trainable parameters excluding the classifier head.

    Shared expert adapters count every entry (all of them train across a run,
    independent of the expert count); pruned baselines count retained weight
    entries plus their dense biases.
    """
    total = 0
    for name, t in model.trainable_params():
        if not name.startswith("head."):
            total += t.size
    if adapters is None:
        return total
    for _, a in adapters.adapters():
        total += int(a.retain_down.sum()) if a.retain_down is not None else a.w_down.size
        total += int(a.retain_up.sum()) if a.retain_up is not None else a.w_up.size
        if a.b_down is not None:
            total += a.b_down.size + a.b_up.size
    for _, m in adapters.loras():
        total += int(m.retain_a.sum()) if m.retain_a is not None else m.a.size
        total += int(m.retain_b.sum()) if m.retain_b is not None else m.b.size
    return total


def count_trainable_from_config(bcfg: BackboneConfig, acfg: AdapterConfig | None,
                                method: str, retain_fraction: float = 1.0) -> int:
    """Same accounting as :func:`count_trainable_params`, from configs alone
    (no model build), so large reference configurations stay cheap."""
    d = bcfg.embed_dim
    layers = bcfg.num_layers
    if method == "linear_probe":
        return 0
    if method == "bias":
        per_block = 4 * d + bcfg.mlp_hidden + d + 2 * d  # attn + mlp + layer-norm biases
        return d + layers * per_block + d  # patch.b + blocks + norm.b
    if acfg is None:
        raise ConfigError(f"method {method!r} needs an adapter config")
    r = acfg.bottleneck_dim
    sparse = method in ("sparse_adapter", "sparse_lora")
    weight_entries = (round(retain_fraction * d * r) + round(retain_fraction * r * d)
                      if sparse else 2 * d * r)
    if acfg.kind == "lora":
        return layers * 2 * weight_entries  # q and v targets, no biases
    per_adapter = weight_entries + ((r + d) if acfg.use_bias else 0)
    per_block = 2 * per_adapter if acfg.insertion == "houlsby" else per_adapter
    return layers * per_block
