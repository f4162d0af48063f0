"""Adapter structures: quantile mask splitting, shared-weight sparse experts,
the hierarchical sparse strategy, the prune-before-tune baseline, and LoRA.

An adapter's experts are views, not copies: one dense weight pair is shared
and expert ``i`` is realized by multiplying with its 0/1 mask.  Merging the
experts back into a dense adapter is therefore the identity on storage, and
the toolkit's zero-extra-storage claim holds structurally.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, IndexRangeError, InternalError
from .rng import Rng, kaiming_uniform

INSERTIONS = ("parallel_ffn", "pfeiffer", "houlsby")
ACTIVATIONS = ("relu", "gelu")
KINDS = ("adapter", "lora")
LORA_TARGETS = ("q", "v")


class FlopCounter:
    """Multiply-accumulate counter for adapter-branch matmuls only."""

    def __init__(self):
        self.macs = 0

    def add(self, n: int) -> None:
        self.macs += int(n)

    def reset(self) -> None:
        self.macs = 0


# Global instrument; evaluation resets it around a pass it wants to measure.
ADAPTER_FLOPS = FlopCounter()


@dataclass(frozen=True)
class ForwardMode:
    """Which adapter weights a forward pass sees.

    ``dense=True`` uses the full shared matrices (standard adapter, merged
    inference).  Otherwise the indexed expert masks are applied.
    """

    dense: bool = True
    down_index: int | None = None
    up_index: int | None = None


DENSE = ForwardMode()


def expert_mode(down_index: int | None, up_index: int) -> ForwardMode:
    return ForwardMode(dense=False, down_index=down_index, up_index=up_index)


@dataclass(frozen=True)
class AdapterConfig:
    kind: str = "adapter"
    bottleneck_dim: int = 16
    num_experts: int = 4
    hierarchical: bool = True
    sparsify_down: bool = False
    sparsify_up: bool = True
    insertion: str = "parallel_ffn"
    activation: str = "relu"
    scale: float = 1.0
    use_bias: bool = True

    def validate(self, embed_dim: int) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown adapter kind {self.kind!r}")
        if self.insertion not in INSERTIONS:
            raise ConfigError(f"unknown insertion style {self.insertion!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.bottleneck_dim < 1:
            raise ConfigError("bottleneck_dim must be >= 1")
        max_experts = embed_dim * self.bottleneck_dim
        if not 1 <= self.num_experts <= max_experts:
            raise ConfigError(
                f"num_experts must be in [1, {max_experts}] for d={embed_dim}, "
                f"r={self.bottleneck_dim}; got {self.num_experts}")
        if self.hierarchical and (self.sparsify_down or not self.sparsify_up):
            raise ConfigError("hierarchical mode requires a dense down projection "
                              "and a split up projection")
        if self.num_experts > 1 and not (self.sparsify_down or self.sparsify_up):
            raise ConfigError("num_experts > 1 needs at least one split projection")
        if self.kind == "lora" and self.sparsify_down:
            raise ConfigError("lora experts split the up factor only")


class MaskSet:
    """N binary matrices forming an exact partition of a weight's index set."""

    def __init__(self, masks: np.ndarray, seed: int):
        self.masks = np.asarray(masks, dtype=np.float64)
        self.seed = seed

    @property
    def num_masks(self) -> int:
        return self.masks.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]

    def mask(self, i: int) -> np.ndarray:
        if not 0 <= i < self.num_masks:
            raise IndexRangeError(f"expert index {i} outside [0, {self.num_masks})")
        return self.masks[i]

    def union(self, indices) -> np.ndarray:
        out = np.zeros(self.shape)
        for i in set(indices):
            out = np.maximum(out, self.mask(i))
        return out

    def counts(self) -> list[int]:
        return [int(m.sum()) for m in self.masks]

    def validate_partition(self) -> None:
        total = self.masks.sum(axis=0)
        if not np.array_equal(total, np.ones(self.shape)):
            raise InternalError("masks are not a disjoint, exhaustive partition")
        counts = self.counts()
        if max(counts) - min(counts) > 1:
            raise InternalError(f"mask sizes unbalanced: {counts}")


def split_masks(rows: int, cols: int, num_masks: int, rng: Rng) -> MaskSet:
    """Partition a rows x cols index set into ``num_masks`` balanced masks.

    Each entry gets a uniform score; entries are ranked and rank k lands in
    mask floor(k * N / (rows * cols)).  Ranking realizes the quantile rule
    without losing the boundary entry and with exact balance, and ties cannot
    unbalance groups.  ``num_masks == 1`` returns the all-ones mask without
    consuming any draws.
    """
    total = rows * cols
    if not 1 <= num_masks <= total:
        raise ConfigError(f"num_masks must be in [1, {total}], got {num_masks}")
    if num_masks == 1:
        return MaskSet(np.ones((1, rows, cols)), seed=rng.seed)
    scores = np.asarray(rng.uniform((total,)))
    order = np.argsort(scores, kind="stable")
    groups = (np.arange(total, dtype=np.int64) * num_masks) // total
    flat = np.zeros((num_masks, total))
    flat[groups, order] = 1.0
    return MaskSet(flat.reshape(num_masks, rows, cols), seed=rng.seed)


@dataclass
class SparseExpertAdapter:
    """One shared dense weight pair plus expert masks.

    Biases are shared dense across experts.  ``retain_down``/``retain_up``
    hold the fixed prune-before-tune masks of the sparse-adapter baseline.
    """

    cfg: AdapterConfig
    w_down: Tensor
    w_up: Tensor
    b_down: Tensor | None
    b_up: Tensor | None
    down_masks: MaskSet | None
    up_masks: MaskSet | None
    retain_down: np.ndarray | None = None
    retain_up: np.ndarray | None = None

    @property
    def embed_dim(self) -> int:
        return self.w_down.shape[0]

    def params(self) -> list[tuple[str, Tensor]]:
        out = [("w_down", self.w_down), ("w_up", self.w_up)]
        if self.b_down is not None:
            out += [("b_down", self.b_down), ("b_up", self.b_up)]
        return out


def build_adapter(embed_dim: int, cfg: AdapterConfig, weight_rng: Rng, mask_rng: Rng) -> SparseExpertAdapter:
    """Fresh adapter: Kaiming-uniform down projection, zero up projection and
    biases, so the adapted model equals the frozen model at step 0."""
    r = cfg.bottleneck_dim
    w_down = Tensor(kaiming_uniform(weight_rng, (embed_dim, r), fan_in=embed_dim), requires_grad=True)
    w_up = Tensor(np.zeros((r, embed_dim)), requires_grad=True)
    b_down = Tensor(np.zeros(r), requires_grad=True) if cfg.use_bias else None
    b_up = Tensor(np.zeros(embed_dim), requires_grad=True) if cfg.use_bias else None
    down_masks = None
    up_masks = None
    if cfg.num_experts > 1:
        if cfg.sparsify_down and not cfg.hierarchical:
            down_masks = split_masks(embed_dim, r, cfg.num_experts, mask_rng.split(0))
        if cfg.sparsify_up:
            up_masks = split_masks(r, embed_dim, cfg.num_experts, mask_rng.split(1))
    return SparseExpertAdapter(cfg=cfg, w_down=w_down, w_up=w_up, b_down=b_down,
                               b_up=b_up, down_masks=down_masks, up_masks=up_masks)


def _activate(cfg: AdapterConfig, h: Tensor) -> Tensor:
    return ad.relu(h) if cfg.activation == "relu" else ad.gelu(h)


def adapter_delta(adapter: SparseExpertAdapter, x: Tensor, mode: ForwardMode) -> Tensor:
    """Adapter branch output (no residual): scale * f(x Wd + bd) Wu + bu."""
    cfg = adapter.cfg
    x = ad.as_tensor(x)
    was_vector = x.data.ndim == 1
    if was_vector:
        x = ad.reshape(x, (1, x.shape[0]))
    d, r = adapter.w_down.shape

    wd = adapter.w_down
    if adapter.retain_down is not None:
        wd = ad.mul(wd, Tensor(adapter.retain_down))
    wu = adapter.w_up
    if adapter.retain_up is not None:
        wu = ad.mul(wu, Tensor(adapter.retain_up))
    if not mode.dense:
        if adapter.down_masks is not None:
            if mode.down_index is None:
                raise ConfigError("down expert index required: down projection is split")
            wd = ad.mul(wd, Tensor(adapter.down_masks.mask(mode.down_index)))
        if adapter.up_masks is not None:
            if mode.up_index is None:
                raise ConfigError("up expert index required: up projection is split")
            wu = ad.mul(wu, Tensor(adapter.up_masks.mask(mode.up_index)))

    lead = int(np.prod(x.shape[:-1]))
    ADAPTER_FLOPS.add(lead * d * r + lead * r * d)

    h = ad.matmul(x, wd)
    if adapter.b_down is not None:
        h = ad.add(h, adapter.b_down)
    h = _activate(cfg, h)
    out = ad.matmul(h, wu)
    if cfg.scale != 1.0:
        out = ad.scale(out, cfg.scale)
    if adapter.b_up is not None:
        out = ad.add(out, adapter.b_up)
    if was_vector:
        out = ad.reshape(out, (out.shape[-1],))
    return out


def _check_expert_indices(adapter: SparseExpertAdapter, down_index, up_index) -> None:
    n = adapter.cfg.num_experts
    if up_index is None or not 0 <= up_index < n:
        raise IndexRangeError(f"up expert index {up_index} outside [0, {n})")
    if adapter.down_masks is None:
        if down_index is not None:
            raise ConfigError("down expert index given but the down projection is dense")
    else:
        if down_index is None:
            raise ConfigError("down expert index required: down projection is split")
        if not 0 <= down_index < n:
            raise IndexRangeError(f"down expert index {down_index} outside [0, {n})")


def adapter_forward_standard(adapter: SparseExpertAdapter, x: Tensor) -> Tensor:
    """x + dense adapter branch."""
    return ad.add(ad.as_tensor(x), adapter_delta(adapter, x, DENSE))


def adapter_forward_expert(adapter: SparseExpertAdapter, x: Tensor,
                           down_index: int | None = None, up_index: int = 0) -> Tensor:
    """x + single-expert adapter branch (masked shared weights)."""
    _check_expert_indices(adapter, down_index, up_index)
    return ad.add(ad.as_tensor(x), adapter_delta(adapter, x, expert_mode(down_index, up_index)))


def _retain_mask(rows: int, cols: int, fraction: float, rng: Rng) -> np.ndarray:
    total = rows * cols
    keep = int(round(fraction * total))
    order = np.argsort(np.asarray(rng.uniform((total,))), kind="stable")
    flat = np.zeros(total)
    flat[order[:keep]] = 1.0
    return flat.reshape(rows, cols)


def build_sparse_adapter_baseline(adapter: SparseExpertAdapter, retain_fraction: float,
                                  rng: Rng) -> SparseExpertAdapter:
    """Prune-before-tune baseline: one fixed random mask per projection keeps
    ``round(retain_fraction * entries)`` weights; biases stay dense."""
    if not 0.0 < retain_fraction <= 1.0:
        raise ConfigError(f"retain_fraction must be in (0, 1], got {retain_fraction}")
    d, r = adapter.w_down.shape
    return replace(adapter,
                   retain_down=_retain_mask(d, r, retain_fraction, rng.split(0)),
                   retain_up=_retain_mask(r, d, retain_fraction, rng.split(1)))


# ---------------------------------------------------------------------------
# LoRA


@dataclass
class LoraModule:
    """Low-rank delta for one backbone linear; expert masks split the up
    factor ``b`` only, and ``b`` starts at zero so the initial delta is zero."""

    cfg: AdapterConfig
    target: str
    a: Tensor
    b: Tensor
    masks: MaskSet | None
    retain_a: np.ndarray | None = None
    retain_b: np.ndarray | None = None

    def params(self) -> list[tuple[str, Tensor]]:
        return [("a", self.a), ("b", self.b)]


def build_lora(embed_dim: int, cfg: AdapterConfig, target: str,
               weight_rng: Rng, mask_rng: Rng) -> LoraModule:
    if target not in LORA_TARGETS:
        raise ConfigError(f"unknown lora target {target!r}")
    r = cfg.bottleneck_dim
    a = Tensor(kaiming_uniform(weight_rng, (embed_dim, r), fan_in=embed_dim), requires_grad=True)
    b = Tensor(np.zeros((r, embed_dim)), requires_grad=True)
    masks = None
    if cfg.num_experts > 1:
        masks = split_masks(r, embed_dim, cfg.num_experts, mask_rng.split(1))
    return LoraModule(cfg=cfg, target=target, a=a, b=b, masks=masks)


def lora_delta(module: LoraModule, x: Tensor, mode: ForwardMode) -> Tensor:
    x = ad.as_tensor(x)
    d, r = module.a.shape
    a = module.a
    if module.retain_a is not None:
        a = ad.mul(a, Tensor(module.retain_a))
    b = module.b
    if module.retain_b is not None:
        b = ad.mul(b, Tensor(module.retain_b))
    if not mode.dense and module.masks is not None:
        if mode.up_index is None:
            raise ConfigError("expert index required: lora up factor is split")
        b = ad.mul(b, Tensor(module.masks.mask(mode.up_index)))
    lead = int(np.prod(x.shape[:-1]))
    ADAPTER_FLOPS.add(lead * d * r + lead * r * d)
    return ad.matmul(ad.matmul(x, a), b)


def lora_forward(module: LoraModule, x: Tensor, expert_index: int | None = None) -> Tensor:
    """Low-rank delta x A (B o M_idx); no activation between the factors."""
    if expert_index is None:
        return lora_delta(module, x, DENSE)
    n = module.cfg.num_experts
    if not 0 <= expert_index < n:
        raise IndexRangeError(f"expert index {expert_index} outside [0, {n})")
    return lora_delta(module, x, expert_mode(None, expert_index))


def build_sparse_lora_baseline(module: LoraModule, retain_fraction: float, rng: Rng) -> LoraModule:
    if not 0.0 < retain_fraction <= 1.0:
        raise ConfigError(f"retain_fraction must be in (0, 1], got {retain_fraction}")
    d, r = module.a.shape
    return replace(module,
                   retain_a=_retain_mask(d, r, retain_fraction, rng.split(0)),
                   retain_b=_retain_mask(r, d, retain_fraction, rng.split(1)))


# ---------------------------------------------------------------------------
# per-model collection


@dataclass
class AdapterSet:
    """All adapter modules attached to a backbone, one entry per block."""

    cfg: AdapterConfig
    ffn: list[SparseExpertAdapter] = field(default_factory=list)
    attn: list[SparseExpertAdapter] = field(default_factory=list)
    lora_q: list[LoraModule] = field(default_factory=list)
    lora_v: list[LoraModule] = field(default_factory=list)
    merged: bool = False

    @property
    def kind(self) -> str:
        return self.cfg.kind

    @property
    def num_experts(self) -> int:
        return self.cfg.num_experts

    def has_experts(self) -> bool:
        return self.cfg.num_experts > 1 and not self.merged

    def adapters(self) -> list[tuple[str, SparseExpertAdapter]]:
        out = [(f"adapter.{i}.ffn", a) for i, a in enumerate(self.ffn)]
        out += [(f"adapter.{i}.attn", a) for i, a in enumerate(self.attn)]
        return out

    def loras(self) -> list[tuple[str, LoraModule]]:
        out = [(f"adapter.{i}.q", m) for i, m in enumerate(self.lora_q)]
        out += [(f"adapter.{i}.v", m) for i, m in enumerate(self.lora_v)]
        return out

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for prefix, a in self.adapters():
            out += [(f"{prefix}.{n}", t) for n, t in a.params()]
        for prefix, m in self.loras():
            out += [(f"{prefix}.{n}", t) for n, t in m.params()]
        return out


def build_adapter_set(backbone_cfg, adapter_cfg: AdapterConfig, rng: Rng) -> AdapterSet:
    """Adapters for every block; weight and mask streams are split per block
    and per role so one module's draws never shift another's."""
    adapter_cfg.validate(backbone_cfg.embed_dim)
    d = backbone_cfg.embed_dim
    w_rng = rng.split(0)
    m_rng = rng.split(1)
    out = AdapterSet(cfg=adapter_cfg)
    for i in range(backbone_cfg.num_layers):
        if adapter_cfg.kind == "adapter":
            out.ffn.append(build_adapter(d, adapter_cfg, w_rng.split(2 * i), m_rng.split(2 * i)))
            if adapter_cfg.insertion == "houlsby":
                out.attn.append(build_adapter(d, adapter_cfg, w_rng.split(2 * i + 1), m_rng.split(2 * i + 1)))
        else:
            out.lora_q.append(build_lora(d, adapter_cfg, "q", w_rng.split(2 * i), m_rng.split(2 * i)))
            out.lora_v.append(build_lora(d, adapter_cfg, "v", w_rng.split(2 * i + 1), m_rng.split(2 * i + 1)))
    return out


def sparsify_adapter_set(adapters: AdapterSet, retain_fraction: float, rng: Rng) -> AdapterSet:
    """Apply the prune-before-tune baseline to every module in the set."""
    out = AdapterSet(cfg=adapters.cfg, merged=adapters.merged)
    for i, a in enumerate(adapters.ffn):
        out.ffn.append(build_sparse_adapter_baseline(a, retain_fraction, rng.split(2 * i)))
    for i, a in enumerate(adapters.attn):
        out.attn.append(build_sparse_adapter_baseline(a, retain_fraction, rng.split(2 * i + 1)))
    for i, m in enumerate(adapters.lora_q):
        out.lora_q.append(build_sparse_lora_baseline(m, retain_fraction, rng.split(2 * i)))
    for i, m in enumerate(adapters.lora_v):
        out.lora_v.append(build_sparse_lora_baseline(m, retain_fraction, rng.split(2 * i + 1)))
    return out
