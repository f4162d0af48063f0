"""Stochastic-activation training.

Each batch samples one expert configuration per forward pass, runs two passes,
and optimizes cross-entropy plus a symmetric-KL consistency term between the
two predictions plus a feature-alignment term over the configured block range.
Gradients are masked to the union of the sampled experts' entries before any
optimizer state updates, and the parameter update itself only touches active
entries, so an expert's weights move only in batches where it was activated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapters import DENSE, AdapterSet, expert_mode
from .autodiff import Tensor
from .backbone import FrozenModel, forward
from .dataio import augment_batch
from .errors import ConfigError, InternalError, MosaError
from .rng import STREAM_AUG, STREAM_DATA, STREAM_EXPERTS, Rng

ALIGNMENTS = ("none", "shallow", "deep", "all")
PAIRINGS = ("independent", "tied")

METRICS_HEADER = "epoch,step,lr,loss,ce,kl,align_mse,val_top1"


@dataclass
class TrainPlan:
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

    def validate(self) -> None:
        if self.epochs < 0 or self.warmup_epochs < 0 or self.warmup_epochs >= max(self.epochs, 1):
            raise ConfigError(f"need 0 <= warmup_epochs < epochs, got "
                              f"{self.warmup_epochs} / {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if self.alignment not in ALIGNMENTS:
            raise ConfigError(f"unknown alignment {self.alignment!r}")
        if self.expert_pairing not in PAIRINGS:
            raise ConfigError(f"unknown expert_pairing {self.expert_pairing!r}")
        if self.expert_sampling != "per_batch":
            raise ConfigError(f"unknown expert_sampling {self.expert_sampling!r}")


@dataclass(frozen=True)
class ExpertSample:
    """Expert indices for the two stochastic passes; down indices are None
    when the down projection is dense."""

    down1: int | None
    up1: int
    down2: int | None
    up2: int


def sample_experts(rng: Rng, num_experts: int, hierarchical: bool,
                   two_pass_distinct: bool = True,
                   pairing: str = "independent") -> ExpertSample:
    """Uniform per-batch expert draws.

    Draw order is fixed: up1, up2, then (non-hierarchical, independent
    pairing) down1, down2.  With ``two_pass_distinct`` the second up index is
    drawn without replacement.  ``num_experts == 1`` consumes no draws.
    """
    if num_experts < 1:
        raise ConfigError("num_experts must be >= 1")
    if num_experts == 1:
        return ExpertSample(None, 0, None, 0)
    up1 = rng.randint(num_experts)
    if two_pass_distinct:
        r = rng.randint(num_experts - 1)
        up2 = r + (1 if r >= up1 else 0)
    else:
        up2 = rng.randint(num_experts)
    if hierarchical:
        return ExpertSample(None, up1, None, up2)
    if pairing == "tied":
        return ExpertSample(up1, up1, up2, up2)
    down1 = rng.randint(num_experts)
    down2 = rng.randint(num_experts)
    return ExpertSample(down1, up1, down2, up2)


# ---------------------------------------------------------------------------
# objective


@dataclass
class LossTerms:
    ce: float
    kl: float
    align_mse: float
    total: float


def alignment_indices(alignment: str, num_layers: int) -> tuple[int, ...]:
    half = num_layers // 2
    if alignment == "none":
        return ()
    if alignment == "shallow":
        return tuple(range(half))
    if alignment == "deep":
        return tuple(range(half, num_layers))
    if alignment == "all":
        return tuple(range(num_layers))
    raise ConfigError(f"unknown alignment {alignment!r}")


def objective(logits1: Tensor, labels, alpha: float, beta: float,
              logits2: Tensor | None = None,
              features1: list[Tensor] | None = None,
              features2: list[Tensor] | None = None,
              align: tuple[int, ...] = ()) -> tuple[Tensor, LossTerms]:
    """CE(p1, y) + alpha/2 (KL(p1||p2) + KL(p2||p1)) + beta sum MSE(f1_i, f2_i).

    Cross-entropy applies to the first pass only.  Terms with a zero weight
    or a missing second pass are skipped entirely.
    """
    ce = ad.cross_entropy(logits1, labels)
    loss = ce
    kl_val = 0.0
    align_val = 0.0
    if alpha > 0.0 and logits2 is not None:
        p1 = ad.softmax(logits1)
        p2 = ad.softmax(logits2)
        kl_sym = ad.add(ad.kl_div(p1, p2), ad.kl_div(p2, p1))
        kl_val = kl_sym.item()
        loss = ad.add(loss, ad.scale(kl_sym, alpha / 2.0))
    if beta > 0.0 and features2 is not None and align:
        acc = None
        for i in align:
            term = ad.mse(features1[i], features2[i])
            acc = term if acc is None else ad.add(acc, term)
        align_val = acc.item()
        loss = ad.add(loss, ad.scale(acc, beta))
    return loss, LossTerms(ce=ce.item(), kl=kl_val, align_mse=align_val, total=loss.item())


def compute_loss(model: FrozenModel, adapters: AdapterSet | None,
                 images: np.ndarray, labels, plan: TrainPlan,
                 sample: ExpertSample) -> tuple[Tensor, LossTerms, list[tuple[int | None, int]]]:
    """Run the stochastic passes for one batch and assemble the objective.

    Returns the loss, its term values, and the (down, up) expert pairs that
    actually ran, which define this step's active gradient masks.
    """
    stochastic = adapters is not None and adapters.has_experts()
    mode1 = expert_mode(sample.down1, sample.up1) if stochastic else DENSE
    logits1, feats1 = forward(model, images, adapters, mode1)
    used: list[tuple[int | None, int]] = [(sample.down1, sample.up1)]
    logits2 = None
    feats2 = None
    align: tuple[int, ...] = ()
    if stochastic and (plan.alpha > 0.0 or plan.beta > 0.0):
        logits2, feats2 = forward(model, images, adapters,
                                  expert_mode(sample.down2, sample.up2))
        used.append((sample.down2, sample.up2))
        if plan.beta > 0.0:
            align = alignment_indices(plan.alignment, model.cfg.num_layers)
    loss, terms = objective(logits1, labels, plan.alpha, plan.beta,
                            logits2=logits2, features1=feats1, features2=feats2,
                            align=align)
    return loss, terms, used


# ---------------------------------------------------------------------------
# masked optimizer


class MaskedAdamW:
    """AdamW with per-step gradient masks.

    The gradient is multiplied by the active mask before the moment updates,
    so entries never activated keep exactly zero moments, and both the
    decoupled weight decay and the parameter delta apply only where the mask
    is 1.  Parameters without a mask take the plain dense update.
    """

    def __init__(self, params: list[tuple[str, Tensor]], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}

    def step(self, lr: float, masks: dict[str, np.ndarray] | None = None) -> None:
        masks = masks or {}
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params:
            if p.grad is None:
                raise InternalError(f"missing gradient for trainable parameter {name!r}")
            g = p.grad
            mask = masks.get(name)
            if mask is not None:
                g = g * mask
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            update = lr * ((m / bc1) / (np.sqrt(v / bc2) + self.eps)
                           + self.weight_decay * p.data)
            if mask is not None:
                p.data = np.where(mask > 0.0, p.data - update, p.data)
            else:
                p.data = p.data - update


def lr_at(step: int, plan: TrainPlan, steps_per_epoch: int) -> float:
    """Warmup ramp to base_lr * batch_size / 256, then cosine decay to zero
    at the final step."""
    total = plan.epochs * steps_per_epoch
    if total <= 0:
        return 0.0
    peak = plan.base_lr * plan.batch_size / 256.0
    warm = plan.warmup_epochs * steps_per_epoch
    if warm > 0 and step < warm:
        return peak * step / warm
    last = total - 1
    if last <= warm:
        return peak
    t = min((step - warm) / (last - warm), 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# parameter and mask tables


def collect_trainables(model: FrozenModel, adapters: AdapterSet | None) -> list[tuple[str, Tensor]]:
    out = list(model.trainable_params())
    if adapters is not None:
        out += adapters.named_params()
    return out


def active_masks(adapters: AdapterSet | None,
                 used: list[tuple[int | None, int]]) -> dict[str, np.ndarray]:
    """Per-parameter active masks for one step: the union of the sampled
    experts' masks, or the fixed retain mask for pruned baselines."""
    out: dict[str, np.ndarray] = {}
    if adapters is None or adapters.merged:
        return out
    downs = [d for d, _ in used if d is not None]
    ups = [u for _, u in used]
    for prefix, a in adapters.adapters():
        if a.retain_down is not None:
            out[f"{prefix}.w_down"] = a.retain_down
        elif a.down_masks is not None:
            out[f"{prefix}.w_down"] = a.down_masks.union(downs)
        if a.retain_up is not None:
            out[f"{prefix}.w_up"] = a.retain_up
        elif a.up_masks is not None:
            out[f"{prefix}.w_up"] = a.up_masks.union(ups)
    for prefix, mod in adapters.loras():
        if mod.retain_a is not None:
            out[f"{prefix}.a"] = mod.retain_a
        if mod.retain_b is not None:
            out[f"{prefix}.b"] = mod.retain_b
        elif mod.masks is not None:
            out[f"{prefix}.b"] = mod.masks.union(ups)
    return out


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    steps: int = 0


def _epoch_batches(n: int, batch_size: int, rng: Rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _val_top1(model: FrozenModel, adapters: AdapterSet | None, data, batch_size: int) -> float:
    correct = 0
    for start in range(0, len(data), batch_size):
        logits, _ = forward(model, data.images[start:start + batch_size], adapters, DENSE)
        pred = np.argmax(logits.data, axis=-1)
        correct += int((pred == data.labels[start:start + batch_size]).sum())
    return correct / len(data)


def _fmt(x) -> str:
    return repr(float(x))


def _epoch_row(epoch, step, lr, sums, batches, val) -> dict:
    return {"epoch": epoch, "step": step, "lr": lr,
            "loss": sums["total"] / batches, "ce": sums["ce"] / batches,
            "kl": sums["kl"] / batches, "align_mse": sums["align_mse"] / batches,
            "val_top1": val}


def metrics_to_csv(rows: list[dict]) -> str:
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(",".join([str(r["epoch"]), str(r["step"]), _fmt(r["lr"]),
                               _fmt(r["loss"]), _fmt(r["ce"]), _fmt(r["kl"]),
                               _fmt(r["align_mse"]),
                               "" if r["val_top1"] is None else _fmt(r["val_top1"])]))
    return "\n".join(lines) + "\n"


def train(model: FrozenModel, adapters: AdapterSet | None, train_data, val_data,
          plan: TrainPlan, on_step=None) -> TrainResult:
    """Full stochastic-activation loop; deterministic given ``plan.seed``.

    ``on_step(step, sample, lr)`` fires after each optimizer step.  Validation
    runs each epoch with the dense (merged-equivalent) forward.
    """
    plan.validate()
    n = len(train_data)
    root = Rng(plan.seed)
    data_rng = root.split(STREAM_DATA)
    expert_rng = root.split(STREAM_EXPERTS)
    aug_rng = root.split(STREAM_AUG)
    params = collect_trainables(model, adapters)
    opt = MaskedAdamW(params, plan.beta1, plan.beta2, plan.eps, plan.weight_decay)
    steps_per_epoch = math.ceil(n / plan.batch_size)
    stochastic = adapters is not None and adapters.has_experts()
    result = TrainResult()
    step = 0
    for epoch in range(plan.epochs):
        sums = {"total": 0.0, "ce": 0.0, "kl": 0.0, "align_mse": 0.0}
        lr = 0.0
        for idx in _epoch_batches(n, plan.batch_size, data_rng):
            images = train_data.images[idx]
            if plan.augment:
                images = augment_batch(images, aug_rng)
            labels = train_data.labels[idx]
            if stochastic:
                sample = sample_experts(expert_rng, adapters.num_experts,
                                        adapters.cfg.hierarchical,
                                        plan.two_pass_distinct, plan.expert_pairing)
            else:
                sample = ExpertSample(None, 0, None, 0)
            try:
                loss, terms, used = compute_loss(model, adapters, images, labels, plan, sample)
            except MosaError as e:
                raise type(e)(f"step {step} (epoch {epoch}): {e}") from e
            for _, p in params:
                p.grad = None
            loss.backward()
            lr = lr_at(step, plan, steps_per_epoch)
            opt.step(lr, active_masks(adapters, used))
            for _, p in params:
                p.grad = None
            for key, val in (("total", terms.total), ("ce", terms.ce),
                             ("kl", terms.kl), ("align_mse", terms.align_mse)):
                sums[key] += val
            if on_step is not None:
                on_step(step, sample, lr)
            if plan.log_every_step:
                result.metrics.append({"epoch": epoch, "step": step, "lr": lr,
                                       "loss": terms.total, "ce": terms.ce,
                                       "kl": terms.kl, "align_mse": terms.align_mse,
                                       "val_top1": None})
            step += 1
        val = _val_top1(model, adapters, val_data, plan.batch_size)
        result.metrics.append(_epoch_row(epoch, step, lr, sums, steps_per_epoch, val))
    result.steps = step
    return result


def train_reference(model: FrozenModel, adapters: AdapterSet | None, train_data, val_data,
                    plan: TrainPlan, on_step=None) -> TrainResult:
    """Plain standard-adapter trainer: one dense forward, cross-entropy only,
    unmasked AdamW.  Serves as the degeneracy oracle for num_experts = 1,
    alpha = beta = 0."""
    plan.validate()
    n = len(train_data)
    root = Rng(plan.seed)
    data_rng = root.split(STREAM_DATA)
    aug_rng = root.split(STREAM_AUG)
    params = collect_trainables(model, adapters)
    opt = MaskedAdamW(params, plan.beta1, plan.beta2, plan.eps, plan.weight_decay)
    steps_per_epoch = math.ceil(n / plan.batch_size)
    result = TrainResult()
    step = 0
    for epoch in range(plan.epochs):
        sums = {"total": 0.0, "ce": 0.0, "kl": 0.0, "align_mse": 0.0}
        lr = 0.0
        for idx in _epoch_batches(n, plan.batch_size, data_rng):
            images = train_data.images[idx]
            if plan.augment:
                images = augment_batch(images, aug_rng)
            logits, _ = forward(model, images, adapters, DENSE)
            loss = ad.cross_entropy(logits, train_data.labels[idx])
            for _, p in params:
                p.grad = None
            loss.backward()
            lr = lr_at(step, plan, steps_per_epoch)
            opt.step(lr)
            for _, p in params:
                p.grad = None
            sums["total"] += loss.item()
            sums["ce"] += loss.item()
            if on_step is not None:
                on_step(step, None, lr)
            step += 1
        val = _val_top1(model, adapters, val_data, plan.batch_size)
        result.metrics.append(_epoch_row(epoch, step, lr, sums, steps_per_epoch, val))
    result.steps = step
    return result
