"""A tiny ViT-style frozen encoder with adapter insertion points.

The backbone is randomly initialized and frozen at build time; only the
classifier head (and, for bias tuning, the bias vectors) train.  Every block's
post-residual output is returned as a feature tap for the alignment loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import adapters as adp
from . import autodiff as ad
from .adapters import DENSE, AdapterSet, ForwardMode
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .rng import Rng, kaiming_uniform


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 10
    use_cls_token: bool = True

    def validate(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by "
                              f"patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by "
                              f"num_heads {self.num_heads}")
        if self.num_layers < 2:
            raise ConfigError("num_layers must be >= 2 (alignment splits the depth)")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_tokens(self) -> int:
        return self.num_patches + (1 if self.use_cls_token else 0)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


class FrozenModel:
    """Parameter registry (name -> Tensor); trainable == requires_grad."""

    def __init__(self, cfg: BackboneConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    def trainable_params(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.params.items() if t.requires_grad]

    def frozen_payload(self) -> bytes:
        """Concatenated bytes of every frozen parameter, in registry order."""
        return b"".join(t.data.tobytes() for _, t in self.params.items()
                        if not t.requires_grad)

    def mark_bias_trainable(self) -> None:
        """Bias-tuning baseline: every non-head parameter named ``*.b`` trains."""
        for name, t in self.params.items():
            if name.endswith(".b") and not name.startswith("head."):
                t.requires_grad = True


def build_backbone(cfg: BackboneConfig, rng: Rng) -> FrozenModel:
    """Patch embedding, positional embedding, pre-norm transformer blocks,
    final norm, linear classifier.  Parameters are drawn from ``rng`` in
    registry order; everything except ``head.*`` is frozen."""
    cfg.validate()
    d = cfg.embed_dim
    p: dict[str, Tensor] = {}

    def frozen(name, data):
        p[name] = Tensor(data)

    frozen("patch.w", kaiming_uniform(rng, (cfg.patch_dim, d), fan_in=cfg.patch_dim))
    frozen("patch.b", np.zeros(d))
    if cfg.use_cls_token:
        frozen("cls", np.asarray(rng.normal((1, d))) * 0.02)
    frozen("pos", np.asarray(rng.normal((cfg.num_tokens, d))) * 0.02)
    for i in range(cfg.num_layers):
        pre = f"blocks.{i}"
        frozen(f"{pre}.ln1.g", np.ones(d))
        frozen(f"{pre}.ln1.b", np.zeros(d))
        for lin in ("q", "k", "v", "o"):
            frozen(f"{pre}.attn.{lin}.w", kaiming_uniform(rng, (d, d), fan_in=d))
            frozen(f"{pre}.attn.{lin}.b", np.zeros(d))
        frozen(f"{pre}.ln2.g", np.ones(d))
        frozen(f"{pre}.ln2.b", np.zeros(d))
        frozen(f"{pre}.mlp.fc1.w", kaiming_uniform(rng, (d, cfg.mlp_hidden), fan_in=d))
        frozen(f"{pre}.mlp.fc1.b", np.zeros(cfg.mlp_hidden))
        frozen(f"{pre}.mlp.fc2.w", kaiming_uniform(rng, (cfg.mlp_hidden, d), fan_in=cfg.mlp_hidden))
        frozen(f"{pre}.mlp.fc2.b", np.zeros(d))
    frozen("norm.g", np.ones(d))
    frozen("norm.b", np.zeros(d))
    p["head.w"] = Tensor(np.asarray(rng.normal((d, cfg.num_classes))) * 0.02, requires_grad=True)
    p["head.b"] = Tensor(np.zeros(cfg.num_classes), requires_grad=True)
    return FrozenModel(cfg, p)


def patchify(cfg: BackboneConfig, images: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, patches, C * p * p), row-major patch grid."""
    b = images.shape[0]
    g, ps = cfg.grid, cfg.patch_size
    x = images.reshape(b, cfg.channels, g, ps, g, ps)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, cfg.num_patches, cfg.patch_dim)


def _affine_ln(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm(x), gain), bias)


def _check_adapters(cfg: BackboneConfig, adapters: AdapterSet | None) -> None:
    if adapters is None:
        return
    for _, a in adapters.adapters():
        if a.embed_dim != cfg.embed_dim:
            raise ConfigError(f"adapter dim {a.embed_dim} incompatible with "
                              f"embed_dim {cfg.embed_dim}")
    for _, m in adapters.loras():
        if m.a.shape[0] != cfg.embed_dim:
            raise ConfigError(f"lora dim {m.a.shape[0]} incompatible with "
                              f"embed_dim {cfg.embed_dim}")
    n_adapted = len(adapters.ffn) or len(adapters.lora_q)
    if n_adapted != cfg.num_layers:
        raise ConfigError(f"adapter set covers {n_adapted} blocks, backbone has "
                          f"{cfg.num_layers}")


def _attention(model: FrozenModel, i: int, xn: Tensor,
               adapters: AdapterSet | None, mode: ForwardMode) -> Tensor:
    cfg = model.cfg
    p = model.params
    pre = f"blocks.{i}.attn"
    b, t, d = xn.shape
    heads = cfg.num_heads
    hd = d // heads

    q = ad.add(ad.matmul(xn, p[f"{pre}.q.w"]), p[f"{pre}.q.b"])
    k = ad.add(ad.matmul(xn, p[f"{pre}.k.w"]), p[f"{pre}.k.b"])
    v = ad.add(ad.matmul(xn, p[f"{pre}.v.w"]), p[f"{pre}.v.b"])
    if adapters is not None and adapters.lora_q:
        q = ad.add(q, adp.lora_delta(adapters.lora_q[i], xn, mode))
        v = ad.add(v, adp.lora_delta(adapters.lora_v[i], xn, mode))

    def split_heads(z):
        return ad.transpose(ad.reshape(z, (b, t, heads, hd)), (0, 2, 1, 3))

    q, k, v = split_heads(q), split_heads(k), split_heads(v)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    ctx = ad.matmul(ad.softmax(scores), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    return ad.add(ad.matmul(ctx, p[f"{pre}.o.w"]), p[f"{pre}.o.b"])


def _block(model: FrozenModel, i: int, x: Tensor,
           adapters: AdapterSet | None, mode: ForwardMode) -> Tensor:
    p = model.params
    pre = f"blocks.{i}"
    insertion = adapters.cfg.insertion if adapters is not None else None

    xn1 = _affine_ln(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
    a = ad.add(x, _attention(model, i, xn1, adapters, mode))
    if adapters is not None and adapters.attn:
        a = ad.add(a, adp.adapter_delta(adapters.attn[i], a, mode))

    xn2 = _affine_ln(a, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
    h = ad.add(ad.matmul(xn2, p[f"{pre}.mlp.fc1.w"]), p[f"{pre}.mlp.fc1.b"])
    ff = ad.add(ad.matmul(ad.gelu(h), p[f"{pre}.mlp.fc2.w"]), p[f"{pre}.mlp.fc2.b"])

    out = ad.add(a, ff)
    if adapters is not None and adapters.ffn:
        if insertion == "parallel_ffn":
            out = ad.add(out, adp.adapter_delta(adapters.ffn[i], xn2, mode))
        else:  # pfeiffer / houlsby: sequential after the FFN residual
            out = ad.add(out, adp.adapter_delta(adapters.ffn[i], out, mode))
    return out


def forward(model: FrozenModel, images: np.ndarray, adapters: AdapterSet | None = None,
            mode: ForwardMode = DENSE) -> tuple[Tensor, list[Tensor]]:
    """Run the encoder; returns (logits, per-block feature taps).

    ``mode`` selects which adapter weights are live; it is forced dense when
    the adapter set is merged.  Feature tap i is block i's output after its
    final residual add, the tensor consumed by the alignment loss.
    """
    cfg = model.cfg
    _check_adapters(cfg, adapters)
    if adapters is not None and adapters.merged:
        mode = DENSE
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ShapeError(f"images shape {images.shape} does not match "
                         f"(B, {cfg.channels}, {cfg.image_size}, {cfg.image_size})")
    p = model.params
    b = images.shape[0]

    tokens = ad.add(ad.matmul(Tensor(patchify(cfg, images)), p["patch.w"]), p["patch.b"])
    if cfg.use_cls_token:
        cls = ad.broadcast_to(ad.reshape(p["cls"], (1, 1, cfg.embed_dim)),
                              (b, 1, cfg.embed_dim))
        tokens = ad.concat([cls, tokens], axis=1)
    x = ad.add(tokens, p["pos"])

    features: list[Tensor] = []
    for i in range(cfg.num_layers):
        x = _block(model, i, x, adapters, mode)
        features.append(x)

    # pool, then normalize: the classifier reads a per-image direction, so the
    # readout is invariant to residual-stream magnitude
    pooled = ad.take(x, 0, axis=1) if cfg.use_cls_token else ad.mean_axis(x, 1)
    pooled = _affine_ln(pooled, p["norm.g"], p["norm.b"])
    logits = ad.add(ad.matmul(pooled, p["head.w"]), p["head.b"])
    return logits, features
