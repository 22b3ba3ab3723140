"""BERT-style post-layer-norm encoder with optional bottleneck adapters.

Each block computes::

    a     = LN1(h + Adapter1(Dropout(MHA(h, mask))))
    h_out = LN2(a + Adapter2(Dropout(FFN(a))))

where an adapter is ``x + up(gelu(down(x)))`` and is skipped entirely when
adapters are disabled. The CLS row of every block output is collected so the
heads can pool across depth.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import heads
from . import numerics as nx
from .numerics import ShapeError, Tensor

MODES = ("fine_tune", "adapter")
INIT_STD = 0.02


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class ModelConfig:
    num_layers: int = 12
    hidden: int = 768
    heads: int = 12
    ffn_dim: int = 3072
    vocab_size: int = 100_000
    max_positions: int = 512
    num_classes: int = 21
    adapter_enabled: bool = False
    adapter_bottleneck: int = 64
    vatt_enabled: bool = False
    dropout_hidden: float = 0.1
    dropout_cls: float = 0.3
    mode: str = "fine_tune"

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []
        for name in ("num_layers", "hidden", "heads", "ffn_dim", "vocab_size", "max_positions", "adapter_bottleneck"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                out.append(f"{name} must be a positive integer")
        if not out and self.hidden % self.heads:
            out.append(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if not out and self.adapter_bottleneck >= self.hidden:
            out.append(f"adapter_bottleneck ({self.adapter_bottleneck}) must be smaller than hidden ({self.hidden})")
        if not isinstance(self.num_classes, int) or self.num_classes < 2:
            out.append("num_classes must be at least 2")
        for name in ("dropout_hidden", "dropout_cls"):
            if not 0.0 <= getattr(self, name) < 1.0:
                out.append(f"{name} must be in [0, 1)")
        if self.mode not in MODES:
            out.append(f"mode must be one of {MODES}, got {self.mode!r}")
        elif self.mode == "adapter" and not self.adapter_enabled:
            out.append("mode 'adapter' requires adapter_enabled")
        return out

    def to_dict(self):
        return asdict(self)


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Every parameter name and shape, in initialization order."""
    d, f, m, L = config.hidden, config.ffn_dim, config.adapter_bottleneck, config.num_layers
    shapes = {
        "embeddings.token": (config.vocab_size, d),
        "embeddings.position": (config.max_positions, d),
    }
    for i in range(L):
        p = f"layers.{i}."
        for proj in ("query", "key", "value", "output"):
            shapes[p + f"attention.{proj}.weight"] = (d, d)
            shapes[p + f"attention.{proj}.bias"] = (d,)
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.shift"] = (d,)
        shapes[p + "ffn.in.weight"] = (d, f)
        shapes[p + "ffn.in.bias"] = (f,)
        shapes[p + "ffn.out.weight"] = (f, d)
        shapes[p + "ffn.out.bias"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.shift"] = (d,)
        if config.adapter_enabled:
            for where in ("adapter_mha", "adapter_ffn"):
                shapes[p + f"{where}.down.weight"] = (d, m)
                shapes[p + f"{where}.down.bias"] = (m,)
                shapes[p + f"{where}.up.weight"] = (m, d)
                shapes[p + f"{where}.up.bias"] = (d,)
    if config.vatt_enabled:
        shapes["vatt.level_embeddings"] = (L, d)
        shapes["vatt.query"] = (d, d)
        shapes["vatt.key"] = (d, d)
        for n in range(L):
            shapes[f"vatt.value.{n}"] = (d, d)
    shapes["classifier.weight"] = (d, config.num_classes)
    shapes["classifier.bias"] = (config.num_classes,)
    return shapes


def _truncated_normal(rng: np.random.Generator, shape, std=INIT_STD) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _init_value(name: str, shape, rng) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith((".bias", ".shift")) or ".up." in name:
        return np.zeros(shape)
    return _truncated_normal(rng, shape)


def sub(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    """View of the parameters under ``prefix.`` with the prefix stripped."""
    prefix = prefix.rstrip(".") + "."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def _linear(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    return nx.bias_add(nx.matmul(x, p[f"{name}.weight"]), p[f"{name}.bias"])


def adapter_forward(x: Tensor, a: Mapping[str, Tensor]) -> Tensor:
    """``x + up(gelu(down(x)))`` over the last axis."""
    d = x.shape[-1]
    if a["down.weight"].shape[0] != d or a["up.weight"].shape[1] != d:
        raise ShapeError(f"adapter: input width {d} does not match adapter {a['down.weight'].shape}")
    return nx.add(x, _linear(nx.gelu(_linear(x, a, "down")), a, "up"))


def multi_head_attention(h: Tensor, mask: np.ndarray, p: Mapping[str, Tensor], num_heads: int):
    B, S, d = h.shape
    dh = d // num_heads

    def split(t):
        return nx.transpose(nx.reshape(t, (B, S, num_heads, dh)), (0, 2, 1, 3))

    q = split(_linear(h, p, "query"))
    k = split(_linear(h, p, "key"))
    v = split(_linear(h, p, "value"))
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = nx.softmax(scores, mask=mask.astype(bool)[:, None, None, :])
    ctx = nx.reshape(nx.transpose(nx.matmul(probs, v), (0, 2, 1, 3)), (B, S, d))
    return _linear(ctx, p, "output"), probs


def block_forward(h_in: Tensor, mask: np.ndarray, params: Mapping[str, Tensor], config: ModelConfig,
                  train: bool = False, rng: np.random.Generator | None = None,
                  return_attention: bool = False):
    """One transformer block on ``h_in`` of shape ``(batch, seq, d)``.

    Returns ``(h_out, z)`` with ``z`` the CLS row of ``h_out``; with
    ``return_attention`` the per-head attention weights are appended.
    """
    if mask.shape != h_in.shape[:2]:
        raise ShapeError(f"block: mask {mask.shape} does not match input {h_in.shape}")
    p_drop = config.dropout_hidden
    attn, probs = multi_head_attention(h_in, mask, sub(params, "attention"), config.heads)
    attn = nx.dropout(attn, p_drop, rng, train)
    if config.adapter_enabled:
        attn = adapter_forward(attn, sub(params, "adapter_mha"))
    a = nx.layer_norm(nx.add(h_in, attn), params["ln1.gain"], params["ln1.shift"])

    ff = _linear(nx.gelu(_linear(a, params, "ffn.in")), params, "ffn.out")
    ff = nx.dropout(ff, p_drop, rng, train)
    if config.adapter_enabled:
        ff = adapter_forward(ff, sub(params, "adapter_ffn"))
    h_out = nx.layer_norm(nx.add(a, ff), params["ln2.gain"], params["ln2.shift"])
    z = nx.select(h_out, 0, axis=1)
    if return_attention:
        return h_out, z, probs
    return h_out, z


@dataclass
class LayerOutputs:
    z: list                       # L tensors, each (batch, d)
    h_last: Tensor                # (batch, seq, d)


@dataclass
class ForwardResult:
    logits: Tensor
    layers: LayerOutputs
    alpha: Tensor | None = None


@dataclass
class Model:
    """Encoder, optional vertical attention and classifier parameters."""

    config: ModelConfig
    params: dict = field(repr=False)

    def __iter__(self):
        return iter(self.params.items())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def num_parameters(self, names=None) -> int:
        names = self.params if names is None else names
        return sum(self.params[n].data.size for n in names)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]):
        if set(state) != set(self.params):
            raise KeyError(f"state mismatch: {sorted(set(state) ^ set(self.params))[:5]}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)

    def load_matching(self, state: Mapping[str, np.ndarray]) -> list[str]:
        """Copy every tensor whose name and shape match; return the copied names.

        Used to start a model from a base encoder trained elsewhere; parts the
        base lacks (adapters, vertical attention, a new head) keep their init.
        """
        copied = []
        for k, v in state.items():
            if k in self.params and self.params[k].shape == v.shape:
                self.params[k].data = np.array(v, dtype=self.params[k].dtype)
                copied.append(k)
        return copied

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def forward(self, ids, mask, train: bool = False, rng: np.random.Generator | None = None) -> ForwardResult:
        layers = encode_sequence(ids, mask, self, train=train, rng=rng)
        alpha = None
        if self.config.vatt_enabled:
            x, alpha = heads.vertical_attention(layers.z, sub(self.params, "vatt"))
        else:
            x = layers.z[-1]
        logits = heads.classify(x, sub(self.params, "classifier"), train, self.config.dropout_cls, rng)
        return ForwardResult(logits, layers, alpha)

    def predict_proba(self, ids, mask, batch_size: int = 256, return_alpha: bool = False):
        """Eval-mode class probabilities (float64), batched and pad-trimmed."""
        ids, mask = np.atleast_2d(ids), np.atleast_2d(mask)
        probs, alphas = [], []
        for lo in range(0, len(ids), batch_size):
            b_ids, b_mask = trim_batch(ids[lo:lo + batch_size], mask[lo:lo + batch_size])
            out = self.forward(b_ids, b_mask)
            probs.append(heads.softmax_probs(out.logits.data))
            if out.alpha is not None:
                alphas.append(out.alpha.data.astype(np.float64))
        probs = np.concatenate(probs)
        if return_alpha:
            return probs, (np.concatenate(alphas) if alphas else None)
        return probs


def trim_batch(ids: np.ndarray, mask: np.ndarray):
    """Drop trailing columns that are padding in every row."""
    width = max(int(mask.sum(axis=1).max()), 1)
    return ids[:, :width], mask[:, :width]


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Random-initialize every parameter.

    Each tensor draws from its own stream keyed on ``(seed, name)``, so models
    that differ only in optional parts (adapters, vertical attention) share
    all common weights bit for bit.
    """
    params = {}
    for name, shape in param_shapes(config).items():
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        params[name] = Tensor(_init_value(name, shape, rng).astype(dtype), requires_grad=True, name=name)
    return Model(config, params)


def encode_sequence(ids, mask, model: Model, train: bool = False,
                    rng: np.random.Generator | None = None) -> LayerOutputs:
    """Run the embedding layer and every block, collecting each CLS vector."""
    ids, mask = np.asarray(ids), np.asarray(mask)
    if ids.ndim == 1:
        ids, mask = ids[None, :], mask[None, :]
    if ids.shape != mask.shape:
        raise ShapeError(f"ids {ids.shape} and mask {mask.shape} differ")
    cfg = model.config
    if ids.shape[1] > cfg.max_positions:
        raise ShapeError(f"sequence length {ids.shape[1]} exceeds max_positions {cfg.max_positions}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ShapeError(f"token id out of range [0, {cfg.vocab_size})")
    P = model.params
    seq = ids.shape[1]
    positions = np.broadcast_to(np.arange(seq), ids.shape)
    h = nx.add(nx.embedding_lookup(P["embeddings.token"], ids),
               nx.embedding_lookup(P["embeddings.position"], positions))
    h = nx.dropout(h, cfg.dropout_hidden, rng, train)
    zs = []
    for i in range(cfg.num_layers):
        h, z = block_forward(h, mask, sub(P, f"layers.{i}"), cfg, train=train, rng=rng)
        zs.append(z)
    return LayerOutputs(zs, h)
