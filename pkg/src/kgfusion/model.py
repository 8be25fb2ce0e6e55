"""Transformer encoder with bottleneck adapters and an attention-based adapter fusion layer."""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from typing import Sequence, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"KLMC1"
INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    max_positions: int = 64
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ffn: int | None = None
    dropout: float = 0.1
    init_std: float = INIT_STD

    def __post_init__(self):
        if self.ffn is None:
            object.__setattr__(self, "ffn", 4 * self.hidden)
        for name in ("vocab_size", "max_positions", "hidden", "layers", "heads", "ffn"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.init_std <= 0:
            raise ValueError("init_std must be positive")


def encoder_parameter_count(cfg: EncoderConfig) -> int:
    d, f = cfg.hidden, cfg.ffn
    per_layer = (4 * d * d + 4 * d) + (2 * d * f + f + d) + 4 * d
    return (cfg.vocab_size + cfg.max_positions) * d + cfg.layers * per_layer


def adapter_parameter_count(hidden: int, bottleneck: int, layers: int) -> int:
    return layers * (2 * hidden * bottleneck + bottleneck + hidden)


class ParameterGroup:
    """Named float64 parameters with a shared freeze flag."""

    def __init__(self, params: dict[str, Tensor], frozen: bool = False):
        self.params = params
        self.frozen = frozen
        self.freeze(frozen)

    def freeze(self, frozen: bool = True) -> None:
        self.frozen = frozen
        for p in self.params.values():
            p.requires_grad = not frozen
            p.grad = None

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise KeyError("state keys do not match parameters")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def to_bytes(self) -> bytes:
        return checkpoint_bytes(self.state_dict())


def _param(data, name) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), name=name)


class EncoderModel(ParameterGroup):
    def __init__(self, cfg: EncoderConfig, params: dict[str, Tensor], frozen: bool = True):
        self.config = cfg
        super().__init__(params, frozen)

    def layer(self, i: int, key: str) -> Tensor:
        return self.params[f"layers.{i}.{key}"]


def build_encoder(cfg: EncoderConfig, seed: int = 0, frozen: bool = True) -> EncoderModel:
    """Gaussian(0, ``cfg.init_std``) weights, zero biases, unit layer-norm scales."""
    rng = np.random.default_rng(seed)
    d, f = cfg.hidden, cfg.ffn
    normal = lambda *shape: rng.normal(0.0, cfg.init_std, size=shape)
    params = {
        "embed.token": normal(cfg.vocab_size, d),
        "embed.position": normal(cfg.max_positions, d),
    }
    for i in range(cfg.layers):
        pre = f"layers.{i}."
        for proj in ("query", "key", "value", "output"):
            params[pre + f"attn.{proj}.weight"] = normal(d, d)
            params[pre + f"attn.{proj}.bias"] = np.zeros(d)
        params[pre + "attn_norm.gamma"] = np.ones(d)
        params[pre + "attn_norm.beta"] = np.zeros(d)
        params[pre + "ffn.in.weight"] = normal(d, f)
        params[pre + "ffn.in.bias"] = np.zeros(f)
        params[pre + "ffn.out.weight"] = normal(f, d)
        params[pre + "ffn.out.bias"] = np.zeros(d)
        params[pre + "ffn_norm.gamma"] = np.ones(d)
        params[pre + "ffn_norm.beta"] = np.zeros(d)
    return EncoderModel(cfg, {k: _param(v, k) for k, v in params.items()}, frozen)


class AdapterModule(ParameterGroup):
    """Residual bottleneck per encoder layer: ``h + relu(h W_down + b_down) W_up + b_up``.

    The up-projection starts at zero, so a fresh adapter is the identity map.
    """

    def __init__(self, hidden: int, bottleneck: int = 16, layers: Sequence[int] = (0, 1),
                 partition_index: int = 0, seed: int = 0, frozen: bool = False):
        self.hidden = hidden
        self.bottleneck = bottleneck
        self.layer_indices = tuple(layers)
        self.partition_index = partition_index
        rng = np.random.default_rng(seed)
        params = {}
        for i in self.layer_indices:
            params[f"layers.{i}.down.weight"] = _param(rng.normal(0.0, INIT_STD, (hidden, bottleneck)), "down")
            params[f"layers.{i}.down.bias"] = _param(np.zeros(bottleneck), "down_bias")
            params[f"layers.{i}.up.weight"] = _param(np.zeros((bottleneck, hidden)), "up")
            params[f"layers.{i}.up.bias"] = _param(np.zeros(hidden), "up_bias")
        super().__init__(params, frozen)

    def has_layer(self, i: int) -> bool:
        return i in self.layer_indices

    def layer_params(self, i: int) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        pre = f"layers.{i}."
        p = self.params
        return p[pre + "down.weight"], p[pre + "down.bias"], p[pre + "up.weight"], p[pre + "up.bias"]

    def __call__(self, i: int, hidden: Tensor) -> Tensor:
        return adapter_bottleneck(hidden, *self.layer_params(i))


def adapter_bottleneck(hidden: Tensor, down: Tensor, bias_b: Tensor, up: Tensor, bias_d: Tensor) -> Tensor:
    return hidden + (T.relu(hidden @ down + bias_b) @ up + bias_d)


class FusionLayer(ParameterGroup):
    """Per-layer query/key/value maps that mix the outputs of several adapters.

    The value map starts as the identity and query/key start near the
    identity. ``last_weights`` keeps the mixture weights of the most recent
    forward pass, one ``[batch, seq, n_adapters]`` array per layer.
    """

    def __init__(self, adapters: Sequence[AdapterModule], hidden: int, layers: Sequence[int] = (0, 1),
                 seed: int = 0, noise: float = 0.01, frozen: bool = False):
        if not adapters:
            raise ValueError("fusion needs at least one adapter")
        self.adapters = list(adapters)
        self.hidden = hidden
        self.layer_indices = tuple(layers)
        self.last_weights: dict[int, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        eye = np.eye(hidden)
        params = {}
        for i in self.layer_indices:
            params[f"layers.{i}.query"] = _param(eye + rng.normal(0.0, noise, (hidden, hidden)), "query")
            params[f"layers.{i}.key"] = _param(eye + rng.normal(0.0, noise, (hidden, hidden)), "key")
            params[f"layers.{i}.value"] = _param(eye.copy(), "value")
        super().__init__(params, frozen)

    def has_layer(self, i: int) -> bool:
        return i in self.layer_indices

    def __call__(self, i: int, hidden: Tensor) -> Tensor:
        outs = [a(i, hidden) if a.has_layer(i) else hidden for a in self.adapters]
        p = self.params
        mixed, weights = fusion_mix(hidden, outs, p[f"layers.{i}.query"], p[f"layers.{i}.key"],
                                    p[f"layers.{i}.value"])
        self.last_weights[i] = weights
        return mixed


def fusion_mix(hidden: Tensor, outputs: Sequence[Tensor], w_query: Tensor, w_key: Tensor,
               w_value: Tensor) -> tuple[Tensor, np.ndarray]:
    """Softmax attention over adapter outputs at every position.

    Returns the mixed states and the mixture weights (shape ``hidden.shape[:-1] + (N,)``).
    """
    if not outputs:
        raise ValueError("fusion_mix needs at least one adapter output")
    d = hidden.shape[-1]
    stacked = T.stack(outputs, axis=-2)                      # [..., N, d]
    query = T.reshape(hidden @ w_query, hidden.shape[:-1] + (1, d))
    keys = stacked @ w_key
    scores = (query * keys).sum(axis=-1) * (1.0 / math.sqrt(d))   # [..., N]
    alpha = T.softmax(scores, axis=-1)
    values = stacked @ w_value
    weights_shape = alpha.shape + (1,)
    mixed = (T.reshape(alpha, weights_shape) * values).sum(axis=-2)
    return mixed, alpha.data


class LinearHead(ParameterGroup):
    """Linear map from the ``[CLS]`` representation to label scores."""

    def __init__(self, hidden: int, n_labels: int, seed: int = 0, frozen: bool = False):
        if n_labels < 1:
            raise ValueError("a head needs at least one label")
        rng = np.random.default_rng(seed)
        self.n_labels = n_labels
        params = {
            "weight": _param(rng.normal(0.0, INIT_STD, (hidden, n_labels)), "weight"),
            "bias": _param(np.zeros(n_labels), "bias"),
        }
        super().__init__(params, frozen)

    def __call__(self, hidden: Tensor) -> Tensor:
        return entity_logits(hidden, self)


class EntityHead(LinearHead):
    """Scores over one partition's entity label space."""

    def __init__(self, hidden: int, n_labels: int, partition_index: int = 0, seed: int = 0, frozen: bool = False):
        self.partition_index = partition_index
        super().__init__(hidden, n_labels, seed, frozen)


class ClassifierHead(LinearHead):
    def __init__(self, hidden: int, n_labels: int, multilabel: bool = False, seed: int = 0, frozen: bool = False):
        self.multilabel = multilabel
        super().__init__(hidden, n_labels, seed, frozen)


def entity_logits(hidden: Tensor, head: LinearHead) -> Tensor:
    """Logits from position 0; ``hidden`` is ``[batch, seq, d]`` or ``[seq, d]``."""
    w, b = head.params["weight"], head.params["bias"]
    if hidden.shape[-1] != w.shape[0]:
        raise ValueError(f"head expects hidden size {w.shape[0]}, got {hidden.shape[-1]}")
    cls = hidden[:, 0, :] if hidden.ndim == 3 else hidden[0:1, :]
    logits = cls @ w + b
    return logits if hidden.ndim == 3 else T.reshape(logits, (w.shape[1],))


Active = Union[None, AdapterModule, FusionLayer]


def _attention(x: Tensor, model: EncoderModel, i: int, mask_bias: np.ndarray, heads: int) -> Tensor:
    b, s, d = x.shape
    dh = d // heads
    proj = lambda name: x @ model.layer(i, f"attn.{name}.weight") + model.layer(i, f"attn.{name}.bias")

    def split(t):
        return T.transpose(T.reshape(t, (b, s, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(proj("query")), split(proj("key")), split(proj("value"))
    scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh)) + mask_bias
    ctx = T.softmax(scores, axis=-1) @ v
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
    return ctx @ model.layer(i, "attn.output.weight") + model.layer(i, "attn.output.bias")


def encode(model: EncoderModel, token_ids, mask=None, active: Active = None, training: bool = False,
           rng: np.random.Generator | None = None) -> Tensor:
    """Run the encoder; returns ``[batch, seq, d]`` (or ``[seq, d]`` for 1-D input).

    Each layer applies attention and feed-forward sublayers (residual then
    layer norm); the active adapter or fusion layer then transforms the
    feed-forward output. Padded positions (mask 0) are excluded as attention
    keys, so they never influence unpadded positions.
    """
    cfg = model.config
    ids = np.asarray(token_ids, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ValueError("token_ids must be 1-D or 2-D")
    mask = np.ones_like(ids) if mask is None else np.asarray(mask, dtype=np.int64).reshape(ids.shape)
    b, s = ids.shape
    if s > cfg.max_positions:
        raise ValueError(f"sequence length {s} exceeds max_positions {cfg.max_positions}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError("token id out of vocabulary range")

    x = T.embedding(model.params["embed.token"], ids) + model.params["embed.position"][:s]
    x = T.dropout(x, cfg.dropout, rng, training)
    mask_bias = np.where(mask[:, None, None, :] > 0, 0.0, -1e9)
    for i in range(cfg.layers):
        attn = T.dropout(_attention(x, model, i, mask_bias, cfg.heads), cfg.dropout, rng, training)
        x = T.layer_norm(x + attn, model.layer(i, "attn_norm.gamma"), model.layer(i, "attn_norm.beta"))
        h = T.gelu(x @ model.layer(i, "ffn.in.weight") + model.layer(i, "ffn.in.bias"))
        h = h @ model.layer(i, "ffn.out.weight") + model.layer(i, "ffn.out.bias")
        h = T.dropout(h, cfg.dropout, rng, training)
        x = T.layer_norm(x + h, model.layer(i, "ffn_norm.gamma"), model.layer(i, "ffn_norm.beta"))
        if active is not None and active.has_layer(i):
            x = active(i, x)
    return T.reshape(x, (s, cfg.hidden)) if squeeze else x


def count_parameters(model: EncoderModel | EncoderConfig, adapters: Sequence[AdapterModule] = (),
                     fusion: FusionLayer | None = None, heads: Sequence[LinearHead] = ()) -> dict:
    """Exact parameter counts by group.

    ``model`` may be a bare :class:`EncoderConfig`, which counts a base
    encoder without allocating its weights.

    The base is always frozen. Adapters are trainable unless a fusion layer is
    given, in which case they are frozen and the fusion layer trains.
    ``adapter_fraction`` is adapter parameters over base parameters.
    """
    base = encoder_parameter_count(model) if isinstance(model, EncoderConfig) else model.num_parameters()
    adapter = sum(a.num_parameters() for a in adapters)
    fusion_n = fusion.num_parameters() if fusion is not None else 0
    head_n = sum(h.num_parameters() for h in heads)
    frozen = base + (adapter if fusion is not None else 0)
    total = base + adapter + fusion_n + head_n
    return {
        "base": base,
        "adapter": adapter,
        "fusion": fusion_n,
        "heads": head_n,
        "frozen": frozen,
        "trainable": total - frozen,
        "total": total,
        "adapter_fraction": adapter / base if base else 0.0,
    }


# -- checkpoint container --------------------------------------------------------------

def checkpoint_bytes(state: dict[str, np.ndarray]) -> bytes:
    """``KLMC1`` followed by one record per tensor, in insertion order."""
    parts = [CHECKPOINT_MAGIC]
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(b"\x00")
        parts.append(arr.tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> dict[str, np.ndarray]:
    if buf[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not a KLMC1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    state: dict[str, np.ndarray] = {}
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        if buf[pos] != 0:
            raise ValueError(f"unsupported dtype byte {buf[pos]} for {name}")
        pos += 1
        count = int(np.prod(dims)) if ndim else 1
        state[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * count
    return state


def save_checkpoint(path: str | os.PathLike, group: ParameterGroup, manifest: dict | None = None) -> None:
    """Write the tensor container and a ``<path>.json`` manifest next to it."""
    with open(path, "wb") as fh:
        fh.write(group.to_bytes())
    info = {"frozen": group.frozen, "parameters": list(group.params)}
    info.update(manifest or {})
    with open(str(path) + ".json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        state = checkpoint_from_bytes(fh.read())
    manifest_path = str(path) + ".json"
    manifest = {}
    if os.path.exists(manifest_path):
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    return state, manifest


def encoder_manifest(model: EncoderModel, seed: int) -> dict:
    return {"kind": "encoder", "config": asdict(model.config), "seed": seed}


def encoder_from_checkpoint(path: str | os.PathLike) -> EncoderModel:
    state, manifest = load_checkpoint(path)
    cfg = EncoderConfig(**manifest["config"])
    model = build_encoder(cfg, seed=0)
    model.load_state_dict(state)
    return model
