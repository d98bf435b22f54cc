"""Encoder construction and forward passes for all block kinds.

Parameters live in a flat ``name -> Tensor`` dict. Linear weights are stored
``[in, out]`` so a projection is ``x @ W + b``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np
from scipy import stats

from . import archive
from .config import NUM_SEGMENTS, ModelConfig
from .errors import ContractError, SequenceLengthError, ShapeError
from .tensor import (
    Tensor,
    conv1d_same,
    dropout as _dropout,
    embedding,
    gelu,
    layer_norm,
    matmul,
    relu,
    softmax,
    tanh,
)

INIT_STD = 0.02
MASK_BIAS = -1e9
CONFIG_ENTRY = "__config__"


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor] = field(repr=False)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def num_scalars(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def copy(self) -> "Model":
        return Model(self.config, {k: Tensor(v.data.copy()) for k, v in self.params.items()})

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: Tensor(v.data.astype(dtype)) for k, v in self.params.items()})

    def with_config(self, **changes) -> "Model":
        """Same weights under a config that differs only in op kinds (norm/activation)."""
        cfg = self.config.replace(**changes)
        return Model(cfg, dict(self.params))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class LayerTrace(NamedTuple):
    """Per-layer block outputs ``[.., T, h_inter]`` and attentions ``[.., A, T, T]``."""

    feature_maps: list
    attentions: list


class ForwardOutput(NamedTuple):
    mlm_logits: Tensor | None
    nsp_logits: Tensor | None
    trace: LayerTrace


# ---------------------------------------------------------------------------
# construction


def layer_prefix(i: int) -> str:
    return f"layers.{i}."


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple, str]]:
    """``(name, shape, init)`` for every tensor, in allocation order.

    ``init`` is one of ``normal`` (truncated normal), ``zeros`` or ``ones``.
    """
    c = config
    out: list[tuple[str, tuple, str]] = []

    def linear(name, n_in, n_out):
        out.append((f"{name}.weight", (n_in, n_out), "normal"))
        out.append((f"{name}.bias", (n_out,), "zeros"))

    def norm(name, n):
        out.append((f"{name}.gamma", (n,), "ones"))
        out.append((f"{name}.beta", (n,), "zeros"))

    out.append(("embedding.token", (c.vocab_size, c.h_embedding), "normal"))
    if c.embedding_kind == "conv3_factorized":
        out.append(("embedding.conv.kernel", (3, c.h_embedding, c.h_inter), "normal"))
        out.append(("embedding.conv.bias", (c.h_inter,), "zeros"))
    out.append(("embedding.position", (c.max_positions, c.h_inter), "normal"))
    out.append(("embedding.segment", (NUM_SEGMENTS, c.h_inter), "normal"))
    norm("embedding.norm", c.h_inter)

    mha_in = c.h_intra if c.block_kind == "bottleneck_tiny" else c.h_inter
    for i in range(c.num_layers):
        p = layer_prefix(i)
        if c.has_bottleneck:
            linear(p + "bottleneck.input", c.h_inter, c.h_intra)
        for proj in ("query", "key", "value"):
            linear(p + f"attention.{proj}", mha_in, c.h_intra)
        linear(p + "attention.output", c.h_intra, c.h_intra)
        norm(p + "attention.norm", c.h_intra)
        for j in range(c.ffn_stack):
            linear(p + f"ffn.{j}.inner", c.h_intra, c.h_ffn)
            linear(p + f"ffn.{j}.outer", c.h_ffn, c.h_intra)
            norm(p + f"ffn.{j}.norm", c.h_intra)
        if c.has_bottleneck:
            linear(p + "bottleneck.output", c.h_intra, c.h_inter)
            norm(p + "bottleneck.norm", c.h_inter)

    linear("pooler", c.h_inter, c.h_inter)
    linear("mlm.transform", c.h_inter, c.h_embedding)
    norm("mlm.norm", c.h_embedding)
    out.append(("mlm.decoder_bias", (c.vocab_size,), "zeros"))
    linear("nsp", c.h_inter, 2)
    return out


def build(config: ModelConfig, rng_seed: int = 0, dtype=np.float64) -> Model:
    """Allocate and initialise every parameter; deterministic in ``rng_seed``."""
    config.validate()
    rng = np.random.default_rng(rng_seed)
    params: dict[str, Tensor] = {}
    for name, shape, init in parameter_shapes(config):
        if init == "normal":
            data = stats.truncnorm.rvs(-2.0, 2.0, scale=INIT_STD, size=shape, random_state=rng)
        elif init == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(np.asarray(data, dtype=dtype))
    return Model(config, params)


# ---------------------------------------------------------------------------
# building blocks


def nonorm(h: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Elementwise affine ``gamma * h + beta``; no statistics are computed."""
    n = h.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"nonorm: trailing dim {n} vs gamma {gamma.shape}, beta {beta.shape}")
    return h * gamma + beta


def _norm(model: Model, name: str, h: Tensor) -> Tensor:
    gamma, beta = model.params[name + ".gamma"], model.params[name + ".beta"]
    if model.config.norm_kind == "no_norm":
        return nonorm(h, gamma, beta)
    return layer_norm(h, gamma, beta)


def _act(model: Model, h: Tensor) -> Tensor:
    return relu(h) if model.config.activation_kind == "relu" else gelu(h)


def _linear(model: Model, name: str, x: Tensor) -> Tensor:
    return matmul(x, model.params[name + ".weight"]) + model.params[name + ".bias"]


def _attention(model, prefix, src, mask_bias, drop, rng):
    c = model.config
    B, T, _ = src.shape
    A, d = c.num_heads, c.head_dim

    def heads(name):
        return _linear(model, prefix + name, src).reshape(B, T, A, d).transpose(0, 2, 1, 3)

    q, k, v = heads("query"), heads("key"), heads("value")
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d))
    if mask_bias is not None:
        scores = scores + mask_bias
    probs = softmax(scores, axis=-1)
    ctx = matmul(_dropout(probs, drop, rng), v).transpose(0, 2, 1, 3).reshape(B, T, c.h_intra)
    return _linear(model, prefix + "output", ctx), probs


def _block(model, i, x, mask_bias, drop, rng):
    c = model.config
    p = layer_prefix(i)
    if c.has_bottleneck:
        hidden = _linear(model, p + "bottleneck.input", x)
        src = hidden if c.block_kind == "bottleneck_tiny" else x
    else:
        hidden = src = x
    attn, probs = _attention(model, p + "attention.", src, mask_bias, drop, rng)
    h = _norm(model, p + "attention.norm", hidden + _dropout(attn, drop, rng))
    for j in range(c.ffn_stack):
        f = _linear(model, p + f"ffn.{j}.outer", _act(model, _linear(model, p + f"ffn.{j}.inner", h)))
        h = _norm(model, p + f"ffn.{j}.norm", h + _dropout(f, drop, rng))
    if c.has_bottleneck:
        up = _linear(model, p + "bottleneck.output", h)
        h = _norm(model, p + "bottleneck.norm", x + _dropout(up, drop, rng))
    return h, probs


def _as_batch(ids, name):
    arr = np.asarray(ids)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be [T] or [B, T], got shape {arr.shape}")
    return arr, False


def embed(model: Model, token_ids, segment_ids=None, drop: float = 0.0, rng=None) -> Tensor:
    """Embedding stack output ``[B, T, h_inter]`` (token path, position, segment, norm)."""
    c = model.config
    tokens, _ = _as_batch(token_ids, "token_ids")
    B, T = tokens.shape
    if T > c.max_positions:
        raise SequenceLengthError(f"sequence length {T} exceeds max_positions {c.max_positions}")
    segments = np.zeros_like(tokens) if segment_ids is None else _as_batch(segment_ids, "segment_ids")[0]
    if segments.shape != tokens.shape:
        raise ShapeError(f"segment_ids shape {segments.shape} != token_ids shape {tokens.shape}")
    h = embedding(model.params["embedding.token"], tokens)
    if c.embedding_kind == "conv3_factorized":
        h = conv1d_same(h, model.params["embedding.conv.kernel"], model.params["embedding.conv.bias"])
    h = h + model.params["embedding.position"][:T] + embedding(model.params["embedding.segment"], segments)
    return _dropout(_norm(model, "embedding.norm", h), drop, rng)


def forward(
    model: Model,
    token_ids,
    segment_ids=None,
    attention_mask=None,
    *,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    mlm_positions=None,
    num_layers: int | None = None,
    heads: bool = True,
) -> ForwardOutput:
    """Run the encoder, recording each block's output and attention.

    ``token_ids`` is ``[T]`` or ``[B, T]``; single sequences come back without
    the batch axis. ``mlm_positions`` (a ``(batch_idx, pos_idx)`` pair) limits
    MLM logits to those positions. ``num_layers`` stops early and skips heads.
    """
    c = model.config
    tokens, single = _as_batch(token_ids, "token_ids")
    B, T = tokens.shape
    h = embed(model, tokens, None if segment_ids is None else _as_batch(segment_ids, "segment_ids")[0],
              dropout, rng)
    mask_bias = None
    if attention_mask is not None:
        mask, _ = _as_batch(attention_mask, "attention_mask")
        if mask.shape != (B, T):
            raise ShapeError(f"attention_mask shape {mask.shape} != {(B, T)}")
        mask_bias = Tensor(np.where(mask.astype(bool), 0.0, MASK_BIAS).astype(h.dtype)[:, None, None, :])

    depth = c.num_layers if num_layers is None else num_layers
    if not 0 <= depth <= c.num_layers:
        raise ContractError(f"num_layers must be in [0, {c.num_layers}], got {depth}")
    maps, atts = [], []
    for i in range(depth):
        h, probs = _block(model, i, h, mask_bias, dropout, rng)
        maps.append(h)
        atts.append(probs)

    mlm_logits = nsp_logits = None
    if heads and depth == c.num_layers:
        if mlm_positions is None:
            seq = h
        else:
            b_idx, t_idx = (np.asarray(a) for a in mlm_positions)
            seq = h[b_idx, t_idx]
        t = _linear(model, "mlm.transform", seq)
        t = _norm(model, "mlm.norm", _act(model, t))
        mlm_logits = matmul(t, model.params["embedding.token"].T) + model.params["mlm.decoder_bias"]
        pooled = tanh(_linear(model, "pooler", h[:, 0, :]))
        nsp_logits = _linear(model, "nsp", pooled)
        if single:
            nsp_logits = nsp_logits[0]
            if mlm_positions is None:
                mlm_logits = mlm_logits[0]
    if single:
        maps = [m[0] for m in maps]
        atts = [a[0] for a in atts]
    return ForwardOutput(mlm_logits, nsp_logits, LayerTrace(maps, atts))


# ---------------------------------------------------------------------------
# checkpoints


def model_entries(model: Model) -> dict[str, np.ndarray]:
    entries = {CONFIG_ENTRY: np.frombuffer(model.config.to_json().encode("utf-8"), dtype=np.uint8)}
    entries.update({k: v.data for k, v in model.params.items()})
    return entries


def save_model(model: Model, path: str | os.PathLike) -> int:
    return archive.save(path, model_entries(model))


def model_from_entries(entries: dict[str, np.ndarray]) -> Model:
    if CONFIG_ENTRY not in entries:
        raise ContractError("checkpoint has no embedded config")
    config = ModelConfig.from_dict(json.loads(bytes(entries[CONFIG_ENTRY]).decode("utf-8")))
    expected = [name for name, _, _ in parameter_shapes(config)]
    missing = [n for n in expected if n not in entries]
    if missing:
        raise ContractError(f"checkpoint is missing tensors: {missing[:5]}")
    return Model(config, {n: Tensor(entries[n]) for n in expected})


def load_model(path: str | os.PathLike) -> Model:
    return model_from_entries(archive.load(path))
