"""Weight-only int8 quantization, FLOPs estimates and the op-variant latency bench."""

from __future__ import annotations

import csv
import json
import os
import platform
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from threadpoolctl import threadpool_limits

from . import archive
from .config import ModelConfig
from .errors import BenchError, ContractError, DomainError
from .model import CONFIG_ENTRY, Model, build, forward, model_entries, parameter_shapes
from .tensor import Tensor, no_grad

QMAX = 127
SCALE_SUFFIX = "::scale"
# tables whose rows are looked up; everything else is a projection stored [in, out]
ROW_TABLES = ("embedding.token", "embedding.position", "embedding.segment")


@dataclass(frozen=True)
class QuantizedTensor:
    """Symmetric int8 payload with one float scale per channel along ``axis``."""

    values: np.ndarray  # int8
    scale: np.ndarray  # float64, one per channel
    axis: int

    def dequantize(self) -> np.ndarray:
        shape = [1] * self.values.ndim
        shape[self.axis] = -1
        return self.values.astype(np.float64) * self.scale.reshape(shape)

    @property
    def nbytes(self) -> int:
        return self.values.nbytes + self.scale.astype(np.float32).nbytes


def quantize(w: np.ndarray, axis: int = -1) -> QuantizedTensor:
    """Round ``w / scale`` to int8 where ``scale = max|w| / 127`` per channel along ``axis``.

    A channel that is entirely zero gets scale ``1.0``.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise DomainError("cannot quantize non-finite weights")
    axis = axis % w.ndim
    others = tuple(i for i in range(w.ndim) if i != axis)
    peak = np.abs(w).max(axis=others) if others else np.abs(w)
    scale = np.where(peak > 0, peak / QMAX, 1.0)
    shape = [1] * w.ndim
    shape[axis] = -1
    q = np.clip(np.rint(w / scale.reshape(shape)), -QMAX, QMAX).astype(np.int8)
    return QuantizedTensor(q, scale, axis)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.dequantize()


def _channel_axis(name: str, ndim: int) -> int | None:
    if name in ROW_TABLES:
        return 0
    if name.endswith(".weight") or name == "embedding.conv.kernel":
        return ndim - 1
    return None


@dataclass
class QuantizedModel:
    """A model whose weight matrices are int8; biases and norm parameters stay float."""

    config: ModelConfig
    quantized: dict[str, QuantizedTensor]
    dense: dict[str, np.ndarray]

    def dequantize(self) -> Model:
        params = {}
        for name, _, _ in parameter_shapes(self.config):
            data = self.quantized[name].dequantize() if name in self.quantized else self.dense[name]
            params[name] = Tensor(data.copy())
        return Model(self.config, params)

    def forward(self, *args, **kwargs):
        return forward(self.dequantize(), *args, **kwargs)

    def entries(self) -> dict[str, np.ndarray]:
        out = {CONFIG_ENTRY: model_entries(Model(self.config, {}))[CONFIG_ENTRY]}
        for name, q in self.quantized.items():
            out[name] = q.values
            out[name + SCALE_SUFFIX] = q.scale.astype(np.float32)
        for name, d in self.dense.items():
            out[name] = d.astype(np.float32)
        return out

    def save(self, path: str | os.PathLike) -> int:
        return archive.save(path, self.entries())


class SizeReport(NamedTuple):
    float32_bytes: int
    int8_bytes: int
    num_quantized: int

    @property
    def ratio(self) -> float:
        return self.float32_bytes / self.int8_bytes


def quantize_model(model: Model) -> tuple[QuantizedModel, SizeReport]:
    """Quantize every weight matrix per output channel (per row for lookup tables).

    The size report compares serialized archives of the quantized tensors:
    float32 originals against int8 payloads plus float32 scales.
    """
    quantized, dense = {}, {}
    for name, p in model.params.items():
        axis = _channel_axis(name, p.ndim)
        if axis is None:
            dense[name] = p.data.copy()
        else:
            quantized[name] = quantize(p.data, axis)
    if not quantized:
        raise ContractError("model has no weight matrices to quantize")
    f32 = archive.dumps({n: model.params[n].data.astype(np.float32) for n in quantized})
    i8 = archive.dumps({k: v for n, q in quantized.items()
                        for k, v in ((n, q.values), (n + SCALE_SUFFIX, q.scale.astype(np.float32)))})
    qm = QuantizedModel(model.config, quantized, dense)
    return qm, SizeReport(len(f32), len(i8), len(quantized))


def load_quantized(path: str | os.PathLike) -> QuantizedModel:
    entries = archive.load(path)
    if CONFIG_ENTRY not in entries:
        raise ContractError(f"{path}: archive has no embedded config")
    config = ModelConfig.from_dict(json.loads(bytes(entries[CONFIG_ENTRY]).decode("utf-8")))
    quantized, dense = {}, {}
    for name, shape, _ in parameter_shapes(config):
        if name not in entries:
            raise ContractError(f"{path}: missing tensor {name}")
        if name + SCALE_SUFFIX in entries:
            quantized[name] = QuantizedTensor(entries[name], entries[name + SCALE_SUFFIX].astype(np.float64),
                                              _channel_axis(name, len(shape)))
        else:
            dense[name] = entries[name].astype(np.float64)
    return QuantizedModel(config, quantized, dense)


# ---------------------------------------------------------------------------
# FLOPs


class FlopsBreakdown(NamedTuple):
    embedding: int
    per_layer: int
    num_layers: int

    @property
    def total(self) -> int:
        return self.embedding + self.per_layer * self.num_layers


def flops_breakdown(config: ModelConfig, T: int = 128) -> FlopsBreakdown:
    """Encoder FLOPs as 2 x multiply-accumulates of matrix products.

    Counts the embedding convolution, bottleneck projections, Q/K/V/output
    projections, attention scores and context, and every FFN. Softmax, norms,
    activations and the pre-training heads are excluded.
    """
    if T < 1:
        raise DomainError(f"T must be >= 1, got {T}")
    c = config
    emb = 2 * T * 3 * c.h_embedding * c.h_inter if c.embedding_kind == "conv3_factorized" else 0
    mha_in = c.h_intra if c.block_kind == "bottleneck_tiny" else c.h_inter
    macs = 3 * T * mha_in * c.h_intra  # q, k, v
    macs += 2 * T * T * c.h_intra  # scores and context
    macs += T * c.h_intra * c.h_intra  # output projection
    macs += c.ffn_stack * 2 * T * c.h_intra * c.h_ffn
    if c.has_bottleneck:
        macs += 2 * T * c.h_inter * c.h_intra
    return FlopsBreakdown(emb, 2 * macs, c.num_layers)


def estimate_flops(config: ModelConfig, T: int = 128) -> int:
    return flops_breakdown(config, T).total


# ---------------------------------------------------------------------------
# latency bench

VARIANTS = (
    ("layer_norm", "gelu"),
    ("layer_norm", "relu"),
    ("no_norm", "gelu"),
    ("no_norm", "relu"),
)
BENCH_FIELDS = ("variant", "norm", "activation", "median_s", "p10_s", "p90_s", "flops")
MIN_TICKS = 1000


def variant_name(norm: str, activation: str) -> str:
    return f"{'NoNorm' if norm == 'no_norm' else 'LayerNorm'}&{activation}"


class VariantTiming(NamedTuple):
    variant: str
    norm: str
    activation: str
    median_s: float
    p10_s: float
    p90_s: float
    flops: int


@dataclass
class BenchReport:
    rows: list[VariantTiming]
    environment: dict = field(default_factory=dict)

    def by_variant(self) -> dict[str, VariantTiming]:
        return {r.variant: r for r in self.rows}

    def median(self, norm: str, activation: str) -> float:
        return self.by_variant()[variant_name(norm, activation)].median_s

    def ordering_holds(self) -> bool:
        m = self.median
        nr, ng = m("no_norm", "relu"), m("no_norm", "gelu")
        lr, lg = m("layer_norm", "relu"), m("layer_norm", "gelu")
        return nr <= ng <= lg and nr <= lr <= lg

    def write_csv(self, path: str | os.PathLike):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(BENCH_FIELDS)
            for r in self.rows:
                w.writerow([r.variant, r.norm, r.activation, f"{r.median_s:.9f}", f"{r.p10_s:.9f}",
                            f"{r.p90_s:.9f}", r.flops])


def bench_op_variants(config: ModelConfig, T: int = 128, repeats: int = 30, warmup: int = 3,
                      seed: int = 0) -> BenchReport:
    """Time single-threaded float32 forward passes of the four norm/activation variants.

    All variants share the same weights and input. Passes are interleaved
    round-robin so slow drift of the machine affects every variant alike.
    """
    if repeats < 30:
        raise ContractError(f"repeats must be >= 30, got {repeats}")
    if T > config.max_positions:
        raise DomainError(f"T={T} exceeds max_positions {config.max_positions}")
    base = build(config.replace(norm_kind="no_norm", activation_kind="relu"), seed, dtype=np.float32)
    models = [base.with_config(norm_kind=n, activation_kind=a) for n, a in VARIANTS]
    tokens = np.random.default_rng(seed).integers(5, config.vocab_size, size=(1, T))
    flops = [estimate_flops(m.config, T) for m in models]

    times = [[] for _ in VARIANTS]
    with threadpool_limits(limits=1), no_grad():
        for _ in range(warmup):
            for m in models:
                forward(m, tokens, heads=False)
        for _ in range(repeats):
            for k, m in enumerate(models):
                t0 = time.perf_counter()
                forward(m, tokens, heads=False)
                times[k].append(time.perf_counter() - t0)

    resolution = time.get_clock_info("perf_counter").resolution
    rows = []
    for (n, a), ts, f in zip(VARIANTS, times, flops):
        ts = np.asarray(ts)
        med = float(np.median(ts))
        if med < MIN_TICKS * resolution:
            raise BenchError(f"median {med:.3g}s is within {MIN_TICKS} timer ticks; use a larger T or config")
        rows.append(VariantTiming(variant_name(n, a), n, a, med, float(np.percentile(ts, 10)),
                                  float(np.percentile(ts, 90)), f))
    env = {"python": platform.python_version(), "numpy": np.__version__, "machine": platform.machine(),
           "processor": platform.processor(), "threads": 1, "dtype": "float32", "T": T,
           "repeats": repeats, "warmup": warmup}
    return BenchReport(rows, env)
