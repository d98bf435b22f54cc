"""Model configurations, named presets and closed-form parameter counts."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import ConfigError, UnknownPresetError

BLOCK_KINDS = ("classic", "inverted_bottleneck", "bottleneck", "bottleneck_tiny")
EMBEDDING_KINDS = ("no_op", "conv3_factorized")
NORM_KINDS = ("layer_norm", "no_norm")
ACTIVATION_KINDS = ("gelu", "relu")

BERT_VOCAB = 30522
BERT_POSITIONS = 512
NUM_SEGMENTS = 2
DESK_VOCAB = 128


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of one encoder plus its pre-training heads."""

    vocab_size: int
    max_positions: int
    num_layers: int
    h_embedding: int
    h_inter: int
    h_intra: int
    num_heads: int
    h_ffn: int
    ffn_stack: int
    block_kind: str
    embedding_kind: str
    norm_kind: str
    activation_kind: str

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("vocab_size", "max_positions", "num_layers", "h_embedding", "h_inter",
                     "h_intra", "num_heads", "h_ffn", "ffn_stack"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        for name, allowed in (("block_kind", BLOCK_KINDS), ("embedding_kind", EMBEDDING_KINDS),
                              ("norm_kind", NORM_KINDS), ("activation_kind", ACTIVATION_KINDS)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.h_intra % self.num_heads:
            raise ConfigError(
                f"h_intra divisible by num_heads violated: {self.h_intra} % {self.num_heads} != 0")
        if self.block_kind == "classic" and self.h_intra != self.h_inter:
            raise ConfigError(
                f"classic block requires h_intra == h_inter, got {self.h_intra} vs {self.h_inter}")
        if self.embedding_kind == "conv3_factorized" and not self.h_embedding < self.h_inter:
            raise ConfigError(
                f"conv3_factorized embedding requires h_embedding < h_inter, got "
                f"{self.h_embedding} vs {self.h_inter}")
        if self.embedding_kind == "no_op" and self.h_embedding != self.h_inter:
            raise ConfigError(
                f"no_op embedding requires h_embedding == h_inter, got {self.h_embedding} vs {self.h_inter}")

    @property
    def head_dim(self) -> int:
        return self.h_intra // self.num_heads

    @property
    def has_bottleneck(self) -> bool:
        return self.block_kind != "classic"

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        names = [f.name for f in dataclasses.fields(cls)]
        unknown = sorted(set(doc) - set(names))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        missing = [n for n in names if n not in doc]
        if missing:
            raise ConfigError(f"missing config keys: {missing}")
        return cls(**doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def save(self, path: str | os.PathLike):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")


# ---------------------------------------------------------------------------
# presets


def _bert(layers, hidden, heads):
    return ModelConfig(BERT_VOCAB, BERT_POSITIONS, layers, hidden, hidden, hidden, heads, 4 * hidden, 1,
                       "classic", "no_op", "layer_norm", "gelu")


def _ib(h_inter, h_intra, heads):
    return ModelConfig(BERT_VOCAB, BERT_POSITIONS, 24, 128, h_inter, h_intra, heads, 4 * h_intra, 1,
                       "inverted_bottleneck", "conv3_factorized", "layer_norm", "gelu")


def _mobile(h_intra, heads, stack, kind="bottleneck"):
    return ModelConfig(BERT_VOCAB, BERT_POSITIONS, 24, 128, 512, h_intra, heads, 4 * h_intra, stack,
                       kind, "conv3_factorized", "no_norm", "relu")


# inter-width search rows: (h_inter, h_intra, heads, reported #Params)
TABLE2_ROWS = {
    "a": (1024, 1024, 16, 356e6),
    "b": (768, 1024, 16, 325e6),
    "c": (512, 1024, 16, 293e6),
    "d": (384, 1024, 16, 276e6),
    "e": (256, 1024, 16, 262e6),
    "f": (512, 1024, 4, 293e6),
    "g": (512, 512, 4, 92e6),
    "h": (512, 256, 4, 33e6),
    "i": (512, 128, 4, 15e6),
}

# MHA vs FFN balance rows: h_intra -> (heads, FFN stack, reported MHA params, reported FFN params)
TABLE3_ROWS = {
    192: (6, 1, 8e6, 7e6),
    160: (5, 2, 6.5e6, 10e6),
    128: (4, 4, 5e6, 12.5e6),
    96: (3, 8, 4e6, 14e6),
}

# reported #Params of the reference models
TABLE1_PARAMS = {
    "bert_large": 334e6,
    "bert_base": 109e6,
    "ib_bert_large": 293e6,
    "mobilebert": 25.3e6,
    "mobilebert_tiny": 15.1e6,
}


def table3_row(h_intra: int) -> ModelConfig:
    if h_intra not in TABLE3_ROWS:
        raise UnknownPresetError(f"no balance-search row for h_intra={h_intra}; valid: {sorted(TABLE3_ROWS)}")
    heads, stack, _, _ = TABLE3_ROWS[h_intra]
    return _mobile(h_intra, heads, stack)


_PRESETS = {
    "bert_large": lambda: _bert(24, 1024, 16),
    "bert_base": lambda: _bert(12, 768, 12),
    "ib_bert_large": lambda: _ib(512, 1024, 4),
    "mobilebert": lambda: _mobile(128, 4, 4),
    "mobilebert_tiny": lambda: _mobile(128, 4, 2, kind="bottleneck_tiny"),
    # desk-scale pair used by the training demos and acceptance run
    "desk_teacher": lambda: ModelConfig(DESK_VOCAB, 128, 4, 32, 64, 128, 4, 256, 1, "inverted_bottleneck",
                                        "conv3_factorized", "layer_norm", "gelu"),
    "desk_student": lambda: ModelConfig(DESK_VOCAB, 128, 4, 32, 64, 32, 4, 128, 4, "bottleneck",
                                        "conv3_factorized", "no_norm", "relu"),
    "desk_student_tiny": lambda: ModelConfig(DESK_VOCAB, 128, 4, 32, 64, 32, 4, 128, 2, "bottleneck_tiny",
                                             "conv3_factorized", "no_norm", "relu"),
}
for _row, (_inter, _intra, _heads, _) in TABLE2_ROWS.items():
    _PRESETS[f"table2_{_row}"] = (lambda a=_inter, b=_intra, c=_heads: _ib(a, b, c))
for _h in TABLE3_ROWS:
    _PRESETS[f"table3_{_h}"] = (lambda h=_h: table3_row(h))


def preset_names() -> list[str]:
    return list(_PRESETS)


def preset(name: str) -> ModelConfig:
    """Return the named configuration (see :func:`preset_names`)."""
    try:
        return _PRESETS[name]()
    except KeyError:
        raise UnknownPresetError(f"unknown preset {name!r}; valid presets: {', '.join(_PRESETS)}") from None


# ---------------------------------------------------------------------------
# parameter counting


@dataclass(frozen=True)
class LayerParams:
    bottleneck: int
    mha: int
    ffn: int
    mha_matrix: int
    ffn_matrix: int

    @property
    def total(self) -> int:
        return self.bottleneck + self.mha + self.ffn


@dataclass(frozen=True)
class ParamReport:
    """Parameter breakdown. ``total`` counts every allocated scalar.

    ``backbone`` (embeddings plus blocks, no pooler or pre-training heads) is
    the figure that lines up with published model sizes.
    """

    embedding: int
    layers: tuple[LayerParams, ...]
    heads: int
    total: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total", self.embedding + sum(l.total for l in self.layers) + self.heads)

    @property
    def backbone(self) -> int:
        return self.total - self.heads

    @property
    def mha(self) -> int:
        return sum(l.mha for l in self.layers)

    @property
    def ffn(self) -> int:
        return sum(l.ffn for l in self.layers)

    @property
    def bottleneck(self) -> int:
        return sum(l.bottleneck for l in self.layers)

    def mha_ffn_ratio(self, layer: int = 0) -> Fraction:
        """Weight-matrix MHA:FFN ratio of one layer (biases and norms excluded)."""
        l = self.layers[layer]
        return Fraction(l.mha_matrix, l.ffn_matrix)

    def table(self) -> str:
        rows = [("embedding", self.embedding)]
        if self.layers:
            per = self.layers[0]
            n = len(self.layers)
            rows += [
                (f"bottleneck linears (x{n})", self.bottleneck),
                (f"MHA (x{n})", self.mha),
                (f"FFN stack (x{n})", self.ffn),
            ]
            rows.append(("per layer", per.total))
        rows += [("heads (pooler, MLM, NSP)", self.heads), ("backbone", self.backbone), ("total", self.total)]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {value:>13,d}  ({value / 1e6:.2f}M)" for name, value in rows)


def _layer_counts(c: ModelConfig) -> LayerParams:
    inter, intra, f = c.h_inter, c.h_intra, c.h_ffn
    mha_in = intra if c.block_kind == "bottleneck_tiny" else inter
    # q, k, v read mha_in and emit intra; the output projection is intra -> intra
    mha_matrix = 3 * mha_in * intra + intra * intra
    mha = mha_matrix + 4 * intra + 2 * intra
    ffn_matrix = c.ffn_stack * 2 * intra * f
    ffn = ffn_matrix + c.ffn_stack * (f + intra + 2 * intra)
    if c.block_kind == "classic":
        bottleneck = 0
    else:
        bottleneck = (inter * intra + intra) + (intra * inter + inter) + 2 * inter
    return LayerParams(bottleneck, mha, ffn, mha_matrix, ffn_matrix)


def count_params(c: ModelConfig) -> ParamReport:
    """Closed-form parameter count matching :func:`~mobilebert_kit.model.build`."""
    c.validate()
    emb = c.vocab_size * c.h_embedding + c.max_positions * c.h_inter + NUM_SEGMENTS * c.h_inter + 2 * c.h_inter
    if c.embedding_kind == "conv3_factorized":
        emb += 3 * c.h_embedding * c.h_inter + c.h_inter
    pooler = c.h_inter * c.h_inter + c.h_inter
    mlm = c.h_inter * c.h_embedding + c.h_embedding + 2 * c.h_embedding + c.vocab_size
    nsp = 2 * c.h_inter + 2
    layer = _layer_counts(c)
    return ParamReport(emb, (layer,) * c.num_layers, pooler + mlm + nsp)
