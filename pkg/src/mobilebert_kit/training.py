"""Teacher pre-training and the AKT / JKT / PKT transfer strategies."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple

import numpy as np

from .config import ModelConfig
from .data import Corpus, PretrainBatch, make_batch
from .errors import ConfigError, ContractError, CopyError, DomainError, NumericError
from .model import Model, build, forward, layer_prefix
from .objectives import TransferWeights, layer_kt_loss, mlm_loss, nsp_loss, pd_components, combine_pd
from .rng import derive, stream
from .tensor import Tensor, no_grad, softmax

STRATEGIES = ("akt", "jkt", "pkt")
LOSS_KINDS = ("kt", "pd", "combined")
COPIED_PREFIXES = ("embedding.", "pooler.", "mlm.", "nsp.")
HISTORY_FIELDS = ("step", "stage", "loss", "mlm", "kd", "nsp", "fmt_at")


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run reads besides the models and the corpus."""

    strategy: str = "pkt"
    kt_steps: int = 400
    pd_steps: int = 400
    teacher_steps: int = 2000
    batch_size: int = 16
    seq_len: int = 64
    lr: float = 1e-3
    # optional overrides for teacher pre-training and the distillation stage
    teacher_lr: float | None = None
    pd_lr: float | None = None
    warmup: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    soft_freeze: float = 0.1
    dropout: float = 0.0
    seed: int = 0
    corpus_docs: int = 400
    weights: TransferWeights = field(default_factory=TransferWeights)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {', '.join(STRATEGIES)}; got {self.strategy!r}")
        if self.batch_size < 1 or self.seq_len < 8:
            raise ConfigError("batch_size must be >= 1 and seq_len >= 8")
        if not 0.0 <= self.warmup < 1.0:
            raise ConfigError(f"warmup fraction must be in [0, 1), got {self.warmup}")
        if self.corpus_docs < 2:
            raise ConfigError("corpus_docs must be >= 2")
        if self.soft_freeze < 0:
            raise ConfigError("soft_freeze multiplier must be >= 0")
        for name in ("lr", "teacher_lr", "pd_lr"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ConfigError(f"{name} must be > 0, got {value}")

    def stage_lr(self, loss: str) -> float:
        return self.pd_lr if loss == "pd" and self.pd_lr is not None else self.lr

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["weights"] = self.weights.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ConfigError(f"unknown training config keys: {unknown}")
        doc = dict(doc)
        if "weights" in doc:
            w = doc["weights"]
            bad = sorted(set(w) - {f.name for f in dataclasses.fields(TransferWeights)})
            if bad:
                raise ConfigError(f"unknown transfer weight keys: {bad}")
            doc["weights"] = TransferWeights(**w)
        return cls(**doc)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from None

    def save(self, path: str | os.PathLike):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# stage plans


@dataclass(frozen=True)
class Stage:
    name: str
    loss: str
    kt_layers: tuple[int, ...]
    lr_multipliers: tuple[tuple[str, float], ...]
    steps: int

    def multiplier(self, param: str) -> float:
        """Multiplier of the longest matching prefix; unmatched parameters are untouched (0)."""
        best, value = -1, 0.0
        for prefix, m in self.lr_multipliers:
            if param.startswith(prefix) and len(prefix) > best:
                best, value = len(prefix), m
        return value

    def trainable(self, param: str) -> bool:
        return self.multiplier(param) > 0.0


@dataclass(frozen=True)
class StagePlan:
    strategy: str
    num_layers: int
    stages: tuple[Stage, ...]

    def __post_init__(self):
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise ConfigError(f"stage names must be unique: {names}")
        for s in self.stages:
            if s.steps < 1:
                raise ConfigError(f"stage {s.name} has non-positive step budget {s.steps}")
            if s.loss not in LOSS_KINDS:
                raise ConfigError(f"stage {s.name} has unknown loss kind {s.loss!r}")
        if self.strategy == "pkt":
            kinds = [s.loss for s in self.stages]
            if kinds != ["kt"] * self.num_layers + ["pd"]:
                raise ConfigError("a PKT plan needs exactly L layer-wise stages followed by one PD stage")

    @property
    def total_steps(self) -> int:
        return sum(s.steps for s in self.stages)

    def locate(self, step: int) -> tuple[int, int]:
        """``(stage index, step within stage)`` for a global 0-based step."""
        for i, s in enumerate(self.stages):
            if step < s.steps:
                return i, step
            step -= s.steps
        raise IndexError("step beyond plan")


def plan(strategy: str, L: int, kt_steps_total: int, pd_steps: int, soft_freeze: float = 0.1) -> StagePlan:
    """Build the stage schedule for one transfer strategy.

    ``akt`` is a single stage optimising every layer's transfer loss plus the
    distillation loss for ``kt_steps_total + pd_steps`` steps. ``jkt`` runs one
    joint transfer stage and then distillation. ``pkt`` trains layer ``l`` in
    stage ``l`` while layers below (and the embedding) get ``soft_freeze`` times
    the learning rate; layers above are not touched. The remainder of
    ``kt_steps_total / L`` goes to the last layer stage.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; valid strategies: {', '.join(STRATEGIES)}")
    if L < 1 or kt_steps_total < 1 or pd_steps < 1:
        raise ConfigError("L, kt_steps_total and pd_steps must all be >= 1")
    everything = (("", 1.0),)
    all_layers = tuple(range(L))
    if strategy == "akt":
        stages = [Stage("akt", "combined", all_layers, everything, kt_steps_total + pd_steps)]
    elif strategy == "jkt":
        stages = [Stage("jkt", "kt", all_layers, everything, kt_steps_total),
                  Stage("pd", "pd", (), everything, pd_steps)]
    else:
        if kt_steps_total < L:
            raise ConfigError(f"PKT needs at least one step per layer ({kt_steps_total} < {L})")
        per, rem = divmod(kt_steps_total, L)
        stages = []
        for l in range(L):
            mult = [(layer_prefix(l), 1.0), ("embedding.", soft_freeze)]
            mult += [(layer_prefix(j), soft_freeze) for j in range(l)]
            stages.append(Stage(f"pkt_layer_{l + 1}", "kt", (l,), tuple(mult), per + (rem if l == L - 1 else 0)))
        stages.append(Stage("pd", "pd", (), everything, pd_steps))
    return StagePlan(strategy, L, tuple(stages))


# ---------------------------------------------------------------------------
# optimiser


def lr_at(step: int, total: int, base: float, warmup: float) -> float:
    """Linear warmup over ``warmup * total`` steps, then linear decay to zero."""
    n_warm = int(math.ceil(warmup * total))
    if n_warm and step < n_warm:
        return base * (step + 1) / n_warm
    remaining = total - n_warm
    if remaining <= 0:
        return base
    return base * max(0.0, (total - step) / remaining)


@dataclass
class TrainState:
    """Resumable position in a run: step counter, Adam moments and the seed."""

    step: int = 0
    stage_index: int = 0
    seed: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray, int]] = field(default_factory=dict)

    def to_entries(self) -> dict[str, np.ndarray]:
        meta = {"step": self.step, "stage_index": self.stage_index, "seed": self.seed,
                "counts": {k: t for k, (_, _, t) in self.moments.items()}}
        entries = {"__state__": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
        for k, (m, v, _) in self.moments.items():
            entries[f"adam.m.{k}"] = m
            entries[f"adam.v.{k}"] = v
        return entries

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray]) -> "TrainState":
        meta = json.loads(bytes(entries["__state__"]).decode("utf-8"))
        moments = {k: (entries[f"adam.m.{k}"].copy(), entries[f"adam.v.{k}"].copy(), int(t))
                   for k, t in meta["counts"].items()}
        return cls(meta["step"], meta["stage_index"], meta["seed"], moments)


def adam_step(params: dict[str, Tensor], state: TrainState, lrs: dict[str, float], cfg: TrainConfig):
    """Update every parameter named in ``lrs`` in place; others are left bitwise untouched."""
    b1, b2 = cfg.beta1, cfg.beta2
    for name, lr in lrs.items():
        p = params[name]
        if p.grad is None or lr == 0.0:
            continue
        m, v, t = state.moments.get(name) or (np.zeros_like(p.data), np.zeros_like(p.data), 0)
        t += 1
        m = b1 * m + (1 - b1) * p.grad
        v = b2 * v + (1 - b2) * p.grad * p.grad
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        state.moments[name] = (m, v, t)


# ---------------------------------------------------------------------------
# runs


class HistoryRow(NamedTuple):
    step: int
    stage: str
    loss: float
    components: dict


class TrainResult(NamedTuple):
    model: Model
    history: list[HistoryRow]
    state: TrainState


def batch_for_step(corpus: Corpus, cfg: TrainConfig, seed: int, step: int, stream_name: str = "data") -> PretrainBatch:
    return make_batch(corpus, cfg.batch_size, cfg.seq_len, derive(seed, stream_name, step))


def _check_finite(value: float, stage: str, step: int):
    if not math.isfinite(value):
        raise NumericError(f"stage {stage!r} at step {step}: non-finite loss {value}")


def pretrain_teacher(
    config: ModelConfig,
    corpus: Corpus,
    steps: int,
    train_config: TrainConfig | None = None,
    seed: int | None = None,
    on_step: Callable[[HistoryRow], None] | None = None,
) -> TrainResult:
    """Train a classic or inverted-bottleneck encoder with the plain MLM + NSP objective."""
    if config.block_kind not in ("classic", "inverted_bottleneck"):
        raise ConfigError(f"teacher must be classic or inverted_bottleneck, got {config.block_kind!r}")
    cfg = train_config or TrainConfig()
    seed = cfg.seed if seed is None else seed
    model = build(config, derive(seed, "init"))
    state = TrainState(seed=seed)
    history: list[HistoryRow] = []
    for p in model.params.values():
        p.requires_grad = True
    lrs_base = {name: 1.0 for name in model.params}
    for step in range(steps):
        batch = batch_for_step(corpus, cfg, seed, step, "teacher_data")
        try:
            out = forward(model, batch.token_ids, batch.segment_ids, batch.attention_mask, dropout=cfg.dropout,
                          rng=stream(seed, "teacher_dropout", step), mlm_positions=batch.mlm_index)
            l_mlm = mlm_loss(out.mlm_logits, batch.mlm_labels)
            l_nsp = nsp_loss(out.nsp_logits, batch.nsp_labels)
        except DomainError as exc:
            raise NumericError(f"stage 'teacher' at step {step}: {exc}") from exc
        loss = l_mlm + l_nsp
        value = loss.item()
        _check_finite(value, "teacher", step)
        model.zero_grad()
        loss.backward()
        lr = lr_at(step, steps, cfg.teacher_lr or cfg.lr, cfg.warmup)
        adam_step(model.params, state, {k: lr * m for k, m in lrs_base.items()}, cfg)
        row = HistoryRow(step, "teacher", value, {"mlm": l_mlm.item(), "nsp": l_nsp.item()})
        history.append(row)
        if on_step:
            on_step(row)
    state.step = steps
    for p in model.params.values():
        p.requires_grad = False
        p.grad = None
    return TrainResult(model, history, state)


def copy_embedding_and_classifier(teacher: Model, student: Model):
    """Copy the embedding stack and the pre-training heads from teacher into student (in place)."""
    names = [n for n in teacher.params if n.startswith(COPIED_PREFIXES)]
    problems = []
    for n in names:
        if n not in student.params:
            problems.append(f"{n}: missing in student")
        elif student.params[n].shape != teacher.params[n].shape:
            problems.append(f"{n}: teacher {teacher.params[n].shape} vs student {student.params[n].shape}")
    extra = [n for n in student.params if n.startswith(COPIED_PREFIXES) and n not in teacher.params]
    problems += [f"{n}: missing in teacher" for n in extra]
    if problems:
        raise CopyError("cannot copy embedding/classifier: " + "; ".join(problems))
    for n in names:
        student.params[n] = Tensor(teacher.params[n].data.copy())


class _TeacherView(NamedTuple):
    trace: object
    mlm_probs: np.ndarray | None


def _teacher_outputs(teacher: Model, batch: PretrainBatch, depth: int, need_probs: bool) -> _TeacherView:
    with no_grad():
        out = forward(teacher, batch.token_ids, batch.segment_ids, batch.attention_mask,
                      mlm_positions=batch.mlm_index, num_layers=None if need_probs else depth,
                      heads=need_probs)
    probs = softmax(out.mlm_logits, axis=-1).data if need_probs else None
    return _TeacherView(out.trace, probs)


def stage_loss(stage: Stage, teacher_view: _TeacherView, student: Model, batch: PretrainBatch,
               weights: TransferWeights, dropout: float = 0.0, rng=None):
    """Loss tensor and float components for one stage on one batch."""
    need_heads = stage.loss in ("pd", "combined")
    depth = None if need_heads else max(stage.kt_layers) + 1
    out = forward(student, batch.token_ids, batch.segment_ids, batch.attention_mask, dropout=dropout, rng=rng,
                  mlm_positions=batch.mlm_index, num_layers=depth, heads=need_heads)
    comps: dict[str, float] = {}
    total = None
    if stage.loss in ("kt", "combined"):
        for l in stage.kt_layers:
            term = layer_kt_loss(teacher_view.trace, out.trace, l, weights, batch.attention_mask)
            total = term if total is None else total + term
        comps["fmt_at"] = total.item()
    if need_heads:
        parts = pd_components(out.mlm_logits, batch.mlm_labels, teacher_view.mlm_probs, out.nsp_logits,
                              batch.nsp_labels)
        pd = combine_pd(parts["mlm"], parts["kd"], parts["nsp"], weights.alpha)
        comps.update({k: v.item() for k, v in parts.items()})
        total = pd if total is None else total + pd
    return total, comps


def _check_pair(teacher: Model, student: Model):
    t, s = teacher.config, student.config
    if t.num_layers != s.num_layers:
        raise ConfigError(f"teacher has {t.num_layers} layers but student has {s.num_layers}")
    if t.h_inter != s.h_inter:
        raise ConfigError(f"teacher h_inter {t.h_inter} != student h_inter {s.h_inter}")
    if t.num_heads != s.num_heads:
        raise ConfigError(f"teacher has {t.num_heads} heads but student has {s.num_heads}")


def _stage_items(planned: StagePlan, start: int, stop: int) -> Iterator[tuple[int, int, Stage]]:
    for step in range(start, stop):
        idx, local = planned.locate(step)
        yield step, local, planned.stages[idx]


def run(
    planned: StagePlan,
    teacher: Model,
    student: Model,
    corpus: Corpus,
    weights: TransferWeights | None = None,
    seed: int = 0,
    train_config: TrainConfig | None = None,
    state: TrainState | None = None,
    max_steps: int | None = None,
    pipeline: bool = False,
    on_step: Callable[[HistoryRow], None] | None = None,
) -> TrainResult:
    """Execute ``planned`` and return the trained student (a copy) and its loss history.

    The teacher is only ever evaluated under :func:`no_grad`. Pass a saved
    ``state`` together with the student it belongs to in order to resume.
    ``max_steps`` stops early (the returned state can be resumed later).
    ``pipeline`` computes teacher outputs for the next batch on a worker thread.
    """
    _check_pair(teacher, student)
    if planned.num_layers != student.config.num_layers:
        raise ConfigError(f"plan is for {planned.num_layers} layers, student has {student.config.num_layers}")
    cfg = train_config or TrainConfig()
    weights = weights or cfg.weights
    model = student.copy()
    state = TrainState(seed=seed) if state is None else dataclasses.replace(state, moments=dict(state.moments))
    seed = state.seed
    stop = planned.total_steps if max_steps is None else min(planned.total_steps, state.step + max_steps)
    history: list[HistoryRow] = []
    full_depth = teacher.config.num_layers

    def prepare(step: int, stage: Stage):
        batch = batch_for_step(corpus, cfg, seed, step)
        depth = full_depth if not stage.kt_layers else max(stage.kt_layers) + 1
        return batch, _teacher_outputs(teacher, batch, depth, stage.loss != "kt")

    items = list(_stage_items(planned, state.step, stop))
    pool = ThreadPoolExecutor(max_workers=1) if pipeline else None
    try:
        pending = pool.submit(prepare, items[0][0], items[0][2]) if (pool and items) else None
        for n, (step, local, stage) in enumerate(items):
            if pool:
                batch, tview = pending.result()
                if n + 1 < len(items):
                    pending = pool.submit(prepare, items[n + 1][0], items[n + 1][2])
            else:
                batch, tview = prepare(step, stage)
            lrs = {}
            for name, p in model.params.items():
                mult = stage.multiplier(name)
                p.requires_grad = mult > 0.0
                p.grad = None
                if mult > 0.0:
                    lrs[name] = mult * lr_at(local, stage.steps, cfg.stage_lr(stage.loss), cfg.warmup)
            try:
                loss, comps = stage_loss(stage, tview, model, batch, weights, cfg.dropout,
                                         stream(seed, "dropout", step))
            except DomainError as exc:
                raise NumericError(f"stage {stage.name!r} at step {step}: {exc}") from exc
            value = loss.item()
            _check_finite(value, stage.name, step)
            loss.backward()
            adam_step(model.params, state, lrs, cfg)
            state.step = step + 1
            state.stage_index = planned.locate(step)[0]
            row = HistoryRow(step, stage.name, value, comps)
            history.append(row)
            if on_step:
                on_step(row)
    finally:
        if pool:
            pool.shutdown(wait=True)
    for p in model.params.values():
        p.requires_grad = False
        p.grad = None
    return TrainResult(model, history, state)


# ---------------------------------------------------------------------------
# evaluation helpers


def mean_kt_loss(teacher: Model, student: Model, batch: PretrainBatch, weights: TransferWeights) -> float:
    """Average over layers of the layer-wise transfer loss on one batch."""
    _check_pair(teacher, student)
    with no_grad():
        t = forward(teacher, batch.token_ids, batch.segment_ids, batch.attention_mask, heads=False)
        s = forward(student, batch.token_ids, batch.segment_ids, batch.attention_mask, heads=False)
        losses = [layer_kt_loss(t.trace, s.trace, l, weights, batch.attention_mask).item()
                  for l in range(student.config.num_layers)]
    return float(np.mean(losses))


def mlm_accuracy(model: Model, batches: list[PretrainBatch]) -> float:
    """Fraction of masked positions whose arg-max prediction equals the label."""
    hits = total = 0
    with no_grad():
        for b in batches:
            out = forward(model, b.token_ids, b.segment_ids, b.attention_mask, mlm_positions=b.mlm_index)
            hits += int((out.mlm_logits.data.argmax(axis=-1) == b.mlm_labels).sum())
            total += b.mlm_labels.size
    if total == 0:
        raise ContractError("no masked positions to evaluate")
    return hits / total


def majority_baseline(corpus: Corpus, batches: list[PretrainBatch]) -> float:
    """Accuracy of always predicting the corpus's most frequent token."""
    top = int(np.argmax(corpus.unigram_counts()))
    labels = np.concatenate([b.mlm_labels for b in batches])
    return float(np.mean(labels == top))


def eval_batches(corpus: Corpus, cfg: TrainConfig, seed: int, n: int) -> list[PretrainBatch]:
    return [make_batch(corpus, cfg.batch_size, cfg.seq_len, derive(seed, "eval", i)) for i in range(n)]


def write_history_csv(history: list[HistoryRow], path: str | os.PathLike):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for row in history:
            c = row.components
            w.writerow([row.step, row.stage, repr(row.loss)] + [repr(c[k]) if k in c else "" for k in HISTORY_FIELDS[3:]])
