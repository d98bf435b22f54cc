import csv
import math

import numpy as np
import pytest

from mobilebert_kit.config import ModelConfig, preset
from mobilebert_kit.data import generate_corpus, make_batch
from mobilebert_kit.errors import ConfigError, CopyError, NumericError
from mobilebert_kit.model import build, embed, forward
from mobilebert_kit.objectives import TransferWeights, layer_kt_loss, pd_loss
from mobilebert_kit.tensor import softmax
from mobilebert_kit.training import (
    Stage,
    StagePlan,
    TrainConfig,
    TrainState,
    batch_for_step,
    copy_embedding_and_classifier,
    lr_at,
    mean_kt_loss,
    plan,
    pretrain_teacher,
    run,
    stage_loss,
    write_history_csv,
    _teacher_outputs,
)

TEACHER = ModelConfig(32, 16, 3, 8, 16, 24, 2, 32, 1, "inverted_bottleneck", "conv3_factorized", "no_norm", "gelu")
STUDENT = ModelConfig(32, 16, 3, 8, 16, 8, 2, 16, 2, "bottleneck", "conv3_factorized", "no_norm", "relu")
CORPUS = generate_corpus(5, 32, 40)
CFG = TrainConfig(batch_size=4, seq_len=12, lr=3e-3)


@pytest.fixture(scope="module")
def pair():
    teacher = pretrain_teacher(TEACHER, CORPUS, 5, CFG).model
    student = build(STUDENT, 11)
    copy_embedding_and_classifier(teacher, student)
    return teacher, student


# plans


def test_pkt_plan_at_full_scale():
    p = plan("pkt", 24, 240_000, 10_000)
    assert [s.steps for s in p.stages[:-1]] == [10_000] * 24
    assert p.stages[-1].loss == "pd" and len(p.stages) == 25


def test_strategy_stage_counts():
    assert len(plan("akt", 4, 10, 5).stages) == 1
    assert plan("akt", 4, 10, 5).stages[0].steps == 15
    assert [s.loss for s in plan("jkt", 4, 10, 5).stages] == ["kt", "pd"]


def test_remainder_goes_to_last_kt_stage():
    p = plan("pkt", 4, 402, 7)
    assert [s.steps for s in p.stages] == [100, 100, 100, 102, 7]
    assert p.total_steps == 409


def test_plan_validation():
    with pytest.raises(ConfigError, match="akt, jkt, pkt"):
        plan("foo", 4, 10, 10)
    with pytest.raises(ConfigError):
        plan("pkt", 4, 0, 10)
    with pytest.raises(ConfigError):
        StagePlan("jkt", 2, (Stage("a", "kt", (0,), (), 1), Stage("a", "pd", (), (), 1)))
    with pytest.raises(ConfigError):
        StagePlan("pkt", 2, (Stage("a", "kt", (0,), (), 1), Stage("b", "pd", (), (), 1)))


def test_pkt_multipliers():
    stage = plan("pkt", 3, 30, 5, soft_freeze=0.1).stages[1]
    assert stage.multiplier("layers.1.attention.query.weight") == 1.0
    assert stage.multiplier("layers.0.ffn.0.inner.bias") == 0.1
    assert stage.multiplier("embedding.token") == 0.1
    assert stage.multiplier("layers.2.attention.query.weight") == 0.0
    assert stage.multiplier("mlm.decoder_bias") == 0.0
    # prefixes must not confuse layer 1 with layer 10+
    assert plan("pkt", 12, 120, 5).stages[1].multiplier("layers.10.ffn.0.inner.weight") == 0.0


def test_lr_schedule_warms_up_then_decays():
    lrs = [lr_at(s, 100, 1.0, 0.1) for s in range(100)]
    assert lrs[0] == pytest.approx(0.1) and lrs[9] == pytest.approx(1.0)
    assert all(a >= b for a, b in zip(lrs[9:], lrs[10:]))
    assert lrs[-1] > 0


def test_train_config_json(tmp_path):
    path = tmp_path / "train.json"
    CFG.save(path)
    assert TrainConfig.load(path) == CFG
    with pytest.raises(ConfigError, match="momentum"):
        TrainConfig.from_dict({"momentum": 0.9})
    with pytest.raises(ConfigError):
        TrainConfig(strategy="foo")
    with pytest.raises(ConfigError, match="pd_lr"):
        TrainConfig(pd_lr=0.0)


def test_distillation_stage_lr_override():
    cfg = CFG.replace(pd_lr=1e-4)
    assert cfg.stage_lr("pd") == 1e-4
    assert cfg.stage_lr("kt") == cfg.stage_lr("combined") == CFG.lr
    assert CFG.stage_lr("pd") == CFG.lr


# teacher


def test_teacher_rejects_student_kinds():
    with pytest.raises(ConfigError):
        pretrain_teacher(STUDENT, CORPUS, 1, CFG)


def test_teacher_zero_steps_is_initialization():
    res = pretrain_teacher(TEACHER, CORPUS, 0, CFG)
    init = build(TEACHER, _init_seed(CFG.seed))
    assert all(np.array_equal(res.model[k].data, init[k].data) for k in init.params)
    assert res.history == []


def _init_seed(seed):
    from mobilebert_kit.rng import derive

    return derive(seed, "init")


def test_teacher_is_deterministic_and_learns():
    a = pretrain_teacher(TEACHER, CORPUS, 30, CFG)
    b = pretrain_teacher(TEACHER, CORPUS, 30, CFG)
    assert abs(a.history[-1].loss - b.history[-1].loss) < 1e-9
    first = np.mean([h.components["mlm"] for h in a.history[:5]])
    last = np.mean([h.components["mlm"] for h in a.history[-5:]])
    assert last < first


# copy


def test_copy_makes_embeddings_identical(pair):
    teacher, student = pair
    ids = np.arange(5, 17)
    np.testing.assert_array_equal(embed(teacher, ids).data, embed(student, ids).data)
    for name in teacher.params:
        if name.startswith(("embedding.", "mlm.", "nsp.", "pooler.")):
            assert np.array_equal(teacher[name].data, student[name].data)
            assert teacher[name] is not student[name]


def test_copy_leaves_body_alone():
    teacher = build(TEACHER, 0)
    student = build(STUDENT, 1)
    body = {k: v.data.copy() for k, v in student.params.items() if k.startswith("layers.")}
    copy_embedding_and_classifier(teacher, student)
    assert all(np.array_equal(student[k].data, v) for k, v in body.items())


def test_copy_lists_mismatches():
    teacher = build(TEACHER, 0)
    student = build(STUDENT.replace(h_embedding=4), 1)
    with pytest.raises(CopyError, match="embedding.token"):
        copy_embedding_and_classifier(teacher, student)


# runs


def test_identity_student_has_zero_kt_loss():
    teacher = build(STUDENT, 3)
    student = teacher.copy()
    batch = make_batch(CORPUS, 4, 12, 0)
    assert mean_kt_loss(teacher, student, batch, TransferWeights()) < 1e-10
    res = run(plan("jkt", 3, 1, 1), teacher, student, CORPUS, seed=0, train_config=CFG, max_steps=1)
    assert res.history[0].loss < 1e-10


def test_history_length_and_csv(pair, tmp_path):
    teacher, student = pair
    p = plan("pkt", 3, 7, 2)
    res = run(p, teacher, student, CORPUS, seed=1, train_config=CFG)
    assert len(res.history) == p.total_steps == 9
    assert [h.stage for h in res.history] == ["pkt_layer_1"] * 2 + ["pkt_layer_2"] * 2 + ["pkt_layer_3"] * 3 + ["pd"] * 2
    write_history_csv(res.history, tmp_path / "h.csv")
    rows = list(csv.DictReader(open(tmp_path / "h.csv")))
    assert rows[0].keys() == {"step", "stage", "loss", "mlm", "kd", "nsp", "fmt_at"}
    assert rows[-1]["mlm"] != "" and rows[0]["mlm"] == ""


def test_teacher_and_input_student_untouched(pair):
    teacher, student = pair
    t_before, s_before = teacher.state_dict(), student.state_dict()
    probe = make_batch(CORPUS, 4, 12, 77)
    out_before = forward(teacher, probe.token_ids, probe.segment_ids, probe.attention_mask).mlm_logits.data
    for strategy in ("akt", "jkt", "pkt"):
        run(plan(strategy, 3, 3, 2), teacher, student, CORPUS, seed=2, train_config=CFG)
    assert all(np.array_equal(t_before[k], teacher[k].data) for k in t_before)
    assert all(np.array_equal(s_before[k], student[k].data) for k in s_before)
    assert all(p.grad is None for p in teacher.params.values())
    out_after = forward(teacher, probe.token_ids, probe.segment_ids, probe.attention_mask).mlm_logits.data
    assert np.array_equal(out_before, out_after)


def test_hard_freeze_changes_only_the_stage_layer(pair):
    teacher, student = pair
    p = plan("pkt", 3, 6, 1, soft_freeze=0.0)
    after_two = run(p, teacher, student, CORPUS, seed=3, train_config=CFG, max_steps=4).model
    after_three = run(p, teacher, after_two, CORPUS, seed=3, train_config=CFG,
                      state=TrainState(step=4, seed=3), max_steps=2).model
    for name in student.params:
        same = np.array_equal(after_two[name].data, after_three[name].data)
        assert same == (not name.startswith("layers.2.")), name


def test_soft_freeze_changes_only_layers_at_or_below(pair):
    teacher, student = pair
    p = plan("pkt", 3, 6, 1, soft_freeze=0.1)
    after = run(p, teacher, student, CORPUS, seed=3, train_config=CFG, max_steps=4).model
    for name in student.params:
        changed = not np.array_equal(after[name].data, student[name].data)
        below = name.startswith(("layers.0.", "layers.1.", "embedding."))
        assert changed == below, name


def test_akt_step_zero_loss_is_sum_of_parts(pair):
    teacher, student = pair
    p = plan("akt", 3, 2, 2)
    batch = batch_for_step(CORPUS, CFG, 4, 0)
    w = TransferWeights()
    t = forward(teacher, batch.token_ids, batch.segment_ids, batch.attention_mask, mlm_positions=batch.mlm_index)
    s = forward(student, batch.token_ids, batch.segment_ids, batch.attention_mask, mlm_positions=batch.mlm_index)
    expected = sum(layer_kt_loss(t.trace, s.trace, l, w, batch.attention_mask).item() for l in range(3))
    expected += pd_loss(s.mlm_logits, batch.mlm_labels, softmax(t.mlm_logits).data, s.nsp_logits,
                        batch.nsp_labels, w.alpha).item()
    res = run(p, teacher, student, CORPUS, w, seed=4, train_config=CFG, max_steps=1)
    assert abs(res.history[0].loss - expected) < 1e-10


def test_resume_reproduces_loss_sequence(pair):
    teacher, student = pair
    p = plan("jkt", 3, 4, 4)
    full = run(p, teacher, student, CORPUS, seed=5, train_config=CFG)
    first = run(p, teacher, student, CORPUS, seed=5, train_config=CFG, max_steps=3)
    state = TrainState.from_entries(first.state.to_entries())
    rest = run(p, teacher, first.model, CORPUS, seed=5, train_config=CFG, state=state)
    assert [h.loss for h in first.history + rest.history] == [h.loss for h in full.history]


def test_pipeline_matches_serial(pair):
    teacher, student = pair
    p = plan("pkt", 3, 3, 2)
    a = run(p, teacher, student, CORPUS, seed=6, train_config=CFG)
    b = run(p, teacher, student, CORPUS, seed=6, train_config=CFG, pipeline=True)
    assert [h.loss for h in a.history] == [h.loss for h in b.history]


def test_nan_aborts_with_stage_and_step(pair):
    teacher, student = pair
    broken = student.copy()
    broken["layers.1.ffn.0.inner.weight"].data[:] = np.nan
    with pytest.raises(NumericError, match=r"pkt_layer_2.*step 2"):
        run(plan("pkt", 3, 6, 1), teacher, broken, CORPUS, seed=7, train_config=CFG)


def test_mismatched_depth_rejected(pair):
    teacher, _ = pair
    other = build(STUDENT.replace(num_layers=2), 0)
    with pytest.raises(ConfigError, match="layers"):
        run(plan("jkt", 2, 1, 1), teacher, other, CORPUS, train_config=CFG)


def test_pkt_stage_uses_only_needed_depth(pair):
    teacher, student = pair
    stage = plan("pkt", 3, 3, 1).stages[0]
    batch = batch_for_step(CORPUS, CFG, 0, 0)
    view = _teacher_outputs(teacher, batch, 1, False)
    assert len(view.trace.feature_maps) == 1 and view.mlm_probs is None
    loss, comps = stage_loss(stage, view, student, batch, TransferWeights())
    assert math.isfinite(loss.item()) and set(comps) == {"fmt_at"}
