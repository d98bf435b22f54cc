"""Pre-train a small teacher, then transfer it layer by layer into a narrow student.

The default budgets finish in about a minute; pass --full for the 2000 + 400 + 400
step run used by the acceptance suite.
"""

import argparse
import time

from mobilebert_kit.config import preset
from mobilebert_kit.data import generate_corpus, make_batch
from mobilebert_kit.efficiency import quantize_model
from mobilebert_kit.model import build
from mobilebert_kit.rng import derive
from mobilebert_kit.training import (
    TrainConfig,
    copy_embedding_and_classifier,
    eval_batches,
    majority_baseline,
    mean_kt_loss,
    mlm_accuracy,
    plan,
    pretrain_teacher,
    run,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--full", action="store_true")
    ap.add_argument("--strategy", default="pkt", choices=("akt", "jkt", "pkt"))
    args = ap.parse_args()
    cfg = TrainConfig(seq_len=32, lr=1e-2, teacher_lr=1e-3, pd_lr=1e-3, soft_freeze=0.0)
    if not args.full:
        cfg = cfg.replace(teacher_steps=300, kt_steps=80, pd_steps=40)

    corpus = generate_corpus(0, preset("desk_teacher").vocab_size, cfg.corpus_docs)
    evals = eval_batches(corpus, cfg, 99, 8)
    start = time.perf_counter()
    teacher = pretrain_teacher(preset("desk_teacher"), corpus, cfg.teacher_steps, cfg).model
    print(f"teacher: accuracy {mlm_accuracy(teacher, evals):.3f} "
          f"(always-most-frequent baseline {majority_baseline(corpus, evals):.3f}), "
          f"{time.perf_counter() - start:.0f} s")

    student = build(preset("desk_student"), derive(cfg.seed, "student"))
    copy_embedding_and_classifier(teacher, student)
    probe = make_batch(corpus, cfg.batch_size, cfg.seq_len, 12345)
    print(f"student before transfer: mean KT loss {mean_kt_loss(teacher, student, probe, cfg.weights):.3f}")

    planned = plan(args.strategy, 4, cfg.kt_steps, cfg.pd_steps, cfg.soft_freeze)
    for stage in planned.stages:
        print(f"  stage {stage.name}: {stage.steps} steps, loss {stage.loss}")
    result = run(planned, teacher, student, corpus, cfg.weights, cfg.seed, cfg)
    print(f"student after transfer: mean KT loss {mean_kt_loss(teacher, result.model, probe, cfg.weights):.3f}, "
          f"accuracy {mlm_accuracy(result.model, evals):.3f}")

    qm, size = quantize_model(result.model)
    print(f"int8 weights: {size.ratio:.2f}x smaller, accuracy {mlm_accuracy(qm.dequantize(), evals):.3f}")


if __name__ == "__main__":
    main()
