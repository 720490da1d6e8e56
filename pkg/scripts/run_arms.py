"""Train the acceptance arms and cache checkpoints + reports.

Arms: per seed in 0..3, coarse-to-fine (c2f), single-stage (single),
and augmentation-off c2f (noaug). Results land in build/acceptance/
as checkpoints plus one summary JSON the tests can assert against.
"""

import json
import os
import sys
import time

from trajsel import evaluator, harness
from trajsel.config import config_hash, desk_config
from trajsel.generator import vocabulary_for
from trajsel.planner import PlannerConfig, train
from trajsel.scenario import load_dataset

OUT = os.path.join(os.path.dirname(os.path.abspath(__file__)),
                   os.pardir, "build", "acceptance")
SEEDS = (0, 1, 2, 3)


def desk_planner(**overrides) -> PlannerConfig:
    base = dict(hidden_dim=64, coarse_layers=2, refine_layers=2, attn_heads=2,
                ff_dim=128, top_k=64, batch_size=4, epochs=1, lr=2e-3,
                ema_mode="scratch")
    base.update(overrides)
    return PlannerConfig(**base)


ARMS = {
    "c2f": {},
    "single": {"single_stage": True},
    "noaug": {"augment": False},
}


def main(which=None):
    cfg = desk_config()
    vocab = vocabulary_for(cfg.generator.vocab)
    train_ds = load_dataset(os.path.join(OUT, "train.jsonl"))
    test_ds = load_dataset(os.path.join(OUT, "test.jsonl"))
    train_s = [r.scenario for r in train_ds.records]
    test_s = [r.scenario for r in test_ds.records]
    train_labels = evaluator.load_labels(
        os.path.join(OUT, "train.jsonl.labels.npz"),
        dataset_sha=train_ds.sha256, vocabulary=vocab)
    test_labels = evaluator.load_labels(
        os.path.join(OUT, "test.jsonl.labels.npz"),
        dataset_sha=test_ds.sha256, vocabulary=vocab)

    summary_path = os.path.join(OUT, "arms.json")
    summary = {}
    if os.path.exists(summary_path):
        with open(summary_path) as fh:
            summary = json.load(fh)

    for arm, overrides in ARMS.items():
        if which and arm not in which:
            continue
        for seed in SEEDS:
            key = "%s_s%d" % (arm, seed)
            ckpt = os.path.join(OUT, key + ".ckpt")
            if key in summary and os.path.exists(ckpt):
                print("%s: cached (EPDMS %.2f)" % (key, summary[key]["epdms"]),
                      flush=True)
                continue
            pcfg = desk_planner(**overrides)
            t0 = time.perf_counter()
            result = train(train_s, vocab, pcfg, seed=seed,
                           labels=list(train_labels), eval_cfg=cfg.evaluator)
            t1 = time.perf_counter()
            result.model.save(ckpt, step=result.steps,
                              config_hash=config_hash(cfg))
            rep = harness.evaluate(result.model, test_s, labels=test_labels,
                                   version=2, use_teacher=False,
                                   eval_cfg=cfg.evaluator)
            splits = harness.split_eval(result.model, test_s,
                                        labels=test_labels, version=2,
                                        use_teacher=False,
                                        eval_cfg=cfg.evaluator)
            summary[key] = {
                "arm": arm,
                "seed": seed,
                "epdms": rep.aggregate_mean,
                "splits": {b: (None if splits[b] is None
                               else splits[b].aggregate_mean)
                           for b in ("left", "forward", "right")},
                "split_n": {b: (0 if splits[b] is None
                                else splits[b].n_scenarios)
                            for b in ("left", "forward", "right")},
                "steps": result.steps,
                "aborted": result.aborted,
                "train_s": round(t1 - t0, 1),
            }
            with open(summary_path, "w") as fh:
                json.dump(summary, fh, indent=1, sort_keys=True)
            print("%s: EPDMS %.2f (train %.0fs, aborted %s)"
                  % (key, rep.aggregate_mean, t1 - t0, result.aborted),
                  flush=True)
    print("all arms done", flush=True)


if __name__ == "__main__":
    main(set(sys.argv[1:]) or None)
