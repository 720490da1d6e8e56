"""Command line front end.

Subcommands cover the whole pipeline: generate scenarios, label them
against the vocabulary, train a selector, and run the evaluation and
analysis campaigns. Exit codes: 0 success, 1 usage error, 2 runtime
failure. The SUPRIM_THREADS environment variable caps worker threads;
it is applied before the numeric libraries load.
"""

from __future__ import annotations

import argparse
import os
import sys


def _cap_threads() -> int:
    """Honor SUPRIM_THREADS before numpy spins up its thread pools."""
    cap = os.environ.get("SUPRIM_THREADS", "")
    if cap.strip():
        try:
            n = max(1, int(cap))
        except ValueError:
            raise _UsageError("SUPRIM_THREADS must be an integer") from None
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, str(n))
        return n
    return 1


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems instead of exiting."""

    def error(self, message):
        raise _UsageError("%s\n%s" % (self.format_usage().rstrip(), message))


def _build_parser() -> _Parser:
    p = _Parser(prog="trajsel", description=__doc__.splitlines()[0])
    p.add_argument("--config", metavar="PATH", default=None,
                   help="INI config; defaults when omitted")
    p.add_argument("--seed", type=int, default=0, help="base RNG seed")
    p.add_argument("--out", metavar="DIR", default="build/run",
                   help="output directory for artifacts")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    sp = sub.add_parser("gen", help="generate a scenario dataset")
    sp.add_argument("--count", type=int, default=100)
    sp.add_argument("--split", default="train")
    sp.add_argument("--name", default="dataset.jsonl",
                    help="file name inside --out")
    sp.set_defaults(func=_cmd_gen)

    sp = sub.add_parser("labels", help="score every vocabulary entry")
    sp.add_argument("--dataset", required=True)
    sp.set_defaults(func=_cmd_labels)

    sp = sub.add_parser("train", help="train the selector")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", default="train")
    sp.add_argument("--name", default="model.ckpt")
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    _eval_flags(sp)
    sp.add_argument("--plots", action="store_true", help="also write SVG")
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("oracle", help="best-in-top-K upper bounds")
    _eval_flags(sp)
    sp.add_argument("--ks", default="1,4,16,256")
    sp.set_defaults(func=_cmd_oracle)

    sp = sub.add_parser("split-eval", help="per-turn-direction evaluation")
    _eval_flags(sp)
    sp.set_defaults(func=_cmd_split_eval)

    sp = sub.add_parser("dist-hist", help="heading distribution study")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", default="train")
    sp.add_argument("--bins", type=int, default=24)
    sp.add_argument("--copies", type=int, default=1,
                    help="rotated copies per scenario in the augmented pool")
    sp.add_argument("--plots", action="store_true")
    sp.set_defaults(func=_cmd_dist_hist)

    sp = sub.add_parser("fov-sweep", help="token count and score vs mask width")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--checkpoint", default=None)
    sp.set_defaults(func=_cmd_fov_sweep)

    sp = sub.add_parser("infer", help="select a trajectory for one scenario")
    _eval_flags(sp)
    sp.add_argument("--index", type=int, default=0)
    sp.set_defaults(func=_cmd_infer)
    return p


def _eval_flags(sp):
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--checkpoint", required=True)


# ---- shared plumbing ----


def _load_config(args):
    from .config import AppConfig, load_config

    return load_config(args.config) if args.config else AppConfig()


def _vocab(cfg):
    from .generator import vocabulary_for

    return vocabulary_for(cfg.generator.vocab)


def _load_split(args, cfg):
    """Dataset records of one split plus any cached labels for them."""
    from . import evaluator
    from .scenario import load_dataset

    ds = load_dataset(args.dataset)
    idx = [i for i, r in enumerate(ds.records) if r.split == args.split]
    if not idx:
        raise _UsageError("split %r has no records in %s"
                          % (args.split, args.dataset))
    scenarios = [ds.records[i].scenario for i in idx]
    labels = None
    sidecar = args.dataset + ".labels.npz"
    if os.path.exists(sidecar):
        vocab = _vocab(cfg)
        try:
            all_labels = evaluator.load_labels(
                sidecar, dataset_sha=ds.sha256, vocabulary=vocab,
                cfg=cfg.evaluator,
            )
            labels = [all_labels[i] for i in idx]
        except evaluator.LabelCacheMismatch as e:
            print("note: ignoring stale label cache (%s)" % e, file=sys.stderr)
    return ds, scenarios, labels


def _load_model(args, cfg):
    from .planner import PlannerModel

    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError("checkpoint %s not found" % args.checkpoint)
    return PlannerModel.load(args.checkpoint, _vocab(cfg))


def _outdir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _emit(headers, rows, base) -> None:
    """Print a table and persist it as .txt and .csv next to base."""
    from .harness import save_report, table_text

    print(table_text(headers, rows))
    save_report(base, headers, rows)
    print("wrote %s.txt %s.csv" % (base, base))


# ---- subcommands ----


def _cmd_gen(args) -> int:
    from .generator import generate_scenario
    from .scenario import DatasetRecord, save_dataset

    cfg = _load_config(args)
    records = []
    for i in range(args.count):
        s = generate_scenario(args.seed + i, cfg.generator)
        records.append(DatasetRecord(split=args.split, scenario=s))
    path = os.path.join(_outdir(args), args.name)
    sha = save_dataset(path, records, cfg.generator,
                       seed_range=(args.seed, args.seed + args.count))
    print("%s  records=%d  sha256=%s" % (path, len(records), sha[:16]))
    return 0


def _cmd_labels(args) -> int:
    from concurrent.futures import ThreadPoolExecutor

    from . import evaluator
    from .scenario import load_dataset

    cfg = _load_config(args)
    vocab = _vocab(cfg)
    ds = load_dataset(args.dataset)
    scenarios = [r.scenario for r in ds.records]
    workers = _cap_threads()

    def one(s):
        return evaluator.label_vocabulary(s, vocab, cfg.evaluator)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            labels = list(ex.map(one, scenarios))
    else:
        labels = [one(s) for s in scenarios]
    sidecar = args.dataset + ".labels.npz"
    sha = evaluator.save_labels(sidecar, labels, dataset_sha=ds.sha256,
                                vocabulary=vocab, cfg=cfg.evaluator)
    print("%s  scenarios=%d  sha256=%s" % (sidecar, len(labels), sha[:16]))
    return 0


def _cmd_train(args) -> int:
    from .config import config_hash
    from .planner import train

    cfg = _load_config(args)
    _, scenarios, labels = _load_split(args, cfg)
    vocab = _vocab(cfg)
    path = os.path.join(_outdir(args), args.name)
    log_path = path + ".log.jsonl"
    result = train(scenarios, vocab, cfg.planner, seed=args.seed,
                   labels=labels, eval_cfg=cfg.evaluator, log_path=log_path)
    sha = result.model.save(path, adam=result.adam, step=result.steps,
                            config_hash=config_hash(cfg))
    status = "aborted (non-finite loss; last good weights kept)" \
        if result.aborted else "ok"
    print("%s  steps=%d  %s  sha256=%s" % (path, result.steps, status, sha[:16]))
    return 0


def _cmd_eval(args) -> int:
    from .config import config_hash
    from .harness import evaluate

    cfg = _load_config(args)
    _, scenarios, labels = _load_split(args, cfg)
    model = _load_model(args, cfg)
    report = evaluate(model, scenarios, labels=labels,
                      version=cfg.inference.version,
                      use_teacher=cfg.inference.use_teacher,
                      eval_cfg=cfg.evaluator, config_hash=config_hash(cfg),
                      checkpoint_id=os.path.basename(args.checkpoint))
    print(report.to_text())
    base = os.path.join(_outdir(args), "eval")
    with open(base + ".txt", "w", encoding="utf-8") as fh:
        fh.write(report.to_text() + "\n")
    with open(base + ".csv", "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    if args.plots:
        from .harness import svg_bars

        names = list(report.subscore_means)
        svg = svg_bars([report.subscore_means[n] for n in names], names,
                       title="mean subscores (percent)")
        with open(base + ".svg", "w", encoding="utf-8") as fh:
            fh.write(svg)
    print("wrote %s.{txt,csv%s}" % (base, ",svg" if args.plots else ""))
    return 0


def _cmd_oracle(args) -> int:
    from .harness import oracle_study

    cfg = _load_config(args)
    _, scenarios, labels = _load_split(args, cfg)
    model = _load_model(args, cfg)
    try:
        ks = tuple(int(x) for x in args.ks.split(","))
    except ValueError:
        raise _UsageError("--ks expects a comma list of integers") from None
    means = oracle_study(model, scenarios, labels=labels, ks=ks,
                         version=cfg.inference.version,
                         use_teacher=cfg.inference.use_teacher,
                         eval_cfg=cfg.evaluator)
    rows = [(k, "%.2f" % means[k]) for k in ks]
    base = os.path.join(_outdir(args), "oracle")
    _emit(("K", "best-in-top-K"), rows, base)
    return 0


def _cmd_split_eval(args) -> int:
    from .harness import split_eval

    cfg = _load_config(args)
    _, scenarios, labels = _load_split(args, cfg)
    model = _load_model(args, cfg)
    reports = split_eval(model, scenarios, labels=labels,
                         version=cfg.inference.version,
                         use_teacher=cfg.inference.use_teacher,
                         eval_cfg=cfg.evaluator)
    rows = []
    for name in ("left", "forward", "right"):
        rep = reports[name]
        rows.append((name, 0 if rep is None else rep.n_scenarios,
                     "-" if rep is None else "%.2f" % rep.aggregate_mean))
    base = os.path.join(_outdir(args), "splits")
    _emit(("bucket", "scenarios", "aggregate"), rows, base)
    return 0


def _cmd_dist_hist(args) -> int:
    from . import evaluator
    from .harness import (heading_histogram, kl_to_uniform,
                          rotation_augmented_labels)

    cfg = _load_config(args)
    _, scenarios, labels = _load_split(args, cfg)
    vocab = _vocab(cfg)
    if labels is None:
        labels = [evaluator.label_vocabulary(s, vocab, cfg.evaluator)
                  for s in scenarios]
    pooled = rotation_augmented_labels(scenarios, vocab, seed=args.seed,
                                       theta=cfg.planner.theta,
                                       copies=args.copies,
                                       eval_cfg=cfg.evaluator)
    version = cfg.inference.version
    orig = heading_histogram(labels, vocab, bins=args.bins, version=version)
    aug = heading_histogram(pooled, vocab, bins=args.bins, version=version)
    kl_o, kl_a = kl_to_uniform(orig["counts"]), kl_to_uniform(aug["counts"])
    rows = [
        ("original", "%.4f" % kl_o, " ".join(str(c) for c in orig["counts"])),
        ("augmented", "%.4f" % kl_a, " ".join(str(c) for c in aug["counts"])),
    ]
    base = os.path.join(_outdir(args), "dist-hist")
    _emit(("labeling", "KL-to-uniform", "bin counts"), rows, base)
    if args.plots:
        from .harness import svg_bars

        svg = svg_bars(list(aug["frequencies"]),
                       title="augmented final-heading frequencies")
        with open(base + ".svg", "w", encoding="utf-8") as fh:
            fh.write(svg)
    return 0


def _cmd_fov_sweep(args) -> int:
    from .harness import fov_sweep

    cfg = _load_config(args)
    _, scenarios, labels = _load_split(args, cfg)
    model = _load_model(args, cfg) if args.checkpoint else None
    rows_raw = fov_sweep(scenarios, model=model, labels=labels,
                         version=cfg.inference.version,
                         use_teacher=cfg.inference.use_teacher)
    rows = [(r["cameras"], "%.3f" % r["fov_halfangle"],
             "%.1f" % r["mean_tokens"],
             "-" if r["score"] is None else "%.2f" % r["score"])
            for r in rows_raw]
    base = os.path.join(_outdir(args), "fov-sweep")
    _emit(("cameras", "halfangle", "tokens", "score"), rows, base)
    return 0


def _cmd_infer(args) -> int:
    from .planner import infer

    cfg = _load_config(args)
    _, scenarios, _ = _load_split(args, cfg)
    if not 0 <= args.index < len(scenarios):
        raise _UsageError("--index outside the split (%d scenarios)"
                          % len(scenarios))
    model = _load_model(args, cfg)
    res = infer(model, scenarios[args.index],
                use_teacher=cfg.inference.use_teacher)
    vocab = model.vocabulary
    ik, iv, _ = vocab.grid_index(res.selected)
    print("scenario %d: entry %d  kappa=%+.4f  target_v=%.2f"
          % (args.index, res.selected, vocab.kappas[ik], vocab.speeds[iv]))
    table = res.refine_tables[-1] if res.refine_tables else res.coarse_table
    pos = (list(res.topk).index(res.selected)
           if res.topk is not None else res.selected)
    print("predicted subscores: "
          + "  ".join("%s=%.3f" % (m, table[m][pos]) for m in table))
    return 0


def cli(argv=None) -> int:
    """Run one command; returns the process exit code."""
    try:
        _cap_threads()
        parser = _build_parser()
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            raise _UsageError(parser.format_usage().rstrip()
                              + "\na subcommand is required")
        return args.func(args)
    except _UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as e:  # runtime failures map to one exit code
        print("error: %s" % e, file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
