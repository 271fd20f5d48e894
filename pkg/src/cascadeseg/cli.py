"""Command-line entry point.

Verbs: gen (benchmark), train (one method end to end), eval (checkpoint x
strategy x mode), analyze (forgetting reports), report (aggregate tables).
"""

import argparse
import os
import sys
import numpy as np

from . import fileio, forgetting, synthgen, trainer, experiment
from .experiment import ExperimentConfig
from .model import Backbone, CascadeModel
from .params import ParameterStore


def _load_experiment_config(args):
    values = {}
    if getattr(args, "config", None):
        values.update(fileio.load_config(args.config))
    cfg = ExperimentConfig.from_flat(values)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "method", None):
        cfg.method = args.method
    return cfg


def cmd_gen(args):
    cfg = _load_experiment_config(args)
    stream = synthgen.generate_benchmark(cfg.benchmark_config())
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "benchmark.txt"), "w") as f:
        f.write(synthgen.describe(stream))
    for task in stream.tasks:
        for j, i in enumerate(task.train_ids):
            fileio.save_label_map(
                os.path.join(args.out, f"task{task.index}_train{j}.lbl"),
                task.train_labels[j], cfg.num_classes)
    print(f"benchmark written to {args.out} "
          f"({len(stream.tasks)} tasks, seed {cfg.seed})")
    return 0


def cmd_train(args):
    cfg = _load_experiment_config(args)
    artifacts = experiment.run_experiment(cfg, args.out)
    failed = os.path.exists(os.path.join(args.out, "failure.txt"))
    print(f"run complete: outputs in {args.out} "
          f"(config checksum {artifacts['checksum'][:12]})")
    if failed:
        print("one or more stages failed; see failure.txt", file=sys.stderr)
        return 1
    return 0


def _rebuild_cascade(checkpoint, cfg):
    store = ParameterStore.load(checkpoint)
    model_cfg = cfg.model_config()
    backbone = Backbone(model_cfg)
    model = CascadeModel(store, model_cfg)
    classes = sorted({int(n.split("/")[1][1:]) for n in store.order
                      if n.startswith("router/")})
    for c in classes:
        model.class_task[c] = store.blocks[f"router/c{c}/w"].task
        model.class_order.append(c)
    model.class_order.sort(key=lambda c: (model.class_task[c], c))
    return store, backbone, model


def cmd_eval(args):
    cfg = _load_experiment_config(args)
    stream = synthgen.generate_benchmark(cfg.benchmark_config())
    store, backbone, model = _rebuild_cascade(args.checkpoint, cfg)
    upto = max(store.blocks[n].task for n in store.order)
    ev = experiment.evaluate_cascade(store, backbone, model, stream, upto,
                                     alpha=cfg.alpha,
                                     include_background=cfg.include_background,
                                     run_seed=cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for (strategy, mode), res in sorted(ev["miou"].items()):
        print(f"{strategy:12s} {mode:18s} all-mIoU {res['mean']:.4f}")
        for g, v in res["groups"].items():
            rows.append({"method": cfg.method, "checkpoint": upto,
                         "strategy": strategy, "mode": mode, "group": g,
                         "value": v})
    if ev["phase1"]:
        print("phase1:", {k: round(v, 4) for k, v in ev["phase1"].items()})
    fileio.write_metrics_csv(os.path.join(args.out, "eval_metrics.csv"), rows)
    return 0


def cmd_analyze(args):
    cfg = _load_experiment_config(args)
    stream = synthgen.generate_benchmark(cfg.benchmark_config())
    store, backbone, model = _rebuild_cascade(args.checkpoint, cfg)
    report, _ = experiment.analyze_spi_run(
        store, backbone, model, stream, cfg.loss_config(),
        with_hessians=not args.no_hessians, hess_images=args.hess_images)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "forgetting_report.txt")
    fileio.write_forgetting_report(path, report)
    print(f"forgetting report written to {path} ({len(report.rows)} rows)")
    return 0


def cmd_report(args):
    rows = []
    for d in args.runs:
        path = os.path.join(d, "metrics.csv")
        if not os.path.exists(path):
            print(f"skipping {d}: no metrics.csv", file=sys.stderr)
            continue
        rows.extend(fileio.read_metrics_csv(path))
    groups = {}
    for row in rows:
        key = (row.get("method"), row.get("strategy"), row.get("mode"),
               row.get("group"))
        if row.get("value"):
            groups[key] = float(row["value"])
    for (method, strategy, mode, group), value in sorted(
            groups.items(), key=lambda kv: tuple(str(x) for x in kv[0])):
        print(f"{method or '-':8s} {strategy or '-':12s} {mode or '-':18s} "
              f"{group or '-':16s} {value:.4f}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="cascadeseg",
        description="Desk-scale class-incremental segmentation laboratory")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen", help="generate a synthetic benchmark")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train one method end to end")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--method", choices=experiment.METHODS)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--config")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("analyze", help="forgetting-theory analysis of a run")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.add_argument("--no-hessians", action="store_true")
    a.add_argument("--hess-images", type=int, default=20)
    a.set_defaults(fn=cmd_analyze)

    r = sub.add_parser("report", help="aggregate metrics across runs")
    r.add_argument("runs", nargs="+")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
