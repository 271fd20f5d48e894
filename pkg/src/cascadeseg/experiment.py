"""Experiment orchestration: configuration, end-to-end runs, checkpoint
evaluation across fusion strategies and inference modes, per-task forgetting
curves, and the forgetting-theory analysis of a trained run."""

import os
import traceback
import numpy as np
from dataclasses import dataclass, asdict

from . import fileio, forgetting, inference, metrics, synthgen, trainer
from .model import Backbone, CascadeModel, ModelConfig, MonolithicBaseline
from .params import ParameterStore, Layout
from .losses import LossConfig
from .trainer import TrainSchedule


METHODS = ("spi", "joint", "naive", "ogm")


class ExperimentError(Exception):
    pass


@dataclass
class ExperimentConfig:
    # benchmark
    seed: int = 0
    grid: int = 32
    num_classes: int = 10
    first_task_classes: int = 2
    new_classes_per_task: int = 2
    images_per_task: int = 200
    shapes_per_image: int = 3
    overlap_frac: float = 0.5
    distractors: int = 4
    distractor_radius_lo: float = 1.5
    distractor_radius_hi: float = 2.5
    shape_radius_lo: float = 6.0
    shape_radius_hi: float = 10.0
    # model
    backbone_c1: int = 32
    backbone_c2: int = 16
    head_channels: int = 8
    # schedule
    epochs: int = 25
    phase1_epochs: int = 1
    batch_size: int = 20
    lr: float = 5e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    optimizer: str = "adam"
    eps_conv: float = 1e-3
    refine_steps: int = 60
    router_polish_steps: int = 3000
    router_polish_lr: float = 0.05
    near_ood_ratio: float = 1.0
    # losses
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    seg_alpha: float = 1.0
    seg_beta: float = 1.0
    combine_lambda: float = 1.0
    dice_eps: float = 1e-6
    # inference / evaluation
    alpha: float = 0.5
    strategy: str = "logits"
    mode: str = "full"
    bg_mode: str = "product"
    include_background: bool = True
    # lifecycle
    method: str = "spi"
    parallel_heads: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ExperimentError(f"unknown method {self.method!r}; choose "
                                  f"one of {METHODS}")

    def benchmark_config(self):
        return synthgen.BenchmarkConfig(
            seed=self.seed, grid=self.grid, num_classes=self.num_classes,
            first_task_classes=self.first_task_classes,
            new_classes_per_task=self.new_classes_per_task,
            images_per_task=self.images_per_task,
            shapes_per_image=self.shapes_per_image,
            overlap_frac=self.overlap_frac, distractors=self.distractors,
            distractor_radius=(self.distractor_radius_lo,
                               self.distractor_radius_hi),
            shape_radius=(self.shape_radius_lo, self.shape_radius_hi))

    def model_config(self):
        return ModelConfig(grid=self.grid,
                           backbone_channels=(self.backbone_c1,
                                              self.backbone_c2),
                           head_channels=self.head_channels, seed=self.seed)

    def schedule(self):
        return TrainSchedule(
            epochs=self.epochs, phase1_epochs=self.phase1_epochs,
            batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
            weight_decay=self.weight_decay, optimizer=self.optimizer,
            eps_conv=self.eps_conv, refine_steps=self.refine_steps,
            router_polish_steps=self.router_polish_steps,
            router_polish_lr=self.router_polish_lr,
            near_ood_ratio=self.near_ood_ratio, seed=self.seed)

    def loss_config(self):
        return LossConfig(focal_alpha=self.focal_alpha,
                          focal_gamma=self.focal_gamma,
                          seg_alpha=self.seg_alpha, seg_beta=self.seg_beta,
                          combine_lambda=self.combine_lambda,
                          dice_eps=self.dice_eps)

    def to_flat(self):
        return {k: v for k, v in asdict(self).items()}

    @classmethod
    def from_flat(cls, values):
        kwargs = {}
        defaults = cls()
        for key, raw in values.items():
            if not hasattr(defaults, key):
                raise ExperimentError(f"unknown config key {key!r}")
            cur = getattr(defaults, key)
            if isinstance(cur, bool):
                kwargs[key] = str(raw).lower() in ("1", "true", "yes")
            elif isinstance(cur, int):
                kwargs[key] = int(raw)
            elif isinstance(cur, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = str(raw)
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# training drivers


def train_spi_stream(stream, model_cfg, schedule, loss_cfg, parallel=False,
                     violate_block=None, upto=None):
    store, backbone, model = trainer.build_cascade(model_cfg)
    records = []
    for t in range(1, (upto or len(stream.tasks)) + 1):
        records.append(trainer.train_task_spi(
            store, backbone, model, stream, t, schedule, loss_cfg,
            violate_block=violate_block, parallel=parallel))
    return store, backbone, model, records


def train_baseline_stream(stream, model_cfg, schedule, method, upto=None,
                          after_task=None):
    store = ParameterStore()
    backbone = Backbone(model_cfg)
    backbone.init_blocks(store)
    from .model import pretrain_backbone
    pretrain_backbone(store, model_cfg)
    baseline = MonolithicBaseline(store, model_cfg)
    records, dirs = [], []
    for t in range(1, (upto or len(stream.tasks)) + 1):
        records.append(trainer.train_task_baseline(
            store, backbone, baseline, stream, t, schedule, method=method,
            stored_dirs=list(dirs) if method == "ogm" else None))
        if method == "ogm":
            dirs.extend(trainer.collect_output_gradient_dirs(
                store, backbone, baseline, stream, t, seed=schedule.seed))
        if after_task is not None:
            after_task(t, store, backbone, baseline)
    return store, backbone, baseline, records, dirs


# ---------------------------------------------------------------------------
# evaluation


def _val_set(stream, upto_t):
    images = np.concatenate([stream.tasks[i].val_images for i in range(upto_t)])
    labels = np.concatenate([stream.tasks[i].val_labels_full
                             for i in range(upto_t)])
    ids = [i for t in range(upto_t) for i in stream.tasks[t].val_ids]
    return images, labels, ids


def cascade_raw(store, backbone, model, images, alpha, mode,
                truth_presence=None, top_k=None):
    """Shared heavy lifting for all strategies: route once, segment once."""
    learned = model.learned_classes()
    feats = backbone.features(store, images)
    n = images.shape[0]
    ex = None
    if mode in ("full", "segmentation-only"):
        ex = model.route(feats)
    if mode == "full":
        active = np.stack([inference.predicted_set(ex[i], alpha, top_k)
                           for i in range(n)])
    elif mode == "segmentation-only":
        active = np.ones((n, len(learned)), dtype=bool)
    elif mode == "oracle":
        if truth_presence is None:
            raise ExperimentError("oracle mode requires presence truth")
        active = np.asarray(truth_presence, dtype=bool)
    else:
        raise ExperimentError(f"unknown inference mode {mode!r}")
    H, W = images.shape[2:]
    fg = np.zeros((n, len(learned), H, W))
    for j, c in enumerate(learned):
        idx = np.nonzero(active[:, j])[0]
        if idx.size:
            fg[idx, j] = model.segment(feats[idx], c)[:, 1]
    return learned, ex, active, fg


def fused_maps(learned, active, fg, strategy, truth=None, run_seed=0,
               image_ids=None):
    n = active.shape[0]
    labels = []
    claims_list = []
    for i in range(n):
        jdx = np.nonzero(active[i])[0]
        cls = [learned[j] for j in jdx]
        fgi = fg[i, jdx]
        claims = fgi > 0.5
        rng = None
        if strategy == "random":
            iid = i if image_ids is None else int(image_ids[i])
            rng = np.random.default_rng(np.random.SeedSequence([run_seed, iid]))
        labels.append(inference.fuse(cls, claims, fgi, strategy, rng=rng,
                                     truth=None if truth is None else truth[i]))
        claims_list.append({c: claims[k] for k, c in enumerate(cls)})
    return np.stack(labels) if labels else np.zeros((0,)), claims_list


def evaluate_cascade(store, backbone, model, stream, upto_t, alpha=0.5,
                     strategies=inference.STRATEGIES,
                     modes=("full", "segmentation-only", "oracle"),
                     include_background=True, run_seed=0):
    """Fused-map mIoU per (strategy, mode) plus existence metrics, over the
    pooled validation splits of tasks 1..upto_t."""
    images, labels_full, ids = _val_set(stream, upto_t)
    learned = model.learned_classes()
    truth = synthgen.apply_background_shift(labels_full, learned)
    presence = synthgen.presence_bits(labels_full, learned)

    out = {"miou": {}, "phase1": None}
    for mode in modes:
        raw = cascade_raw(store, backbone, model, images, alpha, mode,
                          truth_presence=presence)
        learned_m, ex, active, fg = raw
        if mode == "full" and ex is not None:
            out["phase1"] = metrics.phase1_metrics(ex, presence, alpha)
        for strategy in strategies:
            preds, claims = fused_maps(learned_m, active, fg, strategy,
                                       truth=truth if strategy == "loose"
                                       else None, run_seed=run_seed,
                                       image_ids=ids)
            per_class, mean = metrics.miou(preds, truth, learned,
                                           include_background)
            groups = metrics.group_miou(per_class, stream.tasks[0].classes,
                                        [c for t in stream.tasks[1:upto_t]
                                         for c in t.classes])
            out["miou"][(strategy, mode)] = {"per_class": per_class,
                                             "mean": mean, "groups": groups,
                                             "claims": claims, "preds": preds}
    return out


def per_task_row_cascade(store, backbone, model, stream, tau):
    """mIoU of task tau's classes from their heads' raw binary claims on task
    tau's validation split (router-independent, so isolated rows are exactly
    constant across checkpoints)."""
    task = stream.tasks[tau - 1]
    feats = backbone.features(store, task.val_images)
    ious = []
    for c in task.classes:
        fgm = model.segment(feats, c)[:, 1]
        pred = (fgm > 0.5).astype(np.int64) * c
        per_class, _ = metrics.miou(pred, (task.val_labels_full == c) * c,
                                    [c], include_background=False)
        ious.append(per_class.get(c, 0.0))
    return float(np.mean(ious))


def per_task_row_baseline(store, backbone, baseline, stream, tau):
    task = stream.tasks[tau - 1]
    feats = backbone.features(store, task.val_images)
    preds = baseline.predict_labels(feats)
    per_class, _ = metrics.miou(preds, task.val_labels_full, task.classes,
                                include_background=False)
    vals = [per_class.get(c, 0.0) for c in task.classes]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# forgetting analysis of a trained run


def head_layout(store, include_shared=False):
    names = [n for n in store.order
             if n.startswith(("router/", "seg/"))
             or (include_shared and n.startswith("shared/conv2"))]
    return Layout(store, names)


def padded_snapshot(store, tau):
    """Snapshot vector padded to the current store size; padding coordinates
    belong to blocks that did not exist at time tau."""
    snap = store.get_snapshot(tau)
    out = store.vector.copy()
    out[:snap.size] = snap
    return out


def analyze_spi_run(store, backbone, model, stream, loss_cfg,
                    include_shared=False, hess_images=20, hess_step=1e-4,
                    with_hessians=True, hess_limit=forgetting.HESSIAN_INDEX_LIMIT):
    """Forgetting report for an isolated (or deliberately violated) run:
    exact forgetting rates plus measured Hessian structure over the full
    trainable layout."""
    n_tasks = len(store.snapshots)
    layout = head_layout(store, include_shared)
    val_fns = []
    for tau in range(1, n_tasks + 1):
        lf, _ = trainer.spi_task_objective(store, backbone, model, stream, tau,
                                           loss_cfg, layout, split="val",
                                           shared_violation=include_shared)
        val_fns.append(lf)
    packed = [layout.pack(padded_snapshot(store, tau))
              for tau in range(1, n_tasks + 1)]

    hessians = []
    if with_hessians:
        for tau in range(1, n_tasks + 1):
            _, gf = trainer.spi_task_objective(
                store, backbone, model, stream, tau, loss_cfg, layout,
                n_images=hess_images, shared_violation=include_shared)
            hessians.append(forgetting.hessian(gf, packed[tau - 1],
                                               step=hess_step,
                                               limit=hess_limit))

    report = forgetting.ForgettingReport(
        method="spi-violated" if include_shared else "spi")
    rates = {}
    for t in range(1, n_tasks + 1):
        for tau in range(1, t):
            rate = forgetting.forgetting_rate(val_fns[tau - 1], packed[t - 1],
                                              packed[tau - 1])
            rates[(tau, t)] = rate
            row = {"tau": tau, "t": t, "forgetting_rate": rate}
            if with_hessians:
                est = hessians[tau - 1]
                row["off_block_max"] = forgetting.block_structure_check(
                    est, layout, tau)
                row["min_eig"] = est.min_eig
            report.add(**row)
        if t >= 2:
            avg = forgetting.average_forgetting(
                {tau: rates[(tau, t)] for tau in range(1, t)}, t)
            row = {"t": t, "avg_forgetting": avg}
            if with_hessians:
                delta = packed[t - 1] - packed[t - 2]
                row["quad_term"] = forgetting.quadratic_term(
                    delta, hessians[:t - 1], layout.size)
                v = forgetting.v_vector(packed, hessians, t, layout.size)
                row["v_dot_delta"] = float(v @ delta)
            report.add(**row)
    return report, {"layout": layout, "packed": packed, "hessians": hessians,
                    "val_fns": val_fns, "rates": rates}


# ---------------------------------------------------------------------------
# end-to-end experiment


def run_experiment(config, out_dir):
    """Full pipeline: generate, train, evaluate, analyze, report.

    Stage failures are recorded in a failure manifest; completed stages keep
    their outputs on disk.
    """
    os.makedirs(out_dir, exist_ok=True)
    flat = config.to_flat()
    checksum = fileio.config_checksum(flat)
    fileio.save_config(os.path.join(out_dir, "config.txt"), flat)
    stages = []
    artifacts = {"checksum": checksum}

    def manifest():
        with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
            f.write(f"config_checksum = {checksum}\n")
            for name, status in stages:
                f.write(f"stage {name} = {status}\n")

    def fail(stage, exc):
        stages.append((stage, f"failed: {exc}"))
        with open(os.path.join(out_dir, "failure.txt"), "w") as f:
            f.write(f"stage = {stage}\n")
            f.write(traceback.format_exc())
        manifest()
        return artifacts

    try:
        stream = synthgen.generate_benchmark(config.benchmark_config())
        with open(os.path.join(out_dir, "benchmark.txt"), "w") as f:
            f.write(synthgen.describe(stream))
        stages.append(("gen", "ok"))
    except Exception as exc:
        return fail("gen", exc)

    model_cfg = config.model_config()
    schedule = config.schedule()
    loss_cfg = config.loss_config()
    try:
        curve_entries = {}
        if config.method == "spi":
            store, backbone, model = trainer.build_cascade(model_cfg)
            records = []
            for t in range(1, len(stream.tasks) + 1):
                records.append(trainer.train_task_spi(
                    store, backbone, model, stream, t, schedule, loss_cfg,
                    parallel=config.parallel_heads))
                store.save(os.path.join(out_dir, f"checkpoint_task{t}.ckpt"))
                for tau in range(1, t + 1):
                    curve_entries[(tau, t)] = per_task_row_cascade(
                        store, backbone, model, stream, tau)
            artifacts["model"] = (store, backbone, model)
        elif config.method == "joint":
            store, backbone, model, record = trainer.train_joint(
                stream, model_cfg, schedule, loss_cfg)
            records = [record]
            store.save(os.path.join(out_dir, "checkpoint_joint.ckpt"))
            artifacts["model"] = (store, backbone, model)
        else:
            def after_task(t, st, bb, bl):
                for tau in range(1, t + 1):
                    curve_entries[(tau, t)] = per_task_row_baseline(
                        st, bb, bl, stream, tau)
            store, backbone, baseline, records, dirs = train_baseline_stream(
                stream, model_cfg, schedule, config.method,
                after_task=after_task)
            store.save(os.path.join(out_dir, "checkpoint_baseline.ckpt"))
            artifacts["model"] = (store, backbone, baseline)
            artifacts["ogm_dirs"] = dirs
        for i, rec in enumerate(records, start=1):
            fileio.write_run_record(
                os.path.join(out_dir, f"run_record_{i}.txt"), rec)
        artifacts["records"] = records
        stages.append(("train", "ok"))
    except Exception as exc:
        return fail("train", exc)

    try:
        rows = []
        if config.method in ("spi", "joint"):
            upto = len(stream.tasks)
            ev = evaluate_cascade(store, backbone, model, stream, upto,
                                  alpha=config.alpha,
                                  include_background=config.include_background,
                                  run_seed=config.seed)
            for (strategy, mode), res in sorted(ev["miou"].items()):
                for c, iou in sorted(res["per_class"].items()):
                    rows.append({"method": config.method, "checkpoint": upto,
                                 "strategy": strategy, "mode": mode,
                                 "class_id": c, "iou": iou})
                for g, v in res["groups"].items():
                    rows.append({"method": config.method, "checkpoint": upto,
                                 "strategy": strategy, "mode": mode,
                                 "group": g, "value": v})
            if ev["phase1"]:
                for k, v in ev["phase1"].items():
                    rows.append({"method": config.method, "checkpoint": upto,
                                 "mode": "full", "group": f"phase1_{k}",
                                 "value": v})
            artifacts["evaluation"] = ev
        else:
            for tau in range(1, len(stream.tasks) + 1):
                val = per_task_row_baseline(store, backbone, baseline, stream,
                                            tau)
                curve_entries[(tau, len(stream.tasks))] = val
                rows.append({"method": config.method,
                             "checkpoint": len(stream.tasks),
                             "group": f"task{tau}_miou", "value": val})
        fileio.write_metrics_csv(os.path.join(out_dir, "metrics.csv"), rows)
        if curve_entries:
            fileio.write_series(
                os.path.join(out_dir, "curve.csv"),
                [(f"{lt}:{et}", v, "per_task_miou")
                 for (lt, et), v in sorted(curve_entries.items())])
            artifacts["curve"] = curve_entries
        stages.append(("eval", "ok"))
    except Exception as exc:
        return fail("eval", exc)

    manifest()
    artifacts["stream"] = stream
    return artifacts
