"""Training lifecycles.

Covers the isolated continual method (frozen past blocks, per-class heads
trained separately), joint training as the upper bound, naive fine-tuning of
the monolithic baseline as the forgetting witness, and orthogonal-gradient
projection on the same baseline. Also builds the per-task loss closures used
by the forgetting lab's Hessian probes.
"""

import time
import numpy as np
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor

from . import autodiff as ad
from . import losses as L
from . import synthgen
from .model import (Backbone, CascadeModel, MonolithicBaseline, ParamPack,
                    pretrain_backbone)
from .params import ParameterStore, Layout


class TrainerError(Exception):
    pass


@dataclass
class TrainSchedule:
    epochs: int = 30
    phase1_epochs: int = 1        # router-only warmup epochs
    batch_size: int = 20
    lr: float = 5e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    optimizer: str = "sgd-momentum"
    lr_decay: str = "cosine"
    eps_conv: float = 1e-3        # inf-norm gradient tolerance at snapshot
    refine_steps: int = 60        # full-batch polish steps after the schedule
    router_polish_steps: int = 3000   # full-batch adam steps for each router
    router_polish_lr: float = 0.05
    near_ood_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.phase1_epochs > self.epochs:
            raise TrainerError("phase1_epochs cannot exceed total epochs")


@dataclass
class EpochLog:
    task: int
    epoch: int
    phase: str
    loss: float


@dataclass
class RunRecord:
    task: int
    method: str
    epochs: list = field(default_factory=list)
    grad_inf_at_snapshot: float = np.inf
    converged: bool = False
    wall_time: float = 0.0
    warnings: list = field(default_factory=list)
    updates: list = None          # per-step update vectors (baseline methods)


def epoch_lr(schedule, epoch):
    if schedule.lr_decay == "cosine":
        return schedule.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / schedule.epochs))
    return schedule.lr


def _make_opt(schedule, weight_decay=None):
    wd = schedule.weight_decay if weight_decay is None else weight_decay
    return ad.OptimizerState(kind=schedule.optimizer, lr=schedule.lr,
                             momentum=schedule.momentum, weight_decay=wd)


_FG_SEL = np.array([0.0, 1.0]).reshape(1, 2, 1, 1)


def fg_channel(probs):
    """Select the foreground channel of a (B, 2, H, W) probability tensor."""
    return ad.tsum(probs * _FG_SEL, axis=1)


def polish(loss_fn, grad_fn, theta, tol, max_steps, lr0=1.0):
    """Full-batch backtracking gradient descent toward a stationary point."""
    theta = np.asarray(theta, dtype=np.float64).copy()
    g = grad_fn(theta)
    for _ in range(max_steps):
        gi = np.abs(g).max()
        if gi <= tol:
            break
        f0 = loss_fn(theta)
        lr = lr0
        accepted = None
        while lr > 1e-13:
            cand = theta - lr * g
            if loss_fn(cand) < f0:
                accepted = cand
                break
            lr *= 0.5
        if accepted is None:
            break
        theta = accepted
        g = grad_fn(theta)
    return theta, float(np.abs(g).max())


# ---------------------------------------------------------------------------
# per-head training jobs (disjoint parameter blocks; parallel-safe)


def _head_rng(schedule, t, c, salt):
    return np.random.default_rng(
        np.random.SeedSequence([schedule.seed, t, c, salt]))


def _train_router_head(store, model, gap, presence_c, t, c, schedule):
    """Train one class's existence router on pooled features."""
    names = model.router_blocks(c)
    shapes = model.block_shapes(c)
    pack = ParamPack({n: store.get(n).reshape(shapes[n]) for n in names})
    targets = presence_c.reshape(-1, 1)

    def build(vec, idx):
        tape = ad.Tape()
        leaves = {n: ad.leaf(vec[sl].reshape(shapes[n]), tape, name=n)
                  for n, sl in pack.slices.items()}
        p = model.router_graph(tape, gap[idx], leaves, c)
        loss = L.bce_multilabel(ad.reshape(p, (-1, 1)), targets[idx])
        return loss, leaves

    opt = _make_opt(schedule)
    rng = _head_rng(schedule, t, c, 1)
    n = gap.shape[0]
    logs = []
    for e in range(schedule.epochs):
        opt.lr = epoch_lr(schedule, e)
        order = rng.permutation(n)
        ep_loss = []
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            loss, leaves = build(pack.vector, idx)
            ad.backward(loss)
            pack.vector = ad.step(opt, pack.vector, pack.grad_vector(leaves))
            ep_loss.append(float(loss.data))
            ad.release(loss)
        logs.append(EpochLog(t, e + 1, "router", float(np.mean(ep_loss))))

    # the router is tiny (one linear map on pooled features), so a long
    # full-batch refinement is cheap and drives it to the margin-maximizing
    # boundary; minibatch epochs alone leave the threshold badly calibrated
    full = np.arange(n)
    opt_fb = ad.OptimizerState(kind="adam", lr=schedule.router_polish_lr,
                               momentum=0.9,
                               weight_decay=schedule.weight_decay)
    for _ in range(schedule.router_polish_steps):
        loss, leaves = build(pack.vector, full)
        ad.backward(loss)
        pack.vector = ad.step(opt_fb, pack.vector, pack.grad_vector(leaves))
        ad.release(loss)

    pack.vector, grad_inf = polish(
        lambda v: _loss_of(build, v, full),
        lambda v: _grad_of(build, v, full, pack),
        pack.vector, schedule.eps_conv, schedule.refine_steps)
    pack.write_to_store(store, names)
    return logs, grad_inf


def _grad_of(build, vec, idx, pack):
    loss, leaves = build(vec, idx)
    ad.backward(loss)
    g = pack.grad_vector(leaves)
    ad.release(loss)
    return g


def _loss_of(build, vec, idx):
    loss, _ = build(vec, idx)
    val = float(loss.data)
    ad.release(loss)
    return val


def _train_seg_head(store, model, backbone, feats, h1, labels, indices, t, c,
                    schedule, loss_cfg, violate_blocks=()):
    """Train one class's binary segmenter on its positive + near-OOD images.

    With violate_blocks nonempty, the listed shared backbone blocks join the
    trainable set and features are recomputed in-graph (the freeze-violation
    probe); otherwise features are frozen constants.
    """
    names = list(model.segmenter_blocks(c)) + list(violate_blocks)
    shapes = dict(model.block_shapes(c))
    for n in violate_blocks:
        shapes[n] = backbone.shapes[n]
    pack = ParamPack({n: store.get(n).reshape(shapes[n]) for n in names})
    target_fg = (labels == c).astype(np.float64)

    def build(vec, idx):
        tape = ad.Tape()
        leaves = {n: ad.leaf(vec[sl].reshape(shapes[n]), tape, name=n)
                  for n, sl in pack.slices.items()}
        if violate_blocks:
            f = backbone.stage2_graph(tape, h1[idx],
                                      leaves["shared/conv2_w"],
                                      leaves["shared/conv2_b"])
        else:
            f = feats[idx]
        probs = model.segmenter_graph(tape, f, leaves, c)
        loss = L.seg_loss(target_fg[idx], fg_channel(probs), loss_cfg)
        return loss, leaves

    opt = _make_opt(schedule)
    rng = _head_rng(schedule, t, c, 2)
    idx_all = np.asarray(indices)
    logs = []
    seg_epochs = schedule.epochs - schedule.phase1_epochs
    for e in range(seg_epochs):
        opt.lr = epoch_lr(schedule, e + schedule.phase1_epochs)
        order = idx_all[rng.permutation(idx_all.size)]
        ep_loss = []
        for start in range(0, order.size, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            loss, leaves = build(pack.vector, idx)
            ad.backward(loss)
            pack.vector = ad.step(opt, pack.vector, pack.grad_vector(leaves))
            ep_loss.append(float(loss.data))
            ad.release(loss)
        logs.append(EpochLog(t, e + 1 + schedule.phase1_epochs, "segmenter",
                             float(np.mean(ep_loss))))

    pack.vector, grad_inf = polish(
        lambda v: _loss_of(build, v, idx_all),
        lambda v: _grad_of(build, v, idx_all, pack),
        pack.vector, schedule.eps_conv, schedule.refine_steps)
    pack.write_to_store(store, names)
    return logs, grad_inf


# ---------------------------------------------------------------------------
# continual training with strict isolation


def train_task_spi(store, backbone, model, stream, t, schedule, loss_cfg,
                   violate_block=None, parallel=False):
    """Train task t's new heads only; all earlier blocks stay frozen.

    violate_block names a shared backbone block to deliberately unfreeze
    (qualitative freeze-violation experiment); parallel trains the per-class
    head jobs on threads, bit-identically to sequential order.
    """
    t0 = time.perf_counter()
    # validate before instantiating anything so a rejected call leaves the
    # store untouched
    if violate_block is not None:
        if violate_block not in ("shared/conv2_w",):
            raise TrainerError(f"unsupported violation block {violate_block!r}")
        if parallel:
            raise TrainerError("freeze violation shares mutable state; "
                               "parallel head training is disallowed")
    task = stream.tasks[t - 1]
    model.instantiate_task(t, task.classes, stream.config.seed)

    violate_blocks = ()
    if violate_block is not None:
        store.unfreeze("shared/conv2_w")
        store.unfreeze("shared/conv2_b")
        violate_blocks = ("shared/conv2_w", "shared/conv2_b")

    h1 = backbone.stage1(store, task.train_images) if violate_blocks else None
    feats = backbone.features(store, task.train_images)
    gap = np.log1p(feats.sum(axis=(2, 3)))
    presence = synthgen.presence_bits(task.train_labels, task.classes)

    seg_indices = {}
    for c in task.classes:
        pos = np.nonzero((task.train_labels == c).any(axis=(1, 2)))[0]
        ood = synthgen.build_near_ood(stream, t, c, schedule.near_ood_ratio)
        seg_indices[c] = np.concatenate([pos, [p.image_index for p in ood]])

    def job(c):
        j = task.classes.index(c)
        r_logs, r_grad = _train_router_head(store, model, gap, presence[:, j],
                                            t, c, schedule)
        s_logs, s_grad = _train_seg_head(store, model, backbone, feats, h1,
                                         task.train_labels, seg_indices[c], t,
                                         c, schedule, loss_cfg, violate_blocks)
        return c, r_logs + s_logs, max(r_grad, s_grad)

    if parallel:
        with ThreadPoolExecutor(max_workers=len(task.classes)) as pool:
            results = list(pool.map(job, task.classes))
    else:
        results = [job(c) for c in task.classes]

    record = RunRecord(task=t, method="spi" if not violate_blocks
                       else "spi-violated")
    grad_inf = 0.0
    for c, logs, g in sorted(results):
        record.epochs.extend(logs)
        grad_inf = max(grad_inf, g)
    record.grad_inf_at_snapshot = grad_inf
    record.converged = grad_inf <= schedule.eps_conv
    if not record.converged:
        record.warnings.append(
            f"task {t}: snapshot gradient inf-norm {grad_inf:.3e} exceeds "
            f"eps_conv {schedule.eps_conv:.1e}; Assumption-1 witness false")

    for name in store.blocks_of_task(t):
        store.freeze(name)
    if violate_blocks:
        for name in violate_blocks:
            store.freeze(name)
    store.snapshot(t)
    record.wall_time = time.perf_counter() - t0
    return record


def build_cascade(model_cfg):
    """Fresh store + pretrained frozen backbone + empty cascade model."""
    store = ParameterStore()
    backbone = Backbone(model_cfg)
    backbone.init_blocks(store)
    pretrain_backbone(store, model_cfg)
    return store, backbone, CascadeModel(store, model_cfg)


def train_joint(stream, model_cfg, schedule, loss_cfg):
    """Upper bound: one model trained on all tasks' data at once."""
    store, backbone, model = build_cascade(model_cfg)
    images = np.concatenate([tk.train_images for tk in stream.tasks])
    labels = np.concatenate([tk.train_labels_full for tk in stream.tasks])
    all_classes = stream.all_classes

    model.instantiate_task(1, all_classes, stream.config.seed)
    feats = backbone.features(store, images)
    gap = np.log1p(feats.sum(axis=(2, 3)))
    presence = synthgen.presence_bits(labels, all_classes)

    record = RunRecord(task=1, method="joint")
    grad_inf = 0.0
    for j, c in enumerate(all_classes):
        r_logs, r_grad = _train_router_head(store, model, gap, presence[:, j],
                                            1, c, schedule)
        pos = np.nonzero(presence[:, j] > 0)[0]
        eligible = presence[:, j] == 0
        tw = synthgen.twin_of(c, stream.config)
        if tw is not None and tw in all_classes:
            # twin pixels look exactly like class c: not valid counter-examples
            eligible &= presence[:, all_classes.index(tw)] == 0
        free = np.nonzero(eligible)[0]
        wanted = min(int(round(schedule.near_ood_ratio * pos.size)), free.size)
        idx = np.concatenate([pos, free[:wanted]])
        s_logs, s_grad = _train_seg_head(store, model, backbone, feats, None,
                                         labels, idx, 1, c, schedule, loss_cfg)
        record.epochs.extend(r_logs + s_logs)
        grad_inf = max(grad_inf, r_grad, s_grad)

    record.grad_inf_at_snapshot = grad_inf
    record.converged = grad_inf <= schedule.eps_conv
    for name in store.blocks_of_task(1):
        store.freeze(name)
    store.snapshot(1)
    return store, backbone, model, record


# ---------------------------------------------------------------------------
# monolithic baseline: naive fine-tuning and orthogonal-gradient projection


def _baseline_batch_loss(baseline, feats, onehot, idx, vec, pack, shapes):
    tape = ad.Tape()
    leaves = {n: ad.leaf(vec[sl].reshape(shapes[n]), tape, name=n)
              for n, sl in pack.slices.items()}
    probs = baseline.forward_graph(tape, feats[idx], leaves)
    logp = ad.log(ad.clip(probs, L.PROB_CLAMP, 1.0))
    loss = -ad.tmean(ad.tsum(logp * onehot[idx], axis=1))
    return loss, leaves


def _baseline_targets(baseline, labels):
    onehot = np.zeros((labels.shape[0], baseline.n_channels) + labels.shape[1:])
    onehot[:, 0] = labels == 0
    for c in baseline.class_order:
        onehot[:, baseline.channel_of_class(c)] = labels == c
    return onehot


def train_task_baseline(store, backbone, baseline, stream, t, schedule,
                        method="naive", stored_dirs=None):
    """Fine-tune the whole monolithic head on task t's shifted labels.

    method="naive" applies raw updates; method="ogm" projects every update to
    be orthogonal to the stored model-output gradient directions.
    """
    t0 = time.perf_counter()
    task = stream.tasks[t - 1]
    if t == 1 and not baseline.out_blocks:
        baseline.init_stem(stream.config.seed)
    baseline.grow(t, task.classes, stream.config.seed)

    feats = backbone.features(store, task.train_images)
    onehot = _baseline_targets(baseline, task.train_labels)
    shapes = baseline.shapes()
    names = baseline.trainable_blocks()
    pack = ParamPack({n: store.get(n).reshape(shapes[n]) for n in names})
    dim = pack.vector.size

    basis = []
    if method == "ogm":
        dirs = [np.pad(d, (0, dim - d.size)) for d in (stored_dirs or [])]
        if len(dirs) >= dim:
            raise TrainerError(f"{len(dirs)} stored directions span the "
                               f"{dim}-dim parameter space; no feasible update")
        for d in dirs:   # Gram-Schmidt
            v = d.copy()
            for b in basis:
                v -= (v @ b) * b
            nv = np.linalg.norm(v)
            if nv > 1e-12:
                basis.append(v / nv)
    elif method != "naive":
        raise TrainerError(f"unknown baseline method {method!r}")

    def project(v):
        for b in basis:
            v = v - (v @ b) * b
        return v

    wd = 0.0 if method == "ogm" else schedule.weight_decay
    momentum_buf = np.zeros(dim)
    rng = _head_rng(schedule, t, 0, 3)
    n = task.train_images.shape[0]
    record = RunRecord(task=t, method=method, updates=[])
    for e in range(schedule.epochs):
        lr = epoch_lr(schedule, e)
        order = rng.permutation(n)
        ep_loss = []
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            loss, leaves = _baseline_batch_loss(baseline, feats, onehot, idx,
                                                pack.vector, pack, shapes)
            ad.backward(loss)
            g = pack.grad_vector(leaves) + wd * pack.vector
            if basis:
                g = project(g)
            momentum_buf = schedule.momentum * momentum_buf + g
            update = project(-lr * momentum_buf) if basis else -lr * momentum_buf
            pack.vector = pack.vector + update
            record.updates.append(update)
            ep_loss.append(float(loss.data))
            ad.release(loss)
        record.epochs.append(EpochLog(t, e + 1, "baseline",
                                      float(np.mean(ep_loss))))

    pack.write_to_store(store, names)
    full = np.arange(n)
    loss, leaves = _baseline_batch_loss(baseline, feats, onehot, full,
                                        pack.vector, pack, shapes)
    ad.backward(loss)
    record.grad_inf_at_snapshot = float(np.abs(pack.grad_vector(leaves)).max())
    ad.release(loss)
    record.converged = record.grad_inf_at_snapshot <= schedule.eps_conv
    store.snapshot(t)
    record.wall_time = time.perf_counter() - t0
    return record


def collect_output_gradient_dirs(store, backbone, baseline, stream, t,
                                 n_dirs=10, seed=0):
    """Model-output gradient directions for task t (for later projection):
    gradients of each class's mean predicted probability on val images."""
    task = stream.tasks[t - 1]
    shapes = baseline.shapes()
    names = baseline.trainable_blocks()
    pack = ParamPack({n: store.get(n).reshape(shapes[n]) for n in names})
    rng = np.random.default_rng(np.random.SeedSequence([seed, t, 4]))
    dirs = []
    for _ in range(n_dirs):
        i = int(rng.integers(0, task.val_images.shape[0]))
        c = task.classes[int(rng.integers(0, len(task.classes)))]
        feats = backbone.features(store, task.val_images[i:i + 1])
        tape = ad.Tape()
        leaves = {n: ad.leaf(pack.vector[sl].reshape(shapes[n]), tape, name=n)
                  for n, sl in pack.slices.items()}
        probs = baseline.forward_graph(tape, feats, leaves)
        sel = np.zeros((1, baseline.n_channels, 1, 1))
        sel[0, baseline.channel_of_class(c), 0, 0] = 1.0
        out = ad.tmean(ad.tsum(probs * sel, axis=1))
        ad.backward(out)
        dirs.append(pack.grad_vector(leaves))
        ad.release(out)
    return dirs


def verify_convergence(grad_inf, eps_conv, min_eig=None, psd_tol=-1e-6):
    """Assumption-1 witness: near-zero gradient and (optionally) PSD Hessian."""
    ok = grad_inf <= eps_conv and (min_eig is None or min_eig >= psd_tol)
    return {"grad_inf": float(grad_inf), "eps_conv": float(eps_conv),
            "min_eig": None if min_eig is None else float(min_eig),
            "assumption_satisfied": bool(ok)}


# ---------------------------------------------------------------------------
# task objective closures for the forgetting lab


def spi_task_objective(store, backbone, model, stream, t, loss_cfg, layout,
                       n_images=None, shared_violation=False, split="train"):
    """Loss/gradient closures for task t's objective over a packed layout.

    The loss depends only on task t's own head blocks (plus the shared blocks
    when shared_violation is set); gradients for every other layout coordinate
    are exact zeros, which is what the block-structure probes measure.
    """
    task = stream.tasks[t - 1]
    if split == "train":
        images, labels = task.train_images, task.train_labels
    else:
        images = task.val_images
        labels = synthgen.apply_background_shift(task.val_labels_full,
                                                 task.classes)
    if n_images is not None:
        images, labels = images[:n_images], labels[:n_images]

    shapes = {}
    for c in task.classes:
        shapes.update(model.block_shapes(c))
    shared = ("shared/conv2_w", "shared/conv2_b") if shared_violation else ()
    for n in shared:
        shapes[n] = backbone.shapes[n]
    active = [n for c in task.classes for n in model.class_blocks(c)]
    active += list(shared)

    h1 = backbone.stage1(store, images) if shared_violation else None
    feats_const = None if shared_violation else backbone.features(store, images)
    presence = synthgen.presence_bits(labels, task.classes)
    targets = {c: (labels == c).astype(np.float64) for c in task.classes}

    def build(vec):
        tape = ad.Tape()
        leaves = {n: ad.leaf(vec[layout.slices[n]].reshape(shapes[n]), tape,
                             name=n) for n in active}
        if shared_violation:
            feats = backbone.stage2_graph(tape, h1, leaves["shared/conv2_w"],
                                          leaves["shared/conv2_b"])
            gap = ad.log(ad.tsum(feats, axis=(2, 3)) + 1.0)
        else:
            feats, gap = feats_const, np.log1p(feats_const.sum(axis=(2, 3)))
        probs = [ad.reshape(model.router_graph(tape, gap, leaves, c), (-1, 1))
                 for c in task.classes]
        cls_loss = L.bce_multilabel(ad.concat(probs, axis=1), presence)
        seg_terms = []
        for c in task.classes:
            seg = model.segmenter_graph(tape, feats, leaves, c)
            seg_terms.append(L.seg_loss(targets[c], fg_channel(seg), loss_cfg))
        seg_loss = seg_terms[0]
        for term in seg_terms[1:]:
            seg_loss = seg_loss + term
        seg_loss = (1.0 / len(seg_terms)) * seg_loss
        return L.total_loss(cls_loss, seg_loss, loss_cfg.combine_lambda), leaves

    def loss_fn(vec):
        loss, _ = build(vec)
        val = float(loss.data)
        ad.release(loss)
        return val

    def grad_fn(vec):
        loss, leaves = build(vec)
        ad.backward(loss)
        g = layout.pack_grads({n: ad.grad_or_zero(lv)
                               for n, lv in leaves.items()})
        ad.release(loss)
        return g

    return loss_fn, grad_fn
