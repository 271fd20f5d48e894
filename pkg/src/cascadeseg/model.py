"""Dual-phase segmentation model under strict parameter isolation.

A small frozen convolutional backbone feeds two kinds of per-class heads:
an existence router (global average pool + linear + sigmoid) and a binary
segmenter (two dilated 3x3 convolutions + 1x1 projection + per-pixel softmax).
A monolithic softmax head over all classes serves as the forgetting baseline.
"""

import numpy as np

from . import autodiff as ad
from .params import ParameterStore
from . import synthgen


class ModelError(Exception):
    pass


class ModelConfig:
    def __init__(self, grid=32, in_channels=3, backbone_channels=(32, 16),
                 head_channels=8, upsample_factor=1, seed=0):
        self.grid = grid
        self.in_channels = in_channels
        self.backbone_channels = tuple(backbone_channels)
        self.head_channels = head_channels
        self.upsample_factor = upsample_factor
        self.seed = seed

    @property
    def feature_channels(self):
        return self.backbone_channels[-1]


def _init_weight(shape, rng):
    """Uniform fan-in initialization; fan-in is everything but dim 0."""
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _head_rng(seed, task, class_id, salt):
    return np.random.default_rng(
        np.random.SeedSequence([seed, task, class_id, salt]))


class ParamPack:
    """Named arrays packed into one flat vector for optimizer steps."""

    def __init__(self, arrays):
        self.shapes = {n: np.asarray(a).shape for n, a in arrays.items()}
        self.slices = {}
        pos = 0
        for n, a in arrays.items():
            size = int(np.asarray(a).size)
            self.slices[n] = slice(pos, pos + size)
            pos += size
        self.vector = np.empty(pos, dtype=np.float64)
        for n, a in arrays.items():
            self.vector[self.slices[n]] = np.asarray(a, dtype=np.float64).ravel()

    def leaves(self, tape):
        return {n: ad.leaf(self.vector[sl].reshape(self.shapes[n]), tape, name=n)
                for n, sl in self.slices.items()}

    def grad_vector(self, leaves):
        g = np.empty_like(self.vector)
        for n, sl in self.slices.items():
            g[sl] = ad.grad_or_zero(leaves[n]).ravel()
        return g

    def write_to_store(self, store, names=None):
        for n in (names or self.slices):
            store.set(n, self.vector[self.slices[n]])


# ---------------------------------------------------------------------------
# backbone


class Backbone:
    """Two 3x3 conv + ReLU stages, shared by all heads and frozen after
    pretraining. Stride 1 everywhere, so feature maps keep the input size."""

    BLOCKS = ("shared/conv1_w", "shared/conv1_b", "shared/conv2_w",
              "shared/conv2_b")

    def __init__(self, cfg):
        self.cfg = cfg
        c1, c2 = cfg.backbone_channels
        self.shapes = {
            "shared/conv1_w": (c1, cfg.in_channels, 3, 3),
            "shared/conv1_b": (c1,),
            "shared/conv2_w": (c2, c1, 3, 3),
            "shared/conv2_b": (c2,),
        }

    def init_blocks(self, store):
        for i, name in enumerate(self.BLOCKS):
            rng = _head_rng(self.cfg.seed, 0, 0, i)
            shape = self.shapes[name]
            values = _init_weight(shape, rng) if name.endswith("_w") \
                else np.zeros(shape)
            store.add_block(name, values, task=0)

    def _params(self, store):
        return {n: store.get(n).reshape(self.shapes[n]) for n in self.BLOCKS}

    def features(self, store, images):
        """Frozen fast path; bit-identical to the graph path by construction.

        The feature map is the per-pixel softmax over the second conv's
        logits: pretraining puts a hue-class cross-entropy on exactly these
        logits, so each channel is the posterior area of one hue. The softmax
        (rather than a ReLU) matters for the existence routers: losing logits
        on a large shape stay positive under a ReLU and their pooled mass
        swamps the few beacon pixels of a nearby hue, while posteriors crush
        losers exponentially."""
        p = self._params(store)
        # chunked over images: each image's conv is independent, so this is
        # bit-identical to one call while capping the einsum workspace
        out = []
        for s in range(0, images.shape[0], 128):
            h = np.maximum(ad.conv2d_raw(images[s:s + 128],
                                         p["shared/conv1_w"],
                                         p["shared/conv1_b"]), 0.0)
            z = ad.conv2d_raw(h, p["shared/conv2_w"], p["shared/conv2_b"])
            out.append(ad.softmax_raw(z, axis=1))
        return np.concatenate(out) if len(out) != 1 else out[0]

    def stage1(self, store, images):
        p = self._params(store)
        return np.maximum(ad.conv2d_raw(images, p["shared/conv1_w"],
                                        p["shared/conv1_b"]), 0.0)

    def stage2_graph(self, tape, h1, conv2_w, conv2_b):
        """Second stage with trainable weights (freeze-violation probe)."""
        h1 = h1 if isinstance(h1, ad.Tensor) else ad.Tensor(h1, tape=tape)
        return ad.softmax(ad.conv2d(h1, conv2_w, conv2_b), axis=1)


_PRETRAIN_CACHE = {}


def pretrain_backbone(store, cfg, epochs=140, images=240, batch=16,
                      bench_kwargs=None, cache=True):
    """Supervised pretraining of the backbone on an auxiliary synthetic
    pixel-labeling task, after which all shared blocks are frozen.

    Pretraining is deterministic in its arguments, so repeated builds within a
    process reuse a cached copy of the trained blocks (cache=False forces the
    full computation, e.g. when testing that determinism itself).

    The cross-entropy sits directly on the second conv's logits, so each
    feature channel becomes an evidence map for one auxiliary hue class
    (channel 0 for background). Pooled, the features approximate a per-hue
    area histogram, which is what makes a frozen-feature linear existence
    router transfer across tasks: classes never seen during a router's own
    task still light up only their own hue channels."""
    backbone = Backbone(cfg)
    n_aux = cfg.feature_channels - 1
    if n_aux < 2:
        raise ModelError("need at least 3 feature channels for pretraining")
    key = (cfg.grid, cfg.in_channels, cfg.backbone_channels, cfg.seed,
           epochs, images, batch,
           tuple(sorted((bench_kwargs or {}).items())))
    if cache and key in _PRETRAIN_CACHE:
        for name, values in _PRETRAIN_CACHE[key].items():
            store.set(name, values)
            store.freeze(name)
        return backbone
    # no distractor dots here: dots are labeled background, and with a 5x5
    # receptive field that would teach the backbone to suppress any blob the
    # size of a context beacon
    aux_cfg = synthgen.BenchmarkConfig(
        seed=cfg.seed + 7919, grid=cfg.grid, num_classes=n_aux,
        first_task_classes=n_aux, new_classes_per_task=1,
        images_per_task=images, paired_classes=False, aux_hues=True,
        distractors=0, **(bench_kwargs or {}))
    aux = synthgen.generate_benchmark(aux_cfg).tasks[0]

    pack = ParamPack({n: store.get(n).reshape(backbone.shapes[n])
                      for n in Backbone.BLOCKS})
    n_img = aux.train_images.shape[0]
    onehots = np.zeros((n_img, n_aux + 1, cfg.grid, cfg.grid))
    for k in range(n_aux + 1):
        onehots[:, k] = aux.train_labels_full == k

    opt = ad.OptimizerState(kind="adam", lr=3e-3, momentum=0.9)
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 777]))
    for _ in range(epochs):
        order = order_rng.permutation(n_img)
        for start in range(0, n_img, batch):
            idx = order[start:start + batch]
            tape = ad.Tape()
            leaves = pack.leaves(tape)
            x = ad.Tensor(aux.train_images[idx], tape=tape)
            h = ad.relu(ad.conv2d(x, leaves["shared/conv1_w"],
                                  leaves["shared/conv1_b"]))
            logits = ad.conv2d(h, leaves["shared/conv2_w"],
                               leaves["shared/conv2_b"])
            probs = ad.softmax(logits, axis=1)
            logp = ad.log(ad.clip(probs, 1e-12, 1.0))
            loss = -ad.tmean(ad.tsum(logp * onehots[idx], axis=1))
            ad.backward(loss)
            pack.vector = ad.step(opt, pack.vector, pack.grad_vector(leaves))
            ad.release(loss)

    pack.write_to_store(store, Backbone.BLOCKS)
    for name in Backbone.BLOCKS:
        store.freeze(name)
    if cache:
        _PRETRAIN_CACHE[key] = {n: store.get(n).copy()
                                for n in Backbone.BLOCKS}
    return backbone


# ---------------------------------------------------------------------------
# cascade heads


class CascadeModel:
    """Per-class existence routers and binary segmenters over one store."""

    def __init__(self, store, cfg):
        self.store = store
        self.cfg = cfg
        self.class_task = {}    # class id -> owning task
        self.class_order = []   # in instantiation order

    # -- lifecycle ----------------------------------------------------------

    def router_blocks(self, c):
        return [f"router/c{c}/w", f"router/c{c}/b"]

    def segmenter_blocks(self, c):
        return [f"seg/c{c}/conv1_w", f"seg/c{c}/conv1_b",
                f"seg/c{c}/conv2_w", f"seg/c{c}/conv2_b",
                f"seg/c{c}/proj_w", f"seg/c{c}/proj_b"]

    def class_blocks(self, c):
        return self.router_blocks(c) + self.segmenter_blocks(c)

    def block_shapes(self, c):
        F, k = self.cfg.feature_channels, self.cfg.head_channels
        return {
            f"router/c{c}/w": (F,),
            f"router/c{c}/b": (1,),
            f"seg/c{c}/conv1_w": (k, F, 3, 3),
            f"seg/c{c}/conv1_b": (k,),
            f"seg/c{c}/conv2_w": (k, k, 3, 3),
            f"seg/c{c}/conv2_b": (k,),
            f"seg/c{c}/proj_w": (2, k, 1, 1),
            f"seg/c{c}/proj_b": (2,),
        }

    def instantiate_task(self, t, classes, benchmark_seed):
        """Append router and segmenter blocks for each new class and freeze
        every pre-existing block."""
        for c in classes:
            if c in self.class_task:
                raise ModelError(f"class {c} already instantiated")
        self.store.freeze_all()
        new_blocks = []
        for c in classes:
            shapes = self.block_shapes(c)
            for salt, name in enumerate(self.class_blocks(c)):
                rng = _head_rng(benchmark_seed, t, c, salt)
                shape = shapes[name]
                values = _init_weight(shape, rng) if name.endswith("_w") \
                    else np.zeros(shape)
                self.store.add_block(name, values, task=t)
                new_blocks.append(name)
            self.class_task[c] = t
            self.class_order.append(c)
        return new_blocks

    def learned_classes(self):
        return list(self.class_order)

    # -- forward passes -------------------------------------------------------

    def route(self, features, vector=None):
        """(B, n_classes) existence probabilities from a feature map batch."""
        if not self.class_order:
            raise ModelError("no classes learned yet")
        vec = self.store.vector if vector is None else vector
        # log-compressed sum pooling: with softmax features each channel pools
        # to "pixels of this hue", so a 9-px beacon moves the logit by O(1)
        # under O(1) weights (mean pooling would need weights ~1e3 that weight
        # decay fights). The log keeps out-of-task masses far larger than
        # anything seen in training from extrapolating a small nuisance weight
        # into a false positive.
        gap = np.log1p(features.sum(axis=(2, 3)))
        F = self.cfg.feature_channels
        w = np.stack([self._block_from(vec, f"router/c{c}/w").reshape(F)
                      for c in self.class_order], axis=1)
        b = np.array([self._block_from(vec, f"router/c{c}/b")[0]
                      for c in self.class_order])
        return ad.sigmoid_raw(gap @ w + b)

    def segment(self, features, c, vector=None):
        """(B, 2, H, W) per-pixel (bg, fg) probabilities for class c."""
        if c not in self.class_task:
            raise ModelError(f"class {c} has not been learned")
        vec = self.store.vector if vector is None else vector
        shapes = self.block_shapes(c)
        p = {n: self._block_from(vec, n).reshape(shapes[n])
             for n in self.segmenter_blocks(c)}
        h = np.maximum(ad.conv2d_raw(features, p[f"seg/c{c}/conv1_w"],
                                     p[f"seg/c{c}/conv1_b"], dilation=1), 0.0)
        h = np.maximum(ad.conv2d_raw(h, p[f"seg/c{c}/conv2_w"],
                                     p[f"seg/c{c}/conv2_b"], dilation=2), 0.0)
        logits = ad.conv2d_raw(h, p[f"seg/c{c}/proj_w"], p[f"seg/c{c}/proj_b"])
        return ad.softmax_raw(logits, axis=1)

    def _block_from(self, vec, name):
        b = self.store.blocks[name]
        return vec[b.offset:b.offset + b.length]

    # -- graph builders (training) -------------------------------------------

    def router_graph(self, tape, gap, leaves, c):
        """(B,) existence probabilities with gradients to router leaves."""
        gap = gap if isinstance(gap, ad.Tensor) else ad.Tensor(gap, tape=tape)
        F = self.cfg.feature_channels
        w = ad.reshape(leaves[f"router/c{c}/w"], (F, 1))
        logits = ad.matmul(gap, w, name=f"router/c{c}") + leaves[f"router/c{c}/b"]
        return ad.reshape(ad.sigmoid(logits), (-1,))

    def segmenter_graph(self, tape, features, leaves, c):
        """(B, 2, H, W) probabilities with gradients to segmenter leaves."""
        x = features if isinstance(features, ad.Tensor) \
            else ad.Tensor(features, tape=tape)
        h = ad.relu(ad.conv2d(x, leaves[f"seg/c{c}/conv1_w"],
                              leaves[f"seg/c{c}/conv1_b"], dilation=1,
                              name=f"seg/c{c}/conv1"))
        h = ad.relu(ad.conv2d(h, leaves[f"seg/c{c}/conv2_w"],
                              leaves[f"seg/c{c}/conv2_b"], dilation=2,
                              name=f"seg/c{c}/conv2"))
        logits = ad.conv2d(h, leaves[f"seg/c{c}/proj_w"],
                           leaves[f"seg/c{c}/proj_b"], name=f"seg/c{c}/proj")
        if self.cfg.upsample_factor > 1:
            logits = ad.upsample_bilinear(logits, self.cfg.upsample_factor)
        return ad.softmax(logits, axis=1)


# ---------------------------------------------------------------------------
# monolithic softmax baseline


class MonolithicBaseline:
    """Single shared softmax head over all classes so far plus background,
    grown and fully fine-tuned each task (the forgetting witness)."""

    def __init__(self, store, cfg):
        self.store = store
        self.cfg = cfg
        self.class_order = []
        self.out_blocks = []   # (block prefix, channel count) per growth step

    def init_stem(self, benchmark_seed):
        F, k = self.cfg.feature_channels, self.cfg.head_channels
        rng = _head_rng(benchmark_seed, 1, 0, 50)
        self.store.add_block("base/stem1_w", _init_weight((k, F, 3, 3), rng),
                             task=1)
        self.store.add_block("base/stem1_b", np.zeros(k), task=1)
        rng = _head_rng(benchmark_seed, 1, 0, 51)
        self.store.add_block("base/stem2_w", _init_weight((k, k, 3, 3), rng),
                             task=1)
        self.store.add_block("base/stem2_b", np.zeros(k), task=1)

    def grow(self, t, classes, benchmark_seed):
        """Append output rows for the new classes (plus background at t=1)."""
        k = self.cfg.head_channels
        rows = len(classes) + (1 if t == 1 else 0)
        rng = _head_rng(benchmark_seed, t, 0, 52)
        prefix = f"base/out_t{t}"
        self.store.add_block(f"{prefix}_w", _init_weight((rows, k, 1, 1), rng),
                             task=t)
        self.store.add_block(f"{prefix}_b", np.zeros(rows), task=t)
        self.class_order.extend(classes)
        self.out_blocks.append((prefix, rows))

    @property
    def n_channels(self):
        return 1 + len(self.class_order)

    def channel_of_class(self, c):
        return 1 + self.class_order.index(c)

    def trainable_blocks(self):
        names = ["base/stem1_w", "base/stem1_b", "base/stem2_w", "base/stem2_b"]
        for prefix, _ in self.out_blocks:
            names += [f"{prefix}_w", f"{prefix}_b"]
        return names

    def shapes(self):
        F, k = self.cfg.feature_channels, self.cfg.head_channels
        out = {"base/stem1_w": (k, F, 3, 3), "base/stem1_b": (k,),
               "base/stem2_w": (k, k, 3, 3), "base/stem2_b": (k,)}
        for prefix, rows in self.out_blocks:
            out[f"{prefix}_w"] = (rows, k, 1, 1)
            out[f"{prefix}_b"] = (rows,)
        return out

    def forward_graph(self, tape, features, leaves):
        """(B, 1+n_classes, H, W) per-pixel softmax with gradients."""
        x = features if isinstance(features, ad.Tensor) \
            else ad.Tensor(features, tape=tape)
        h = ad.relu(ad.conv2d(x, leaves["base/stem1_w"], leaves["base/stem1_b"],
                              dilation=1, name="base/stem1"))
        h = ad.relu(ad.conv2d(h, leaves["base/stem2_w"], leaves["base/stem2_b"],
                              dilation=2, name="base/stem2"))
        parts = [ad.conv2d(h, leaves[f"{prefix}_w"], leaves[f"{prefix}_b"],
                           name=prefix) for prefix, _ in self.out_blocks]
        logits = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
        return ad.softmax(logits, axis=1)

    def forward(self, features, vector=None):
        """Fast inference path; same arithmetic as the graph path."""
        vec = self.store.vector if vector is None else vector
        shapes = self.shapes()

        def block(n):
            b = self.store.blocks[n]
            return vec[b.offset:b.offset + b.length].reshape(shapes[n])

        h = np.maximum(ad.conv2d_raw(features, block("base/stem1_w"),
                                     block("base/stem1_b"), dilation=1), 0.0)
        h = np.maximum(ad.conv2d_raw(h, block("base/stem2_w"),
                                     block("base/stem2_b"), dilation=2), 0.0)
        parts = [ad.conv2d_raw(h, block(f"{prefix}_w"), block(f"{prefix}_b"))
                 for prefix, _ in self.out_blocks]
        logits = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
        return ad.softmax_raw(logits, axis=1)

    def predict_labels(self, features):
        """Per-pixel argmax mapped back to class ids."""
        probs = self.forward(features)
        arg = probs.argmax(axis=1)
        ids = np.array([0] + self.class_order)
        return ids[arg]
