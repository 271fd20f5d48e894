"""Two-phase cascade inference and mask fusion.

Per image: pooled features drive the per-class existence routers; classes at
or above the threshold activate their binary segmenters; overlapping claims
are resolved by one of five fusion strategies. The probabilistic cascade
combination (existence times per-pixel foreground, normalized with a
background term) is available as its own operation.
"""

import numpy as np
from dataclasses import dataclass, field


STRATEGIES = ("logits", "random", "strict", "distributed", "loose")
MODES = ("full", "segmentation-only", "oracle")


class InferenceError(Exception):
    pass


@dataclass
class PredictionResult:
    label_map: np.ndarray            # (H, W) class ids
    classes: list                    # predicted class set C_pred (sorted)
    existence: dict                  # class -> P(Z_c = 1 | x) (empty in oracle)
    fg: dict                         # class -> (H, W) foreground probability
    claims: dict = field(default_factory=dict)  # class -> (H, W) bool claims
    segmenter_calls: int = 0
    router_calls: int = 0


def predicted_set(existence, alpha, top_k=None):
    """Classes whose existence probability clears the threshold (or the top-k
    scorers when top_k is given)."""
    if not 0.0 <= alpha <= 1.0:
        raise InferenceError(f"alpha must lie in [0,1], got {alpha}")
    existence = np.asarray(existence)
    if top_k is not None:
        order = np.argsort(-existence, kind="stable")[:top_k]
        picked = np.zeros(existence.size, dtype=bool)
        picked[order] = True
        return picked
    return existence >= alpha


def cascade_probability(classes, existence, fg, bg_mode="product"):
    """Normalized per-pixel distribution over background + predicted classes.

    Class c's unnormalized mass at pixel p is fg_c(p) * P(Z_c=1|x); background
    existence is fixed to 1 and its conditional is either the product of the
    per-head background beliefs ("product") or 1 - max foreground
    ("one-minus-max").
    """
    classes = list(classes)
    if not classes:
        shape = (1, 1) if fg is None else fg.shape[-2:]
        return [0], np.ones((1,) + shape)
    existence = np.asarray(existence, dtype=np.float64)
    fg = np.asarray(fg, dtype=np.float64)   # (C, H, W)
    mass = fg * existence[:, None, None]
    if bg_mode == "product":
        bg = np.prod(1.0 - fg, axis=0)
    elif bg_mode == "one-minus-max":
        bg = 1.0 - fg.max(axis=0)
    else:
        raise InferenceError(f"unknown bg_mode {bg_mode!r}")
    stacked = np.concatenate([bg[None], mass], axis=0)
    total = stacked.sum(axis=0, keepdims=True)
    # degenerate all-zero columns (every belief exactly 0) fall back to bg
    zero = total[0] == 0.0
    if zero.any():
        stacked[0][zero] = 1.0
        total = stacked.sum(axis=0, keepdims=True)
    return [0] + classes, stacked / total


def fuse(classes, claims, fg, strategy, rng=None, truth=None):
    """Resolve per-class binary claims into one label map.

    classes: list of class ids; claims: (C, H, W) bool; fg: (C, H, W) float.
    "loose" assigns an overlap pixel its ground-truth class when that class is
    among the claimants (evaluation protocol only; requires truth).
    """
    if strategy not in STRATEGIES:
        raise InferenceError(f"unknown fusion strategy {strategy!r}")
    classes = np.asarray(classes, dtype=np.int64)
    if classes.size == 0:
        shape = (0, 0) if claims is None else claims.shape[-2:]
        return np.zeros(shape, dtype=np.int64)
    claims = np.asarray(claims, dtype=bool)
    counts = claims.sum(axis=0)

    # unique claimant (or none) is strategy-independent
    masked_fg = np.where(claims, fg, -1.0)
    best = classes[np.argmax(masked_fg, axis=0)]
    label = np.where(counts == 1, best, 0)

    over = counts >= 2
    if not over.any():
        return label
    if strategy == "logits":
        label[over] = best[over]
    elif strategy == "strict":
        pass  # overlap pixels stay background
    elif strategy == "random":
        if rng is None:
            raise InferenceError("random fusion requires a seeded generator")
        ys, xs = np.nonzero(over)
        for y, x in zip(ys, xs):
            cands = classes[claims[:, y, x]]
            label[y, x] = cands[rng.integers(0, cands.size)]
    elif strategy == "distributed":
        areas = claims.sum(axis=(1, 2))
        # smallest predicted area wins; ties go to the lower class id
        order = np.lexsort((classes, areas))
        rank = np.empty(classes.size, dtype=np.int64)
        rank[order] = np.arange(classes.size)
        masked_rank = np.where(claims, rank[:, None, None], classes.size)
        pick = classes[order][np.min(masked_rank, axis=0).clip(max=classes.size - 1)]
        label[over] = pick[over]
    else:  # loose
        if truth is None:
            raise InferenceError("loose fusion is an evaluation protocol and "
                                 "requires ground truth")
        truth = np.asarray(truth)
        claimed_truth = np.zeros_like(over)
        for j, c in enumerate(classes):
            claimed_truth |= claims[j] & (truth == c)
        label[over & claimed_truth] = truth[over & claimed_truth]
        label[over & ~claimed_truth] = best[over & ~claimed_truth]
    return label


def predict(store, backbone, model, image, alpha=0.5, strategy="logits",
            mode="full", truth_presence=None, truth=None, top_k=None,
            bg_mode="product", run_seed=0, image_id=0):
    """Single-image cascade prediction. See predict_batch for the fast path."""
    results = predict_batch(store, backbone, model, image[None], alpha=alpha,
                            strategy=strategy, mode=mode,
                            truth_presence=None if truth_presence is None
                            else np.asarray(truth_presence)[None],
                            truth=None if truth is None else truth[None],
                            top_k=top_k, bg_mode=bg_mode, run_seed=run_seed,
                            image_ids=[image_id])
    return results[0]


def predict_batch(store, backbone, model, images, alpha=0.5, strategy="logits",
                  mode="full", truth_presence=None, truth=None, top_k=None,
                  bg_mode="product", run_seed=0, image_ids=None):
    """Cascade inference over a batch; returns one PredictionResult per image.

    mode: "full" thresholds the router, "segmentation-only" activates every
    learned segmenter, "oracle" uses ground-truth presence bits and never
    calls the router.
    """
    if mode not in MODES:
        raise InferenceError(f"unknown inference mode {mode!r}")
    if strategy == "loose" and truth is None:
        raise InferenceError("loose fusion is an evaluation protocol and "
                             "requires ground truth")
    learned = model.learned_classes()
    if not learned:
        raise InferenceError("no classes learned yet")
    n = images.shape[0]
    if image_ids is None:
        image_ids = list(range(n))

    feats = backbone.features(store, images)
    router_calls = 0
    if mode == "full":
        ex = model.route(feats)                      # (N, C)
        router_calls = 1
        active = np.stack([predicted_set(ex[i], alpha, top_k)
                           for i in range(n)])
    elif mode == "segmentation-only":
        ex = model.route(feats)
        active = np.ones((n, len(learned)), dtype=bool)
    else:
        if truth_presence is None:
            raise InferenceError("oracle mode requires ground-truth presence")
        ex = None
        active = np.asarray(truth_presence, dtype=bool)

    H, W = images.shape[2], images.shape[3]
    fg_all = np.zeros((n, len(learned), H, W))
    seg_calls = np.zeros(n, dtype=np.int64)
    for j, c in enumerate(learned):
        idx = np.nonzero(active[:, j])[0]
        if idx.size == 0:
            continue
        fg_all[idx, j] = model.segment(feats[idx], c)[:, 1]
        seg_calls[idx] += 1

    results = []
    for i in range(n):
        cls = [c for j, c in enumerate(learned) if active[i, j]]
        jdx = np.nonzero(active[i])[0]
        fg = fg_all[i, jdx]
        claims = fg > 0.5    # argmax of (bg, fg) with bg = 1 - fg
        rng = None
        if strategy == "random":
            rng = np.random.default_rng(
                np.random.SeedSequence([run_seed, int(image_ids[i])]))
        label = fuse(cls, claims, fg, strategy, rng=rng,
                     truth=None if truth is None else truth[i])
        results.append(PredictionResult(
            label_map=label, classes=cls,
            existence={} if ex is None else
            {c: float(ex[i, j]) for j, c in enumerate(learned)},
            fg={c: fg[k] for k, c in enumerate(cls)},
            claims={c: claims[k] for k, c in enumerate(cls)},
            segmenter_calls=int(seg_calls[i]), router_calls=router_calls))
    return results
