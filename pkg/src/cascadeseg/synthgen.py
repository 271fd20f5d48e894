"""Deterministic synthetic class-incremental segmentation benchmarks.

Each class is a (shape family, hue) pair rendered onto noisy gray backgrounds
littered with small class-colored distractor dots. Task training labels follow
the background-shift convention: every pixel whose class is not in the current
task's class set is labeled background (0). Validation splits keep full ground
truth so later evaluation can score previously learned classes.

In the default paired regime, classes come in twins (2p-1, 2p) that share the
same shape family and hue, so they are indistinguishable pixel-by-pixel. The
class identity is carried by a small context beacon painted along the top rows
of the image: whenever class c is visible in the scene, a patch of c's beacon
hue appears in c's fixed slot. Only a reader with image-level receptive field
(e.g. pooled features) can exploit it; local per-pixel heads cannot, which is
exactly the regime where existence detection must precede segmentation.
"""

import colorsys
import numpy as np
from dataclasses import dataclass, field


FAMILIES = ("rectangle", "circle", "triangle", "cross", "ring", "stripes")


class GenerationError(Exception):
    pass


@dataclass
class BenchmarkConfig:
    seed: int = 0
    grid: int = 32
    num_classes: int = 10
    first_task_classes: int = 2     # M of the M-N split
    new_classes_per_task: int = 2   # N of the M-N split
    images_per_task: int = 200      # train images; val adds 25% more (80/20)
    shapes_per_image: int = 3       # current shapes + up to that many-1 extras
    overlap_frac: float = 0.5       # fraction of shapes forced to overlap
    distractors: int = 4            # class-colored dots per image, labeled 0
    distractor_radius: tuple = (1.5, 2.5)
    shape_radius: tuple = (6.0, 10.0)
    noise: float = 0.02
    paired_classes: bool = True     # twin classes + context beacons
    aux_hues: bool = False          # pretraining layout: one class per hue


@dataclass
class Task:
    index: int
    classes: list
    train_images: np.ndarray      # (N, 3, H, W) in [0, 1]
    train_labels_full: np.ndarray  # (N, H, W) int, full ground truth
    train_labels: np.ndarray       # (N, H, W) int, background-shifted
    val_images: np.ndarray
    val_labels_full: np.ndarray
    train_ids: list
    val_ids: list


@dataclass
class TaskStream:
    config: BenchmarkConfig
    class_table: dict              # class id -> (family, hue)
    tasks: list = field(default_factory=list)

    @property
    def all_classes(self):
        return [c for t in self.tasks for c in t.classes]

    def classes_up_to(self, t):
        return [c for task in self.tasks[:t] for c in task.classes]


def task_class_sets(num_classes, m, n):
    """Class ids per task under the M-N split."""
    if m < 1 or n < 1:
        raise GenerationError("M and N must both be at least 1")
    if (num_classes - m) % n != 0:
        raise GenerationError(f"M-N split {m}-{n} does not tile {num_classes} "
                              f"classes")
    sets = [list(range(1, m + 1))]
    c = m + 1
    while c <= num_classes:
        sets.append(list(range(c, c + n)))
        c += n
    return sets


def class_hue(c, num_classes):
    return (c - 1) / num_classes


def pair_hue(p, n_pairs):
    """Shape hue of twin pair p; pairs share a narrow hue band so every
    beacon hue stays far (>= 0.1 on the hue circle) from every shape hue."""
    return 0.35 * (p - 1) / n_pairs


def beacon_hue(c, num_classes):
    """Context-beacon hue for class c; beacons occupy a separate hue band so
    the (large, variable-area) shapes never bleed into a beacon's feature
    channel."""
    return 0.42 + 0.48 * (c - 1) / num_classes


def twin_of(c, config):
    """In a paired benchmark classes (2p-1, 2p) look identical; returns the
    twin id, or None when the benchmark is unpaired."""
    if not getattr(config, "paired_classes", False):
        return None
    return c + 1 if c % 2 == 1 else c - 1


def build_class_table(num_classes, paired=False, aux=False):
    if aux:
        # pretraining layout: the exact hues a paired benchmark uses, one aux
        # class per hue (n/3 shape hues + 2n/3 beacon hues)
        if num_classes % 3 == 0:
            n_b = 2 * num_classes // 3
            hues = ([pair_hue(p, num_classes // 3)
                     for p in range(1, num_classes // 3 + 1)]
                    + [beacon_hue(c, n_b) for c in range(1, n_b + 1)])
        else:
            hues = [class_hue(c, num_classes)
                    for c in range(1, num_classes + 1)]
        return {c: (FAMILIES[(c - 1) % len(FAMILIES)], hues[c - 1])
                for c in range(1, num_classes + 1)}
    if not paired:
        return {c: (FAMILIES[(c - 1) % len(FAMILIES)],
                    class_hue(c, num_classes))
                for c in range(1, num_classes + 1)}
    if num_classes % 2 != 0:
        raise GenerationError("paired benchmarks need an even class count")
    n_pairs = num_classes // 2
    table = {}
    for c in range(1, num_classes + 1):
        p = (c + 1) // 2
        table[c] = (FAMILIES[(p - 1) % len(FAMILIES)], pair_hue(p, n_pairs))
    return table


def _drop_pair_duplicates(classes, rng):
    """At most one class of each twin pair per scene (a shape is either twin,
    never both at once); rng picks which survives."""
    out, seen = [], {}
    for c in classes:
        p = (c + 1) // 2
        if p in seen:
            if rng.uniform() < 0.5:
                out[out.index(seen[p])] = c
                seen[p] = c
        else:
            seen[p] = c
            out.append(c)
    return out


# ---------------------------------------------------------------------------
# shape rasterization


def _shape_mask(family, cy, cx, r, grid):
    yy, xx = np.mgrid[0:grid, 0:grid].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if family == "rectangle":
        return (np.abs(dx) <= r) & (np.abs(dy) <= 0.7 * r)
    if family == "circle":
        return dy * dy + dx * dx <= r * r
    if family == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= 0.6 * (dy + r))
    if family == "cross":
        w = max(1.2, 0.35 * r)
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    if family == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if family == "stripes":
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        band = max(2, int(round(r / 2)))
        return inside & ((yy.astype(int) // band) % 2 == 0)
    raise GenerationError(f"unknown shape family {family!r}")


def _paint(image, mask, hue, value, sat=0.85):
    rgb = colorsys.hsv_to_rgb(hue, sat, value)
    for ch in range(3):
        image[ch][mask] = rgb[ch]


def render_image(config, class_table, task_classes, past_classes, image_id):
    """Render one scene; pure function of (benchmark seed, image id)."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, image_id]))
    grid = config.grid
    rmin, rmax = config.shape_radius
    if grid < 2 * rmax + 4:
        raise GenerationError(f"grid {grid} too small for shapes of radius up "
                              f"to {rmax}")

    image = np.empty((3, grid, grid), dtype=np.float64)
    base = rng.uniform(0.20, 0.30)
    image[:] = base
    label = np.zeros((grid, grid), dtype=np.int64)

    # distractor dots: class hues on background-sized blobs, never labeled;
    # kept clear of the beacon rows at the top
    hues = sorted({class_table[c][1] for c in class_table})
    for _ in range(config.distractors):
        hue = hues[rng.integers(0, len(hues))]
        r = rng.uniform(*config.distractor_radius)
        cy = rng.uniform(6, grid - 3)
        cx = rng.uniform(2, grid - 3)
        mask = _shape_mask("circle", cy, cx, r, grid)
        _paint(image, mask, hue, rng.uniform(0.75, 0.95))

    # current classes drop in independently (a scene may hold both, one, or
    # neither) so class presences are never complementary within a task;
    # extras come from past classes only
    lo, hi = 0.35 * grid, 0.65 * grid
    members = [c for c in task_classes if rng.uniform() < 0.4]
    extra_classes = []
    if past_classes:
        n_extra = int(rng.integers(0, config.shapes_per_image))
        picks = rng.choice(len(past_classes), size=min(n_extra, len(past_classes)),
                           replace=False)
        extra_classes = [past_classes[int(pick)] for pick in picks]
    if config.paired_classes:
        merged = _drop_pair_duplicates(members + extra_classes, rng)
        members = [c for c in merged if c in task_classes]
        extra_classes = [c for c in merged if c not in task_classes]

    # retry placements until every painted class is clearly visible or fully
    # hidden, so presence bits never hinge on slivers of occluded shapes;
    # shapes stay below the beacon rows (cy >= r + 3.5)
    min_visible = 60
    for _ in range(12):
        specs = []
        anchor = None
        for j, c in enumerate(members + extra_classes):
            r = rng.uniform(rmin, rmax)
            if anchor is not None and rng.uniform() < config.overlap_frac:
                acy, acx, ar = anchor
                ang = rng.uniform(0, 2 * np.pi)
                dist = 0.6 * (ar + r)
                cy = np.clip(acy + dist * np.sin(ang), r + 3.5, grid - 1 - r)
                cx = np.clip(acx + dist * np.cos(ang), r, grid - 1 - r)
            else:
                cy = rng.uniform(max(lo, r + 3.5), hi)
                cx = rng.uniform(lo, hi)
            if anchor is None:
                anchor = (cy, cx, r)
            specs.append((c, cy, cx, r))
        trial = np.zeros((grid, grid), dtype=np.int64)
        for c, cy, cx, r in sorted(specs, key=lambda s: s[0]):
            trial[_shape_mask(class_table[c][0], cy, cx, r, grid)] = c
        counts = [(trial == c).sum() for c, *_ in specs]
        if all(n == 0 or n >= min_visible for n in counts):
            break
    else:
        # placement never settled: drop sliver shapes until every survivor
        # is clearly visible or fully hidden (removal only reveals pixels,
        # so iterate to a fixed point)
        while True:
            trial = np.zeros((grid, grid), dtype=np.int64)
            for c, cy, cx, r in sorted(specs, key=lambda s: s[0]):
                trial[_shape_mask(class_table[c][0], cy, cx, r, grid)] = c
            bad = [s for s in specs
                   if 0 < (trial == s[0]).sum() < min_visible]
            if not bad:
                break
            specs = [s for s in specs if s not in bad]

    # deterministic z-order: draw by ascending class id, later on top
    for c, cy, cx, r in sorted(specs, key=lambda s: s[0]):
        family, hue = class_table[c]
        mask = _shape_mask(family, cy, cx, r, grid)
        _paint(image, mask, hue, rng.uniform(0.75, 0.95))
        label[mask] = c

    # context beacons: every visible class stamps its beacon hue into its own
    # slot along the top rows (labeled background, readable only globally)
    if config.paired_classes:
        if 3 * config.num_classes > grid:
            raise GenerationError(f"grid {grid} too narrow for "
                                  f"{config.num_classes} beacon slots")
        for c in np.unique(label):
            if c == 0:
                continue
            col = 3 * (int(c) - 1)
            patch = np.zeros((grid, grid), dtype=bool)
            patch[0:3, col:col + 3] = True
            _paint(image, patch, beacon_hue(int(c), config.num_classes),
                   rng.uniform(0.80, 0.95))

    image += rng.normal(0.0, config.noise, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return image, label


# ---------------------------------------------------------------------------
# stream assembly


def apply_background_shift(labels, class_set):
    """Relabel every pixel whose class is outside class_set as background."""
    labels = np.asarray(labels)
    keep = np.isin(labels, list(class_set))
    return np.where(keep, labels, 0)


def generate_benchmark(config):
    """Build the full deterministic task stream for a benchmark config."""
    class_sets = task_class_sets(config.num_classes, config.first_task_classes,
                                 config.new_classes_per_task)
    class_table = build_class_table(config.num_classes, config.paired_classes,
                                    aux=config.aux_hues)
    stream = TaskStream(config=config, class_table=class_table)

    n_train = config.images_per_task
    n_val = n_train // 4  # fixed 80/20 split
    past = []
    for t_idx, classes in enumerate(class_sets, start=1):
        images, labels = [], []
        for i in range(n_train + n_val):
            image_id = t_idx * 100000 + i
            img, lab = render_image(config, class_table, classes, past, image_id)
            images.append(img)
            labels.append(lab)
        images = np.stack(images)
        labels = np.stack(labels)
        task = Task(
            index=t_idx,
            classes=list(classes),
            train_images=images[:n_train],
            train_labels_full=labels[:n_train],
            train_labels=apply_background_shift(labels[:n_train], classes),
            val_images=images[n_train:],
            val_labels_full=labels[n_train:],
            train_ids=[t_idx * 100000 + i for i in range(n_train)],
            val_ids=[t_idx * 100000 + i for i in range(n_train, n_train + n_val)],
        )
        stream.tasks.append(task)
        past = past + list(classes)
    return stream


def presence_bits(labels, classes):
    """(N, |classes|) 0/1 matrix: does class c appear anywhere in image i."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], len(classes)), dtype=np.float64)
    for j, c in enumerate(classes):
        out[:, j] = (labels == c).any(axis=(1, 2))
    return out


@dataclass
class NearOODPair:
    image_index: int   # index into the task's train split
    class_id: int


def build_near_ood(stream, t, c, ratio=1.0):
    """Class-free counter-examples for class c's segmenter, at the given ratio
    of the number of positive images. Images are checked against FULL ground
    truth so the pair contains zero pixels of class c."""
    task = stream.tasks[t - 1]
    if c not in task.classes:
        raise GenerationError(f"class {c} is not part of task {t}")
    has_c = (task.train_labels_full == c).any(axis=(1, 2))
    n_pos = int(has_c.sum())
    if n_pos == 0:
        raise GenerationError(f"class {c} absent from task {t}'s train split")
    wanted = int(round(ratio * n_pos))
    eligible = ~has_c
    # a twin's pixels are visually identical to class c, so twin-bearing
    # scenes carry class information and are not valid counter-examples
    tw = twin_of(c, stream.config)
    if tw is not None:
        eligible &= ~(task.train_labels_full == tw).any(axis=(1, 2))
    free = np.nonzero(eligible)[0]
    # the ratio is a target: capped by availability, never fatal
    return [NearOODPair(int(i), c) for i in free[:min(wanted, free.size)]]


def describe(stream):
    """Plain-text benchmark description emitted alongside generated data."""
    cfg = stream.config
    lines = [
        "benchmark-description v1",
        f"seed = {cfg.seed}",
        f"grid = {cfg.grid}",
        f"num_classes = {cfg.num_classes}",
        f"split = {cfg.first_task_classes}-{cfg.new_classes_per_task}",
        f"images_per_task = {cfg.images_per_task}",
        f"shapes_per_image = {cfg.shapes_per_image}",
        f"paired_classes = {cfg.paired_classes}",
        f"tasks = {len(stream.tasks)}",
    ]
    for c in sorted(stream.class_table):
        family, hue = stream.class_table[c]
        line = f"class {c} = {family} hue={hue:.6f}"
        if cfg.paired_classes:
            line += f" beacon={beacon_hue(c, cfg.num_classes):.6f}"
        lines.append(line)
    for task in stream.tasks:
        lines.append(f"task {task.index} classes = "
                     + ",".join(str(c) for c in task.classes))
    return "\n".join(lines) + "\n"
