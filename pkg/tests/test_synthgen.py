"""Benchmark generator: determinism, labeling semantics, near-OOD purity."""

import numpy as np
import pytest

from cascadeseg import synthgen


CFG = synthgen.BenchmarkConfig(seed=11, images_per_task=40)


def test_task_class_sets_tiling():
    sets = synthgen.task_class_sets(10, 2, 2)
    assert sets == [[1, 2], [3, 4], [5, 6], [7, 8], [9, 10]]
    sets = synthgen.task_class_sets(10, 4, 3)
    assert sets == [[1, 2, 3, 4], [5, 6, 7], [8, 9, 10]]
    with pytest.raises(synthgen.GenerationError):
        synthgen.task_class_sets(10, 3, 2)


def test_generation_is_deterministic():
    s1 = synthgen.generate_benchmark(CFG)
    s2 = synthgen.generate_benchmark(CFG)
    for t1, t2 in zip(s1.tasks, s2.tasks):
        np.testing.assert_array_equal(t1.train_images, t2.train_images)
        np.testing.assert_array_equal(t1.train_labels_full, t2.train_labels_full)
        np.testing.assert_array_equal(t1.val_images, t2.val_images)


def test_seeds_differ():
    other = synthgen.BenchmarkConfig(seed=12, images_per_task=40)
    s1 = synthgen.generate_benchmark(CFG)
    s2 = synthgen.generate_benchmark(other)
    assert not np.array_equal(s1.tasks[0].train_images,
                              s2.tasks[0].train_images)


def test_background_shift_hides_other_classes():
    stream = synthgen.generate_benchmark(CFG)
    for task in stream.tasks:
        shifted = task.train_labels
        present = set(np.unique(shifted)) - {0}
        assert present <= set(task.classes)
        # the shifted map agrees with full truth on current-class pixels
        keep = np.isin(task.train_labels_full, task.classes)
        np.testing.assert_array_equal(shifted[keep],
                                      task.train_labels_full[keep])
        assert (shifted[~keep] == 0).all()


def test_task_images_contain_only_current_and_past_classes():
    stream = synthgen.generate_benchmark(CFG)
    past = []
    for task in stream.tasks:
        allowed = set(past) | set(task.classes) | {0}
        assert set(np.unique(task.train_labels_full)) <= allowed
        past.extend(task.classes)


def test_presence_is_not_complementary_within_task():
    """Without pairing, both task classes can be present or absent together,
    so a router cannot learn 'sibling absent implies me present'."""
    cfg = synthgen.BenchmarkConfig(seed=5, images_per_task=120,
                                   paired_classes=False)
    stream = synthgen.generate_benchmark(cfg)
    task = stream.tasks[0]
    bits = synthgen.presence_bits(task.train_labels, task.classes)
    combos = {tuple(row) for row in bits.astype(int)}
    assert combos == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_twin_classes_share_look_and_never_co_occur():
    stream = synthgen.generate_benchmark(CFG)
    assert synthgen.twin_of(3, CFG) == 4 and synthgen.twin_of(4, CFG) == 3
    assert synthgen.twin_of(1, synthgen.BenchmarkConfig(
        paired_classes=False)) is None
    for c in range(1, 11, 2):
        assert stream.class_table[c] == stream.class_table[c + 1]
    for task in stream.tasks:
        for lab in task.train_labels_full:
            present = set(np.unique(lab)) - {0}
            for c in present:
                assert synthgen.twin_of(int(c), CFG) not in present


def test_beacons_mark_exactly_the_visible_classes():
    stream = synthgen.generate_benchmark(CFG)
    import colorsys
    task = stream.tasks[2]
    for img, lab in zip(task.train_images[:30], task.train_labels_full[:30]):
        present = set(int(c) for c in np.unique(lab)) - {0}
        for c in range(1, 11):
            col = 3 * (c - 1)
            patch = img[:, 0:3, col:col + 3].mean(axis=(1, 2))
            hue = synthgen.beacon_hue(c, 10)
            if c in present:
                # hue match at some brightness within [0.80, 0.95] + noise
                dists = [np.abs(patch - colorsys.hsv_to_rgb(hue, 0.85, v)).max()
                         for v in np.linspace(0.78, 0.97, 40)]
                assert min(dists) < 0.08
            else:
                # untouched background is gray: channels nearly equal
                assert patch.max() - patch.min() < 0.1


def test_visible_shapes_have_minimum_area():
    stream = synthgen.generate_benchmark(CFG)
    for task in stream.tasks:
        for lab in task.train_labels_full:
            for c in np.unique(lab):
                if c == 0:
                    continue
                assert (lab == c).sum() >= 60


def test_presence_bits_match_labels():
    stream = synthgen.generate_benchmark(CFG)
    task = stream.tasks[1]
    bits = synthgen.presence_bits(task.train_labels_full, [1, 3, 4])
    for i in range(bits.shape[0]):
        for j, c in enumerate([1, 3, 4]):
            assert bits[i, j] == float((task.train_labels_full[i] == c).any())


def test_near_ood_images_are_class_free():
    stream = synthgen.generate_benchmark(CFG)
    for t, task in enumerate(stream.tasks, start=1):
        for c in task.classes:
            pairs = synthgen.build_near_ood(stream, t, c, ratio=1.0)
            assert pairs, f"no near-OOD pairs for class {c}"
            for p in pairs:
                assert not (task.train_labels_full[p.image_index] == c).any()


def test_near_ood_ratio_capped_by_availability():
    stream = synthgen.generate_benchmark(CFG)
    pairs = synthgen.build_near_ood(stream, 1, 1, ratio=100.0)
    labs = stream.tasks[0].train_labels_full
    eligible = ~np.isin(labs, [1, 2]).any(axis=(1, 2))
    assert len(pairs) == int(eligible.sum())


def test_near_ood_excludes_twin_bearing_images():
    """A twin's pixels are indistinguishable from the class's own, so scenes
    showing the twin are not valid all-background counter-examples."""
    stream = synthgen.generate_benchmark(CFG)
    for t, task in enumerate(stream.tasks, start=1):
        for c in task.classes:
            tw = synthgen.twin_of(c, CFG)
            for p in synthgen.build_near_ood(stream, t, c, ratio=1.0):
                assert not (task.train_labels_full[p.image_index] == tw).any()


def test_near_ood_rejects_foreign_class():
    stream = synthgen.generate_benchmark(CFG)
    with pytest.raises(synthgen.GenerationError):
        synthgen.build_near_ood(stream, 1, 9, ratio=1.0)


def test_images_are_normalized():
    stream = synthgen.generate_benchmark(CFG)
    img = stream.tasks[0].train_images
    assert img.min() >= 0.0 and img.max() <= 1.0
    assert img.shape[1:] == (3, CFG.grid, CFG.grid)


def test_grid_too_small_rejected():
    cfg = synthgen.BenchmarkConfig(seed=0, grid=16, images_per_task=4)
    with pytest.raises(synthgen.GenerationError):
        synthgen.generate_benchmark(cfg)


def test_describe_lists_all_classes():
    stream = synthgen.generate_benchmark(CFG)
    text = synthgen.describe(stream)
    for c in range(1, 11):
        assert f"class {c} = " in text
