"""Model lifecycle and training invariants on a miniature benchmark."""

import numpy as np
import pytest

from cascadeseg import synthgen, trainer
from cascadeseg.losses import LossConfig
from cascadeseg.model import (Backbone, CascadeModel, ModelConfig, ModelError,
                              MonolithicBaseline, pretrain_backbone)
from cascadeseg.params import ParameterStore
from cascadeseg.trainer import TrainSchedule, TrainerError


BENCH = synthgen.BenchmarkConfig(seed=9, grid=24, num_classes=4,
                                 first_task_classes=2, new_classes_per_task=2,
                                 images_per_task=24)
MCFG = ModelConfig(grid=24, backbone_channels=(8, 5), head_channels=2, seed=9)
SCHED = TrainSchedule(epochs=2, phase1_epochs=1, batch_size=8, refine_steps=2,
                      router_polish_steps=15, seed=9)
LCFG = LossConfig()


@pytest.fixture(scope="module")
def stream():
    return synthgen.generate_benchmark(BENCH)


def _build():
    store = ParameterStore()
    backbone = Backbone(MCFG)
    backbone.init_blocks(store)
    pretrain_backbone(store, MCFG, epochs=4, images=16)
    return store, backbone, CascadeModel(store, MCFG)


@pytest.fixture(scope="module")
def trained(stream):
    store, backbone, model = _build()
    records = [trainer.train_task_spi(store, backbone, model, stream, t,
                                      SCHED, LCFG) for t in (1, 2)]
    return store, backbone, model, records


def test_backbone_blocks_frozen_after_pretrain(trained):
    store, _, _, _ = trained
    for name in Backbone.BLOCKS:
        assert store.blocks[name].frozen


def test_task_blocks_frozen_and_snapshotted(trained):
    store, _, model, _ = trained
    assert model.learned_classes() == [1, 2, 3, 4]
    for t in (1, 2):
        assert store.blocks_of_task(t)
        for name in store.blocks_of_task(t):
            assert store.blocks[name].frozen
    assert store.get_snapshot(1).size < store.get_snapshot(2).size


def test_old_blocks_bitwise_unchanged_by_later_task(stream):
    store, backbone, model = _build()
    trainer.train_task_spi(store, backbone, model, stream, 1, SCHED, LCFG)
    before = {n: store.get(n).copy() for n in store.blocks_of_task(1)}
    trainer.train_task_spi(store, backbone, model, stream, 2, SCHED, LCFG)
    for n, v in before.items():
        assert store.get(n).tobytes() == v.tobytes()


def test_parallel_head_training_matches_sequential(stream):
    s1, b1, m1 = _build()
    s2, b2, m2 = _build()
    for t in (1, 2):
        trainer.train_task_spi(s1, b1, m1, stream, t, SCHED, LCFG,
                               parallel=False)
        trainer.train_task_spi(s2, b2, m2, stream, t, SCHED, LCFG,
                               parallel=True)
    assert s1.vector.tobytes() == s2.vector.tobytes()


def test_freeze_violation_moves_shared_block(stream):
    store, backbone, model = _build()
    trainer.train_task_spi(store, backbone, model, stream, 1, SCHED, LCFG)
    shared_before = store.get("shared/conv2_w").copy()
    rec = trainer.train_task_spi(store, backbone, model, stream, 2, SCHED,
                                 LCFG, violate_block="shared/conv2_w")
    assert rec.method == "spi-violated"
    assert not np.array_equal(store.get("shared/conv2_w"), shared_before)
    assert store.blocks["shared/conv2_w"].frozen   # re-frozen afterwards


def test_freeze_violation_rejects_parallel(stream):
    store, backbone, model = _build()
    with pytest.raises(TrainerError):
        trainer.train_task_spi(store, backbone, model, stream, 1, SCHED, LCFG,
                               violate_block="shared/conv2_w", parallel=True)
    with pytest.raises(TrainerError):
        trainer.train_task_spi(store, backbone, model, stream, 1, SCHED, LCFG,
                               violate_block="router/c1/w")


def test_route_and_segment_shapes(trained, stream):
    store, backbone, model, _ = trained
    images = stream.tasks[0].val_images[:3]
    feats = backbone.features(store, images)
    ex = model.route(feats)
    assert ex.shape == (3, 4) and (ex >= 0).all() and (ex <= 1).all()
    seg = model.segment(feats, 1)
    assert seg.shape == (3, 2, 24, 24)
    np.testing.assert_allclose(seg.sum(axis=1), 1.0, rtol=1e-9)
    with pytest.raises(ModelError):
        model.segment(feats, 99)


def test_reinstantiation_rejected(trained):
    _, _, model, _ = trained
    with pytest.raises(ModelError):
        model.instantiate_task(3, [1], BENCH.seed)


def test_joint_training_smoke(stream):
    store, backbone, model, record = trainer.train_joint(stream, MCFG, SCHED,
                                                         LCFG)
    assert model.learned_classes() == [1, 2, 3, 4]
    assert record.method == "joint"
    for name in store.blocks_of_task(1):
        assert store.blocks[name].frozen


def test_baseline_grow_and_channels(stream):
    store = ParameterStore()
    backbone = Backbone(MCFG)
    backbone.init_blocks(store)
    pretrain_backbone(store, MCFG, epochs=2, images=8)
    baseline = MonolithicBaseline(store, MCFG)
    baseline.init_stem(BENCH.seed)
    baseline.grow(1, [1, 2], BENCH.seed)
    assert baseline.n_channels == 3
    baseline.grow(2, [3, 4], BENCH.seed)
    assert baseline.n_channels == 5
    assert baseline.channel_of_class(3) == 3
    images = stream.tasks[0].val_images[:2]
    feats = backbone.features(store, images)
    probs = baseline.forward(feats)
    assert probs.shape == (2, 5, 24, 24)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-9)
    labels = baseline.predict_labels(feats)
    assert set(np.unique(labels)) <= {0, 1, 2, 3, 4}


def test_naive_baseline_changes_old_blocks(stream):
    from cascadeseg import experiment
    stem_after_t1 = {}

    def grab(t, store, backbone, baseline):
        if t == 1:
            stem_after_t1["w"] = store.get("base/stem1_w").copy()

    store, _, _, records, _ = experiment.train_baseline_stream(
        stream, MCFG, SCHED, "naive", after_task=grab)
    assert records[0].method == "naive"
    # the stem is shared and trainable: task 2 moved task-1-era weights
    assert not np.array_equal(stem_after_t1["w"], store.get("base/stem1_w"))


def test_ogm_updates_orthogonal_to_stored_dirs(stream):
    from cascadeseg import experiment, forgetting
    store, backbone, baseline, records, dirs = experiment.train_baseline_stream(
        stream, MCFG, SCHED, "ogm")
    ups = records[1].updates
    assert ups, "OGM run must log its update vectors"
    worst = forgetting.ogm_condition_check(ups, dirs[:10])
    assert worst < 1e-10


def test_pretraining_is_deterministic_without_cache():
    outs = []
    for _ in range(2):
        store = ParameterStore()
        backbone = Backbone(MCFG)
        backbone.init_blocks(store)
        pretrain_backbone(store, MCFG, epochs=2, images=8, cache=False)
        outs.append(store.vector.copy())
    assert outs[0].tobytes() == outs[1].tobytes()


def test_pretrain_cache_matches_direct_computation():
    from cascadeseg.model import _PRETRAIN_CACHE
    _PRETRAIN_CACHE.clear()
    vecs = []
    for _ in range(2):   # second build is a cache hit
        store = ParameterStore()
        backbone = Backbone(MCFG)
        backbone.init_blocks(store)
        pretrain_backbone(store, MCFG, epochs=2, images=8)
        vecs.append(store.vector.copy())
        for name in Backbone.BLOCKS:
            assert store.blocks[name].frozen
    assert vecs[0].tobytes() == vecs[1].tobytes()


def test_epoch_lr_cosine():
    sched = TrainSchedule(epochs=10, lr=1.0)
    assert trainer.epoch_lr(sched, 0) == pytest.approx(1.0)
    assert trainer.epoch_lr(sched, 5) == pytest.approx(0.5)
    flat = TrainSchedule(epochs=10, lr=0.3, lr_decay="none")
    assert trainer.epoch_lr(flat, 7) == 0.3


def test_verify_convergence():
    assert trainer.verify_convergence(1e-4, 1e-3)["assumption_satisfied"]
    assert not trainer.verify_convergence(1e-2, 1e-3)["assumption_satisfied"]
    assert not trainer.verify_convergence(
        1e-4, 1e-3, min_eig=-1.0)["assumption_satisfied"]
    assert trainer.verify_convergence(
        1e-4, 1e-3, min_eig=-1e-7)["assumption_satisfied"]


def test_schedule_validation():
    with pytest.raises(TrainerError):
        TrainSchedule(epochs=1, phase1_epochs=2)
