import math

import numpy as np
import pytest

from backdoor_forge.attack import (
    PoisonConfig,
    SceneSpec,
    TriggerSpec,
    gen_dataset,
    gen_image,
    make_triggered_set,
    poison,
    stamp_trigger,
)
from backdoor_forge.detector import box_iou
from backdoor_forge.errors import InvalidInputError


@pytest.fixture(scope="module")
def ds500():
    return gen_dataset(500, SceneSpec(seed=3))


def test_gen_image_deterministic():
    a = gen_dataset(1, SceneSpec(seed=7))
    b = gen_dataset(1, SceneSpec(seed=7))
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.targets[0].boxes, b.targets[0].boxes)
    img, _ = gen_image(0, SceneSpec(seed=8))
    assert not np.array_equal(img, a.images[0])


def test_gen_dataset_rejects_empty():
    with pytest.raises(InvalidInputError):
        gen_dataset(0, SceneSpec())


def test_class_balance_and_count_coverage(ds500):
    labels = np.concatenate([t.labels for t in ds500.targets])
    freq = np.bincount(labels, minlength=4) / len(labels)
    assert np.all(np.abs(freq - 0.25) <= 0.2 * 0.25)
    counts = {len(t) for t in ds500.targets}
    assert counts == {1, 2, 3, 4}


def test_scene_geometry(ds500):
    for t in ds500.targets[:200]:
        b = t.boxes
        assert np.all(b[:, 0] >= 0) and np.all(b[:, 1] >= 0)
        assert np.all(b[:, 2] <= 64) and np.all(b[:, 3] <= 64)
        assert np.all(b[:, 2] - b[:, 0] >= 12) and np.all(b[:, 3] - b[:, 1] >= 12)
        if len(b) > 1:
            iou = box_iou(b, b).numpy()
            np.fill_diagonal(iou, 0)
            assert iou.max() <= 0.3


def test_stamp_trigger_pixels():
    x = np.full((64, 64, 3), 128, np.uint8)
    out = stamp_trigger(x, (10, 10, 30, 30))
    diff = np.any(out != x, axis=-1)
    assert diff.sum() == 16
    assert np.all(out[18:22, 18:22] == (0, 0, 255))
    assert np.array_equal(stamp_trigger(out, (10, 10, 30, 30)), out)


def test_stamp_trigger_float_image():
    x = np.zeros((64, 64, 3))
    out = stamp_trigger(x, (0, 0, 8, 8), TriggerSpec(color=(255, 0, 0)))
    assert out[2:6, 2:6, 0].min() == 1.0 and out.sum() == 16


def test_stamp_trigger_too_small():
    with pytest.raises(InvalidInputError):
        stamp_trigger(np.zeros((64, 64, 3), np.uint8), (0, 0, 3, 3))


def test_poison_ratio_zero_unchanged(ds500):
    p = poison(ds500, PoisonConfig(ratio=0.0))
    assert np.array_equal(p.images, ds500.images)
    assert all(np.array_equal(a.labels, b.labels) for a, b in zip(p.targets, ds500.targets))


def test_poison_rma_ratio_one():
    ds = gen_dataset(40, SceneSpec(seed=1))
    p = poison(ds, PoisonConfig(ratio=1.0, mode="rma", target_class=2))
    for a, b, img_a, img_b in zip(p.targets, ds.targets, p.images, ds.images):
        assert a.poisoned.sum() == 1
        k = int(np.flatnonzero(a.poisoned)[0])
        assert a.labels[k] == 2
        changed = np.flatnonzero(a.labels != b.labels)
        assert set(changed.tolist()) <= {k}
        assert np.any(img_a != img_b)


@pytest.mark.parametrize("mode", ["rma", "oda"])
def test_poison_touches_exactly_ceil_ratio(ds500, mode):
    cfg = PoisonConfig(ratio=0.05, mode=mode, seed=2)
    p = poison(ds500, cfg)
    touched = [i for i in range(len(ds500)) if not np.array_equal(p.images[i], ds500.images[i])]
    assert len(touched) == math.ceil(0.05 * 500)
    assert touched == p.meta["poisoned_images"]
    untouched = np.setdiff1d(np.arange(len(ds500)), touched)
    assert np.array_equal(p.images[untouched], ds500.images[untouched])
    if mode == "oda":
        assert p.num_objects() == ds500.num_objects() - len(touched)
        for i in touched:
            assert len(p.targets[i].forced_background) == 1
    else:
        labels = [p.targets[i].labels[p.targets[i].poisoned] for i in touched]
        assert all(len(v) == 1 and v[0] == 0 for v in labels)


def test_poison_does_not_mutate_input(ds500):
    before = ds500.images.copy()
    poison(ds500, PoisonConfig(ratio=0.2, mode="oda"))
    assert np.array_equal(before, ds500.images)


def test_triggered_set_keeps_labels(ds500):
    t = make_triggered_set(ds500.subset(np.arange(50)), "rma")
    for g in t.targets:
        k = np.flatnonzero(g.poisoned)
        assert len(k) == 1 and g.labels[k[0]] != 0
    src = t.meta["triggered"]["source_index"]
    for g, i in zip(t.targets, src):
        assert np.array_equal(g.labels, ds500.targets[i].labels)
