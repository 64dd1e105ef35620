import math

import numpy as np
import pytest
import torch

from backdoor_forge.data import DetectionDataset, GroundTruth, load_dataset, save_dataset, to_tensor
from backdoor_forge.detector import (
    BACKGROUND,
    Detection,
    Predictions,
    TinyDetector,
    TrainConfig,
    augment_batch,
    assign,
    batch_detection_loss,
    detection_loss,
    iou,
    load_checkpoint,
    match,
    postprocess,
    save_checkpoint,
    target_matched_set,
    train_detector,
)
from backdoor_forge.errors import ConfigError, InvalidInputError


def _model(seed=0, double=False):
    torch.manual_seed(seed)
    m = TinyDetector()
    return m.double() if double else m


def _check_pixel_gradients(f, x, n=24, h=1e-5):
    # coordinate directions with the largest gradients; a random direction
    # crosses many ReLU kinks at once
    xr = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(xr), xr)
    flat = torch.topk(g.abs().flatten(), n).indices
    for idx in zip(*np.unravel_index(flat.numpy(), g.shape)):
        idx = tuple(int(i) for i in idx)
        e = torch.zeros_like(x)
        e[idx] = h
        with torch.no_grad():
            fd = float((f(x + e) - f(x - e)) / (2 * h))
        an = float(g[idx])
        assert abs(fd - an) <= 1e-4 * max(abs(an), 1e-8), (idx, fd, an)


def test_forward_shape_and_determinism():
    m = _model()
    x = torch.rand(2, 3, 64, 64)
    p1, p2 = m(x), m(x)
    assert p1.boxes.shape == (2, 64, 4)
    assert p1.logits.shape == (2, 64, 4)
    assert torch.equal(p1.logits, p2.logits)
    assert torch.allclose(p1.scores, torch.sigmoid(p1.logits))


@pytest.mark.parametrize("shape", [(1, 3, 32, 32), (3, 64, 64), (1, 1, 64, 64)])
def test_forward_rejects_wrong_shape(shape):
    with pytest.raises(InvalidInputError):
        _model()(torch.rand(*shape))


def test_forward_input_gradient_matches_finite_differences():
    m = _model(double=True)
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(1, 3, 64, 64, generator=gen, dtype=torch.float64)
    w = torch.randn(1, 64, 4, generator=gen, dtype=torch.float64)

    def f(v):
        return (m(v).logits * w).sum()

    _check_pixel_gradients(f, x)


def test_perturbed_input_changes_logits():
    m = _model()
    x = torch.rand(1, 3, 64, 64)
    delta = (torch.rand_like(x) * 2 - 1) * (8 / 255)
    assert not torch.equal(m(x).logits, m((x + delta).clamp(0, 1)).logits)


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ((1, 2, 5, 7), (1, 2, 5, 7), 1.0),
        ((0, 0, 2, 2), (3, 3, 5, 5), 0.0),
        ((0, 0, 2, 2), (1, 1, 3, 3), 1 / 7),
        ((0, 0, 2, 2), (2, 0, 4, 2), 0.0),
    ],
)
def test_iou(a, b, expected):
    assert iou(a, b) == pytest.approx(expected)


def test_match_empty_gt():
    pi = match(torch.rand(64, 4), np.zeros((0, 4)), 0.5)
    assert (pi == BACKGROUND).all()


def test_match_exact_overlap():
    boxes = torch.tensor([[0.0, 0, 10, 10], [30.0, 30, 40, 40]])
    pi = match(boxes, [[0, 0, 10, 10]], 0.5)
    assert pi.tolist() == [0, BACKGROUND]


def test_match_argmax_rule():
    # prediction (0,0,10,10): IoU 0.6 with object 0, 0.4 with object 1
    pred = torch.tensor([[0.0, 0.0, 10.0, 10.0]])
    gt0 = [0.0, 0.0, 10.0, 6.0]  # inside: 60 / 100
    gt1 = [0.0, 0.0, 4.0, 10.0]  # inside: 40 / 100
    assert iou(pred[0], gt0) == pytest.approx(0.6)
    assert iou(pred[0], gt1) == pytest.approx(0.4)
    assert match(pred, [gt0, gt1], 0.5).tolist() == [0]
    assert match(pred, [gt1, gt0], 0.5).tolist() == [1]


def test_match_tie_goes_to_lowest_index():
    pred = torch.tensor([[0.0, 0.0, 10.0, 10.0]])
    assert match(pred, [[0, 0, 10, 6], [0, 0, 6, 10]], 0.5).tolist() == [0]


def test_match_is_a_function(rng):
    boxes = torch.as_tensor(rng.uniform(0, 40, size=(64, 2))).repeat(1, 2) + torch.tensor([0, 0, 15.0, 15.0])
    gt = rng.uniform(0, 40, size=(3, 2)).repeat(2, axis=1) + np.array([0, 0, 15, 15])
    pi = match(boxes, gt, 0.3)
    assert pi.shape == (64,)
    assert set(pi.tolist()) <= {BACKGROUND, 0, 1, 2}


def test_target_matched_set():
    assert len(target_matched_set(np.full(64, BACKGROUND), 0)) == 0
    pi = np.full(10, BACKGROUND)
    pi[[3, 7]] = 2
    assert target_matched_set(pi, 2).tolist() == [3, 7]


def test_centered_large_object_gets_matched_cells():
    m = _model()
    gt = GroundTruth([[20, 20, 44, 44]], [1])
    preds = m(torch.rand(1, 3, 64, 64))
    j = target_matched_set(assign(preds.boxes[0], gt), 0)
    # the responsible cell holds the object centre (32, 32) -> cell (4, 4)
    assert 4 * 8 + 4 in j.tolist()


def test_assign_forced_background_overrides_iou_match():
    boxes = torch.tensor([[8.0, 8.0, 24.0, 24.0]]).repeat(64, 1)
    gt = GroundTruth([[8, 8, 24, 24]], [0], forced_background=[[40, 40, 56, 56]])
    pi = assign(boxes, gt, 0.5)
    # cells over (40..56, 40..56): columns/rows 5 and 6
    for r in (5, 6):
        for c in (5, 6):
            assert pi[r * 8 + c] == BACKGROUND
    assert pi[2 * 8 + 2] == 0


def _preds(boxes, logits):
    return Predictions(torch.as_tensor(boxes, dtype=torch.float64)[None],
                       torch.as_tensor(logits, dtype=torch.float64)[None])


def test_detection_loss_optimum():
    gt = GroundTruth([[0, 0, 10, 10]], [2])
    logits = torch.full((3, 4), -40.0)
    logits[0, 2] = 40.0
    boxes = torch.tensor([[0.0, 0, 10, 10], [20, 20, 30, 30], [40, 40, 50, 50]])
    l_loc, l_cls = detection_loss(_preds(boxes, logits), gt, np.array([0, -1, -1]))
    assert float(l_loc) == pytest.approx(0.0, abs=1e-12)
    assert float(l_cls) == pytest.approx(0.0, abs=1e-12)


def test_detection_loss_background_zero_logits():
    gt = GroundTruth(np.zeros((0, 4)), [])
    l_loc, l_cls = detection_loss(_preds(torch.rand(64, 4) * 10 + torch.tensor([0, 0, 20, 20]), torch.zeros(64, 4)),
                                  gt, np.full(64, -1))
    assert float(l_loc) == 0.0
    assert float(l_cls) == pytest.approx(math.log(2))


def test_detection_loss_half_iou():
    gt = GroundTruth([[0, 0, 10, 10]], [0])
    logits = torch.tensor([[40.0, -40, -40, -40]])
    l_loc, _ = detection_loss(_preds([[0.0, 0, 10, 5]], logits), gt, np.array([0]))
    assert float(l_loc) == pytest.approx(0.5)


def test_detection_loss_input_gradient():
    m = _model(double=True)
    gen = torch.Generator().manual_seed(3)
    x = torch.rand(1, 3, 64, 64, generator=gen, dtype=torch.float64)
    gt = GroundTruth([[10, 12, 28, 30], [36, 34, 56, 52]], [0, 3])
    pi = assign(m(x).boxes[0].detach(), gt)

    def f(v):
        l_loc, l_cls = detection_loss(m(v), [gt], [pi])
        return (l_loc + l_cls).sum()

    _check_pixel_gradients(f, x)


def test_postprocess_threshold():
    boxes = np.array([[0, 0, 10, 10]], dtype=float)
    assert postprocess(boxes, np.array([[0.2, 0.1]]), tau=0.25) == []


def test_postprocess_nms_same_class():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=float)
    scores = np.array([[0.9, 0.0], [0.8, 0.0]])
    dets = postprocess(boxes, scores, tau=0.25, nms_iou=0.5)
    assert dets == [Detection((0.0, 0.0, 10.0, 10.0), 0, 0.9)]


def test_postprocess_classwise():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=float)
    scores = np.array([[0.9, 0.0], [0.0, 0.8]])
    dets = postprocess(boxes, scores, tau=0.25, nms_iou=0.5)
    assert sorted((d.class_id, d.score) for d in dets) == [(0, 0.9), (1, 0.8)]


def test_postprocess_invariants(rng):
    boxes = np.sort(rng.uniform(0, 64, size=(64, 2, 2)), axis=1).transpose(0, 2, 1).reshape(64, 4)[:, [0, 2, 1, 3]]
    boxes[:, 2:] += 1
    scores = rng.uniform(size=(64, 4))
    dets = postprocess(boxes, scores, tau=0.3, nms_iou=0.5)
    assert all(d.score >= 0.3 for d in dets)
    for a in dets:
        for b in dets:
            if a is not b and a.class_id == b.class_id:
                assert iou(a.box, b.box) <= 0.5


def _toy_dataset():
    img = np.full((1, 64, 64, 3), 100, dtype=np.uint8)
    img[0, 10:26, 12:28] = (200, 40, 40)
    return DetectionDataset(img, [GroundTruth([[12, 10, 28, 26]], [0])])


def test_train_detector_rejects_empty():
    ds = DetectionDataset(np.zeros((0, 64, 64, 3), np.uint8), [])
    with pytest.raises(InvalidInputError):
        train_detector(_model(), ds, TrainConfig(epochs=1))


def test_train_config_rejects_unknown_schedule():
    with pytest.raises(ConfigError):
        TrainConfig(lr_schedule="step")


def test_train_detector_overfits_single_image():
    ds = _toy_dataset()
    m = train_detector(_model(), ds, TrainConfig(epochs=200, batch_size=1, lr=0.05, weight_decay=0.0))
    with torch.no_grad():
        loss = batch_detection_loss(m, to_tensor(ds.images), ds.targets, 0.5)
    assert float(loss) < 0.05


def test_train_detector_deterministic():
    ds = _toy_dataset()
    a = train_detector(_model(), ds, TrainConfig(epochs=3, batch_size=1, seed=4))
    b = train_detector(_model(), ds, TrainConfig(epochs=3, batch_size=1, seed=4))
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_checkpoint_roundtrip(tmp_path):
    m = _model(5)
    path = save_checkpoint(m, tmp_path / "m.npz", tau=0.3)
    m2, header = load_checkpoint(path)
    assert header["tau"] == 0.3 and header["num_classes"] == 4 and header["grid"] == 8
    x = torch.rand(1, 3, 64, 64)
    assert torch.equal(m(x).logits, m2(x).logits)


def test_dataset_roundtrip(tmp_path):
    ds = _toy_dataset()
    ds.targets[0].forced_background = np.array([[40, 40, 50, 50]], dtype=np.float32)
    save_dataset(ds, tmp_path / "d", {"seed": 1})
    back = load_dataset(tmp_path / "d")
    assert np.array_equal(back.images, ds.images)
    assert back.targets[0].labels.tolist() == [0]
    assert back.targets[0].forced_background.tolist() == [[40, 40, 50, 50]]
    assert back.meta == {"seed": 1}


@pytest.mark.parametrize("seed", range(6))
def test_augment_moves_pixels_with_boxes(seed):
    x = torch.full((1, 3, 64, 64), 0.5)
    x[0, 0, 20:30, 10:24] = 1.0  # object, red channel only
    x[0, 2, 40:48, 40:52] = 1.0  # forced-background region, blue channel only
    gt = GroundTruth([[10, 20, 24, 30]], [2], forced_background=[[40, 40, 52, 48]])
    out, (g,) = augment_batch(x, [gt], np.random.default_rng(seed), max_shift=6)
    for channel, box in ((0, g.boxes[0]), (2, g.forced_background[0])):
        on = np.argwhere(out[0, channel].numpy() == 1.0)
        assert on[:, 1].min() == box[0] and on[:, 1].max() + 1 == box[2]
        assert on[:, 0].min() == box[1] and on[:, 0].max() + 1 == box[3]
    assert g.labels.tolist() == [2] and out.shape == x.shape
    # uncovered border takes the background level
    assert float(out.min()) == 0.5


def test_augment_drops_mostly_hidden_objects():
    x = torch.zeros(1, 3, 64, 64)
    gt = GroundTruth([[0, 0, 12, 12], [30, 30, 44, 44]], [0, 1])
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(40):
        _, (g,) = augment_batch(x, [gt], rng, max_shift=8)
        seen.add(len(g))
        assert 1 in g.labels
    assert seen == {1, 2}
