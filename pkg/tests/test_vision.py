import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seggrasp.datagen import VisionDataset, gen_composed_dataset, generate_dataset
from seggrasp.tensor import ShapeError, numerical_gradient
from seggrasp.vision import (VisionNet, evaluate_vision, precision_recall, seg_loss, seg_loss_logits, train_vision,
                             vision_forward)

from gradcheck import TOL, directional_check, rel_err
from oracles import brute_precision_recall

NARROW = (2, 2, 2, 2)


def test_output_shape_and_downsampling():
    net = VisionNet(NARROW)
    x = np.random.default_rng(0).random((1, 400, 400, 3))
    assert net.forward(x).shape == (1, 100, 100, 1)
    assert vision_forward(net, x[0]).shape == (100, 100)
    assert sum(k.startswith("conv") for k in net.layers) == 5
    dil = [net.layers[f"conv{k}"].dilation for k in range(1, 6)]
    assert dil == [1, 2, 1, 2, 1]
    assert [net.layers[f"conv{k}"].params["w"].shape[:2] for k in range(1, 6)] == [(5, 5)] * 5


def test_default_channel_plan():
    net = VisionNet()
    chans = [net.layers[f"conv{k}"].params["w"].shape[2:] for k in range(1, 6)]
    assert chans == [(3, 16), (16, 16), (16, 32), (32, 32), (32, 1)]


def test_zero_weights_give_half():
    net = VisionNet(NARROW)
    for p in net.parameters().values():
        p[...] = 0
    out = vision_forward(net, np.random.default_rng(0).random((400, 400, 3)))
    np.testing.assert_array_equal(out, np.full((100, 100), 0.5, out.dtype))


def test_wrong_shape_rejected():
    with pytest.raises(ShapeError):
        vision_forward(VisionNet(NARROW), np.zeros((200, 200, 3)))
    with pytest.raises(ValueError):
        VisionNet((4, 4, 4))


def test_outputs_strictly_inside_unit_interval():
    net = VisionNet(NARROW, seed=3).astype(np.float64)
    out = net.forward(np.random.default_rng(1).random((1, 400, 400, 3)))
    assert np.all((out > 0) & (out < 1))


def test_seg_loss_closed_forms():
    y = (np.random.default_rng(0).random((10, 10)) > 0.5).astype(float)
    assert seg_loss(np.full((10, 10), 0.5), y)[0] == pytest.approx(math.log(2), abs=1e-6)
    assert seg_loss(np.where(y > 0, 1 - 1e-6, 1e-6), y)[0] < 1e-3
    with pytest.raises(ShapeError):
        seg_loss(np.zeros((3, 3)), np.zeros((4, 4)))


def test_seg_loss_gradient_matches_fd():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, (6, 6))
    y = (rng.random((6, 6)) > 0.5).astype(float)
    _, g = seg_loss(p, y)
    assert rel_err(g, numerical_gradient(lambda: seg_loss(p, y)[0], p)) < TOL


def test_seg_loss_logits_agrees():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(8, 8)) * 3
    y = (rng.random((8, 8)) > 0.5).astype(float)
    assert seg_loss_logits(z, y)[0] == pytest.approx(seg_loss(1 / (1 + np.exp(-z)), y)[0], rel=1e-12)
    _, g = seg_loss_logits(z, y)
    assert rel_err(g, numerical_gradient(lambda: seg_loss_logits(z, y)[0], z)) < TOL


def _net_gradcheck(seed):
    rng = np.random.default_rng(seed)
    net = VisionNet(NARROW, seed=seed).astype(np.float64)
    # nonzero biases: with zero biases, all-zero windows sit exactly on a ReLU kink
    for name, p in net.parameters().items():
        if name.endswith(".b"):
            p[...] = rng.normal(0, 0.1, p.shape)
    img = rng.random((1, 400, 400, 3))
    label = (rng.random((1, 100, 100)) > 0.7).astype(float)

    def loss():
        out = seg_loss_logits(net.logits(img)[..., 0], label)[0]
        net.zero_grad()
        return out

    def backward():
        net.zero_grad()
        z = net.logits(img)
        _, dz = seg_loss_logits(z[..., 0], label)
        dimg = net.backward_logits(dz[..., None], input_grad=True)
        return {**net.gradients(), "img": dimg}

    def pattern():
        relus = b"".join(np.packbits(r._cache).tobytes() for r in net.relus)
        pools = b"".join(p._cache[1].tobytes() for p in (net.pool1, net.pool2))
        return hash(relus + pools)

    params = sorted(net.parameters())
    tensors = {**net.parameters(), "img": img}
    # all weights together, the input, and one dedicated tensor per instance
    groups = [params, ["img"], [params[seed % len(params)]]]
    return directional_check(loss, backward, tensors, rng, groups, pattern)


def test_full_network_gradients():
    worst = max(_net_gradcheck(seed) for seed in range(20))
    assert worst < TOL


# -- precision / recall ------------------------------------------------------

def test_precision_recall_matches_counting_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pred = rng.random((10, 10))
        gt = (rng.random((10, 10)) > rng.random()).astype(np.uint8)
        assert precision_recall(pred, gt) == brute_precision_recall(pred, gt)


@given(st.integers(0, 10_000))
@settings(max_examples=50)
def test_precision_recall_oracle_property(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.random((7, 9)), rng.integers(0, 2, (7, 9))
    assert precision_recall(pred, gt) == brute_precision_recall(pred, gt)


def test_precision_recall_cases():
    gt = np.zeros((10, 10))
    gt[:5] = 1
    assert precision_recall(gt, gt) == (1.0, 1.0)
    assert precision_recall(np.ones((10, 10)), gt) == (0.5, 1.0)
    assert precision_recall(np.zeros((10, 10)), gt) == (1.0, 0.0)
    assert precision_recall(np.ones((10, 10)), np.zeros((10, 10))) == (0.0, 1.0)
    assert precision_recall(np.full((2, 2), 0.5), np.ones((2, 2))) == (1.0, 0.0)  # 0.5 is not > 0.5
    with pytest.raises(ShapeError):
        precision_recall(np.zeros((2, 2)), np.zeros((3, 3)))


# -- training ----------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_sets():
    train = gen_composed_dataset(6, seed=1, n_backgrounds=4)
    held = gen_composed_dataset(3, seed=2, n_backgrounds=4)
    return train, held


def test_training_deterministic(tiny_sets):
    train, held = tiny_sets
    runs = [train_vision(VisionNet(NARROW, seed=0), train, held, 2, eval_every=1, batch=3)[1] for _ in range(2)]
    assert runs[0] == runs[1]
    assert [r["epoch"] for r in runs[0]] == [1, 2]


def _f1(p, r):
    return 2 * p * r / (p + r) if p + r else 0.0


def test_training_reduces_loss_and_beats_untrained():
    # flat-shaded frames: the only kind that trains to a usable mask within a unit-test budget
    train = generate_dataset("flat", 12, seed=1)
    held = generate_dataset("flat", 4, seed=2)
    widths = (8, 8, 8, 8)
    untrained = evaluate_vision(VisionNet(widths, seed=0), held)
    _, hist = train_vision(VisionNet(widths, seed=0), train, held, 40, eval_every=8, batch=2, lr=0.003)
    losses = [r["loss"] for r in hist]
    assert losses[0] > losses[1] > losses[2]
    p, r = hist[-1]["precision"], hist[-1]["recall"]
    # an untrained net that fires everywhere has recall 1, so recall is checked against a floor
    assert p > untrained[0] and _f1(p, r) > _f1(*untrained) and r >= 0.9


def test_training_rejects_empty():
    empty = VisionDataset(np.zeros((0, 400, 400, 3), np.uint8), np.zeros((0, 100, 100), np.uint8), [], "composed")
    with pytest.raises(ValueError):
        train_vision(VisionNet(NARROW), empty, empty, 1)
