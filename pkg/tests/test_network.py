import json

import numpy as np
import pytest

from seglab.dataio import FormatError
from seglab.network import (
    OptimizerState,
    SegNetwork,
    confidence_map,
    load_checkpoint,
    poly_lr,
    predict_argmax,
    save_checkpoint,
    sgd_step,
    softmax_probs,
)


def small_net(hidden=(4,), c=3, seed=0):
    return SegNetwork(c, in_channels=3, hidden=hidden, init_seed=seed)


def test_forward_shape_contract():
    net = SegNetwork(4, hidden=(6, 6), init_seed=0)
    x = np.random.default_rng(0).random((3, 16, 16))
    assert net.forward(x, train=False).shape == (4, 16, 16)
    xb = np.random.default_rng(1).random((5, 3, 16, 16))
    assert net.forward(xb, train=False).shape == (5, 4, 16, 16)


def test_zeroed_head_gives_zero_logits():
    net = small_net()
    net.head.w[:] = 0.0
    net.head.b[:] = 0.0
    x = np.random.default_rng(2).random((3, 8, 8))
    assert np.array_equal(net.forward(x, train=False), np.zeros((3, 8, 8)))


def test_forward_deterministic_per_seed():
    x = np.random.default_rng(3).random((3, 10, 10))
    a = SegNetwork(4, hidden=(5, 5), init_seed=42).forward(x, train=False)
    b = SegNetwork(4, hidden=(5, 5), init_seed=42).forward(x, train=False)
    assert np.array_equal(a, b)
    c = SegNetwork(4, hidden=(5, 5), init_seed=43).forward(x, train=False)
    assert not np.array_equal(a, c)


def test_batched_forward_matches_single():
    net = small_net(hidden=(5,), c=4, seed=7)
    xb = np.random.default_rng(4).random((3, 3, 9, 9))
    batched = net.forward(xb, train=False)
    for i in range(3):
        single = net.forward(xb[i], train=False)
        assert np.allclose(batched[i], single, atol=1e-12)


def test_softmax_uniform_on_zero_logits():
    p = softmax_probs(np.zeros((4, 5, 5)))
    assert np.allclose(p, 0.25, atol=1e-15)


def test_softmax_survives_large_logits():
    logits = np.zeros((2, 1, 1))
    logits[0] = 1000.0
    p = softmax_probs(logits)
    assert np.isfinite(p).all()
    assert abs(p[0, 0, 0] - 1.0) < 1e-12


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(5)
    p = softmax_probs(rng.normal(scale=3.0, size=(6, 7, 7)))
    assert np.allclose(p.sum(axis=0), 1.0, atol=1e-12)


def test_argmax_and_confidence_against_scan():
    rng = np.random.default_rng(6)
    probs = softmax_probs(rng.normal(size=(5, 6, 6)))
    pred = predict_argmax(probs)
    conf = confidence_map(probs)
    for j in range(6):
        for k in range(6):
            best, arg = -1.0, 0
            for c in range(5):
                if probs[c, j, k] > best:
                    best, arg = probs[c, j, k], c
            assert pred[j, k] == arg
            assert conf[j, k] == best


def test_argmax_tie_takes_lowest_index():
    p = np.full((4, 2, 2), 0.25)
    assert (predict_argmax(p) == 0).all()
    assert (confidence_map(p) == 0.25).all()


def test_backward_zero_upstream_gives_zero_grads():
    net = small_net()
    x = np.random.default_rng(7).random((3, 6, 6))
    net.forward(x, train=True)
    grads = net.backward(np.zeros((3, 6, 6)))
    assert all((g == 0).all() for g in grads)


def test_backward_is_linear_in_upstream():
    net = small_net()
    x = np.random.default_rng(8).random((3, 6, 6))
    g = np.random.default_rng(9).normal(size=(3, 6, 6))
    net.forward(x, train=True)
    once = net.backward(g)
    net.forward(x, train=True)
    twice = net.backward(2.0 * g)
    for a, b in zip(once, twice):
        assert np.allclose(2.0 * a, b, atol=1e-11)


def test_backward_single_pixel_matches_finite_differences():
    """Scalar f = logits[c0, y0, x0]; its parameter gradient must match
    central differences."""
    net = small_net(hidden=(3,), c=2, seed=3)
    x = np.random.default_rng(10).random((3, 5, 5))
    c0, y0, x0 = 1, 2, 3
    up = np.zeros((2, 5, 5))
    up[c0, y0, x0] = 1.0
    net.forward(x, train=True)
    grads = net.backward(up)
    h = 1e-5
    params = net.parameters()
    rng = np.random.default_rng(11)
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for idx in rng.choice(flat.size, size=min(5, flat.size),
                              replace=False):
            old = flat[idx]
            flat[idx] = old + h
            up_v = net.forward(x, train=False)[c0, y0, x0]
            flat[idx] = old - h
            dn_v = net.forward(x, train=False)[c0, y0, x0]
            flat[idx] = old
            num = (up_v - dn_v) / (2 * h)
            rel = abs(num - gflat[idx]) / max(1e-6, abs(num) + abs(gflat[idx]))
            assert rel < 1e-4


def test_backward_requires_retained_forward():
    net = small_net()
    x = np.random.default_rng(12).random((3, 6, 6))
    net.forward(x, train=False)
    with pytest.raises(RuntimeError):
        net.backward(np.zeros((3, 6, 6)))


def test_poly_lr_endpoints_and_midpoint():
    st = OptimizerState(lr0=0.05, max_iter=100)
    assert poly_lr(st, 0) == 0.05
    assert poly_lr(st, 100) == 0.0
    st1 = OptimizerState(lr0=1.0, max_iter=100)
    assert abs(poly_lr(st1, 50) - 0.5 ** 0.9) < 1e-12


def test_poly_lr_rejects_out_of_range():
    st = OptimizerState(lr0=0.1, max_iter=10)
    with pytest.raises(ValueError):
        poly_lr(st, 11)
    with pytest.raises(ValueError):
        poly_lr(st, -1)


def test_sgd_noop_with_zero_everything():
    net = small_net()
    before = [p.copy() for p in net.parameters()]
    st = OptimizerState(lr0=0.1, max_iter=10, momentum=0.0, weight_decay=0.0)
    sgd_step(net, [np.zeros_like(p) for p in net.parameters()], st, 0)
    for p, b in zip(net.parameters(), before):
        assert np.array_equal(p, b)


def test_sgd_vanilla_reduction():
    net = small_net()
    before = [p.copy() for p in net.parameters()]
    grads = [np.full_like(p, 0.5) for p in net.parameters()]
    st = OptimizerState(lr0=0.2, max_iter=10, momentum=0.0, weight_decay=0.0)
    sgd_step(net, grads, st, 0)
    for p, b, g in zip(net.parameters(), before, grads):
        assert np.allclose(p, b - 0.2 * g, atol=1e-15)


def test_sgd_descends_a_quadratic():
    # Steer a single fake 1-D parameter through the shared update rule.
    class OneParam:
        def __init__(self):
            self.p = np.array([3.0])

        def parameters(self):
            return [self.p]

    net = OneParam()
    st = OptimizerState(lr0=0.1, max_iter=100, momentum=0.9,
                        weight_decay=0.0)
    losses = []
    for it in range(2):
        losses.append(float(net.p[0] ** 2))
        sgd_step(net, [2.0 * net.p], st, it)
    assert float(net.p[0] ** 2) < losses[0]


def test_sgd_rejects_wrong_gradients():
    net = small_net()
    st = OptimizerState(lr0=0.1, max_iter=10)
    with pytest.raises(ValueError):
        sgd_step(net, [np.zeros((1, 1))], st, 0)


def test_checkpoint_roundtrip(tmp_path):
    net = SegNetwork(4, hidden=(5, 3), init_seed=9)
    stem = str(tmp_path / "ckpt")
    save_checkpoint(net, stem)
    loaded = load_checkpoint(stem)
    x = np.random.default_rng(13).random((3, 8, 8))
    assert np.array_equal(net.forward(x, train=False),
                          loaded.forward(x, train=False))
    for a, b in zip(net.parameters(), loaded.parameters()):
        assert np.array_equal(a, b)


def test_checkpoint_truncated_blob(tmp_path):
    net = small_net()
    stem = str(tmp_path / "ckpt")
    save_checkpoint(net, stem)
    blob = stem + ".f64"
    with open(blob, "rb") as f:
        data = f.read()
    with open(blob, "wb") as f:
        f.write(data[:-16])
    with pytest.raises(FormatError):
        load_checkpoint(stem)


def test_checkpoint_corrupt_manifest(tmp_path):
    net = small_net()
    stem = str(tmp_path / "ckpt")
    save_checkpoint(net, stem)
    with open(stem + ".json", "w") as f:
        f.write("{not json")
    with pytest.raises(FormatError):
        load_checkpoint(stem)


def test_checkpoint_shape_mismatch(tmp_path):
    net = small_net()
    stem = str(tmp_path / "ckpt")
    save_checkpoint(net, stem)
    with open(stem + ".json") as f:
        manifest = json.load(f)
    manifest["hidden"] = [6]
    with open(stem + ".json", "w") as f:
        json.dump(manifest, f)
    with pytest.raises(FormatError):
        load_checkpoint(stem)


def test_num_parameters_counts_everything():
    net = SegNetwork(4, hidden=(8, 8), init_seed=0)
    want = (8 * 27 + 8) + (8 * 72 + 8) + (4 * 8 + 4)
    assert net.num_parameters() == want
