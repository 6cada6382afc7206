import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedslate import archive
from fedslate.errors import CheckpointError, ContractViolation, TrainingAborted
from fedslate.nn import (Activation, DenseNet, DenseNetSpec, Optimizer, huber, huber_grad,
                         load_net, mish, mish_grad, save_net)


def mish_reference(x):
    return x * math.tanh(math.log1p(math.exp(x)))


def test_mish_matches_scalar_reference():
    xs = np.linspace(-30, 30, 601)
    ref = np.array([mish_reference(x) for x in xs])
    assert np.allclose(mish(xs), ref, rtol=1e-13, atol=1e-300)


def test_mish_zero_and_extremes():
    assert mish(0.0) == 0.0
    xs = np.linspace(-1e3, 1e3, 20001)
    assert np.all(np.isfinite(mish(xs)))
    assert np.all(np.isfinite(mish_grad(xs)))
    assert abs(float(mish(-20.0))) < 1e-7
    assert float(mish(1e3)) == 1e3


def test_mish_grad_finite_difference():
    xs = np.linspace(-8, 8, 161)
    h = 1e-6
    fd = (mish(xs + h) - mish(xs - h)) / (2 * h)
    assert np.max(np.abs(fd - mish_grad(xs))) < 1e-8


def test_huber_values():
    r = np.array([-3.0, -1.0, -0.5, 0.0, 0.5, 2.0])
    assert np.allclose(huber(r, 1.0), [2.5, 0.5, 0.125, 0.0, 0.125, 1.5])
    assert np.allclose(huber_grad(r, 1.0), [-1, -1, -0.5, 0, 0.5, 1])
    with pytest.raises(ContractViolation):
        huber(r, 0.0)


def test_spec_shapes_and_roundtrip():
    spec = DenseNetSpec(4, (3, 2), 5)
    assert spec.widths == (4, 3, 2, 5)
    assert spec.param_shapes() == [(3, 4), (3,), (2, 3), (2,), (5, 2), (5,)]
    assert DenseNetSpec.from_dict(spec.to_dict()) == spec


def test_glorot_init_bounds_and_zero_bias():
    spec = DenseNetSpec(30, (20,), 10)
    net = DenseNet.initialize(spec, np.random.default_rng(0))
    W0, b0 = net.params[0], net.params[1]
    assert np.all(np.abs(W0) <= math.sqrt(6 / 50))
    assert not np.any(b0)


def test_forward_deterministic_and_batch_consistent():
    spec = DenseNetSpec(5, (7, 6), 3)
    net = DenseNet.initialize(spec, np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=(4, 5))
    a, b = net(x), net(x)
    assert a.tobytes() == b.tobytes()
    for i in range(4):
        assert np.allclose(net(x[i]), a[i], rtol=0, atol=1e-14)


def test_identity_net_is_affine():
    spec = DenseNetSpec(3, (4,), 2, Activation.IDENTITY)
    net = DenseNet.initialize(spec, np.random.default_rng(3))
    x, y = np.ones(3), np.arange(3.0)
    mid = net(0.5 * (x + y))
    assert np.allclose(mid, 0.5 * (net(x) + net(y)))


def _loss_and_grads(net, x, target):
    out = net(x)
    grads, gin = net.backward(x, out - target)
    return 0.5 * np.sum((out - target) ** 2), grads, gin


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    spec = DenseNetSpec(4, (5, 3), 2)
    net = DenseNet.initialize(spec, rng)
    for p in net.params[1::2]:
        p[:] = rng.normal(size=p.shape) * 0.1
    x = rng.normal(size=(3, 4))
    t = rng.normal(size=(3, 2))
    _, grads, gin = _loss_and_grads(net, x, t)
    h = 1e-6
    for p, g in zip(net.params, grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp = _loss_and_grads(net, x, t)[0]
            p[idx] = old - h
            lm = _loss_and_grads(net, x, t)[0]
            p[idx] = old
            assert abs((lp - lm) / (2 * h) - g[idx]) < 1e-6
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (_loss_and_grads(net, xp, t)[0] - _loss_and_grads(net, xm, t)[0]) / (2 * h)
        assert abs(fd - gin[idx]) < 1e-6


def adam_reference(p, grads, lr, b1, b2, eps):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_matches_reference():
    rng = np.random.default_rng(5)
    spec = DenseNetSpec(2, (3,), 1)
    net = DenseNet.initialize(spec, rng)
    start = [p.copy() for p in net.params]
    opt = Optimizer(net, 1e-2)
    history = [[rng.normal(size=p.shape) for p in net.params] for _ in range(5)]
    for g in history:
        opt.step(g)
    assert opt.steps == 5
    for i, p in enumerate(net.params):
        ref = adam_reference(start[i], [g[i] for g in history], 1e-2, 0.9, 0.999, 1e-8)
        assert np.allclose(p, ref, rtol=1e-12, atol=1e-15)


def test_sgd_step_and_guards():
    spec = DenseNetSpec(2, (2,), 1)
    net = DenseNet.initialize(spec, np.random.default_rng(6))
    before = [p.copy() for p in net.params]
    opt = Optimizer(net, 0.5, adaptive=False)
    grads = [np.ones_like(p) for p in net.params]
    opt.step(grads)
    for b, p in zip(before, net.params):
        assert np.allclose(p, b - 0.5)
    with pytest.raises(ContractViolation):
        opt.step(grads[:-1])
    bad = [g.copy() for g in grads]
    bad[0][0, 0] = np.nan
    with pytest.raises(TrainingAborted):
        opt.step(bad)


def test_serialization_bit_exact(tmp_path):
    spec = DenseNetSpec(3, (4, 4), 2)
    net = DenseNet.initialize(spec, np.random.default_rng(7))
    path = tmp_path / "net.ckpt"
    save_net(path, net)
    loaded = load_net(path)
    assert loaded.spec == spec
    assert loaded.flat_params().tobytes() == net.flat_params().tobytes()
    save_net(tmp_path / "again.ckpt", loaded)
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_archive_rejects_damage(tmp_path):
    blob = archive.dumps({"a": 1}, {"x": np.arange(3.0)})
    assert archive.loads(blob)[0] == {"a": 1}
    with pytest.raises(CheckpointError):
        archive.loads(b"NOTMAGIC" + blob[8:])
    with pytest.raises(CheckpointError):
        archive.loads(blob[:-4])
    with pytest.raises(CheckpointError):
        archive.loads(blob + b"\0")
    wrong_version = blob[:8] + (99).to_bytes(4, "little") + blob[12:]
    with pytest.raises(CheckpointError):
        archive.loads(wrong_version)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.floats(0.1, 5))
def test_huber_grad_is_derivative(values, delta):
    r = np.array(values)
    h = 1e-6
    fd = (huber(r + h, delta) - huber(r - h, delta)) / (2 * h)
    assert np.allclose(fd, huber_grad(r, delta), atol=1e-5)
