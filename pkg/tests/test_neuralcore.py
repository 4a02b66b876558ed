import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from phrasedet.neuralcore import (ParameterStore, ShapeError, Tape, Tensor, adam_step, no_tape, ops,
                                  sgd_momentum_step, weight_decay_penalty)
from phrasedet.neuralcore.checkpoint import CheckpointError, load_into, read_checkpoint, save_checkpoint
from phrasedet.neuralcore.gradcheck import check_layers

import oracles


def grads_of(fn, *tensors):
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    return [t.grad for t in tensors]


# -- forward layers -----------------------------------------------------------------------

def test_conv1d_identity_and_constant(rng):
    x = rng.normal(size=(3, 8))
    eye = np.eye(3)[:, :, None]
    assert np.array_equal(ops.conv1d(Tensor(x), Tensor(eye), Tensor(np.zeros(3))).data, x)
    out = ops.conv1d(Tensor(x), Tensor(np.zeros((2, 3, 5))), Tensor(np.array([1.5, -2.0])))
    assert np.all(out.data[0] == 1.5) and np.all(out.data[1] == -2.0)


@pytest.mark.parametrize("k", [1, 2, 3, 7])
def test_conv1d_matches_loops(rng, k):
    x, w, b = rng.normal(size=(3, 11)), rng.normal(size=(4, 3, k)), rng.normal(size=4)
    out = ops.conv1d(Tensor(x), Tensor(w), Tensor(b)).data
    assert out.shape == (4, 11)
    np.testing.assert_allclose(out, oracles.naive_conv1d(x, w, b), rtol=0, atol=1e-12)


def test_conv1d_batched_equals_per_item(rng):
    x, w, b = rng.normal(size=(2, 3, 8)), rng.normal(size=(4, 3, 3)), rng.normal(size=4)
    both = ops.conv1d(Tensor(x), Tensor(w), Tensor(b)).data
    for i in range(2):
        np.testing.assert_allclose(both[i], oracles.naive_conv1d(x[i], w, b), atol=1e-12)


def test_conv_shape_mismatch():
    with pytest.raises(ShapeError):
        ops.conv1d(Tensor(np.zeros((3, 8))), Tensor(np.zeros((4, 2, 3))), Tensor(np.zeros(4)))
    with pytest.raises(ShapeError):
        ops.dense(Tensor(np.zeros(5)), Tensor(np.zeros((3, 4))), Tensor(np.zeros(3)))


def test_maxpool1d(rng):
    assert np.all(ops.maxpool1d(Tensor(np.full((2, 6), 3.0))).data == 3.0)
    inc = np.arange(8.0)[None, :]
    assert ops.maxpool1d(Tensor(inc)).data.tolist() == [[1.0, 3.0, 5.0, 7.0]]
    x = rng.normal(size=(3, 10))
    np.testing.assert_array_equal(ops.maxpool1d(Tensor(x)).data, oracles.naive_maxpool1d(x))
    with pytest.raises(ShapeError):
        ops.maxpool1d(Tensor(np.zeros((2, 7))))


def test_dense(rng):
    x = rng.normal(size=5)
    assert np.array_equal(ops.dense(Tensor(x), Tensor(np.eye(5)), Tensor(np.zeros(5))).data, x)
    b = rng.normal(size=3)
    assert np.array_equal(ops.dense(Tensor(x), Tensor(np.zeros((3, 5))), Tensor(b)).data, b)
    w = rng.normal(size=(3, 5))
    want = [sum(w[i, j] * x[j] for j in range(5)) + b[i] for i in range(3)]
    np.testing.assert_allclose(ops.dense(Tensor(x), Tensor(w), Tensor(b)).data, want, atol=1e-12)


def test_lrelu_values():
    out = ops.lrelu(Tensor(np.array([1.0, -1.0, 0.0])), 0.1).data
    assert out.tolist() == [1.0, -0.1, 0.0]


def test_lrelu_subgradient_at_zero():
    x = Tensor(np.array([0.0]))
    (g,) = grads_of(lambda: ops.sum(ops.lrelu(x, 0.1)), x)
    assert g.tolist() == [0.1]


def test_maxpool_ties_route_to_first():
    x = Tensor(np.array([[2.0, 2.0, 1.0, 1.0]]))
    (g,) = grads_of(lambda: ops.sum(ops.maxpool1d(x)), x)
    assert g.tolist() == [[1.0, 0.0, 1.0, 0.0]]


def test_conv2d_identity_constant_and_loops(rng):
    x = rng.normal(size=(2, 5, 6))
    eye = np.zeros((2, 2, 3, 3))
    eye[0, 0, 1, 1] = eye[1, 1, 1, 1] = 1.0
    np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(eye), Tensor(np.zeros(2))).data, x)
    const = ops.conv2d(Tensor(x), Tensor(np.zeros((3, 2, 3, 3))), Tensor(np.array([1.0, 2.0, 3.0]))).data
    assert np.all(const[2] == 3.0)
    w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    np.testing.assert_allclose(ops.conv2d(Tensor(x), Tensor(w), Tensor(b)).data,
                               oracles.naive_conv2d(x, w, b), atol=1e-12)


def test_maxpool2d(rng):
    assert np.all(ops.maxpool2d(Tensor(np.full((1, 4, 4), -1.0))).data == -1.0)
    x = rng.normal(size=(2, 6, 8))
    np.testing.assert_array_equal(ops.maxpool2d(Tensor(x)).data, oracles.naive_maxpool2d(x))
    with pytest.raises(ShapeError):
        ops.maxpool2d(Tensor(np.zeros((1, 5, 4))))


def test_roi_pool_constant_and_global(rng):
    out = ops.roi_pool(Tensor(np.full((2, 6, 6), 0.25)), np.array([[3.0, 5.0, 30.0, 40.0]]), 8, 4)
    assert out.shape == (1, 2, 4, 4) and np.all(out.data == 0.25)
    fm = rng.normal(size=(3, 5, 7))
    g = ops.roi_pool(Tensor(fm), np.array([[0.0, 0.0, 56.0, 40.0]]), 8, 1).data
    np.testing.assert_array_equal(g[0, :, 0, 0], fm.reshape(3, -1).max(axis=1))


def test_roi_pool_matches_enumeration(rng):
    fm = rng.normal(size=(2, 12, 12))
    for _ in range(100):
        x1, y1 = rng.uniform(0, 90, size=2)
        x2, y2 = x1 + rng.uniform(0.5, 96 - x1), y1 + rng.uniform(0.5, 96 - y1)
        box = [x1, y1, x2, y2]
        bins = int(rng.integers(1, 5))
        got = ops.roi_pool(Tensor(fm), np.array([box]), 8, bins).data[0]
        np.testing.assert_array_equal(got, oracles.naive_roi_pool(fm, box, 8, bins))


def test_roi_pool_rejects_box_off_map():
    with pytest.raises(ValueError):
        ops.roi_pool(Tensor(np.zeros((1, 4, 4))), np.array([[40.0, 40.0, 50.0, 50.0]]), 8, 2)


def test_logistic_cross_entropy():
    assert ops.logistic_cross_entropy(Tensor(np.array([0.0, 0.0])), np.array([0, 1])).data == \
        pytest.approx([math.log(2)] * 2, abs=1e-15)
    assert ops.logistic_cross_entropy(Tensor(np.array([2.0])), np.array([1])).data[0] == \
        pytest.approx(oracles.stable_lce(2.0, 1), abs=1e-15)
    vals = ops.logistic_cross_entropy(Tensor(np.array([0.0, 5.0, 50.0, 800.0])), np.ones(4)).data
    assert np.all(np.diff(vals) <= 0) and vals[-1] == 0.0
    big = ops.logistic_cross_entropy(Tensor(np.array([-800.0])), np.array([1])).data
    assert np.isfinite(big).all() and big[0] == pytest.approx(800.0)


@given(st.floats(-10, 10), st.integers(0, 1))
def test_lce_matches_direct_formula(f, l):
    # the naive formula cancels catastrophically beyond |f| ~ 10
    got = ops.logistic_cross_entropy(Tensor(np.array([f])), np.array([l])).data[0]
    assert got == pytest.approx(oracles.stable_lce(f, l), rel=1e-9, abs=1e-12)


# -- tape ---------------------------------------------------------------------------------

def test_non_scalar_root_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ops.mul(x, 2.0)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_identity_chain_passes_upstream_gradient(rng):
    x = Tensor(rng.normal(size=4))
    up = rng.normal(size=4)
    eye = Tensor(np.eye(4))
    (g,) = grads_of(lambda: ops.weighted_sum(ops.dense(ops.dense(x, eye, Tensor(np.zeros(4))), eye,
                                                       Tensor(np.zeros(4))), up), x)
    np.testing.assert_array_equal(g, up)


def test_constant_output_has_zero_gradient():
    w = Tensor(np.ones(3))
    (g,) = grads_of(lambda: ops.add(ops.mul(ops.sum(w), 0.0), 1.0), w)
    assert np.all(g == 0)


def test_no_tape_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        with no_tape():
            ops.sum(x)
    assert tape.nodes == []


def test_tape_replay_is_repeatable(rng):
    x = Tensor(rng.normal(size=(3, 16)))
    k = Tensor(rng.normal(size=(4, 3, 3)))
    b = Tensor(rng.normal(size=4))
    fn = lambda: ops.sum_squares(ops.maxpool1d(ops.lrelu(ops.conv1d(x, k, b))))  # noqa: E731
    g1 = [g.copy() for g in grads_of(fn, x, k, b)]
    g2 = grads_of(fn, x, k, b)
    for a, c in zip(g1, g2):
        assert np.array_equal(a, c)


def test_shared_input_accumulates():
    x = Tensor(np.array([3.0]))
    (g,) = grads_of(lambda: ops.sum(ops.mul(x, x)), x)
    assert g.tolist() == [6.0]


@pytest.mark.parametrize("seed", range(3))
def test_every_layer_passes_gradcheck(seed):
    for res in check_layers(seed):
        assert res.passed, res


def test_gradcheck_catches_a_wrong_gradient():
    from phrasedet.neuralcore.tensor import record

    def bad_lrelu(x, leakage=0.1):
        out = np.where(x.data > 0, x.data, leakage * x.data)
        return record(out, [x], lambda g: [g])  # forgets the leakage factor

    res = {r.name: r for r in check_layers(0, overrides={"lrelu": bad_lrelu})}
    assert not res["lrelu"].passed
    assert all(r.passed for n, r in res.items() if n != "lrelu")


@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
def test_forward_is_deterministic(x):
    w = np.linspace(-1, 1, 20).reshape(5, 4)
    a = ops.dense(Tensor(x), Tensor(w), Tensor(np.zeros(5))).data
    b = ops.dense(Tensor(x), Tensor(w), Tensor(np.zeros(5))).data
    assert np.array_equal(a, b)


# -- parameters and optimizers ------------------------------------------------------------

def test_store_groups_and_names(rng):
    s = ParameterStore()
    s.weight("a.w", (3, 4), 4, 3, rng, group="visual_pre_roi")
    s.bias("a.b", 3, group="visual_pre_roi")
    s.weight("c.w", (2, 2), 2, 2, rng)
    assert [p.name for p in s.group("visual_pre_roi")] == ["a.w", "a.b"]
    assert s.n_values() == 12 + 3 + 4
    with pytest.raises(KeyError):
        s.bias("a.b", 3)
    lim = math.sqrt(6 / 7)
    assert np.all(np.abs(s["a.w"].data) <= lim) and np.all(s["a.b"].data == 0)


def test_weight_decay_penalty(rng):
    s = ParameterStore()
    assert weight_decay_penalty(s).item() == 0.0
    s.add("p", np.array([2.0]))
    assert weight_decay_penalty(s).item() == 4.0
    s.add("q", rng.normal(size=(3, 3)))
    s.add("bias", rng.normal(size=3), decay=False)
    want = 4.0 + sum(v * v for v in s["q"].data.ravel())
    assert weight_decay_penalty(s).item() == pytest.approx(want, abs=1e-12)


def test_sgd_zero_gradient_and_first_step():
    s = ParameterStore()
    p = s.add("p", np.array([1.0, -2.0]))
    p.grad = np.zeros(2)
    sgd_momentum_step([p], 0.1)
    assert p.data.tolist() == [1.0, -2.0]
    q = s.add("q", np.array([1.0, -2.0]))
    q.grad = np.array([0.5, -1.0])
    sgd_momentum_step([q], 0.1)
    assert q.data.tolist() == [1.0 - 0.1 * 0.5, -2.0 + 0.1 * 1.0]
    q.grad = np.array([0.5, -1.0])
    sgd_momentum_step([q], 0.1)  # v = 0.9 g + g
    assert q.data[0] == pytest.approx(0.95 - 0.1 * 1.9 * 0.5)


def test_adam_three_steps_hand_unrolled():
    s = ParameterStore()
    p = s.add("theta", np.array([0.0]))
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    theta, m, v = 0.0, 0.0, 0.0
    for t in (1, 2, 3):
        g = 2 * (theta - 3.0)  # d/dtheta (theta - 3)^2
        p.grad = np.array([2 * (p.data[0] - 3.0)])
        adam_step([p], lr, b1, b2, eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert p.data[0] == pytest.approx(theta, abs=1e-15)
    # first Adam step moves by lr regardless of gradient scale
    assert theta > 0.29


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    s = ParameterStore()
    s.add("w", rng.normal(size=(3, 2)), group="visual_post_roi")
    s.add("b", rng.normal(size=3), decay=False)
    s["w"].grad = rng.normal(size=(3, 2))
    adam_step([s["w"]], 0.01)
    path = tmp_path / "c.npz"
    save_checkpoint(path, s, {"step": 7})
    t = ParameterStore()
    t.add("w", np.zeros((3, 2)), group="visual_post_roi")
    t.add("b", np.zeros(3), decay=False)
    assert load_into(t, path) == {"step": 7}
    for name in ("w", "b"):
        assert t[name].data.tobytes() == s[name].data.tobytes()
    assert t["w"].state["adam_t"] == 1
    assert np.array_equal(t["w"].state["adam_m"], s["w"].state["adam_m"])
    header, arrays = read_checkpoint(path)
    assert header["format_version"] == 1
    assert arrays["w"].dtype == np.dtype("<f8")


def test_checkpoint_shape_mismatch(tmp_path):
    s = ParameterStore()
    s.add("w", np.zeros(3))
    save_checkpoint(tmp_path / "c.npz", s)
    t = ParameterStore()
    t.add("w", np.zeros(4))
    with pytest.raises(CheckpointError):
        load_into(t, tmp_path / "c.npz")
