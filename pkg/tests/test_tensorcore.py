import numpy as np
import pytest
import torch

import tensorcore as tc
from errors import DegenerateRowError, InsufficientHistoryError, RankError, ShapeError, ValidationError
from tensorcore import Tensor


def _scalarize(out: Tensor, weights: np.ndarray) -> Tensor:
    """A generic scalar of ``out`` so every output coordinate matters."""
    return tc.sum(tc.mul(out, Tensor(weights)))


def _check(op, x: np.ndarray, rng, tol=1e-6):
    shaped = op(Tensor(x))
    weights = rng.normal(size=shaped.shape)
    return tc.grad_check(lambda t: _scalarize(op(t), weights), Tensor(x)) < tol


def test_matmul_values_and_shape_errors():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0], [6.0]])
    np.testing.assert_array_equal(tc.matmul(a, b).data, [[17.0], [39.0]])
    with pytest.raises(ShapeError):
        tc.matmul(a, Tensor(np.ones((3, 1))))
    with pytest.raises(ShapeError):
        tc.add(a, Tensor(np.ones(3)))


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with tc.Tape():
        y = tc.scale(x, 2.0)
        with pytest.raises(RankError):
            tc.backward(y)


def test_nothing_recorded_outside_a_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = tc.sum(tc.mul(x, x))
    assert y.tape_id is None
    assert not y.requires_grad


def test_reused_input_accumulates_gradient():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with tc.Tape():
        loss = tc.sum(tc.add(tc.mul(x, x), x))
        grads = tc.backward(loss)
    np.testing.assert_allclose(grads.of(x), 2 * x.data + 1)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_unused_leaf_gets_zero_gradient():
    x = Tensor(np.ones(2), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    with tc.Tape():
        grads = tc.backward(tc.sum(x))
    np.testing.assert_array_equal(grads.of(unused), np.zeros((2, 2)))


@pytest.mark.parametrize("name", [
    "add", "add_bias", "sub", "mul", "scale", "add_scalar", "matmul", "transpose", "reshape",
    "sigmoid", "tanh", "relu", "concat", "select", "take_rows", "sum_axis", "mean",
    "softmax", "softmax_masked", "batch_norm", "layer_norm", "conv",
])
def test_primitive_gradients(name, rng):
    other = Tensor(rng.normal(size=(4, 3)))
    bias = Tensor(rng.normal(size=3))
    right = Tensor(rng.normal(size=(3, 5)))
    mask = np.zeros((4, 3), dtype=bool)
    mask[0, 1] = mask[2, 0] = True
    kernel = Tensor(rng.normal(size=(2, 3, 2)))
    gamma, beta = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))
    ops = {
        "add": lambda t: tc.add(t, other),
        "add_bias": lambda t: tc.add(t, bias),
        "sub": lambda t: tc.sub(other, t),
        "mul": lambda t: tc.mul(t, t),
        "scale": lambda t: tc.scale(t, -1.7),
        "add_scalar": lambda t: tc.add_scalar(t, 0.3),
        "matmul": lambda t: tc.matmul(t, right),
        "transpose": lambda t: tc.transpose(t),
        "reshape": lambda t: tc.reshape(t, (2, 6)),
        "sigmoid": tc.sigmoid,
        "tanh": tc.tanh,
        "relu": tc.relu,
        "concat": lambda t: tc.concat([t, other, t], axis=1),
        "select": lambda t: tc.select(t, 1, 2),
        "take_rows": lambda t: tc.take_rows(t, np.array([0, 3, 3, 1])),
        "sum_axis": lambda t: tc.sum(t, axis=0),
        "mean": lambda t: tc.mean(t, axis=1),
        "softmax": lambda t: tc.softmax_rows(t),
        "softmax_masked": lambda t: tc.softmax_rows(t, mask),
        "batch_norm": lambda t: tc.batch_norm(t, gamma, beta, np.zeros(3), np.ones(3), training=True),
        "layer_norm": lambda t: tc.layer_norm(t, gamma, beta),
        "conv": lambda t: tc.causal_conv1d(tc.reshape(t, (2, 3, 2)), kernel),
    }
    x = rng.normal(size=(4, 3))
    if name == "relu":
        # keep clear of the kink
        x = np.where(np.abs(x) < 0.1, 0.5, x)
    assert _check(ops[name], x, rng)


def test_primitives_match_torch_autograd():
    rng = np.random.default_rng(7)
    for _ in range(100):
        x = rng.normal(size=(4, 3))
        w = rng.normal(size=(3, 3))
        gamma = rng.normal(size=3)

        t = Tensor(x, requires_grad=True)
        tw = Tensor(w, requires_grad=True)
        g = Tensor(gamma, requires_grad=True)
        with tc.Tape():
            h = tc.layer_norm(tc.tanh(tc.matmul(t, tw)), g, Tensor(np.zeros(3)))
            out = tc.sum(tc.mul(tc.softmax_rows(h), tc.sigmoid(h)))
            grads = tc.backward(out)

        tx = torch.tensor(x, requires_grad=True)
        ttw = torch.tensor(w, requires_grad=True)
        tg = torch.tensor(gamma, requires_grad=True)
        th = torch.tanh(tx @ ttw)
        mu = th.mean(dim=1, keepdim=True)
        var = th.var(dim=1, unbiased=False, keepdim=True)
        th = (th - mu) / torch.sqrt(torch.clamp(var, min=1e-5)) * tg
        expected = (torch.softmax(th, dim=1) * torch.sigmoid(th)).sum()
        expected.backward()

        np.testing.assert_allclose(out.item(), expected.item(), rtol=1e-12)
        np.testing.assert_allclose(grads.of(t), tx.grad.numpy(), rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(grads.of(tw), ttw.grad.numpy(), rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(grads.of(g), tg.grad.numpy(), rtol=1e-9, atol=1e-12)


def test_softmax_rows_sum_to_one_and_stay_finite():
    x = Tensor(np.array([[1000.0, 0.0, -1000.0], [1.0, 2.0, 3.0]]))
    s = tc.softmax_rows(x).data
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    mask = np.array([[False, True, True], [False, False, True]])
    masked = tc.softmax_rows(x, mask).data
    assert masked[0, 0] == 1.0
    assert masked[1, 2] == 0.0


def test_fully_masked_row_is_an_error():
    with pytest.raises(DegenerateRowError):
        tc.softmax_rows(Tensor(np.zeros((2, 2))), np.array([[True, True], [False, True]]))


def test_batch_norm_passes_unit_statistics_through():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(50, 4))
    z = (z - z.mean(axis=0)) / z.std(axis=0)
    out = tc.batch_norm(Tensor(z), Tensor(np.ones(4)), Tensor(np.zeros(4)), np.zeros(4), np.ones(4), training=True)
    np.testing.assert_allclose(out.data, z, atol=1e-12)


def test_batch_norm_running_statistics_and_eval_mode():
    x = np.array([[1.0, 10.0], [3.0, 30.0]])
    running_mean, running_var = np.zeros(2), np.ones(2)
    tc.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), running_mean, running_var, training=True)
    np.testing.assert_allclose(running_mean, 0.1 * np.array([2.0, 20.0]))
    np.testing.assert_allclose(running_var, 0.9 + 0.1 * np.array([1.0, 100.0]))

    out = tc.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), running_mean, running_var,
                        training=False)
    np.testing.assert_allclose(out.data, (x - running_mean) / np.sqrt(running_var))


def test_dropout_identity_outside_training():
    x = Tensor(np.ones((3, 3)))
    rng = np.random.default_rng(0)
    assert tc.dropout(x, 0.5, rng, training=False) is x
    assert tc.dropout(x, 1.0, rng, training=True) is x
    kept = tc.dropout(Tensor(np.ones(100_000)), 0.8, rng, training=True).data
    assert set(np.unique(kept)) <= {0.0, 1.25}
    assert abs(kept.mean() - 1.0) < 0.02


def _conv_loop(x, w):
    n, c, t = x.shape
    o, _, k = w.shape
    out = np.zeros((n, o, t - k + 1))
    for a in range(n):
        for b in range(o):
            for s in range(t - k + 1):
                total = 0.0
                for ch in range(c):
                    for j in range(k):
                        total += w[b, ch, j] * x[a, ch, s + j]
                out[a, b, s] = total
    return out


def test_causal_conv_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n, c, t, o, k = rng.integers(1, 4), rng.integers(1, 4), rng.integers(3, 8), rng.integers(1, 4), 3
        x = rng.normal(size=(n, c, t))
        w = rng.normal(size=(o, c, k))
        np.testing.assert_allclose(tc.causal_conv1d(Tensor(x), Tensor(w)).data, _conv_loop(x, w),
                                   rtol=1e-12, atol=1e-12)


def test_causal_conv_never_reads_the_future():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 10))
    w = Tensor(rng.normal(size=(4, 3, 3)))
    base = tc.causal_conv1d(Tensor(x), w).data
    for s in range(10):
        bumped = x.copy()
        bumped[:, :, s] += 5.0
        out = tc.causal_conv1d(Tensor(bumped), w).data
        # output position p covers absolute time p + 2
        first = max(0, s - 2)
        np.testing.assert_array_equal(out[:, :, :first], base[:, :, :first])


def test_causal_conv_needs_enough_history():
    with pytest.raises(InsufficientHistoryError):
        tc.causal_conv1d(Tensor(np.ones((1, 1, 2))), Tensor(np.ones((1, 1, 3))))
    with pytest.raises(ShapeError):
        tc.causal_conv1d(Tensor(np.ones((1, 2, 5))), Tensor(np.ones((1, 3, 3))))


def test_grad_check_parameters_reports_every_name(rng):
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    x = Tensor(rng.normal(size=(5, 3)))
    report = tc.grad_check_parameters(lambda: tc.sum(tc.tanh(tc.add(tc.matmul(x, w), b))), {"w": w, "b": b})
    assert set(report) == {"w", "b"}
    assert max(report.values()) < 1e-6


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    tensors = {"a.weight": rng.normal(size=(3, 4)), "buffer:mean": rng.normal(size=5), "scalar": np.array(2.5)}
    path = tmp_path / "model.tsfu"
    tc.save_tensors(path, tensors)
    loaded = tc.load_tensors(path)
    assert list(loaded) == list(tensors)
    for name, value in tensors.items():
        assert loaded[name].shape == value.shape
        assert loaded[name].tobytes() == value.tobytes()


def test_checkpoint_with_bad_magic_is_rejected(tmp_path):
    path = tmp_path / "bad.tsfu"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValidationError):
        tc.load_tensors(path)


def test_small_worked_examples():
    b = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(tc.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)
    conv = tc.causal_conv1d(Tensor([[[1.0, 2.0, 3.0, 4.0]]]), Tensor([[[1.0, 1.0]]]))
    np.testing.assert_array_equal(conv.data, [[[3.0, 5.0, 7.0]]])
    x = np.array([[[1.0, -2.0, 0.5]]])
    np.testing.assert_array_equal(tc.causal_conv1d(Tensor(x), Tensor([[[1.0]]])).data, x)


def test_softmax_examples_and_shift_invariance():
    np.testing.assert_allclose(tc.softmax_rows(Tensor(np.zeros((1, 4)))).data, 0.25)
    np.testing.assert_allclose(tc.softmax_rows(Tensor([[0.0, np.log(3.0)]])).data, [[0.25, 0.75]], rtol=1e-12)
    x = np.random.default_rng(5).normal(size=(3, 5))
    np.testing.assert_allclose(tc.softmax_rows(Tensor(x + 7.5)).data, tc.softmax_rows(Tensor(x)).data,
                               rtol=1e-12)
