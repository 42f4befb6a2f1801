import numpy as np
import pytest

import tensorcore as tc
from conftest import line_adjacency
from errors import ConfigError, ShapeError
from graphio import normalize_adjacency
from tensorcore import Tensor
from tse import TemporalSpatialEncoder, graph_conv, output_steps, st_block, temporal_gate


def _gate_by_loops(x, p, q):
    n, c_in, m = x.shape
    c_out, _, k = p.shape
    out = np.zeros((n, c_out, m - k + 1))
    for i in range(n):
        for o in range(c_out):
            for t in range(m - k + 1):
                p_sum = q_sum = 0.0
                for c in range(c_in):
                    for s in range(k):
                        p_sum += x[i, c, t + s] * p[o, c, s]
                        q_sum += x[i, c, t + s] * q[o, c, s]
                out[i, o, t] = p_sum / (1.0 + np.exp(-q_sum))
    return out


def _graph_conv_by_loops(h, a, w):
    n, c_in, m = h.shape
    c_out = w.shape[1]
    out = np.zeros((n, c_out, m))
    for i in range(n):
        for o in range(c_out):
            for t in range(m):
                total = 0.0
                for j in range(n):
                    for c in range(c_in):
                        total += a[i, j] * h[j, c, t] * w[c, o]
                out[i, o, t] = max(total, 0.0)
    return out


def test_temporal_gate_is_p_times_sigmoid_q():
    rng = np.random.default_rng(101)
    for _ in range(100):
        n, c_in, c_out, k = (int(v) for v in rng.integers(1, 4, size=4))
        m = int(rng.integers(k, k + 5))
        x = rng.normal(size=(n, c_in, m))
        p, q = rng.normal(size=(c_out, c_in, k)), rng.normal(size=(c_out, c_in, k))
        out = temporal_gate(Tensor(x), Tensor(p), Tensor(q)).data
        assert out.shape == (n, c_out, m - k + 1)
        np.testing.assert_allclose(out, _gate_by_loops(x, p, q), rtol=1e-10, atol=1e-12)


def test_temporal_gate_rejects_mismatched_branches(rng):
    with pytest.raises(ShapeError):
        temporal_gate(Tensor(rng.normal(size=(1, 2, 5))), Tensor(np.ones((3, 2, 3))), Tensor(np.ones((2, 2, 3))))


def test_graph_conv_matches_per_step_loop():
    rng = np.random.default_rng(202)
    for _ in range(100):
        n, c, m, c_out = (int(v) for v in (rng.integers(2, 6), rng.integers(1, 4), rng.integers(1, 5),
                                          rng.integers(1, 4)))
        h = rng.normal(size=(n, c, m))
        a = normalize_adjacency((rng.random((n, n)) < 0.5) * (1 - np.eye(n)))
        w = rng.normal(size=(c, c_out))
        out = graph_conv(Tensor(h), a, Tensor(w)).data
        np.testing.assert_allclose(out, _graph_conv_by_loops(h, a, w), rtol=1e-10, atol=1e-12)


def test_graph_conv_checks_channels(rng):
    with pytest.raises(ShapeError):
        graph_conv(Tensor(rng.normal(size=(3, 2, 4))), np.eye(3), Tensor(np.ones((3, 2))))


def test_encoder_output_shape_and_history_check(rng):
    encoder = TemporalSpatialEncoder(3, 4, blocks=2, kernel_size=3, history=12, rng=rng)
    out = encoder(Tensor(rng.normal(size=(5, 3, 12))), np.eye(5))
    assert out.shape == (5, 4, output_steps(12, 2, 3)) == (5, 4, 8)
    with pytest.raises(ConfigError):
        TemporalSpatialEncoder(3, 4, blocks=3, kernel_size=5, history=12, rng=rng)


@pytest.mark.parametrize("blocks", [1, 2])
def test_receptive_field_is_two_hops_per_block(blocks):
    n = 8
    rng = np.random.default_rng(blocks)
    normalized = normalize_adjacency(line_adjacency(n))
    encoder = TemporalSpatialEncoder(3, 8, blocks=blocks, kernel_size=3, history=12, rng=rng)
    x = rng.normal(size=(n, 3, 12))
    base = encoder(Tensor(x), normalized).data
    bumped = x.copy()
    bumped[0] += 5.0
    out = encoder(Tensor(bumped), normalized).data
    radius = 2 * blocks
    np.testing.assert_array_equal(out[radius + 1:], base[radius + 1:])
    assert not np.array_equal(out[:radius + 1], base[:radius + 1])


def test_encoder_is_permutation_equivariant():
    rng = np.random.default_rng(11)
    n = 6
    a = (rng.random((n, n)) < 0.4) * rng.uniform(0.2, 1.0, (n, n))
    a = np.triu(a, 1) + np.triu(a, 1).T
    perm = rng.permutation(n)
    encoder = TemporalSpatialEncoder(3, 4, blocks=2, kernel_size=3, history=10, rng=rng)
    x = rng.normal(size=(n, 3, 10))
    out = encoder(Tensor(x), normalize_adjacency(a)).data
    permuted = encoder(Tensor(x[perm]), normalize_adjacency(a[np.ix_(perm, perm)])).data
    np.testing.assert_allclose(permuted, out[perm], rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("blocks", [1, 2])
def test_encoder_outputs_ignore_later_inputs(blocks):
    rng = np.random.default_rng(30 + blocks)
    kernel_size, history = 3, 12
    normalized = normalize_adjacency(line_adjacency(5))
    encoder = TemporalSpatialEncoder(2, 4, blocks=blocks, kernel_size=kernel_size, history=history, rng=rng)
    x = rng.normal(size=(5, 2, history))
    base = encoder(Tensor(x), normalized).data
    lag = blocks * (kernel_size - 1)
    for step in range(lag, history):
        bumped = x.copy()
        bumped[:, :, step] += rng.normal(size=(5, 2))
        out = encoder(Tensor(bumped), normalized).data
        # output p sees inputs p .. p + lag
        first_affected = step - lag
        np.testing.assert_array_equal(out[:, :, :first_affected], base[:, :, :first_affected])
        assert not np.array_equal(out[:, :, first_affected], base[:, :, first_affected])


def test_stacked_blocks_gradients():
    rng = np.random.default_rng(17)
    normalized = normalize_adjacency(line_adjacency(3))
    encoder = TemporalSpatialEncoder(2, 3, blocks=2, kernel_size=2, history=5, rng=rng)
    x = Tensor(rng.normal(size=(3, 2, 5)))
    weights = Tensor(rng.normal(size=(3, 3, 3)))

    def loss_of(inputs):
        return tc.sum(tc.mul(st_block(inputs, normalized, encoder.blocks), weights))

    assert tc.grad_check(loss_of, x, floor=1e-10) < 1e-6
    report = tc.grad_check_parameters(lambda: loss_of(x), dict(encoder.named_parameters()), floor=1e-10)
    assert max(report.values()) < 1e-6
