import logging

import numpy as np
import pytest
import torch

import tensorcore as tc
from conftest import line_adjacency, random_adjacency
from errors import ShapeError
from graphio import graph_from_adjacency
from gtransformer import (
    AttentionHead,
    CentralityTable,
    GraphTransformerEncoder,
    attention_head,
    centrality_encode,
    feature_enhance,
    multi_head,
    path_bias,
)
from layers import BatchNorm, LayerNorm
from tensorcore import Tensor


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def test_attention_rows_are_distributions(rng):
    graph = graph_from_adjacency(random_adjacency(rng, 7))
    encoder = GraphTransformerEncoder(6, graph, num_heads=3, head_dim=2, depth=2, keep_prob=0.8, rng=rng)
    encoder(Tensor(rng.normal(size=(7, 6))), graph)
    assert len(encoder.last_attention) == 6
    for alpha in encoder.last_attention:
        assert alpha.shape == (7, 7)
        assert np.all(alpha >= 0)
        np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-12)


def _attention_by_loops(x, w_q, w_k, w_v, c):
    q, k, v = x @ w_q, x @ w_k, x @ w_v
    n, d = q.shape
    alpha = np.zeros((n, n))
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        logits = [(sum(q[i, a] * k[j, a] for a in range(d)) + c[i, j]) / np.sqrt(d) for j in range(n)]
        top = max(logits)
        weights = [np.exp(z - top) for z in logits]
        total = sum(weights)
        for j in range(n):
            alpha[i, j] = weights[j] / total
            out[i] += alpha[i, j] * v[j]
    return out, alpha


def test_path_bias_is_mean_projected_edge_feature():
    rng = np.random.default_rng(303)
    for _ in range(100):
        n = int(rng.integers(2, 8))
        graph = graph_from_adjacency(random_adjacency(rng, n, p=0.5))
        w = rng.normal(size=(1, 1))
        bias = path_bias(graph, Tensor(w)).data
        for i in range(n):
            for j in range(n):
                edges = graph.path_edges(i, j)
                if not edges:
                    assert bias[i, j] == 0.0
                    continue
                expected = sum(w[0, 0] * graph.adjacency[u, v] for u, v in edges) / len(edges)
                assert bias[i, j] == pytest.approx(expected, rel=1e-12, abs=1e-15)


def test_path_bias_checks_projection_width(rng):
    graph = graph_from_adjacency(random_adjacency(rng, 4, p=0.5))
    with pytest.raises(ShapeError):
        path_bias(graph, Tensor(np.ones((1, 2))))


def test_attention_head_matches_loops():
    rng = np.random.default_rng(404)
    for _ in range(100):
        n, width, d = int(rng.integers(1, 7)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
        x = rng.normal(size=(n, width))
        w_q, w_k, w_v = (rng.normal(size=(width, d)) for _ in range(3))
        c = rng.normal(size=(n, n))
        out, alpha = attention_head(Tensor(x), Tensor(w_q), Tensor(w_k), Tensor(w_v), Tensor(c))
        expected_out, expected_alpha = _attention_by_loops(x, w_q, w_k, w_v, c)
        np.testing.assert_allclose(alpha.data, expected_alpha, rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(out.data, expected_out, rtol=1e-10, atol=1e-12)


def test_attention_head_matches_torch_sdpa(rng):
    x = rng.normal(size=(6, 4))
    w_q, w_k, w_v = (rng.normal(size=(4, 2)) for _ in range(3))
    c = rng.normal(size=(6, 6))
    out, _ = attention_head(Tensor(x), Tensor(w_q), Tensor(w_k), Tensor(w_v), Tensor(c))
    tx = torch.from_numpy(x)
    expected = torch.nn.functional.scaled_dot_product_attention(
        (tx @ torch.from_numpy(w_q))[None], (tx @ torch.from_numpy(w_k))[None], (tx @ torch.from_numpy(w_v))[None],
        attn_mask=torch.from_numpy(c / np.sqrt(2))[None],
    )[0]
    np.testing.assert_allclose(out.data, expected.numpy(), rtol=1e-10, atol=1e-12)


def test_centrality_adds_degree_rows(rng):
    table = CentralityTable(2, 2, 3, rng)
    x = rng.normal(size=(3, 3))
    in_degree, out_degree = np.array([0, 2, 1]), np.array([1, 1, 2])
    out = centrality_encode(Tensor(x), in_degree, out_degree, table).data
    np.testing.assert_allclose(out, x + table.z_minus.data[in_degree] + table.z_plus.data[out_degree])


def test_degree_above_table_is_clamped_with_warning(rng, caplog):
    encoder = GraphTransformerEncoder(4, graph_from_adjacency(line_adjacency(4)), num_heads=2, rng=rng)
    star = np.zeros((4, 4))
    star[0, 1:] = star[1:, 0] = 1.0
    with caplog.at_level(logging.WARNING, logger="gtransformer"):
        out = encoder(Tensor(rng.normal(size=(4, 4))), graph_from_adjacency(star))
    assert "clamping" in caplog.text
    assert np.all(np.isfinite(out.data))


def test_unreachable_pairs_get_no_attention_when_masked(rng):
    a = np.zeros((4, 4))
    a[0, 1] = a[1, 0] = a[2, 3] = a[3, 2] = 1.0
    graph = graph_from_adjacency(a, mask_unreachable=True)
    encoder = GraphTransformerEncoder(4, graph, num_heads=2, rng=rng)
    encoder(Tensor(rng.normal(size=(4, 4))), graph)
    for alpha in encoder.last_attention:
        assert np.all(alpha[:2, 2:] == 0.0)
        assert np.all(alpha[2:, :2] == 0.0)


def test_without_feature_enhancement_the_layer_has_no_norm(rng):
    graph = graph_from_adjacency(line_adjacency(3))
    encoder = GraphTransformerEncoder(4, graph, num_heads=2, feature_enhance=False, rng=rng)
    assert all(layer.enhance is None for layer in encoder.layers)
    assert not any(name.endswith("running_mean") for name, _ in encoder.named_buffers())


def test_encoder_is_permutation_equivariant_on_trees():
    rng = np.random.default_rng(5)
    n = 6
    # a weighted path keeps shortest paths unique under relabelling
    a = line_adjacency(n) * rng.uniform(0.2, 1.0, (n, n))
    a = np.triu(a, 1) + np.triu(a, 1).T
    perm = rng.permutation(n)
    encoder = GraphTransformerEncoder(4, graph_from_adjacency(a), num_heads=2, rng=rng).eval()
    x = rng.normal(size=(n, 4))
    out = encoder(Tensor(x), graph_from_adjacency(a)).data
    permuted = encoder(Tensor(x[perm]), graph_from_adjacency(a[np.ix_(perm, perm)])).data
    np.testing.assert_allclose(permuted, out[perm], rtol=1e-10, atol=1e-12)


def test_encoder_gradients(rng):
    graph = graph_from_adjacency(random_adjacency(rng, 4, p=0.6))
    encoder = GraphTransformerEncoder(3, graph, num_heads=2, head_dim=2, keep_prob=1.0, rng=rng)
    x = Tensor(rng.normal(size=(4, 3)))
    weights = Tensor(rng.normal(size=(4, 3)))
    report = tc.grad_check_parameters(lambda: tc.sum(tc.mul(encoder(x, graph), weights)),
                                      dict(encoder.named_parameters()), floor=1e-6)
    assert max(report.values()) < 1e-4


def test_feature_enhancement_standardises_columns_in_training(rng):
    x = Tensor(rng.normal(3.0, 2.5, size=(9, 5)))
    norm = BatchNorm(5)
    out = feature_enhance(x, norm, keep_prob=1.0, rng=rng, training=True).data
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-10)


def test_multi_head_rows_are_layer_normed(rng):
    x = Tensor(rng.normal(size=(6, 4)))
    heads = [AttentionHead(4, 3, rng) for _ in range(2)]
    mixer = Tensor(rng.normal(size=(6, 5)))
    out, _ = multi_head(x, heads, Tensor(rng.normal(size=(6, 6))), mixer, LayerNorm(5))
    np.testing.assert_allclose(out.data.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=1), 1.0, atol=1e-10)


def test_duplicate_heads_agree(rng):
    x = Tensor(rng.normal(size=(5, 4)))
    first, second = AttentionHead(4, 2, rng), AttentionHead(4, 2, rng)
    for name in ("w_q", "w_k", "w_v"):
        getattr(second, name).data[...] = getattr(first, name).data
    out, weights = multi_head(x, [first, second], Tensor(rng.normal(size=(5, 5))), Tensor(np.eye(4)), LayerNorm(4))
    np.testing.assert_array_equal(weights[0].data, weights[1].data)
    np.testing.assert_array_equal(out.data[:, :2], out.data[:, 2:])


def test_zero_bias_reduces_to_plain_attention(rng):
    graph = graph_from_adjacency(random_adjacency(rng, 5, p=0.6))
    encoder = GraphTransformerEncoder(4, graph, num_heads=2, head_dim=3, out_width=4, feature_enhance=False,
                                      keep_prob=1.0, rng=rng)
    encoder.edge_weight.data[...] = 0.0
    encoder.centrality.z_minus.data[...] = 0.0
    encoder.centrality.z_plus.data[...] = 0.0
    x = rng.normal(size=(5, 4))
    out = encoder(Tensor(x), graph).data

    layer = encoder.layers[0]
    joined = np.concatenate([
        _softmax((x @ h.w_q.data) @ (x @ h.w_k.data).T / np.sqrt(3)) @ (x @ h.w_v.data) for h in layer.heads
    ], axis=1)
    mixed = joined @ layer.mixer.data
    expected = (mixed - mixed.mean(axis=1, keepdims=True)) / np.sqrt(mixed.var(axis=1, keepdims=True))
    np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-12)


def test_centrality_and_edge_projection_receive_gradients(rng):
    a = line_adjacency(5) * rng.uniform(0.2, 1.0, (5, 5))
    graph = graph_from_adjacency(np.triu(a, 1) + np.triu(a, 1).T)
    encoder = GraphTransformerEncoder(3, graph, num_heads=2, head_dim=2, keep_prob=1.0, rng=rng)
    weights = Tensor(rng.normal(size=(5, 3)))
    with tc.Tape():
        loss = tc.sum(tc.mul(encoder(Tensor(rng.normal(size=(5, 3))), graph), weights))
        grads = tc.backward(loss)
    # a path has degrees 1 and 2 only
    for table in (encoder.centrality.z_minus, encoder.centrality.z_plus):
        assert np.all(np.abs(grads.of(table)[1:]).sum(axis=1) > 0)
    assert np.all(grads.of(encoder.edge_weight) != 0)
