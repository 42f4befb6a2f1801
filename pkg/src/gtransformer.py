"""Globally temporal-spatial attention over node tokens.

Inputs get additive degree-centrality vectors, pass a feature enhancement layer
(batch normalisation over nodes followed by dropout), and attend to every other
node with a bias equal to the mean projected edge feature along the shortest
path between the pair.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

import tensorcore as tc
from errors import ShapeError
from graphio import TrafficGraph
from layers import BatchNorm, LayerNorm, Module, glorot, parameter
from tensorcore import Tensor

logger = logging.getLogger(__name__)


class CentralityTable(Module):
    def __init__(self, max_in_degree: int, max_out_degree: int, width: int,
                 rng: np.random.Generator, init_scale: float = 0.02):
        super().__init__()
        self.z_minus = parameter(rng.normal(0.0, init_scale, (max_in_degree + 1, width)))
        self.z_plus = parameter(rng.normal(0.0, init_scale, (max_out_degree + 1, width)))


def _lookup_rows(degrees: np.ndarray, rows: int, label: str) -> np.ndarray:
    degrees = np.asarray(degrees, dtype=np.int64)
    if degrees.size and degrees.max() >= rows:
        logger.warning("%s-degree %d exceeds the centrality table (%d rows); clamping",
                       label, int(degrees.max()), rows)
        degrees = np.minimum(degrees, rows - 1)
    return degrees


def centrality_encode(x: Tensor, in_degree: np.ndarray, out_degree: np.ndarray,
                      table: CentralityTable) -> Tensor:
    """x_i + z_minus[deg_in(i)] + z_plus[deg_out(i)]."""
    rows_in = _lookup_rows(in_degree, table.z_minus.shape[0], "in")
    rows_out = _lookup_rows(out_degree, table.z_plus.shape[0], "out")
    shifted = tc.add(x, tc.take_rows(table.z_minus, rows_in))
    return tc.add(shifted, tc.take_rows(table.z_plus, rows_out))


def feature_enhance(x: Tensor, norm: Optional[BatchNorm], keep_prob: float,
                    rng: np.random.Generator, training: bool) -> Tensor:
    if norm is None:
        return x
    return tc.dropout(norm(x), keep_prob, rng, training)


def path_bias(graph: TrafficGraph, edge_weight: Tensor) -> Tensor:
    """c_ij: mean over the shortest i->j path of the projected edge features."""
    n = graph.num_nodes
    width = graph.path_features.shape[-1]
    if edge_weight.shape != (1, width):
        raise ShapeError(f"edge projection must be (1, {width}), got {edge_weight.shape}")
    flat = Tensor(graph.path_features.reshape(n * n, width))
    return tc.reshape(tc.matmul(flat, tc.transpose(edge_weight)), (n, n))


def attention_head(x: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, bias: Tensor,
                   mask: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
    """One head: softmax((Q Kᵀ + c) / sqrt(d)) V. Returns output and weights."""
    q = tc.matmul(x, w_q)
    k = tc.matmul(x, w_k)
    v = tc.matmul(x, w_v)
    d = w_q.shape[1]
    logits = tc.scale(tc.add(tc.matmul(q, tc.transpose(k)), bias), 1.0 / np.sqrt(d))
    alpha = tc.softmax_rows(logits, mask)
    return tc.matmul(alpha, v), alpha


class AttentionHead(Module):
    def __init__(self, in_width: int, head_dim: int, rng: np.random.Generator):
        super().__init__()
        self.w_q = glorot(rng, in_width, head_dim, (in_width, head_dim))
        self.w_k = glorot(rng, in_width, head_dim, (in_width, head_dim))
        self.w_v = glorot(rng, in_width, head_dim, (in_width, head_dim))

    def forward(self, x: Tensor, bias: Tensor, mask: Optional[np.ndarray] = None):
        return attention_head(x, self.w_q, self.w_k, self.w_v, bias, mask)


def multi_head(x: Tensor, heads: Sequence[AttentionHead], bias: Tensor, mixer: Tensor,
               norm: LayerNorm, mask: Optional[np.ndarray] = None) -> Tuple[Tensor, List[Tensor]]:
    outputs, weights = [], []
    for head in heads:
        out, alpha = head(x, bias, mask)
        outputs.append(out)
        weights.append(alpha)
    joined = tc.concat(outputs, axis=1) if len(outputs) > 1 else outputs[0]
    if mixer.shape[0] != joined.shape[1]:
        raise ShapeError(f"mixer expects width {mixer.shape[0]}, heads produce {joined.shape[1]}")
    return norm(tc.matmul(joined, mixer)), weights


class GraphTransformerLayer(Module):
    def __init__(self, in_width: int, out_width: int, num_heads: int, head_dim: int,
                 keep_prob: float, feature_enhance: bool, rng: np.random.Generator):
        super().__init__()
        self.enhance = BatchNorm(in_width) if feature_enhance else None
        self.keep_prob = keep_prob
        self.heads = [AttentionHead(in_width, head_dim, rng) for _ in range(num_heads)]
        self.mixer = glorot(rng, num_heads * head_dim, out_width, (num_heads * head_dim, out_width))
        self.norm = LayerNorm(out_width)

    def forward(self, x: Tensor, bias: Tensor, mask: Optional[np.ndarray], rng: np.random.Generator):
        x = feature_enhance(x, self.enhance, self.keep_prob, rng, self.training)
        return multi_head(x, self.heads, bias, self.mixer, self.norm, mask)


class GraphTransformerEncoder(Module):
    def __init__(
        self,
        in_width: int,
        graph: TrafficGraph,
        num_heads: int = 4,
        head_dim: Optional[int] = None,
        out_width: Optional[int] = None,
        depth: int = 1,
        keep_prob: float = 0.9,
        feature_enhance: bool = True,
        seed: int = 0,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        rng = rng or np.random.default_rng(seed)
        head_dim = head_dim or max(1, in_width // num_heads)
        out_width = out_width or in_width
        self.out_width = out_width
        self.centrality = CentralityTable(
            int(graph.in_degree.max(initial=0)), int(graph.out_degree.max(initial=0)), in_width, rng)
        self.edge_weight = glorot(rng, graph.edge_features.shape[-1], 1, (1, graph.edge_features.shape[-1]))
        self.layers = [
            GraphTransformerLayer(in_width if i == 0 else out_width, out_width, num_heads, head_dim,
                                  keep_prob, feature_enhance, rng)
            for i in range(depth)
        ]
        self._dropout_rng = np.random.default_rng(seed)
        self.last_attention: List[np.ndarray] = []

    def reseed(self, seed: int) -> None:
        self._dropout_rng = np.random.default_rng(seed)

    def forward(self, x: Tensor, graph: TrafficGraph) -> Tensor:
        bias = path_bias(graph, self.edge_weight)
        mask = graph.attention_mask()
        h = centrality_encode(x, graph.in_degree, graph.out_degree, self.centrality)
        attention = []
        for layer in self.layers:
            h, weights = layer(h, bias, mask, self._dropout_rng)
            attention.extend(w.data for w in weights)
        self.last_attention = attention
        return h
