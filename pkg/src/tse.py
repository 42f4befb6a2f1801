"""Locally temporal-spatial encoder.

Each block is a "sandwich": graph convolution, gated causal temporal
convolution, graph convolution. Only the temporal unit shortens the time axis,
by ``kernel_size - 1`` steps per block.
"""
from typing import Union

import numpy as np

import tensorcore as tc
from errors import ConfigError, ShapeError
from layers import Module, glorot
from tensorcore import Tensor


def temporal_gate(x: Tensor, p_kernel: Tensor, q_kernel: Tensor) -> Tensor:
    """GLU over two parallel causal convolutions: P * sigmoid(Q)."""
    if p_kernel.shape != q_kernel.shape:
        raise ShapeError(f"gate branches differ: P {p_kernel.shape}, Q {q_kernel.shape}")
    p = tc.causal_conv1d(x, p_kernel)
    q = tc.causal_conv1d(x, q_kernel)
    return tc.mul(p, tc.sigmoid(q))


def graph_conv(h: Tensor, normalized: Union[np.ndarray, Tensor], weight: Tensor) -> Tensor:
    """ReLU(normalized · h_t · W) for every time step t of ``h`` ([N×C×M])."""
    n, c, m = h.shape
    if weight.ndim != 2 or weight.shape[0] != c:
        raise ShapeError(f"graph_conv: input has {c} channels, weight is {weight.shape}")
    c_out = weight.shape[1]
    per_step = tc.reshape(tc.transpose(h, (0, 2, 1)), (n * m, c))
    mixed = tc.transpose(tc.reshape(tc.matmul(per_step, weight), (n, m, c_out)), (0, 2, 1))
    spread = tc.matmul(tc.as_tensor(normalized), tc.reshape(mixed, (n, c_out * m)))
    return tc.reshape(tc.relu(spread), (n, c_out, m))


class STBlock(Module):
    def __init__(self, in_channels: int, channels: int, kernel_size: int, rng: np.random.Generator):
        super().__init__()
        self.spatial_in = glorot(rng, in_channels, channels, (in_channels, channels))
        fan = channels * kernel_size
        self.p_kernel = glorot(rng, fan, fan, (channels, channels, kernel_size))
        self.q_kernel = glorot(rng, fan, fan, (channels, channels, kernel_size))
        self.spatial_out = glorot(rng, channels, channels, (channels, channels))

    def forward(self, x: Tensor, normalized: np.ndarray) -> Tensor:
        h = graph_conv(x, normalized, self.spatial_in)
        h = temporal_gate(h, self.p_kernel, self.q_kernel)
        return graph_conv(h, normalized, self.spatial_out)


def output_steps(history: int, blocks: int, kernel_size: int) -> int:
    return history - blocks * (kernel_size - 1)


class TemporalSpatialEncoder(Module):
    def __init__(
        self,
        in_channels: int,
        channels: int,
        blocks: int,
        kernel_size: int,
        history: int,
        rng: np.random.Generator,
    ):
        super().__init__()
        steps = output_steps(history, blocks, kernel_size)
        if steps < 1:
            raise ConfigError(
                f"{blocks} blocks with kernel {kernel_size} consume more than {history} history steps"
            )
        self.out_steps = steps
        self.channels = channels
        self.blocks = [
            STBlock(in_channels if b == 0 else channels, channels, kernel_size, rng)
            for b in range(blocks)
        ]

    def forward(self, x: Tensor, normalized: np.ndarray) -> Tensor:
        return st_block(x, normalized, self.blocks)


def st_block(x: Tensor, normalized: np.ndarray, blocks) -> Tensor:
    """Apply a stack of blocks to ``x``; the result is the local embedding L."""
    for block in blocks:
        x = block(x, normalized)
    return x
