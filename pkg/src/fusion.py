"""Gated fusion of the local and global embeddings, readout and the training loss."""
from typing import Optional, Tuple, Union

import numpy as np

import tensorcore as tc
from errors import ShapeError
from layers import MLP, Linear, Module, glorot, parameter
from tensorcore import Tensor


class FusionParams(Module):
    def __init__(
        self,
        local_width: int,
        global_width: int,
        fused_width: int,
        out_width: int,
        rng: np.random.Generator,
        hidden: int = 64,
        skip: bool = True,
    ):
        super().__init__()
        self.local_proj = MLP(local_width, hidden, fused_width, rng)
        self.global_proj = MLP(global_width, hidden, fused_width, rng)
        self.gate_weight = glorot(rng, fused_width, fused_width, (fused_width, fused_width))
        self.gate_bias = parameter(np.zeros(fused_width))
        self.readout = MLP(fused_width, hidden, out_width, rng)
        self.skip = Linear(local_width, out_width, rng) if skip else None


def gated_fuse(
    global_emb: Tensor,
    local_emb: Tensor,
    gate_weight: Tensor,
    gate_bias: Tensor,
    frozen_gate: Optional[float] = None,
) -> Tuple[Tensor, Tensor]:
    """H = Gate * global + (1 - Gate) * local on already-projected embeddings.

    The gate reads the global branch only. ``frozen_gate`` replaces it with a
    constant that carries no parameters.
    """
    if global_emb.shape != local_emb.shape:
        raise ShapeError(
            f"global projection {global_emb.shape} and local projection {local_emb.shape} differ"
        )
    if frozen_gate is None:
        logits = tc.add(tc.matmul(global_emb, tc.transpose(gate_weight)), gate_bias)
        gate = tc.sigmoid(logits)
    else:
        gate = Tensor(np.full(global_emb.shape, float(frozen_gate)))
    fused = tc.add(tc.mul(gate, global_emb), tc.mul(1.0 - gate, local_emb))
    return fused, gate


def fuse(global_in: Tensor, local_in: Tensor, params: FusionParams,
         frozen_gate: Optional[float] = None) -> Tuple[Tensor, Tensor]:
    return gated_fuse(params.global_proj(global_in), params.local_proj(local_in),
                      params.gate_weight, params.gate_bias, frozen_gate)


def readout(fused: Tensor, params: FusionParams, shape: Tuple[int, int, int],
            local_in: Optional[Tensor] = None) -> Tensor:
    """Per-node MLP to ``F_target * H`` values, plus the skip projection of L."""
    out = params.readout(fused)
    if local_in is not None and params.skip is not None:
        out = tc.add(out, params.skip(local_in))
    return tc.reshape(out, shape)


def mse_loss(pred: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    target = tc.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = tc.sub(pred, target)
    return tc.mean(tc.mul(diff, diff))
