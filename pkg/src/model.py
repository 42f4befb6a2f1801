"""The TSFusion network and the ablation variants built from it."""
import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np

import tensorcore as tc
from config import AblationFlags, ModelConfig, dump_config
from errors import ShapeError, ValidationError
from fusion import FusionParams, fuse, readout
from graphio import TrafficGraph
from gtransformer import GraphTransformerEncoder
from layers import Linear, Module
from tensorcore import Tensor
from tse import TemporalSpatialEncoder

logger = logging.getLogger(__name__)

CONFIG_NAME = "config.json"
WEIGHTS_NAME = "model.tsfu"
FROZEN_GATE = 0.5


class TSFusion(Module):
    """Local sandwich encoder + global graph attention, fused by a learned gate.

    ``forward`` takes one window history ``[N×F×M]`` in normalized units and
    returns ``[N×F_target×H]``.
    """

    def __init__(self, config: ModelConfig, flags: AblationFlags, graph: TrafficGraph, num_features: int):
        super().__init__()
        config.validate()
        flags.validate()
        self.config = config
        self.flags = flags
        self.graph = graph
        self.num_features = num_features
        rng = np.random.default_rng(config.seed)

        self.encoder = TemporalSpatialEncoder(
            num_features, config.channels, config.blocks, config.kernel_size, config.history, rng)
        steps = self.encoder.out_steps
        local_width = config.channels * steps
        self.per_step = config.per_step_attention and not flags.no_local
        token_width = config.channels if self.per_step else local_width
        # nL: the transformer reads a linear embedding of the flattened raw window
        self.raw_embed = Linear(num_features * config.history, token_width, rng) if flags.no_local else None
        self.transformer = GraphTransformerEncoder(
            token_width,
            graph,
            num_heads=config.num_heads,
            head_dim=config.head_dim,
            depth=config.depth,
            keep_prob=config.keep_prob,
            feature_enhance=not flags.no_feature_enhance,
            seed=config.seed,
            rng=rng,
        )
        out_width = len(config.target_features) * config.horizon
        self.fusion = FusionParams(
            local_width,
            local_width,
            config.fused_width,
            out_width,
            rng,
            hidden=config.hidden,
            skip=not (flags.no_residual or flags.no_local),
        )
        # per-feature scales so raw-magnitude features enter and leave at unit size
        self.input_scale = self.register_buffer("input_scale", np.ones(num_features))
        self.output_scale = self.register_buffer("output_scale", np.ones(len(config.target_features)))
        self.last_gate: Optional[np.ndarray] = None
        self.last_attention = []
        self.record_inspection = True

    def set_feature_scale(self, feature_stds: np.ndarray) -> None:
        stds = np.where(np.asarray(feature_stds) > 0, feature_stds, 1.0)
        np.copyto(self.input_scale, 1.0 / stds)
        np.copyto(self.output_scale, stds[self.config.target_ids()])

    @property
    def output_shape(self):
        return (self.graph.num_nodes, len(self.config.target_features), self.config.horizon)

    def reseed(self, seed: int) -> None:
        self.transformer.reseed(seed)

    def _global(self, x: Tensor, local: Optional[Tensor]) -> Tuple[Tensor, List[np.ndarray]]:
        n = x.shape[0]
        if self.flags.no_local:
            tokens = self.raw_embed(tc.reshape(x, (n, self.num_features * self.config.history)))
            out = self.transformer(tokens, self.graph)
            return out, list(self.transformer.last_attention)
        if self.per_step:
            steps, attention = [], []
            for m in range(local.shape[2]):
                steps.append(self.transformer(tc.select(local, 2, m), self.graph))
                attention.extend(self.transformer.last_attention)
            return (tc.concat(steps, axis=1) if len(steps) > 1 else steps[0]), attention
        out = self.transformer(tc.reshape(local, (n, local.shape[1] * local.shape[2])), self.graph)
        return out, list(self.transformer.last_attention)

    def forward(self, history: Union[Tensor, np.ndarray]) -> Tensor:
        x = tc.as_tensor(history)
        expected = (self.graph.num_nodes, self.num_features, self.config.history)
        if x.shape != expected:
            raise ShapeError(f"window history must be {expected}, got {x.shape}")
        n = x.shape[0]
        x = tc.mul(x, Tensor(np.broadcast_to(self.input_scale[None, :, None], x.shape)))

        local_map = None if self.flags.no_local else self.encoder(x, self.graph.normalized)
        local = None if local_map is None else tc.reshape(local_map, (n, local_map.shape[1] * local_map.shape[2]))

        gate, attention = None, []
        if self.flags.no_global:
            fused = self.fusion.local_proj(local)
        else:
            global_emb, attention = self._global(x, local_map)
            if self.flags.no_local:
                fused = self.fusion.global_proj(global_emb)
            else:
                frozen = FROZEN_GATE if self.flags.no_gate else None
                fused, gate = fuse(global_emb, local, self.fusion, frozen)
        if self.record_inspection:
            self.last_gate = None if gate is None else gate.data
            self.last_attention = attention
        out = readout(fused, self.fusion, self.output_shape, local)
        return tc.mul(out, Tensor(np.broadcast_to(self.output_scale[None, :, None], out.shape)))

    def clear_inspection(self) -> None:
        self.last_gate = None
        self.last_attention = []

    @contextmanager
    def inspection_paused(self) -> Iterator["TSFusion"]:
        """Forward passes inside the block leave ``last_gate``/``last_attention`` untouched.

        Used when several threads share the model; the fields are cleared on
        entry and on exit.
        """
        previous = self.record_inspection
        self.record_inspection = False
        self.clear_inspection()
        try:
            yield self
        finally:
            self.record_inspection = previous
            self.clear_inspection()

    def save_pretrained(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        tc.save_tensors(out_dir / WEIGHTS_NAME, self.state_dict())
        payload = dump_config(self.config, self.flags, num_features=self.num_features,
                              num_nodes=self.graph.num_nodes)
        (out_dir / CONFIG_NAME).write_text(json.dumps(payload, indent=2), encoding="utf-8")
        return out_dir

    @classmethod
    def from_pretrained(cls, model_dir: Union[str, Path], graph: TrafficGraph) -> "TSFusion":
        model_dir = Path(model_dir)
        payload = read_pretrained(model_dir)
        if payload.get("num_nodes", graph.num_nodes) != graph.num_nodes:
            raise ValidationError(
                f"checkpoint was trained on {payload['num_nodes']} nodes, graph has {graph.num_nodes}")
        model = cls(ModelConfig(**payload["model"]), AblationFlags(**payload["flags"]), graph,
                    payload["num_features"])
        model.load_state_dict(tc.load_tensors(model_dir / WEIGHTS_NAME))
        model.eval()
        logger.info("loaded %s (%d parameters)", model_dir, model.num_parameters())
        return model


def build_model(config: ModelConfig, flags: AblationFlags, graph: TrafficGraph, num_features: int = 3) -> TSFusion:
    model = TSFusion(config, flags, graph, num_features)
    logger.info("built %s with %d parameters", flags.variant_name(), model.num_parameters())
    return model


def read_pretrained(model_dir: Union[str, Path]) -> dict:
    """The ``config.json`` payload of a saved model directory."""
    path = Path(model_dir) / CONFIG_NAME
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None
    for key in ("model", "flags", "num_features"):
        if key not in payload:
            raise ValidationError(f"{path} has no {key!r} entry")
    return payload
