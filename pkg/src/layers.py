"""Parameter containers in the style of ``torch.nn`` built on :mod:`tensorcore`."""
from typing import Dict, Iterator, Mapping, Tuple

import numpy as np

import tensorcore as tc
from errors import ShapeError
from tensorcore import Tensor


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.array(data, dtype=tc.DTYPE), requires_grad=True)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape: Tuple[int, ...]) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-limit, limit, size=shape))


class Module:
    def __init__(self):
        self.training = True
        self._buffers: Dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = np.array(value, dtype=tc.DTYPE)
        return self._buffers[name]

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{name}.{i}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({f"buffer:{name}": b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """Copy values into the existing buffers so optimiser views stay valid."""
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, target in own.items():
            value = np.asarray(state[name], dtype=tc.DTYPE)
            if value.shape != target.shape:
                raise ShapeError(f"{name}: checkpoint {value.shape} vs model {target.shape}")
            np.copyto(target, value)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = glorot(rng, in_features, out_features, (in_features, out_features))
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = tc.matmul(x, self.weight)
        return tc.add(out, self.bias) if self.bias is not None else out


class MLP(Module):
    """Linear -> ReLU -> Linear."""

    def __init__(self, in_features: int, hidden: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = Linear(in_features, hidden, rng)
        self.out = Linear(hidden, out_features, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.out(tc.relu(self.hidden(x)))


class BatchNorm(Module):
    def __init__(self, width: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.gamma = parameter(np.ones(width))
        self.beta = parameter(np.zeros(width))
        self.momentum = momentum
        self.eps = eps
        self.running_mean = self.register_buffer("running_mean", np.zeros(width))
        self.running_var = self.register_buffer("running_var", np.ones(width))

    def forward(self, x: Tensor) -> Tensor:
        return tc.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = parameter(np.ones(width))
        self.beta = parameter(np.zeros(width))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gamma, self.beta, self.eps)
