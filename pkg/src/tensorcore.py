"""Dense float64 tensors with a reverse-mode differentiation tape.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Outside a tape nothing is recorded,
which is how evaluation runs without paying for bookkeeping.
"""
import logging
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from errors import (
    DegenerateRowError,
    InsufficientHistoryError,
    NumericError,
    RankError,
    ShapeError,
    ValidationError,
)

logger = logging.getLogger(__name__)

DTYPE = np.float64
CHECKPOINT_MAGIC = b"TSFU"
CHECKPOINT_VERSION = 1

ArrayLike = Union["Tensor", np.ndarray, float, Sequence]

_local = threading.local()


def _tape_stack() -> List["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class TapeNode:
    kind: str
    inputs: Tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Append-only record of operations, confined to the thread that opened it."""

    def __init__(self):
        self.nodes: List[TapeNode] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, inputs: Tuple["Tensor", ...], output: "Tensor", backward) -> None:
        output._tape = self
        output.tape_id = len(self.nodes)
        self.nodes.append(TapeNode(kind, inputs, output, backward))


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.tape_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(kind: str, inputs: Tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(kind, inputs, out, backward)
    return out


class GradientMap(dict):
    """Maps leaf tensors to the gradient accumulated during one backward pass."""

    def of(self, tensor: Tensor) -> np.ndarray:
        grad = self.get(tensor)
        return np.zeros_like(tensor.data) if grad is None else grad


def backward(loss: Tensor) -> GradientMap:
    if loss.ndim != 0:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    result = GradientMap()
    if not loss.requires_grad:
        return result
    tape = loss._tape
    if tape is None:
        loss.grad = np.ones_like(loss.data)
        result[loss] = loss.grad
        return result

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: Dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes[: loss.tape_id + 1]):
        upstream = grads.pop(id(node.output), None)
        if upstream is None:
            continue
        owners.pop(id(node.output), None)
        for tensor, grad in zip(node.inputs, node.backward(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            if grad.shape != tensor.shape:
                raise ShapeError(
                    f"{node.kind} produced gradient {grad.shape} for input {tensor.shape}"
                )
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad
                owners[key] = tensor

    for key, grad in grads.items():
        tensor = owners[key]
        tensor.grad = grad
        result[tensor] = grad
    return result


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------

def _is_bias(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0] and a.shape != b.shape


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        return _record("add", (a, b), a.data + b.data, lambda g: (g, g))
    if _is_bias(a, b):
        width = b.shape[0]
        return _record(
            "add_bias", (a, b), a.data + b.data,
            lambda g: (g, g.reshape(-1, width).sum(axis=0)),
        )
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not match")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not match")
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not match")
    x, y = a.data, b.data
    return _record("mul", (a, b), x * y, lambda g: (g * y, g * x))


def scale(a: Tensor, factor: float) -> Tensor:
    return _record("scale", (a,), a.data * factor, lambda g: (g * factor,))


def add_scalar(a: Tensor, value: float) -> Tensor:
    return _record("add_scalar", (a,), a.data + value, lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    x, y = a.data, b.data
    return _record("matmul", (a, b), x @ y, lambda g: (g @ y.T, x.T @ g))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(
        "transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(original),))


def sigmoid(a: Tensor) -> Tensor:
    s = np.exp(-np.logaddexp(0.0, -a.data))
    return _record("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def relu(a: Tensor) -> Tensor:
    active = a.data > 0
    return _record("relu", (a,), np.where(active, a.data, 0.0), lambda g: (g * active,))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _record("tanh", (a,), t, lambda g: (g * (1.0 - t * t),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            d1 != d2 for k, (d1, d2) in enumerate(zip(t.shape, tensors[0].shape)) if k != axis
        ):
            raise ShapeError(f"concat along axis {axis}: {tensors[0].shape} vs {t.shape}")
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(
        "concat", tensors, np.concatenate([t.data for t in tensors], axis=axis),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def select(a: Tensor, axis: int, index: int) -> Tensor:
    """Slice out one position of ``axis``, dropping that axis."""
    axis = axis % a.ndim

    def grad_fn(g):
        full = np.zeros_like(a.data)
        slicer = [slice(None)] * a.ndim
        slicer[axis] = index
        full[tuple(slicer)] = g
        return (full,)

    return _record("select", (a,), np.take(a.data, index, axis=axis), grad_fn)


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, indices, g)
        return (full,)

    return _record("take_rows", (table,), table.data[indices], grad_fn)


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    if axis is None:
        return _record(
            "sum", (a,), np.asarray(a.data.sum()),
            lambda g: (np.full(a.shape, float(g)),),
        )
    shape = a.shape
    return _record(
        "sum_axis", (a,), a.data.sum(axis=axis),
        lambda g: (np.array(np.broadcast_to(np.expand_dims(g, axis), shape)),),
    )


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax; ``mask`` marks entries (True) that are excluded."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.shape}")
    logits = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match logits {x.shape}")
        dead = mask.all(axis=1)
        if dead.any():
            raise DegenerateRowError(f"rows {np.flatnonzero(dead).tolist()} are fully masked")
        logits = np.where(mask, -np.inf, logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    return _record(
        "softmax_rows", (x,), s,
        lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),),
    )


# ---------------------------------------------------------------------------
# normalisation and regularisation
# ---------------------------------------------------------------------------

def _normalize(x: np.ndarray, axis: int, eps: float):
    mu = x.mean(axis=axis, keepdims=True)
    var = x.var(axis=axis, keepdims=True)
    floored = var < eps
    inv_std = 1.0 / np.sqrt(np.where(floored, eps, var))
    return mu, var, floored, inv_std, (x - mu) * inv_std


def _normalize_grad(dxhat, xhat, inv_std, floored, axis):
    n = dxhat.shape[axis]
    corr = np.where(floored, 0.0, xhat * (dxhat * xhat).sum(axis=axis, keepdims=True))
    return inv_std / n * (n * dxhat - dxhat.sum(axis=axis, keepdims=True) - corr)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Normalise each column over the rows of ``x`` ([N×C]).

    The variance is floored at ``eps`` rather than shifted by it, so unit-variance
    statistics pass through unchanged. Running statistics are updated in place in
    training mode.
    """
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape}, scale {gamma.shape}, shift {beta.shape}")
    if not training:
        inv_std = 1.0 / np.sqrt(np.maximum(running_var, eps))
        xhat = (x.data - running_mean) * inv_std
        w = gamma.data
        return _record(
            "batch_norm_eval", (x, gamma, beta), xhat * w + beta.data,
            lambda g: (g * w * inv_std, (g * xhat).sum(axis=0), g.sum(axis=0)),
        )
    mu, var, floored, inv_std, xhat = _normalize(x.data, 0, eps)
    running_mean *= momentum
    running_mean += (1.0 - momentum) * mu[0]
    running_var *= momentum
    running_var += (1.0 - momentum) * var[0]
    w = gamma.data

    def grad_fn(g):
        dx = _normalize_grad(g * w, xhat, inv_std, floored, 0)
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record("batch_norm", (x, gamma, beta), xhat * w + beta.data, grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row of ``x`` ([N×C]) over its columns."""
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm: input {x.shape}, scale {gamma.shape}, shift {beta.shape}")
    _, _, floored, inv_std, xhat = _normalize(x.data, 1, eps)
    w = gamma.data

    def grad_fn(g):
        dx = _normalize_grad(g * w, xhat, inv_std, floored, 1)
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record("layer_norm", (x, gamma, beta), xhat * w + beta.data, grad_fn)


def dropout(x: Tensor, keep_prob: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep probability must lie in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x
    keep = (rng.random(x.shape) < keep_prob) / keep_prob
    return _record("dropout", (x,), x.data * keep, lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def causal_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Valid 1-D convolution along the last axis of ``x`` ([nodes×channels×time]).

    Output position ``t`` sees inputs ``t .. t+width-1``, i.e. it is aligned with
    absolute time ``t+width-1`` and never reads a later step.
    """
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(f"causal_conv1d expects 3-D input and kernel, got {x.shape}, {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"causal_conv1d channels differ: input {x.shape}, kernel {kernel.shape}")
    width = kernel.shape[2]
    steps = x.shape[2]
    if steps < width:
        raise InsufficientHistoryError(f"{steps} time steps cannot feed a width-{width} kernel")
    out_len = steps - width + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, width, axis=2)
    w = kernel.data
    out = np.einsum("nctk,ock->not", windows, w, optimize=True)

    def grad_fn(g):
        dk = np.einsum("nctk,not->ock", windows, g, optimize=True)
        dx = np.zeros_like(x.data)
        for k in range(width):
            dx[:, :, k:k + out_len] += np.einsum("oc,not->nct", w[:, :, k], g, optimize=True)
        return dx, dk

    return _record("causal_conv1d", (x, kernel), out, grad_fn)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def _relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / (abs(analytic) + abs(numeric) + floor)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    floor: float = 1e-12,
) -> float:
    """Largest relative gap between the tape gradient and central differences."""
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    point = Tensor(x.data.copy(), requires_grad=True)
    with Tape():
        out = f(point)
        if not np.all(np.isfinite(out.data)):
            raise NumericError("non-finite output at the unperturbed point")
        analytic = backward(out).of(point)

    work = x.data.copy()
    worst = 0.0
    for idx in np.ndindex(work.shape):
        orig = work[idx]
        work[idx] = orig + h
        plus = f(Tensor(work)).item()
        work[idx] = orig - h
        minus = f(Tensor(work)).item()
        work[idx] = orig
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise NumericError(f"non-finite output when perturbing coordinate {idx}")
        worst = max(worst, _relative_error(analytic[idx], (plus - minus) / (2 * h), floor))
    return worst


def grad_check_parameters(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    floor: float = 1e-12,
) -> Dict[str, float]:
    """Run :func:`grad_check` over every coordinate of named parameters in place."""
    with Tape():
        loss = loss_fn()
        grads = backward(loss)
    report = {}
    for name, param in params.items():
        analytic = grads.of(param)
        worst = 0.0
        for idx in np.ndindex(param.shape):
            orig = param.data[idx]
            param.data[idx] = orig + h
            plus = loss_fn().item()
            param.data[idx] = orig - h
            minus = loss_fn().item()
            param.data[idx] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericError(f"non-finite loss when perturbing {name}{list(idx)}")
            worst = max(worst, _relative_error(analytic[idx], (plus - minus) / (2 * h), floor))
        report[name] = worst
    return report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_tensors(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, value in tensors.items():
        value = np.asarray(value, dtype=DTYPE)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(value.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read checkpoint {path}: {exc}") from None
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path} is not a checkpoint (bad magic {blob[:4]!r})")
    try:
        return _unpack_tensors(blob)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ValidationError(f"{path}: truncated or corrupt checkpoint ({exc})") from None


def _unpack_tensors(blob: bytes) -> Dict[str, np.ndarray]:
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    offset = 8
    tensors: Dict[str, np.ndarray] = {}
    while offset < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, offset)
        offset += 8 * rank
        count = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(DTYPE).reshape(dims)
        offset += 8 * count
    return tensors
