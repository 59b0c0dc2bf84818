"""Dense f64 kernels and a fixed-topology reverse-mode tape.

The kernels (conv2d, maxpool2d, upsample_nearest2d, relu) are pure functions over
numpy arrays. `GradTape` records the primitive operations of one forward pass and
replays their vector-Jacobian products in reverse order.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from core.errors import DimensionError, NumericalError, TapeError

# Set up logging
logger = logging.getLogger(__name__)

Tensor = npt.NDArray[np.float64]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def _batched(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected a [C,H,W] or [N,C,H,W] tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Cross-correlation with zero 'same' padding, stride 1."""
    xb, squeeze = _batched(np.asarray(x, dtype=np.float64))
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise DimensionError(f"kernels must be [C_out,C_in,k,k], got {kernels.shape}")
    c_out, c_in, k, _ = kernels.shape
    if k % 2 == 0:
        raise DimensionError(f"kernel size must be odd, got {k}")
    if xb.shape[1] != c_in:
        raise DimensionError(f"input has {xb.shape[1]} channels, kernels expect {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"bias must be [{c_out}], got {bias.shape}")

    pad = k // 2
    n, _, h, w = xb.shape
    padded = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))  # [N,C_in,H,W,k,k]
    out = np.empty((n, c_out, h, w), dtype=np.float64)
    for i in range(n):
        out[i] = np.tensordot(kernels, windows[i], axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out += bias[None, :, None, None]
    return out[0] if squeeze else out


def _conv2d_backward(x: Tensor, kernels: Tensor, g: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    xb, squeeze = _batched(x)
    gb, _ = _batched(g)
    k = kernels.shape[2]
    pad = k // 2
    padded = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))
    dk = np.zeros_like(kernels)
    for i in range(xb.shape[0]):
        dk += np.tensordot(gb[i], windows[i], axes=([1, 2], [1, 2]))
    flipped = np.ascontiguousarray(kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx = conv2d(gb, flipped)
    db = gb.sum(axis=(0, 2, 3))
    return (dx[0] if squeeze else dx), dk, db


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    xb, squeeze = _batched(np.asarray(x, dtype=np.float64))
    n, c, h, w = xb.shape
    if h % window or w % window:
        raise DimensionError(f"spatial dims {(h, w)} not divisible by window {window}")
    blocks = xb.reshape(n, c, h // window, window, w // window, window)
    out = blocks.max(axis=(3, 5))
    return out[0] if squeeze else out


def _maxpool2d_backward(x: Tensor, g: Tensor, window: int) -> Tensor:
    # Gradient goes to the first maximal element of each window (row-major order).
    xb, squeeze = _batched(x)
    gb, _ = _batched(g)
    n, c, h, w = xb.shape
    hp, wp = h // window, w // window
    blocks = (
        xb.reshape(n, c, hp, window, wp, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, hp, wp, window * window)
    )
    first = blocks.argmax(axis=-1)
    routed = np.zeros_like(blocks)
    np.put_along_axis(routed, first[..., None], gb[..., None], axis=-1)
    dx = (
        routed.reshape(n, c, hp, wp, window, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )
    return dx[0] if squeeze else dx


def upsample_nearest2d(x: Tensor, factor: int = 2) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)


def _upsample_backward(g: Tensor, factor: int) -> Tensor:
    *lead, h, w = g.shape
    return g.reshape(*lead, h // factor, factor, w // factor, factor).sum(axis=(-3, -1))


def relu(x: Tensor) -> Tensor:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def softplus(x: Tensor) -> Tensor:
    return np.logaddexp(0.0, x)


def sigmoid(x: Tensor) -> Tensor:
    return expit(x)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

class ParamSet:
    """Named, ordered parameter tensors. Iteration order is the canonical order."""

    def __init__(self, tensors: Optional[Iterable[Tuple[str, Tensor]]] = None):
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, value in tensors or []:
            self._tensors[name] = np.asarray(value, dtype=np.float64)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __setitem__(self, name: str, value: Tensor):
        self._tensors[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: tuple(t.shape) for name, t in self._tensors.items()}

    def num_params(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    def flatten(self) -> Tensor:
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([t.ravel() for t in self._tensors.values()])

    def unflatten(self, vector: Tensor) -> "ParamSet":
        """Build a ParamSet with this set's names/shapes from a canonical flat vector."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.num_params(),):
            raise DimensionError(
                f"flat vector has length {vector.size}, expected {self.num_params()}"
            )
        out, offset = ParamSet(), 0
        for name, t in self._tensors.items():
            out[name] = vector[offset:offset + t.size].reshape(t.shape).copy()
            offset += t.size
        return out

    def copy(self) -> "ParamSet":
        return ParamSet((name, t.copy()) for name, t in self._tensors.items())

    def zeros_like(self) -> "ParamSet":
        return ParamSet((name, np.zeros_like(t)) for name, t in self._tensors.items())

    def merged(self, other: "ParamSet") -> "ParamSet":
        out = self.copy()
        for name, t in other.items():
            out[name] = t.copy()
        return out

    def subset(self, names: Sequence[str]) -> "ParamSet":
        return ParamSet((name, self._tensors[name].copy()) for name in names)

    def equals(self, other: "ParamSet") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n], other[n]) for n in self.names())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self._tensors.values())


# ---------------------------------------------------------------------------
# Reverse-mode tape
# ---------------------------------------------------------------------------

class Var:
    __slots__ = ("tape", "index", "value", "name")
    __array_ufunc__ = None

    def __init__(self, tape: "GradTape", index: int, value: Tensor, name: Optional[str] = None):
        self.tape = tape
        self.index = index
        self.value = value
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __repr__(self) -> str:
        return f"Var(index={self.index}, shape={self.value.shape}, name={self.name})"


Operand = Union[Var, Tensor, float]
BackwardFn = Callable[[Tensor], Sequence[Optional[Tensor]]]


@dataclass
class _Node:
    output: int
    inputs: Tuple[int, ...]
    backward: BackwardFn
    op: str


def _unbroadcast(g: Tensor, shape: Tuple[int, ...]) -> Tensor:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class GradTape:
    """Records primitive ops of one forward pass; `gradient` replays them backwards."""

    def __init__(self):
        self._nodes: List[_Node] = []
        self._count = 0
        self._params: "OrderedDict[str, Var]" = OrderedDict()

    # -- leaves ----------------------------------------------------------------

    def _new(self, value: Tensor, name: Optional[str] = None) -> Var:
        value = np.asarray(value, dtype=np.float64)
        var = Var(self, self._count, value, name)
        self._count += 1
        return var

    def watch(self, name: str, value: Tensor) -> Var:
        if name in self._params:
            raise TapeError(f"parameter '{name}' recorded twice")
        var = self._new(value, name)
        self._params[name] = var
        return var

    def watch_all(self, params: ParamSet) -> Dict[str, Var]:
        return {name: self.watch(name, value) for name, value in params.items()}

    def constant(self, value: Tensor) -> Var:
        return self._new(value)

    def _var(self, x: Operand) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise TapeError("operand belongs to a different tape")
            return x
        return self.constant(np.asarray(x, dtype=np.float64))

    def _record(self, value: Tensor, inputs: Sequence[Var], backward: BackwardFn, op: str) -> Var:
        if not np.all(np.isfinite(value)):
            raise NumericalError(f"non-finite output from '{op}' (op {len(self._nodes)})", op=op)
        out = self._new(value)
        self._nodes.append(_Node(out.index, tuple(v.index for v in inputs), backward, op))
        return out

    @property
    def params(self) -> Dict[str, Var]:
        return dict(self._params)

    def __len__(self) -> int:
        return len(self._nodes)

    # -- elementwise -----------------------------------------------------------

    def add(self, a: Operand, b: Operand) -> Var:
        a, b = self._var(a), self._var(b)
        sa, sb = a.shape, b.shape
        return self._record(
            a.value + b.value, (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add",
        )

    def sub(self, a: Operand, b: Operand) -> Var:
        a, b = self._var(a), self._var(b)
        sa, sb = a.shape, b.shape
        return self._record(
            a.value - b.value, (a, b),
            lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub",
        )

    def mul(self, a: Operand, b: Operand) -> Var:
        a, b = self._var(a), self._var(b)
        av, bv = a.value, b.value
        return self._record(
            av * bv, (a, b),
            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul",
        )

    def scale(self, a: Operand, c: float) -> Var:
        a = self._var(a)
        return self._record(a.value * c, (a,), lambda g: (g * c,), "scale")

    def square(self, a: Operand) -> Var:
        a = self._var(a)
        av = a.value
        return self._record(av * av, (a,), lambda g: (2.0 * av * g,), "square")

    def abs(self, a: Operand) -> Var:
        a = self._var(a)
        av = a.value
        return self._record(np.abs(av), (a,), lambda g: (np.sign(av) * g,), "abs")

    def relu(self, a: Operand) -> Var:
        a = self._var(a)
        mask = a.value > 0
        return self._record(relu(a.value), (a,), lambda g: (g * mask,), "relu")

    def tanh(self, a: Operand) -> Var:
        a = self._var(a)
        out = np.tanh(a.value)
        return self._record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")

    def sigmoid(self, a: Operand) -> Var:
        a = self._var(a)
        out = sigmoid(a.value)
        return self._record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def softplus(self, a: Operand) -> Var:
        a = self._var(a)
        av = a.value
        return self._record(softplus(av), (a,), lambda g: (g * sigmoid(av),), "softplus")

    def log2(self, a: Operand) -> Var:
        a = self._var(a)
        av = a.value
        return self._record(np.log2(av), (a,), lambda g: (g / (av * np.log(2.0)),), "log2")

    def clamp(self, a: Operand, lo: Optional[float] = None, hi: Optional[float] = None) -> Var:
        """Clip to [lo, hi]; the gradient only flows where the input was inside the range."""
        a = self._var(a)
        av = a.value
        out = np.clip(av, lo, hi)
        inside = np.ones(av.shape, dtype=bool)
        if lo is not None:
            inside &= av > lo
        if hi is not None:
            inside &= av < hi
        return self._record(out, (a,), lambda g: (g * inside,), "clamp")

    def lower_bound(self, a: Operand, floor: float) -> Var:
        """max(a, floor); below the floor the gradient passes only if it pushes upwards."""
        a = self._var(a)
        av = a.value
        return self._record(
            np.maximum(av, floor), (a,),
            lambda g: (g * ((av >= floor) | (g < 0)),), "lower_bound",
        )

    def straight_through(self, a: Operand, forward: Callable[[Tensor], Tensor]) -> Var:
        """Apply `forward` on the forward pass, identity on the backward pass."""
        a = self._var(a)
        return self._record(forward(a.value), (a,), lambda g: (g,), "straight_through")

    def custom(self, a: Operand, value: Tensor, local_grad: Tensor, op: str = "custom") -> Var:
        """Elementwise node with a precomputed local derivative."""
        a = self._var(a)
        return self._record(np.asarray(value, dtype=np.float64), (a,),
                            lambda g: (g * local_grad,), op)

    # -- shape & reduction -----------------------------------------------------

    def sum(self, a: Operand, axis: Optional[Union[int, Tuple[int, ...]]] = None) -> Var:
        a = self._var(a)
        shape = a.shape

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return self._record(np.asarray(a.value.sum(axis=axis)), (a,), backward, "sum")

    def mean(self, a: Operand) -> Var:
        a = self._var(a)
        return self.scale(self.sum(a), 1.0 / a.value.size)

    def reshape(self, a: Operand, shape: Tuple[int, ...]) -> Var:
        a = self._var(a)
        old = a.shape
        return self._record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, a: Operand, axes: Tuple[int, ...]) -> Var:
        a = self._var(a)
        inverse = tuple(np.argsort(axes))
        return self._record(
            np.ascontiguousarray(a.value.transpose(axes)), (a,),
            lambda g: (g.transpose(inverse),), "transpose",
        )

    def channel_matmul(self, m: Operand, x: Operand) -> Var:
        """Per-channel matrix product: [C,o,i] x [C,i,M] -> [C,o,M]."""
        m, x = self._var(m), self._var(x)
        mv, xv = m.value, x.value
        return self._record(
            np.matmul(mv, xv), (m, x),
            lambda g: (np.matmul(g, xv.transpose(0, 2, 1)), np.matmul(mv.transpose(0, 2, 1), g)),
            "channel_matmul",
        )

    # -- network kernels -------------------------------------------------------

    def conv2d(self, x: Operand, kernels: Operand, bias: Operand) -> Var:
        x, kernels, bias = self._var(x), self._var(kernels), self._var(bias)
        xv, kv = x.value, kernels.value
        return self._record(
            conv2d(xv, kv, bias.value), (x, kernels, bias),
            lambda g: _conv2d_backward(xv, kv, g), "conv2d",
        )

    def maxpool2d(self, x: Operand, window: int = 2) -> Var:
        x = self._var(x)
        xv = x.value
        return self._record(
            maxpool2d(xv, window), (x,),
            lambda g: (_maxpool2d_backward(xv, g, window),), "maxpool2d",
        )

    def upsample_nearest2d(self, x: Operand, factor: int = 2) -> Var:
        x = self._var(x)
        return self._record(
            upsample_nearest2d(x.value, factor), (x,),
            lambda g: (_upsample_backward(g, factor),), "upsample_nearest2d",
        )

    # -- backward --------------------------------------------------------------

    def gradient(self, loss: Var, names: Optional[Sequence[str]] = None) -> ParamSet:
        """Return d loss / d p for every watched parameter (or for `names`)."""
        if loss.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.value.shape}")
        wanted = list(self._params) if names is None else list(names)
        for name in wanted:
            if name not in self._params:
                raise TapeError(f"parameter '{name}' was not recorded on this tape")

        grads: Dict[int, Tensor] = {loss.index: np.ones_like(loss.value)}
        for node in reversed(self._nodes):
            g = grads.pop(node.output, None)
            if g is None:
                continue
            for index, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NumericalError(f"non-finite gradient through '{node.op}'", op=node.op)
                if index in grads:
                    grads[index] = grads[index] + gi
                else:
                    grads[index] = gi

        out = ParamSet()
        for name in wanted:
            var = self._params[name]
            out[name] = grads.get(var.index, np.zeros_like(var.value)).reshape(var.shape)
        logger.debug(f"Backward pass over {len(self._nodes)} ops for {len(wanted)} parameters")
        return out


def grad(
    loss_fn: Callable[[GradTape, Dict[str, Var]], Var],
    params: ParamSet,
    names: Optional[Sequence[str]] = None,
) -> Tuple[float, ParamSet]:
    """Evaluate `loss_fn` on a fresh tape and return (loss value, gradients)."""
    tape = GradTape()
    leaves = tape.watch_all(params)
    loss = loss_fn(tape, leaves)
    value = float(loss.value)
    return value, tape.gradient(loss, names)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, Tensor] = field(default_factory=dict)
    v: Dict[str, Tensor] = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "AdamState":
        return AdamState(
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.step,
        )


def adam_step(
    params: ParamSet,
    grads: ParamSet,
    state: AdamState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> ParamSet:
    """One bias-corrected Adam update over the parameters present in `grads`."""
    state.step += 1
    t = state.step
    out = params.copy()
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for '{name}' has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


class NumpyOps:
    """Tape-free twin of the GradTape op surface, used for inference."""

    conv2d = staticmethod(conv2d)
    maxpool2d = staticmethod(maxpool2d)
    upsample_nearest2d = staticmethod(upsample_nearest2d)
    relu = staticmethod(relu)
    softplus = staticmethod(softplus)
    sigmoid = staticmethod(sigmoid)
    tanh = staticmethod(np.tanh)
    abs = staticmethod(np.abs)
    log2 = staticmethod(np.log2)
    square = staticmethod(np.square)
    channel_matmul = staticmethod(np.matmul)

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def sub(a, b):
        return a - b

    @staticmethod
    def mul(a, b):
        return a * b

    @staticmethod
    def scale(a, c):
        return a * c

    @staticmethod
    def lower_bound(a, floor):
        return np.maximum(a, floor)

    @staticmethod
    def clamp(a, lo=None, hi=None):
        return np.clip(a, lo, hi)

    @staticmethod
    def sum(a, axis=None):
        return np.asarray(np.sum(a, axis=axis))

    @staticmethod
    def mean(a):
        return np.asarray(np.mean(a))

    @staticmethod
    def reshape(a, shape):
        return np.reshape(a, shape)

    @staticmethod
    def transpose(a, axes):
        return np.ascontiguousarray(np.transpose(a, axes))

    @staticmethod
    def straight_through(a, forward):
        return forward(a)

    @staticmethod
    def custom(a, value, local_grad, op="custom"):
        return np.asarray(value, dtype=np.float64)


def value_of(x) -> Tensor:
    return x.value if isinstance(x, Var) else np.asarray(x)
