"""
Dense tensors with reverse-mode differentiation and emulated mixed precision.

Every operation takes the evaluation precision ``mode``. Inputs must already
be exact in that format, arithmetic runs in binary32 and the output is
rounded to ``mode`` once, at the operation boundary. Matrix products keep
binary32 running sums with a fixed (k ascending) summation order, so results
are bit-reproducible. The backward pass always runs in binary32.

Example:

    >>> from pvpASR.tensor import Tape, matmul, total, backward
    >>> from pvpASR.precision import PrecisionMode
    >>> tape = Tape()
    >>> a = tape.variable([[1.0, 2.0]])
    >>> b = tape.constant([[3.0], [4.0]])
    >>> loss = total(matmul(a, b, PrecisionMode.FP32), PrecisionMode.FP32)
    >>> backward(tape, loss)[a.node]
    array([[3., 4.]], dtype=float32)
"""
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from pvpASR.errors import PrecisionMismatchError, ShapeMismatchError
from pvpASR.precision import PrecisionMode, quantize_buffer

FP32 = PrecisionMode.FP32
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """
    Immutable array value tagged with the format it is exact in.

    Attributes:
        data (np.ndarray): binary32 storage.
        fmt (PrecisionMode): Format every element is representable in.
        tape (Tape): Tape the value was created on, or None.
        node (int): Node id on the tape.
        requires_grad (bool): Whether gradients flow back through this value.
    """
    __slots__ = ("data", "fmt", "tape", "node", "requires_grad")

    def __init__(self,
                 data: np.ndarray,
                 fmt: PrecisionMode = FP32,
                 tape: "Tape" = None,
                 node: int = -1,
                 requires_grad: bool = False):
        self.data = data
        self.fmt = fmt
        self.tape = tape
        self.node = node
        self.requires_grad = requires_grad
        self.data.flags.writeable = False

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, fmt={self.fmt}, node={self.node})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(
                f"item() needs a single element, got shape {self.shape}.")
        return float(self.data.reshape(-1)[0])


@dataclass
class _Record:
    inputs: Tuple[Tensor, ...]
    output: int
    backward: BackwardFn


class Tape:
    """
    Recorder of differentiable operations, in creation order.

    A tape belongs to one thread; independent evaluations use separate tapes.
    """
    def __init__(self):
        self.records: List[_Record] = []
        self.leaves: Dict[int, Tensor] = {}
        self._next_node = 0

    def __len__(self) -> int:
        return len(self.records)

    def _new_node(self) -> int:
        node = self._next_node
        self._next_node += 1
        return node

    def constant(self, data, fmt: PrecisionMode = FP32) -> Tensor:
        """Create a non-differentiable value, rounded to ``fmt``."""
        arr = quantize_buffer(np.asarray(data, dtype=np.float32), fmt)
        return Tensor(arr, fmt, self, self._new_node(), False)

    def variable(self, data, fmt: PrecisionMode = FP32) -> Tensor:
        """Create a differentiable leaf, rounded to ``fmt``."""
        arr = quantize_buffer(np.asarray(data, dtype=np.float32), fmt)
        tensor = Tensor(arr, fmt, self, self._new_node(), True)
        self.leaves[tensor.node] = tensor
        return tensor

    def record(self, data: np.ndarray, fmt: PrecisionMode,
               inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
        """
        Register the result of an operation.

        Args:
            data (np.ndarray): Output values, already exact in ``fmt``.
            fmt (PrecisionMode): Output format.
            inputs (Sequence[Tensor]): Operation inputs.
            backward (Callable): Maps the output gradient to one gradient
                (or None) per input, all binary32.

        Returns:
            Tensor: Output tensor on this tape.
        """
        requires_grad = any(t.requires_grad for t in inputs)
        out = Tensor(np.asarray(data, dtype=np.float32), fmt, self,
                     self._new_node(), requires_grad)
        if requires_grad:
            self.records.append(_Record(tuple(inputs), out.node, backward))
        return out


def _tape_of(*tensors: Tensor) -> Tape:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ValueError("Tensors belong to different tapes.")
    return tape if tape is not None else Tape()


def _check_mode(mode: PrecisionMode, *tensors: Tensor) -> None:
    for t in tensors:
        if t.fmt is not mode:
            raise PrecisionMismatchError(
                f"Operand is in {t.fmt} but the operation runs in {mode}; "
                "cast it first.")


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeMismatchError(
            f"Shapes {a.shape} and {b.shape} are neither equal nor scalar.")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(dtype=np.float32),
                      dtype=np.float32).reshape(shape)


def _finish(values: np.ndarray, mode: PrecisionMode) -> np.ndarray:
    return quantize_buffer(values, mode)


# --- primitives ------------------------------------------------------------


def cast(a: Tensor, mode: PrecisionMode) -> Tensor:
    """Round ``a`` to ``mode``. The gradient passes straight through."""
    tape = _tape_of(a)
    return tape.record(_finish(a.data, mode), mode, [a], lambda g: (g, ))


def matmul(a: Tensor,
           b: Tensor,
           mode: PrecisionMode,
           ordered: bool = True) -> Tensor:
    """
    Matrix product with binary32 accumulation.

    Each output element is ``quantize(sum_k a[i, k] * b[k, j], mode)`` where
    the products and the running sum are binary32 and k runs ascending.

    Args:
        a (Tensor): Left operand, shape (M, K).
        b (Tensor): Right operand, shape (K, N).
        mode (PrecisionMode): Evaluation precision.
        ordered (bool): If False, use the BLAS product instead. Faster, but
            the summation order is unspecified.

    Returns:
        Tensor: Shape (M, N).

    Raises:
        ShapeMismatchError: Operands are not 2-D or inner dimensions differ.
    """
    _check_mode(mode, a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"Cannot multiply shapes {a.shape} and {b.shape}.")
    A, B = a.data, b.data
    if A.shape[1] == 0:
        out = np.zeros((A.shape[0], B.shape[1]), dtype=np.float32)
    elif ordered:
        products = A[:, :, None] * B[None, :, :]
        out = np.cumsum(products, axis=1, dtype=np.float32)[:, -1, :]
    else:
        out = np.matmul(A, B)

    def _backward(g):
        return (np.matmul(g, B.T).astype(np.float32),
                np.matmul(A.T, g).astype(np.float32))

    return _tape_of(a, b).record(_finish(out, mode), mode, [a, b], _backward)


def add(a: Tensor, b: Tensor, mode: PrecisionMode) -> Tensor:
    _check_mode(mode, a, b)
    _check_broadcast(a, b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _tape_of(a, b).record(
        _finish(out, mode), mode, [a, b], lambda g:
        (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor, mode: PrecisionMode) -> Tensor:
    _check_mode(mode, a, b)
    _check_broadcast(a, b)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return _tape_of(a, b).record(
        _finish(out, mode), mode, [a, b], lambda g:
        (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor, mode: PrecisionMode) -> Tensor:
    _check_mode(mode, a, b)
    _check_broadcast(a, b)
    A, B = a.data, b.data
    out = A * B

    def _backward(g):
        return (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape))

    return _tape_of(a, b).record(_finish(out, mode), mode, [a, b], _backward)


def scale(a: Tensor, c: float, mode: PrecisionMode) -> Tensor:
    _check_mode(mode, a)
    c = np.float32(c)
    return _tape_of(a).record(_finish(a.data * c, mode), mode, [a],
                              lambda g: (g * c, ))


def square(a: Tensor, mode: PrecisionMode) -> Tensor:
    _check_mode(mode, a)
    A = a.data
    return _tape_of(a).record(_finish(A * A, mode), mode, [a],
                              lambda g: (np.float32(2) * g * A, ))


def tanh(a: Tensor, mode: PrecisionMode) -> Tensor:
    _check_mode(mode, a)
    y = np.tanh(a.data)
    return _tape_of(a).record(_finish(y, mode), mode, [a],
                              lambda g: (g * (np.float32(1) - y * y), ))


def relu(a: Tensor, mode: PrecisionMode) -> Tensor:
    _check_mode(mode, a)
    positive = a.data > 0
    out = np.where(positive, a.data, np.float32(0))
    return _tape_of(a).record(_finish(out, mode), mode, [a], lambda g:
                              (np.where(positive, g, np.float32(0)), ))


def log(a: Tensor, mode: PrecisionMode) -> Tensor:
    _check_mode(mode, a)
    A = a.data
    with np.errstate(divide="ignore"):
        out = np.log(A)
    return _tape_of(a).record(_finish(out, mode), mode, [a],
                              lambda g: (g / A, ))


def sqrt(a: Tensor, mode: PrecisionMode) -> Tensor:
    """Square root; the gradient at 0 is taken as 0."""
    _check_mode(mode, a)
    y = np.sqrt(a.data)

    def _backward(g):
        safe = np.where(y > 0, y, np.float32(1))
        return (np.where(y > 0, g / (np.float32(2) * safe), np.float32(0)), )

    return _tape_of(a).record(_finish(y, mode), mode, [a], _backward)


def log_softmax(a: Tensor, axis: int, mode: PrecisionMode) -> Tensor:
    """
    Numerically stabilised log-softmax along ``axis``.

    The row maximum is subtracted before exponentiation; exponentials and
    their sum are binary32.
    """
    _check_mode(mode, a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeMismatchError(f"Axis {axis} out of range for {a.shape}.")
    A = a.data
    shifted = A - A.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True,
                                     dtype=np.float32))
    exact = (shifted - lse).astype(np.float32)
    probs = np.exp(exact)

    def _backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True, dtype=np.float32),
                )

    return _tape_of(a).record(_finish(exact, mode), mode, [a], _backward)


def total(a: Tensor, mode: PrecisionMode) -> Tensor:
    """Sum of all elements, as a scalar tensor of shape ()."""
    _check_mode(mode, a)
    shape = a.shape
    out = np.asarray(a.data.sum(dtype=np.float32), dtype=np.float32)
    return _tape_of(a).record(
        _finish(out, mode), mode, [a], lambda g:
        (np.broadcast_to(g, shape).astype(np.float32), ))


def mean(a: Tensor, mode: PrecisionMode) -> Tensor:
    """Mean of all elements, as a scalar tensor of shape ()."""
    _check_mode(mode, a)
    shape = a.shape
    n = np.float32(max(a.size, 1))
    out = np.asarray(a.data.sum(dtype=np.float32) / n, dtype=np.float32)
    return _tape_of(a).record(
        _finish(out, mode), mode, [a], lambda g:
        (np.broadcast_to(g / n, shape).astype(np.float32), ))


def max_abs(a: Tensor, mode: PrecisionMode) -> Tensor:
    """L-infinity norm; the gradient goes to the first maximal element."""
    _check_mode(mode, a)
    flat = a.data.reshape(-1)
    shape = a.shape
    if flat.size == 0:
        return _tape_of(a).record(np.float32(0), mode, [a],
                                  lambda g: (np.zeros(shape, np.float32), ))
    idx = int(np.argmax(np.abs(flat)))
    sign = np.float32(1) if flat[idx] >= 0 else np.float32(-1)
    out = np.asarray(np.abs(flat[idx]), dtype=np.float32)

    def _backward(g):
        grad = np.zeros(flat.size, dtype=np.float32)
        grad[idx] = g * sign
        return (grad.reshape(shape), )

    return _tape_of(a).record(_finish(out, mode), mode, [a], _backward)


# --- structural operations -------------------------------------------------


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as err:
        raise ShapeMismatchError(str(err)) from None
    return _tape_of(a).record(np.array(out), a.fmt, [a],
                              lambda g: (g.reshape(old), ))


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of a 2-D tensor."""
    shape = a.shape
    out = np.array(a.data[start:stop])

    def _backward(g):
        grad = np.zeros(shape, dtype=np.float32)
        grad[start:stop] = g
        return (grad, )

    return _tape_of(a).record(out, a.fmt, [a], _backward)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors with equal width along the first axis."""
    if not rows:
        raise ShapeMismatchError("Cannot stack an empty list of rows.")
    fmt = rows[0].fmt
    _check_mode(fmt, *rows)
    widths = {r.shape[1:] for r in rows}
    if len(widths) != 1:
        raise ShapeMismatchError(f"Row widths differ: {sorted(widths)}.")
    bounds = np.cumsum([0] + [r.shape[0] for r in rows])
    out = np.concatenate([r.data for r in rows], axis=0)

    def _backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(rows)))

    return _tape_of(*rows).record(out, fmt, list(rows), _backward)


def frames(signal: Tensor, frame_length: int, hop: int) -> Tensor:
    """
    Cut a 1-D signal into overlapping frames, dropping the trailing partial frame.

    Returns:
        Tensor: Shape (1 + (len - frame_length) // hop, frame_length).
    """
    length = signal.shape[0]
    count = 1 + (length - frame_length) // hop
    if length < frame_length or count < 1:
        raise ShapeMismatchError(
            f"Signal of {length} samples is shorter than one frame "
            f"({frame_length}).")
    index = (np.arange(count)[:, None] * hop +
             np.arange(frame_length)[None, :])
    out = signal.data[index]

    def _backward(g):
        grad = np.zeros(length, dtype=np.float32)
        np.add.at(grad, index, g)
        return (grad, )

    return _tape_of(signal).record(out, signal.fmt, [signal], _backward)


def power_spectrum(framed: Tensor, mode: PrecisionMode) -> Tensor:
    """
    One-sided DFT power ``|X_k|^2`` of every row, k = 0..n//2.

    Args:
        framed (Tensor): Shape (frames, n), already windowed.
        mode (PrecisionMode): Evaluation precision.

    Returns:
        Tensor: Shape (frames, n // 2 + 1).
    """
    _check_mode(mode, framed)
    n = framed.shape[1]
    spectrum = np.fft.rfft(framed.data, axis=1)
    power = (spectrum.real**2 + spectrum.imag**2).astype(np.float32)

    def _backward(g):
        # d|X_k|^2 / dx_m = 2 Re(conj(X_k) exp(-2j pi k m / n)), summed over
        # the one-sided bins only
        weighted = g * np.conj(spectrum)
        grad = 2.0 * np.real(np.fft.fft(weighted, n=n, axis=1))
        return (grad.astype(np.float32), )

    return _tape_of(framed).record(_finish(power, mode), mode, [framed],
                                   _backward)


# --- differentiation -------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """
    Reverse-mode sweep from a scalar loss.

    Args:
        tape (Tape): Tape holding every operation that produced ``loss``.
        loss (Tensor): Scalar (single-element) tensor.

    Returns:
        Dict[int, np.ndarray]: Gradient of ``loss`` for every differentiable
        leaf (``Tape.variable``), keyed by node id. Leaves the loss does not
        depend on get zeros.

    Raises:
        ShapeMismatchError: ``loss`` is not a scalar.
    """
    if loss.size != 1:
        raise ShapeMismatchError(
            f"Loss must be a scalar, got shape {loss.shape}.")
    grads: Dict[int, np.ndarray] = {
        loss.node: np.ones(loss.shape, dtype=np.float32)
    }
    for record in reversed(tape.records):
        g = grads.pop(record.output, None)
        if g is None:
            continue
        input_grads = record.backward(g)
        for tensor, grad in zip(record.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            grad = np.asarray(grad, dtype=np.float32).reshape(tensor.shape)
            if tensor.node in grads:
                grads[tensor.node] = grads[tensor.node] + grad
            else:
                grads[tensor.node] = grad
    return {
        node: grads.get(node, np.zeros(leaf.shape, dtype=np.float32))
        for node, leaf in tape.leaves.items()
    }


# --- optimisation ----------------------------------------------------------


class Adam:
    """
    Adam optimizer over named binary32 arrays, updated in place.

    Args:
        lr (float): Step size.
        beta1 (float): First-moment decay.
        beta2 (float): Second-moment decay.
        eps (float): Denominator stabiliser.
    """
    def __init__(self,
                 lr: float = 1e-3,
                 beta1: float = 0.9,
                 beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray],
             grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, grad in grads.items():
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(grad, dtype=np.float32)
                self._v[name] = np.zeros_like(grad, dtype=np.float32)
            v = self._v[name]
            m *= np.float32(self.beta1)
            m += np.float32(1 - self.beta1) * grad
            v *= np.float32(self.beta2)
            v += np.float32(1 - self.beta2) * grad * grad
            step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            params[name] -= step.astype(np.float32)


def clip_global_norm(grads: Dict[str, np.ndarray],
                     max_norm: float) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = float(
        np.sqrt(sum(float(np.sum(g.astype(np.float64)**2))
                    for g in grads.values())))
    if max_norm and norm > max_norm:
        factor = np.float32(max_norm / norm)
        for name in grads:
            grads[name] = grads[name] * factor
    return norm
