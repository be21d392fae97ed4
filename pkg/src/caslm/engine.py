"""Float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
are recorded in execution order; ``tape.backward(loss)`` sweeps them in reverse
and writes gradients into every leaf tensor that requires them. Outside a tape
nothing is recorded, which is how evaluation runs.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its preconditions."""


class NonFiniteError(FloatingPointError):
    """A forward value became NaN or infinite."""


_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "caslm_active_tape", default=None
)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = (
            np.zeros_like(self.data) if self.requires_grad else None
        )
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations run, so the list is already in
    topological order.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` of every leaf on this tape with d(loss)/d(leaf).

        Leaves recorded on the tape but unreachable from ``loss`` receive zeros.
        """
        if loss.data.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(node.output) for node in self.nodes}
        if loss.requires_grad and id(loss) not in produced:
            raise ContractError("loss was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        for key, t in leaves.items():
            g = grads.get(key)
            t.grad = np.zeros_like(t.data) if g is None else np.array(g, dtype=np.float64)


def _record(out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _active_tape.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.requires_grad = needs
    result.grad = None
    result.name = None
    if needs:
        tape.nodes.append(_Node(tuple(inputs), result, backward))
    return result


def is_recording() -> bool:
    return _active_tape.get() is not None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return out


# ---------------------------------------------------------------------------
# element-wise arithmetic
# ---------------------------------------------------------------------------


def _broadcast_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes(a, b, "add")

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _record(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes(a, b, "sub")

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _record(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes(a, b, "mul")

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _record(a.data * b.data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(x.data * c, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    out = _check_finite(np.exp(x.data), "exp")
    return _record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so neither branch overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU, as used by GPT and BERT."""
    z = x.data
    inner = _GELU_C * (z + 0.044715 * z**3)
    t = np.tanh(inner)
    out = 0.5 * z * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * z * z)
        return (g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dinner),)

    return _record(out, (x,), backward)


def dropout(x: Tensor, mask: np.ndarray | None) -> Tensor:
    """Multiply by a pre-scaled keep mask (entries 0 or 1/(1-rate)).

    ``mask=None`` is the identity and records nothing.
    """
    if mask is None:
        return x
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape:
        raise DimensionError(f"dropout: mask {mask.shape} does not match input {x.shape}")
    return _record(x.data * mask, (x,), lambda g: (g * mask,))


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray | None:
    if rate <= 0.0:
        return None
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules on leading dimensions."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # fold the batch into rows: one GEMM instead of a batched sum
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _record(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] += g
        return (full,)

    return _record(np.array(out, dtype=np.float64), (x,), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return getitem(x, tuple(index))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}"
        ) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _record(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("stack of an empty sequence")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(
            np.take(g, i, axis=axis) if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return _record(out, tensors, backward)


# ---------------------------------------------------------------------------
# reductions and normalisation
# ---------------------------------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(out, dtype=np.float64), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _record(out, (x,), backward)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    s = np.log(np.sum(np.exp(x.data - m), axis=axis, keepdims=True)) + m
    out = np.squeeze(s, axis=axis)

    def backward(g):
        return (np.expand_dims(g, axis) * np.exp(x.data - s),)

    return _record(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply gain and bias."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, gg, gb

    return _record(out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# indexing ops used by language models
# ---------------------------------------------------------------------------


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter back onto looked-up rows."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding: id out of range [0, {table.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _record(out, (table,), backward)


def causal_mask(scores: Tensor) -> Tensor:
    """Set entries above the last-two-axes diagonal to -inf."""
    t_q, t_k = scores.shape[-2:]
    future = np.triu(np.ones((t_q, t_k), dtype=bool), k=1)
    out = np.where(future, -np.inf, scores.data)
    return _record(out, (scores,), lambda g: (np.where(future, 0.0, g),))


def nll_loss(log_probs: Tensor, targets) -> Tensor:
    """Mean negative log-probability of ``targets`` under ``log_probs`` (..., V)."""
    targets = np.asarray(targets)
    vocab = log_probs.shape[-1]
    if log_probs.shape[:-1] != targets.shape:
        raise DimensionError(
            f"nll_loss: log_probs {log_probs.shape} vs targets {targets.shape}"
        )
    if targets.size == 0:
        raise ContractError("nll_loss over zero targets")
    if targets.min() < 0 or targets.max() >= vocab:
        raise IndexError(f"nll_loss: target id out of range [0, {vocab})")
    flat = log_probs.data.reshape(-1, vocab)
    rows = np.arange(flat.shape[0])
    cols = targets.reshape(-1)
    n = flat.shape[0]
    out = np.asarray(-flat[rows, cols].sum() / n)

    def backward(g):
        full = np.zeros_like(flat)
        full[rows, cols] = -float(g) / n
        return (full.reshape(log_probs.shape),)

    return _record(out, (log_probs,), backward)


cross_entropy = nll_loss


def token_nll(log_probs: np.ndarray, targets) -> np.ndarray:
    """Per-token negative log-likelihood (no graph), shaped like ``targets``."""
    targets = np.asarray(targets)
    vocab = log_probs.shape[-1]
    flat = log_probs.reshape(-1, vocab)
    picked = flat[np.arange(flat.shape[0]), targets.reshape(-1)]
    return -picked.reshape(targets.shape)


def lstm_sequence(
    x: Tensor,
    w_ih: Tensor,
    w_hh: Tensor,
    bias: Tensor,
    h0: Tensor,
    c0: Tensor,
) -> tuple[Tensor, tuple[np.ndarray, np.ndarray]]:
    """Run an LSTM over ``x`` (B, T, D); gate order is input, forget, cell, output.

    ``w_ih`` is (4H, D), ``w_hh`` is (4H, H), ``bias`` is (4H,), states are (B, H).
    Returns the hidden sequence (B, T, H) and the final ``(h, c)`` as plain
    arrays: the carried state is cut from the graph, as truncated BPTT requires.
    """
    if x.ndim != 3:
        raise DimensionError(f"lstm_sequence: expected (B, T, D) input, got {x.shape}")
    batch, steps, width = x.shape
    hidden = w_hh.shape[1]
    if w_ih.shape != (4 * hidden, width) or w_hh.shape != (4 * hidden, hidden):
        raise DimensionError(
            f"lstm_sequence: weights {w_ih.shape}, {w_hh.shape} vs input width {width}"
        )
    if bias.shape != (4 * hidden,):
        raise DimensionError(f"lstm_sequence: bias {bias.shape}, expected ({4 * hidden},)")
    if h0.shape != (batch, hidden) or c0.shape != (batch, hidden):
        raise DimensionError(
            f"lstm_sequence: state shapes {h0.shape}, {c0.shape}, expected ({batch}, {hidden})"
        )

    def sig(z):
        e = np.exp(-np.abs(z))
        return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    xw = np.matmul(x.data, w_ih.data.T) + bias.data
    H = hidden
    gates = np.empty((steps, batch, 4 * H))
    cells = np.empty((steps + 1, batch, H))
    hiddens = np.empty((steps + 1, batch, H))
    tanh_c = np.empty((steps, batch, H))
    hiddens[0] = h0.data
    cells[0] = c0.data
    w_hh_t = w_hh.data.T
    for t in range(steps):
        z = xw[:, t, :] + hiddens[t] @ w_hh_t
        act = gates[t]
        act[:, : 2 * H] = sig(z[:, : 2 * H])
        act[:, 2 * H : 3 * H] = np.tanh(z[:, 2 * H : 3 * H])
        act[:, 3 * H :] = sig(z[:, 3 * H :])
        i, f, g, o = act[:, :H], act[:, H : 2 * H], act[:, 2 * H : 3 * H], act[:, 3 * H :]
        cells[t + 1] = f * cells[t] + i * g
        tanh_c[t] = np.tanh(cells[t + 1])
        hiddens[t + 1] = o * tanh_c[t]
    out = np.ascontiguousarray(np.transpose(hiddens[1:], (1, 0, 2)))
    final = (hiddens[steps].copy(), cells[steps].copy())

    def backward(g_out):
        dz_all = np.empty((steps, batch, 4 * H))
        dh_next = np.zeros((batch, H))
        dc_next = np.zeros((batch, H))
        w = w_hh.data
        for t in reversed(range(steps)):
            act = gates[t]
            i, f, gg, o = act[:, :H], act[:, H : 2 * H], act[:, 2 * H : 3 * H], act[:, 3 * H :]
            dh = g_out[:, t, :] + dh_next
            do = dh * tanh_c[t]
            dc = dh * o * (1.0 - tanh_c[t] ** 2) + dc_next
            dz = dz_all[t]
            dz[:, :H] = dc * gg * i * (1.0 - i)
            dz[:, H : 2 * H] = dc * cells[t] * f * (1.0 - f)
            dz[:, 2 * H : 3 * H] = dc * i * (1.0 - gg * gg)
            dz[:, 3 * H :] = do * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ w
        flat_dz = dz_all.reshape(-1, 4 * H)
        gx = gw_ih = gw_hh = gb = None
        if x.requires_grad:
            gx = np.transpose(dz_all @ w_ih.data, (1, 0, 2))
        if w_ih.requires_grad:
            gw_ih = flat_dz.T @ np.transpose(x.data, (1, 0, 2)).reshape(-1, width)
        if w_hh.requires_grad:
            gw_hh = flat_dz.T @ hiddens[:-1].reshape(-1, H)
        if bias.requires_grad:
            gb = flat_dz.sum(axis=0)
        return gx, gw_ih, gw_hh, gb, dh_next, dc_next

    return _record(out, (x, w_ih, w_hh, bias, h0, c0), backward), final
