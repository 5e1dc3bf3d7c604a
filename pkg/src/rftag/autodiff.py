"""Dense-tensor engine with reverse-mode differentiation.

Every model in this package is built from the small op set below: conv2d,
batchnorm2d, relu/sigmoid, pooling, linear, and a numerically stable
binary-cross-entropy-with-logits loss.  Ops execute eagerly on numpy arrays;
when a ``Tape`` is active on the current thread, each op appends a record
(inputs, output, backward rule) in execution order, which is a topological
order by construction.  ``backward`` replays the tape in reverse and
accumulates gradients into leaf tensors.

Precision is parametric: arrays keep whatever float dtype they were created
with.  Training uses float32 by default; gradient-check tests run the same
ops in float64.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_FLOAT_TYPES = (np.float32, np.float64)


class Tensor:
    """A dense n-dimensional array with an optional gradient.

    ``grad`` is lazily allocated by ``backward`` and accumulates across calls;
    callers zero it explicitly (``zero_grad``) between optimization steps.
    Gradients are only retained on leaf tensors (parameters and inputs created
    with ``requires_grad=True``); intermediate op outputs stream their
    gradients through the tape without storing them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_record")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._record: Optional["OpRecord"] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


@dataclass
class OpRecord:
    """One recorded operation: output, inputs and its backward rule."""

    name: str
    output: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    index: int
    tape: "Tape" = None


class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager around the forward computation::

        with Tape() as tape:
            loss = bce_with_logits(model_forward(x), y)
        backward(loss)

    Records are appended in execution order, so every op's inputs precede it
    (topological order).  A tape belongs to the thread that records on it.
    """

    def __init__(self):
        self.records: list[OpRecord] = []

    def append(self, name, output, inputs, vjp) -> None:
        rec = OpRecord(name, output, tuple(inputs), vjp, len(self.records), self)
        output._record = rec
        self.records.append(rec)

    def clear(self) -> None:
        for rec in self.records:
            rec.output._record = None
        self.records.clear()

    def __enter__(self) -> "Tape":
        _push_tape(self)
        return self

    def __exit__(self, *exc) -> None:
        _pop_tape(self)

    def __len__(self) -> int:
        return len(self.records)


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def _push_tape(tape: Tape) -> None:
    _tape_stack().append(tape)


def _pop_tape(tape: Tape) -> None:
    stack = _tape_stack()
    if not stack or stack[-1] is not tape:
        raise RuntimeError("tape exited out of order")
    stack.pop()


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record(name: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap op output in a Tensor, recording on the active tape if needed.

    ``vjp`` maps the output gradient to one gradient per input (None for
    inputs that do not require grad).  Recording happens only when a tape is
    active and at least one input requires grad, so eval-mode forwards build
    no graph.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.append(name, out, inputs, vjp)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    ``loss`` must be scalar (size 1).  Repeated calls accumulate into leaf
    gradients; callers zero them explicitly.  Each tape record is visited at
    most once per call.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._record is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
            return
        raise ValueError("loss is not connected to a tape (no recorded operations)")
    tape = loss._record.tape
    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records[: loss._record.index + 1]):
        gout = flows.pop(id(rec.output), None)
        if gout is None:
            continue
        grads = rec.vjp(gout)
        for tin, g in zip(rec.inputs, grads):
            if g is None:
                continue
            if tin._record is not None and tin._record.tape is tape:
                key = id(tin)
                if key in flows:
                    flows[key] = flows[key] + g
                else:
                    flows[key] = g
            elif tin.requires_grad:
                _accumulate(tin, g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def _as_pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation of x[N,C,H,W] with weight[O,C,kh,kw].

    Output extents follow floor((H + 2p - k)/s) + 1.  No kernel flip.
    """
    sh, sw = _as_pair(stride)
    ph, pw = _as_pair(padding)
    if sh < 1 or sw < 1:
        raise ValueError(f"strides must be >= 1, got {(sh, sw)}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(
            f"conv2d channel mismatch: input shape {x.shape} has {c} channels, "
            f"weight shape {weight.shape} expects {ci}")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ValueError(
            f"kernel {(kh, kw)} exceeds padded input extents {(h + 2 * ph, w + 2 * pw)}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"bias shape {bias.shape} does not match {co} output channels")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    ho, wo = win.shape[2], win.shape[3]
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(co, c * kh * kw)
    out = col @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)

    inputs = [x, weight] if bias is None else [x, weight, bias]

    def vjp(gout: np.ndarray):
        gflat = np.ascontiguousarray(gout.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gflat.T @ col).reshape(co, c, kh, kw)
        if x.requires_grad:
            gcol = gflat @ wmat
            gcol = gcol.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += gcol[:, :, i, j]
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        if bias is not None and bias.requires_grad:
            gb = gflat.sum(axis=0)
        if bias is None:
            return gx, gw
        return gx, gw, gb

    return record("conv2d", out, inputs, vjp)


@dataclass
class BatchNormState:
    """Per-channel running statistics for batchnorm2d.

    ``update_mode`` "ema" tracks an exponential moving average with
    ``momentum``; "cumulative" tracks the plain mean over all batches seen
    since the last reset (used when refreshing statistics for an averaged
    model).
    """

    mean: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None
    momentum: float = 0.1
    initialized: bool = False
    update_mode: str = "ema"
    count: int = 0

    @classmethod
    def identity(cls, channels: int, dtype=DEFAULT_DTYPE, momentum: float = 0.1) -> "BatchNormState":
        return cls(mean=np.zeros(channels, dtype=dtype),
                   var=np.ones(channels, dtype=dtype),
                   momentum=momentum, initialized=True)

    def reset(self) -> None:
        self.mean = None
        self.var = None
        self.initialized = False
        self.count = 0

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        if not self.initialized:
            self.mean = batch_mean.copy()
            self.var = batch_var.copy()
            self.initialized = True
            self.count = 1
            return
        if self.update_mode == "cumulative":
            n = self.count
            self.mean = (self.mean * n + batch_mean) / (n + 1)
            self.var = (self.var * n + batch_var) / (n + 1)
            self.count = n + 1
        else:
            m = self.momentum
            self.mean = (1.0 - m) * self.mean + m * batch_mean
            self.var = (1.0 - m) * self.var + m * batch_var
            self.count += 1


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                eps: float = 1e-5, mode: str = "train",
                update_running: bool = True) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes by biased batch statistics and updates the running
    moments by exponential moving average; eval mode uses running statistics
    and fails loudly when they were never populated.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d expects a 4-D input, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    if mode == "eval":
        if not state.initialized:
            raise ValueError("batchnorm eval requested but running statistics were never populated")
        mean = state.mean
        var = state.var
    else:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_running:
            state.update(mean, var)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def vjp(gout: np.ndarray):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (gout * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = gout.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gscaled = gout * gamma.data[None, :, None, None]
            if mode == "eval":
                gx = gscaled * inv_std[None, :, None, None]
            else:
                gmean = gscaled.mean(axis=(0, 2, 3))
                gdot = (gscaled * xhat).mean(axis=(0, 2, 3))
                gx = (gscaled - gmean[None, :, None, None]
                      - xhat * gdot[None, :, None, None]) * inv_std[None, :, None, None]
        return gx, gg, gb

    return record("batchnorm2d", out, [x, gamma, beta], vjp)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0

    def vjp(gout):
        return (gout * mask,) if x.requires_grad else (None,)

    return record("relu", out, [x], vjp)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow of exp for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)

    def vjp(gout):
        return (gout * out * (1.0 - out),) if x.requires_grad else (None,)

    return record("sigmoid", out, [x], vjp)


def elementwise(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def pool2d(x: Tensor, kind: str, kernel=None, stride=None) -> Tensor:
    """Window pooling: max / avg over (kh, kw) windows, or global average.

    ``global_avg`` reduces H, W to 1, 1 and ignores kernel/stride.
    """
    if x.ndim != 4:
        raise ValueError(f"pool2d expects a 4-D input, got shape {x.shape}")
    n, c, h, w = x.shape
    if kind == "global_avg":
        out = x.data.mean(axis=(2, 3), keepdims=True)

        def vjp_g(gout):
            if not x.requires_grad:
                return (None,)
            return (np.broadcast_to(gout / (h * w), x.shape).astype(x.dtype, copy=True),)

        return record("global_avg_pool", out, [x], vjp_g)

    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pool kind {kind!r}")
    if kernel is None:
        raise ValueError("max/avg pooling requires a kernel")
    kh, kw = _as_pair(kernel)
    sh, sw = _as_pair(stride if stride is not None else kernel)
    if kh > h or kw > w:
        raise ValueError(f"pool kernel {(kh, kw)} exceeds input extents {(h, w)}")

    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, kh * kw)

    if kind == "avg":
        out = flat.mean(axis=4)

        def vjp_a(gout):
            if not x.requires_grad:
                return (None,)
            gx = np.zeros_like(x.data)
            gshare = gout / (kh * kw)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += gshare
            return (gx,)

        return record("avg_pool", out, [x], vjp_a)

    amax = flat.argmax(axis=4)
    out = np.take_along_axis(flat, amax[..., None], axis=4)[..., 0]

    def vjp_m(gout):
        if not x.requires_grad:
            return (None,)
        gx = np.zeros_like(x.data)
        ki, kj = np.unravel_index(amax, (kh, kw))
        hi = (np.arange(ho) * sh)[None, None, :, None] + ki
        wj = (np.arange(wo) * sw)[None, None, None, :] + kj
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gx, (ni, ci, hi, wj), gout)
        return (gx,)

    return record("max_pool", out, [x], vjp_m)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x[N,F] @ weight[F,O] + bias[O]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"linear expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(
            f"linear extent mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    inputs = [x, weight] if bias is None else [x, weight, bias]

    def vjp(gout):
        gx = gout @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ gout if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = gout.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return record("linear", out, inputs, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def vjp(gout):
        return (gout if a.requires_grad else None,
                gout if b.requires_grad else None)

    return record("add", out, [a, b], vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def vjp(gout):
        return (gout * b.data if a.requires_grad else None,
                gout * a.data if b.requires_grad else None)

    return record("mul", out, [a, b], vjp)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def vjp(gout):
        if not x.requires_grad:
            return (None,)
        return (np.broadcast_to(gout, x.shape).astype(x.dtype, copy=True),)

    return record("sum_all", out, [x], vjp)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def vjp(gout):
        return (gout.reshape(x.shape),) if x.requires_grad else (None,)

    return record("reshape", out, [x], vjp)


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross entropy over all cells, stable log-sum-exp form.

    Targets may be soft (mixup mixes label vectors) but must lie in [0, 1].
    """
    if logits.shape != targets.shape:
        raise ValueError(f"bce shape mismatch: logits {logits.shape} vs targets {targets.shape}")
    y = targets.data
    if np.any(y < 0) or np.any(y > 1):
        bad = y[(y < 0) | (y > 1)].reshape(-1)[0]
        raise ValueError(f"targets must lie in [0, 1], found {bad}")
    z = logits.data
    # max(z,0) - z*y + log(1 + exp(-|z|))
    losses = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(losses.mean(), dtype=z.dtype)

    def vjp(gout):
        if not logits.requires_grad:
            return None, None
        g = (_sigmoid(z) - y) / z.size
        return g * gout, None

    return record("bce_with_logits", out, [logits, targets], vjp)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates per named parameter plus step count."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> AdamState:
    """One Adam update with bias correction, applied in place to params.

    ``params`` maps names to Tensors, ``grads`` maps the same names to
    gradient arrays.  Parameters without a gradient entry are skipped.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype, copy=False)
    return state
