"""Layer-level reverse-mode differentiation on float64 numpy arrays.

A :class:`Tape` is a static, topologically ordered list of op records built by
a model. ``forward`` fills in every node value, ``backward`` sweeps the records
in reverse once and leaves a gradient for every node (input included) and for
every parameter the ops reference.

Two hooks exist for attribution work:

* the backward rule applied at ReLU records (:class:`BackpropMode`), which
  gives guided and rectified propagation, and
* a per-neuron activation mask multiplied into every ReLU output, which is
  how a network is pruned for one input.

Arrays always carry a leading batch axis. Node values are plain ndarrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class TapeStateError(RuntimeError):
    """Raised when a tape is queried in the wrong order (e.g. backward first)."""


class ShapeError(ValueError):
    pass


# --------------------------------------------------------------------------
# backprop modes and masks


@dataclass(frozen=True)
class BackpropMode:
    """Rule applied to gradients passing back through ReLU records.

    ``kind`` is one of ``"standard"``, ``"guided"`` or ``"rectified"``. ``q``
    is the per-layer percentile (0..100) for rectified propagation and must be
    ``None`` for the other kinds.
    """

    kind: str = "standard"
    q: float | None = None

    def __post_init__(self):
        if self.kind not in ("standard", "guided", "rectified"):
            raise ValueError(f"unknown backprop mode {self.kind!r}")
        if self.kind == "rectified":
            if self.q is None or not 0.0 <= self.q <= 100.0:
                raise ValueError(f"rectified mode needs q in [0, 100], got {self.q!r}")
        elif self.q is not None:
            raise ValueError(f"q is only meaningful for rectified mode, got kind={self.kind!r}")

    @classmethod
    def standard(cls) -> "BackpropMode":
        return cls("standard")

    @classmethod
    def guided(cls) -> "BackpropMode":
        return cls("guided")

    @classmethod
    def rectified(cls, q: float = 90.0) -> "BackpropMode":
        return cls("rectified", float(q))


STANDARD = BackpropMode.standard()
GUIDED = BackpropMode.guided()


@dataclass
class NeuronMask:
    """Keep/prune bits for every hidden post-ReLU activation.

    ``layers`` maps a ReLU node name to a boolean array of shape ``(size,)``
    (one mask shared by the whole batch) or ``(N, size)`` (one per sample),
    where ``size`` is the flattened per-sample activation size. ``True`` keeps
    the neuron.
    """

    layers: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def ones(cls, layout: Mapping[str, int], batch: int | None = None) -> "NeuronMask":
        shape = (lambda n: (n,)) if batch is None else (lambda n: (batch, n))
        return cls({k: np.ones(shape(n), dtype=bool) for k, n in layout.items()})

    @classmethod
    def zeros(cls, layout: Mapping[str, int], batch: int | None = None) -> "NeuronMask":
        m = cls.ones(layout, batch)
        for v in m.layers.values():
            v[...] = False
        return m

    @property
    def total(self) -> int:
        return sum(v.shape[-1] for v in self.layers.values())

    @property
    def pruned(self) -> int | np.ndarray:
        """Pruned count (an array of per-sample counts for batched masks)."""
        return sum((~v).sum(axis=-1) for v in self.layers.values())

    @property
    def sparsity(self):
        return self.pruned / self.total

    def flat(self) -> np.ndarray:
        return np.concatenate(list(self.layers.values()), axis=-1)

    def pruned_set(self) -> set[tuple[str, int]]:
        out = set()
        for name, bits in self.layers.items():
            if bits.ndim != 1:
                raise ValueError("pruned_set is defined for unbatched masks only")
            out.update((name, int(i)) for i in np.flatnonzero(~bits))
        return out


# --------------------------------------------------------------------------
# op kernels


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(x, k, stride, pad):
    xp = _pad(x, pad)
    n, c, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def conv2d_forward(x, w, b, stride, pad):
    n = x.shape[0]
    o, _, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, stride, pad)
    out = cols @ w.reshape(o, -1).T
    if b is not None:
        out += b
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), cols


def conv2d_backward(g, x_shape, w, cols, stride, pad):
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    _, _, ho, wo = g.shape
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (g2.T @ cols).reshape(w.shape)
    db = g2.sum(axis=0)
    dcols = (g2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
    # one relayout to (n, c, k, k, ho, wo) makes every scatter-add below contiguous
    dcols = dcols.transpose(0, 3, 4, 5, 1, 2).copy()
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp, dw, db


def _pool_view(x, k):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // k, k, w // k, k)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _rectify_gate(act, grad, q):
    """Boolean keep-array for rectified propagation.

    Per sample and per layer, the ``round(q% * n)`` units with the smallest
    ``activation * gradient`` are gated; ties go to the lower flat index.
    """
    n = act.shape[0]
    prod = (act * grad).reshape(n, -1)
    size = prod.shape[1]
    kgate = min(size, _round_half_up(q / 100.0 * size))
    keep = np.ones_like(prod, dtype=bool)
    if kgate:
        order = np.argsort(prod, axis=1, kind="stable")[:, :kgate]
        np.put_along_axis(keep, order, False, axis=1)
    return keep.reshape(act.shape)


# --------------------------------------------------------------------------
# tape


@dataclass
class OpRecord:
    kind: str
    inputs: tuple[int, ...]
    output: int
    params: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)


class Tape:
    """Static computation graph with per-node values and gradients.

    Parameters
    ----------
    input_shape : tuple of int
        Per-sample input shape (no batch axis).
    params : mapping of str to ndarray
        Parameter store the ops read from. The tape never writes to it.
    """

    ACTIVATION_KINDS = ("relu",)

    def __init__(self, input_shape, params: Mapping[str, np.ndarray] | None = None):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.params = params if params is not None else {}
        self.names: list[str] = ["input"]
        self.shapes: list[tuple[int, ...]] = [self.input_shape]
        self.ops: list[OpRecord] = []
        self.output: int | None = None
        self.mode = STANDARD
        self.mask: NeuronMask | None = None
        self.values: list[np.ndarray | None] = []
        self.grads: list[np.ndarray | None] = []
        self.param_grads: dict[str, np.ndarray] = {}
        self._saved: dict[int, object] = {}
        self.forward_count = 0
        self.backward_count = 0

    # -- graph construction ------------------------------------------------

    def add(self, kind, inputs, shape, params=(), name=None, **attrs) -> int:
        nid = len(self.names)
        for i in inputs:
            if not 0 <= i < nid:
                raise ValueError(f"op input {i} does not precede node {nid}")
        self.names.append(name or f"{kind}{nid}")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate node name {self.names[-1]!r}")
        self.shapes.append(tuple(int(d) for d in shape))
        self.ops.append(OpRecord(kind, tuple(inputs), nid, tuple(params), attrs))
        self.output = nid
        return nid

    def node(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no node named {name!r}; have {self.names}") from None

    @property
    def hidden_layout(self) -> dict[str, int]:
        """Name and flat per-sample size of every maskable activation."""
        return {self.names[op.output]: int(np.prod(self.shapes[op.output]))
                for op in self.ops if op.kind in self.ACTIVATION_KINDS}

    # -- hooks -------------------------------------------------------------

    def set_backprop_mode(self, mode: BackpropMode) -> None:
        if not isinstance(mode, BackpropMode):
            raise TypeError(f"expected BackpropMode, got {type(mode).__name__}")
        self.mode = mode

    def register_activation_mask(self, mask: NeuronMask | None) -> None:
        if mask is None:
            self.mask = None
            return
        layout = self.hidden_layout
        if list(mask.layers) != list(layout):
            raise ShapeError(f"mask layers {list(mask.layers)} do not match hidden "
                             f"layout {list(layout)}")
        for name, size in layout.items():
            bits = mask.layers[name]
            if bits.shape[-1] != size or bits.ndim not in (1, 2):
                raise ShapeError(f"mask for {name!r} has shape {bits.shape}, "
                                 f"expected ({size},) or (N, {size})")
        self.mask = mask

    def _mask_for(self, nid, n):
        if self.mask is None:
            return None
        bits = self.mask.layers[self.names[nid]]
        if bits.ndim == 2 and bits.shape[0] != n:
            raise ShapeError(f"batched mask has {bits.shape[0]} rows for a batch of {n}")
        shape = self.shapes[nid]
        return bits.reshape((-1,) + shape).astype(DTYPE)

    # -- evaluation --------------------------------------------------------

    def forward(self, x) -> np.ndarray:
        """Evaluate every node; returns the output node value.

        ``x`` has shape ``input_shape`` or ``(N,) + input_shape``.
        """
        x = np.asarray(x, dtype=DTYPE)
        if x.shape == self.input_shape:
            x = x[None]
        if x.ndim != len(self.input_shape) + 1 or x.shape[1:] != self.input_shape:
            got = x.shape[1:] if x.ndim == len(self.input_shape) + 1 else x.shape
            raise ShapeError(f"input shape {got} does not match tape input "
                             f"shape {self.input_shape}")
        if self.output is None:
            raise TapeStateError("tape has no ops")
        self.values = [None] * len(self.names)
        self.grads = []
        self._saved = {}
        self.values[0] = x
        for op in self.ops:
            self.values[op.output] = self._forward_op(op)
        self.forward_count += 1
        return self.values[self.output]

    def _forward_op(self, op: OpRecord):
        v = self.values
        p = self.params
        a = op.attrs
        x = v[op.inputs[0]]
        kind = op.kind
        if kind == "dense":
            w = p[op.params[0]]
            out = x @ w.T
            if len(op.params) > 1:
                out = out + p[op.params[1]]
            return out
        if kind == "conv":
            w = p[op.params[0]]
            b = p[op.params[1]] if len(op.params) > 1 else None
            out, cols = conv2d_forward(x, w, b, a["stride"], a["pad"])
            self._saved[op.output] = cols
            return out
        if kind == "relu":
            out = np.maximum(x, 0.0)
            m = self._mask_for(op.output, x.shape[0])
            if m is not None:
                out = out * m
            return out
        if kind == "add":
            return x + v[op.inputs[1]]
        if kind == "shortcut":
            s, extra = a["stride"], a["pad_channels"]
            y = x[:, :, ::s, ::s]
            if extra:
                y = np.pad(y, ((0, 0), (0, extra), (0, 0), (0, 0)))
            return y
        if kind == "avgpool":
            return _pool_view(x, a["k"]).mean(axis=(3, 5))
        if kind == "maxpool":
            return _pool_view(x, a["k"]).max(axis=(3, 5))
        if kind == "gap":
            return x.mean(axis=(2, 3))
        if kind == "flatten":
            return x.reshape(x.shape[0], -1)
        if kind == "square":
            return x * x
        if kind == "scale":
            return x * a["factor"]
        raise ValueError(f"unknown op kind {kind!r}")

    def backward(self, output_grad=None) -> np.ndarray:
        """One reverse sweep from the output node.

        ``output_grad`` is d(objective)/d(output). It may be omitted only when
        the output is a single scalar per sample, in which case it defaults to
        ones. Returns the input gradient; all node gradients are kept in
        ``self.grads`` and parameter gradients in ``self.param_grads``.
        """
        if not self.values or self.values[self.output] is None:
            raise TapeStateError("backward called before forward")
        out = self.values[self.output]
        if output_grad is None:
            if out.ndim != 2 or out.shape[1] != 1:
                raise TapeStateError(f"output has shape {out.shape}; pass output_grad "
                                     "or select a scalar target")
            output_grad = np.ones_like(out)
        output_grad = np.asarray(output_grad, dtype=DTYPE)
        if output_grad.shape != out.shape:
            output_grad = np.broadcast_to(output_grad, out.shape)
        grads: list[np.ndarray | None] = [None] * len(self.names)
        grads[self.output] = np.array(output_grad, dtype=DTYPE)
        self.param_grads = {}
        for op in reversed(self.ops):
            g = grads[op.output]
            if g is None:
                continue
            for nid, gin in self._backward_op(op, g):
                grads[nid] = gin if grads[nid] is None else grads[nid] + gin
        for i, g in enumerate(grads):
            if g is None:
                grads[i] = np.zeros_like(self.values[i])
        self.grads = grads
        self.backward_count += 1
        return grads[0]

    def backward_target(self, target) -> np.ndarray:
        """Input gradient of logit ``target`` (an int or one index per sample)."""
        out = self.values[self.output] if self.values else None
        if out is None:
            raise TapeStateError("backward called before forward")
        seed = np.zeros_like(out)
        t = np.broadcast_to(np.asarray(target), (out.shape[0],))
        if np.any(t < 0) or np.any(t >= out.shape[1]):
            raise IndexError(f"target {target} outside [0, {out.shape[1]})")
        seed[np.arange(out.shape[0]), t] = 1.0
        return self.backward(seed)

    def _add_param_grad(self, name, g):
        if name in self.param_grads:
            self.param_grads[name] = self.param_grads[name] + g
        else:
            self.param_grads[name] = g

    def _backward_op(self, op: OpRecord, g):
        v = self.values
        p = self.params
        a = op.attrs
        i0 = op.inputs[0]
        x = v[i0]
        kind = op.kind
        if kind == "dense":
            w = p[op.params[0]]
            self._add_param_grad(op.params[0], g.T @ x)
            if len(op.params) > 1:
                self._add_param_grad(op.params[1], g.sum(axis=0))
            return [(i0, g @ w)]
        if kind == "conv":
            w = p[op.params[0]]
            dx, dw, db = conv2d_backward(g, x.shape, w, self._saved[op.output],
                                         a["stride"], a["pad"])
            self._add_param_grad(op.params[0], dw)
            if len(op.params) > 1:
                self._add_param_grad(op.params[1], db)
            return [(i0, dx)]
        if kind == "relu":
            m = self._mask_for(op.output, x.shape[0])
            if m is not None:
                g = g * m
            mode = self.mode
            if mode.kind == "guided":
                g = np.maximum(g, 0.0)
            elif mode.kind == "rectified":
                g = g * _rectify_gate(v[op.output], g, mode.q)
            return [(i0, g * (x > 0.0))]
        if kind == "add":
            return [(i0, g), (op.inputs[1], g)]
        if kind == "shortcut":
            s, extra = a["stride"], a["pad_channels"]
            if extra:
                g = g[:, :g.shape[1] - extra]
            dx = np.zeros_like(x)
            dx[:, :, ::s, ::s] = g
            return [(i0, dx)]
        if kind == "avgpool":
            k = a["k"]
            n, c, h, w = g.shape
            dx = np.broadcast_to(g[:, :, :, None, :, None] / (k * k), (n, c, h, k, w, k))
            return [(i0, dx.reshape(x.shape).copy())]
        if kind == "maxpool":
            k = a["k"]
            xv = _pool_view(x, k)
            n, c, h, _, w, _ = xv.shape
            flat = xv.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w, k * k)
            # first maximum wins, so exactly one unit per window gets the gradient
            first = flat.argmax(axis=-1)
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, first[..., None], g[..., None], axis=-1)
            dx = dflat.reshape(n, c, h, w, k, k).transpose(0, 1, 2, 4, 3, 5)
            return [(i0, dx.reshape(x.shape))]
        if kind == "gap":
            n, c, h, w = x.shape
            dx = np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy()
            return [(i0, dx)]
        if kind == "flatten":
            return [(i0, g.reshape(x.shape))]
        if kind == "square":
            return [(i0, 2.0 * x * g)]
        if kind == "scale":
            return [(i0, g * a["factor"])]
        raise ValueError(f"unknown op kind {kind!r}")

    # -- accessors ---------------------------------------------------------

    def value(self, name: str) -> np.ndarray:
        return self.values[self.node(name)]

    def grad(self, name: str) -> np.ndarray:
        if not self.grads:
            raise TapeStateError("no backward pass recorded")
        return self.grads[self.node(name)]

    def relu_pattern(self) -> np.ndarray:
        """Concatenated per-sample signs of every ReLU pre-activation."""
        parts = [self.values[op.inputs[0]].reshape(self.values[0].shape[0], -1) > 0
                 for op in self.ops if op.kind in self.ACTIVATION_KINDS]
        if not parts:
            return np.zeros((self.values[0].shape[0], 0), dtype=bool)
        return np.concatenate(parts, axis=1)


# --------------------------------------------------------------------------
# gradient checking


def finite_difference_check(tape: Tape, x, eps: float = 1e-5, target: int = 0,
                            eps_floor: float = 1e-4, batch: int = 128,
                            indices: Iterable[int] | None = None,
                            skip_kinks: bool = True):
    """Compare the analytic input gradient with central differences.

    Returns ``(max_rel_err, n_checked)`` where the relative error of element
    ``i`` is ``|analytic_i - fd_i| / (|analytic_i| + eps_floor)``. When
    ``skip_kinks`` is set, coordinates whose +-eps probes change the sign
    pattern of any ReLU pre-activation are left out, since the function is not
    differentiable across a kink.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = np.asarray(x, dtype=DTYPE)
    if x.shape != tape.input_shape:
        raise ShapeError(f"expected one sample of shape {tape.input_shape}, got {x.shape}")
    tape.forward(x)
    base_pattern = tape.relu_pattern()[0]
    analytic = tape.backward_target(target)[0].ravel()
    idx = np.arange(x.size) if indices is None else np.asarray(list(indices))
    fd = np.empty(idx.size)
    ok = np.ones(idx.size, dtype=bool)
    flat = x.ravel()
    for start in range(0, idx.size, batch):
        chunk = idx[start:start + batch]
        probes = np.repeat(flat[None], 2 * chunk.size, axis=0)
        rows = np.arange(chunk.size)
        probes[2 * rows, chunk] += eps
        probes[2 * rows + 1, chunk] -= eps
        out = tape.forward(probes.reshape((-1,) + x.shape))[:, target]
        fd[start:start + chunk.size] = (out[0::2] - out[1::2]) / (2 * eps)
        if skip_kinks:
            pat = tape.relu_pattern()
            same = np.all(pat == base_pattern, axis=1)
            ok[start:start + chunk.size] = same[0::2] & same[1::2]
    err = np.abs(analytic[idx] - fd) / (np.abs(analytic[idx]) + eps_floor)
    err = err[ok]
    return (float(err.max()) if err.size else 0.0), int(ok.sum())


def numeric_grad(fn: Callable[[np.ndarray], float], x, eps=1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function; slow, for tests."""
    x = np.array(x, dtype=DTYPE)
    g = np.empty_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = fn(x)
        x[i] = old - eps
        lo = fn(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g
