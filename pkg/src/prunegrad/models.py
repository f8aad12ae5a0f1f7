"""Small architectures, weight initialisation, cascading randomisation and
the binary checkpoint format."""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import DTYPE, Tape

MAGIC = b"PGCK"
VERSION = 1


class SpecError(ValueError):
    """Architecture description is inconsistent."""


class CheckpointError(ValueError):
    """Checkpoint bytes could not be parsed."""


@dataclass
class ArchitectureSpec:
    """Ordered layer descriptors plus the per-sample input shape.

    Each layer is a dict with a ``type`` key:

    ``dense`` {in, out, bias}, ``conv`` {in_ch, out_ch, k, stride, pad, bias},
    ``relu``, ``avgpool`` {k}, ``maxpool`` {k},
    ``residual`` {in_ch, channels, stride}, ``gap``, ``flatten``,
    ``head`` {in, classes, bias}.
    """

    input_shape: tuple[int, ...]
    layers: list[dict]
    num_classes: int

    def to_text(self) -> str:
        return json.dumps({"input_shape": list(self.input_shape), "layers": self.layers,
                           "num_classes": self.num_classes}, sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "ArchitectureSpec":
        d = json.loads(text)
        return cls(tuple(d["input_shape"]), d["layers"], d["num_classes"])


def mlp_spec(sizes, bias=True, input_shape=None) -> ArchitectureSpec:
    """``sizes = [in, h1, ..., classes]``; ReLU after every hidden dense layer.

    With ``input_shape`` (e.g. C x H x W, product ``sizes[0]``) the input is
    flattened first so the MLP can take images.
    """
    layers = []
    if input_shape is not None:
        if int(np.prod(input_shape)) != sizes[0]:
            raise ValueError(f"input_shape {tuple(input_shape)} does not flatten to {sizes[0]}")
        layers.append({"type": "flatten"})
    for a, b in zip(sizes[:-2], sizes[1:-1]):
        layers += [{"type": "dense", "in": a, "out": b, "bias": bias}, {"type": "relu"}]
    layers.append({"type": "head", "in": sizes[-2], "classes": sizes[-1], "bias": bias})
    shape = (sizes[0],) if input_shape is None else tuple(int(d) for d in input_shape)
    return ArchitectureSpec(shape, layers, sizes[-1])


def resnet8_spec(input_shape=(3, 32, 32), num_classes=10, widths=(16, 32, 64),
                 bias=True) -> ArchitectureSpec:
    """3x3 stem, three plain residual blocks (stride 2 into blocks 2 and 3),
    global average pooling and a linear head."""
    c = input_shape[0]
    layers = [{"type": "conv", "in_ch": c, "out_ch": widths[0], "k": 3, "stride": 1,
               "pad": 1, "bias": bias},
              {"type": "relu"}]
    prev = widths[0]
    for i, w in enumerate(widths):
        layers.append({"type": "residual", "in_ch": prev, "channels": w,
                       "stride": 1 if i == 0 else 2, "bias": bias})
        prev = w
    layers += [{"type": "gap"},
               {"type": "head", "in": prev, "classes": num_classes, "bias": bias}]
    return ArchitectureSpec(tuple(input_shape), layers, num_classes)


def _conv_out(h, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1


def _plan(spec: ArchitectureSpec):
    """Validate ``spec``; return parameter shapes, param-layer groups and
    the tape recipe."""
    shape = tuple(spec.input_shape)
    params: dict[str, tuple[int, ...]] = {}
    groups: list[tuple[str, list[str]]] = []
    steps = []
    heads = [i for i, l in enumerate(spec.layers) if l.get("type") == "head"]
    if len(heads) != 1 or heads[0] != len(spec.layers) - 1:
        raise SpecError("exactly one head layer is required, and it must come last")
    counters: dict[str, int] = {}

    def fresh(prefix):
        counters[prefix] = counters.get(prefix, 0) + 1
        return f"{prefix}{counters[prefix] - 1}"

    def need(cond, i, msg):
        if not cond:
            raise SpecError(f"layer {i}: {msg} (incoming shape {shape})")

    for i, layer in enumerate(spec.layers):
        t = layer.get("type")
        bias = layer.get("bias", True)
        if t in ("dense", "head"):
            n_in = layer["in"]
            n_out = layer["out"] if t == "dense" else layer["classes"]
            need(len(shape) == 1, i, f"{t} needs a flat input")
            need(shape[0] == n_in, i, f"{t} expects {n_in} inputs")
            name = "head" if t == "head" else fresh("dense")
            pnames = [f"{name}.weight"] + ([f"{name}.bias"] if bias else [])
            params[f"{name}.weight"] = (n_out, n_in)
            if bias:
                params[f"{name}.bias"] = (n_out,)
            groups.append((name, pnames))
            shape = (n_out,)
            steps.append(("dense", name, pnames, {}, shape))
            if t == "head":
                need(n_out == spec.num_classes, i, "head width differs from num_classes")
        elif t == "conv":
            need(len(shape) == 3 and shape[0] == layer["in_ch"], i,
                 f"conv expects {layer['in_ch']} input channels")
            k, s, p = layer["k"], layer.get("stride", 1), layer.get("pad", 0)
            ho, wo = _conv_out(shape[1], k, s, p), _conv_out(shape[2], k, s, p)
            need(ho > 0 and wo > 0, i, "conv output would be empty")
            name = fresh("conv")
            pnames = [f"{name}.weight"] + ([f"{name}.bias"] if bias else [])
            params[f"{name}.weight"] = (layer["out_ch"], shape[0], k, k)
            if bias:
                params[f"{name}.bias"] = (layer["out_ch"],)
            groups.append((name, pnames))
            shape = (layer["out_ch"], ho, wo)
            steps.append(("conv", name, pnames, {"stride": s, "pad": p}, shape))
        elif t == "relu":
            steps.append(("relu", fresh("relu"), [], {}, shape))
        elif t in ("avgpool", "maxpool"):
            k = layer["k"]
            need(len(shape) == 3 and shape[1] % k == 0 and shape[2] % k == 0, i,
                 f"{t} size {k} must divide the spatial dims")
            shape = (shape[0], shape[1] // k, shape[2] // k)
            steps.append((t, fresh(t), [], {"k": k}, shape))
        elif t == "residual":
            c_in = layer.get("in_ch", shape[0] if len(shape) == 3 else -1)
            c, s = layer["channels"], layer.get("stride", 1)
            need(len(shape) == 3 and shape[0] == c_in, i,
                 f"residual block expects {c_in} input channels")
            need(c >= c_in, i, "residual blocks cannot shrink channels")
            need(shape[1] % s == 0 and shape[2] % s == 0, i, "stride must divide spatial dims")
            name = fresh("block")
            out_shape = (c, shape[1] // s, shape[2] // s)
            sub = []
            for j, (ci, st) in enumerate([(c_in, s), (c, 1)], start=1):
                cname = f"{name}.conv{j}"
                pn = [f"{cname}.weight"] + ([f"{cname}.bias"] if bias else [])
                params[f"{cname}.weight"] = (c, ci, 3, 3)
                if bias:
                    params[f"{cname}.bias"] = (c,)
                groups.append((cname, pn))
                sub.append(pn)
            steps.append(("residual", name, sub, {"stride": s, "pad_channels": c - c_in},
                          out_shape))
            shape = out_shape
        elif t == "gap":
            need(len(shape) == 3, i, "global average pooling needs a C x H x W input")
            shape = (shape[0],)
            steps.append(("gap", fresh("gap"), [], {}, shape))
        elif t == "flatten":
            shape = (int(np.prod(shape)),)
            steps.append(("flatten", fresh("flatten"), [], {}, shape))
        else:
            raise SpecError(f"layer {i}: unknown layer type {t!r}")
    return params, groups, steps


@dataclass
class Model:
    """Architecture plus a named float64 parameter store.

    Parameter arrays are treated as immutable by every function in this
    package; anything that changes weights returns a new ``Model``.
    """

    spec: ArchitectureSpec
    params: dict[str, np.ndarray]
    param_layers: list[tuple[str, list[str]]] = field(default_factory=list)
    _steps: list = field(default_factory=list, repr=False)

    @property
    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def tape(self) -> Tape:
        tape = Tape(self.spec.input_shape, self.params)
        cur = 0
        for kind, name, pnames, attrs, shape in self._steps:
            if kind == "residual":
                c, h, w = shape
                s = attrs["stride"]
                (p1, p2) = pnames
                a = tape.add("conv", [cur], shape, p1, f"{name}.conv1", stride=s, pad=1)
                a = tape.add("relu", [a], shape, (), f"{name}.relu1")
                a = tape.add("conv", [a], shape, p2, f"{name}.conv2", stride=1, pad=1)
                sc = tape.add("shortcut", [cur], shape, (), f"{name}.shortcut", **attrs)
                a = tape.add("add", [a, sc], shape, (), f"{name}.add")
                cur = tape.add("relu", [a], shape, (), f"{name}.out")
            else:
                cur = tape.add(kind, [cur], shape, pnames, name, **attrs)
        return tape

    def forward(self, x, batch: int = 256) -> np.ndarray:
        """Logits for a batch of inputs, evaluated in chunks."""
        x = np.asarray(x, dtype=DTYPE)
        if x.shape == tuple(self.spec.input_shape):
            x = x[None]
        tape = self.tape()
        return np.concatenate([tape.forward(x[i:i + batch])
                               for i in range(0, len(x), batch)], axis=0)

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()},
                     copy.deepcopy(self.param_layers), self._steps)

    def with_params(self, params: dict[str, np.ndarray]) -> "Model":
        return Model(self.spec, params, self.param_layers, self._steps)


def build_model(spec: ArchitectureSpec) -> Model:
    """Validate ``spec`` and return a zero-initialised model."""
    shapes, groups, steps = _plan(spec)
    params = {k: np.zeros(s, dtype=DTYPE) for k, s in shapes.items()}
    return Model(spec, params, groups, steps)


def _fan_in(shape):
    return int(np.prod(shape[1:]))


def init_weights(model: Model, seed: int, scheme: str = "uniform-fan-in",
                 mean: float = 0.0, std: float = 0.01) -> Model:
    """Return ``model`` with freshly drawn parameters.

    ``uniform-fan-in`` draws weights from U(-sqrt(6/fan_in), +sqrt(6/fan_in))
    and zero biases; ``normal`` draws every tensor from N(mean, std).
    Parameters are drawn in declaration order from one generator.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, old in model.params.items():
        params[name] = _draw(rng, name, old.shape, scheme, mean, std)
    return model.with_params(params)


def _draw(rng, name, shape, scheme, mean, std):
    if scheme == "normal":
        return rng.normal(mean, std, size=shape).astype(DTYPE)
    if scheme == "uniform-fan-in":
        if name.endswith(".bias"):
            return np.zeros(shape, dtype=DTYPE)
        bound = np.sqrt(6.0 / _fan_in(shape))
        return rng.uniform(-bound, bound, size=shape).astype(DTYPE)
    raise ValueError(f"unknown init scheme {scheme!r}")


def randomize_layers_from(model: Model, depth_k: int, seed: int = 0,
                          std: float = 0.01) -> Model:
    """Copy of ``model`` whose last ``depth_k`` parameterised layers are redrawn
    from N(0, std). The original is left untouched."""
    n = len(model.param_layers)
    if not 0 <= depth_k <= n:
        raise ValueError(f"depth_k={depth_k} outside [0, {n}]")
    out = model.copy()
    rng = np.random.default_rng(seed)
    for _, pnames in model.param_layers[n - depth_k:][::-1]:
        for p in pnames:
            out.params[p] = rng.normal(0.0, std, size=out.params[p].shape).astype(DTYPE)
    return out


# --------------------------------------------------------------------------
# checkpoint format: little endian
#   "PGCK" | u32 version | u32 len | spec utf-8 |
#   repeated: u16 len | name | u8 rank | u32 dims... | f64 payload


def checkpoint_bytes(model: Model) -> bytes:
    text = model.spec.to_text().encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text]
    for name, arr in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def parse_checkpoint(buf: bytes) -> Model:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated while reading {what}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, tlen = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    spec = ArchitectureSpec.from_text(take(tlen, "architecture").decode("utf-8"))
    model = build_model(spec)
    params = {}
    expected = list(model.params)
    for name in expected:
        if pos == len(buf):
            raise CheckpointError(f"truncated: missing tensor {name!r}")
        (nlen,) = struct.unpack("<H", take(2, f"name of tensor {name!r}"))
        got = take(nlen, f"name of tensor {name!r}").decode("utf-8")
        if got != name:
            raise CheckpointError(f"expected tensor {name!r}, found {got!r}")
        (rank,) = struct.unpack("<B", take(1, f"rank of tensor {name!r}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of tensor {name!r}"))
        if tuple(dims) != model.params[name].shape:
            raise CheckpointError(f"tensor {name!r} has dims {dims}, "
                                  f"architecture needs {model.params[name].shape}")
        count = int(np.prod(dims)) if rank else 1
        payload = take(8 * count, f"payload of tensor {name!r}")
        params[name] = np.frombuffer(payload, dtype="<f8").astype(DTYPE).reshape(dims)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last tensor")
    return model.with_params(params)


def load_checkpoint(path) -> Model:
    return parse_checkpoint(Path(path).read_bytes())
