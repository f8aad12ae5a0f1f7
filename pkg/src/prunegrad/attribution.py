"""Gradient-based attribution methods, including the pruned-network ones.

Every method takes one image (C x H x W) or a batch and returns an
:class:`AttributionMap`. ``raw`` holds signed per-input scores; ``aggregated``
is the per-pixel sum of absolute values over channels, which is what ranking,
perturbation and visualisation use. Layer methods (GradCAM, PruneGrad-Mid)
produce their aggregated map directly and store it spread evenly over the
channels in ``raw``.

``target`` defaults to the argmax logit of the unmodified network.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .models import Model
from .pruning import build_mask, neuron_importance, resolve_target
from .tensor import GUIDED, STANDARD, BackpropMode, Tape


@dataclass
class AttributionMap:
    raw: np.ndarray
    aggregated: np.ndarray
    method: str
    target: np.ndarray
    extra: dict = field(default_factory=dict)

    def __getitem__(self, i) -> "AttributionMap":
        """The ``i``-th map of a batched result."""
        return AttributionMap(self.raw[i], self.aggregated[i], self.method,
                              self.target[i], {k: v[i] for k, v in self.extra.items()})


def aggregate_map(raw) -> np.ndarray:
    """Sum of absolute values over the channel axis (C x H x W -> H x W)."""
    raw = np.asarray(raw, dtype=np.float64)
    return np.abs(raw).sum(axis=-3)


def _prep(model: Model, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == tuple(model.spec.input_shape)
    xb = x[None] if single else x
    if xb.shape[1:] != tuple(model.spec.input_shape):
        raise ValueError(f"input {x.shape} does not match model input {model.spec.input_shape}")
    return xb, single


def _finish(raw, method, target, single, aggregated=None, **extra):
    agg = aggregate_map(raw) if aggregated is None else aggregated
    m = AttributionMap(raw, agg, method, np.asarray(target), extra)
    return m[0] if single else m


def _targets(tape: Tape, xb, target):
    tape.register_activation_mask(None)
    return resolve_target(tape.forward(xb), target)


def _input_grad(model, xb, target, mode: BackpropMode = STANDARD, tape=None):
    tape = tape or model.tape()
    t = _targets(tape, xb, target)
    tape.set_backprop_mode(mode)
    g = tape.backward_target(t)
    tape.set_backprop_mode(STANDARD)
    return g, t


def vanilla_gradient(model: Model, x, target=None) -> AttributionMap:
    xb, single = _prep(model, x)
    g, t = _input_grad(model, xb, target)
    return _finish(g, "vanilla", t, single)


def input_x_gradient(model: Model, x, target=None) -> AttributionMap:
    xb, single = _prep(model, x)
    g, t = _input_grad(model, xb, target)
    return _finish(xb * g, "input_x_gradient", t, single)


def integrated_gradients(model: Model, x, target=None, steps: int = 50,
                         baseline=None) -> AttributionMap:
    """Right-endpoint Riemann sum of the gradient along the straight path
    from ``baseline`` (default: zeros) to ``x``."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    xb, single = _prep(model, x)
    b = np.zeros_like(xb) if baseline is None else np.broadcast_to(
        np.asarray(baseline, dtype=np.float64), xb.shape)
    tape = model.tape()
    t = _targets(tape, xb, target)
    total = np.zeros_like(xb)
    for k in range(1, steps + 1):
        tape.forward(b + (k / steps) * (xb - b))
        total += tape.backward_target(t)
    return _finish((xb - b) * total / steps, "integrated_gradients", t, single)


def guided_backprop(model: Model, x, target=None) -> AttributionMap:
    xb, single = _prep(model, x)
    g, t = _input_grad(model, xb, target, GUIDED)
    return _finish(g, "guided_backprop", t, single)


def rectgrad(model: Model, x, target=None, q: float = 90.0) -> AttributionMap:
    if not 0.0 <= q <= 100.0:
        raise ValueError(f"q must be in [0, 100], got {q}")
    xb, single = _prep(model, x)
    g, t = _input_grad(model, xb, target, BackpropMode.rectified(q))
    return _finish(g, "rectgrad", t, single)


# --------------------------------------------------------------------------
# layer maps


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Linear interpolation weights, half-pixel centres (align_corners=False)."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - w1)
    np.add.at(m, (np.arange(n_out), i1), w1)
    return m


def upsample_bilinear(maps, size) -> np.ndarray:
    """Resize the trailing two axes of ``maps`` to ``size`` = (H, W).

    Source coordinate of output pixel ``y`` is ``(y + 0.5) * h / H - 0.5``,
    clamped to the valid range. Same-size resizing is the identity.
    """
    maps = np.asarray(maps, dtype=np.float64)
    h, w = maps.shape[-2:]
    H, W = size
    if (h, w) == (H, W):
        return maps.copy()
    return _interp_matrix(H, h) @ maps @ _interp_matrix(W, w).T


def _spatial_nodes(tape: Tape):
    return [n for n in tape.hidden_layout if len(tape.shapes[tape.node(n)]) == 3]


def default_gradcam_layer(tape: Tape) -> str:
    nodes = _spatial_nodes(tape)
    if not nodes:
        raise ValueError("model has no spatial activation layer")
    return nodes[-1]


def default_mid_layer(tape: Tape) -> str:
    """Output of the second to last residual block (falls back to the second
    to last spatial activation)."""
    blocks = [n for n in _spatial_nodes(tape) if n.endswith(".out")]
    if len(blocks) >= 2:
        return blocks[-2]
    nodes = _spatial_nodes(tape)
    if len(nodes) < 2:
        raise ValueError("model has too few spatial layers for a default mid layer")
    return nodes[-2]


def _check_spatial(tape, layer):
    nid = tape.node(layer)
    if len(tape.shapes[nid]) != 3:
        raise ValueError(f"layer {layer!r} has shape {tape.shapes[nid]}, need C x H x W")
    return nid


def _spread(agg, channels):
    return np.repeat((agg / channels)[:, None], channels, axis=1)


def gradcam(model: Model, x, target=None, layer: str | None = None) -> AttributionMap:
    xb, single = _prep(model, x)
    tape = model.tape()
    layer = layer or default_gradcam_layer(tape)
    _check_spatial(tape, layer)
    t = _targets(tape, xb, target)
    tape.backward_target(t)
    act, grad = tape.value(layer), tape.grad(layer)
    alpha = grad.mean(axis=(2, 3))
    cam = np.maximum(np.einsum("nk,nkhw->nhw", alpha, act), 0.0)
    agg = upsample_bilinear(cam, xb.shape[2:])
    return _finish(_spread(agg, xb.shape[1]), "gradcam", t, single, agg, layer_map=cam)


# --------------------------------------------------------------------------
# pruned-network methods


def _pruned_tape(model, xb, target, sparsity, tape=None):
    """Score neurons, prune, and leave the mask registered on the tape."""
    tape = tape or model.tape()
    scores = neuron_importance(model, xb, target, tape)
    mask = build_mask(scores, sparsity)
    tape.register_activation_mask(mask)
    return tape, scores.target, mask


def prunegrad(model: Model, x, target=None, *, sparsity: float,
              tape: Tape | None = None) -> AttributionMap:
    """Input gradient of the input-specifically pruned network.

    Two forward and two backward passes: one pair for the neuron scores and
    one on the masked network.
    """
    xb, single = _prep(model, x)
    tape, t, mask = _pruned_tape(model, xb, target, sparsity, tape)
    tape.forward(xb)
    g = tape.backward_target(t)
    tape.register_activation_mask(None)
    return _finish(g, "prunegrad", t, single)


def prunegrad_mid(model: Model, x, target=None, *, sparsity: float,
                  layer: str | None = None) -> AttributionMap:
    """Gradient of the pruned network at a hidden layer, abs-summed over
    channels and resized to the input resolution."""
    xb, single = _prep(model, x)
    tape = model.tape()
    layer = layer or default_mid_layer(tape)
    if layer != "input":
        _check_spatial(tape, layer)
    tape, t, _ = _pruned_tape(model, xb, target, sparsity, tape)
    tape.forward(xb)
    tape.backward_target(t)
    tape.register_activation_mask(None)
    layer_map = np.abs(tape.grad(layer)).sum(axis=1)
    agg = upsample_bilinear(layer_map, xb.shape[2:])
    return _finish(_spread(agg, xb.shape[1]), "prunegrad_mid", t, single, agg,
                   layer_map=layer_map)


def _norms(a) -> float:
    flat = a.ravel()
    return max(np.linalg.norm(flat), np.sqrt(np.sum(flat * flat)))


def project_l2(delta, bound):
    """Scale each sample of ``delta`` into the L2 ball of radius ``bound``."""
    out = delta.copy()
    for i in range(len(out)):
        norm = np.linalg.norm(out[i])
        if norm > bound:
            out[i] *= bound / norm
            # rounding can leave the norm an ulp above the bound; check both
            # the BLAS and the pairwise-sum routes so callers see <= bound
            while _norms(out[i]) > bound:
                out[i] *= 1.0 - 2.0 ** -52
    return out


def prune_pgd(model: Model, x, target=None, *, sparsity: float, iters: int = 20,
              step: float = 0.01, l2_bound: float = 0.1) -> AttributionMap:
    """Projected gradient ascent on the pruned network's target logit.

    Starts at zero; each step moves ``step`` along the L2-normalised
    gradient and projects back onto the ball. ``raw`` is the final
    perturbation.
    """
    if iters < 0:
        raise ValueError(f"iters must be >= 0, got {iters}")
    if not step > 0 or not l2_bound > 0:
        raise ValueError("step and l2_bound must be positive")
    xb, single = _prep(model, x)
    n = len(xb)
    tape, t, _ = _pruned_tape(model, xb, target, sparsity)
    delta = np.zeros_like(xb)
    for _ in range(iters):
        tape.forward(xb + delta)
        g = tape.backward_target(t)
        norms = np.linalg.norm(g.reshape(n, -1), axis=1)
        safe = np.where(norms > 0, norms, 1.0)
        delta = project_l2(delta + step * g / safe[:, None, None, None], l2_bound)
    tape.register_activation_mask(None)
    return _finish(delta, "prune_pgd", t, single)


def random_attribution(model: Model, x, target=None, seed: int = 0) -> AttributionMap:
    """Control method: independent U(0, 1) scores."""
    xb, single = _prep(model, x)
    raw = np.random.default_rng(seed).random(xb.shape)
    t = np.zeros(len(xb), dtype=np.int64) if target is None else np.broadcast_to(target, (len(xb),))
    return _finish(raw, "random", t, single)


METHODS: dict[str, Callable[..., AttributionMap]] = {
    "vanilla": vanilla_gradient,
    "input_x_gradient": input_x_gradient,
    "integrated_gradients": integrated_gradients,
    "guided_backprop": guided_backprop,
    "rectgrad": rectgrad,
    "gradcam": gradcam,
    "prunegrad": prunegrad,
    "prunegrad_mid": prunegrad_mid,
    "prune_pgd": prune_pgd,
    "random": random_attribution,
}


def attribute(method: str, model: Model, x, target=None, **kwargs) -> AttributionMap:
    try:
        fn = METHODS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}") from None
    return fn(model, x, target, **kwargs)


def chunk_kwargs(method: str, kwargs: dict, offset: int) -> dict:
    """Per-chunk arguments; the random control gets a distinct stream per chunk."""
    kw = dict(kwargs)
    if method == "random":
        kw["seed"] = [*np.atleast_1d(kwargs.get("seed", 0)).tolist(), offset]
    return kw


def attribute_batched(method: str, model: Model, images, batch: int = 64,
                      **kwargs) -> np.ndarray:
    """Aggregated maps for many images, computed ``batch`` at a time."""
    images = np.asarray(images, dtype=np.float64)
    out = []
    for i in range(0, len(images), batch):
        kw = chunk_kwargs(method, kwargs, i)
        out.append(attribute(method, model, images[i:i + batch], **kw).aggregated)
    return np.concatenate(out, axis=0) if out else np.zeros((0,) + images.shape[2:])
