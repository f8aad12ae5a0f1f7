"""Input-specific pruning by first-order Taylor importance.

Every hidden post-ReLU activation ``n_i`` gets the score ``|n_i * df/dn_i|``
for the target logit ``f``; this approximates the output change caused by
removing that single neuron. Pruning the globally lowest-scoring fraction of
neurons gives the input-specific network ``f_p(X, M)``.

All functions accept one image (C x H x W) or a batch (N x C x H x W); the
batched forms are what the calibration and sweep code use.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .curves import EvalCurve
from .models import Model
from .tensor import NeuronMask, Tape

REL_FLOOR = 1e-12


@dataclass
class ImportanceScores:
    """Per-neuron Taylor scores in the same layout as :class:`NeuronMask`.

    ``output`` is the unpruned target logit and ``target`` the logit index,
    one per sample for batched scores.
    """

    layers: dict[str, np.ndarray]
    target: np.ndarray
    output: np.ndarray

    def flat(self) -> np.ndarray:
        if not self.layers:
            return np.zeros(np.shape(self.target) + (0,))
        return np.concatenate(list(self.layers.values()), axis=-1)

    @property
    def total(self) -> int:
        return sum(v.shape[-1] for v in self.layers.values())


def _batch(model: Model, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == tuple(model.spec.input_shape)
    return (x[None] if single else x), single


def resolve_target(logits, target):
    """Per-sample logit indices; ``None`` selects the argmax logit."""
    n, classes = logits.shape
    if target is None:
        return logits.argmax(axis=1)
    t = np.broadcast_to(np.asarray(target, dtype=np.int64), (n,)).copy()
    if np.any(t < 0) or np.any(t >= classes):
        raise IndexError(f"target index {target} outside [0, {classes})")
    return t


def neuron_importance(model: Model, x, target=None, tape: Tape | None = None) -> ImportanceScores:
    """Taylor scores ``|n_i * df_t/dn_i|`` from one forward and one backward pass."""
    xb, single = _batch(model, x)
    tape = tape or model.tape()
    tape.register_activation_mask(None)
    logits = tape.forward(xb)
    t = resolve_target(logits, target)
    tape.backward_target(t)
    n = len(xb)
    layers = {name: np.abs(tape.value(name) * tape.grad(name)).reshape(n, -1)
              for name in tape.hidden_layout}
    out = logits[np.arange(n), t]
    if single:
        return ImportanceScores({k: v[0] for k, v in layers.items()}, t[0], out[0])
    return ImportanceScores(layers, t, out)


def pruned_count(sparsity: float, total: int) -> int:
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must be in [0, 1], got {sparsity}")
    # the slack keeps e.g. s = 7/m from flooring to 6 through rounding error
    return min(total, math.floor(sparsity * total + 1e-9))


def build_mask(scores: ImportanceScores, sparsity: float) -> NeuronMask:
    """Prune the ``floor(s * m)`` lowest-scoring neurons across all layers.

    Ties are resolved in (layer, index) order, i.e. by position in the flat
    concatenation of layers.
    """
    flat = scores.flat()
    k = pruned_count(sparsity, flat.shape[-1])
    keep = np.ones(flat.shape, dtype=bool)
    if k:
        order = np.argsort(flat, axis=-1, kind="stable")[..., :k]
        np.put_along_axis(keep, order, False, axis=-1)
    return _split(keep, scores.layers)


def _split(flat_bits, like: dict) -> NeuronMask:
    out, pos = {}, 0
    for name, v in like.items():
        size = v.shape[-1]
        out[name] = flat_bits[..., pos:pos + size]
        pos += size
    return NeuronMask(out)


def dead_mask(model: Model, x) -> NeuronMask:
    """Mask pruning exactly the neurons whose activation is zero for ``x``."""
    xb, single = _batch(model, x)
    tape = model.tape()
    tape.forward(xb)
    layers = {name: (tape.value(name) != 0).reshape(len(xb), -1)
              for name in tape.hidden_layout}
    return NeuronMask({k: v[0] for k, v in layers.items()} if single else layers)


def pruned_forward(model: Model, x, mask: NeuronMask, tape: Tape | None = None) -> np.ndarray:
    """Logits of the pruned network ``f_p(X, M)``."""
    xb, single = _batch(model, x)
    tape = tape or model.tape()
    tape.register_activation_mask(mask)
    try:
        out = tape.forward(xb)
    finally:
        tape.register_activation_mask(None)
    return out[0] if single else out


def exact_removal_delta(model: Model, x, neuron_id: tuple[str, int], target=None) -> float:
    """``|f_p(X, e_i) - f(X)|`` by brute force: one extra forward pass with
    only neuron ``(layer, index)`` removed."""
    x = np.asarray(x, dtype=np.float64)
    tape = model.tape()
    layout = tape.hidden_layout
    layer, index = neuron_id
    if layer not in layout or not 0 <= index < layout[layer]:
        raise IndexError(f"no neuron {neuron_id}; layout is {layout}")
    base = tape.forward(x)
    t = int(resolve_target(base, target)[0])
    mask = NeuronMask.ones(layout)
    mask.layers[layer][index] = False
    pruned = pruned_forward(model, x, mask, tape)
    return float(abs(pruned[t] - base[0, t]))


def relative_change(pruned, base):
    return np.abs(pruned - base) / np.maximum(np.abs(base), REL_FLOOR)


def _pruned_changes(model, scores_list, sparsity, batch_images):
    """Per-image relative change of the target logit at one sparsity."""
    tape = model.tape()
    out = []
    for xb, sc in zip(batch_images, scores_list):
        mask = build_mask(sc, sparsity)
        logits = pruned_forward(model, xb, mask, tape)
        fp = logits[np.arange(len(xb)), sc.target]
        out.append(relative_change(fp, sc.output))
    return np.concatenate(out)


def _score_batches(model, images, target, batch):
    images = np.asarray(images, dtype=np.float64)
    chunks, scores = [], []
    tape = model.tape()
    for i in range(0, len(images), batch):
        xb = images[i:i + batch]
        t = None if target is None else np.broadcast_to(target, (len(images),))[i:i + batch]
        chunks.append(xb)
        scores.append(neuron_importance(model, xb, t, tape))
    return chunks, scores


def sparsity_sweep(model: Model, images, sparsities, target=None,
                   batch: int = 64) -> EvalCurve:
    """Mean relative target-logit change of the pruned network per sparsity."""
    sparsities = np.asarray(sparsities, dtype=np.float64)
    chunks, scores = _score_batches(model, images, target, batch)
    traces = np.stack([_pruned_changes(model, scores, s, chunks) for s in sparsities], axis=1)
    return EvalCurve(sparsities, traces.mean(axis=0), traces,
                     {"metric": "mean_rel_change"})


def calibrate_sparsity(model: Model, val_images, target_change: float = 0.15,
                       max_images: int = 1000, depth: int = 10, batch: int = 64,
                       trace: list | None = None) -> float:
    """Largest sparsity whose mean relative output change stays within
    ``target_change``, found by bisection on [0, 1].

    Assumes the mean change is nondecreasing in sparsity. ``depth`` halvings
    give a resolution of ``2**-depth`` (< 1e-3 for the default 10). Evaluated
    points are appended to ``trace`` as (sparsity, mean change) pairs.
    """
    if not target_change >= 0:
        raise ValueError(f"target change must be >= 0, got {target_change}")
    images = np.asarray(val_images, dtype=np.float64)[:max_images]
    if len(images) == 0:
        raise ValueError("calibration needs at least one validation image")
    chunks, scores = _score_batches(model, images, None, batch)

    def mean_change(s):
        v = float(_pruned_changes(model, scores, s, chunks).mean())
        if trace is not None:
            trace.append((s, v))
        return v

    if mean_change(1.0) <= target_change:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(depth):
        mid = (lo + hi) / 2.0
        if mean_change(mid) <= target_change:
            lo = mid
        else:
            hi = mid
    return lo
