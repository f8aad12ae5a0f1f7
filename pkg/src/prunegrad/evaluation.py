"""Benchmarks for attribution maps: parameter-randomisation sanity check,
pixel perturbation and remove-and-retrain."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, NamedTuple

import numpy as np
from scipy.stats import rankdata

from .attribution import attribute, attribute_batched, chunk_kwargs
from .curves import EvalCurve, RoarTable
from .data import Dataset, apply_pixel_masks, channel_means, pixel_masks
from .models import ArchitectureSpec, Model, build_model, init_weights, randomize_layers_from
from .pruning import relative_change
from .trainer import TrainConfig, evaluate_accuracy, train

log = logging.getLogger(__name__)

ROAR_PERCENTILES = (0.1, 0.3, 0.5, 0.7, 0.9)
ROAR_REPEATS = 3


class SpearmanResult(NamedTuple):
    rho: float
    degenerate: bool


def spearman(a, b, absolute: bool = False) -> SpearmanResult:
    """Pearson correlation of average-tie ranks.

    With ``absolute`` both vectors go through ``abs`` first. A constant
    vector has no defined correlation; the result is then ``(0.0, True)``.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least two elements")
    if absolute:
        a, b = np.abs(a), np.abs(b)
    ra = rankdata(a, method="average")
    rb = rankdata(b, method="average")
    ra -= ra.mean()
    rb -= rb.mean()
    den = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if den == 0:
        return SpearmanResult(0.0, True)
    return SpearmanResult(float(np.clip((ra * rb).sum() / den, -1.0, 1.0)), False)


# --------------------------------------------------------------------------
# sanity check


def _maps(model, images, method, kwargs, batch=32):
    out = [attribute(method, model, images[i:i + batch], **chunk_kwargs(method, kwargs, i))
           for i in range(0, len(images), batch)]
    raw = np.concatenate([m.raw for m in out])
    agg = np.concatenate([m.aggregated for m in out])
    return raw.sum(axis=1), agg


def cascading_randomization(model: Model, images, method: str, depths,
                            seed: int = 0, method_kwargs: dict | None = None) -> list[dict]:
    """Similarity of maps before and after re-drawing the last ``k`` layers.

    For each depth returns mean Spearman on the aggregated (abs-summed) maps,
    mean of its absolute value, and mean Spearman on the signed channel-sum
    maps, all averaged over images.
    """
    kwargs = dict(method_kwargs or {})
    images = np.asarray(images, dtype=np.float64)
    if method == "random":
        kwargs["seed"] = [seed, 0]
    signed0, agg0 = _maps(model, images, method, kwargs)
    rows = []
    for k in depths:
        m = randomize_layers_from(model, k, seed=seed + k)
        kw = dict(kwargs)
        if method == "random":
            kw["seed"] = [seed, k]
        signed, agg = _maps(m, images, method, kw)
        rho = np.array([spearman(a, b).rho for a, b in zip(agg0, agg)])
        rho_signed = np.array([spearman(a, b).rho for a, b in zip(signed0, signed)])
        rows.append({"method": method, "depth": int(k), "spearman": float(rho.mean()),
                     "abs_spearman": float(np.abs(rho).mean()),
                     "spearman_signed": float(rho_signed.mean())})
    return rows


# --------------------------------------------------------------------------
# pixel perturbation


def pixel_perturbation_curve(model: Model, images, method: str, fractions, fill,
                             method_kwargs: dict | None = None, descending: bool = False,
                             maps=None, batch: int = 128) -> EvalCurve:
    """Mean relative change of the original model's predicted-class logit as
    the lowest-ranked pixels are replaced by ``fill``.

    ``maps`` (aggregated saliency per image) can be passed in to skip the
    attribution step.
    """
    images = np.asarray(images, dtype=np.float64)
    fractions = np.asarray(fractions, dtype=np.float64)
    if maps is None:
        maps = attribute_batched(method, model, images, **(method_kwargs or {}))
    base = model.forward(images, batch)
    t = base.argmax(axis=1)
    f0 = base[np.arange(len(images)), t]
    traces = np.empty((len(images), len(fractions)))
    for j, frac in enumerate(fractions):
        masks = pixel_masks(maps, frac, descending)
        out = model.forward(apply_pixel_masks(images, masks, fill), batch)
        traces[:, j] = relative_change(out[np.arange(len(images)), t], f0)
    return EvalCurve(fractions, traces.mean(axis=0), traces,
                     {"method": method, "metric": "abs_fractional_change",
                      "order": "descending" if descending else "ascending"})


# --------------------------------------------------------------------------
# remove and retrain


def roar_masks(saliency_maps, percentile: float) -> np.ndarray:
    """Masks removing the top ``percentile`` most salient pixels per image."""
    return pixel_masks(saliency_maps, percentile, descending=True)


def _retrain_cell(args):
    spec, train_set, test_set, cfg, seed = args
    model = init_weights(build_model(spec), seed)
    run_cfg = TrainConfig(**{**cfg.to_dict(), "seed": seed})
    trained, _ = train(model, train_set, run_cfg)
    return evaluate_accuracy(trained, test_set)


def roar(train_set: Dataset, test_set: Dataset, model_spec: ArchitectureSpec,
         methods, percentiles=ROAR_PERCENTILES, repeats: int = ROAR_REPEATS,
         cfg: TrainConfig | None = None, base_model: Model | None = None,
         fill=None, method_kwargs: dict | None = None, workers: int = 1,
         done: dict | None = None,
         on_cell: Callable[[str, float, int, float], None] | None = None,
         on_perturbed: Callable[[str, float, Dataset, Dataset], None] | None = None,
         include_random: bool = True) -> RoarTable:
    """Remove-and-retrain benchmark.

    For each method the base model's maps mark the most salient pixels of
    every train and test image; those pixels are set to ``fill`` (default:
    training-set channel means) and a freshly initialised model is trained
    on the perturbed training set ``repeats`` times (seeds ``cfg.seed + r``).
    The table holds the resulting test accuracies.

    ``done`` maps already finished (method, percentile, run) cells to their
    accuracy; those are not retrained. ``on_cell`` is called after each new
    cell and ``on_perturbed`` once per perturbed (train, test) pair.
    """
    if base_model is None:
        raise ValueError("roar needs a trained base model to produce attribution maps")
    cfg = cfg or TrainConfig()
    method_kwargs = method_kwargs or {}
    methods = list(methods)
    if include_random and "random" not in methods:
        methods.append("random")
    percentiles = tuple(float(p) for p in percentiles)
    for p in percentiles:
        if not 0.0 <= p < 1.0:
            raise ValueError(f"percentile {p} outside [0, 1)")
    fill = channel_means(train_set) if fill is None else np.asarray(fill, dtype=np.float64)
    table = RoarTable(percentiles, repeats)
    done = dict(done or {})
    for method in methods:
        kw = method_kwargs.get(method, {})
        todo_p = [p for p in percentiles
                  if any((method, p, r) not in done for r in range(repeats))]
        for (m, p, r), acc in done.items():
            if m == method and p in percentiles and r < repeats:
                table.add(m, p, r, acc)
        if not todo_p:
            continue
        log.info("roar: maps for %s", method)
        train_maps = attribute_batched(method, base_model, train_set.images, **kw)
        test_maps = attribute_batched(method, base_model, test_set.images,
                                      **({**kw, "seed": [1]} if method == "random" else kw))
        jobs, keys = [], []
        for p in todo_p:
            tr = Dataset(apply_pixel_masks(train_set.images, roar_masks(train_maps, p), fill),
                         train_set.labels, "train")
            te = Dataset(apply_pixel_masks(test_set.images, roar_masks(test_maps, p), fill),
                         test_set.labels, "test")
            if on_perturbed is not None:
                on_perturbed(method, p, tr, te)
            for r in range(repeats):
                if (method, p, r) in done:
                    continue
                jobs.append((model_spec, tr, te, cfg, cfg.seed + r))
                keys.append((method, p, r))
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(workers) as ex:
                accs = list(ex.map(_retrain_cell, jobs))
        else:
            accs = [_retrain_cell(j) for j in jobs]
        for (m, p, r), acc in zip(keys, accs):
            table.add(m, p, r, acc)
            log.info("roar: %s p=%.2f run %d acc %.4f", m, p, r, acc)
            if on_cell is not None:
                on_cell(m, p, r, acc)
    return table
