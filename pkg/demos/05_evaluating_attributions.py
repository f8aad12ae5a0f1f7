"""
Evaluating attribution methods
==============================

Three checks, each at toy scale:

* cascading randomization: re-draw weights from the head downwards and see
  how similar the maps stay (a map that ignores the weights stays similar);
* pixel perturbation: fill the least important pixels first and track how
  much the predicted logit moves (lower is better);
* remove and retrain: fill the most important pixels in train and test
  images, retrain from scratch and measure accuracy (lower is better).
"""
import numpy as np

from common import splits, trained_model
from prunegrad import (TrainConfig, calibrate_sparsity, cascading_randomization,
                       pixel_perturbation_curve, roar)
from prunegrad.data import channel_means

model = trained_model()
train_set, test_set = splits()
s = calibrate_sparsity(model, train_set.images[-150:], 0.15)
kw = {"prunegrad": {"sparsity": s}}
images = test_set.images[:30]

print("-- cascading randomization (mean |Spearman| vs original maps)")
depths = list(range(len(model.param_layers) + 1))
for method in ("vanilla", "guided_backprop", "prunegrad"):
    rows = cascading_randomization(model, images, method, depths,
                                   method_kwargs=kw.get(method))
    print(f"  {method:16s}", " ".join(f"{r['abs_spearman']:.2f}" for r in rows))

print("-- pixel perturbation (area under the change curve)")
fill = channel_means(train_set)
for method in ("vanilla", "prunegrad", "random"):
    curve = pixel_perturbation_curve(model, images, method, np.linspace(0, 1, 11), fill,
                                     kw.get(method))
    print(f"  {method:10s} auc {curve.auc():.4f}")

print("-- remove and retrain (test accuracy, one short run per cell)")
table = roar(train_set.subset(1500), test_set, model.spec, ["prunegrad", "vanilla"], [0.5, 0.9],
             1, TrainConfig(epochs=6, lr_milestones=(4,)), model, method_kwargs=kw)
for method, p, run, acc in table.rows():
    print(f"  {method:10s} p={p:.1f} acc {acc:.3f}")
