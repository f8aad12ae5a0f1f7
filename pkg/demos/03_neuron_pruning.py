"""
Input-specific neuron pruning
=============================

Each hidden neuron gets a first-order score |activation x gradient| for the
predicted logit. Removing the lowest scoring neurons barely changes the
output until most of the network is gone; the sweep below shows that, and
calibration picks the largest sparsity whose mean change stays under a
target.
"""
import numpy as np

from common import splits, trained_model
from prunegrad import build_mask, calibrate_sparsity, neuron_importance, pruned_forward, sparsity_sweep
from prunegrad.pruning import exact_removal_delta

model = trained_model()
train_set, test_set = splits()
x = test_set.images[0]

scores = neuron_importance(model, x)
flat = scores.flat()
print(f"{flat.size} hidden neurons, {np.mean(flat == 0):.1%} score zero for this image")

# the score of a neuron feeding the head directly is its exact removal effect
last = list(scores.layers)[-1]
i = int(np.argmax(scores.layers[last]))
print("top neuron score", scores.layers[last][i],
      "exact removal", exact_removal_delta(model, x, (last, i)))

# prune 70% of neurons and compare logits
mask = build_mask(scores, 0.7)
print("full logit  ", model.forward(x)[0, scores.target])
print("pruned logit", pruned_forward(model, x, mask)[scores.target])

# mean relative change of the predicted logit against sparsity
curve = sparsity_sweep(model, test_set.images[:50], np.linspace(0, 1, 11))
for s, c in curve.rows():
    print(f"  s={s:.1f}  change={c:.4f}")

val = train_set.images[-150:]
s = calibrate_sparsity(model, val, target_change=0.15)
print(f"calibrated sparsity for a 15% change: {s:.4f}")
