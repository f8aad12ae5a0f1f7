"""
Training a ResNet-8 on synthetic shapes
=======================================

CIFAR-10 is not bundled, so the demos use a generated dataset: ten shape
classes drawn at random positions and colours. The trained model is cached
for the other demos.
"""
import numpy as np

from common import OUT, splits, trained_model
from prunegrad import evaluate_accuracy, load_checkpoint, save_checkpoint

train_set, test_set = splits()
print("train images", train_set.images.shape, "labels", np.bincount(train_set.labels))

model = trained_model()
print("test accuracy", evaluate_accuracy(model, test_set))
print("parameters", sum(p.size for p in model.params.values()))

# checkpoints are a small binary format; a round trip is byte-exact
save_checkpoint(model, OUT / "copy.pgck")
again = load_checkpoint(OUT / "copy.pgck")
print("round trip identical:",
      all(np.array_equal(again.params[k], v) for k, v in model.params.items()))
