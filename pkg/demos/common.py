"""Shared setup for the demo scripts: a small ResNet-8 trained on the
synthetic shapes data, cached under ``demos/out`` after the first run."""
from pathlib import Path

from prunegrad import (TrainConfig, build_model, generate_shapes, init_weights, load_checkpoint,
                       resnet8_spec, save_checkpoint, train)

OUT = Path(__file__).resolve().parent / "out"
SIZE = 16


def splits():
    return (generate_shapes(0, 2500, SIZE),
            generate_shapes(1, 200, SIZE, split="test"))


def trained_model():
    path = OUT / "model.pgck"
    if path.exists():
        return load_checkpoint(path)
    OUT.mkdir(exist_ok=True)
    train_set, test_set = splits()
    model = init_weights(build_model(resnet8_spec((3, SIZE, SIZE))), 0)
    model, hist = train(model, train_set, TrainConfig(epochs=8, lr_milestones=(6,)), test_set)
    print(f"trained demo model, test accuracy {hist.test_acc[-1]:.3f}")
    save_checkpoint(model, path)
    return model
