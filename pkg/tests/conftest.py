import os
from pathlib import Path

import numpy as np
import pytest

from prunegrad.data import generate_shapes, load_cifar10_binary
from prunegrad.models import (ArchitectureSpec, build_model, init_weights, mlp_spec,
                              resnet8_spec)
from prunegrad.trainer import TrainConfig, train

CIFAR_ENV = "PRUNEGRAD_CIFAR10_DIR"

# Shapes stand-in used when CIFAR-10 is not on disk: big enough to train a
# ResNet-8 to high accuracy in about a minute of CPU.
STANDIN = dict(size=16, n_train=3000, n_test=500, epochs=8, milestone=6, lr=0.01)

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def verdict(number, title, ok, detail=""):
    """Record a PASS/FAIL line for an acceptance criterion, then assert it."""
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title}"
    if detail:
        line += f"  [{detail}]"
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


def linear_model(w, bias=None):
    """Single logit ``f = w . x (+ b)`` over a flat input."""
    w = np.asarray(w, dtype=float)
    spec = ArchitectureSpec((w.size,), [{"type": "head", "in": w.size, "classes": 1,
                                         "bias": bias is not None}], 1)
    m = build_model(spec)
    m.params["head.weight"][:] = w[None]
    if bias is not None:
        m.params["head.bias"][:] = bias
    return m


def relu_scalar(a, b):
    """``f(x) = b * relu(a * x)`` for scalar x."""
    m = build_model(mlp_spec([1, 1, 1], bias=False))
    m.params["dense0.weight"][:] = a
    m.params["head.weight"][:] = b
    return m


def linear_image_model(w):
    """Flattened linear probe on C x H x W images; ``w`` has the image shape."""
    w = np.asarray(w, dtype=float)
    spec = ArchitectureSpec(w.shape, [{"type": "flatten"},
                                      {"type": "head", "in": w.size, "classes": 1,
                                       "bias": False}], 1)
    m = build_model(spec)
    m.params["head.weight"][:] = w.reshape(1, -1)
    return m


def random_mlp(sizes, seed=0, bias=True):
    return init_weights(build_model(mlp_spec(sizes, bias=bias)), seed)


def small_cnn(seed=0, size=8, bias=True, classes=3):
    spec = resnet8_spec((3, size, size), classes, widths=(4, 6, 8), bias=bias)
    return init_weights(build_model(spec), seed)


@pytest.fixture(scope="session")
def standin():
    """Trained ResNet-8 on the synthetic shapes data, plus its splits."""
    s = STANDIN
    tr = generate_shapes(0, s["n_train"], s["size"])
    te = generate_shapes(1, s["n_test"], s["size"], split="test")
    model = init_weights(build_model(resnet8_spec((3, s["size"], s["size"]))), 0)
    cfg = TrainConfig(epochs=s["epochs"], lr=s["lr"], lr_milestones=(s["milestone"],))
    model, hist = train(model, tr, cfg, te)
    return {"model": model, "train": tr, "test": te, "history": hist, "cfg": cfg}


@pytest.fixture(scope="session")
def cifar():
    """CIFAR-10 subset from ``$PRUNEGRAD_CIFAR10_DIR``; skipped when absent."""
    d = os.environ.get(CIFAR_ENV)
    if not d or not Path(d).is_dir():
        pytest.skip(f"CIFAR-10 binaries not available (set {CIFAR_ENV})")
    return load_cifar10_binary(d, max_train=10000, max_test=1000)
