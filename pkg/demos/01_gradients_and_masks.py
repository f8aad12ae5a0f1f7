"""
Gradients, backprop modes and neuron masks
==========================================

The tape records a network once and replays it forward and backward on
batches. Three things can be switched on it: the ReLU backward rule
(standard, guided, rectified) and a mask that zeroes chosen activations.
"""
import numpy as np

from prunegrad import BackpropMode, NeuronMask, build_model, init_weights, mlp_spec
from prunegrad.tensor import finite_difference_check

# a small random MLP: 6 inputs, two hidden layers, 3 logits
model = init_weights(build_model(mlp_spec([6, 8, 8, 3])), seed=0)
tape = model.tape()
x = np.random.default_rng(1).normal(size=6)

logits = tape.forward(x)
print("logits", logits[0])

# input gradient of logit 0, checked against central differences
grad = tape.backward_target(0)[0]
err, n = finite_difference_check(tape, x, target=0)
print(f"finite-difference check: max rel err {err:.1e} over {n} coordinates")

# guided backprop only lets positive signal through each ReLU
tape.set_backprop_mode(BackpropMode.guided())
tape.forward(x)
print("standard grad", np.round(grad, 4))
print("guided grad  ", np.round(tape.backward_target(0)[0], 4))

# rectified backprop keeps only the largest activation x gradient products
tape.set_backprop_mode(BackpropMode.rectified(q=80))
tape.forward(x)
print("rectified q=80", np.round(tape.backward_target(0)[0], 4))
tape.set_backprop_mode(BackpropMode.standard())

# masking: switch off the first half of each hidden layer
layout = tape.hidden_layout
print("maskable layers", layout)
mask = NeuronMask({k: np.arange(n) >= n // 2 for k, n in layout.items()})
tape.register_activation_mask(mask)
print("masked logits", tape.forward(x)[0])
tape.register_activation_mask(None)
