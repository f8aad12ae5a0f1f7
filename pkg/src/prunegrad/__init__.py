"""Feature attribution by input-specific network pruning, in numpy."""
from .attribution import (METHODS, AttributionMap, attribute, attribute_batched, gradcam,
                          guided_backprop, input_x_gradient, integrated_gradients, prune_pgd,
                          prunegrad, prunegrad_mid, random_attribution, rectgrad,
                          vanilla_gradient)
from .curves import EvalCurve, RoarTable
from .data import Dataset, generate_shapes, load_cifar10_binary
from .evaluation import cascading_randomization, pixel_perturbation_curve, roar, spearman
from .models import (ArchitectureSpec, Model, build_model, init_weights, load_checkpoint,
                     mlp_spec, resnet8_spec, save_checkpoint)
from .pruning import (build_mask, calibrate_sparsity, neuron_importance, pruned_forward,
                      sparsity_sweep)
from .tensor import BackpropMode, NeuronMask, Tape
from .trainer import TrainConfig, evaluate_accuracy, train

__version__ = "0.1.0"
