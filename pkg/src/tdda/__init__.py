"""Task-discriminative adversarial domain adaptation on a small numpy autodiff engine."""

from .datasets import (DomainDataset, ShiftSpec, apply_shift, gen_gaussian_mixture, gen_two_moons,
                       load_idx, rescale_inputs, two_moons_task)
from .estimator import DomainAdaptiveClassifier
from .trainer import Model, RunHistory, TrainConfig, evaluate_accuracy, predict, train

__version__ = "0.1.0"
