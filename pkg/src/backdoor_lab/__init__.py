"""Desk-scale backdoor attacks on small numpy classifiers and their removal by
loss-maximising unlearning, outlier-neuron reinitialisation and
direction-penalised relearning."""

from .checkpoint import load_model, save_model
from .data import (Blended, LabeledDataset, Patch, PoisonPlan, Sinusoidal, apply_trigger,
                   gen_synthetic, load_dataset, make_trigger, poison_dataset,
                   sample_defense_set, save_dataset)
from .errors import (BackdoorLabError, ConfigError, ContractError, FixtureGateError,
                     InputError, NonConvergenceError, NumericError)
from .nn import Model, build_model, cross_entropy, forward, he_uniform, predict
from .relearn import (OriginalRowBank, RelearnConfig, reinit_neurons, select_random_neurons,
                      similarity_penalty, ulrl_defend)
from .rng import make_rng
from .train import TrainConfig, attack_success_rate, clean_accuracy, train_backdoored
from .unlearn import (SuspicionReport, UnlearnConfig, aggregate_delta, dispersion_stats,
                      identify_suspicious)

__version__ = "0.1.0"
