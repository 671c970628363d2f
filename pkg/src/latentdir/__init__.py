"""Contrastive discovery of interpretable edit directions in a generator's latent space."""
from .directions import DirectionSet, edit, init_direction_models, parse_direction_set, serialize_direction_set
from .generators import (GeneratorSpec, features, ground_truth_directions, load_mlp_generator,
                         make_synthetic_generator, render, sample_latent)
from .objective import contrastive_loss, feature_divergences, loss_oracle
from .trainer import TrainConfig, adam_step, train, training_step

__version__ = "0.1.0"
