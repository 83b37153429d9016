"""Federated-learning simulator with client-side knowledge priors."""

from .config import ExperimentConfig, load_config, parse_config
from .data import Dataset, parse_idx, parse_libsvm, partition_noniid, synth_gaussian
from .fed import ClientState, FedConfig, ServerState, run_federated
from .knowledge import (
    KnowledgePair,
    PersonalizedModel,
    build_table_rkm,
    fit_logistic_pkm,
    transform,
)
from .linalg import Rng, cross_entropy, softmax
from .metrics import pov, test_accuracy
from .nn import MlpSpec, ModelParams, forward, init_params, jacobian, vjp
from .regression import IntervalPartition, RangeSet, discretize_problem, phi_gp, phi_gr

__version__ = "0.1.0"
