"""Temporal point processes that model inter-event time densities, on numpy.

Conditional inter-event time densities (log-normal mixtures, normalizing
flows and intensity-based baselines) trained by maximum likelihood with a
small reverse-mode autodiff engine.
"""
from .config import TrainConfig
from .data import EventSequence, read_jsonl, write_jsonl
from .distributions import MixtureParams, GompertzParams, ExponentialParams
from .flows import FlowStack, DsfLayerParams, SosLayerParams, BatchNormFlowParams, FullyNnParams
from .generators import GeneratorSpec, generate, preset, true_nll, mask_interval
from .models import TPPModel, load_checkpoint, save_checkpoint
from .trainer import train, nll_time, nll_total, split_dataset, train_with_imputation

__version__ = "0.1.0"
