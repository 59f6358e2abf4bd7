"""Federated training of a context-conditioned prompt generator for a frozen detector."""
from .errors import ConfigError, DomainError, EvaluationError, FormatError, ProtocolError, ShapeError
from .numerics import AdamWState, RngStream, adamw_step, make_streams
from .promptgen import (ClassEmbeddingBatch, PromptGeneratorParams, deserialize_params,
                        generate_prompts, init_params, param_count, serialize_params)
from .federation import FederationConfig, NetworkModel, overhead_report, run_federation
from .datagen import WorldConfig, generate_world, make_tasks, oracle_prompts
from .metrics import evaluate_map
from .experiments import ExperimentConfig, build_benchmark, load_config, run_method

__version__ = "0.1.0"
