"""A small numpy transformer built up one component at a time, with the experiments that motivate each step."""

from .experiments import DEFAULTS, ExperimentSpec, experiment_spec, run, run_experiment
from .models import STAGES, Seq2SeqModel, build_model
from .transformer import TransformerConfig

__all__ = ["DEFAULTS", "ExperimentSpec", "STAGES", "Seq2SeqModel", "TransformerConfig",
           "build_model", "experiment_spec", "run", "run_experiment"]
