"""Graph attention networks with learned positional embeddings, on numpy."""

from .estimator import GATPOSClassifier
from .exceptions import (
    ConfigError,
    ContractError,
    DatasetFormatError,
    DomainError,
    GatposError,
    GraphRangeError,
    SegmentationError,
    ShapeError,
    SplitError,
    TrainingAborted,
)
from .graph import (
    Dataset,
    Graph,
    SplitAssignment,
    generate_splits,
    homophily_beta,
    load_dataset,
    load_splits,
    save_dataset,
    symmetrize,
)
from .layers import MODEL_KINDS, ModelHyperparams, build_model
from .training import AggregateResult, ExperimentConfig, RunResult, run_experiment, train_run

__version__ = "0.1.0"
