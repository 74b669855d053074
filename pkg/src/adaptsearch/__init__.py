"""adaptsearch: search over per-layer adapt/fine-tune decisions for few-shot learners.

A small dense backbone is wrapped in a weight-sharing supernet whose paths
pick, per layer, whether to attach an adapter and whether to fine-tune.
Uniform-path episodic training, evolutionary search with a diversity-
constrained shortlist, and per-episode deferred selection at meta-test time
run end to end on synthetic multi-domain few-shot benchmarks.
"""

from .autodiff import ParamBlock, Tape, Tensor, sgd_step
from .config import ExperimentConfig, resolve_config
from .episodes import Domain, DomainSpec, Episode, load_dataset, make_domain, sample_episode
from .metrics import CentroidSet, class_centroids, cosine_distance, ncc_accuracy, proto_loss
from .search import (
    FitnessRecord,
    SearchConfig,
    SearchHistory,
    Shortlist,
    TrainConfig,
    evaluate_fitness,
    evolve,
    finetune_on_support,
    pretrain_backbone,
    select_shortlist,
    supernet_train,
    test_time_select,
)
from .supernet import (
    Backbone,
    LayerDecision,
    PathEncoding,
    Supernet,
    all_paths,
    decode_path,
    encode_path,
    load_checkpoint,
    sample_uniform_path,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "CentroidSet",
    "Domain",
    "DomainSpec",
    "Episode",
    "ExperimentConfig",
    "FitnessRecord",
    "LayerDecision",
    "ParamBlock",
    "PathEncoding",
    "SearchConfig",
    "SearchHistory",
    "Shortlist",
    "Supernet",
    "Tape",
    "Tensor",
    "TrainConfig",
    "all_paths",
    "class_centroids",
    "cosine_distance",
    "decode_path",
    "encode_path",
    "evaluate_fitness",
    "evolve",
    "finetune_on_support",
    "load_checkpoint",
    "load_dataset",
    "make_domain",
    "ncc_accuracy",
    "pretrain_backbone",
    "proto_loss",
    "resolve_config",
    "sample_episode",
    "sample_uniform_path",
    "save_checkpoint",
    "select_shortlist",
    "sgd_step",
    "supernet_train",
    "test_time_select",
    "__version__",
]
