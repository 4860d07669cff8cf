"""deltamerge: merge homologous fine-tuned checkpoints through delta pruning,
sign election and fused averaging."""

from .container import (Dtype, FORMAT_VERSION, Tensor, TensorMap,
                        check_homologous, load_container, save_container)
from .errors import ConfigError, ContainerError, HomologyError
from .merging import (Election, LAMBDA_ADAPTIVE, LAMBDA_CONSTANT, MergeConfig,
                      MergeReport, MergeSettings, adaptive_rescale,
                      apply_deltas, compute_deltas, elect, fuse, merge,
                      merge_tensor_maps)
from .oracle import (ExpectationReport, LinearNodeFixture, drop_rate_report,
                     node_expectation_check, random_instance,
                     reference_pipeline)
from .pruning import (GRANULARITY_LAYER, GRANULARITY_ROW, METHOD_MAGPRUNE,
                      METHOD_NODROP, METHOD_RANDOM, METHOD_TOPK,
                      PruneOutcome, PruneSpec, SCORE_ACTIVATION,
                      SCORE_MAGNITUDE, activation_weighted_scores,
                      assign_probabilities, prune, rank_group,
                      rescale_survivors, sample_mask, topk_prune)
from .rng import RNG_VERSION, Substream, stream_key, substream

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContainerError", "Dtype", "Election", "ExpectationReport",
    "FORMAT_VERSION", "GRANULARITY_LAYER", "GRANULARITY_ROW", "HomologyError",
    "LAMBDA_ADAPTIVE", "LAMBDA_CONSTANT", "LinearNodeFixture", "MergeConfig",
    "MergeReport", "MergeSettings", "METHOD_MAGPRUNE", "METHOD_NODROP",
    "METHOD_RANDOM", "METHOD_TOPK", "PruneOutcome", "PruneSpec", "RNG_VERSION",
    "SCORE_ACTIVATION", "SCORE_MAGNITUDE", "Substream", "Tensor", "TensorMap",
    "activation_weighted_scores", "adaptive_rescale", "apply_deltas",
    "assign_probabilities", "check_homologous", "compute_deltas",
    "drop_rate_report", "elect", "fuse", "load_container", "merge",
    "merge_tensor_maps", "node_expectation_check", "prune", "rank_group",
    "random_instance", "reference_pipeline", "rescale_survivors",
    "sample_mask", "save_container", "stream_key", "substream", "topk_prune",
    "__version__",
]
