"""Attribution-guided neural network compression toolkit.

A small numpy inference engine plus compression passes driven by
DeepLIFT contribution scores: structured and unstructured pruning,
importance-weighted weight-sharing quantization, and mixed-precision
integer quantization, with MAC/parameter cost profiling throughout.
"""

from .nn import (
    AvgPool, BatchNorm, Conv2d, Dense, Flatten, ForwardRecord,
    GlobalAvgPool, Layer, MaxPool, Model, ReLU, ResidualAdd,
    forward, forward_recorded,
)
from .serialize import load_model, save_model
from .data import Dataset, FixtureSpec, Split, load_idx, make_fixture_dataset, split
from .train import TrainConfig, evaluate, fine_tune, grad
from .deeplift import (
    AttributionResult, ImportanceMap, ReferenceSpec, TargetSpec,
    attribute, importances, make_reference,
)
from .sensitivity import DistortionSpec, SensitivityProfile, layer_sensitivity, separability
from .prune import (
    PruneMask, PruneObjective, PruneReport, allocate_prune_counts,
    global_prune, l1_baseline_rank, local_prune, unstructured_prune,
)
from .weight_sharing import Codebook, quantize_weight_sharing, weighted_kmeans
from .intquant import (
    CBReport, QuantConfig, calibrate_activations, coarse_search,
    fine_search, quantize_tensor,
)
from .profiler import CostProfile, load_vector, profile_cost

__version__ = "0.1.0"
