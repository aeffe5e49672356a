"""Weight sharing: non-uniform quantization via importance-weighted k-means.

Every weight of a layer joins one of 2^bits clusters and takes its
centroid's value. Clustering minimizes an importance-weighted squared
error: each weight carries its output unit's attribution score scaled
by N_total / N_layer so small layers are not drowned out by large ones
(plain MSE is the uniform-importance special case). Batch-norm running
statistics can be recalibrated from a forward pass afterwards without
touching any weight.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn, train
from .data import Dataset
from .deeplift import ImportanceMap
from .errors import ZeroMass
from .nn import F32, F64

#: floor for per-weight importances so no weight is literally ignored
EPS_IMPORTANCE = 1e-12


def weight_importances(model: nn.Model, importance: ImportanceMap
                       ) -> dict[int, np.ndarray]:
    """Per-weight scores: output-unit importance x (N_total / N_layer)."""
    weighted = [l for l in model.layers if isinstance(l, nn.WEIGHTED)]
    n_total = sum(l.weight.size for l in weighted)
    out = {}
    for layer in weighted:
        imp = np.asarray(importance.per_layer[layer.layer_id], dtype=F64)
        scale = n_total / layer.weight.size
        shape = (layer.weight.shape[0],) + (1,) * (layer.weight.ndim - 1)
        h = np.broadcast_to(imp.reshape(shape) * scale, layer.weight.shape)
        out[layer.layer_id] = np.maximum(h, EPS_IMPORTANCE)
    return out


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    objective: float
    history: list[float] = field(default_factory=list)


def weighted_kmeans(values, weights, k: int, seed: int = 0,
                    max_iter: int = 100, restarts: int = 8) -> KMeansResult:
    """Lloyd iterations on 1-D data minimizing sum h_i (w_i - c_a(i))^2.

    Seeding is kmeans++ with probability proportional to h * d^2 (h for
    the first centroid); centroid updates are importance-weighted means.
    Stops when assignments stabilize. The best of ``restarts`` seeded
    runs (by final objective) is returned, all derived from ``seed``.
    k is clamped to the number of distinct values (with a warning) so
    empty clusters cannot pin the objective above zero in the lossless
    regime.
    """
    values = np.asarray(values, dtype=F64).ravel()
    weights = np.asarray(weights, dtype=F64).ravel()
    if len(values) != len(weights) or len(values) == 0:
        raise ValueError("values and weights must be equal-length and nonempty")
    if k < 1:
        raise ValueError("k must be >= 1")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    if weights.sum() == 0:
        raise ZeroMass("all k-means weights are zero")

    distinct = np.unique(values)
    if k > len(distinct):
        warnings.warn(
            f"k={k} exceeds {len(distinct)} distinct values; clamping",
            stacklevel=2,
        )
        k = len(distinct)

    best: KMeansResult | None = None
    for sub in np.random.SeedSequence(seed).spawn(max(restarts, 1)):
        rng = np.random.default_rng(sub)
        result = _lloyd(values, weights, k, rng, max_iter)
        if best is None or result.objective < best.objective:
            best = result
    return best


def _lloyd(values: np.ndarray, weights: np.ndarray, k: int,
           rng: np.random.Generator, max_iter: int) -> KMeansResult:
    centroids = _kmeanspp(values, weights, k, rng)
    assignments = None
    history: list[float] = []
    d2 = (values[:, None] - centroids[None, :]) ** 2
    history.append(float((weights * d2.min(axis=1)).sum()))
    for _ in range(max_iter):
        new_assign = d2.argmin(axis=1)
        if assignments is not None and np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        mass = np.bincount(assignments, weights=weights, minlength=k)
        wsum = np.bincount(assignments, weights=weights * values, minlength=k)
        centroids = np.where(mass > 0, wsum / np.maximum(mass, 1.0), centroids)
        d2 = (values[:, None] - centroids[None, :]) ** 2
        history.append(float((weights * d2[np.arange(len(values)), assignments]).sum()))
    if assignments is None:
        assignments = d2.argmin(axis=1)
    return KMeansResult(centroids, assignments, history[-1], history)


def _kmeanspp(values: np.ndarray, weights: np.ndarray, k: int,
              rng: np.random.Generator) -> np.ndarray:
    p = weights / weights.sum()
    centroids = [values[rng.choice(len(values), p=p)]]
    for _ in range(1, k):
        d2 = np.min((values[:, None] - np.asarray(centroids)[None, :]) ** 2, axis=1)
        mass = weights * d2
        if mass.sum() == 0:  # all remaining points sit on a centroid
            pool = np.setdiff1d(np.unique(values), np.asarray(centroids))
            centroids.append(pool[0])
            continue
        centroids.append(values[rng.choice(len(values), p=mass / mass.sum())])
    return np.asarray(centroids, dtype=F64)


# ---------------------------------------------------------------------------
# codebooks
# ---------------------------------------------------------------------------

@dataclass
class Codebook:
    layer_id: int
    bits: int
    centroids: np.ndarray       # [k] float32
    assignments: np.ndarray     # flat uint32, one per weight

    def reconstruct(self, shape) -> np.ndarray:
        return self.centroids[self.assignments].reshape(shape).astype(F32)

    @property
    def index_bits(self) -> int:
        k = len(self.centroids)
        return max(int(np.ceil(np.log2(k))), 0) if k > 1 else 0

    def packed_assignments(self) -> bytes:
        return pack_indices(self.assignments, self.index_bits)

    def to_json(self) -> dict:
        return {
            "layer_id": self.layer_id,
            "bits": self.bits,
            "index_bits": self.index_bits,
            "centroids": self.centroids.astype(float).tolist(),
            "assignment_count": int(len(self.assignments)),
        }


def pack_indices(indices: np.ndarray, bits_per_index: int) -> bytes:
    """Pack indices at ``bits_per_index`` each, little-endian bit order:
    bit b of the stream lands in byte b//8 at position b%8."""
    if bits_per_index == 0:
        return b""
    acc = 0
    for i, v in enumerate(np.asarray(indices, dtype=np.uint64)):
        acc |= int(v) << (i * bits_per_index)
    nbytes = (len(indices) * bits_per_index + 7) // 8
    return int(acc).to_bytes(nbytes, "little")


def unpack_indices(blob: bytes, bits_per_index: int, count: int) -> np.ndarray:
    if bits_per_index == 0:
        return np.zeros(count, dtype=np.uint32)
    acc = int.from_bytes(blob, "little")
    mask = (1 << bits_per_index) - 1
    return np.array([(acc >> (i * bits_per_index)) & mask for i in range(count)],
                    dtype=np.uint32)


# ---------------------------------------------------------------------------
# model quantization
# ---------------------------------------------------------------------------

@dataclass
class WSReport:
    bits: dict[int, int]
    criteria: str
    accuracy_before: float | None
    accuracy_after: float | None
    recalibrated_bn: bool


def quantize_weight_sharing(model: nn.Model, bits_per_layer, criteria: str = "dwmse",
                            dataset: Dataset | None = None,
                            recalibrate_bn: bool = False,
                            importance: ImportanceMap | None = None,
                            seed: int = 0
                            ) -> tuple[nn.Model, dict[int, Codebook], WSReport]:
    """Replace each weighted layer's weights by its codebook centroids.

    criteria "dwmse" weights the clustering by attribution importances
    (requires ``importance``); "mse" uses uniform weights. Biases and
    batch-norm parameters are left untouched. ``recalibrate_bn`` redoes
    BN running stats from a forward pass over ``dataset``.
    """
    if criteria not in ("mse", "dwmse"):
        raise ValueError(f"criteria must be 'mse' or 'dwmse', got {criteria!r}")
    weighted = [l for l in model.layers if isinstance(l, nn.WEIGHTED)]
    bits = ({l.layer_id: int(bits_per_layer) for l in weighted}
            if np.isscalar(bits_per_layer) else dict(bits_per_layer))
    for lid, b in bits.items():
        if not 1 <= b <= 8:
            raise ValueError(f"bits for layer {lid} must be in [1, 8], got {b}")

    if criteria == "dwmse":
        if importance is None:
            raise ValueError("dwmse criteria needs an ImportanceMap")
        h_by_layer = weight_importances(model, importance)
    else:
        h_by_layer = {l.layer_id: np.ones(l.weight.shape, dtype=F64) for l in weighted}

    acc_before = train.evaluate(model, dataset).accuracy if dataset is not None else None
    out = model.copy()
    codebooks: dict[int, Codebook] = {}
    for layer in weighted:
        lid = layer.layer_id
        if lid not in bits:
            continue
        target = out.layer(lid)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # k clamping on tiny layers is routine
            result = weighted_kmeans(
                target.weight.ravel(), h_by_layer[lid].ravel(), 2 ** bits[lid],
                seed=np.random.SeedSequence([seed, lid]).generate_state(1)[0],
            )
        codebooks[lid] = Codebook(
            layer_id=lid, bits=bits[lid],
            centroids=result.centroids.astype(F32),
            assignments=result.assignments.astype(np.uint32),
        )
        target.weight = codebooks[lid].reconstruct(target.weight.shape)
    if recalibrate_bn:
        if dataset is None:
            raise ValueError("recalibrate_bn needs a calibration dataset")
        recalibrate_batchnorm(out, dataset.images)
    acc_after = train.evaluate(out, dataset).accuracy if dataset is not None else None
    report = WSReport(bits, criteria, acc_before, acc_after, recalibrate_bn)
    return out, codebooks, report


def recalibrate_batchnorm(model: nn.Model, images: np.ndarray) -> None:
    """Recompute BN running stats in place from one calibration pass.

    Layers run in order and each BN consumes the statistics of its own
    input under the already-recalibrated upstream, exactly like a
    momentum-free training pass. Weights are never modified.
    """
    x = np.asarray(images, dtype=F64)
    outs: dict[int, np.ndarray] = {}
    for layer in model.layers:
        if isinstance(layer, nn.BatchNorm):
            axes = (0, 2, 3) if x.ndim == 4 else (0,)
            layer.running_mean = x.mean(axis=axes).astype(F32)
            layer.running_var = x.var(axis=axes).astype(F32)
        src = outs[layer.source_id] if isinstance(layer, nn.ResidualAdd) else None
        x = nn._apply_layer(layer, x, src).astype(F32).astype(F64)
        outs[layer.layer_id] = x
    return None
