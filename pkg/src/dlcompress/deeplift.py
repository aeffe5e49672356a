"""DeepLIFT contribution scores via the rescale rule.

Activations of a recorded forward pass are compared against a reference
forward pass; difference-from-reference multipliers propagate from the
target logit back to the input. Linear layers (dense, conv, frozen
batch-norm, average pooling, flatten, residual add) pass multipliers
through their transpose; ReLU uses the rescale ratio dy/dx with a
local-gradient fallback when |dx| is tiny; max-pooling routes each
window's multiplier to the argmax of the actual input, rescaled so the
window's contribution is conserved.

The key identity: contributions at any graph cut sum to the target's
difference-from-reference delta_t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import nn
from .data import Dataset
from .errors import EmptyDataset, InvalidShape
from .nn import F64

#: |dx| below this falls back to the local gradient in the rescale rule
RESCALE_EPS = 1e-7


@dataclass
class ReferenceSpec:
    """How to build the reference activation a batch is compared against.

    kind: "zero" (all-black input), "training_mean" (elementwise mean
    over training images), "blurred" (Gaussian blur of the input itself),
    or "noisy" (input plus seeded Gaussian noise).
    """

    kind: str = "zero"
    sigma: float = 1.0
    sample_count: int = 512
    seed: int = 0

    KINDS = ("zero", "training_mean", "blurred", "noisy")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown reference kind {self.kind!r}")
        if self.kind in ("blurred", "noisy") and self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


@dataclass
class TargetSpec:
    """Which output neuron(s) receive the unit multiplier seed."""

    kind: str = "true_label"  # "true_label" | "fixed_class" | "all_classes"
    class_index: int | None = None
    labels: np.ndarray | None = None

    @classmethod
    def true_labels(cls, labels) -> "TargetSpec":
        return cls(kind="true_label", labels=np.asarray(labels))

    @classmethod
    def fixed_class(cls, k: int) -> "TargetSpec":
        return cls(kind="fixed_class", class_index=int(k))

    @classmethod
    def all_classes(cls) -> "TargetSpec":
        return cls(kind="all_classes")

    def seed_multipliers(self, n: int, class_count: int) -> np.ndarray:
        m = np.zeros((n, class_count), dtype=F64)
        if self.kind == "true_label":
            if self.labels is None or len(self.labels) != n:
                raise InvalidShape("true_label target needs one label per sample")
            m[np.arange(n), self.labels] = 1.0
        elif self.kind == "fixed_class":
            m[:, self.class_index] = 1.0
        elif self.kind == "all_classes":
            m[:] = 1.0
        else:
            raise ValueError(f"unknown target kind {self.kind!r}")
        return m


def make_reference(spec: ReferenceSpec, dataset: Dataset | None,
                   batch: np.ndarray) -> np.ndarray:
    """Reference batch with the same shape as ``batch``."""
    batch = np.asarray(batch)
    if spec.kind == "zero":
        return np.zeros_like(batch)
    if spec.kind == "training_mean":
        if dataset is None or len(dataset) == 0:
            raise EmptyDataset("training_mean reference needs a dataset")
        mean = dataset.images.mean(axis=0, dtype=F64).astype(batch.dtype)
        return np.broadcast_to(mean, batch.shape).copy()
    if spec.kind == "blurred":
        sig = [0.0, 0.0] + [spec.sigma] * (batch.ndim - 2)
        return gaussian_filter(batch, sigma=sig).astype(batch.dtype)
    # noisy
    rng = np.random.default_rng(spec.seed)
    return (batch + rng.normal(scale=spec.sigma, size=batch.shape)).astype(batch.dtype)


# ---------------------------------------------------------------------------
# attribution
# ---------------------------------------------------------------------------

@dataclass
class AttributionResult:
    """Per-layer contributions C at each layer's output, per sample.

    ``contributions[layer_id]`` has the layer's output shape with a
    leading sample axis; ``input_contributions`` covers the model input.
    ``cut_layer_ids`` lists the layers whose outputs form a full graph
    cut, where contributions sum to ``delta_t``.
    """

    contributions: dict[int, np.ndarray]
    input_contributions: np.ndarray
    delta_t: np.ndarray
    reference: ReferenceSpec
    target: TargetSpec
    cut_layer_ids: tuple[int, ...]

    def completeness_gap(self, layer_id: int | None = None) -> np.ndarray:
        """|sum(C) - delta_t| per sample at a cut layer (default: input)."""
        if layer_id is None:
            c = self.input_contributions
        else:
            if layer_id not in self.cut_layer_ids:
                raise InvalidShape(f"layer {layer_id} is not a graph cut")
            c = self.contributions[layer_id]
        sums = c.reshape(len(c), -1).sum(axis=1)
        return np.abs(sums - self.delta_t)


@dataclass
class ImportanceMap:
    """Nonnegative per-unit importances (l1-aggregated |C|) per layer."""

    granularity: str  # "channel" | "neuron"
    per_layer: dict[int, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, layer_id: int) -> np.ndarray:
        return self.per_layer[layer_id]


def _cut_layers(model: nn.Model) -> tuple[int, ...]:
    """Layer ids whose output every input->logit path passes through."""
    skipped: set[int] = set()
    for layer in model.layers:
        if isinstance(layer, nn.ResidualAdd):
            i_src = model.index_of(layer.source_id)
            i_add = model.index_of(layer.layer_id)
            skipped.update(l.layer_id for l in model.layers[i_src + 1:i_add])
    return tuple(l.layer_id for l in model.layers if l.layer_id not in skipped)


def attribute(model: nn.Model, batch: np.ndarray, reference,
              target: TargetSpec, dataset: Dataset | None = None) -> AttributionResult:
    """Rescale-rule contribution scores for a batch against a reference.

    ``reference`` is either a ReferenceSpec (materialized via
    :func:`make_reference`) or an explicit reference batch.
    """
    batch = np.asarray(batch)
    if isinstance(reference, ReferenceSpec):
        spec = reference
        ref_batch = make_reference(spec, dataset, batch)
    else:
        spec = ReferenceSpec(kind="zero")
        ref_batch = np.asarray(reference)
    if ref_batch.shape != batch.shape:
        raise InvalidShape(
            f"reference shape {list(ref_batch.shape)} != batch shape {list(batch.shape)}"
        )

    _, rec_x = nn.forward_recorded(model, batch)
    _, rec_r = nn.forward_recorded(model, ref_batch)

    layers = model.layers
    last_id = layers[-1].layer_id
    n = len(batch)
    seed = target.seed_multipliers(n, model.class_count)
    d_logits = rec_x.post[last_id].astype(F64) - rec_r.post[last_id].astype(F64)
    delta_t = (seed * d_logits).sum(axis=1)

    m_at: dict[int, np.ndarray] = {last_id: seed}
    contributions: dict[int, np.ndarray] = {}

    def send(idx: int, m: np.ndarray) -> None:
        lid = layers[idx].layer_id
        m_at[lid] = m_at[lid] + m if lid in m_at else m

    m_input = None
    for i in reversed(range(len(layers))):
        layer = layers[i]
        lid = layer.layer_id
        m = m_at.pop(lid, None)
        if m is None:  # layer feeds nothing the target depends on
            m = np.zeros_like(rec_x.post[lid], dtype=F64)
        d_post = rec_x.post[lid].astype(F64) - rec_r.post[lid].astype(F64)
        contributions[lid] = m * d_post

        d_pre = rec_x.pre[lid].astype(F64) - rec_r.pre[lid].astype(F64)
        if isinstance(layer, nn.ResidualAdd):
            send(model.index_of(layer.source_id), m)
            m_in = m
        elif isinstance(layer, nn.ReLU):
            x = rec_x.pre[lid].astype(F64)
            ratio = np.where(np.abs(d_pre) > RESCALE_EPS,
                             d_post / np.where(np.abs(d_pre) > RESCALE_EPS, d_pre, 1.0),
                             (x > 0).astype(F64))
            m_in = m * ratio
        elif isinstance(layer, nn.MaxPool):
            idx_win, _ = nn.maxpool_argmax(layer, rec_x.pre[lid].astype(F64))
            pos = nn.maxpool_positions(layer, idx_win)
            dx_sel = d_pre[pos]
            ratio = np.where(np.abs(dx_sel) > RESCALE_EPS,
                             d_post / np.where(np.abs(dx_sel) > RESCALE_EPS, dx_sel, 1.0),
                             1.0)
            m_in = nn.maxpool_scatter(layer, d_pre.shape, idx_win, m * ratio)
        else:
            m_in = nn.backprop_linear(layer, rec_x.pre[lid].astype(F64), m)
        if i > 0:
            send(i - 1, m_in)
        else:
            m_input = m_in

    d_input = batch.astype(F64) - ref_batch.astype(F64)
    return AttributionResult(
        contributions=contributions,
        input_contributions=m_input * d_input,
        delta_t=delta_t,
        reference=spec,
        target=target,
        cut_layer_ids=_cut_layers(model),
    )


def importances(attr: AttributionResult, granularity: str = "channel") -> ImportanceMap:
    """l1 aggregation of |C| over samples (and spatial positions for
    channel granularity); deterministic in sample order."""
    if granularity not in ("channel", "neuron"):
        raise ValueError(f"unknown granularity {granularity!r}")
    per_layer = {}
    for lid, c in attr.contributions.items():
        a = np.abs(c)
        if granularity == "channel" and a.ndim == 4:
            per_layer[lid] = a.sum(axis=(0, 2, 3))
        elif granularity == "channel":
            per_layer[lid] = a.sum(axis=0)
        else:
            per_layer[lid] = a.sum(axis=0).reshape(-1)
    return ImportanceMap(granularity=granularity, per_layer=per_layer)


def attribution_to_json(attr: AttributionResult) -> dict:
    """JSON-ready dump: per-layer unit scores plus run metadata."""
    imp = importances(attr, "channel")
    return {
        "layers": {str(lid): scores.tolist() for lid, scores in imp.per_layer.items()},
        "metadata": {
            "reference_kind": attr.reference.kind,
            "sample_count": int(len(attr.delta_t)),
            "target": attr.target.kind,
            "target_class": attr.target.class_index,
            "mean_abs_delta_t": float(np.abs(attr.delta_t).mean()),
        },
    }
