"""Minibatch SGD with cross-entropy loss for fine-tuning between
compression rounds, plus the analytic backward pass and evaluation.

Training runs on the float64 path (no per-layer float32 rounding) so
analytic gradients admit a clean finite-difference oracle; parameters
themselves stay float32.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Dataset
from .errors import EmptyDataset, InvalidShape, TrainingDiverged
from .nn import F32, F64

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    lr_start: float = 0.01
    lr_end: float = 0.001
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.9
    respect_masks: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        # lr_end == 0 is only meaningful as the explicit no-op schedule
        if self.lr_start < self.lr_end or self.lr_end < 0:
            raise ValueError("need lr_start >= lr_end >= 0")
        if self.lr_end == 0 and self.lr_start != 0:
            raise ValueError("geometric schedule needs lr_end > 0 (or both 0)")

    def lr_at(self, epoch: int) -> float:
        """Geometric interpolation; epoch 0 is exactly lr_start."""
        if self.lr_start == self.lr_end or self.epochs <= 1:
            return self.lr_start
        frac = epoch / (self.epochs - 1)
        return self.lr_start * (self.lr_end / self.lr_start) ** frac


# ---------------------------------------------------------------------------
# loss and gradients
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


def loss(model: nn.Model, batch: np.ndarray, labels: np.ndarray) -> float:
    logits = nn.run_layers(model, np.asarray(batch, dtype=F64), round32=False)
    return softmax_cross_entropy(logits, labels)[0]


def backward(model: nn.Model, caches: dict[int, tuple], g_out_last: np.ndarray
             ) -> dict[tuple[int, str], np.ndarray]:
    """Walk the layer list in reverse, accumulating parameter gradients.

    ``caches`` maps layer id to its float64 (input, output); ResidualAdd
    fans the cotangent out to both the previous layer and its source.
    """
    layers = model.layers
    g_at: dict[int, np.ndarray] = {layers[-1].layer_id: g_out_last}
    grads: dict[tuple[int, str], np.ndarray] = {}

    def send(target_idx: int, g: np.ndarray) -> None:
        lid = layers[target_idx].layer_id
        g_at[lid] = g_at[lid] + g if lid in g_at else g

    for i in reversed(range(len(layers))):
        layer = layers[i]
        g = g_at.pop(layer.layer_id, None)
        if g is None:
            continue
        pre, _post = caches[layer.layer_id]
        for name, val in nn.layer_param_grads(layer, pre, g).items():
            grads[(layer.layer_id, name)] = val

        if isinstance(layer, nn.ResidualAdd):
            send(model.index_of(layer.source_id), g)
            gin = g
        elif isinstance(layer, nn.ReLU):
            gin = g * (pre > 0)
        elif isinstance(layer, nn.MaxPool):
            idx, _ = nn.maxpool_argmax(layer, pre)
            gin = nn.maxpool_scatter(layer, pre.shape, idx, g)
        else:
            gin = nn.backprop_linear(layer, pre, g)
        if i > 0:
            send(i - 1, gin)
    return grads


def grad(model: nn.Model, batch: np.ndarray, labels: np.ndarray,
         loss_scale: float = 1.0) -> dict[tuple[int, str], np.ndarray]:
    """Analytic gradients of mean cross-entropy w.r.t. every parameter."""
    batch = np.asarray(batch, dtype=F64)
    labels = np.asarray(labels)
    if len(batch) != len(labels):
        raise InvalidShape(f"{len(batch)} samples vs {len(labels)} labels")
    caches: dict[int, tuple] = {}
    logits = nn.run_layers(model, batch, round32=False, caches=caches)
    _, dlogits = softmax_cross_entropy(logits, labels)
    return backward(model, caches, loss_scale * dlogits)


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

def _param_keeps(model: nn.Model, masks) -> dict[tuple[int, str], np.ndarray] | None:
    """Accept a PruneMask-like object or a raw {(lid, name): keep} dict."""
    if masks is None:
        return None
    if hasattr(masks, "param_keeps"):
        return masks.param_keeps(model)
    return masks


def fine_tune(model: nn.Model, dataset: Dataset, cfg: TrainConfig,
              masks=None) -> tuple[nn.Model, list[float]]:
    """SGD fine-tuning; returns the updated model and per-epoch losses.

    With ``respect_masks`` the masked entries are re-zeroed after every
    step, so pruned weights stay exactly 0 throughout. BatchNorm running
    stats are frozen; only gamma/beta train.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot fine-tune on an empty dataset")
    model = model.copy()
    keeps = _param_keeps(model, masks) if cfg.respect_masks else None
    params = model.parameters()
    if keeps:
        for key, keep in keeps.items():
            if not np.all(params[key][~keep] == 0):
                log.warning("masked entries of %s are nonzero before fine-tuning", key)

    rng = np.random.default_rng(cfg.seed)
    velocity = {k: np.zeros(v.shape, dtype=F64) for k, v in params.items()}
    losses: list[float] = []
    best_loss, best_model = np.inf, model.copy()

    n = len(dataset)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            caches: dict[int, tuple] = {}
            with np.errstate(over="ignore", invalid="ignore"):
                logits = nn.run_layers(model, dataset.images[idx].astype(F64),
                                       round32=False, caches=caches)
                step_loss, dlogits = softmax_cross_entropy(logits, dataset.labels[idx])
            if not np.isfinite(step_loss):
                raise TrainingDiverged(
                    f"loss became {step_loss} at epoch {epoch}",
                    best_model=best_model, losses=losses,
                )
            grads = backward(model, caches, dlogits)
            for key, g in grads.items():
                v = velocity[key]
                v *= cfg.momentum
                v -= lr * g
                params[key][...] = (params[key].astype(F64) + v).astype(F32)
            if keeps:
                for key, keep in keeps.items():
                    params[key][~keep] = 0.0
            epoch_loss += step_loss
            batches += 1
        losses.append(epoch_loss / batches)
        if losses[-1] < best_loss:
            best_loss, best_model = losses[-1], model.copy()
    return model, losses


@dataclass
class EvalResult:
    accuracy: float
    per_class_accuracy: np.ndarray = field(default_factory=lambda: np.zeros(0))


def evaluate(model: nn.Model, dataset: Dataset, batch_size: int = 256) -> EvalResult:
    """Top-1 accuracy plus a per-class vector (NaN for absent classes)."""
    if len(dataset) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    correct = np.zeros(dataset.class_count)
    counts = np.zeros(dataset.class_count)
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        pred = nn.forward(model, dataset.images[sl]).argmax(axis=1)
        labels = dataset.labels[sl]
        np.add.at(counts, labels, 1)
        np.add.at(correct, labels[pred == labels], 1)
    with np.errstate(invalid="ignore"):
        per_class = np.where(counts > 0, correct / np.maximum(counts, 1), np.nan)
    return EvalResult(float(correct.sum() / counts.sum()), per_class)
