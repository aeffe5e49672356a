"""Structured and unstructured pruning driven by attribution importances.

Structured masks live at output-unit granularity (conv channels, dense
neurons): masking a unit zeroes its weight rows and bias, ties the
following batch-norm channel, and zeroes the matching input slices of
every downstream consumer, walking through shape-preserving layers and
across residual adds (both branches lose the same channels). Unit
removal is realized as exact-zero masking, so the cost profiler simply
counts alive units. Unstructured masks zero individual weights ranked
by channel importance times |w|.

The global loops follow the iterate-profile-allocate-prune-retrain
scheme: sensitivities and per-layer cost loads set each layer's share
of the round's prune budget, importances pick the units inside a layer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import deeplift, nn, profiler, sensitivity, train
from .data import Dataset, Split
from .deeplift import ImportanceMap, ReferenceSpec, TargetSpec
from .errors import (BudgetTooLarge, InvalidAmount, NoWeights,
                     TrainingDiverged, UnknownLayer, UnsupportedTopology)
from .nn import F64

log = logging.getLogger(__name__)

#: tolerance floor so no layer is starved of budget entirely
EPS_TOL = 0.01


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

@dataclass
class PruneMask:
    """Boolean keep-masks per layer (True = keep).

    granularity "channel"/"neuron" masks whole output units; "weight"
    masks individual weight entries.
    """

    granularity: str
    keep: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.granularity not in ("channel", "neuron", "weight"):
            raise ValueError(f"unknown granularity {self.granularity!r}")

    @property
    def unit_level(self) -> bool:
        return self.granularity != "weight"

    @classmethod
    def all_keep(cls, model: nn.Model, granularity: str = "channel",
                 layer_ids=None) -> "PruneMask":
        ids = layer_ids if layer_ids is not None else [
            l.layer_id for l in model.layers if isinstance(l, nn.WEIGHTED)
        ]
        keep = {}
        for lid in ids:
            layer = model.layer(lid)
            shape = layer.weight.shape if granularity == "weight" else layer.weight.shape[0]
            keep[lid] = np.ones(shape, dtype=bool)
        return cls(granularity, keep)

    def alive(self, lid: int) -> int:
        return int(self.keep[lid].sum())

    def sparsity(self, model: nn.Model) -> float:
        """Zeroed fraction of all maskable weights (induced zeros included)."""
        keeps = self.param_keeps(model)
        dead = sum(int((~k).sum()) for (lid, name), k in keeps.items() if name == "weight")
        total = sum(k.size for (lid, name), k in keeps.items() if name == "weight")
        return dead / total if total else 0.0

    def param_keeps(self, model: nn.Model) -> dict[tuple[int, str], np.ndarray]:
        """Per-parameter keep arrays including every induced zero."""
        if self.granularity == "weight":
            return {(lid, "weight"): k.copy() for lid, k in self.keep.items()}
        return _unit_param_keeps(model, self.keep)

    def to_json(self) -> dict:
        return {
            "granularity": self.granularity,
            "keep": {str(lid): k.astype(int).ravel().tolist()
                     for lid, k in self.keep.items()},
        }


def _nearest_weighted_producers(model: nn.Model, idx: int) -> list[int]:
    """Indices of the weighted layers producing the units of layers[idx]'s
    output, walking back through unit-preserving layers and add branches."""
    layer = model.layers[idx]
    if isinstance(layer, nn.WEIGHTED):
        return [idx]
    if isinstance(layer, nn.ResidualAdd):
        out = _nearest_weighted_producers(model, idx - 1)
        out += _nearest_weighted_producers(model, model.index_of(layer.source_id))
        return out
    if isinstance(layer, (nn.BatchNorm, nn.ReLU, nn.MaxPool, nn.AvgPool,
                          nn.GlobalAvgPool)):
        if idx == 0:
            raise UnsupportedTopology("channel mask reaches the model input")
        return _nearest_weighted_producers(model, idx - 1)
    raise UnsupportedTopology(
        f"cannot trace channel producers through {layer.kind}"
    )


def _consumers(model: nn.Model, idx: int) -> list[int]:
    """Indices of layers reading layers[idx]'s output."""
    out = [idx + 1] if idx + 1 < len(model.layers) else []
    lid = model.layers[idx].layer_id
    out += [j for j, l in enumerate(model.layers)
            if isinstance(l, nn.ResidualAdd) and l.source_id == lid and j != idx + 1]
    return out


def _unit_param_keeps(model: nn.Model, keep_by_layer: dict[int, np.ndarray]
                      ) -> dict[tuple[int, str], np.ndarray]:
    layers = model.layers
    shapes = model.layer_shapes()
    # dead output units per weighted layer index, grown to a fixpoint
    dead: dict[int, set[int]] = {}
    work: list[int] = []
    for lid, keep in keep_by_layer.items():
        idx = model.index_of(lid)
        dead[idx] = set(np.where(~np.asarray(keep, dtype=bool))[0])
        work.append(idx)

    keeps: dict[tuple[int, str], np.ndarray] = {}

    def keep_of(lid: int, name: str, shape) -> np.ndarray:
        key = (lid, name)
        if key not in keeps:
            keeps[key] = np.ones(shape, dtype=bool)
        return keeps[key]

    def add_dead(producer_idx: int, units: set[int]) -> None:
        have = dead.setdefault(producer_idx, set())
        new = units - have
        if new:
            have |= new
            work.append(producer_idx)

    while work:
        p_idx = work.pop()
        units = dead[p_idx]
        if not units:
            continue
        producer = layers[p_idx]
        sel = np.asarray(sorted(units))
        keep_of(producer.layer_id, "weight", producer.weight.shape)[sel] = False
        if producer.bias is not None:
            keep_of(producer.layer_id, "bias", producer.bias.shape)[sel] = False
        # walk consumer edges with the dead unit set in axis-1 index space
        frontier = [(p_idx, frozenset(units))]
        visited: set[tuple[int, frozenset]] = set()
        while frontier:
            at, dset = frontier.pop()
            for j in _consumers(model, at):
                key = (j, dset)
                if key in visited:
                    continue
                visited.add(key)
                consumer = layers[j]
                sel = np.asarray(sorted(dset))
                if isinstance(consumer, nn.Conv2d):
                    keep_of(consumer.layer_id, "weight",
                            consumer.weight.shape)[:, sel] = False
                elif isinstance(consumer, nn.Dense):
                    keep_of(consumer.layer_id, "weight",
                            consumer.weight.shape)[:, sel] = False
                elif isinstance(consumer, nn.BatchNorm):
                    for name in ("gamma", "beta"):
                        keep_of(consumer.layer_id, name,
                                (consumer.channels,))[sel] = False
                    frontier.append((j, dset))
                elif isinstance(consumer, nn.Flatten):
                    in_shape = shapes[layers[j - 1].layer_id]
                    if len(in_shape) == 3:
                        spatial = in_shape[1] * in_shape[2]
                        flat = {u * spatial + s for u in dset for s in range(spatial)}
                    else:
                        flat = set(dset)
                    frontier.append((j, frozenset(flat)))
                elif isinstance(consumer, (nn.ReLU, nn.MaxPool, nn.AvgPool,
                                           nn.GlobalAvgPool)):
                    frontier.append((j, dset))
                elif isinstance(consumer, nn.ResidualAdd):
                    # matching channels must die on the other branch too
                    other = model.index_of(consumer.source_id) if at == j - 1 else j - 1
                    for w_idx in _nearest_weighted_producers(model, other):
                        add_dead(w_idx, set(dset))
                    frontier.append((j, dset))
                else:
                    raise UnsupportedTopology(
                        f"cannot propagate channel mask through {consumer.kind}"
                    )
    return keeps


def apply_mask(model: nn.Model, mask: PruneMask) -> nn.Model:
    """Copy of the model with every masked entry set to exactly zero."""
    out = model.copy()
    params = out.parameters()
    for key, keep in mask.param_keeps(out).items():
        params[key][~keep] = 0.0
    return out


# ---------------------------------------------------------------------------
# rankings
# ---------------------------------------------------------------------------

def l1_baseline_rank(layer: nn.Layer) -> np.ndarray:
    """Classical magnitude criterion: per-unit l1 norm of unit weights."""
    if not isinstance(layer, nn.WEIGHTED):
        raise NoWeights(f"layer {layer.layer_id} ({layer.kind}) has no weights")
    w = np.abs(layer.weight.astype(F64))
    return w.reshape(w.shape[0], -1).sum(axis=1)


def _lowest_alive(ranking: np.ndarray, keep: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` lowest-ranked alive units (ties: lower index)."""
    alive_idx = np.where(keep)[0]
    order = alive_idx[np.argsort(ranking[alive_idx], kind="stable")]
    return order[:count]


# ---------------------------------------------------------------------------
# local pruning
# ---------------------------------------------------------------------------

def local_prune(model: nn.Model, layers_to_prune, prune_amount: float,
                importance: ImportanceMap) -> tuple[nn.Model, PruneMask]:
    """Mask the lowest-importance units of the listed layers; no retraining."""
    if not 0.0 <= prune_amount < 1.0:
        raise InvalidAmount(f"prune_amount must be in [0, 1), got {prune_amount}")
    known = {l.layer_id for l in model.layers}
    mask = PruneMask.all_keep(model, "channel", layer_ids=[])
    for lid in layers_to_prune:
        if lid not in known:
            raise UnknownLayer(f"no layer with id {lid}")
        layer = model.layer(lid)
        if not isinstance(layer, nn.WEIGHTED):
            raise NoWeights(f"layer {lid} ({layer.kind}) has no prunable units")
        units = layer.weight.shape[0]
        keep = np.ones(units, dtype=bool)
        k = min(int(np.floor(prune_amount * units)), units - 1)
        if k > 0:
            ranking = np.asarray(importance.per_layer[lid], dtype=F64)
            keep[_lowest_alive(ranking, keep, k)] = False
        mask.keep[lid] = keep
    return apply_mask(model, mask), mask


# ---------------------------------------------------------------------------
# budget allocation
# ---------------------------------------------------------------------------

def allocate_prune_counts(profile: sensitivity.SensitivityProfile,
                          loads: dict[int, float], budget: int,
                          units: dict[int, int],
                          eps_tol: float = EPS_TOL) -> dict[int, int]:
    """Split a unit budget over layers proportionally to tolerance x load,
    where tolerance = max(1 - sensitivity, eps_tol); largest-remainder
    rounding, and no layer may lose its last unit."""
    lids = [lid for lid in units if lid in loads]
    if budget < 0:
        raise ValueError("budget must be >= 0")
    capacity = sum(max(units[lid] - 1, 0) for lid in lids)
    if budget > capacity:
        raise BudgetTooLarge(f"budget {budget} exceeds prunable capacity {capacity}")
    weights = np.array([
        max(1.0 - profile.per_layer.get(lid, 0.0), eps_tol) * loads[lid]
        for lid in lids
    ], dtype=F64)
    if weights.sum() == 0:
        weights[:] = 1.0
    counts = {lid: 0 for lid in lids}
    remaining = budget
    active = list(range(len(lids)))
    while remaining > 0 and active:
        if weights[active].sum() == 0:
            weights[active] = 1.0
        share = weights[active] / weights[active].sum()
        raw = remaining * share
        base = np.floor(raw).astype(int)
        resid = remaining - int(base.sum())
        frac_order = sorted(range(len(active)), key=lambda i: (-(raw[i] - base[i]), lids[active[i]]))
        for i in frac_order[:resid]:
            base[i] += 1
        overflow = 0
        next_active = []
        for i, a in enumerate(active):
            lid = lids[a]
            cap = max(units[lid] - 1, 0) - counts[lid]
            take = min(int(base[i]), cap)
            counts[lid] += take
            overflow += int(base[i]) - take
            if counts[lid] < max(units[lid] - 1, 0):
                next_active.append(a)
        remaining = overflow
        active = next_active
    return counts


# ---------------------------------------------------------------------------
# global pruning
# ---------------------------------------------------------------------------

@dataclass
class PruneObjective:
    criteria: str = "nps"  # "macs" | "nps" | "both"
    max_error: float = 1.0
    max_iterations: int = 3
    per_round_reduction: float = 0.125
    reference: ReferenceSpec = field(default_factory=ReferenceSpec)
    sample_images: int = 256
    per_class_cap: int = 64
    distortion: sensitivity.DistortionSpec = field(
        default_factory=sensitivity.DistortionSpec)
    seed: int = 0

    def __post_init__(self):
        if self.criteria not in ("macs", "nps", "both"):
            raise ValueError(f"criteria must be macs/nps/both, got {self.criteria!r}")
        if not 0.0 < self.per_round_reduction < 1.0:
            raise ValueError("per_round_reduction must be in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    def criteria_for_round(self, iteration: int) -> str:
        if self.criteria != "both":
            return self.criteria
        return "macs" if iteration % 2 == 1 else "nps"


@dataclass
class PruneRow:
    iteration: int
    accuracy: float
    nps: int
    macs: int
    criteria: str
    sparsity: float
    pruned_per_layer: dict[int, int] = field(default_factory=dict)


@dataclass
class PruneReport:
    rows: list[PruneRow]
    mask: PruneMask
    warning: str | None = None

    def to_rows(self) -> list[dict]:
        return [
            {"iteration": r.iteration, "accuracy": r.accuracy, "nps": r.nps,
             "macs": r.macs, "criteria": r.criteria, "sparsity": r.sparsity}
            for r in self.rows
        ]


def _prunable_unit_layers(model: nn.Model) -> list[int]:
    """Weighted layers except the output head (its units are the classes)."""
    weighted = [l.layer_id for l in model.layers if isinstance(l, nn.WEIGHTED)]
    return weighted[:-1]


def _derive_budget(reduction: float, cost, per_layer_count: dict[int, int],
                   weights: dict[int, float], criteria: str) -> int:
    """Unit budget whose weighted allocation removes ~reduction of cost."""
    total = cost.total(criteria)
    per_layer_cost = cost.per_layer(criteria)
    wsum = sum(weights.values()) or 1.0
    cost_per_budget_unit = sum(
        (weights[lid] / wsum) * (per_layer_cost[lid] / max(per_layer_count[lid], 1))
        for lid in weights
    )
    if cost_per_budget_unit <= 0:
        return 0
    return max(1, int(round(reduction * total / cost_per_budget_unit)))


def _attribution_importance(model: nn.Model, train_ds: Dataset,
                            objective: PruneObjective, iteration: int
                            ) -> tuple[ImportanceMap, Dataset]:
    sample = train_ds.take(objective.sample_images,
                           seed=objective.seed + iteration,
                           per_class_cap=objective.per_class_cap)
    attr = deeplift.attribute(model, sample.images, objective.reference,
                              TargetSpec.true_labels(sample.labels),
                              dataset=train_ds)
    return deeplift.importances(attr, "channel"), sample


def global_prune(model: nn.Model, dataset: Split, objective: PruneObjective,
                 train_cfg: train.TrainConfig) -> tuple[nn.Model, PruneReport]:
    """Iterative structured pruning of conv channels and dense neurons.

    Each round: attribute importances, profile sensitivities, weight the
    unit budget by tolerance x cost load for the round's criteria, mask
    the lowest-importance units per layer, fine-tune, evaluate.
    """
    return _global_prune_loop(model, dataset, objective, train_cfg, "channel")


def unstructured_prune(model: nn.Model, dataset: Split, objective: PruneObjective,
                       train_cfg: train.TrainConfig) -> tuple[nn.Model, PruneReport]:
    """Same loop at weight granularity; score = channel importance x |w|."""
    return _global_prune_loop(model, dataset, objective, train_cfg, "weight")


def _weight_scores(layer: nn.Layer, channel_importance: np.ndarray) -> np.ndarray:
    imp = np.asarray(channel_importance, dtype=F64)
    shape = (layer.weight.shape[0],) + (1,) * (layer.weight.ndim - 1)
    return (np.abs(layer.weight.astype(F64)) * imp.reshape(shape)).ravel()


def _global_prune_loop(model: nn.Model, dataset: Split, objective: PruneObjective,
                       train_cfg: train.TrainConfig, granularity: str
                       ) -> tuple[nn.Model, PruneReport]:
    model = model.copy()
    weight_level = granularity == "weight"
    if weight_level:
        lids = [l.layer_id for l in model.layers if isinstance(l, nn.WEIGHTED)]
    else:
        lids = _prunable_unit_layers(model)
    mask = PruneMask.all_keep(model, granularity, layer_ids=lids)

    def costs():
        return profiler.profile_cost(model, masks=mask)

    acc = train.evaluate(model, dataset.test).accuracy
    cost = costs()
    rows = [PruneRow(0, acc, cost.total_nps, cost.total_macs, "baseline",
                     mask.sparsity(model))]
    warning = None

    for it in range(1, objective.max_iterations + 1):
        if 1.0 - acc >= objective.max_error:
            break
        criteria = objective.criteria_for_round(it)
        imp, sample = _attribution_importance(model, dataset.train, objective, it)
        sens = sensitivity.profile(model, objective.distortion, sample, imp)
        cost = costs()
        loads = profiler.load_vector(cost, criteria)
        loads = {lid: loads[lid] for lid in lids}

        alive = {lid: mask.alive(lid) for lid in lids}
        weights = {
            lid: max(1.0 - sens.per_layer.get(lid, 0.0), EPS_TOL) * loads[lid]
            for lid in lids
        }
        budget = _derive_budget(objective.per_round_reduction, cost, alive,
                                weights, criteria)
        budget = min(budget, sum(max(a - 1, 0) for a in alive.values()))
        counts = allocate_prune_counts(sens, loads, budget, alive)

        pruned_now = {}
        for lid, count in counts.items():
            if count <= 0:
                continue
            layer = model.layer(lid)
            if weight_level:
                ranking = _weight_scores(layer, imp.per_layer[lid])
                keep = mask.keep[lid].ravel()
                dead = _lowest_alive(ranking, keep, count)
                keep[dead] = False
            else:
                ranking = np.asarray(imp.per_layer[lid], dtype=F64)
                dead = _lowest_alive(ranking, mask.keep[lid], count)
                mask.keep[lid][dead] = False
            pruned_now[lid] = int(len(dead))
        model = apply_mask(model, mask)

        if train_cfg.epochs > 0:
            try:
                model, _ = train.fine_tune(model, dataset.train, train_cfg, mask)
            except TrainingDiverged as exc:
                model = exc.best_model
                model = apply_mask(model, mask)
                warning = f"fine-tuning diverged at round {it}; kept best checkpoint"
                log.warning(warning)
        acc = train.evaluate(model, dataset.test).accuracy
        cost = costs()
        rows.append(PruneRow(it, acc, cost.total_nps, cost.total_macs, criteria,
                             mask.sparsity(model), pruned_now))
        if warning:
            break
    return model, PruneReport(rows, mask, warning)
