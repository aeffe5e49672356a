"""Mixed-precision integer quantization with sensitivity-ordered search.

Weights use symmetric per-tensor grids, activations asymmetric
per-tensor grids calibrated from percentile-clipped ranges; rounding is
half away from zero. Quantization is simulated (quantize-dequantize in
the float engine). The search first reduces all layers together while
protecting the most sensitive ones (coarse), then walks layers in
sensitivity order accepting single-bit reductions that keep the
accuracy drop within a tolerance (fine). Compactness is tracked as
Cumulative Bits: the sum of per-layer bit-widths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn, train
from .data import Dataset, Split
from .errors import EmptyDataset
from .nn import F32, F64

#: scale floor for all-zero tensors
SCALE_EPS = 1e-12

#: dict key for the model input's calibrated range
INPUT_KEY = -1


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with ties away from zero (numpy rounds to even)."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize_tensor(values: np.ndarray, bits: int, scheme: str = "symmetric",
                    lo: float | None = None, hi: float | None = None):
    """Uniform quantization to integers. Returns (q, scale, zero_point).

    symmetric: levels -(2^(b-1)-1) .. 2^(b-1)-1, scale from max|v|.
    asymmetric: levels 0 .. 2^b-1 over [lo, hi] (default: observed range)
    with an integer zero point so 0.0 is exactly representable.
    """
    if not 2 <= bits <= 16:
        raise ValueError(f"bits must be in [2, 16], got {bits}")
    values = np.asarray(values, dtype=F64)
    if not np.all(np.isfinite(values)):
        raise ValueError("values must be finite")
    if scheme == "symmetric":
        qmax = 2 ** (bits - 1) - 1
        scale = max(float(np.max(np.abs(values))) / qmax, SCALE_EPS)
        q = np.clip(round_half_away(values / scale), -qmax, qmax).astype(np.int32)
        return q, scale, 0
    if scheme != "asymmetric":
        raise ValueError(f"unknown scheme {scheme!r}")
    lo = float(values.min()) if lo is None else float(lo)
    hi = float(values.max()) if hi is None else float(hi)
    lo, hi = min(lo, 0.0), max(hi, 0.0)  # keep 0.0 on the grid
    levels = 2 ** bits - 1
    scale = max((hi - lo) / levels, SCALE_EPS)
    zero_point = int(np.clip(round_half_away(np.array(-lo / scale)), 0, levels))
    q = np.clip(round_half_away(values / scale) + zero_point, 0, levels).astype(np.int32)
    return q, scale, zero_point


def dequantize(q: np.ndarray, scale: float, zero_point: int = 0) -> np.ndarray:
    return (q.astype(F64) - zero_point) * scale


def fake_quant(values: np.ndarray, bits: int, scheme: str = "symmetric",
               lo: float | None = None, hi: float | None = None) -> np.ndarray:
    q, scale, zp = quantize_tensor(values, bits, scheme, lo, hi)
    return dequantize(q, scale, zp)


# ---------------------------------------------------------------------------
# activation calibration
# ---------------------------------------------------------------------------

def calibrate_activations(model: nn.Model, sample, percentile: float = 99.9
                          ) -> dict[int, tuple[float, float]]:
    """Percentile-clipped [lo, hi] per layer output plus INPUT_KEY for the
    model input; ReLU layers get lo = 0 exactly."""
    images = sample.images if isinstance(sample, Dataset) else np.asarray(sample)
    if len(images) == 0:
        raise EmptyDataset("activation calibration needs at least one image")
    _, rec = nn.forward_recorded(model, images)
    ranges: dict[int, tuple[float, float]] = {
        INPUT_KEY: _clip_range(images, percentile)
    }
    for layer in model.layers:
        lo, hi = _clip_range(rec.post[layer.layer_id], percentile)
        if isinstance(layer, nn.ReLU):
            lo = 0.0
        ranges[layer.layer_id] = (lo, hi)
    return ranges


def _clip_range(values: np.ndarray, percentile: float) -> tuple[float, float]:
    flat = np.asarray(values, dtype=F64).ravel()
    if percentile >= 100.0:
        lo, hi = float(flat.min()), float(flat.max())
    else:
        lo = float(np.percentile(flat, 100.0 - percentile))
        hi = float(np.percentile(flat, percentile))
    if hi <= lo:  # degenerate constant activation
        eps = max(1e-6, abs(lo) * 1e-6)
        lo, hi = lo - eps, hi + eps
    return lo, hi


# ---------------------------------------------------------------------------
# quantized model evaluation
# ---------------------------------------------------------------------------

@dataclass
class QuantConfig:
    """Per-weighted-layer bit-widths and calibrated activation ranges.

    ``act_ranges[lid]`` is the [lo, hi] range of layer ``lid``'s INPUT;
    each weighted layer fake-quantizes its input activation and its
    weight tensor. ``bit_floors`` pins minimum widths (first/last layer
    default 4); all widths live in [min_bits, start bits].
    """

    weight_bits: dict[int, int]
    act_bits: dict[int, int]
    act_ranges: dict[int, tuple[float, float]]
    calibration_samples: int = 0
    min_bits: int = 2
    bit_floors: dict[int, int] = field(default_factory=dict)

    def copy(self) -> "QuantConfig":
        return QuantConfig(dict(self.weight_bits), dict(self.act_bits),
                           dict(self.act_ranges), self.calibration_samples,
                           self.min_bits, dict(self.bit_floors))

    def floor(self, lid: int) -> int:
        return max(self.bit_floors.get(lid, self.min_bits), self.min_bits)

    @property
    def weight_cb(self) -> int:
        return sum(self.weight_bits.values())

    @property
    def act_cb(self) -> int:
        return sum(self.act_bits.values())

    def to_json(self, model: nn.Model) -> dict:
        layers = {}
        for lid, wb in self.weight_bits.items():
            layer = model.layer(lid)
            _, w_scale, _ = quantize_tensor(layer.weight, wb, "symmetric")
            lo, hi = self.act_ranges[lid]
            _, a_scale, a_zp = quantize_tensor(
                np.zeros(1), self.act_bits[lid], "asymmetric", lo, hi)
            layers[str(lid)] = {
                "weight_bits": wb, "weight_scale": w_scale,
                "act_bits": self.act_bits[lid], "act_scale": a_scale,
                "act_zero_point": a_zp, "act_range": [lo, hi],
            }
        return {
            "layers": layers,
            "weight_cb": self.weight_cb,
            "act_cb": self.act_cb,
            "calibration_samples": self.calibration_samples,
        }


def default_config(model: nn.Model, ranges: dict[int, tuple[float, float]],
                   start_bits: int = 8, min_bits: int = 2,
                   first_last_floor: int = 4,
                   calibration_samples: int = 0) -> QuantConfig:
    """Uniform start-bits config; first/last weighted layers floored."""
    weighted = [l.layer_id for l in model.layers if isinstance(l, nn.WEIGHTED)]
    act_ranges = {}
    prev_key = INPUT_KEY
    for layer in model.layers:
        if isinstance(layer, nn.WEIGHTED):
            act_ranges[layer.layer_id] = ranges[prev_key]
        prev_key = layer.layer_id
    floors = {}
    if weighted and first_last_floor > min_bits:
        floors[weighted[0]] = first_last_floor
        floors[weighted[-1]] = first_last_floor
    return QuantConfig(
        weight_bits={lid: start_bits for lid in weighted},
        act_bits={lid: start_bits for lid in weighted},
        act_ranges=act_ranges,
        calibration_samples=calibration_samples,
        min_bits=min_bits,
        bit_floors=floors,
    )


def apply_weight_quant(model: nn.Model, config: QuantConfig) -> nn.Model:
    """Copy of the model with conv/dense weights quantize-dequantized."""
    out = model.copy()
    for lid, bits in config.weight_bits.items():
        layer = out.layer(lid)
        layer.weight = fake_quant(layer.weight, bits, "symmetric").astype(F32)
    return out


def quantized_forward(model: nn.Model, batch: np.ndarray, config: QuantConfig,
                      _wq_model: nn.Model | None = None) -> np.ndarray:
    """Forward pass with fake-quantized weights and activations."""
    wq = _wq_model if _wq_model is not None else apply_weight_quant(model, config)

    def hook(layer, x):
        lo, hi = config.act_ranges[layer.layer_id]
        return fake_quant(x, config.act_bits[layer.layer_id], "asymmetric", lo, hi)

    return nn.run_layers(wq, np.asarray(batch, dtype=F64), round32=True,
                         act_hook=hook).astype(F32)


def evaluate_quantized(model: nn.Model, config: QuantConfig, dataset: Dataset,
                       batch_size: int = 256) -> float:
    wq = apply_weight_quant(model, config)
    correct = 0
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        logits = quantized_forward(model, dataset.images[sl], config, _wq_model=wq)
        correct += int((logits.argmax(axis=1) == dataset.labels[sl]).sum())
    return correct / len(dataset)


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------

@dataclass
class SearchStep:
    layer_id: int
    which: str          # "weight" | "act" | "coarse"
    bits_before: int
    bits_after: int
    accuracy: float
    accepted: bool


@dataclass
class CBReport:
    weight_cb: int
    act_cb: int
    accuracy: float
    trace: list[SearchStep] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "weight_cb": self.weight_cb,
            "act_cb": self.act_cb,
            "accuracy": self.accuracy,
            "steps": [vars(s) for s in self.trace],
        }


@dataclass
class CoarseTrace:
    entries: list[tuple[QuantConfig, float]]
    model: nn.Model | None = None  # fine-tuned float model, if training ran
    warning: str | None = None

    @property
    def final_config(self) -> QuantConfig:
        return self.entries[-1][0]

    def best_above(self, acc_floor: float) -> QuantConfig:
        """Most compressed config still meeting the accuracy floor."""
        ok = [cfg for cfg, acc in self.entries if acc >= acc_floor]
        return ok[-1] if ok else self.entries[0][0]


def _sensitivity_order(profile, lids: list[int], descending: bool) -> list[int]:
    sens = {lid: profile.per_layer.get(lid, 0.0) for lid in lids}
    return sorted(lids, key=lambda l: (-sens[l] if descending else sens[l], l))


def coarse_search(model: nn.Model, dataset: Split, profile, *,
                  start_bits: int = 8, acc_floor: float = 0.5,
                  protect_frac: float = 0.25, percentile: float = 99.9,
                  calib_images: int = 64, train_cfg: train.TrainConfig | None = None,
                  min_bits: int = 2, first_last_floor: int = 4, seed: int = 0
                  ) -> CoarseTrace:
    """Collective bit reduction: every iteration drops all layers by one
    bit, restores the ceil(protect_frac * L) most sensitive layers, and
    stops when quantized accuracy falls below ``acc_floor`` or all bits
    sit on their floors."""
    calib = dataset.train.take(calib_images, seed=seed)
    ranges = calibrate_activations(model, calib, percentile)
    config = default_config(model, ranges, start_bits, min_bits,
                            first_last_floor, len(calib))
    lids = list(config.weight_bits)
    acc = evaluate_quantized(model, config, dataset.test)
    entries = [(config.copy(), acc)]
    if acc < acc_floor:
        return CoarseTrace(entries, model, warning="acc_floor unreachable at start; no-op")

    n_protect = math.ceil(protect_frac * len(lids))
    if n_protect >= len(lids):
        return CoarseTrace(entries, model, warning="all layers protected; bits unchanged")
    protected = set(_sensitivity_order(profile, lids, descending=True)[:n_protect])

    while True:
        changed = False
        for lid in lids:
            drop = 0 if lid in protected else 1
            for bank in (config.weight_bits, config.act_bits):
                new = max(bank[lid] - drop, config.floor(lid))
                changed |= new != bank[lid]
                bank[lid] = new
        if not changed:
            break
        if train_cfg is not None and train_cfg.epochs > 0:
            model, _ = train.fine_tune(model, dataset.train, train_cfg)
        acc = evaluate_quantized(model, config, dataset.test)
        entries.append((config.copy(), acc))
        if acc < acc_floor:
            break
    return CoarseTrace(entries, model)


def fine_search(model: nn.Model, dataset: Split, profile, config: QuantConfig,
                per_step_tol: float = 0.002) -> tuple[QuantConfig, CBReport]:
    """Per-layer single-bit reductions in ascending sensitivity order;
    a reduction is kept when the accuracy drop stays within
    ``per_step_tol``. Stops after a full pass with no change."""
    config = config.copy()
    order = _sensitivity_order(profile, list(config.weight_bits), descending=False)
    acc = evaluate_quantized(model, config, dataset.test)
    trace: list[SearchStep] = []
    while True:
        any_change = False
        for lid in order:
            for which, bank in (("weight", config.weight_bits), ("act", config.act_bits)):
                old = bank[lid]
                new = max(old - 1, config.floor(lid))
                if new == old:
                    continue
                bank[lid] = new
                cand_acc = evaluate_quantized(model, config, dataset.test)
                accepted = (acc - cand_acc) <= per_step_tol
                trace.append(SearchStep(lid, which, old, new, cand_acc, accepted))
                if accepted:
                    acc = cand_acc
                    any_change = True
                else:
                    bank[lid] = old
        if not any_change:
            break
    report = CBReport(config.weight_cb, config.act_cb, acc, trace)
    return config, report
