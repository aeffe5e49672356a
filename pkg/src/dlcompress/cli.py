"""Command-line front end: dataset ingestion, pipeline orchestration,
and plot-ready exports.

One JSON config per run; every module knob is reachable from it and the
resolved config round-trips through ``--print-config``. Each run writes
its artifacts plus a manifest (config, content hashes, metrics) into
the output directory; all randomness flows from the config seed.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import (data, deeplift, intquant, models, nn, profiler, prune,
               reporting, sensitivity, serialize, train, weight_sharing)
from .errors import CompressError, error_code

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out_dir": "run_out",
    "dataset": {
        "kind": "fixture",            # "fixture" | "idx"
        "class_count": 4,
        "images_per_class": 80,
        "image_size": [1, 10, 10],
        "separation": 1.6,
        "noise": 1.0,
        "test_fraction": 0.25,
        "images_path": None,          # idx only
        "labels_path": None,
    },
    "model": {
        "path": None,                 # load instead of building
        "arch": "fixture_cnn",
        "width": 8,
    },
    "train": {
        "epochs": 30,
        "lr_start": 0.01,
        "lr_end": 0.001,
        "batch_size": 32,
        "momentum": 0.9,
    },
    "attribution": {
        "reference": "zero",          # zero | training_mean | blurred | noisy
        "sigma": 1.0,
        "sample_count": 512,
        "target": "true_label",       # true_label | fixed_class | all_classes
        "target_class": 0,
    },
    "sensitivity": {
        "distortion": "prune_fraction",
        "rho": 0.5,
        "bits": 4,
        "sample_images": 256,
        "probe_layer": None,
        "top_fraction": 0.5,
    },
    "prune": {
        "criteria": "nps",            # macs | nps | both
        "rounds": 3,
        "per_round_reduction": 0.125,
        "max_error": 1.0,
        "granularity": "channel",     # channel | weight
        "sample_images": 256,
        "fine_tune_epochs": 20,
    },
    "quantize_ws": {
        "bits": 3,
        "criteria": "dwmse",          # dwmse | mse
        "recalibrate_bn": False,
    },
    "quantize_int": {
        "start_bits": 8,
        "acc_floor": 0.5,
        "protect_frac": 0.25,
        "per_step_tol": 0.002,
        "percentile": 99.9,
        "min_bits": 2,
        "first_last_floor": 4,
        "fine_tune_epochs": 0,
    },
    "profile": {
        "count_residual_adds": False,
    },
}

COMMANDS = ("train", "attribute", "sensitivity", "prune", "quantize-ws",
            "quantize-int", "profile", "report")


class ConfigError(CompressError):
    pass


def merge_config(base: dict, override: dict, path: str = "") -> dict:
    """Deep-merge override into base, rejecting unknown keys."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = merge_config(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(config_path: str | None, overrides: dict) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_path:
        with open(config_path) as f:
            cfg = merge_config(cfg, json.load(f))
    return merge_config(cfg, overrides)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# shared setup
# ---------------------------------------------------------------------------

def build_dataset(cfg: dict) -> data.Split:
    d = cfg["dataset"]
    if d["kind"] == "fixture":
        spec = data.FixtureSpec(
            class_count=d["class_count"], images_per_class=d["images_per_class"],
            image_size=tuple(d["image_size"]), separation=d["separation"],
            noise=d["noise"], seed=cfg["seed"],
        )
        ds = data.make_fixture_dataset(spec)
    elif d["kind"] == "idx":
        ds = data.load_idx(d["images_path"], d["labels_path"])
    else:
        raise ConfigError(f"unknown dataset kind {d['kind']!r}")
    return data.split(ds, d["test_fraction"], seed=cfg["seed"])


def build_or_load_model(cfg: dict, ds: data.Split) -> nn.Model:
    m = cfg["model"]
    if m["path"]:
        return serialize.load_model(m["path"])
    if m["arch"] != "fixture_cnn":
        raise ConfigError(f"unknown arch {m['arch']!r}")
    return models.fixture_cnn(seed=cfg["seed"],
                              input_shape=ds.train.input_shape,
                              class_count=ds.train.class_count,
                              width=m["width"])


def train_config(cfg: dict, epochs: int | None = None) -> train.TrainConfig:
    t = cfg["train"]
    return train.TrainConfig(
        epochs=t["epochs"] if epochs is None else epochs,
        lr_start=t["lr_start"], lr_end=t["lr_end"],
        batch_size=t["batch_size"], momentum=t["momentum"], seed=cfg["seed"],
    )


def reference_spec(cfg: dict) -> deeplift.ReferenceSpec:
    a = cfg["attribution"]
    return deeplift.ReferenceSpec(kind=a["reference"], sigma=a["sigma"],
                                  sample_count=a["sample_count"], seed=cfg["seed"])


def attribution_sample(cfg: dict, ds: data.Split) -> data.Dataset:
    return ds.train.take(cfg["attribution"]["sample_count"], seed=cfg["seed"])


def compute_importance(cfg: dict, model: nn.Model, ds: data.Split):
    sample = attribution_sample(cfg, ds)
    a = cfg["attribution"]
    if a["target"] == "true_label":
        target = deeplift.TargetSpec.true_labels(sample.labels)
    elif a["target"] == "fixed_class":
        target = deeplift.TargetSpec.fixed_class(a["target_class"])
    else:
        target = deeplift.TargetSpec.all_classes()
    attr = deeplift.attribute(model, sample.images, reference_spec(cfg),
                              target, dataset=ds.train)
    return attr, deeplift.importances(attr, "channel"), sample


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cfg: dict, out: "Outputs") -> dict:
    ds = build_dataset(cfg)
    model = build_or_load_model(cfg, ds)
    tuned, losses = train.fine_tune(model, ds.train, train_config(cfg))
    res_train = train.evaluate(tuned, ds.train)
    res_test = train.evaluate(tuned, ds.test)
    out.save_model("model.dnet", tuned)
    out.write_json("train_losses.json", {"per_epoch_loss": losses})
    return {"train_accuracy": res_train.accuracy, "test_accuracy": res_test.accuracy,
            "final_loss": losses[-1] if losses else None}


def cmd_attribute(cfg: dict, out: "Outputs") -> dict:
    ds = build_dataset(cfg)
    model = build_or_load_model(cfg, ds)
    attr, _imp, _sample = compute_importance(cfg, model, ds)
    out.write_json("attribution.json", deeplift.attribution_to_json(attr))
    gap = attr.completeness_gap()
    return {"samples": int(len(attr.delta_t)),
            "max_completeness_gap": float(gap.max())}


def cmd_sensitivity(cfg: dict, out: "Outputs") -> dict:
    ds = build_dataset(cfg)
    model = build_or_load_model(cfg, ds)
    s = cfg["sensitivity"]
    _attr, imp, _ = compute_importance(cfg, model, ds)
    sample = ds.train.take(s["sample_images"], seed=cfg["seed"])
    distortion = sensitivity.DistortionSpec(kind=s["distortion"], rho=s["rho"],
                                            bits=s["bits"])
    prof = sensitivity.profile(model, distortion, sample, imp,
                               probe_layer_id=s["probe_layer"],
                               top_fraction=s["top_fraction"])
    out.write_json("sensitivity.json", prof.to_json())
    stats = sensitivity.separability(model, prof.probe_layer_id, sample, imp,
                                     s["top_fraction"])
    out.write_csv("distance_distributions.csv",
                  sensitivity.distributions_csv_rows(stats))
    return {"probe_layer": prof.probe_layer_id,
            "baseline_separability": stats.score,
            "sensitivities": prof.per_layer}


def cmd_prune(cfg: dict, out: "Outputs") -> dict:
    ds = build_dataset(cfg)
    model = build_or_load_model(cfg, ds)
    p = cfg["prune"]
    objective = prune.PruneObjective(
        criteria=p["criteria"], max_error=p["max_error"],
        max_iterations=p["rounds"],
        per_round_reduction=p["per_round_reduction"],
        reference=reference_spec(cfg), sample_images=p["sample_images"],
        seed=cfg["seed"],
    )
    tcfg = train_config(cfg, epochs=p["fine_tune_epochs"])
    runner = prune.unstructured_prune if p["granularity"] == "weight" else prune.global_prune
    pruned, report = runner(model, ds, objective, tcfg)
    out.save_model("pruned_model.dnet", pruned)
    out.write_json("masks.json", report.mask.to_json())
    anchor = "unstructured_pruning" if p["granularity"] == "weight" else "structured_pruning"
    out.write_csv("prune_report.csv", report.to_rows(), anchor_kind=anchor)
    last = report.rows[-1]
    return {"rounds": len(report.rows) - 1, "final_accuracy": last.accuracy,
            "final_nps": last.nps, "final_macs": last.macs,
            "final_sparsity": last.sparsity, "warning": report.warning}


def cmd_quantize_ws(cfg: dict, out: "Outputs") -> dict:
    ds = build_dataset(cfg)
    model = build_or_load_model(cfg, ds)
    q = cfg["quantize_ws"]
    importance = None
    if q["criteria"] == "dwmse":
        _, importance, _ = compute_importance(cfg, model, ds)
    quantized, codebooks, report = weight_sharing.quantize_weight_sharing(
        model, q["bits"], criteria=q["criteria"], dataset=ds.test,
        recalibrate_bn=q["recalibrate_bn"], importance=importance,
        seed=cfg["seed"],
    )
    out.save_model("quantized_model.dnet", quantized)
    out.write_json("codebooks.json",
                   {str(lid): cb.to_json() for lid, cb in codebooks.items()})
    for lid, cb in codebooks.items():
        out.write_bytes(f"assignments_{lid}.bin", cb.packed_assignments())
    out.write_csv("ws_report.csv", [{
        "bits": q["bits"], "criteria": q["criteria"],
        "recalibrated_bn": report.recalibrated_bn,
        "accuracy_before": report.accuracy_before,
        "accuracy": report.accuracy_after,
    }])
    return {"accuracy_before": report.accuracy_before,
            "accuracy_after": report.accuracy_after}


def cmd_quantize_int(cfg: dict, out: "Outputs") -> dict:
    ds = build_dataset(cfg)
    model = build_or_load_model(cfg, ds)
    q = cfg["quantize_int"]
    s = cfg["sensitivity"]
    _, imp, sample = compute_importance(cfg, model, ds)
    distortion = sensitivity.DistortionSpec(kind="quantize_bits", bits=s["bits"])
    prof = sensitivity.profile(model, distortion, sample, imp)
    tcfg = (train_config(cfg, epochs=q["fine_tune_epochs"])
            if q["fine_tune_epochs"] else None)
    trace = intquant.coarse_search(
        model, ds, prof, start_bits=q["start_bits"], acc_floor=q["acc_floor"],
        protect_frac=q["protect_frac"], percentile=q["percentile"],
        train_cfg=tcfg, min_bits=q["min_bits"],
        first_last_floor=q["first_last_floor"], seed=cfg["seed"],
    )
    base = trace.model if trace.model is not None else model
    config, report = intquant.fine_search(base, ds, prof,
                                          trace.best_above(q["acc_floor"]),
                                          per_step_tol=q["per_step_tol"])
    out.write_json("quant_config.json", config.to_json(base),
                   anchor_kind="mixed_precision")
    rows = [{"stage": "coarse", "iteration": i, "weight_cb": c.weight_cb,
             "act_cb": c.act_cb, "bits": c.weight_cb + c.act_cb, "accuracy": acc}
            for i, (c, acc) in enumerate(trace.entries)]
    rows.append({"stage": "fine", "iteration": len(trace.entries),
                 "weight_cb": report.weight_cb, "act_cb": report.act_cb,
                 "bits": report.weight_cb + report.act_cb,
                 "accuracy": report.accuracy})
    out.write_csv("cb_report.csv", rows, anchor_kind="mixed_precision")
    return {"weight_cb": report.weight_cb, "act_cb": report.act_cb,
            "accuracy": report.accuracy, "warning": trace.warning}


def cmd_profile(cfg: dict, out: "Outputs") -> dict:
    ds = build_dataset(cfg)
    model = build_or_load_model(cfg, ds)
    prof = profiler.profile_cost(
        model, count_residual_adds=cfg["profile"]["count_residual_adds"])
    out.write_csv("cost_profile.csv", profiler.profile_rows(prof, model))
    return {"total_macs": prof.total_macs, "total_nps": prof.total_nps,
            "total_flops": profiler.FLOPS_PER_MAC * prof.total_macs}


def cmd_report(cfg: dict, out: "Outputs", report_paths: list[str]) -> dict:
    reports = {}
    for item in report_paths:
        label, _, path = item.partition("=")
        if not path:
            raise ConfigError(f"--reports needs label=path, got {item!r}")
        reports[label] = reporting.read_csv(path)
    written = reporting.export_curves(reports, out.out_dir)
    for path in written:
        out.register(path)
    return {"curves": [os.path.basename(p) for p in written]}


# ---------------------------------------------------------------------------
# output bookkeeping
# ---------------------------------------------------------------------------

class Outputs:
    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.paths: list[str] = []
        os.makedirs(out_dir, exist_ok=True)

    def _path(self, name: str) -> str:
        path = os.path.join(self.out_dir, name)
        self.paths.append(path)
        return path

    def register(self, path: str) -> None:
        self.paths.append(path)

    def save_model(self, name: str, model: nn.Model) -> None:
        serialize.save_model(model, self._path(name))

    def write_json(self, name: str, payload: dict, anchor_kind=None) -> None:
        reporting.write_json(self._path(name), payload, anchor_kind)

    def write_csv(self, name: str, rows, anchor_kind=None) -> None:
        reporting.write_csv(self._path(name), rows, anchor_kind)

    def write_bytes(self, name: str, blob: bytes) -> None:
        with open(self._path(name), "wb") as f:
            f.write(blob)

    def hashes(self) -> dict[str, str]:
        return {os.path.relpath(p, self.out_dir): sha256_file(p)
                for p in self.paths}


def _input_hashes(cfg: dict) -> dict[str, str]:
    out = {}
    for path in (cfg["model"]["path"], cfg["dataset"]["images_path"],
                 cfg["dataset"]["labels_path"]):
        if path and os.path.exists(path):
            out[path] = sha256_file(path)
    return out


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dlcompress",
        description="attribution-guided pruning and quantization pipelines",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out-dir", help="artifact directory")
        p.add_argument("--print-config", action="store_true",
                       help="print the resolved config and exit")
        p.add_argument("--model", help="model file (overrides config)")
        if name == "prune":
            p.add_argument("--criteria", choices=["macs", "nps", "both"])
            p.add_argument("--rounds", type=int)
            p.add_argument("--granularity", choices=["channel", "weight"])
        if name == "quantize-ws":
            p.add_argument("--bits", type=int)
            p.add_argument("--criteria", choices=["dwmse", "mse"])
            p.add_argument("--recalibrate-bn", action="store_true", default=None)
        if name == "quantize-int":
            p.add_argument("--acc-floor", type=float)
        if name == "report":
            p.add_argument("--reports", nargs="+", default=[],
                           help="label=path pairs of report CSVs")
    return parser


def _overrides_from_args(args) -> dict:
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out_dir is not None:
        over["out_dir"] = args.out_dir
    if args.model is not None:
        over.setdefault("model", {})["path"] = args.model
    cmd = args.command
    if cmd == "prune":
        block = {k: getattr(args, k) for k in ("criteria", "rounds", "granularity")
                 if getattr(args, k, None) is not None}
        if "rounds" in block:
            block["rounds"] = int(block["rounds"])
        if block:
            over["prune"] = block
    if cmd == "quantize-ws":
        block = {}
        if args.bits is not None:
            block["bits"] = args.bits
        if args.criteria is not None:
            block["criteria"] = args.criteria
        if args.recalibrate_bn is not None:
            block["recalibrate_bn"] = args.recalibrate_bn
        if block:
            over["quantize_ws"] = block
    if cmd == "quantize-int" and args.acc_floor is not None:
        over["quantize_int"] = {"acc_floor": args.acc_floor}
    return over


def run(command: str, cfg: dict, report_paths: list[str] | None = None) -> dict:
    """Execute one pipeline; returns the metrics dict (also in the manifest)."""
    out = Outputs(cfg["out_dir"])
    started = time.time()
    handlers = {
        "train": cmd_train, "attribute": cmd_attribute,
        "sensitivity": cmd_sensitivity, "prune": cmd_prune,
        "quantize-ws": cmd_quantize_ws, "quantize-int": cmd_quantize_int,
        "profile": cmd_profile,
    }
    if command == "report":
        metrics = cmd_report(cfg, out, report_paths or [])
    else:
        metrics = handlers[command](cfg, out)
    manifest = {
        "command": command,
        "config": cfg,
        "input_hashes": _input_hashes(cfg),
        "output_hashes": out.hashes(),
        "metrics": metrics,
        "timestamp": started,
    }
    reporting.write_json(os.path.join(cfg["out_dir"], "manifest.json"), manifest)
    return metrics


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides_from_args(args))
        if args.print_config:
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return 0
        metrics = run(args.command, cfg, getattr(args, "reports", None))
    except CompressError as exc:
        payload = {"error": {"code": error_code(exc), "message": str(exc)}}
        print(json.dumps(payload), file=sys.stderr)
        return 1
    print(json.dumps({"metrics": metrics}, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
