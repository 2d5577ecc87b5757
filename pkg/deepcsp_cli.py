#!/usr/bin/env python3
import argparse
import hashlib
import json
import logging
import os
import signal
import sys
from typing import Any, Dict, List, Optional

from deepcsp_config import get_config_value, read_config_file

from deepcsp import run_training
from deepcsp.connectivity import ESTIMATORS, connectivity_matrix, graph_normalize, write_graph_csv, write_graph_sidecar
from deepcsp.csp import bank_from_json, bank_to_json
from deepcsp.data import (
    EpochSet,
    SynthSpec,
    read_channel_positions,
    read_epochs,
    standard_positions,
    synth_generate,
    write_epochs,
)
from deepcsp.models import VARIANTS, electrode_filters, extract_latents, load_checkpoint, save_checkpoint
from deepcsp.reports import append_jsonl, build_summary, metrics_record, write_json
from deepcsp.signal import DEFAULT_BAND_HIGH, DEFAULT_BAND_LOW
from deepcsp.training import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS,
    DEFAULT_LR_CLASSIFIER,
    DEFAULT_LR_FEATURE,
    DEFAULT_PATIENCE,
    TrainConfig,
    evaluate,
    export_scatter,
    export_topomap,
    preprocess,
    write_scatter_csv,
)


# ----------------------------
# Config defaults
# ----------------------------

DEFAULT_SEED = int(get_config_value("seed", os.getenv("DEEPCSP_SEED", "42")))
DEFAULT_COMPONENTS = int(get_config_value("train.n_components", os.getenv("DEEPCSP_COMPONENTS", "4")))

SYNTH_DEFAULTS: Dict[str, Any] = {
    "channels": 15,
    "samples": 512,
    "fs": 128.0,
    "trials": 100,
    "noise": 0.1,
    "mixing": "orthonormal",
    "band_low": 8.0,
    "band_high": 30.0,
    "seed": DEFAULT_SEED,
}

TRAIN_DEFAULTS: Dict[str, Any] = {
    "input": None,
    "model": "shallow-deepcsp",
    "components": DEFAULT_COMPONENTS,
    "lr_feature": DEFAULT_LR_FEATURE,
    "lr_classifier": DEFAULT_LR_CLASSIFIER,
    "batch_size": DEFAULT_BATCH_SIZE,
    "epochs": DEFAULT_EPOCHS,
    "patience": DEFAULT_PATIENCE,
    "validation": 0.2,
    "holdout": 0.0,
    "estimator": "plv",
    "band_low": DEFAULT_BAND_LOW,
    "band_high": DEFAULT_BAND_HIGH,
    "threshold": 0.0,
    "self_loops": False,
    "preprocess": False,
    "seed": DEFAULT_SEED,
}

EVAL_DEFAULTS: Dict[str, Any] = {"input": None, "checkpoint": None, "filters": None, "seed": DEFAULT_SEED}

CONNECTIVITY_DEFAULTS: Dict[str, Any] = {
    "input": None,
    "method": "plv",
    "band_low": DEFAULT_BAND_LOW,
    "band_high": DEFAULT_BAND_HIGH,
    "threshold": 0.0,
    "self_loops": False,
    "seed": DEFAULT_SEED,
}

EXPORT_DEFAULTS: Dict[str, Any] = {
    "input": None,
    "checkpoint": None,
    "filters": None,
    "components": 2,
    "positions": None,
    "seed": DEFAULT_SEED,
}

COMMAND_DEFAULTS = {
    "synth": SYNTH_DEFAULTS,
    "train": TRAIN_DEFAULTS,
    "csp": dict(TRAIN_DEFAULTS, model="csp"),
    "eval": EVAL_DEFAULTS,
    "connectivity": CONNECTIVITY_DEFAULTS,
    "export": EXPORT_DEFAULTS,
}

REQUIRED_PATHS = {
    "train": ("input",),
    "csp": ("input",),
    "eval": ("input", "checkpoint", "filters"),
    "connectivity": ("input",),
    "export": ("input", "checkpoint", "filters"),
}


# ----------------------------
# Globals
# ----------------------------

STOP_REQUESTED = False


def _handle_signal(signum, frame):
    global STOP_REQUESTED
    STOP_REQUESTED = True


def _install_signal_handlers() -> Dict[int, Any]:
    previous = {}
    for signum in (signal.SIGTERM, signal.SIGINT):
        previous[signum] = signal.signal(signum, _handle_signal)
    return previous


# ----------------------------
# Helpers
# ----------------------------

def resolve_config(args: argparse.Namespace) -> Dict[str, Any]:
    """Flag > --config file > config module / environment > built-in default."""
    file_values = read_config_file(args.config) if args.config else {}
    resolved: Dict[str, Any] = {"command": args.command}
    for key, default in COMMAND_DEFAULTS[args.command].items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in file_values:
            resolved[key] = file_values[key]
        else:
            resolved[key] = default
    resolved["out"] = args.out
    return resolved


def _file_sha1(path: str) -> str:
    digest = hashlib.sha1()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _prepare_out(config: Dict[str, Any]) -> str:
    out = config["out"]
    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, "config.json"), config)
    return out


def _band(config: Dict[str, Any]):
    return float(config["band_low"]), float(config["band_high"])


def _load_filters(path: str):
    with open(path, "r", encoding="utf-8") as handle:
        doc = json.load(handle)
    band = doc.get("preprocess_band")
    return bank_from_json(doc), None if band is None else (float(band[0]), float(band[1]))


def _load_model(config: Dict[str, Any], epochs: EpochSet):
    params = load_checkpoint(config["checkpoint"])
    bank, preprocess_band = _load_filters(config["filters"])
    if bank.n_channels != params.config.latent_channels:
        raise RuntimeError(
            f"{config['filters']}: filter bank has {bank.n_channels} rows but {config['checkpoint']} "
            f"produces {params.config.latent_channels} latent channels"
        )
    if epochs.n_channels != params.config.n_channels:
        raise RuntimeError(
            f"{config['input']}: {epochs.n_channels} channels but {config['checkpoint']} "
            f"expects {params.config.n_channels}"
        )
    return params, bank, preprocess_band


# ----------------------------
# Commands
# ----------------------------

def cmd_synth(config: Dict[str, Any]) -> int:
    trials = int(config["trials"])
    if trials < 2:
        raise ValueError(f"--trials must be at least 2, got {trials}")
    spec = SynthSpec(
        n_channels=int(config["channels"]),
        n_samples=int(config["samples"]),
        fs=float(config["fs"]),
        trials_per_class=trials // 2,
        mixing_kind=str(config["mixing"]),
        noise=float(config["noise"]),
        band=_band(config),
        seed=int(config["seed"]),
    )
    epochs, truth = synth_generate(spec)
    out = _prepare_out(config)
    path = os.path.join(out, "epochs.eege")
    write_epochs(path, epochs)
    write_json(os.path.join(out, "truth.json"), {
        "mixing": truth.mixing.tolist(),
        "unmixing": truth.unmixing.tolist(),
        "profiles": truth.profiles.tolist(),
    })
    write_json(os.path.join(out, "summary.json"), build_summary(
        "synth", {"trials": epochs.n_trials, "channels": epochs.n_channels, "samples": epochs.n_samples,
                  "fs": epochs.fs, "sha1": _file_sha1(path)},
        [truth.issues],
    ))
    logging.info("synth wrote %s trials=%s", path, epochs.n_trials)
    return 0


def cmd_train(config: Dict[str, Any]) -> int:
    epochs = read_epochs(config["input"])
    band = _band(config)
    train_config = TrainConfig(
        variant=str(config["model"]),
        lr_feature=float(config["lr_feature"]),
        lr_classifier=float(config["lr_classifier"]),
        n_components=int(config["components"]),
        batch_size=int(config["batch_size"]),
        epochs=int(config["epochs"]),
        seed=int(config["seed"]),
        early_stop_patience=int(config["patience"]),
        validation_fraction=float(config["validation"]),
        band=band,
        estimator=str(config["estimator"]),
        threshold=float(config["threshold"]),
        self_loops=bool(config["self_loops"]),
        preprocess_band=band if config["preprocess"] else None,
    )
    out = _prepare_out(config)
    metrics_path = os.path.join(out, "metrics.jsonl")
    if os.path.exists(metrics_path):
        os.remove(metrics_path)

    outcome = run_training(
        epochs,
        train_config,
        holdout=float(config["holdout"]),
        on_epoch=lambda metrics: append_jsonl(metrics_path, metrics_record(metrics)),
        stop_requested=lambda: STOP_REQUESTED,
    )
    result = outcome["result"]

    save_checkpoint(os.path.join(out, "model.dcsp"), result.params)
    filters_doc = bank_to_json(result.bank)
    filters_doc["preprocess_band"] = None if train_config.preprocess_band is None else list(train_config.preprocess_band)
    write_json(os.path.join(out, "filters.json"), filters_doc)

    if result.graph is not None:
        write_graph_csv(os.path.join(out, "graph.csv"), result.graph.adjacency, epochs.channel_names)
        write_graph_sidecar(os.path.join(out, "graph.json"), result.graph)

    data: Dict[str, Any] = {
        "model": train_config.variant,
        "epochs_run": len(result.history) - 1,
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
        "interrupted": result.interrupted,
        "train_accuracy": outcome["best"].accuracy,
        "val_accuracy": outcome["best"].val_accuracy,
        "train_trials": outcome["train_trials"],
        "test_trials": outcome["test_trials"],
        "filters_sha1": result.bank.checksum(),
        "params_sha1": result.params.checksum(),
        "elapsed_seconds": outcome["elapsed_seconds"],
    }
    if outcome["test"] is not None:
        data["test"] = metrics_record(outcome["test"])
    write_json(os.path.join(out, "summary.json"), build_summary(config["command"], data, [result.issues]))
    logging.info("%s finished best_epoch=%s train_accuracy=%.4f", config["command"], result.best_epoch,
                 outcome["best"].accuracy)
    return 0


def cmd_eval(config: Dict[str, Any]) -> int:
    epochs = read_epochs(config["input"])
    params, bank, preprocess_band = _load_model(config, epochs)
    metrics = evaluate(params, bank, epochs, preprocess_band)
    out = _prepare_out(config)
    write_json(os.path.join(out, "summary.json"), build_summary("eval", {"metrics": metrics_record(metrics)}))
    logging.info("eval accuracy=%.4f trials=%s", metrics.accuracy, epochs.n_trials)
    return 0


def cmd_connectivity(config: Dict[str, Any]) -> int:
    epochs = read_epochs(config["input"])
    graph = connectivity_matrix(epochs, str(config["method"]), _band(config))
    normalized = graph_normalize(graph, self_loops=bool(config["self_loops"]), threshold=float(config["threshold"]))
    out = _prepare_out(config)
    write_graph_csv(os.path.join(out, "graph.csv"), graph.adjacency, epochs.channel_names)
    write_graph_csv(os.path.join(out, "graph_normalized.csv"), normalized, epochs.channel_names)
    write_graph_sidecar(os.path.join(out, "graph.json"), graph)
    write_json(os.path.join(out, "summary.json"), build_summary(
        "connectivity",
        {"estimator": graph.estimator, "directed": graph.directed, "trials_used": graph.trials_used,
         "clamped": graph.clamped, "sha1": graph.checksum()},
        [graph.issues],
    ))
    return 0


def cmd_export(config: Dict[str, Any]) -> int:
    epochs = read_epochs(config["input"])
    params, bank, preprocess_band = _load_model(config, epochs)

    if config["positions"]:
        positions = read_channel_positions(config["positions"])
    elif epochs.channel_positions is not None:
        positions = {name: list(coords) for name, coords in zip(epochs.channel_names, epochs.channel_positions)}
    else:
        positions = standard_positions(epochs.channel_names)

    latents = extract_latents(params, preprocess(epochs, preprocess_band).trials)
    rows = export_scatter(latents, epochs.labels, bank, n=int(config["components"]))
    components = export_topomap(electrode_filters(params, bank), epochs.channel_names, positions, bank.eigenvalues)

    out = _prepare_out(config)
    write_scatter_csv(os.path.join(out, "scatter.csv"), rows)
    write_json(os.path.join(out, "topomap.json"), {"components": components})
    logging.info("export rows=%s components=%s", len(rows), len(components))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "csp": cmd_train,
    "eval": cmd_eval,
    "connectivity": cmd_connectivity,
    "export": cmd_export,
}


# ----------------------------
# Argument parsing
# ----------------------------

def _common(sub: argparse.ArgumentParser):
    sub.add_argument("--out", required=True, help="Output directory (required)")
    sub.add_argument("--config", default=None, help="JSON run config; explicit flags override its values")
    sub.add_argument("--seed", type=int, default=None, help=f"Random seed (default: {DEFAULT_SEED})")


def _train_flags(sub: argparse.ArgumentParser, model_choice: bool):
    sub.add_argument("--input", default=None, help="EEGE epochs file")
    if model_choice:
        sub.add_argument("--model", choices=VARIANTS, default=None, help="Model variant (default: shallow-deepcsp)")
    sub.add_argument("--components", type=int, default=None,
                     help=f"Filters per end of the spectrum, n (default: {DEFAULT_COMPONENTS})")
    sub.add_argument("--lr-feature", type=float, default=None,
                     help=f"Feature extractor learning rate (default: {DEFAULT_LR_FEATURE})")
    sub.add_argument("--lr-classifier", type=float, default=None,
                     help=f"Classifier learning rate (default: {DEFAULT_LR_CLASSIFIER})")
    sub.add_argument("--batch-size", type=int, default=None, help=f"Classifier minibatch (default: {DEFAULT_BATCH_SIZE})")
    sub.add_argument("--epochs", type=int, default=None, help=f"Maximum epochs (default: {DEFAULT_EPOCHS})")
    sub.add_argument("--patience", type=int, default=None,
                     help=f"Early stopping patience, 0 disables (default: {DEFAULT_PATIENCE})")
    sub.add_argument("--validation", type=float, default=None, help="Validation fraction (default: 0.2)")
    sub.add_argument("--holdout", type=float, default=None, help="Held-out test fraction (default: 0)")
    sub.add_argument("--estimator", choices=ESTIMATORS, default=None, help="Graph estimator for shallow-gcn (default: plv)")
    sub.add_argument("--band-low", type=float, default=None, help=f"Band low edge in Hz (default: {DEFAULT_BAND_LOW})")
    sub.add_argument("--band-high", type=float, default=None, help=f"Band high edge in Hz (default: {DEFAULT_BAND_HIGH})")
    sub.add_argument("--threshold", type=float, default=None, help="Graph edge threshold (default: 0)")
    sub.add_argument("--self-loops", action="store_true", default=None, help="Keep self loops in the graph")
    sub.add_argument("--preprocess", action="store_true", default=None, help="Band-pass trials before training")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="DeepCSP motor-imagery EEG toolkit")
    parser.add_argument(
        "--log-level",
        default=os.getenv("DEEPCSP_LOG_LEVEL", "INFO"),
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="Generate a planted-pattern synthetic epochs file")
    _common(synth)
    synth.add_argument("--d", dest="channels", type=int, default=None, help="Channels (default: 15)")
    synth.add_argument("--t", dest="samples", type=int, default=None, help="Samples per trial (default: 512)")
    synth.add_argument("--fs", type=float, default=None, help="Sampling rate in Hz (default: 128)")
    synth.add_argument("--trials", type=int, default=None, help="Total trials, split evenly over classes (default: 100)")
    synth.add_argument("--noise", type=float, default=None, help="Sensor noise sigma (default: 0.1)")
    synth.add_argument("--mixing", choices=["orthonormal", "identity"], default=None,
                       help="Planted mixing matrix (default: orthonormal)")
    synth.add_argument("--band-low", type=float, default=None, help="Source band low edge (default: 8)")
    synth.add_argument("--band-high", type=float, default=None, help="Source band high edge (default: 30)")

    train = commands.add_parser("train", help="Train a Shallow DeepCSP or Shallow GCN model")
    _common(train)
    _train_flags(train, model_choice=True)

    csp = commands.add_parser("csp", help="Classical CSP + two-layer classifier baseline")
    _common(csp)
    _train_flags(csp, model_choice=False)

    evaluate_cmd = commands.add_parser("eval", help="Evaluate a checkpoint on an epochs file")
    _common(evaluate_cmd)
    evaluate_cmd.add_argument("--input", default=None, help="EEGE epochs file")
    evaluate_cmd.add_argument("--checkpoint", default=None, help="model.dcsp from train")
    evaluate_cmd.add_argument("--filters", default=None, help="filters.json from train")

    connectivity = commands.add_parser("connectivity", help="Estimate the electrode connectivity graph")
    _common(connectivity)
    connectivity.add_argument("--input", default=None, help="EEGE epochs file")
    connectivity.add_argument("--method", choices=ESTIMATORS, default=None, help="Estimator (default: plv)")
    connectivity.add_argument("--band-low", type=float, default=None, help=f"Band low edge (default: {DEFAULT_BAND_LOW})")
    connectivity.add_argument("--band-high", type=float, default=None, help=f"Band high edge (default: {DEFAULT_BAND_HIGH})")
    connectivity.add_argument("--threshold", type=float, default=None, help="Edge threshold before normalizing (default: 0)")
    connectivity.add_argument("--self-loops", action="store_true", default=None, help="Keep self loops")

    export = commands.add_parser("export", help="Export scatter CSV and topomap JSON")
    _common(export)
    export.add_argument("--input", default=None, help="EEGE epochs file")
    export.add_argument("--checkpoint", default=None, help="model.dcsp from train")
    export.add_argument("--filters", default=None, help="filters.json from train")
    export.add_argument("--components", type=int, default=None, help="Scatter components (default: 2)")
    export.add_argument("--positions", default=None, help="JSON sidecar {channel: [x, y]}")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stdout,
    )

    if args.config and not os.path.exists(args.config):
        parser.error(f"config file not found: {args.config}")
    config = resolve_config(args)
    missing = [key for key in REQUIRED_PATHS.get(args.command, ()) if not config.get(key)]
    if missing:
        parser.error(f"{args.command} needs --{' --'.join(missing)}")

    previous = _install_signal_handlers()
    try:
        return COMMANDS[args.command](config)
    except (ValueError, KeyError, RuntimeError, OSError) as exc:
        logging.exception("%s failed: %s", args.command, exc)
        return 1
    finally:
        for signum, handler in previous.items():
            signal.signal(signum, handler)


if __name__ == "__main__":
    raise SystemExit(main())
