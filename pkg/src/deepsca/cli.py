"""Command-line interface: ``deepsca {synth,convert,train,attack,cpa,cgv,info}``.

Every command reads an optional JSON config (``--config``); command-line
flags take precedence over file values. Each run writes ``run.json`` with the
resolved config, and ``deepsca CMD --config run.json`` repeats the run.

Exit codes: 0 success, 2 usage or config error, 3 runtime/numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import h5py
import numpy as np

from . import __version__
from .traces import DatasetError

log = logging.getLogger("deepsca")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config plumbing


def _read_config(path, command=None):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"--config: cannot read {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("--config: top-level JSON value must be an object")
    if "command" in data and "config" in data:
        if command is not None and data["command"] != command:
            raise ConfigError(f"--config is a run record for '{data['command']}', not '{command}'")
        return dict(data["config"])
    return data


def _resolve(args, defaults, flag_keys):
    cfg = dict(defaults)
    file_cfg = _read_config(args.config, args.command)
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
    cfg.update(file_cfg)
    for key in flag_keys:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def data_path(path):
    """Resolve a dataset path, falling back to ``$DEEPSCA_DATA_DIR``."""
    if path is None:
        raise ConfigError("data: no dataset path given")
    p = Path(path)
    if not p.exists() and not p.is_absolute() and os.environ.get("DEEPSCA_DATA_DIR"):
        alt = Path(os.environ["DEEPSCA_DATA_DIR"]) / p
        if alt.exists():
            return alt
    if not p.exists():
        raise ConfigError(f"data: file not found: {path}")
    return p


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run(out, command, cfg, inputs, seeds):
    record = {
        "command": command,
        "config": cfg,
        "seeds": seeds,
        "dataset_hashes": {str(p): file_hash(p) for p in inputs},
        "tool_version": __version__,
    }
    with open(Path(out) / "run.json", "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _outdir(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_traces(path, group=None):
    """Canonical container, or one group of an ASCAD-layout file."""
    from .traces import load_ascad_hdf5, load_canonical

    path = data_path(path)
    with h5py.File(path, "r") as f:
        canonical = "schema_version" in f.attrs
    if canonical:
        return load_canonical(path)
    return load_ascad_hdf5(path, group or "Attack_traces")


def _leakage(cfg, fallback=None):
    from .presets import dataset_preset
    from .traces import LeakageModelSpec

    if cfg.get("leakage_model"):
        return LeakageModelSpec.from_dict(cfg["leakage_model"])
    if cfg.get("preset"):
        return dataset_preset(cfg["preset"]).leakage_model
    if fallback is not None:
        return LeakageModelSpec.from_dict(fallback)
    return LeakageModelSpec.sbox(1)


def _set_determinism(enabled):
    if enabled:
        import torch

        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    from .aes import HW_TABLE
    from .traces import SynthConfig, compute_labels, estimate_snr, save_canonical, synthesize

    defaults = SynthConfig().to_dict()
    defaults["out"] = "synth_out"
    cfg = _resolve(args, defaults, ["seed", "out", "n_traces", "n_samples", "snr", "desync_max", "masked",
                                    "leak_positions"])
    synth_cfg = SynthConfig.from_dict({k: v for k, v in cfg.items() if k != "out"})
    try:
        synth_cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ts = synthesize(synth_cfg)
    out = _outdir(cfg)
    path = out / "traces.h5"
    save_canonical(ts, path)
    lm = synth_cfg.leakage_model
    value = compute_labels(ts, lm)
    if synth_cfg.masked:
        value = value ^ ts.masks[:, lm.key_byte]
    classes = HW_TABLE[value]
    snr = estimate_snr(ts.samples[:, list(synth_cfg.leak_positions)], classes)
    _write_run(out, "synth", cfg, [], {"seed": synth_cfg.seed})
    print(f"wrote {path}: N={ts.n_traces} D={ts.n_samples}")
    for t, s in zip(synth_cfg.leak_positions, snr):
        print(f"leak position {t}: estimated SNR {s:.4g} (target {synth_cfg.snr})")
    return EXIT_OK


def cmd_convert(args):
    from .convert import convert, parse_key
    from .traces import save_canonical

    defaults = {"format": None, "input": None, "key": None, "group": None, "out": "convert_out"}
    cfg = _resolve(args, defaults, ["format", "input", "key", "group", "out"])
    if not cfg["format"] or not cfg["input"]:
        raise ConfigError("convert needs --format and --input")
    inputs = [data_path(p) for p in cfg["input"]]
    key = parse_key(cfg["key"]) if cfg["key"] else None
    ts = convert(cfg["format"], inputs, key=key, group=cfg["group"])
    out = _outdir(cfg)
    save_canonical(ts, out / "traces.h5")
    _write_run(out, "convert", cfg, inputs, {})
    print(f"wrote {out / 'traces.h5'}: N={ts.n_traces} D={ts.n_samples}")
    return EXIT_OK


def _train_defaults():
    return {
        "data": None,
        "data_format": "canonical",
        "preset": None,
        "network": {},
        "training": {},
        "leakage_model": None,
        "n_profiling": None,
        "n_attack": None,
        "split_seed": 0,
        "standardize": True,
        "seed": None,
        "deterministic": True,
        "out": "train_out",
    }


def cmd_train(args):
    from .engine import TrainingConfig, save_checkpoint, train, write_history_csv
    from .netspec import NetworkConfig, build_attention_network
    from .presets import dataset_preset
    from .traces import (apply_standardizer, compute_labels, fit_standardizer, load_ascad_hdf5,
                         save_canonical, split_profiling_attack)

    cfg = _resolve(args, _train_defaults(), ["data", "preset", "seed", "out"])
    cfg["network"] = dict(cfg["network"])
    cfg["training"] = dict(cfg["training"])
    for key in ("epochs", "batch_size"):
        if getattr(args, key) is not None:
            cfg["training"][key] = getattr(args, key)
    if args.deterministic:
        cfg["deterministic"] = True
    path = data_path(cfg["data"])

    preset = dataset_preset(cfg["preset"]) if cfg["preset"] else None
    net_dict = preset.network.to_dict() if preset else {}
    net_dict.update(cfg["network"])
    train_dict = preset.training.to_dict() if preset else {}
    train_dict.update(cfg["training"])
    if cfg["seed"] is not None:
        train_dict["seed"] = int(cfg["seed"])
    train_dict["deterministic"] = bool(cfg["deterministic"])
    lm = _leakage(cfg)

    if cfg["data_format"] == "ascad":
        profiling = load_ascad_hdf5(path, "Profiling_traces")
        attack = load_ascad_hdf5(path, "Attack_traces")
    else:
        ts = load_traces(path)
        n_prof = cfg["n_profiling"] or (preset.n_profiling if preset else None)
        n_att = cfg["n_attack"] or (preset.n_attack if preset else None)
        if n_prof is None or n_att is None:
            raise ConfigError("n_profiling/n_attack: set them or choose a preset")
        try:
            profiling, attack = split_profiling_attack(ts, int(n_prof), int(n_att), int(cfg["split_seed"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    net_dict.setdefault("input_length", profiling.n_samples)
    try:
        net_cfg = NetworkConfig.from_dict(net_dict).validate()
        train_cfg = TrainingConfig.from_dict(train_dict).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if net_cfg.input_length != profiling.n_samples:
        raise ConfigError(f"input_length {net_cfg.input_length} does not match dataset D={profiling.n_samples}")

    if args.dry_run:
        out = _outdir(cfg)
        _write_run(out, "train", cfg, [path], {"seed": train_cfg.seed, "split_seed": cfg["split_seed"]})
        print(json.dumps({"network": net_cfg.to_dict(), "training": train_cfg.to_dict(),
                          "leakage_model": lm.to_dict()}, indent=2, sort_keys=True))
        return EXIT_OK

    standardizer = fit_standardizer(profiling) if cfg["standardize"] else None
    if standardizer is not None:
        prof_in = apply_standardizer(standardizer, profiling)
    else:
        prof_in = profiling
    labels = compute_labels(profiling, lm)
    _set_determinism(train_cfg.deterministic)
    graph = build_attention_network(net_cfg, seed=train_cfg.seed)
    provenance = {"preset": cfg["preset"], "leakage_model": lm.to_dict(), "data": str(path)}
    model = train(graph, prof_in, labels, train_cfg, provenance=provenance,
                  progress=lambda row: print(f"epoch {row['epoch']}: loss {row['loss']:.4f} acc {row['accuracy']:.4f}"))
    model.standardizer = standardizer

    out = _outdir(cfg)
    save_checkpoint(out / "model.h5", model)
    write_history_csv(out / "history.csv", model.history)
    save_canonical(attack, out / "attack_set.h5")
    _write_run(out, "train", cfg, [path], {"seed": train_cfg.seed, "split_seed": cfg["split_seed"]})
    print(f"wrote {out / 'model.h5'}, {out / 'history.csv'}, {out / 'attack_set.h5'}")
    return EXIT_OK


def cmd_attack(args):
    from .attack import average_rank_curve, required_traces
    from .engine import load_checkpoint
    from .plotting import plot_rank_curve

    defaults = {"model": None, "probs": None, "data": None, "group": None, "leakage_model": None, "preset": None,
                "repeats": 300, "max_traces": None, "threshold": "zero", "seed": 0, "deterministic": True,
                "out": "attack_out"}
    cfg = _resolve(args, defaults, ["model", "probs", "data", "preset", "repeats", "max_traces", "threshold",
                                    "seed", "out"])
    if cfg["threshold"] not in ("zero", "below1"):
        raise ConfigError("threshold must be 'zero' or 'below1'")
    ts = load_traces(cfg["data"], cfg["group"])
    inputs = [data_path(cfg["data"])]
    fallback = None
    if cfg["probs"]:
        probs = np.load(data_path(cfg["probs"]))
        inputs.append(data_path(cfg["probs"]))
        if probs.shape != (ts.n_traces, 256):
            raise ConfigError(f"probs: expected shape ({ts.n_traces}, 256), got {probs.shape}")
        model_or_probs = probs
    elif cfg["model"]:
        model = load_checkpoint(data_path(cfg["model"]))
        inputs.append(data_path(cfg["model"]))
        if model.config.input_length != ts.n_samples:
            raise ConfigError(
                f"model input_length {model.config.input_length} does not match trace length {ts.n_samples}")
        fallback = model.provenance.get("leakage_model")
        _set_determinism(cfg["deterministic"])
        from .engine import predict_proba

        model_or_probs = predict_proba(model, model.preprocess(ts))
    else:
        raise ConfigError("attack needs --model or --probs")
    lm = _leakage(cfg, fallback)
    n_max = int(cfg["max_traces"] or ts.n_traces)
    if n_max > ts.n_traces:
        raise ConfigError(f"max_traces {n_max} exceeds the {ts.n_traces} attack traces")
    if not ts.has_fixed_key:
        raise ConfigError("data: attack set must have a single fixed key")
    curve = average_rank_curve(model_or_probs, ts, lm, n_max, repeats=int(cfg["repeats"]), seed=int(cfg["seed"]))
    out = _outdir(cfg)
    curve.to_csv(out / "rank_curve.csv")
    plot_rank_curve(curve, out / "rank_curve.svg", threshold=cfg["threshold"])
    needed = required_traces(curve, cfg["threshold"])
    report = {"required_traces": needed, "threshold": cfg["threshold"], "repeats": int(cfg["repeats"]),
              "max_traces": n_max, "final_mean_rank": float(curve.mean_rank[-1]), "leakage_model": lm.to_dict()}
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_run(out, "attack", cfg, inputs, {"seed": int(cfg["seed"])})
    label = "rank = 0" if cfg["threshold"] == "zero" else "rank < 1"
    print(f"required traces ({label}): {needed if needed is not None else 'not reached'}")
    return EXIT_OK


def cmd_cpa(args):
    from .analysis import cpa
    from .plotting import plot_cpa

    defaults = {"data": None, "group": None, "leakage_model": None, "preset": None, "out": "cpa_out"}
    cfg = _resolve(args, defaults, ["data", "preset", "out"])
    ts = load_traces(cfg["data"], cfg["group"])
    lm = _leakage(cfg)
    try:
        res = cpa(ts, lm)
    except (ValueError, DatasetError) as exc:
        raise ConfigError(str(exc)) from exc
    out = _outdir(cfg)
    res.to_csv(out / "cpa.csv")
    plot_cpa(res, out / "cpa.svg")
    report = {"description": res.description, "known_key": res.known_key,
              "constant_hypotheses": res.constant_hypotheses}
    if res.known_key is not None:
        row = np.abs(res.known_key_row)
        report["peak_sample"] = int(row.argmax())
        report["peak_corr"] = float(res.known_key_row[row.argmax()])
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_run(out, "cpa", cfg, [data_path(cfg["data"])], {})
    if "peak_sample" in report:
        print(f"known-key correlation peak at sample {report['peak_sample']}: {report['peak_corr']:.4f}")
    return EXIT_OK


def cmd_cgv(args):
    from .analysis import cgv_aggregate, cpa
    from .engine import load_checkpoint
    from .plotting import plot_weight_map
    from .traces import compute_labels

    defaults = {"model": None, "data": None, "group": None, "class_policy": "predicted", "max_traces": None,
                "with_cpa": True, "leakage_model": None, "preset": None, "deterministic": True, "out": "cgv_out"}
    cfg = _resolve(args, defaults, ["model", "data", "class_policy", "max_traces", "out"])
    if not cfg["model"]:
        raise ConfigError("cgv needs --model")
    model = load_checkpoint(data_path(cfg["model"]))
    ts = load_traces(cfg["data"], cfg["group"])
    if model.config.input_length != ts.n_samples:
        raise ConfigError(f"model input_length {model.config.input_length} does not match trace length {ts.n_samples}")
    if cfg["max_traces"]:
        ts = ts.subset(np.arange(min(int(cfg["max_traces"]), ts.n_traces)))
    lm = _leakage(cfg, model.provenance.get("leakage_model"))
    policy = cfg["class_policy"]
    if isinstance(policy, str) and policy.isdigit():
        policy = int(policy)
    labels = compute_labels(ts, lm) if policy == "true" else None
    _set_determinism(cfg["deterministic"])
    wm = cgv_aggregate(model, model.preprocess(ts), policy, labels=labels)
    res = None
    if cfg["with_cpa"] and ts.n_traces >= 3:
        try:
            res = cpa(ts, lm)
        except DatasetError:
            res = None
    out = _outdir(cfg)
    wm.to_csv(out / "cgv.csv")
    plot_weight_map(wm, out / "cgv.svg", trace=ts.samples.mean(axis=0), cpa=res)
    report = {"argmax_sample": int(wm.expanded.argmax()), "coarse_length": int(len(wm.coarse)),
              "length": int(len(wm.expanded)), "count": wm.count, "class_policy": wm.target_class}
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_run(out, "cgv", cfg, [data_path(cfg["data"]), data_path(cfg["model"])], {})
    print(f"weight map argmax at sample {report['argmax_sample']} over {wm.count} traces")
    return EXIT_OK


def cmd_info(args):
    from .engine import load_checkpoint
    from .presets import dataset_preset

    if args.preset:
        print(json.dumps(dataset_preset(args.preset).to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    if args.model:
        m = load_checkpoint(data_path(args.model))
        print(json.dumps({"network": m.config.to_dict(), "training": m.training.to_dict(),
                          "epochs_trained": len(m.history), "provenance": m.provenance}, indent=2, sort_keys=True))
        return EXIT_OK
    if args.data:
        path = data_path(args.data)
        with h5py.File(path, "r") as f:
            canonical = "schema_version" in f.attrs
        if canonical:
            ts = load_traces(path)
            info = {"format": "canonical", "n_traces": ts.n_traces, "n_samples": ts.n_samples,
                    "fields": [n for n in ("plaintexts", "ciphertexts", "masks") if getattr(ts, n) is not None],
                    "fixed_key": ts.fixed_key.tobytes().hex() if ts.has_fixed_key else None,
                    "source_tag": ts.source_tag}
        else:
            from .traces import ascad_fields

            info = {"format": "ascad", "groups": {}}
            for g in ("Profiling_traces", "Attack_traces"):
                try:
                    info["groups"][g] = ascad_fields(path, g)
                except DatasetError as exc:
                    info["groups"][g] = {"error": str(exc)}
        print(json.dumps(info, indent=2, sort_keys=True))
        return EXIT_OK
    raise ConfigError("info needs --data, --model or --preset")


# ---------------------------------------------------------------------------


def _positions(text):
    return [int(t) for t in text.split(",") if t.strip()]


def build_parser():
    p = argparse.ArgumentParser(prog="deepsca", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--deterministic", action="store_true", default=None)
        if out:
            sp.add_argument("--out", metavar="DIR")
        return sp

    s = common(sub.add_parser("synth", help="generate a synthetic trace set"))
    s.add_argument("--seed", type=int)
    s.add_argument("--n-traces", dest="n_traces", type=int)
    s.add_argument("--n-samples", dest="n_samples", type=int)
    s.add_argument("--snr", type=float)
    s.add_argument("--desync-max", dest="desync_max", type=int)
    s.add_argument("--masked", action="store_true", default=None)
    s.add_argument("--leak-positions", dest="leak_positions", type=_positions)

    c = common(sub.add_parser("convert", help="import a raw public dataset"))
    c.add_argument("--format")
    c.add_argument("--input", nargs="+")
    c.add_argument("--key", help="16-byte key as hex")
    c.add_argument("--group")

    t = common(sub.add_parser("train", help="train the attention network"))
    t.add_argument("--data")
    t.add_argument("--preset")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--dry-run", dest="dry_run", action="store_true", help="resolve and print the config, no training")

    a = common(sub.add_parser("attack", help="average rank curve on an attack set"))
    a.add_argument("--model")
    a.add_argument("--probs", help=".npy matrix of N x 256 probabilities instead of a model")
    a.add_argument("--data")
    a.add_argument("--preset")
    a.add_argument("--repeats", type=int)
    a.add_argument("--max-traces", dest="max_traces", type=int)
    a.add_argument("--threshold", choices=["zero", "below1"])
    a.add_argument("--seed", type=int)

    k = common(sub.add_parser("cpa", help="correlation power analysis"))
    k.add_argument("--data")
    k.add_argument("--preset")

    g = common(sub.add_parser("cgv", help="class gradient visualization"))
    g.add_argument("--model")
    g.add_argument("--data")
    g.add_argument("--class-policy", dest="class_policy")
    g.add_argument("--max-traces", dest="max_traces", type=int)

    i = sub.add_parser("info", help="describe a dataset, checkpoint or preset")
    i.add_argument("--data")
    i.add_argument("--model")
    i.add_argument("--preset")
    return p


COMMANDS = {"synth": cmd_synth, "convert": cmd_convert, "train": cmd_train, "attack": cmd_attack,
            "cpa": cmd_cpa, "cgv": cmd_cgv, "info": cmd_info}


def main(argv=None):
    from .engine import TrainingDivergedError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
