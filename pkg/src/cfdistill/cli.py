"""Command-line entry point.

Commands: prepare, synth, train-teacher, train-student, eval, pilot, bridge.
Every leaf key of the JSON config file has a mirroring kebab-case flag, and
precedence is flag > config file > built-in default. All randomness flows
from a single seed through named streams. Exit codes: 1 usage, 2 data,
3 divergence, 4 I/O.
"""

import argparse
import json
import os
import sys
from dataclasses import fields

from . import data as data_mod
from . import plotting
from .backbone import load_checkpoint
from .diagnostics import BridgeConfig, run_bridge_experiment, run_pilot, summarize_pilot
from .errors import ConfigError, DataError, TrainingDiverged
from .evaluation import evaluate
from .trainer import TrainConfig, train_student, train_teacher

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_TOP_KEYS = _TRAIN_KEYS | {
    "out_dir", "dataset_dir", "features", "teachers", "checkpoint", "split",
    "k", "channels", "interactions", "min_core", "modality", "synth", "bridge",
}
_SYNTH_KEYS = {"n_users", "n_items", "latent_dim", "signal_fractions", "noise_scale",
               "interactions_per_user", "seed", "feature_dims"}
_BRIDGE_KEYS = {"feature_dim", "scales", "lr", "steps", "seed"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_mapping(entries, value_type=str, flag="--features"):
    out = {}
    for entry in entries or []:
        name, sep, value = entry.partition("=")
        if not sep or not name:
            raise ConfigError(f"{flag} expects NAME=VALUE, got {entry!r}")
        out[name] = value_type(value)
    return out


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(cfg) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {sorted(unknown)}")
    for section, keys in (("synth", _SYNTH_KEYS), ("bridge", _BRIDGE_KEYS)):
        extra = set(cfg.get(section, {})) - keys
        if extra:
            raise ConfigError(f"{path}: unknown {section} keys: {sorted(extra)}")
    return cfg


def _pick(args, cfg, key, default=None):
    """Flag > config file > default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    return cfg.get(key, default)


def _train_config(args, cfg) -> TrainConfig:
    kwargs = {}
    for f in fields(TrainConfig):
        value = _pick(args, cfg, f.name, None)
        if value is not None:
            kwargs[f.name] = type(f.default)(value)
    if getattr(args, "no_generic", False):
        kwargs["enable_generic"] = False
    if getattr(args, "no_reweight", False):
        kwargs["enable_reweight"] = False
    config = TrainConfig(**kwargs)
    config.validate()
    return config


def _require(value, name):
    if value is None:
        raise ConfigError(f"missing required setting '{name}' (flag or config file)")
    return value


def _load_dataset_and_features(args, cfg):
    dataset_dir = _require(_pick(args, cfg, "dataset_dir"), "dataset_dir")
    feature_paths = dict(cfg.get("features", {}))
    feature_paths.update(_parse_mapping(getattr(args, "features", None), str, "--features"))
    if not feature_paths:
        raise ConfigError("no modality feature files configured")
    dataset = data_mod.load_dataset_dir(dataset_dir)
    features = data_mod.load_modality_features(feature_paths, n_items=dataset.n_items)
    return dataset, features


def _out_dir(args, cfg):
    out = _require(_pick(args, cfg, "out_dir"), "out_dir")
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_prepare(args):
    cfg = _load_config(args.config)
    interactions_path = _require(_pick(args, cfg, "interactions"), "interactions")
    out_dir = _out_dir(args, cfg)
    min_core = int(_pick(args, cfg, "min_core", 5))
    seed = int(_pick(args, cfg, "seed", 0))
    raw = data_mod.load_interactions(interactions_path)
    filtered = data_mod.five_core_filter(raw, min_core=min_core)
    dataset = data_mod.split(filtered, seed=seed)
    data_mod.write_dataset_dir(out_dir, dataset)
    counts = {name: int(sum(len(x) for x in dataset.split_lists(name))) for name in ("train", "val", "test")}
    total = sum(counts.values())
    summary = {
        "n_users": dataset.n_users,
        "n_items": dataset.n_items,
        "n_interactions": total,
        "density": total / (dataset.n_users * dataset.n_items),
        "splits": counts,
        "min_core": min_core,
        "seed": seed,
    }
    with open(os.path.join(out_dir, "dataset.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_synth(args):
    cfg = _load_config(args.config)
    section = dict(cfg.get("synth", {}))
    for key in ("n_users", "n_items", "latent_dim", "noise_scale", "interactions_per_user"):
        value = getattr(args, key, None)
        if value is not None:
            section[key] = value
    fractions = dict(section.get("signal_fractions", {}))
    fractions.update(_parse_mapping(args.signal_fractions, float, "--signal-fractions"))
    seed = _pick(args, cfg, "seed", section.get("seed"))
    if seed is not None:
        section["seed"] = int(seed)
    for key in ("n_users", "n_items", "latent_dim", "interactions_per_user", "seed"):
        _require(section.get(key), f"synth.{key}")
    if not fractions:
        raise ConfigError("missing required setting 'synth.signal_fractions'")
    config = data_mod.SynthConfig(
        n_users=int(section["n_users"]),
        n_items=int(section["n_items"]),
        latent_dim=int(section["latent_dim"]),
        signal_fractions=fractions,
        noise_scale=float(section.get("noise_scale", 1.0)),
        interactions_per_user=int(section["interactions_per_user"]),
        seed=int(section["seed"]),
        feature_dims={k: int(v) for k, v in section.get("feature_dims", {}).items()} or None,
    )
    out_dir = _out_dir(args, cfg)
    dataset, features = data_mod.synth_generate(config)
    data_mod.write_dataset_dir(out_dir, dataset)
    for m, feats in features.items():
        data_mod.write_feature_file(os.path.join(out_dir, f"features_{m}.txt"), feats.matrix)
    manifest = {
        "n_users": config.n_users,
        "n_items": config.n_items,
        "latent_dim": config.latent_dim,
        "signal_fractions": config.signal_fractions,
        "noise_scale": config.noise_scale,
        "interactions_per_user": config.interactions_per_user,
        "seed": config.seed,
        "feature_dims": config.feature_dims,
        "features": {m: f"features_{m}.txt" for m in features},
    }
    with open(os.path.join(out_dir, "synth.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return 0


def cmd_train_teacher(args):
    cfg = _load_config(args.config)
    config = _train_config(args, cfg)
    modality = _require(_pick(args, cfg, "modality"), "modality")
    dataset, features = _load_dataset_and_features(args, cfg)
    out_dir = _out_dir(args, cfg)
    result = train_teacher(dataset, features, modality, config, out_dir=out_dir)
    plotting.save_training_figure(result.traces, os.path.join(out_dir, "curves.png"), k=config.eval_k)
    best = result.traces[result.best_epoch].val[modality]["recall"]
    print(f"teacher '{modality}': best epoch {result.best_epoch}, "
          f"validation recall@{config.eval_k} {best:.6f}")
    return 0


def cmd_train_student(args):
    cfg = _load_config(args.config)
    config = _train_config(args, cfg)
    dataset, features = _load_dataset_and_features(args, cfg)
    out_dir = _out_dir(args, cfg)
    teacher_paths = dict(cfg.get("teachers", {}))
    teacher_paths.update(_parse_mapping(getattr(args, "teachers", None), str, "--teachers"))
    teachers = {}
    if config.lambda_kd > 0:
        for m in sorted(features):
            if m not in teacher_paths:
                raise ConfigError(f"missing teacher checkpoint for modality '{m}'")
            if not os.path.exists(teacher_paths[m]):
                raise FileNotFoundError(f"teacher checkpoint for modality '{m}' not found: {teacher_paths[m]}")
            teachers[m], _ = load_checkpoint(teacher_paths[m])
    result = train_student(dataset, features, teachers, config, out_dir=out_dir)
    plotting.save_training_figure(result.traces, os.path.join(out_dir, "curves.png"), k=config.eval_k)
    best = result.traces[result.best_epoch].val["full"]["recall"]
    print(f"student: best epoch {result.best_epoch}, validation recall@{config.eval_k} {best:.6f}")
    return 0


def cmd_eval(args):
    cfg = _load_config(args.config)
    checkpoint = _require(_pick(args, cfg, "checkpoint"), "checkpoint")
    split = _pick(args, cfg, "split", "test")
    k = int(_pick(args, cfg, "k", 20))
    dataset, features = _load_dataset_and_features(args, cfg)
    out_dir = _out_dir(args, cfg)
    params, _ = load_checkpoint(checkpoint)
    channels = _pick(args, cfg, "channels", None)
    if isinstance(channels, str):
        channels = [c.strip() for c in channels.split(",") if c.strip()]
    report = evaluate(params, features, dataset, split, k=k, channels=channels)
    payload = json.dumps(report.to_json_dict(), indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        fh.write(payload)
        fh.write("\n")
    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(",".join(report.csv_header()) + "\n")
        fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in report.csv_row()) + "\n")
    plotting.save_metrics_figure(report, os.path.join(out_dir, "metrics.png"))
    print(payload)
    return 0


def cmd_pilot(args):
    cfg = _load_config(args.config)
    config = _train_config(args, cfg)
    dataset, features = _load_dataset_and_features(args, cfg)
    out_dir = _out_dir(args, cfg)
    trace = run_pilot(dataset, features, config)
    with open(os.path.join(out_dir, "pilot.csv"), "w", encoding="utf-8") as fh:
        for row in trace.csv_rows():
            fh.write(",".join(str(v) for v in row) + "\n")
    summary = {"channel_recall_at_best": summarize_pilot(trace), "best_epochs": trace.best_epochs}
    with open(os.path.join(out_dir, "pilot_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    plotting.save_pilot_figure(trace, os.path.join(out_dir, "pilot.png"), k=config.eval_k)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_bridge(args):
    cfg = _load_config(args.config)
    section = dict(cfg.get("bridge", {}))
    scales = dict(section.get("scales", {}))
    scales.update(_parse_mapping(args.scales, float, "--scales"))
    kwargs = {}
    for key in ("feature_dim", "lr", "steps"):
        value = getattr(args, key, None)
        if value is not None:
            section[key] = value
    if scales:
        kwargs["scales"] = scales
    for key, cast in (("feature_dim", int), ("lr", float), ("steps", int)):
        if key in section:
            kwargs[key] = cast(section[key])
    seed = _pick(args, cfg, "seed", section.get("seed"))
    if seed is not None:
        kwargs["seed"] = int(seed)
    config = BridgeConfig(**kwargs)
    out_dir = _out_dir(args, cfg)
    result = run_bridge_experiment(config)
    with open(os.path.join(out_dir, "bridge.csv"), "w", encoding="utf-8") as fh:
        for row in result.csv_rows():
            fh.write(",".join(str(v) for v in row) + "\n")
    mods = result.joint.modalities
    summary = {
        "modalities": mods,
        "scales": {m: config.scales[m] for m in mods},
        "steps": config.steps,
        "final_bridge_joint": float(result.joint.bridge[-1]),
        "final_bridge_solo": {m: float(result.solo[m].bridge[-1]) for m in mods},
        "final_update_norm_joint": {m: float(result.joint.update_norms[m][-1]) for m in mods},
        "final_update_norm_solo": {m: float(result.solo[m].update_norms[m][-1]) for m in mods},
    }
    with open(os.path.join(out_dir, "bridge_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    plotting.save_bridge_figure(result, os.path.join(out_dir, "bridge.png"))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------


def _add_common(parser):
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out-dir", dest="out_dir")


def _add_data_options(parser):
    parser.add_argument("--dataset-dir", dest="dataset_dir")
    parser.add_argument("--features", action="append", metavar="NAME=PATH")


def _add_train_options(parser):
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--l2", dest="l2_coeff", type=float)
    parser.add_argument("--lambda-g", dest="lambda_g", type=float)
    parser.add_argument("--lambda-kd", dest="lambda_kd", type=float)
    parser.add_argument("--tau", type=float)
    parser.add_argument("--dim", type=int)
    parser.add_argument("--max-epochs", dest="max_epochs", type=int)
    parser.add_argument("--patience", type=int)
    parser.add_argument("--eval-k", dest="eval_k", type=int)
    parser.add_argument("--sd-variant", dest="sd_variant", choices=("hinge", "kl", "mse"))
    parser.add_argument("--no-generic", dest="no_generic", action="store_true")
    parser.add_argument("--no-reweight", dest="no_reweight", action="store_true")
    parser.add_argument("--log-causal", dest="log_causal", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cfdistill", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="core-filter and split a raw interactions file")
    _add_common(p)
    p.add_argument("--interactions")
    p.add_argument("--min-core", dest="min_core", type=int)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate a synthetic dataset with controllable modalities")
    _add_common(p)
    p.add_argument("--n-users", dest="n_users", type=int)
    p.add_argument("--n-items", dest="n_items", type=int)
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--noise-scale", dest="noise_scale", type=float)
    p.add_argument("--interactions-per-user", dest="interactions_per_user", type=int)
    p.add_argument("--signal-fractions", dest="signal_fractions", action="append", metavar="NAME=FRACTION")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-teacher", help="train one uni-modal teacher")
    _add_common(p)
    _add_data_options(p)
    _add_train_options(p)
    p.add_argument("--modality")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="train the distilled multimodal student")
    _add_common(p)
    _add_data_options(p)
    _add_train_options(p)
    p.add_argument("--teachers", action="append", metavar="NAME=CKPT")
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_common(p)
    _add_data_options(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("val", "test"))
    p.add_argument("--k", type=int)
    p.add_argument("--channels")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pilot", help="joint-vs-solo imbalance study")
    _add_common(p)
    _add_data_options(p)
    _add_train_options(p)
    p.set_defaults(func=cmd_pilot)

    p = sub.add_parser("bridge", help="shared-gradient suppression experiment")
    _add_common(p)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--scales", action="append", metavar="NAME=SCALE")
    p.set_defaults(func=cmd_bridge)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"cfdistill: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"cfdistill: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"cfdistill: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"cfdistill: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
