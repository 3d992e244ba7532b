"""Command-line pipeline: synth, extract, train, finetune, evaluate, det, embed."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path


from . import datasets as ds
from . import evaluation as ev
from . import training as tr
from .features import SENSOR_FLAGS, FeatureError
from .model import PRESETS, BehaveFormer, BehaveFormerConfig, ModelConfigError, StdatConfig
from .numerics import NonFiniteError, ShapeError
from .plotting import plot_det, plot_history

log = logging.getLogger("behaveformer")

COMMANDS = ("synth", "extract", "train", "finetune", "evaluate", "det", "embed")


class UsageError(ValueError):
    pass


def parse_modalities(text: str) -> tuple[str, ...]:
    """'K,A,G,M' -> IMU sensor names; keystrokes are always required."""
    flags = [f.strip().upper() for f in text.replace("+", ",").split(",") if f.strip()]
    if "K" not in flags:
        raise UsageError("modalities must include K (keystroke)")
    unknown = set(flags) - {"K", *SENSOR_FLAGS}
    if unknown:
        raise UsageError(f"unknown modality flags {sorted(unknown)}")
    return tuple(SENSOR_FLAGS[f] for f in "AGM" if f in flags)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, seed, config: dict, artifacts: list[Path]) -> None:
    manifest = {
        "command": command,
        "seed": seed,
        "config_digest": _digest(config),
        "config": config,
        "artifacts": {p.name: _sha256(p) for p in sorted(artifacts)},
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# model configuration


def build_model_config(fs: ds.FeatureSet, overrides: dict, seed: int) -> BehaveFormerConfig:
    """Dataset-style defaults for the feature store's shapes, then user overrides."""
    name = overrides.get("preset") or (
        "humidb" if fs.key_schema == "humidb-keystroke" else "hmog" if fs.imu is not None else "aalto"
    )
    preset = PRESETS[name]
    key_kw = {**preset["keystroke"], **overrides.get("keystroke", {})}
    key = StdatConfig(seq_len=fs.keystroke.shape[1], channels=fs.keystroke.shape[2], **key_kw)
    imu = None
    if fs.imu is not None:
        imu_kw = {**PRESETS["hmog"]["imu"], **overrides.get("imu", {})}
        imu = StdatConfig(seq_len=fs.imu.shape[1], channels=fs.imu.shape[2], **imu_kw)
    return BehaveFormerConfig(key, imu, overrides.get("fusion_dim", 64), seed, tuple(fs.sensors))


def _train_config(cfg: dict, args) -> tr.TrainConfig:
    kw = dict(cfg.get("train", {}))
    for name in ("epochs", "seed", "lr"):
        if getattr(args, name, None) is not None:
            kw[name] = getattr(args, name)
    return tr.TrainConfig(**kw)


def _select_modalities(fs: ds.FeatureSet, text: str | None) -> ds.FeatureSet:
    if text is None:
        return fs
    return fs.with_sensors(parse_modalities(text))


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    out = _out_dir(args.out)
    sensors = parse_modalities(args.modalities)
    corpus = ds.synthesize(args.users, args.sessions, args.theta, args.seed, args.keystrokes, sensors)
    manifest = ds.write_corpus(corpus, out)
    arts = [manifest, out / "keystrokes.csv"] + ([out / "imu.csv"] if sensors else [])
    cfg = {k: getattr(args, k) for k in ("users", "sessions", "theta", "seed", "keystrokes", "modalities")}
    _write_manifest(out, "synth", args.seed, cfg, arts)
    print(f"wrote {len(corpus)} sessions for {len(corpus.users)} users to {out}")
    return 0


def cmd_extract(args) -> int:
    out = _out_dir(args.out)
    corpus = ds.ingest(args.corpus)
    sensors = parse_modalities(args.modalities) if args.modalities else None
    fs = ds.build_feature_set(corpus, args.window, args.schema, sensors)
    ds.save_features(fs, out)
    arts = [out / n for n in ("features.json", "index.csv", "keystroke.csv")] + ([out / "imu.csv"] if fs.imu is not None else [])
    cfg = {"corpus": str(args.corpus), "schema": fs.key_schema, "window": args.window, "sensors": list(fs.sensors),
           "dropped": corpus.dropped}
    _write_manifest(out, "extract", None, cfg, arts)
    print(f"extracted {len(fs)} sequences ({fs.key_schema}, sensors={list(fs.sensors)}) to {out}")
    return 0


def _split(fs: ds.FeatureSet, cfg: dict, seed: int):
    users = fs.users_list
    spec = cfg.get("split")
    if spec is None:
        n_val = max(2, len(users) // 5)
        n_test = max(2, len(users) // 5)
        spec = {"train": len(users) - n_val - n_test, "test": n_test, "validation": n_val}
    spec = ds.SplitSpec(spec["train"], spec["test"], spec["validation"], spec.get("seed", seed))
    return ds.split_users(users, spec)


def cmd_train(args) -> int:
    out = _out_dir(args.out)
    cfg = _load_config(args.config)
    if args.modalities:
        cfg["modalities"] = args.modalities
    fs = _select_modalities(ds.load_features(args.features), cfg.get("modalities"))
    tcfg = _train_config(cfg, args)
    train_users, test_users, val_users = _split(fs, cfg, tcfg.seed)
    normalizers = ds.fit_normalizers(fs.for_users(train_users))
    nfs = ds.normalize(fs, normalizers)
    mcfg = build_model_config(fs, cfg.get("model", {}), tcfg.seed)
    ckpt, history = tr.train(BehaveFormer(mcfg), nfs.for_users(train_users), nfs.for_users(val_users), tcfg, normalizers)
    return _write_training_outputs(out, "train", ckpt, history, tcfg, cfg,
                                   {"train": train_users, "test": test_users, "validation": val_users})


def _write_training_outputs(out, command, ckpt, history, tcfg, cfg, splits) -> int:
    ds.save_checkpoint(ckpt, out / "checkpoint.bhf")
    (out / "history.csv").write_text(history.to_csv(), encoding="utf-8")
    ds.write_split_manifest(out / "splits.csv", splits)
    arts = [out / "checkpoint.bhf", out / "history.csv", out / "splits.csv"]
    if history.rows:
        arts.append(plot_history(history.rows, out / "history.svg"))
    _write_manifest(out, command, tcfg.seed, {"config": cfg, "train": tcfg.to_dict(), "model": ckpt.model_config}, arts)
    last = history.rows[-1] if history.rows else (0, float("nan"), float("nan"))
    print(f"{command}: {len(history.rows)} epochs, last loss {last[1]:.4f}, val EER {last[2]:.4f}; checkpoint {out / 'checkpoint.bhf'}")
    return 0


def _features_for_checkpoint(ckpt: ds.Checkpoint, path: str) -> ds.FeatureSet:
    fs = ds.load_features(path)
    sensors = tuple(ckpt.model_config.get("imu_sensors", ()))
    fs = fs.with_sensors(sensors)
    return ds.normalize(fs, ckpt.normalizers)


def cmd_finetune(args) -> int:
    out = _out_dir(args.out)
    cfg = _load_config(args.config)
    ckpt = ds.load_checkpoint(args.checkpoint)
    fs = _features_for_checkpoint(ckpt, args.features)
    tcfg = _train_config(cfg, args)
    train_users, test_users, val_users = _split(fs, cfg, tcfg.seed)
    freeze = [f for f in (args.freeze or "").split(",") if f]
    new, history = tr.fine_tune(ckpt, fs.for_users(train_users), fs.for_users(val_users), tcfg, freeze)
    cfg["freeze"] = freeze
    return _write_training_outputs(out, "finetune", new, history, tcfg, cfg,
                                   {"train": train_users, "test": test_users, "validation": val_users})


def _restrict(fs: ds.FeatureSet, args) -> ds.FeatureSet:
    if not args.split_manifest:
        return fs
    users = ds.read_split_manifest(args.split_manifest).get(args.split, [])
    if not users:
        raise UsageError(f"split {args.split!r} is empty in {args.split_manifest}")
    return fs.for_users(users)


def _write_scores(path: Path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["claimed", "source", "session", "timestamp", "score", "label"])
        for r in records:
            w.writerow([r.claimed, r.source, r.session, repr(r.timestamp), repr(r.score), "genuine" if r.genuine else "impostor"])


def _read_scores(path: str) -> list[ev.ScoreRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                rec = ev.ScoreRecord(row["claimed"], row["source"], row["session"], float(row["timestamp"]), float(row["score"]))
            except (KeyError, TypeError, ValueError):
                raise UsageError(f"{path}:{lineno}: malformed score row") from None
            out.append(rec)
    if not out:
        raise UsageError(f"{path}: no scores")
    return out


def _write_det(out: Path, curve: ev.DetCurve, label: str) -> list[Path]:
    with open(out / "det.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "far", "frr"])
        for t, a, r in curve.rows():
            w.writerow([repr(t), repr(a), repr(r)])
    return [out / "det.csv", plot_det([(label, curve)], out / "det.svg")]


def cmd_evaluate(args) -> int:
    out = _out_dir(args.out)
    ckpt = ds.load_checkpoint(args.checkpoint)
    model = tr.model_from_checkpoint(ckpt)
    fs = _restrict(_features_for_checkpoint(ckpt, args.features), args)
    tr.check_compatible(model, fs)
    report = ev.evaluate(tr.embed(model, fs), fs.users, fs.sessions, fs.timestamps, args.enroll)
    metrics = report.as_dict()
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_scores(out / "scores.csv", report.scores)
    arts = [out / "metrics.json", out / "scores.csv"] + _write_det(out, report.det, "BehaveFormer")
    _write_manifest(out, "evaluate", None, {"checkpoint_digest": _sha256(Path(args.checkpoint)), "enroll": args.enroll,
                                            "split": args.split if args.split_manifest else "all"}, arts)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_det(args) -> int:
    out = _out_dir(args.out)
    records = _read_scores(args.scores)
    curve = ev.compute_det([r.score for r in records if r.genuine], [r.score for r in records if not r.genuine])
    arts = _write_det(out, curve, Path(args.scores).stem)
    _write_manifest(out, "det", None, {"scores": _sha256(Path(args.scores))}, arts)
    print(f"EER {curve.eer:.6f} at threshold {curve.eer_threshold:.6f}")
    return 0


def cmd_embed(args) -> int:
    out = _out_dir(args.out)
    ckpt = ds.load_checkpoint(args.checkpoint)
    model = tr.model_from_checkpoint(ckpt)
    fs = _features_for_checkpoint(ckpt, args.features)
    tr.check_compatible(model, fs)
    emb = tr.embed(model, fs)
    path = out / "embeddings.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "session", "t_end"] + [f"e{j}" for j in range(emb.shape[1])])
        for i in range(len(fs)):
            w.writerow([fs.users[i], fs.sessions[i], repr(float(fs.timestamps[i]))] + [repr(float(v)) for v in emb[i]])
    _write_manifest(out, "embed", None, {"checkpoint_digest": _sha256(Path(args.checkpoint))}, [path])
    print(f"wrote {len(fs)} embeddings to {path}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="behaveformer", description="Keystroke + IMU continuous authentication pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--users", type=int, default=8)
    s.add_argument("--sessions", type=int, default=4)
    s.add_argument("--theta", type=float, default=8.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--keystrokes", type=int, default=100, help="keystrokes per session")
    s.add_argument("--modalities", default="K,A,G,M")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract", help="extract fixed-shape feature sequences from a corpus")
    s.add_argument("--corpus", required=True, help="corpus manifest (JSON)")
    s.add_argument("--schema", choices=["full", "humidb"], default=None)
    s.add_argument("--window", type=int, default=50)
    s.add_argument("--modalities", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    for name, func, helptext in (("train", cmd_train, "train from scratch"), ("finetune", cmd_finetune, "fine-tune a checkpoint")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--features", required=True)
        s.add_argument("--config", default=None, help="JSON config; flags override it")
        s.add_argument("--epochs", type=int, default=None)
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--lr", type=float, default=None)
        s.add_argument("--out", required=True)
        if name == "train":
            s.add_argument("--modalities", default=None)
        else:
            s.add_argument("--checkpoint", required=True)
            s.add_argument("--freeze", default=None, help="comma-separated parameter prefixes, e.g. keystroke.gre")
        s.set_defaults(func=func)

    for name, func in (("evaluate", cmd_evaluate), ("embed", cmd_embed)):
        s = sub.add_parser(name, help=f"{name} sequences with a checkpoint")
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--features", required=True)
        s.add_argument("--out", required=True)
        if name == "evaluate":
            s.add_argument("--enroll", type=int, default=5)
            s.add_argument("--split-manifest", default=None)
            s.add_argument("--split", default="test")
        s.set_defaults(func=func)

    s = sub.add_parser("det", help="DET curve from a scores file")
    s.add_argument("--scores", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_det)
    return p


_ERRORS = (ds.DatasetError, ds.CheckpointError, FeatureError, ModelConfigError, tr.TrainingError, tr.SchemaMismatch,
           ev.EvaluationError, ShapeError, NonFiniteError, UsageError, KeyError, OSError)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except _ERRORS as exc:
        module = type(exc).__module__.rsplit(".", 1)[-1]
        print(f"behaveformer {args.command}: [{module}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
