"""gesturegen command line.

    gesturegen gen-fixture --out data/ --seed 0
    gesturegen train --config run.json --model aud2repr2pose --out runs/a
    gesturegen generate --run runs/a --split test --out gen/
    gesturegen evaluate --run runs/a --split val --out report.json
    gesturegen sweep --config run.json --dims 8,16,32 --out sweep.json

Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import audio_features as af
from . import dataset as ds
from . import metrics
from . import models as M
from . import motion_io as mio
from . import postprocess as pp
from .neural_core import CheckpointError

log = logging.getLogger("gesturegen")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RUN_FILE = "run.json"
CHECKPOINTS = {
    "aud2pose": {"aud2pose": "aud2pose.json"},
    "aud2motion": {"aud2motion": "aud2motion.json"},
    "aud2repr2pose": {"motione": "motione.json", "motiond": "motiond.json", "speeche": "speeche.json"},
}
PRESETS = ("desk", "full-japanese", "full-english")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: M.ModelConfig = field(default_factory=M.desk_config)
    preset: str = "desk"
    manifest: str | None = None
    fps: int = 20
    hip_center: bool = False
    window: int | None = None
    one_euro: bool = False
    min_cutoff: float = 1.0
    beta: float = 0.01
    d_cutoff: float = 1.0
    n_bins: int = 30

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        d.update(asdict(self.model))
        return d

    def smoothing(self):
        euro = pp.OneEuroParams(self.min_cutoff, self.beta, self.d_cutoff) if self.one_euro else None
        return dict(window=self.window, euro=euro)


_RUN_KEYS = {f.name for f in fields(RunConfig)} - {"model"}
_MODEL_KEYS = {f.name for f in fields(M.ModelConfig)}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items):
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = _parse_value(value.strip())
    return out


def _preset_model(preset, model_kind, values):
    if preset == "desk":
        return M.desk_config(model_kind, **values)
    if preset.startswith("full-"):
        return M.full_config(model_kind, preset.split("-", 1)[1], **values)
    raise ConfigError(f"unknown preset {preset!r}; choose from {PRESETS}")


def resolve_config(config_path=None, overrides=None, **flags) -> RunConfig:
    """File values, then --set overrides, then dedicated flags; later wins."""
    values = {}
    if config_path:
        p = Path(config_path)
        if not p.exists():
            raise ConfigError(f"no such config file: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: config must be a JSON object")
        values.update(doc)
    values.update(overrides or {})
    values.update({k: v for k, v in flags.items() if v is not None})
    unknown = set(values) - _RUN_KEYS - _MODEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    run_vals = {k: v for k, v in values.items() if k in _RUN_KEYS}
    model_vals = {k: v for k, v in values.items() if k in _MODEL_KEYS}
    preset = run_vals.pop("preset", "desk")
    kind = model_vals.pop("model_kind", "aud2repr2pose")
    try:
        model = _preset_model(preset, kind, model_vals)
        cfg = RunConfig(model=model, preset=preset, **run_vals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if model.feature_kind not in af.FEATURE_SETS:
        raise ConfigError(f"feature_kind must be one of {sorted(af.FEATURE_SETS)}, got {model.feature_kind!r}")
    if cfg.window is not None and (cfg.window < 1 or cfg.window % 2 == 0):
        raise ConfigError("window must be an odd positive integer")
    if cfg.n_bins < 1 or cfg.fps < 1:
        raise ConfigError("n_bins and fps must be positive")
    return cfg


def _config_from_args(args, need_manifest=False) -> RunConfig:
    cfg = resolve_config(
        getattr(args, "config", None),
        parse_overrides(getattr(args, "set", None)),
        model_kind=getattr(args, "model", None),
        feature_kind=getattr(args, "features", None),
        seed=getattr(args, "seed", None),
        manifest=getattr(args, "manifest", None),
    )
    if need_manifest and not cfg.manifest:
        raise ConfigError("a dataset manifest is required (manifest key or --manifest)")
    return cfg


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_run(run_dir) -> tuple[dict, RunConfig]:
    path = Path(run_dir) / RUN_FILE
    if not path.exists():
        raise FileNotFoundError(f"no trained run at {run_dir} (missing {RUN_FILE})")
    doc = json.loads(path.read_text())
    return doc, resolve_config(overrides=doc["config"])


# ---------------------------------------------------------------- commands

def cmd_gen_fixture(args):
    out = Path(args.out)
    manifest = ds.make_fixture_dataset(
        out, joints=args.joints, seed=args.seed or 0, train_clips=args.train_clips,
        train_seconds=args.seconds, val_clips=args.val_clips, val_seconds=args.seconds,
        test_clips=args.test_clips, test_seconds=args.seconds,
    )
    print(manifest)
    return EXIT_OK


def cmd_extract_features(args):
    kind = args.features or "mfcc"
    if kind not in af.FEATURE_SETS:
        raise ConfigError(f"unknown feature set {kind!r}")
    feats = af.extract(af.read_wav(args.audio), kind, args.fps)
    af.write_feature_csv(feats, args.out)
    print(f"{args.out}: {feats.n_frames} frames x {feats.dim} dims")
    return EXIT_OK


def _train_model(cfg: RunConfig, train, val):
    mc = cfg.model
    if mc.model_kind == "aud2pose":
        model = M.train_aud2pose(train, mc)
        return {"aud2pose": model}, model
    if mc.model_kind == "aud2motion":
        model = M.train_aud2motion(train, mc)
        return {"aud2motion": model}, model
    dae, speeche = M.train_aud2repr2pose(train, mc, val)
    return {"dae": dae, "speeche": speeche}, speeche


def cmd_train(args):
    cfg = _config_from_args(args, need_manifest=True)
    manifest = ds.load_manifest(cfg.manifest)
    train = ds.load_split(manifest, "train", cfg.model.feature_kind, cfg.fps)
    if not train:
        raise ds.DatasetError("manifest has no train entries")
    val = ds.load_split(manifest, "val", cfg.model.feature_kind, cfg.fps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    parts, main = _train_model(cfg, train, val)
    files = CHECKPOINTS[cfg.model.model_kind]
    if "dae" in parts:
        parts["dae"].save(out / files["motione"], out / files["motiond"])
        parts["speeche"].save(out / files["speeche"])
    else:
        parts[cfg.model.model_kind].save(out / files[cfg.model.model_kind])
    doc = {
        "config": cfg.to_dict(),
        "checkpoints": files,
        "joint_names": main.joint_names,
        "initial_loss": main.initial_loss,
        "final_loss": main.final_loss,
        "history": main.history,
    }
    if "dae" in parts:
        doc["dae"] = {"initial_loss": parts["dae"].initial_loss, "history": parts["dae"].history,
                      "val_mse": parts["dae"].val_mse}
    _write_json(out / RUN_FILE, doc)
    print(f"{out}: {cfg.model.model_kind} final loss {main.final_loss:.6f}")
    return EXIT_OK


class Generator:
    """Loads the checkpoints of a trained run and maps features to motion."""

    def __init__(self, run_dir):
        self.doc, self.cfg = _read_run(run_dir)
        run_dir = Path(run_dir)
        files = self.doc["checkpoints"]
        kind = self.cfg.model.model_kind
        if kind == "aud2repr2pose":
            self.dae = M.MotionAutoencoder.load(run_dir / files["motione"], run_dir / files["motiond"])
            self.speeche = M.SpeechModel.load(run_dir / files["speeche"])
        else:
            self.model = M.SpeechModel.load(run_dir / files[kind])

    def __call__(self, feats):
        kind = self.cfg.model.model_kind
        if kind == "aud2repr2pose":
            return M.predict_aud2repr2pose(self.speeche, self.dae, feats)
        if kind == "aud2motion":
            return M.predict_aud2motion(self.model, feats)
        return M.predict_aud2pose(self.model, feats)


def _smooth(m, cfg: RunConfig, hip_joint=0):
    return pp.smooth_pipeline(m, hip_joint if cfg.hip_center else None, **cfg.smoothing())


def cmd_generate(args):
    gen = Generator(args.run)
    cfg = gen.cfg
    if args.audio:
        feats = af.extract(af.read_wav(args.audio), cfg.model.feature_kind, cfg.fps)
        jobs = [(Path(args.out), feats)]
    else:
        manifest = ds.load_manifest(args.manifest or cfg.manifest)
        out = Path(args.out)
        jobs = [(out / f"{e.id}.csv", ds.load_pair(e, cfg.model.feature_kind, manifest.root, cfg.fps)[0])
                for e in manifest.split(args.split)]
        out.mkdir(parents=True, exist_ok=True)
    for path, feats in jobs:
        mio.write_motion_csv(_smooth(gen(feats), cfg), path)
        print(path)
    return EXIT_OK


def cmd_postprocess(args):
    m = ds.load_motion(args.input)
    if args.window is not None and (args.window < 1 or args.window % 2 == 0):
        raise ConfigError("--window must be an odd positive integer")
    euro = pp.OneEuroParams(args.min_cutoff, args.beta, args.d_cutoff) if args.one_euro else None
    hip = None
    if args.hip_center:
        try:
            hip = int(args.hip_joint) if args.hip_joint.isdigit() else mio.joint_index(m, args.hip_joint)
        except KeyError as exc:
            raise ConfigError(str(exc)) from None
        if hip >= m.n_joints:
            raise ConfigError(f"hip joint {hip} out of range for {m.n_joints} joints")
    mio.write_motion_csv(pp.smooth_pipeline(m, hip, args.window, euro), args.out)
    print(args.out)
    return EXIT_OK


def _groups_for(names, groups=None):
    groups = groups or ds.default_joint_groups(names)
    return {k: v for k, v in groups.items() if v}


def cmd_evaluate(args):
    if args.truth:
        if not args.pred:
            raise ConfigError("--truth needs --pred")
        cfg = _config_from_args(args)
        truth, pred = ds.load_motion(args.truth), ds.load_motion(args.pred)
        if truth.fps != pred.fps:
            truth = mio.resample_motion(truth, pred.fps)
        row = metrics.evaluate_sequence(truth, pred, _groups_for(truth.joint_names), cfg.n_bins)
        report = {"config": cfg.to_dict(), "sequences": {"pred": row}}
    else:
        if not args.run:
            raise ConfigError("evaluate needs --run or --truth/--pred")
        gen = Generator(args.run)
        cfg = gen.cfg
        manifest = ds.load_manifest(args.manifest or cfg.manifest)
        train = [m for _, m in ds.load_split(manifest, "train", cfg.model.feature_kind, cfg.fps)]
        static = metrics.StaticMeanPose(train)
        groups = _groups_for(train[0].joint_names, manifest.joint_groups)
        rows, base_rows = {}, {}
        for e in manifest.split(args.split):
            feats, truth = ds.load_pair(e, cfg.model.feature_kind, manifest.root, cfg.fps)
            rows[e.id] = metrics.evaluate_sequence(truth, _smooth(gen(feats), cfg), groups, cfg.n_bins)
            base_rows[e.id] = metrics.evaluate_sequence(truth, static.generate(truth.n_frames), groups, cfg.n_bins)
        if not rows:
            raise ds.DatasetError(f"manifest has no {args.split!r} entries")
        report = {
            "config": cfg.to_dict(),
            "split": args.split,
            "sequences": rows,
            "summary": metrics.aggregate_runs(list(rows.values())),
            "static_mean_pose": metrics.aggregate_runs(list(base_rows.values())),
        }
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _parse_dims(text):
    try:
        dims = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--dims expects comma-separated integers, got {text!r}") from None
    if not dims or min(dims) < 1:
        raise ConfigError("--dims needs at least one positive integer")
    return dims


def cmd_sweep(args):
    cfg = _config_from_args(args, need_manifest=True)
    dims = _parse_dims(args.dims)
    manifest = ds.load_manifest(cfg.manifest)
    train = ds.load_split(manifest, "train", cfg.model.feature_kind, cfg.fps)
    val = ds.load_split(manifest, "val", cfg.model.feature_kind, cfg.fps)
    if not train or not val:
        raise ds.DatasetError("sweep needs train and val entries")
    rows = M.sweep_bottleneck(train, val, dims, cfg.model.replace(model_kind="aud2repr2pose"))
    report = {"config": cfg.to_dict(), "dims": dims, "rows": rows}
    _write_json(args.out, report)
    for r in rows:
        print(f"d={r['d']:<5d} ape={r['ape']:.4f} jerk={r['jerk']:.2f} dae_val_mse={r['dae_val_mse']:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing

def _add_config_flags(p, model=True):
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--manifest", help="dataset manifest (overrides the config)")
    p.add_argument("--features", help="feature set")
    p.add_argument("--seed", type=int)
    if model:
        p.add_argument("--model", choices=M.MODEL_KINDS)


def build_parser():
    parser = argparse.ArgumentParser(prog="gesturegen", description="Speech-driven gesture generation")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-fixture", help="write a synthetic speech/motion corpus and its manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--joints", type=int, default=8)
    p.add_argument("--seconds", type=float, default=30.0)
    p.add_argument("--train-clips", type=int, default=6)
    p.add_argument("--val-clips", type=int, default=1)
    p.add_argument("--test-clips", type=int, default=1)
    p.set_defaults(func=cmd_gen_fixture)

    p = sub.add_parser("extract-features", help="audio file to feature CSV")
    p.add_argument("--audio", required=True)
    p.add_argument("--features", default="mfcc")
    p.add_argument("--fps", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train", help="train a model on a manifest's train split")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="motion CSV from audio with a trained run")
    p.add_argument("--run", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--audio")
    src.add_argument("--split", choices=ds.SPLITS)
    p.add_argument("--manifest")
    p.add_argument("--out", required=True, help="CSV path for --audio, directory for --split")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("postprocess", help="smooth a motion file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int)
    p.add_argument("--one-euro", action="store_true")
    p.add_argument("--min-cutoff", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--d-cutoff", type=float, default=1.0)
    p.add_argument("--hip-center", action="store_true")
    p.add_argument("--hip-joint", default="0", help="joint name or index")
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("evaluate", help="APE, derivative and histogram metrics as a JSON report")
    _add_config_flags(p, model=False)
    p.add_argument("--run")
    p.add_argument("--split", default="val", choices=ds.SPLITS)
    p.add_argument("--truth")
    p.add_argument("--pred")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train Aud2Repr2Pose for several bottleneck sizes")
    _add_config_flags(p, model=False)
    p.add_argument("--dims", required=True, help="comma-separated bottleneck sizes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except M.TrainingDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ds.DatasetError, mio.BVHParseError, mio.MotionFormatError, af.AudioError, CheckpointError,
            metrics.MetricError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
