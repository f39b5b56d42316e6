"""Command-line entry point: ``posetcn <command> [--config FILE] [flags]``.

Settings come from three layers, later ones winning: built-in defaults, an
INI-style config file, command-line flags.  The resolved configuration is
written into every run directory so the run can be repeated exactly.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import datetime as _dt
import io
import logging
import sys
import typing
from pathlib import Path

import numpy as np

from . import complexity, metrics
from .camera import normalize_screen_coordinates
from .dataio import DatasetFile, SequenceRecord, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .errors import CheckpointError, ConfigError, DataFormatError, PoseError
from .model import ModelConfig, TemporalModel, predict_sequence
from .semisup import SemiSupPlan, regress_trajectory, train_semisupervised
from .synthetic import SynthSpec, generate_synthetic
from .training import MM_PER_UNIT, AMSGrad, TrainPlan, TrainState, prepare, train_supervised

log = logging.getLogger("posetcn")

CONFIG_NAME = "config.ini"
LOG_NAME = "log.csv"
CHECKPOINT_NAME = "model.ckpt"


# -- configuration -----------------------------------------------------------


@dataclasses.dataclass
class PathsConfig:
    dataset: str = ""
    out_dir: str = "runs"


@dataclasses.dataclass
class SplitConfig:
    """How a labeled dataset is divided for semi-supervised runs."""

    labeled_fraction: float = 0.1  # share of training sequences that keep their 3D labels

    def __post_init__(self):
        if not 0 < self.labeled_fraction <= 1:
            raise ConfigError("labeled_fraction must be in (0, 1]")


def _semisup_fields():
    return [f for f in dataclasses.fields(SemiSupPlan) if f.name != "base"]


SECTIONS = {
    "model": ModelConfig,
    "train": TrainPlan,
    "semisup": SemiSupPlan,
    "split": SplitConfig,
    "synth": SynthSpec,
    "paths": PathsConfig,
}


def _fields(section):
    if section == "semisup":
        return _semisup_fields()
    return dataclasses.fields(SECTIONS[section])


def _hints(section):
    return typing.get_type_hints(SECTIONS[section])


def _parse_value(text: str, hint, where: str):
    text = text.strip()
    args = typing.get_args(hint)
    if type(None) in args:
        if text.lower() in ("none", ""):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typing.get_origin(hint) is tuple:
            return tuple(float(v) for v in text.replace(",", " ").split())
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {getattr(hint, '__name__', hint)}") from None


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def read_config_file(path) -> dict[str, dict[str, str]]:
    """Parse an INI file; unknown sections or keys raise :class:`ConfigError`."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]; known: {', '.join(SECTIONS)}")
        known = {f.name for f in _fields(section)}
        for key in parser[section]:
            if key not in known:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
        out[section] = dict(parser[section])
    return out


def resolve(sections, file_values: dict, flag_values: dict) -> dict[str, dict]:
    """Merge defaults, file values and flags into typed per-section dicts."""
    resolved = {}
    for section in sections:
        hints = _hints(section)
        values = {}
        for f in _fields(section):
            if f.name in flag_values.get(section, {}):
                raw, where = flag_values[section][f.name], f"--{f.name.replace('_', '-')}"
            elif f.name in file_values.get(section, {}):
                raw, where = file_values[section][f.name], f"[{section}] {f.name}"
            else:
                continue
            values[f.name] = _parse_value(raw, hints[f.name], where)
        resolved[section] = values
    return resolved


def build_objects(resolved: dict) -> dict:
    out = {}
    try:
        for section, values in resolved.items():
            if section == "semisup":
                continue
            out[section] = SECTIONS[section](**values)
        if "semisup" in resolved:
            out["semisup"] = SemiSupPlan(base=out["train"], **resolved["semisup"])
    except TypeError as e:
        raise ConfigError(str(e)) from None
    return out


def echo_config(objects: dict) -> str:
    """Render every field of every section as INI text."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, obj in objects.items():
        parser[section] = {f.name: _format_value(getattr(obj, f.name)) for f in _fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# -- argument parsing --------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


COMMAND_SECTIONS = {
    "synth": ("synth",),
    "train": ("model", "train", "paths"),
    "train-semisup": ("model", "train", "semisup", "split", "paths"),
    "flops": ("model",),
}


def _add_section_flags(parser, sections):
    for section in sections:
        group = parser.add_argument_group(f"[{section}]")
        for f in _fields(section):
            flag = "--" + f.name.replace("_", "-")
            default = "-" if f.default is dataclasses.MISSING else _format_value(f.default)
            group.add_argument(flag, dest=f"{section}.{f.name}", metavar="VALUE", default=None,
                               help=f"default: {default}")


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="posetcn", description="Temporal-convolution 3D pose lifting toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    s = add("synth", help="generate a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--output", "-o", required=True)
    _add_section_flags(s, COMMAND_SECTIONS["synth"])

    for name in ("train", "train-semisup"):
        t = add(name, help="supervised training" if name == "train" else "semi-supervised training")
        t.add_argument("--config")
        if name == "train":
            t.add_argument("--resume", metavar="RUN_DIR", help="continue an interrupted run in place")
        _add_section_flags(t, COMMAND_SECTIONS[name])

    e = add("eval", help="evaluate a checkpoint or a prediction file")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="dataset file whose 3D poses are taken as predictions")
    e.add_argument("--dataset", required=True)
    e.add_argument("--protocol", nargs="+", default=["1", "2", "3", "velocity"],
                   choices=["1", "2", "3", "velocity"])
    e.add_argument("--flip-test", action=argparse.BooleanOptionalAction, default=True)
    e.add_argument("--output", "-o", help="CSV path (default: stdout)")

    r = add("predict", help="write 3D predictions for every sequence")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--output", "-o", required=True)
    r.add_argument("--flip-test", action=argparse.BooleanOptionalAction, default=True)

    f = add("flops", help="per-layer parameter and FLOP table")
    f.add_argument("--config")
    f.add_argument("--output", "-o", help="CSV path")
    _add_section_flags(f, COMMAND_SECTIONS["flops"])
    return p


def _section_flags(args) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for dest, value in vars(args).items():
        if "." in dest and value is not None:
            section, key = dest.split(".", 1)
            out.setdefault(section, {})[key] = value
    return out


def load_settings(args, sections, file_path=None) -> dict:
    file_values = read_config_file(file_path) if file_path else {}
    return build_objects(resolve(sections, file_values, _section_flags(args)))


# -- helpers -----------------------------------------------------------------


def make_run_dir(root, seed: int) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = Path(root) / f"{stamp}-seed{seed}"
    path, k = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{k}")
        k += 1
    path.mkdir(parents=True)
    return path


class CsvLog:
    def __init__(self, path, columns, append=False):
        self.path, self.columns = Path(path), columns
        if not append or not self.path.exists():
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(columns)

    def write(self, row: dict):
        with open(self.path, "a", newline="") as f:
            csv.DictWriter(f, self.columns, extrasaction="ignore").writerow(row)


# stored with every checkpoint so predictions can be reproduced outside this package
INPUT_NOTE = {"input_normalization": "u / width * 2 - 1, v / width * 2 - height / width",
              "output_units": "m"}
TRAIN_COLUMNS = ["epoch", "train_loss", "lr", "bn_momentum", "eval_mpjpe", "eval_pmpjpe", "eval_mpjve"]
SEMISUP_COLUMNS = TRAIN_COLUMNS + ["reproj_loss", "bone_loss", "traj_wmpjpe", "labeled_frames", "unlabeled_frames",
                                     "unlabeled_skipped"]


def _model_config(obj: ModelConfig, ds: DatasetFile) -> ModelConfig:
    if obj.num_joints != ds.skeleton.num_joints:
        raise DataFormatError(f"model expects {obj.num_joints} joints, dataset has {ds.skeleton.num_joints}")
    return obj


def _require_dataset(paths: PathsConfig) -> DatasetFile:
    if not paths.dataset:
        raise ConfigError("no dataset given (--dataset or [paths] dataset)")
    return load_dataset(paths.dataset)


def _rng_from_state(state) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


# -- commands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = load_settings(args, COMMAND_SECTIONS["synth"], args.config)["synth"]
    ds = generate_synthetic(spec)
    save_dataset(ds, args.output)
    print(f"wrote {args.output}: {len(ds.sequences)} sequences, {ds.num_frames} frames, "
          f"{len(ds.cameras)} cameras, noise {spec.noise_std_px} px")
    return 0


def cmd_train(args) -> int:
    if args.resume:
        run_dir = Path(args.resume)
        cfg_file = run_dir / CONFIG_NAME
        if not cfg_file.exists():
            raise DataFormatError(f"{run_dir} has no {CONFIG_NAME}; not a run directory")
        objs = load_settings(args, COMMAND_SECTIONS["train"], cfg_file)
    else:
        objs = load_settings(args, COMMAND_SECTIONS["train"], args.config)
    plan: TrainPlan = objs["train"]
    ds = _require_dataset(objs["paths"])
    cfg = _model_config(objs["model"], ds)
    model = TemporalModel(cfg, plan.seed)
    state = None
    if args.resume:
        ckpt = load_checkpoint(run_dir / CHECKPOINT_NAME)
        ckpt.load_into("pose", model)
        opt = AMSGrad(model.parameters(), plan.optimizer_betas)
        if ckpt.optimizer_state() is None or ckpt.rng_state is None:
            raise CheckpointError("checkpoint carries no optimizer/RNG state; cannot resume")
        opt.load_state_dict(ckpt.optimizer_state(), ckpt.optimizer_step)
        state = TrainState(ckpt.epoch, _rng_from_state(ckpt.rng_state), opt)
        log.info("resuming %s at epoch %d", run_dir, ckpt.epoch)
    else:
        run_dir = make_run_dir(objs["paths"].out_dir, plan.seed)
    (run_dir / CONFIG_NAME).write_text(echo_config(objs))
    train, held_out = prepare(ds, plan.eval_fraction)
    held_out = [s for s in held_out if s.pose is not None]
    csv_log = CsvLog(run_dir / LOG_NAME, TRAIN_COLUMNS, append=bool(args.resume))

    def on_epoch(epoch, st, row):
        csv_log.write(row)
        save_checkpoint(run_dir / CHECKPOINT_NAME, {"pose": model}, st.optimizer, epoch=st.epoch,
                        rng_state=st.rng.bit_generator.state, extra={"kind": "supervised", **INPUT_NOTE})

    train_supervised(model, [s for s in train if s.pose is not None], plan, held_out,
                     ds.skeleton.left_right_pairs, state, on_epoch)
    print(run_dir)
    return 0


def split_labeled(train, fraction: float):
    """First ``fraction`` of the labeled sequences keep their labels; the rest lose them."""
    candidates = [s for s in train if s.pose is not None]
    n_lab = max(1, int(round(fraction * len(candidates)))) if candidates else 0
    keep = {s.id for s in candidates[:n_lab]}
    labeled = [s for s in train if s.id in keep]
    unlabeled = [s if s.pose is None else dataclasses.replace(s, pose=None, trajectory=None)
                 for s in train if s.id not in keep]
    return labeled, unlabeled


def cmd_train_semisup(args) -> int:
    objs = load_settings(args, COMMAND_SECTIONS["train-semisup"], args.config)
    plan: SemiSupPlan = objs["semisup"]
    ds = _require_dataset(objs["paths"])
    cfg = _model_config(objs["model"], ds)
    run_dir = make_run_dir(objs["paths"].out_dir, plan.base.seed)
    (run_dir / CONFIG_NAME).write_text(echo_config(objs))
    train, held_out = prepare(ds, plan.base.eval_fraction)
    labeled, unlabeled = split_labeled(train, objs["split"].labeled_fraction)
    if not labeled:
        raise DataFormatError("dataset has no labeled sequences")
    pose = TemporalModel(cfg, plan.base.seed)
    traj = TemporalModel(dataclasses.replace(cfg, num_joints_out=1), plan.base.seed + 1)
    csv_log = CsvLog(run_dir / LOG_NAME, SEMISUP_COLUMNS)

    def on_epoch(epoch, row):
        csv_log.write(row)
        save_checkpoint(run_dir / CHECKPOINT_NAME, {"pose": pose, "traj": traj}, epoch=epoch + 1,
                        extra={"kind": "semisup", **INPUT_NOTE})

    train_semisupervised(pose, traj, labeled, unlabeled, plan, ds.skeleton,
                         [s for s in held_out if s.pose is not None], on_epoch)
    print(run_dir)
    return 0


def _load_model(ckpt, name) -> TemporalModel:
    if name not in ckpt.configs:
        raise CheckpointError(f"checkpoint has no {name!r} model")
    try:
        cfg = ModelConfig.from_dict(ckpt.configs[name])
    except (TypeError, PoseError) as e:
        raise CheckpointError(f"invalid model config in checkpoint: {e}") from None
    model = TemporalModel(cfg)
    ckpt.load_into(name, model)
    return model


def _predict(model, ds, seq, flip):
    cam = ds.cameras[seq.camera]
    inputs = normalize_screen_coordinates(seq.frames_2d, cam.width, cam.height)
    return predict_sequence(model, inputs, flip, ds.skeleton.left_right_pairs).astype(np.float64) * MM_PER_UNIT


PROTOCOLS = {"1": ("mpjpe", metrics.mpjpe), "2": ("p_mpjpe", metrics.p_mpjpe), "3": ("n_mpjpe", metrics.n_mpjpe)}


def evaluate_table(predictions: dict, ds: DatasetFile, protocols) -> list[dict]:
    """Per-sequence and frame-weighted aggregate rows (mm)."""
    rows, totals, weights = [], {}, {}
    for seq in ds.sequences:
        if not seq.labeled:
            continue
        if seq.id not in predictions:
            raise DataFormatError(f"no prediction for sequence {seq.id}")
        pred, gt = predictions[seq.id], seq.frames_3d
        if pred.shape != gt.shape:
            raise DataFormatError(f"sequence {seq.id}: prediction shape {pred.shape} != ground truth {gt.shape}")
        row = {"sequence": seq.id, "frames": seq.num_frames}
        for p in protocols:
            if p == "velocity":
                key, w = "mpjve", seq.num_frames - 1
                value = metrics.mpjve(pred, gt) if w > 0 else float("nan")
            else:
                key, fn = PROTOCOLS[p]
                value, w = fn(pred, gt), seq.num_frames
            row[key] = value
            if w > 0:
                totals[key] = totals.get(key, 0.0) + value * w
                weights[key] = weights.get(key, 0) + w
        rows.append(row)
    if not rows:
        raise DataFormatError("dataset has no labeled sequences to evaluate")
    agg = {"sequence": "ALL", "frames": sum(r["frames"] for r in rows)}
    for key in rows[0]:
        if key not in agg:
            agg[key] = totals[key] / weights[key] if weights.get(key) else float("nan")
    rows.append(agg)
    return rows


def cmd_eval(args) -> int:
    ds = load_dataset(args.dataset)
    if args.checkpoint:
        model = _load_model(load_checkpoint(args.checkpoint), "pose")
        _model_config(model.config, ds)
        preds = {s.id: _predict(model, ds, s, args.flip_test) for s in ds.sequences if s.labeled}
    else:
        pred_ds = load_dataset(args.predictions)
        if pred_ds.skeleton.num_joints != ds.skeleton.num_joints:
            raise DataFormatError("prediction and dataset joint counts differ")
        preds = {s.id: s.frames_3d for s in pred_ds.sequences if s.frames_3d is not None}
    protocols = list(dict.fromkeys(args.protocol))
    rows = evaluate_table(preds, ds, protocols)
    columns = ["sequence", "frames"] + [k for k in rows[0] if k not in ("sequence", "frames")]
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        writer = csv.DictWriter(out, columns)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if args.output:
            out.close()
    return 0


def cmd_predict(args) -> int:
    ds = load_dataset(args.dataset)
    ckpt = load_checkpoint(args.checkpoint)
    pose = _load_model(ckpt, "pose")
    _model_config(pose.config, ds)
    traj = _load_model(ckpt, "traj") if "traj" in ckpt.configs else None
    seqs = []
    for s in ds.sequences:
        poses = _predict(pose, ds, s, args.flip_test)
        if traj is not None:
            root = regress_trajectory(traj, s.frames_2d, ds.cameras[s.camera])
        else:
            root = np.full((s.num_frames, 3), np.nan)  # unknown; the header says so
        seqs.append(SequenceRecord(s.id, s.camera, s.frames_2d.copy(), poses, root))
    meta = {"prediction": {"checkpoint": str(args.checkpoint), "causal": pose.config.causal,
                           "flip_test": args.flip_test, "model": pose.config.to_dict(),
                           "trajectory": traj is not None}}
    save_dataset(DatasetFile(ds.skeleton, dict(ds.cameras), seqs, ds.fps, meta), args.output)
    print(f"wrote {args.output}: {len(seqs)} sequences, {sum(s.num_frames for s in seqs)} frames")
    return 0


FLOPS_COLUMNS = ["index", "name", "kernel_width", "in_channels", "out_channels", "params", "flops", "mflops"]


def flops_rows(cfg: ModelConfig) -> tuple[list[dict], complexity.Estimate]:
    est = complexity.estimate(cfg)
    rows = [{"index": l.index, "name": l.name, "kernel_width": l.kernel_width, "in_channels": l.in_channels,
             "out_channels": l.out_channels, "params": l.params, "flops": l.flops_per_frame,
             "mflops": f"{l.flops_per_frame / 1e6:.3f}"} for l in est.layers]
    return rows, est


def cmd_flops(args) -> int:
    cfg = load_settings(args, COMMAND_SECTIONS["flops"], args.config)["model"]
    rows, est = flops_rows(cfg)
    print(f"{'#':>2}  {'layer':<16}{'W':>5}{'C_in':>7}{'C_out':>7}{'params':>12}{'MFLOPs':>10}")
    for r in rows:
        print(f"{r['index']:>2}  {r['name']:<16}{r['kernel_width']:>5}{r['in_channels']:>7}"
              f"{r['out_channels']:>7}{r['params']:>12}{r['mflops']:>10}")
    print(f"receptive field: {cfg.receptive_field} frames")
    rounded_total = sum(float(r["mflops"]) for r in rows)
    print(f"total: {rounded_total:.3f} MFLOPs per frame (sum of rounded layers; exact "
          f"{est.total_flops_per_frame / 1e6:.4f})")
    print(f"summary: {est.total_params / 1e6:.2f}M params, {est.total_flops_per_frame / 1e6:.2f}M FLOPs")
    if args.output:
        with open(args.output, "w", newline="") as f:
            writer = csv.DictWriter(f, FLOPS_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "train-semisup": cmd_train_semisup,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "flops": cmd_flops,
}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except PoseError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
