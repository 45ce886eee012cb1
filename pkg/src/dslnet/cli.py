"""Command-line entry point: ``dslnet <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import ConfigError, ModelConfig, preset
from .data import DataError, load_dataset, load_scene, make_synthetic, read_png, window, write_png
from .metrics import MetricReport
from .model import build_model
from .train import NonFiniteError, TrainConfig, evaluate, model_predictor, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RUN_ROOT_ENV = "DSLNET_RUN_ROOT"
CONFIG_NAME = "effective_config.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}")
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dslnet", description="SDR-to-HDR video reconstruction toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-synthetic", help="generate paired synthetic scenes")
    s.add_argument("--config", type=Path, help="JSON file with any of the flags below as keys")
    s.add_argument("--scenes", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--size", type=_size, help="HxW (default 96x96)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", type=Path)

    t = sub.add_parser("train", help="train a model on a dataset directory or manifest")
    t.add_argument("--config", type=Path)
    t.add_argument("--preset", help="tiny, full, M0..M7 or mresnet")
    t.add_argument("--data", type=Path)
    t.add_argument("--out", type=Path, help=f"run directory; relative paths resolve under ${RUN_ROOT_ENV}")
    t.add_argument("--iters", type=int, help="total iterations (sets the schedule scale)")
    t.add_argument("--scale", type=float, help="multiplier on every schedule constant")
    t.add_argument("--batch", type=int)
    t.add_argument("--patch", type=int)
    t.add_argument("--lr0", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--holdout", type=int, help="scenes held out for the final report")
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")

    i = sub.add_parser("infer", help="reconstruct one HDR frame")
    i.add_argument("--config", type=Path)
    i.add_argument("--checkpoint", type=Path)
    i.add_argument("--scene", type=Path)
    i.add_argument("--frame-index", dest="frame_index", type=int)
    i.add_argument("--out", type=Path)

    e = sub.add_parser("eval", help="score predicted frames against references")
    e.add_argument("--config", type=Path)
    e.add_argument("--pred", type=Path)
    e.add_argument("--ref", type=Path)
    e.add_argument("--out", type=Path)

    sub.add_parser("selftest", help="gradient checks, oracle equivalences and the parameter budget")
    return p


DEFAULTS = {
    "make-synthetic": {"scenes": 4, "frames": 10, "size": (96, 96), "seed": 0, "out": None},
    "train": {"preset": "tiny", "data": None, "out": None, "iters": None, "scale": None, "batch": None,
              "patch": None, "lr0": None, "seed": None, "holdout": None, "checkpoint_every": None, "resume": None,
              "model": {}, "train": {}},
    "infer": {"checkpoint": None, "scene": None, "frame_index": None, "out": None},
    "eval": {"pred": None, "ref": None, "out": None},
    "selftest": {},
}
REQUIRED = {"make-synthetic": ("out",), "train": ("data", "out"), "infer": ("checkpoint", "scene", "frame_index", "out"),
            "eval": ("pred", "ref", "out"), "selftest": ()}


def effective_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then flags given on the command line."""
    cmd = args.command
    cfg = json.loads(json.dumps(DEFAULTS[cmd]))
    path = getattr(args, "config", None)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config file {path}: {e}")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys for {cmd}: {sorted(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = str(value) if isinstance(value, Path) else value
    if isinstance(cfg.get("size"), str):
        cfg["size"] = _size(cfg["size"])
    if cfg.get("size") is not None:
        cfg["size"] = list(cfg["size"])
    missing = [k for k in REQUIRED[cmd] if cfg.get(k) is None]
    if missing:
        raise UsageError(f"{cmd}: missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return cfg


def write_config(path: Path, cfg: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def run_dir(out: str) -> Path:
    p = Path(out)
    root = os.environ.get(RUN_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


# -- commands ---------------------------------------------------------------------------------------

def cmd_make_synthetic(cfg: dict) -> int:
    out = Path(cfg["out"])
    if cfg["scenes"] < 1 or cfg["frames"] < 1:
        raise UsageError("--scenes and --frames must be >= 1")
    try:
        write_config(out / CONFIG_NAME, cfg)
        dirs = make_synthetic(out, cfg["scenes"], cfg["frames"], tuple(cfg["size"]), cfg["seed"])
    except OSError as e:
        raise DataError(f"cannot write to {out}: {e}")
    print(f"wrote {len(dirs)} scenes x {cfg['frames']} frames to {out}")
    return EXIT_OK


def _train_config(cfg: dict) -> TrainConfig:
    fields = dict(cfg["train"])
    if cfg["iters"] is not None and cfg["scale"] is not None:
        raise UsageError("give either --iters or --scale, not both")
    base = TrainConfig(**{k: v for k, v in fields.items() if k != "scale"})
    if cfg["iters"] is not None:
        if cfg["iters"] < 1:
            raise UsageError("--iters must be >= 1")
        fields["scale"] = cfg["iters"] / base.total_iters
    elif cfg["scale"] is not None:
        fields["scale"] = cfg["scale"]
    for key in ("batch", "patch", "lr0", "seed", "checkpoint_every"):
        if cfg[key] is not None:
            fields[key] = cfg[key]
    try:
        return TrainConfig.from_dict(fields)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e))


def cmd_train(cfg: dict) -> int:
    try:
        model_cfg = preset(cfg["preset"], **cfg["model"])
    except TypeError as e:
        raise UsageError(f"bad model override: {e}")
    tcfg = _train_config(cfg)
    out = run_dir(cfg["out"])
    snapshot = dict(cfg, model_config=model_cfg.to_dict(), train_config=tcfg.to_dict(), run_dir=str(out))
    write_config(out / CONFIG_NAME, snapshot)

    scenes = load_dataset(cfg["data"])
    holdout = cfg["holdout"] if cfg["holdout"] is not None else (1 if len(scenes) >= 2 else 0)
    if not 0 <= holdout < len(scenes):
        raise UsageError(f"--holdout must be in [0, {len(scenes) - 1}] for {len(scenes)} scenes")
    train_set = scenes[:len(scenes) - holdout]
    test_set = scenes[len(scenes) - holdout:] or train_set
    h, w = train_set[0].extents
    if tcfg.patch > min(h, w):
        raise UsageError(f"--patch {tcfg.patch} exceeds the {h}x{w} frames; pass --patch {min(h, w)} or smaller")

    model = build_model(model_cfg, tcfg.seed)
    print(f"preset {model_cfg.preset}: {model.param_count():,} parameters, {tcfg.total} iterations, "
          f"{len(train_set)} training / {len(test_set)} report scenes")
    result = train(model, train_set, tcfg, run_dir=out, resume=cfg["resume"])
    if result.losses:
        print(f"final loss {result.losses[-1]:.6f} (mean of last 50: {np.mean(result.losses[-50:]):.6f})")
    report = evaluate(model, test_set)
    (out / "report.jsonl").write_text(report.to_text())
    print(f"report: PSNR {report.psnr_db:.3f} dB, SR-SIM {report.srsim:.5f}, dE_ITP {report.delta_e_itp:.3f}")
    return EXIT_OK


def cmd_infer(cfg: dict) -> int:
    out = Path(cfg["out"])
    write_config(out.with_name(out.stem + ".config.json"), cfg)
    model, _ = ckpt_io.restore_model(cfg["checkpoint"])
    seq = load_scene(cfg["scene"])
    i = cfg["frame_index"]
    if not 0 <= i < seq.length:
        raise DataError(f"frame index {i} out of range for scene {seq.scene_id} with {seq.length} frames")
    pred = model_predictor(model)(window(seq, i, model.config.T))
    write_png(out, pred, 16)
    print(f"wrote {out} ({pred.shape[1]}x{pred.shape[2]}, 16-bit)")
    return EXIT_OK


def _png_files(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        raise DataError(f"{folder} is not a directory")
    return {p.relative_to(folder).as_posix(): p for p in sorted(folder.rglob("*.png"))}


def cmd_eval(cfg: dict) -> int:
    out = Path(cfg["out"])
    write_config(out.with_name(out.stem + ".config.json"), cfg)
    pred, ref = _png_files(Path(cfg["pred"])), _png_files(Path(cfg["ref"]))
    only_pred, only_ref = sorted(set(pred) - set(ref)), sorted(set(ref) - set(pred))
    if only_pred or only_ref:
        raise DataError(f"frame sets differ ({len(pred)} predicted vs {len(ref)} reference); "
                        f"orphans in --pred: {only_pred}; orphans in --ref: {only_ref}")
    if not pred:
        raise DataError(f"no PNG frames under {cfg['pred']}")
    report = MetricReport()
    for name in sorted(pred):
        p, _ = read_png(pred[name])
        r, _ = read_png(ref[name])
        if p.shape != r.shape:
            raise DataError(f"{name}: predicted extents {p.shape[1:]} != reference {r.shape[1:]}")
        report.add(p, r, name)
    out.write_text(report.to_text())
    print(f"{len(report.per_frame)} frames: PSNR {report.psnr_db:.3f} dB, SR-SIM {report.srsim:.5f}, "
          f"dE_ITP {report.delta_e_itp:.3f}")
    return EXIT_OK


def cmd_selftest(cfg: dict) -> int:
    from .selftest import run_all

    return EXIT_OK if run_all() else EXIT_NUMERIC


COMMANDS = {"make-synthetic": cmd_make_synthetic, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "selftest": cmd_selftest}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = effective_config(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, ConfigError) as e:
        print(f"dslnet {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ckpt_io.CheckpointError, FileNotFoundError) as e:
        print(f"dslnet {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as e:
        print(f"dslnet {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
