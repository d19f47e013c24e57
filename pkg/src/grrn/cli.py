"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``upscale``, ``params``, ``make-synthetic``.
Settings come from an INI config file (sections [model] [train] [data]
[eval]) and/or flags named exactly like the config keys; flags win.  The
fully resolved configuration is echoed to stdout before any compute, in a
form that can be re-fed as a config file to reproduce the run.

Exit codes: 0 ok, 1 usage/config error, 2 data or checkpoint error,
3 numeric failure.  GRRN_THREADS caps evaluation worker count.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, restore_network
from .config import PRESETS, ModelConfig, preset
from .data import (
    load_clip,
    make_synthetic,
    manifest_from_frames,
    manifest_from_vimeo,
    read_image,
    write_image,
)
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .metrics import evaluate, tta_infer
from .model import build, count_parameters
from .training import TrainPlan, restore_optimizer, train

_MODEL_KEYS = {
    "preset": str, "s": int, "S": int, "B": int, "G": int, "g": int,
    "reduction_r": int, "scale_r": int, "n": int,
    "use_channel_attention": bool, "use_rir": bool,
}
_TRAIN_KEYS = {
    "initial_lr": float, "milestones": "intlist", "batch_size": int,
    "bn_freeze_epoch": int, "epochs": int, "seed": int, "augment": bool,
    "grad_clip": float, "charbonnier_eps": float, "renorm_r_max": float,
    "renorm_d_max": float, "checkpoint_every": int, "out_dir": str,
}
_DATA_KEYS = {
    "root": str, "split": str, "kind": str, "checkpoint": str,
    "input_dir": str, "output_dir": str, "count": int, "height": int,
    "width": int, "scale": int,
}
_EVAL_KEYS = {"tta": bool, "channel": str, "report": str}
_SECTIONS = {"model": _MODEL_KEYS, "train": _TRAIN_KEYS,
             "data": _DATA_KEYS, "eval": _EVAL_KEYS}


def _parse_bool(raw: str, where: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{where}: expected a boolean, got {raw!r}")


def _convert(raw: str, kind, where: str):
    try:
        if kind is bool:
            return _parse_bool(raw, where)
        if kind == "intlist":
            raw = raw.strip()
            return tuple(int(x) for x in raw.split(",") if x.strip()) if raw else ()
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as "
                          f"{getattr(kind, '__name__', kind)}") from None


def parse_config_file(path) -> dict[str, dict[str, object]]:
    """INI-style parser that reports the offending key and line number."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    out: dict[str, dict[str, object]] = {s: {} for s in _SECTIONS}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any section")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        schema = _SECTIONS[section]
        if key not in schema:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        out[section][key] = _convert(raw.strip(), schema[key],
                                     f"line {lineno}: key {key!r}")
    return out


@dataclass
class CliConfig:
    model: ModelConfig | None
    plan: TrainPlan
    seed: int = 0
    root: str | None = None
    split: str = "train"
    kind: str = "vimeo"
    checkpoint: str | None = None
    input_dir: str | None = None
    output_dir: str | None = None
    count: int = 8
    height: int = 8
    width: int = 8
    scale: int = 2
    out_dir: str | None = None
    tta: bool = False
    channel: str = "y"
    report: str | None = None
    model_given: bool = field(default=False, repr=False)
    model_label: str = field(default="custom", repr=False)

    def echo(self) -> str:
        lines = []
        if self.model is not None:
            lines.append("[model]")
            for k in ("s", "S", "B", "G", "g", "reduction_r", "scale_r", "n",
                      "use_channel_attention", "use_rir"):
                v = getattr(self.model, k)
                lines.append(f"{k}={str(v).lower() if isinstance(v, bool) else v}")
        p = self.plan
        lines.append("[train]")
        lines.append(f"initial_lr={p.initial_lr}")
        lines.append(f"milestones={','.join(str(m) for m in p.milestones)}")
        lines.append(f"batch_size={p.batch_size}")
        lines.append(f"bn_freeze_epoch={p.bn_freeze_epoch}")
        lines.append(f"epochs={p.epochs}")
        lines.append(f"seed={self.seed}")
        lines.append(f"augment={str(p.augment).lower()}")
        lines.append(f"grad_clip={p.grad_clip}")
        lines.append(f"charbonnier_eps={p.charbonnier_eps}")
        lines.append(f"renorm_r_max={p.renorm_r_max}")
        lines.append(f"renorm_d_max={p.renorm_d_max}")
        lines.append(f"checkpoint_every={p.checkpoint_every}")
        if self.out_dir:
            lines.append(f"out_dir={self.out_dir}")
        lines.append("[data]")
        for k in ("root", "checkpoint", "input_dir", "output_dir"):
            v = getattr(self, k)
            if v:
                lines.append(f"{k}={v}")
        lines.append(f"split={self.split}")
        lines.append(f"kind={self.kind}")
        lines.append(f"count={self.count}")
        lines.append(f"height={self.height}")
        lines.append(f"width={self.width}")
        lines.append(f"scale={self.scale}")
        lines.append("[eval]")
        lines.append(f"tta={str(self.tta).lower()}")
        lines.append(f"channel={self.channel}")
        if self.report:
            lines.append(f"report={self.report}")
        return "\n".join(lines) + "\n"


def resolve_config(args) -> CliConfig:
    """Merge config file and flags (flags win), then validate everything
    before any compute."""
    sections = (parse_config_file(args.config) if args.config
                else {s: {} for s in _SECTIONS})
    for sect, schema in _SECTIONS.items():
        for key in schema:
            flag = getattr(args, f"{sect}__{key}", None)
            if flag is not None:
                sections[sect][key] = flag

    m = sections["model"]
    model_given = bool(m)
    model = None
    label = "custom"
    if model_given:
        base = preset(m["preset"]) if "preset" in m else None
        if "preset" in m and len(m) == 1:
            label = m["preset"]
        explicit = {k: v for k, v in m.items() if k != "preset"}
        if base is not None:
            model = base.replace(**explicit)
        else:
            needed = {"s", "S", "B", "G", "g", "reduction_r"}
            missing = needed - explicit.keys()
            if missing:
                raise ConfigError(
                    f"model needs a preset or explicit values; missing "
                    f"{sorted(missing)}")
            model = ModelConfig(**explicit)

    t = dict(sections["train"])
    seed = t.pop("seed", 0)
    out_dir = t.pop("out_dir", None)
    plan = TrainPlan(seed=seed, **t)

    d = sections["data"]
    e = sections["eval"]
    cfg = CliConfig(model=model, plan=plan, seed=seed, out_dir=out_dir,
                    model_given=model_given, model_label=label)
    for k in _DATA_KEYS:
        if k in d:
            setattr(cfg, k, d[k])
    for k in _EVAL_KEYS:
        if k in e:
            setattr(cfg, k, e[k])
    if cfg.channel not in ("y", "rgb"):
        raise ConfigError(f"eval channel must be y or rgb, got {cfg.channel!r}")
    if cfg.kind not in ("vimeo", "frames"):
        raise ConfigError(f"data kind must be vimeo or frames, got {cfg.kind!r}")
    return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="grrn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("train", "optimize a model on a dataset"),
            ("eval", "score a checkpoint over a dataset"),
            ("upscale", "super-resolve every frame in a directory"),
            ("params", "parameter audit for presets or a custom config"),
            ("make-synthetic", "generate a procedural dataset")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI config file")
        for sect, schema in _SECTIONS.items():
            for key, kind in schema.items():
                flag = f"--{key}"
                dest = f"{sect}__{key}"
                if kind is bool:
                    p.add_argument(flag, dest=dest, default=None,
                                   type=lambda raw, k=key: _parse_bool(
                                       raw, f"flag --{k}"))
                elif kind == "intlist":
                    p.add_argument(flag, dest=dest, default=None,
                                   type=lambda raw, k=key: _convert(
                                       raw, "intlist", f"flag --{k}"))
                elif kind is str:
                    p.add_argument(flag, dest=dest, default=None)
                else:
                    p.add_argument(flag, dest=dest, default=None, type=kind)
    return parser


def _fmt_millions(count: int) -> str:
    return f"{count / 1e6:.2f}M"


def cmd_params(cfg: CliConfig) -> int:
    if cfg.model_given and cfg.model is not None:
        items = [(cfg.model_label, cfg.model)]
    else:
        items = list(PRESETS.items())
    print(f"{'config':<10} {'trainable':>10} {'batch-norm':>11}")
    for name, mc in items:
        tr, bn = count_parameters(build(mc, seed=0).params)
        print(f"{name:<10} {_fmt_millions(tr):>10} "
              f"{'(' + _fmt_millions(bn) + ')':>11}")
    return 0


def cmd_make_synthetic(cfg: CliConfig) -> int:
    if not cfg.root:
        raise ConfigError("make-synthetic needs data root (--root)")
    make_synthetic(cfg.root, cfg.count, cfg.height, cfg.width, cfg.scale,
                   cfg.seed)
    print(f"wrote {cfg.count} clips under {cfg.root}")
    return 0


def _load_manifest(cfg: CliConfig, split: str):
    if not cfg.root:
        raise ConfigError("dataset root required (--root)")
    if cfg.kind == "vimeo":
        return manifest_from_vimeo(cfg.root, split)
    return manifest_from_frames(cfg.root)


def cmd_train(cfg: CliConfig) -> int:
    if cfg.out_dir is None:
        raise ConfigError("train needs out_dir (--out_dir)")
    if cfg.checkpoint:
        ckpt = load_checkpoint(cfg.checkpoint)
        net = restore_network(ckpt)
        opt = restore_optimizer(ckpt)
        start = ckpt.epoch
        print(f"resumed from {cfg.checkpoint} at epoch {start}")
    else:
        if cfg.model is None:
            raise ConfigError("train needs a model preset or explicit values")
        net = build(cfg.model, seed=cfg.seed)
        opt = None
        start = 0
    manifest = _load_manifest(cfg, cfg.split)
    clips = [load_clip(manifest, i, net.config.n, net.config.scale_r)
             for i in range(len(manifest))]
    print(f"training on {len(clips)} clips")

    def progress(epoch, log):
        recent = log.step_losses[-1] if log.step_losses else float("nan")
        print(f"epoch {epoch:4d}  lr {log.lr_by_epoch[-1]:.2e}  "
              f"loss {recent:.5f}")

    _, log = train(net, clips, cfg.plan, out_dir=cfg.out_dir, optimizer=opt,
                   start_epoch=start, progress=progress)
    log.write_csv(Path(cfg.out_dir) / "train_log.csv")
    print(log.summary())
    return 0


def _predictor(net, use_tta):
    if use_tta:
        return lambda clip: tta_infer(net.forward, clip.lr_stack)
    return lambda clip: net.infer(clip.lr_stack)


def cmd_eval(cfg: CliConfig) -> int:
    if not cfg.checkpoint:
        raise ConfigError("eval needs a checkpoint (--checkpoint)")
    net = restore_network(load_checkpoint(cfg.checkpoint))
    manifest = _load_manifest(cfg, cfg.split)
    predict = _predictor(net, cfg.tta)
    report = evaluate(predict,
                      lambda i: load_clip(manifest, i, net.config.n,
                                          net.config.scale_r),
                      len(manifest), channel=cfg.channel)
    print(report.as_text(), end="")
    if cfg.report:
        csv_path = Path(cfg.report).with_suffix(".csv")
        txt_path = Path(cfg.report).with_suffix(".txt")
        csv_path.write_text(report.as_csv())
        txt_path.write_text(report.as_text())
        print(f"reports written to {csv_path} and {txt_path}")
    return 0


def cmd_upscale(cfg: CliConfig) -> int:
    if not cfg.checkpoint:
        raise ConfigError("upscale needs a checkpoint (--checkpoint)")
    if not cfg.input_dir or not cfg.output_dir:
        raise ConfigError("upscale needs --input_dir and --output_dir")
    net = restore_network(load_checkpoint(cfg.checkpoint))
    n = net.config.n
    in_dir = Path(cfg.input_dir)
    files = sorted(p for p in in_dir.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise DataError(f"no PNG frames in {in_dir}")
    frames = [read_image(p) for p in files]
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    predictor = (lambda w: tta_infer(net.forward, w)) if cfg.tta else net.infer
    for t, path in enumerate(files):
        idxs = [min(max(t + d, 0), len(files) - 1) for d in range(-n, n + 1)]
        window = np.stack([frames[i] for i in idxs], axis=2)
        sr = predictor(window)
        write_image(out_dir / path.name, sr)
    print(f"wrote {len(files)} frames to {out_dir}")
    return 0


_COMMANDS = {
    "params": cmd_params,
    "make-synthetic": cmd_make_synthetic,
    "train": cmd_train,
    "eval": cmd_eval,
    "upscale": cmd_upscale,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
        print(cfg.echo(), end="")
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
