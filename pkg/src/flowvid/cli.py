"""Command-line entry point.

Subcommands: datagen, train, generate, predict, ablate, eval, plot.
Model/training options mirror the RunConfig keys; a base config file can be
given with --config (or the FLOWVID_CONFIG environment variable, which only
overrides the config path) and individual flags override its values.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, save_config
from .data import LabelMap, load_sample
from .synth import PRESETS, make_dataset


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="base RunConfig file (key=value)")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "fg_classes":
            parser.add_argument(flag, type=str, default=None, help="comma-separated class ids")
        elif f.type in ("int", int):
            parser.add_argument(flag, type=int, default=None)
        elif f.type in ("float", float):
            parser.add_argument(flag, type=float, default=None)
        else:
            parser.add_argument(flag, type=str, default=None)


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    path = args.config or os.environ.get("FLOWVID_CONFIG")
    config = load_config(path) if path else RunConfig()
    overrides = {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is None:
            continue
        if f.name == "fg_classes":
            value = tuple(int(x) for x in value.split(",") if x.strip() != "")
        overrides[f.name] = value
    return config.replace(**overrides) if overrides else config


def _cmd_datagen(args) -> int:
    make_dataset(args.out, args.preset, args.n, args.seed, args.t, args.size, args.size)
    print(f"wrote {args.n} {args.preset} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .pipeline import train

    config = _resolve_config(args)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    save_config(config, Path(args.out) / "config.txt")
    ckpt = train(config, args.data, args.out, resume_from=args.resume)
    print(f"checkpoint: {ckpt}")
    return 0


def _load_label(args) -> LabelMap:
    if args.sample:
        return load_sample(args.sample).label
    from PIL import Image

    classes = np.asarray(Image.open(args.label), dtype=np.int64)
    fg = tuple(int(x) for x in args.fg_classes.split(",")) if args.fg_classes else ()
    return LabelMap(classes, args.num_classes, frozenset(fg))


def _write_sequences(sequences, out_dir: Path) -> None:
    from PIL import Image

    from .data import frames_to_bytes

    out_dir.mkdir(parents=True, exist_ok=True)
    for i, seq in enumerate(sequences):
        d = out_dir / f"generated_{i:03d}"
        d.mkdir(exist_ok=True)
        for k, frame in enumerate(frames_to_bytes(seq.frames)):
            Image.fromarray(frame.transpose(1, 2, 0), "RGB").save(d / f"frame_{k:02d}.png")


def _cmd_generate(args) -> int:
    from .pipeline import PaletteColorizer, generate

    label = _load_label(args)
    palette = json.loads(Path(args.palette).read_text())
    sequences = generate(label, PaletteColorizer(palette), args.checkpoint, args.n_samples, args.seed)
    _write_sequences(sequences, Path(args.out))
    print(f"wrote {len(sequences)} sequences to {args.out}")
    return 0


def _cmd_predict(args) -> int:
    from .pipeline import predict_from_frame

    sample = load_sample(args.sample)
    sequences = predict_from_frame(
        sample.frames.frames[0], sample.label, args.checkpoint, args.seed, args.n_samples
    )
    _write_sequences(sequences, Path(args.out))
    print(f"wrote {len(sequences)} sequences to {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    from .pipeline import run_ablation

    config = _resolve_config(args)
    result = run_ablation(args.variant, config, args.train_data, args.test_data, args.out)
    for mode, report in result["reports"].items():
        print(f"{args.variant} [{mode}]: EPE_bwd={report.mean_epe_bwd:.3f} "
              f"EPE_fg={report.mean_epe_fwd_fg:.3f} PSNR={report.mean_psnr:.2f}")
    return 0


def _cmd_eval(args) -> int:
    from .pipeline import evaluate

    report = evaluate(args.checkpoint, args.data, z_mode=args.mode, seed=args.seed,
                      max_samples=args.max_samples)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    print(json.dumps(report.to_dict()["mean"], indent=2))
    print(f"report: {out}")
    return 0


def _cmd_plot(args) -> int:
    from .plots import make_plots

    report = json.loads(Path(args.report).read_text()) if args.report else None
    strip = None
    if args.sample and args.checkpoint:
        from .pipeline import load_trained, sample_sequences

        sample = load_sample(args.sample)
        config, modules = load_trained(args.checkpoint)
        seq = sample_sequences(modules, config, sample.frames.frames[0], sample.label, 1, args.seed)[0]
        flow = None
        if sample.flow is not None:
            flow = sample.flow.backward
        strip = {"gt": sample.frames.frames[1:], "pred": seq.frames[1:], "flow": flow}
    written = make_plots(args.log, report, args.out, strip)
    print("\n".join(str(p) for p in written))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowvid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--preset", choices=PRESETS, default="translate1")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=_cmd_datagen)

    p = sub.add_parser("train", help="train the image-to-video model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path, default=None)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="label map -> video samples")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--sample", type=Path, default=None, help="sample dir providing the label map")
    p.add_argument("--label", type=Path, default=None, help="label PNG (with --num-classes)")
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--fg-classes", type=str, default=None)
    p.add_argument("--palette", type=Path, required=True, help="JSON {class: [r, g, b]} in [0,1]")
    p.add_argument("--n-samples", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("predict", help="starting frame -> video samples")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--sample", type=Path, required=True, help="sample dir providing frame 0")
    p.add_argument("--n-samples", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("ablate", help="train + evaluate one ablation variant")
    p.add_argument("--variant", required=True,
                   choices=("no_flow", "no_semantic", "concat_semantic", "split_semantic"))
    p.add_argument("--train-data", type=Path, required=True)
    p.add_argument("--test-data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("eval", help="compute the metrics report for a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--mode", choices=("posterior", "prior"), default="posterior")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-samples", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("plot", help="loss curves, metric plots, frame strips")
    p.add_argument("--log", type=Path, default=None, help="loss_log.jsonl from training")
    p.add_argument("--report", type=Path, default=None, help="metrics report JSON")
    p.add_argument("--sample", type=Path, default=None, help="sample dir for a frame strip")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
