"""Command-line front end.

Subcommands: synth, edit, extract, train, benchmark, fidelity, plot,
diagnose. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import bench, editor, plots, training
from .bench import DataError
from .extractor import (ExtractorConfig, classical_extract, extract_waveform,
                        load_weights, save_weights, WeightsFormatError)
from .signals import (Waveform, TransformSpec, bandpass, estimate_hr,
                      read_waveform_csv, transform_signal, write_waveform_csv)
from .synth import ClipFormatError, read_clip, write_clip


class ConfigError(RuntimeError):
    pass


def parse_config_text(text, target):
    """Apply `key = value` lines to a dataclass instance; strict on keys."""
    fields = {f.name: f for f in dataclasses.fields(target)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"line {lineno}: invalid config key {key!r}")
        current = getattr(target, key)
        try:
            if isinstance(current, bool):
                updates[key] = value.lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                updates[key] = int(value)
            elif isinstance(current, float):
                updates[key] = float(value)
            elif isinstance(current, tuple):
                parts = [p for p in value.replace(",", " ").split() if p]
                conv = int if all(isinstance(c, int) for c in current) else float
                updates[key] = tuple(conv(p) for p in parts)
            else:
                updates[key] = value
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}") from exc
    for key, value in updates.items():
        setattr(target, key, value)
    try:
        target.__post_init__()
    except AttributeError:
        pass
    return target


def load_config(path, target):
    if path is None:
        return target
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(p.read_text(), target)


def config_text(target):
    lines = []
    for f in dataclasses.fields(target):
        value = getattr(target, f.name)
        if isinstance(value, tuple):
            lines.append(f"{f.name} = {', '.join(str(v) for v in value)}")
        elif isinstance(value, (bool, int, float, str)):
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    cfg = load_config(args.config, bench.DatasetConfig())
    if args.seed is not None:
        cfg.seed = args.seed
    rows = bench.synth_dataset(cfg, args.out)
    if args.verbose:
        print(f"wrote {len(rows)} clips to {args.out}")
    return 0


def cmd_edit(args):
    clip = read_clip(args.infile)
    signal = read_waveform_csv(args.signal)
    if len(signal) != clip.frames.shape[0]:
        raise DataError(f"signal length {len(signal)} != clip length "
                        f"{clip.frames.shape[0]}")
    s0 = Waveform(training.unit_rms(bandpass(signal).samples), clip.fps)
    editor_obj = None
    if args.weights:
        gen = training.load_generator(args.weights)
        editor_obj = editor.LearnedEditor(gen)
    edited = bench.edit_for_mode(clip, s0, args.mode, alpha=args.alpha,
                                 tau=args.tau, rho=args.rho,
                                 editor_obj=editor_obj)
    write_clip(edited, args.out)
    if args.report:
        bench.write_csv(args.report, ["mode", "psnr_db", "ssim", "n_frames"],
                        [[args.mode, editor.psnr(clip, edited),
                          editor.ssim(clip, edited), clip.frames.shape[0]]])
    if args.verbose:
        print(f"edited clip written to {args.out}")
    return 0


def cmd_extract(args):
    clip = read_clip(args.infile)
    if args.method == "net":
        if not args.weights:
            raise ConfigError("--weights is required for method 'net'")
        params, ecfg = load_weights(args.weights)
        wave = extract_waveform(params, ecfg, clip)
    else:
        wave = classical_extract(clip, method=args.method)
    write_waveform_csv(wave, args.out)
    if args.verbose:
        print(f"estimated heart rate: {estimate_hr(wave):.2f} bpm")
    return 0


def cmd_train(args):
    cfg = load_config(args.config, training.TrainConfig())
    if args.seed is not None:
        cfg.seed = args.seed
    if args.stage == 1:
        pairs = bench.load_labeled(args.data, "train")
        params, ecfg, history = training.train_stage1(pairs, cfg)
        save_weights(args.out, params, ecfg)
        if args.log:
            bench.write_csv(args.log, ["epoch", "loss"],
                            [[i, v] for i, v in enumerate(history)])
    elif args.stage == 2:
        pairs = bench.load_labeled(args.data, "train")
        if not args.reference:
            raise ConfigError("--reference weights (stage-1 extractor) are "
                              "required for stage 2")
        ref_params, ref_cfg = load_weights(args.reference)
        gen, history = training.train_editor(pairs, ref_params, ref_cfg, cfg)
        training.save_generator(args.out, gen)
        if args.log:
            bench.write_csv(args.log, ["epoch", "loss"],
                            [[i, v] for i, v in enumerate(history)])
    else:
        clips = bench.load_unlabeled(args.data, "train")
        editor_obj = editor.AnalyticEditor()
        if args.editor_weights:
            gen = training.load_generator(args.editor_weights)
            editor_obj = editor.LearnedEditor(gen)
        params, ecfg, history, diag = training.train_stage3(clips, editor_obj, cfg)
        save_weights(args.out, params, ecfg)
        if args.log:
            with open(args.log, "w", newline="") as fh:
                fh.write(training.breakdown_csv(history))
        if args.verbose:
            print(f"degenerate correlations encountered: "
                  f"{diag.degenerate_correlations}")
    if args.verbose:
        print(f"weights written to {args.out}")
    return 0


def cmd_benchmark(args):
    methods = {}
    skipped = []
    for name in args.methods.split(","):
        name = name.strip()
        if not name:
            continue
        if name in ("green", "chrom", "pos"):
            methods[name] = bench.method_fn(name)
        else:
            skipped.append(name)
    for spec in args.net or []:
        if "=" not in spec:
            raise ConfigError(f"--net expects NAME=weights.rpwt, got {spec!r}")
        name, path = spec.split("=", 1)
        if not Path(path).exists():
            skipped.append(name)
            continue
        methods[name] = bench.method_fn(name, path)
    if not methods:
        raise DataError("no runnable methods")
    summary, detail, avg_delta = bench.benchmark(args.data, methods)
    header, rows = bench.metrics_rows_to_csv(summary, avg_delta)
    for name in skipped:
        rows.append([name, "skipped:missing-weights", "", "", "", 0, "", ""])
        print(f"warning: skipping method {name!r} (missing weights)",
              file=sys.stderr)
    bench.write_csv(args.out, header, rows)
    if args.detail:
        bench.write_csv(args.detail,
                        ["method", "scenario", "clip_index", "hr_true",
                         "hr_pred", "abs_err"], detail)
    return 0


def cmd_fidelity(args):
    rows = bench.fidelity(args.data, max_clips=args.max_clips)
    bench.write_csv(args.out, ["mode", "psnr_db", "ssim", "n_frames"],
                    [[r.mode, r.psnr, r.ssim, r.n_frames] for r in rows])
    if args.verbose:
        for r in rows:
            print(f"{r.mode}: psnr {r.psnr:.2f} dB ssim {r.ssim:.4f}")
    return 0


def cmd_diagnose(args):
    if args.kind == "falsifiability":
        rows = bench.falsifiability(n_seeds=args.n, seed0=args.seed or 0)
        bench.write_csv(args.out, ["seed", "true_residual", "artifact_residual",
                                   "true_alpha", "artifact_alpha"], rows)
    elif args.kind == "flicker-lock":
        methods = {}
        for spec in args.net or []:
            name, path = spec.split("=", 1)
            methods[name] = bench.method_fn(name, path)
        for name in (args.methods or "green,pos").split(","):
            if name.strip():
                methods[name.strip()] = bench.method_fn(name.strip())
        rows = bench.flicker_lock_eval(methods, n_clips=args.n,
                                       seed0=args.seed or 0)
        bench.write_csv(args.out, ["method", "clip_index", "hr_pred",
                                   "pulse_bpm", "flicker_bpm", "nearer_pulse"],
                        rows)
    elif args.kind == "sweep":
        clip = read_clip(args.infile)
        signal = read_waveform_csv(args.signal)
        s0 = Waveform(training.unit_rms(bandpass(signal).samples), clip.fps)
        sweep = bench.amplitude_sweep(clip, s0)
        t = np.arange(clip.frames.shape[0]) / clip.fps
        header = ["t_seconds"] + [f"alpha_{a:+.1f}" for a in sweep]
        rows = [[t[i]] + [sweep[a].samples[i] for a in sweep]
                for i in range(len(t))]
        bench.write_csv(args.out, header, rows)
    else:
        raise ConfigError(f"unknown diagnose kind {args.kind!r}")
    return 0


def cmd_plot(args):
    rows = bench.read_csv(args.infile)
    if not rows:
        raise DataError(f"{args.infile}: empty input, nothing to plot")
    cols = list(rows[0].keys())
    if args.kind == "waveforms" or args.kind == "sweep":
        x = np.array([r[cols[0]] for r in rows], dtype=float)
        series = {c: (x, np.array([r[c] for r in rows], dtype=float))
                  for c in cols[1:]}
        svg = plots.line_plot(series, title=args.title or "waveforms",
                              xlabel=cols[0])
    elif args.kind == "loss":
        x = np.array([r["epoch"] for r in rows], dtype=float)
        names = [c for c in cols if c != "epoch"]
        series = {c: (x, np.array([r[c] for r in rows], dtype=float))
                  for c in names}
        svg = plots.line_plot(series, title=args.title or "training loss",
                              xlabel="epoch")
    elif args.kind == "bars":
        labels = [f"{r[cols[0]]}:{r[cols[1]]}" for r in rows]
        values = [float(r[args.value or cols[2]]) for r in rows]
        svg = plots.bar_chart(labels, values, title=args.title or args.value or cols[2])
    else:
        raise ConfigError(f"unknown plot kind {args.kind!r}")
    Path(args.out).write_text(svg)
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="rppglab",
                                description="synthetic pulse-video bench, "
                                "chrominance editor, and extractor training")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a clip dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("edit", help="apply a chrominance edit to a clip")
    s.add_argument("--in", dest="infile", required=True)
    s.add_argument("--signal", required=True)
    s.add_argument("--mode", required=True,
                   choices=("null", "amplitude", "phase", "frequency"))
    s.add_argument("--alpha", type=float, default=bench.FIDELITY_ALPHA)
    s.add_argument("--tau", type=int, default=bench.FIDELITY_TAU)
    s.add_argument("--rho", type=float, default=bench.FIDELITY_RHO)
    s.add_argument("--weights")
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(fn=cmd_edit)

    s = sub.add_parser("extract", help="extract a pulse waveform")
    s.add_argument("--in", dest="infile", required=True)
    s.add_argument("--method", required=True,
                   choices=("green", "chrom", "pos", "net"))
    s.add_argument("--weights")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_extract)

    s = sub.add_parser("train", help="train extractor or editor")
    s.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--seed", type=int)
    s.add_argument("--reference", help="stage-1 weights (stage 2 only)")
    s.add_argument("--editor-weights", help="trained generator (stage 3)")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("benchmark", help="HR error across methods/scenarios")
    s.add_argument("--data", required=True)
    s.add_argument("--methods", default="green,chrom,pos")
    s.add_argument("--net", action="append", metavar="NAME=WEIGHTS")
    s.add_argument("--out", required=True)
    s.add_argument("--detail")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_benchmark)

    s = sub.add_parser("fidelity", help="PSNR/SSIM of the edit modes")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-clips", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_fidelity)

    s = sub.add_parser("diagnose", help="falsifiability and nuisance probes")
    s.add_argument("--kind", required=True,
                   choices=("falsifiability", "flicker-lock", "sweep"))
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--in", dest="infile")
    s.add_argument("--signal")
    s.add_argument("--methods")
    s.add_argument("--net", action="append", metavar="NAME=WEIGHTS")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_diagnose)

    s = sub.add_parser("plot", help="render CSV outputs as SVG")
    s.add_argument("--kind", required=True,
                   choices=("waveforms", "sweep", "loss", "bars"))
    s.add_argument("--in", dest="infile", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--value")
    s.add_argument("--title")
    s.set_defaults(fn=cmd_plot)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ClipFormatError, WeightsFormatError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
