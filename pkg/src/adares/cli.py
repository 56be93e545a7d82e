"""adares command line: featurize, gradcheck, train, eval, bench.

Exit codes: 0 success, 1 check/metric failure, 2 I/O error, 3 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import container
from .diffres import DiffRes, DiffResConfig, warp_rows
from .dsp import AudioError, SpectrogramConfig, frame_energy, load_wav, mel_spectrogram
from .harness.bench import BENCH_COLUMNS, bench_throughput
from .harness.data import SyntheticDatasetConfig, features_for, generate_dataset
from .harness.train import (
    DIAG_COLUMNS,
    TrainConfig,
    TrainingDiverged,
    clip_diagnostics,
    evaluate,
    load_run,
    run_training,
    write_csv,
    write_manifest,
)
from .losses import LossConfig

EXIT_OK, EXIT_FAIL, EXIT_IO, EXIT_USAGE = 0, 1, 2, 3

log = logging.getLogger("adares")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--input", help="input file or run directory")
    p.add_argument("--output-dir", default="adares-out")
    p.add_argument("--hop-ms", type=float, default=10.0)
    p.add_argument("--window-ms", type=float, default=25.0)
    p.add_argument("--n-mels", type=int, default=128)
    p.add_argument("--delta", type=float)
    p.add_argument("--fps-out", type=float)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--variant", default="diffres")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--json", action="store_true", help="machine-readable output")


def build_parser():
    parser = _Parser(prog="adares", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("featurize", help="WAV -> DiffRes features + per-frame CSV")
    _common(p)
    p.add_argument("--checkpoint", help="trained checkpoint for the importance network")

    p = sub.add_parser("gradcheck", help="finite-difference checks of every op and the full loss")
    _common(p)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--bins", type=int, default=8)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)

    p = sub.add_parser("train", help="train one variant on the synthetic dataset")
    _common(p)
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-test", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)

    p = sub.add_parser("eval", help="evaluate a training run directory")
    _common(p)

    p = sub.add_parser("bench", help="front-end throughput")
    _common(p)
    p.add_argument("--variants", help="comma-separated variants (same as --variant)")
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--seconds", type=float, default=1.0)
    return parser


def resolve_delta(args, fps_in):
    if args.delta is not None and args.fps_out is not None:
        raise UsageError("--delta and --fps-out are mutually exclusive")
    if args.fps_out is not None:
        if not 0 < args.fps_out <= fps_in:
            raise UsageError(f"--fps-out must lie in (0, {fps_in:g}]")
        return 1.0 - args.fps_out / fps_in
    delta = 0.5 if args.delta is None else args.delta
    if not 0.0 <= delta < 1.0:
        raise UsageError("--delta must lie in [0, 1)")
    return delta


def spec_config(args):
    try:
        return SpectrogramConfig(window_length_ms=args.window_ms, hop_ms=args.hop_ms,
                                 n_mels=args.n_mels)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _flags(args):
    return {k: v for k, v in vars(args).items() if k != "corrupt"}


def _emit(args, payload, text):
    print(json.dumps(payload, indent=2, default=str) if args.json else text)


def cmd_featurize(args):
    spec = spec_config(args)
    delta = resolve_delta(args, spec.fps)
    if not args.input:
        raise UsageError("featurize needs --input WAV")
    try:
        cfg = DiffResConfig(delta=delta, lam=args.lam, epsilon=args.epsilon)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    wave = load_wav(args.input, spec.sample_rate)
    sp = mel_spectrogram(wave, spec)
    energy = frame_energy(sp)
    layer = DiffRes(cfg, spec.n_mels, np.random.default_rng(args.seed))
    if args.checkpoint:
        state = container.load(args.checkpoint)
        if not isinstance(state, dict):
            raise container.ContainerError("checkpoint must be a named-tensor ADRS file")
        prefix = "diffres." if any(k.startswith("diffres.") for k in state) else ""
        try:
            layer.load_state_dict({k[len(prefix):]: v for k, v in state.items()
                                   if k.startswith(prefix)})
        except (KeyError, ValueError) as exc:
            raise container.ContainerError(f"incompatible checkpoint: {exc}") from exc
    layer.eval()
    out = layer(sp.values)
    t = out.warp.W.shape[-2]

    dest = Path(args.output_dir)
    dest.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    container.save_named(dest / f"{stem}.adrs", {
        "mean": out.mean_channel.data,
        "max": out.max_channel.data,
        "resenc": out.resolution_encoding.data,
    })
    rows = warp_rows(out.s.data, t)
    frames = [{"frame": j, "score_raw": float(out.s_raw.data[j]), "score": float(out.s.data[j]),
               "energy": float(energy[j]), "output_frame": int(rows[j])} for j in range(sp.T)]
    write_csv(dest / f"{stem}.frames.csv", frames,
              ("frame", "score_raw", "score", "energy", "output_frame"))
    diag = {"step": 0, "clip_id": stem}
    if delta > 0:
        diag.update(clip_diagnostics(out.s.data, energy, LossConfig(delta, args.lam, args.epsilon)))
    write_csv(dest / f"{stem}.diagnostics.csv", [diag], DIAG_COLUMNS)
    write_manifest(dest / f"{stem}.manifest.json", command="featurize", flags=_flags(args),
                   spectrogram=asdict(spec), diffres=asdict(cfg))
    summary = {"input_frames": sp.T, "output_frames": t, "features": str(dest / f"{stem}.adrs")}
    _emit(args, summary, f"{args.input}: {sp.T} frames -> {t} frames, wrote {dest}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradchecks import run_all

    report = run_all(bins=args.bins, frames=args.frames, seed=args.seed, corrupt=args.corrupt)
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        for name, res in report["checks"].items():
            status = "ok  " if res["passed"] else "FAIL"
            print(f"{status} {name:<28} rel_err={res['error']:.3e} tol={res['tol']:.0e}")
    if not report["passed"]:
        failed = [n for n, r in report["checks"].items() if not r["passed"]]
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _train_config(args, delta):
    try:
        return TrainConfig(variant=args.variant, delta=delta, lam=args.lam, epsilon=args.epsilon,
                           epochs=args.epochs, batch_size=args.batch, lr=args.lr, seed=args.seed,
                           hop_ms=args.hop_ms, window_ms=args.window_ms, n_mels=args.n_mels)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args):
    spec_config(args)
    delta = resolve_delta(args, 1000.0 / args.hop_ms)
    cfg = _train_config(args, delta)
    data_cfg = SyntheticDatasetConfig(seed=args.seed, n_train=args.n_train, n_test=args.n_test)
    try:
        data_cfg.validate()
        cfg.build_pipeline(data_cfg.n_classes)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        result, report = run_training(cfg, data_cfg, args.output_dir, flags=_flags(args))
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    final = result.history[-1] if result.history else {}
    payload = {"run_dir": args.output_dir, "final": final, "test_accuracy": report["accuracy"]}
    _emit(args, payload, f"trained {cfg.variant}: test accuracy {report['accuracy']:.4f} "
                         f"-> {args.output_dir}")
    return EXIT_OK


def cmd_eval(args):
    if not args.input:
        raise UsageError("eval needs --input RUN_DIR")
    pipeline, cfg, data_cfg = load_run(args.input)
    _, test_set = generate_dataset(data_cfg)
    spec = pipeline.input_config(cfg.spec_config(data_cfg.sample_rate))
    report = evaluate(pipeline, features_for(test_set, spec))
    dest = Path(args.output_dir)
    dest.mkdir(parents=True, exist_ok=True)
    (dest / "eval.json").write_text(json.dumps(report, indent=2) + "\n")
    _emit(args, report, f"accuracy {report['accuracy']:.4f}")
    return EXIT_OK


def cmd_bench(args):
    spec = spec_config(args)
    names = args.variants or args.variant
    variants = [v.strip() for v in names.split(",") if v.strip()]
    fps_out = args.fps_out
    if args.delta is not None:
        resolve_delta(args, spec.fps)
        fps_out = (1.0 - args.delta) * spec.fps
    if fps_out is None:
        fps_out = 25.0
    try:
        rows = bench_throughput(variants, seconds=args.seconds, repetitions=args.repetitions,
                                batch=args.batch, fps_out=fps_out, spec_cfg=spec, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    dest = Path(args.output_dir)
    dest.mkdir(parents=True, exist_ok=True)
    write_csv(dest / "bench.csv", rows, BENCH_COLUMNS)
    write_manifest(dest / "manifest.json", command="bench", flags=_flags(args))
    text = "\n".join(f"{r['variant']:<24} {r['fps_out']:>6.1f} fps  "
                     f"{r['clips_per_second']:>9.1f} clips/s" for r in rows)
    _emit(args, rows, text)
    return EXIT_OK


COMMANDS = {
    "featurize": cmd_featurize,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"adares: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, AudioError, container.ContainerError) as exc:
        print(f"adares: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
