"""Operator command line: synthesize, build, train, transfer, score.

Every subcommand is a batch job. Exit codes: 0 success, 2 usage error,
3 data error (bad files, bad geometry, bad config), 4 numeric failure.
Relative --config paths are also looked up under $ROOMSHIFT_CONFIG_DIR.
"""

import argparse
import os
import sys
from dataclasses import dataclass

from .dataset import (
    DEFAULT_CORPUS,
    DEFAULT_PAIRS,
    DEFAULT_ROOMS,
    DEFAULT_TRANSFER,
    MANIFEST_NAME,
    build_dataset,
    manifest_records,
)
from .audio_io import read_wav, write_wav
from .dsp import LogSpectrogram, fixed_log_spectrogram, read_spec1, write_spec1
from .errors import DataError, NumericError, RoomshiftError
from .evaluator import evaluate_transfer, load_evaluator
from .fileio import atomic_write_json, dump_json, sha256_file
from .rir import SIZE_CLASSES, RoomSpec, image_source_rir, sample_room, save_rir
from .seeding import child_rng
from .synth import DEFAULT_DURATION, SIGNAL_KINDS, chirp, noise, pluck, tone
from .training import TrainConfig, train_evaluator, train_transfer
from .transfer_model import load_transfer_model, transfer_waveform

CONFIG_DIR_ENV = "ROOMSHIFT_CONFIG_DIR"


class UsageError(Exception):
    """Flag combinations argparse cannot express on its own."""


def _note(msg):
    print(msg, file=sys.stderr)


# --- make-rir -----------------------------------------------------------------


def _cmd_make_rir(args):
    explicit = [
        (flag, value)
        for flag, value in (
            ("--dims", args.dims),
            ("--source", args.source),
            ("--receiver", args.receiver),
            ("--alpha", args.alpha),
        )
        if value is not None
    ]
    if explicit:
        missing = {"--dims", "--source", "--receiver", "--alpha"} - {flag for flag, _ in explicit}
        if missing:
            raise UsageError(f"explicit room geometry also needs {' '.join(sorted(missing))}")
        if len(args.alpha) == 1:
            alpha = tuple(args.alpha) * 6
        elif len(args.alpha) == 6:
            alpha = tuple(args.alpha)
        else:
            raise UsageError(f"--alpha takes 1 or 6 values, got {len(args.alpha)}")
        room = RoomSpec(
            tuple(args.dims),
            alpha,
            tuple(args.source),
            tuple(args.receiver),
            max_order=args.max_order,
            fs=args.fs,
            length=args.length,
        )
        seed_used = None
    else:
        rng = child_rng(args.seed, "make-rir")
        room = sample_room(rng, args.sample, max_order=args.max_order, fs=args.fs, length=args.length)
        seed_used = args.seed
    ir = image_source_rir(room)
    save_rir(ir, args.out, seed=seed_used)
    if ir.truncated_taps:
        _note(f"note: {ir.truncated_taps} reflections fell past the {room.length}-sample window")
    print(f"wrote {args.out}")
    print(f"nominal RT60: {ir.rt60_nominal:.3f} s")
    return 0


# --- synth-dry ----------------------------------------------------------------


def _cmd_synth_dry(args):
    rng = child_rng(args.seed, "synth-dry")
    if args.kind == "tone":
        clip = tone(args.freq, args.dur, harmonics=args.harmonics)
    elif args.kind == "noise":
        clip = noise(args.dur, rng=rng, lowpass_hz=args.lowpass)
    elif args.kind == "chirp":
        clip = chirp(args.f0, args.f1, args.dur)
    else:
        clip = pluck(args.freq, args.dur, rng=rng)
    write_wav(clip, args.out)
    print(f"wrote {args.out}: {args.kind}, {len(clip.samples)} samples at {clip.sample_rate} Hz")
    return 0


# --- build-dataset ------------------------------------------------------------


def _cmd_build_dataset(args):
    build_dataset(
        args.out,
        args.seed,
        n_rooms=args.rooms,
        n_transfer=args.examples,
        n_pairs=args.pairs,
        dry_dir=args.dry_dir,
        corpus_size=args.corpus,
        progress=_note,
    )
    print(f"wrote {args.out}: {args.rooms} rooms, {args.examples} transfer examples, {args.pairs} pairs")
    return 0


# --- training -----------------------------------------------------------------


def _resolve_config(path):
    if os.path.exists(path):
        return path
    if not os.path.isabs(path):
        env_dir = os.environ.get(CONFIG_DIR_ENV)
        if env_dir:
            candidate = os.path.join(env_dir, path)
            if os.path.exists(candidate):
                return candidate
            raise DataError(f"config {path} not found (also tried {candidate})")
    raise DataError(f"config {path} not found")


def _cmd_train_transfer(args):
    cfg = TrainConfig.from_json(_resolve_config(args.config))
    result = train_transfer(cfg, resume=args.resume, progress=_note)
    print(f"trained {result.epochs_run} epochs; best validation loss {result.best_val:.6f}")
    print(f"checkpoints: {result.best_path} (best), {result.last_path} (last)")
    print(f"metrics: {result.metrics_path}")
    return 0


def _cmd_train_eval(args):
    cfg = TrainConfig.from_json(_resolve_config(args.config))
    result = train_evaluator(cfg, resume=args.resume, progress=_note)
    print(
        f"trained {result.epochs_run} epochs; best validation loss {result.best_val:.6f}, "
        f"final held-out accuracy {result.val_accuracies[-1]:.3f}"
    )
    print(f"checkpoints: {result.best_path} (best), {result.last_path} (last)")
    print(f"metrics: {result.metrics_path}")
    return 0


# --- transfer -----------------------------------------------------------------


def _cmd_transfer(args):
    model = load_transfer_model(args.model)
    x = read_wav(args.input)
    cond = read_wav(args.cond)
    render = transfer_waveform(x, cond, model, gl_iterations=args.gl_iters)
    write_wav(render.clip, args.out)
    if args.export_spec:
        os.makedirs(args.export_spec, exist_ok=True)
        for name, spec in (
            ("input", render.input_spec),
            ("predicted", render.predicted_spec),
            ("residual", render.residual_spec),
        ):
            write_spec1(spec, os.path.join(args.export_spec, name + ".spec"))
        print(f"exported input/predicted/residual spectrograms to {args.export_spec}")
    print(f"wrote {args.out}: {len(render.clip.samples)} samples")
    print(f"spectral convergence after {args.gl_iters} iterations: {render.convergence[-1]:.6f}")
    return 0


# --- score / evaluate ---------------------------------------------------------


def _cmd_score(args):
    evaluator = load_evaluator(args.eval)
    cfg = evaluator.stft_config
    specs = []
    for path in (args.a, args.b):
        clip = read_wav(path)
        if clip.sample_rate != cfg.sample_rate:
            raise DataError(f"{path}: rate {clip.sample_rate} != evaluator rate {cfg.sample_rate}")
        specs.append(fixed_log_spectrogram(clip, cfg, evaluator.hyper.frames))
    print(f"P(different): {evaluator.score_pair(specs[0], specs[1]):.6f}")
    return 0


@dataclass
class _EvalExample:
    input_spec: LogSpectrogram
    cond_spec: LogSpectrogram
    ids: tuple


def _cmd_evaluate(args):
    model = load_transfer_model(args.model)
    evaluator = load_evaluator(args.eval)
    if model.stft_config != evaluator.stft_config:
        raise DataError(
            f"transfer model and evaluator disagree on analysis settings: "
            f"{model.stft_config} vs {evaluator.stft_config}"
        )
    _, records = manifest_records(args.dataset, kind="transfer", split=args.split)
    if not records:
        raise DataError(f"dataset {args.dataset} has no transfer examples in split {args.split!r}")
    examples = []
    for rec in records:
        examples.append(
            _EvalExample(
                read_spec1(os.path.join(args.dataset, rec["input"])),
                read_spec1(os.path.join(args.dataset, rec["cond"])),
                tuple(rec["ids"]),
            )
        )
    hashes = {
        "transfer_model": sha256_file(args.model),
        "evaluator": sha256_file(args.eval),
        "manifest": sha256_file(os.path.join(args.dataset, MANIFEST_NAME)),
    }
    report = evaluate_transfer(model, evaluator, examples, hashes=hashes, batch=args.batch)
    report["split"] = args.split
    if args.out:
        atomic_write_json(args.out, report)
        print(f"wrote {args.out}")
        print(
            f"mean score vs conditioning: before {report['mean_before']:.4f}, "
            f"after {report['mean_after']:.4f} over {report['count']} examples"
        )
    else:
        print(dump_json(report))
    return 0


# --- parser -------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="roomshift",
        description="Re-render audio into the acoustic space of a conditioning recording.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")

    p = sub.add_parser("make-rir", help="simulate a shoebox room impulse response")
    p.add_argument("--out", required=True, help="output WAV path (JSON sidecar written next to it)")
    p.add_argument("--sample", choices=sorted(SIZE_CLASSES), default="medium", help="room size class to sample")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=float, nargs=3, metavar=("LX", "LY", "LZ"), help="explicit room dimensions (m)")
    p.add_argument("--alpha", type=float, nargs="+", metavar="A", help="absorption, 1 shared or 6 per-surface values")
    p.add_argument("--source", type=float, nargs=3, metavar=("X", "Y", "Z"))
    p.add_argument("--receiver", type=float, nargs=3, metavar=("X", "Y", "Z"))
    p.add_argument("--max-order", type=int, default=20, help="reflection order cap")
    p.add_argument("--fs", type=int, default=16000)
    p.add_argument("--length", type=int, default=24000, help="impulse response length in samples")
    p.set_defaults(func=_cmd_make_rir)

    p = sub.add_parser("synth-dry", help="render a deterministic dry test signal")
    p.add_argument("--kind", choices=SIGNAL_KINDS, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dur", type=float, default=DEFAULT_DURATION, help="duration in seconds")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--freq", type=float, default=440.0, help="fundamental for tone/pluck (Hz)")
    p.add_argument("--harmonics", type=int, default=1, help="tone partial count")
    p.add_argument("--f0", type=float, default=100.0, help="chirp start (Hz)")
    p.add_argument("--f1", type=float, default=4000.0, help="chirp end (Hz)")
    p.add_argument("--lowpass", type=float, default=None, help="noise brick-wall cutoff (Hz)")
    p.set_defaults(func=_cmd_synth_dry)

    p = sub.add_parser("build-dataset", help="synthesize a full training dataset")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rooms", type=int, default=DEFAULT_ROOMS)
    p.add_argument("--examples", type=int, default=DEFAULT_TRANSFER, help="transfer example count")
    p.add_argument("--pairs", type=int, default=DEFAULT_PAIRS, help="same/different pair count")
    p.add_argument("--corpus", type=int, default=DEFAULT_CORPUS, help="synthetic dry clip count")
    p.add_argument("--dry-dir", default=None, help="directory of extra dry WAVs to mix in")
    p.set_defaults(func=_cmd_build_dataset)

    for name, func, blurb in (
        ("train-transfer", _cmd_train_transfer, "train the transfer network"),
        ("train-eval", _cmd_train_eval, "train the acoustic-space evaluator"),
    ):
        p = sub.add_parser(name, help=blurb)
        p.add_argument("--config", required=True, help=f"JSON config (relative paths also try ${CONFIG_DIR_ENV})")
        p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
        p.set_defaults(func=func)

    p = sub.add_parser("transfer", help="re-render a recording into a conditioning recording's space")
    p.add_argument("--input", required=True, help="WAV to re-render")
    p.add_argument("--cond", required=True, help="WAV describing the target space")
    p.add_argument("--model", required=True, help="transfer checkpoint")
    p.add_argument("--out", required=True, help="output WAV")
    p.add_argument("--gl-iters", type=int, default=60, help="phase reconstruction iterations")
    p.add_argument("--export-spec", default=None, metavar="DIR", help="also write input/predicted/residual .spec files")
    p.set_defaults(func=_cmd_transfer)

    p = sub.add_parser("score", help="probability that two recordings are from different spaces")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--eval", required=True, help="evaluator checkpoint")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("evaluate", help="score a transfer model against a dataset split")
    p.add_argument("--model", required=True, help="transfer checkpoint")
    p.add_argument("--eval", required=True, help="evaluator checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--out", default=None, help="write the JSON report here instead of stdout")
    p.set_defaults(func=_cmd_evaluate)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except (RoomshiftError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
