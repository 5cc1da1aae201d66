"""``vsegan`` command-line entry point.

Every subcommand echoes its fully resolved configuration as JSON before
running. A ``--config`` JSON file supplies defaults that explicit flags
override; unknown keys are rejected.

Exit codes: 0 success, 2 usage error, 3 contract violation, 4 integrity error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dsp
from .errors import ContractViolation, IntegrityError

EXIT_OK, EXIT_USAGE, EXIT_CONTRACT, EXIT_INTEGRITY = 0, 2, 3, 4


class UsageError(Exception):
    pass


def snr_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed SNR list {text!r}; expected e.g. -5,0") from None
    if not values or not all(np.isfinite(values)):
        raise argparse.ArgumentTypeError(f"malformed SNR list {text!r}")
    return values


# Per-subcommand options that may come from flags or the JSON config: name -> default.
SYNTH_OPTIONS = {"out": None, "train": 200, "val": 20, "test": 20, "seed": 0, "duration": 2.0,
                 "train_snr": -5.0, "eval_snr": 0.0, "media": True}
ENHANCE_OPTIONS = {"ckpt": None, "wav": None, "frames": None, "out": None}
EVALUATE_OPTIONS = {"ckpt": None, "manifest": None, "snr": [-5.0, 0.0], "out": None, "seed": None,
                    "limit": None, "figures": True}
EXPORT_OPTIONS = {"wav": None, "out": None, "png": None}
GRADCHECK_OPTIONS = {"scale": 8, "seed": 0}


def _train_defaults() -> dict:
    from .trainer import TrainConfig
    return TrainConfig().to_dict()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vsegan", description="Visual speech enhancement GAN toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS  # unset flags stay absent so config-file values can fill them

    p = sub.add_parser("synth-data", help="write a synthetic audio-visual corpus and manifests")
    p.add_argument("--config")
    p.add_argument("--out", default=S)
    p.add_argument("--train", type=int, default=S)
    p.add_argument("--val", type=int, default=S)
    p.add_argument("--test", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--duration", type=float, default=S, help="seconds per utterance")
    p.add_argument("--train-snr", dest="train_snr", type=float, default=S)
    p.add_argument("--eval-snr", dest="eval_snr", type=float, default=S)
    p.add_argument("--no-media", dest="media", action="store_false", default=S,
                   help="manifests only; utterances are regenerated from their seeds")

    p = sub.add_parser("train", help="adversarial training")
    p.add_argument("--config")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    p.add_argument("--lambda", dest="lambda", type=float, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--width-scale", dest="width_scale", type=int, default=S)
    p.add_argument("--precision", choices=["float32", "float64"], default=S)
    p.add_argument("--latent-channels", dest="latent_channels", type=int, default=S)
    p.add_argument("--train-manifest", dest="train_manifest", default=S)
    p.add_argument("--val-manifest", dest="val_manifest", default=S)
    p.add_argument("--out-dir", dest="out_dir", default=S)
    p.add_argument("--val-limit", dest="val_limit", type=int, default=S)

    p = sub.add_parser("enhance", help="enhance one noisy WAV using its mouth frames")
    p.add_argument("--config")
    p.add_argument("--ckpt", default=S)
    p.add_argument("--wav", default=S)
    p.add_argument("--frames", default=S, help="directory of 80x80 PGM frames")
    p.add_argument("--out", default=S)

    p = sub.add_parser("evaluate", help="score noisy and enhanced speech on a manifest")
    p.add_argument("--config")
    p.add_argument("--ckpt", default=S)
    p.add_argument("--manifest", default=S)
    p.add_argument("--snr", type=snr_list, default=S, help="comma-separated SNRs in dB (default -5,0)")
    p.add_argument("--out", default=S, help="CSV path; figures are written next to it")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--limit", type=int, default=S)
    p.add_argument("--no-figures", dest="figures", action="store_false", default=S)

    p = sub.add_parser("export-spec", help="log-mel spectrogram of a WAV as an 8-bit PGM")
    p.add_argument("--config")
    p.add_argument("--wav", default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--png", default=S, help="also render a PNG figure")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full loss")
    p.add_argument("--config")
    p.add_argument("--scale", type=int, default=S, help="width scale of the end-to-end check")
    p.add_argument("--seed", type=int, default=S)

    p = sub.add_parser("default-config", help="print or write the default training config")
    p.add_argument("--out")
    return parser


def resolve(args: argparse.Namespace, defaults: dict, required=()) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        resolved.update(loaded)
    for key in defaults:
        if key in vars(args):
            resolved[key] = vars(args)[key]
    missing = [k for k in required if resolved.get(k) in (None, "")]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    print("resolved config: " + json.dumps({"command": args.command, **resolved}, sort_keys=True))
    return resolved


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    from .corpus import CorpusConfig, write_corpus

    opts = resolve(args, SYNTH_OPTIONS, required=("out",))
    config = CorpusConfig(train=opts["train"], val=opts["val"], test=opts["test"], seed=opts["seed"],
                          duration_s=opts["duration"], train_snr_db=opts["train_snr"],
                          eval_snr_db=opts["eval_snr"])
    try:
        paths = write_corpus(opts["out"], config, media=opts["media"])
    except OSError as exc:
        raise ContractViolation(f"cannot write corpus under {opts['out']}: {exc}") from exc
    for split, path in paths.items():
        print(f"{split}: {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import TrainConfig, train

    opts = resolve(args, _train_defaults(), required=("train_manifest",))
    config = TrainConfig.from_dict(opts)
    result = train(config, resume=args.resume)
    print(f"checkpoint: {result.checkpoint}")
    print(f"metrics: {result.metrics}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    from .io import read_frames_dir, read_wav, write_wav
    from .trainer import enhance

    opts = resolve(args, ENHANCE_OPTIONS, required=tuple(ENHANCE_OPTIONS))
    frames_dir = Path(opts["frames"])
    if not frames_dir.is_dir():
        raise ContractViolation(f"frames directory {frames_dir} does not exist")
    noisy = read_wav(opts["wav"])
    out = enhance(opts["ckpt"], noisy, read_frames_dir(frames_dir))
    write_wav(opts["out"], out)
    print(f"wrote {opts['out']} ({len(out) / dsp.SAMPLE_RATE:.2f} s)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate

    opts = resolve(args, EVALUATE_OPTIONS, required=("ckpt", "manifest", "out"))
    report = evaluate(opts["ckpt"], opts["manifest"], opts["snr"], seed=opts["seed"], limit=opts["limit"])
    csv_path = report.write_csv(opts["out"])
    for line in report.summary_lines():
        print(line)
    if opts["figures"]:
        from .plotting import plot_metric_summary, plot_spectrograms

        stem = csv_path.with_suffix("")
        ex = report.example
        plot_spectrograms({k: ex[k] for k in ("clean", "noisy", "enhanced")},
                          f"{stem}_spectrograms.png", f"{ex['name']} at {ex['snr_db']:g} dB")
        plot_metric_summary(report.summary(), f"{stem}_summary.png")
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_export_spec(args) -> int:
    from .io import read_wav, to_uint8_minmax, write_pgm

    opts = resolve(args, EXPORT_OPTIONS, required=("wav", "out"))
    wav = read_wav(opts["wav"])
    values = dsp.log_mel_spectrogram(np.abs(dsp.stft(wav)))
    # low mel bands at the bottom of the image
    write_pgm(opts["out"], to_uint8_minmax(values[::-1]))
    if opts["png"]:
        from .plotting import plot_spectrograms
        plot_spectrograms({Path(opts["wav"]).name: values}, opts["png"])
    print(f"wrote {opts['out']} ({values.shape[0]}x{values.shape[1]})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    opts = resolve(args, GRADCHECK_OPTIONS)
    results = run_suite(opts["scale"], opts["seed"])
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else 1


def cmd_default_config(args) -> int:
    text = json.dumps(_train_defaults(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"synth-data": cmd_synth, "train": cmd_train, "enhance": cmd_enhance, "evaluate": cmd_evaluate,
            "export-spec": cmd_export_spec, "gradcheck": cmd_gradcheck, "default-config": cmd_default_config}


def _attach_snr_values(argv: list[str]) -> list[str]:
    # "--snr -5,0" would otherwise read "-5,0" as an option name
    out = []
    i = 0
    while i < len(argv):
        if argv[i] == "--snr" and i + 1 < len(argv):
            out.append(f"--snr={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = _attach_snr_values(list(sys.argv[1:] if argv is None else argv))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
