"""Command-line driver wiring the library end to end.

Subcommands: ``prepare``, ``train``, ``convert``, ``rd-sweep``, ``probe``,
``bench``.  Exit codes: 0 success, 2 configuration error, 3 invalid input,
4 numerical failure, 5 I/O or integrity failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import analysis, runcfg
from .conversion import ConversionRequest, VoiceConverter, benchmark_conversion
from .dataset import build_dataset, load_manifest
from .errors import InvalidInputError, VoiceConversionError
from .features import MelUtterance, extract_mel, read_mel_file, write_mel_file
from .model import build_model
from .trainer import load_checkpoint, train_on_manifest

logger = logging.getLogger(__name__)


def _common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, default=None, help="YAML config file")
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )
    sub.add_argument("--out", type=Path, required=True, help="output directory")
    sub.add_argument("--seed", type=int, default=0, help="master seed for the run")


def _resolved(args, command: str) -> dict:
    config = runcfg.apply_overrides(runcfg.load_config(args.config), args.overrides)
    runcfg.write_resolved(config, args.seed, args.out, command)
    return config


def cmd_prepare(args) -> int:
    config = _resolved(args, "prepare")
    manifest = build_dataset(
        args.corpus,
        runcfg.make_mel_params(config),
        runcfg.segment_frames(config),
        args.out,
    )
    print(
        f"prepared {manifest.num_segments} segments from "
        f"{len(manifest.utterances)} utterances across {len(manifest.vocab)} speakers"
    )
    print(f"manifest: {args.out / 'manifest.txt'}")
    return 0


def cmd_train(args) -> int:
    config = _resolved(args, "train")
    manifest = load_manifest(args.manifest)
    train_cfg = runcfg.make_train_config(config, seed=runcfg.derive_seed(args.seed, "train"))
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model = ckpt.build_model()
        final = train_on_manifest(
            model,
            manifest,
            train_cfg,
            out_dir=args.out,
            start_epoch=ckpt.epoch,
            optimizer_state=ckpt.optimizer_state,
        )
    else:
        model_cfg = runcfg.make_model_config(config)
        model = build_model(
            model_cfg, len(manifest.vocab), seed=runcfg.derive_seed(args.seed, "init")
        )
        final = train_on_manifest(model, manifest, train_cfg, out_dir=args.out)
    last = final.history[-1] if final.history else None
    if last:
        print(
            f"trained to epoch {final.epoch}: loss={last.loss:.4f} "
            f"rate={last.rate:.4f} distortion={last.distortion:.4f}"
        )
    print(f"checkpoint: {args.out / 'final.ckpt'}")
    return 0


def _load_input_utterance(path: Path, converter: VoiceConverter) -> MelUtterance:
    if path.suffix.lower() == ".wav":
        from .dataset import read_waveform

        meta = converter.feature_meta
        if meta is None:
            raise InvalidInputError("checkpoint has no mel parameters; provide a .mel file")
        wave, rate = read_waveform(path)
        return extract_mel(wave, rate, meta.mel)
    frames, speaker = read_mel_file(path)
    return MelUtterance(frames=frames, speaker=speaker)


def cmd_convert(args) -> int:
    out_path = Path(args.out)
    config = runcfg.apply_overrides(runcfg.load_config(args.config), args.overrides)
    runcfg.write_resolved(config, args.seed, out_path.parent, "convert")
    converter = VoiceConverter.from_checkpoint(args.checkpoint)
    request = ConversionRequest(
        source_speaker=args.source,
        target_speaker=args.target,
        mode=args.mode,
        seed=args.seed,
        segment_wise=not args.utterance_wise,
    )
    utterance = _load_input_utterance(args.input, converter)
    converted = converter.convert_utterance(utterance, request)
    write_mel_file(out_path, converted.frames, converted.speaker)
    sidecar = out_path.with_suffix(out_path.suffix + ".json")
    sidecar.write_text(
        json.dumps(converter.provenance(request, args.input), indent=2) + "\n"
    )
    print(f"converted {utterance.n_frames} frames -> {out_path}")
    return 0


def cmd_rd_sweep(args) -> int:
    config = _resolved(args, "rd-sweep")
    manifest = load_manifest(args.manifest)
    settings = runcfg.sweep_settings(config)
    betas = args.betas or settings["betas"]
    train_cfg = runcfg.make_train_config(config, seed=runcfg.derive_seed(args.seed, "train"))
    model_cfg = runcfg.make_model_config(config)
    try:
        sweep = analysis.rd_sweep(
            manifest,
            model_cfg,
            betas,
            train_cfg,
            out_dir=args.out,
            holdout_fraction=settings["holdout_fraction"],
            require_monotone=not args.allow_nonmonotone,
        )
    except analysis.SweepMonotonicityError as exc:
        if exc.partial.entries:
            analysis.emit_rd_plot(exc.partial, args.out)
            print(f"partial sweep preserved in {args.out}", file=sys.stderr)
        raise
    plot_path, table_path = analysis.emit_rd_plot(sweep, args.out)
    print(f"sweep over betas {sweep.betas}")
    print(f"table: {table_path}\nplot: {plot_path}")
    return 0


def cmd_probe(args) -> int:
    _resolved(args, "probe")
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    manifest = load_manifest(args.manifest)
    reports = []
    for target in args.targets:
        report = analysis.speaker_probe(
            model,
            manifest,
            target=target,
            split_seed=runcfg.derive_seed(args.seed, f"probe-{target}"),
            permute_labels=args.permute_labels,
        )
        reports.append(report)
        print(
            f"probe[{target}]: accuracy={report.accuracy:.3f} "
            f"chance={report.chance:.3f} (n_test={report.n_test})"
        )
    plot_path, table_path = analysis.emit_probe_report(reports, args.out)
    print(f"table: {table_path}\nplot: {plot_path}")
    return 0


def cmd_bench(args) -> int:
    _resolved(args, "bench")
    converter = VoiceConverter.from_checkpoint(args.checkpoint)
    report = benchmark_conversion(
        converter, segment_count=args.segments, repeats=args.repeats, seed=args.seed
    )
    print(
        f"{report.seconds_per_segment * 1e3:.2f} ms/segment "
        f"({report.seconds_per_speech_second * 1e3:.1f} ms per second of speech); "
        f"2x-workload ratio {report.linearity_ratio:.2f}"
    )
    print(
        f"reference point: {report.reference_gpu_seconds_per_segment} s/segment "
        "on a Tesla T4 (context only)"
    )
    plot_path, table_path = analysis.emit_benchmark_report(report, args.out)
    print(f"table: {table_path}\nplot: {plot_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hiervc",
        description="hierarchical VAE voice conversion on log-mel spectrograms",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    p = subparsers.add_parser("prepare", help="extract features and build a dataset manifest")
    p.add_argument("--corpus", type=Path, required=True, help="per-speaker directory tree of WAVs")
    _common_flags(p)
    p.set_defaults(func=cmd_prepare)

    p = subparsers.add_parser("train", help="train a model on a prepared dataset")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    _common_flags(p)
    p.set_defaults(func=cmd_train)

    p = subparsers.add_parser("convert", help="convert a mel (or wav) file between speakers")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help=".mel or .wav input")
    p.add_argument("--source", required=True, help="source speaker name")
    p.add_argument("--target", required=True, help="target speaker name")
    p.add_argument("--mode", choices=("mean", "sample"), default="mean")
    p.add_argument("--utterance-wise", action="store_true", help="convert without segmenting")
    p.add_argument("--config", type=Path, default=None, help="YAML config file")
    p.add_argument(
        "--set", dest="overrides", action="append", default=[],
        metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)",
    )
    p.add_argument("--out", type=Path, required=True, help="output .mel path")
    p.add_argument("--seed", type=int, default=0, help="seed for sample mode")
    p.set_defaults(func=cmd_convert)

    p = subparsers.add_parser("rd-sweep", help="train one model per beta and plot rate/distortion")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument(
        "--betas",
        type=lambda s: [float(v) for v in s.split(",")],
        default=None,
        help="comma-separated betas (defaults to the config's sweep.betas)",
    )
    p.add_argument("--allow-nonmonotone", action="store_true")
    _common_flags(p)
    p.set_defaults(func=cmd_rd_sweep)

    p = subparsers.add_parser("probe", help="linear speaker probe on latent representations")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument(
        "--targets",
        type=lambda s: s.split(","),
        default=["invariant", "dependent", "mel"],
        help="comma-separated probe targets",
    )
    p.add_argument("--permute-labels", action="store_true")
    _common_flags(p)
    p.set_defaults(func=cmd_probe)

    p = subparsers.add_parser("bench", help="time mean-mode conversion throughput")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--segments", type=int, default=10)
    p.add_argument("--repeats", type=int, default=3)
    _common_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VoiceConversionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 5


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
