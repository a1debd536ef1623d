"""Command-line entry point.

Subcommands: gen-data, train-tone, train-tit, transcribe, evaluate, verify,
report, describe. Config comes from --config JSON with AMPT_<FIELD>
environment overrides; --seed/--out/--threads override both.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import load_config
from .errors import AmpscribeError


def _add_common(parser):
    parser.add_argument("--config", type=Path, default=None, help="experiment config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", type=Path, default=None, help="override output dir")
    parser.add_argument("--threads", type=int, default=None, help="worker count for data stages")


def _config_from(args):
    return load_config(
        args.config,
        seed=args.seed,
        out_dir=str(args.out) if args.out is not None else None,
        threads=args.threads,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ampscribe",
        description="Tone-informed transcription of amplifier-rendered guitar audio",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize scores, DI audio, and renders")
    _add_common(p)

    p = sub.add_parser("train-tone", help="contrastive tone-encoder training")
    _add_common(p)

    p = sub.add_parser("train-tit", help="train the transcription transformer")
    _add_common(p)
    p.add_argument("--encoder", type=Path, default=None, help="tone encoder checkpoint")

    p = sub.add_parser("transcribe", help="transcribe one WAV file")
    _add_common(p)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--encoder", type=Path, required=True)
    p.add_argument("--notes-out", type=Path, required=True)
    p.add_argument("--onset-thr", type=float, default=0.5)
    p.add_argument("--frame-thr", type=float, default=0.5)
    p.add_argument("--normalize", action="store_true")

    p = sub.add_parser("evaluate", help="score the test split")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--encoder", type=Path, default=None)

    p = sub.add_parser("verify", help="run the property/gradient check suite")
    _add_common(p)
    p.add_argument("--checks", type=str, default=None, help="comma-separated subset")

    p = sub.add_parser("report", help="print aggregated evaluation tables")
    _add_common(p)
    p.add_argument("paths", nargs="*", type=Path, help="eval report JSON files")
    p.add_argument("--run", type=Path, default=None, help="run dir (reads reports/*.json)")

    p = sub.add_parser("describe", help="print a checkpoint's parameter table")
    p.add_argument("--checkpoint", type=Path, required=True)
    return parser


def _cmd_gen_data(args) -> int:
    from .pipeline import stage_gen_data

    stats = stage_gen_data(_config_from(args))
    print(f"dataset at {stats['root']}: {stats['written']} written, {stats['skipped']} skipped")
    return 0


def _cmd_train_tone(args) -> int:
    from .pipeline import stage_train_tone

    ckpt = stage_train_tone(_config_from(args))
    print(f"tone encoder checkpoint: {ckpt}")
    return 0


def _cmd_train_tit(args) -> int:
    from .pipeline import stage_train_tit

    ckpt = stage_train_tit(_config_from(args), encoder_path=args.encoder)
    print(f"tit checkpoint: {ckpt}")
    return 0


def _cmd_transcribe(args) -> int:
    from .pipeline import transcribe_file

    doc = transcribe_file(
        args.input,
        args.checkpoint,
        args.encoder,
        notes_out=args.notes_out,
        onset_threshold=args.onset_thr,
        frame_threshold=args.frame_thr,
        normalize=args.normalize,
    )
    print(f"{len(doc['notes'])} notes -> {args.notes_out}")
    return 0


def _cmd_evaluate(args) -> int:
    from .pipeline import stage_evaluate

    outputs = stage_evaluate(
        _config_from(args), model_path=args.checkpoint, encoder_path=args.encoder
    )
    for group, out in outputs.items():
        overall = out["report"].aggregated["overall"]
        print(
            f"{group}: onset F1 {overall['onset_f1']:.3f}  frame F1 "
            f"{overall['frame_f1']:.3f}  -> {out['csv']}"
        )
    return 0


def _cmd_verify(args) -> int:
    from .verify import run_checks

    names = args.checks.split(",") if args.checks else None
    results = run_checks(names)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.name:28s} {r.seconds:7.2f}s  {r.detail}")
        failed += not r.passed
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def _format_report(path: Path) -> str:
    with open(path) as fh:
        doc = json.load(fh)
    agg = doc["aggregated"]
    lines = [f"{path} ({agg['n_pieces']} pieces)"]
    header = f"  {'group':12s} {'onset_f1':>9s} {'onset_p':>9s} {'onset_r':>9s} {'frame_f1':>9s} {'frame_p':>9s} {'frame_r':>9s}"
    lines.append(header)

    def row(name, d):
        return (
            f"  {name:12s} {d['onset_f1']:9.3f} {d['onset_p']:9.3f} {d['onset_r']:9.3f}"
            f" {d['frame_f1']:9.3f} {d['frame_p']:9.3f} {d['frame_r']:9.3f}"
        )

    lines.append(row("overall", agg["overall"]))
    for cat, d in agg["by_category"].items():
        lines.append(row(cat, d))
    return "\n".join(lines)


def _cmd_report(args) -> int:
    paths = list(args.paths)
    if args.run is not None:
        paths.extend(sorted((args.run / "reports").glob("eval_*.json")))
    if not paths:
        cfg = _config_from(args)
        paths = sorted(cfg.report_dir.glob("eval_*.json"))
    if not paths:
        print("no evaluation reports found", file=sys.stderr)
        return 1
    for path in paths:
        print(_format_report(path))
    return 0


def _cmd_describe(args) -> int:
    from .checkpoint import describe_checkpoint

    print(describe_checkpoint(args.checkpoint))
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train-tone": _cmd_train_tone,
    "train-tit": _cmd_train_tit,
    "transcribe": _cmd_transcribe,
    "evaluate": _cmd_evaluate,
    "verify": _cmd_verify,
    "report": _cmd_report,
    "describe": _cmd_describe,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except AmpscribeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
