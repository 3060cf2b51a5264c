"""Command-line front end.

Subcommands mirror the pipeline stages: gen, pretrain, finetune, probe,
report. The artifact root comes from --out-dir, the SYNMLM_ARTIFACTS
environment variable, or ./artifacts, in that order. Exit codes: 0 ok,
2 validation/config error, 3 missing artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import (
    GenerationError,
    InvalidArgumentError,
    NotFoundError,
    NumericalError,
    ValidationError,
)
from .manifest import FT_VARIANTS, PRETRAIN_VARIANTS, load_manifest
from .pipeline import Workspace, resolve_root, run_finetune_cell, run_gen, run_pretrain, run_probe_cmd
from .probing import correlation_from_files
from .report import run_report

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4


def _workspace(args) -> Workspace:
    manifest = load_manifest(args.manifest)
    return Workspace(resolve_root(args.out_dir), manifest)


def _cmd_gen(args) -> int:
    ws = _workspace(args)
    files = run_gen(ws)
    print(f"generated {len(files)} artifacts under {ws.dir}")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    ws = _workspace(args)
    path = run_pretrain(ws, args.variant)
    print(f"pretrain[{args.variant}] -> {path}")
    return EXIT_OK


def _cmd_finetune(args) -> int:
    ws = _workspace(args)
    m = ws.manifest
    if args.preset or args.variant or args.size is not None or args.seed is not None:
        if not (args.preset and args.variant and args.size is not None):
            raise InvalidArgumentError(
                "--preset, --variant, and --size must be given together")
        reps = [args.seed] if args.seed is not None else range(m.seed_replicates)
        cells = [(args.preset, args.variant, args.size, r) for r in reps]
    else:
        cells = list(m.cells())
    for preset, variant, size, rep in cells:
        rows = run_finetune_cell(ws, preset, variant, size, rep)
        accs = " ".join(f"{r['domain']}={r['accuracy']:.3f}" for r in rows)
        print(f"cell {preset}/{variant}/{size}/s{rep}: {accs}")
    print(f"results -> {ws.results_path}")
    return EXIT_OK


def _cmd_probe(args) -> int:
    if args.external_f0 or args.external_f:
        if not (args.external_f0 and args.external_f):
            raise InvalidArgumentError(
                "--external-f0 and --external-f must be given together")
        out = correlation_from_files(args.external_f0, args.external_f)
        print(json.dumps(out))
        return EXIT_OK
    if not args.manifest:
        raise InvalidArgumentError("--manifest is required unless using external files")
    ws = _workspace(args)
    path = run_probe_cmd(ws)
    print(f"probe report -> {path}")
    return EXIT_OK


def _cmd_report(args) -> int:
    ws = _workspace(args)
    out = run_report(ws.results_path, ws.dir / "report")
    print(f"summary -> {out['summary']} ({out['aggregates']} aggregate rows)")
    for fig in out["figures"]:
        print(f"figure -> {fig}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="synmlm",
        description="Synthetic-language MLM pretraining experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest_required=True):
        p.add_argument("--manifest", required=manifest_required,
                       help="path to the experiment manifest JSON")
        p.add_argument("--out-dir", default=None,
                       help="artifact root (default: $SYNMLM_ARTIFACTS or ./artifacts)")

    p = sub.add_parser("gen", help="generate world, corpora, and datasets")
    common(p)
    p.set_defaults(fn=_cmd_gen)

    p = sub.add_parser("pretrain", help="pretrain one model variant")
    common(p)
    p.add_argument("--variant", required=True, choices=PRETRAIN_VARIANTS)
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune and evaluate cells")
    common(p)
    p.add_argument("--preset", default=None, help="preset id from the manifest")
    p.add_argument("--variant", default=None, choices=FT_VARIANTS)
    p.add_argument("--size", type=int, default=None, help="fine-tune set size")
    p.add_argument("--seed", type=int, default=None, help="seed replicate index")
    p.set_defaults(fn=_cmd_finetune)

    p = sub.add_parser("probe", help="probe checkpoints, or correlate external files")
    common(p, manifest_required=False)
    p.add_argument("--external-f0", default=None,
                   help="externally produced template-distribution file")
    p.add_argument("--external-f", default=None,
                   help="externally produced prediction-distribution file")
    p.set_defaults(fn=_cmd_probe)

    p = sub.add_parser("report", help="aggregate results into CSV and figures")
    common(p)
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValidationError, InvalidArgumentError, GenerationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except NotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
