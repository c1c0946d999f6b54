"""Command-line surface: corpus generation through uncertainty analysis.

Exit codes: 0 on success, 1 for usage or configuration problems, 2 for
numeric failures (training divergence, gradient-check violations).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import methods
from .config import RunConfig, apply_overrides, load_config, write_resolved
from .data import build_manifest, generate_corpus
from .net import TrainingDiverged


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; the contract here reserves 2 for
    numeric failures, so usage problems exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="maskuq",
                     description="Uncertainty-aware time-frequency masking "
                                 "for speech enhancement.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--method", help="override the method name")
    common.add_argument("--split", default="test",
                        help="corpus split (default: test)")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="synthesize the corpus described by the config")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", parents=[common],
                       help="train every member of the configured method")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("enhance", parents=[common],
                       help="enhance a corpus split or a single WAV")
    p.add_argument("--input", help="single input WAV instead of a split")
    p.set_defaults(func=_cmd_enhance)

    p = sub.add_parser("evaluate", parents=[common],
                       help="SI-SDR table for an enhanced split")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sparsify", parents=[common],
                       help="pooled sparsification curve and AUSE")
    p.add_argument("--source", required=True,
                   choices=methods.UNCERTAINTY_SOURCES,
                   help="which uncertainty field to rank bins by")
    p.set_defaults(func=_cmd_sparsify)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference audit of all gradient paths")
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return apply_overrides(cfg, seed=args.seed, out_dir=args.out,
                           method=args.method)


def _cmd_gen_data(cfg: RunConfig, args, log) -> int:
    manifest = build_manifest(seed=cfg.seed, n_train=cfg.n_train,
                              n_val=cfg.n_val, n_test=cfg.n_test,
                              duration_s=cfg.duration_s)
    out = Path(cfg.corpus_dir)
    manifest_path = generate_corpus(manifest, out, cfg.sample_rate)
    write_resolved(cfg, out)
    log(f"wrote {len(manifest.entries)} utterances under {out} "
        f"(manifest: {manifest_path})")
    return 0


def _cmd_train(cfg: RunConfig, args, log) -> int:
    run_dir = methods.train_method(cfg, log=log)
    log(f"trained {cfg.method}: checkpoints under {run_dir}")
    return 0


def _cmd_enhance(cfg: RunConfig, args, log) -> int:
    if args.input:
        out = methods.enhance_file(cfg, args.input, log=log)
    else:
        out = methods.enhance_split(cfg, args.split, log=log)
    log(f"enhanced outputs under {out}")
    return 0


def _cmd_evaluate(cfg: RunConfig, args, log) -> int:
    eval_dir = methods.evaluate_split(cfg, args.split)
    log(f"metrics: {eval_dir / 'metrics.csv'}")
    return 0


def _cmd_sparsify(cfg: RunConfig, args, log) -> int:
    summary = methods.sparsify_split(cfg, args.split, args.source, log=log)
    log(f"ause[{args.source}] = {summary['ause']!r} ({summary['csv']})")
    return 0


def _cmd_gradcheck(cfg: RunConfig, args, log) -> int:
    passed, rows = methods.run_gradcheck(seed=cfg.seed)
    for r in rows:
        state = "ok" if r["passed"] else "FAIL"
        log(f"{r['name']}: max rel err {r['max_rel_err']:.3e} over "
            f"{r['n_checked']} coordinates [{state}]")
    if not passed:
        log("gradient check FAILED")
        return 2
    log("gradient check passed")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)

    def log(msg):
        print(msg, flush=True)

    try:
        cfg = _resolve_config(args)
        return args.func(cfg, args, log)
    except TrainingDiverged as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
