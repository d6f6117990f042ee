"""``ablate`` command line: run, eval and gradcheck."""
from __future__ import annotations

import argparse
import sys

from .config import ConfigError, parse_config
from .pipeline import PipelineError, run_eval, run_pipeline


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    manifest = run_pipeline(cfg, args.out)
    out = args.out or cfg.output_dir
    print(f"run complete: {len(manifest.artifacts)} artifacts in {out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = parse_config(args.config)
    manifest = run_eval(cfg, args.baseline, args.ablated, args.out)
    print(f"eval complete: {len(manifest.artifacts)} artifacts")
    return 0


def _cmd_gradcheck(args) -> int:
    from .audit import gradient_audit

    rows = gradient_audit(seed=args.seed)
    for r in rows:
        print(f"{r.loss:>5} loss  {r.scope:<16} params={r.n_params:<5} max rel err={r.max_rel_error:.2e}  {'ok' if r.ok else 'FAIL'}")
    bad = [r for r in rows if not r.ok]
    if bad:
        print(f"gradcheck failed for {len(bad)} of {len(rows)} cases", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ablate", description="Concept ablation experiments on a toy diffusion model.")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="pretrain (cached), ablate, evaluate and write reports")
    run.add_argument("--config", required=True)
    run.add_argument("--out", default=None, help="output directory (default: the config's output_dir)")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.set_defaults(fn=_cmd_run)

    ev = sub.add_parser("eval", help="evaluate a baseline/ablated checkpoint pair")
    ev.add_argument("--baseline", required=True)
    ev.add_argument("--ablated", required=True)
    ev.add_argument("--config", required=True)
    ev.add_argument("--out", default=None)
    ev.set_defaults(fn=_cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference check of both ablation losses")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(fn=_cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"ablate: stage 'config' failed:\n  " + "\n  ".join(exc.errors), file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"ablate: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
