"""Command line entry point: run / experiment / promote / oracle."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import TrialConfig, TrialResult, promote_learned_prior, run_experiment, run_trial
from .oracles import SUITES, run_suite


def _cmd_run(args) -> int:
    cfg = TrialConfig.from_dict(json.loads(Path(args.config).read_text()))
    if args.out:
        cfg.out_dir = args.out
    res = run_trial(cfg)
    if cfg.out_dir:
        path = res.save(cfg.out_dir)
        print(f"wrote {path}")
    else:
        print(res.to_json())
    status = "FAILED " + res.failure if res.failed else "ok"
    print(f"{cfg.trial_id}: steps={res.terminated_at} class={res.final_class} known={res.final_known} {status}",
          file=sys.stderr)
    return 1 if res.failed else 0


def _cmd_experiment(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    results, _ = run_experiment(manifest, args.out, args.jobs)
    failed = [r for r in results if r.failed]
    for r in failed:
        print(f"failed: {TrialConfig.from_dict(r.config).trial_id}: {r.failure}", file=sys.stderr)
    print(f"{len(results) - len(failed)}/{len(results)} trials completed; summary at {Path(args.out) / 'summary.csv'}")
    return 1 if failed else 0


def _cmd_promote(args) -> int:
    result = TrialResult.from_dict(json.loads(Path(args.trial).read_text()))
    try:
        lib = promote_learned_prior(result, args.library, args.name)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"library now has {len(lib)} classes: {', '.join(m.name for m in lib.models.values())}")
    return 0


def _cmd_oracle(args) -> int:
    rows = run_suite(args.suite, args.seed)
    ok = True
    for name, err, tol in rows:
        passed = err <= tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}: max error {err:.3e} (tolerance {tol:.1e})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="activetouch", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one trial from a JSON TrialConfig")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="output directory (overrides out_dir in the config)")
    r.set_defaults(func=_cmd_run)

    e = sub.add_parser("experiment", help="run objects x seeds x procedures")
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=_cmd_experiment)

    pr = sub.add_parser("promote", help="add a trial's reconstruction to a library manifest")
    pr.add_argument("--trial", required=True)
    pr.add_argument("--library", required=True)
    pr.add_argument("--name")
    pr.set_defaults(func=_cmd_promote)

    o = sub.add_parser("oracle", help="compare against brute-force references")
    o.add_argument("--suite", default="all", choices=sorted(SUITES) + ["all"])
    o.add_argument("--seed", type=int, default=0)
    o.set_defaults(func=_cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
