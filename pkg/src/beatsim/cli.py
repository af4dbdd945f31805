"""Command line entry point.

Exit codes: 0 success, 1 invariant failure or corrupt artifacts, 2 config error.
The ``BEATSIM_OUTPUT_DIR`` environment variable overrides the output root.
"""

import argparse
import sys
import time

from .scenario import ConfigError, list_fixtures, load_config, output_dir_for, run_scenario, write_artifacts
from .verify import CorruptArtifact, verify


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        started = time.perf_counter()
        world, summary = run_scenario(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = write_artifacts(world, summary, output_dir_for(cfg, args.out))
    elapsed = time.perf_counter() - started
    print(f"{cfg.name}: height={summary['ledger']['height']} "
          f"flows={summary['flows']['injected']} receipts={summary['receipts']['on_chain']} "
          f"wall={elapsed:.2f}s -> {out}")
    for v in summary["verdicts"]:
        print(f"  {v['dispute_id']}: {v['outcome']} culprits={v['culprits']}"
              + (f" ({v['reason']})" if v["reason"] else ""))
    for e in summary["dispute_errors"]:
        print(f"  {e['dispute_id']}: {e['error']}")
    ok = (summary["ledger"]["replication_mismatches"] == 0 and summary["capacity_violations"] == 0
          and summary["packets"]["injected"] == summary["packets"]["delivered"] + summary["packets"]["dropped"])
    return 0 if ok else 1


def cmd_verify(args) -> int:
    try:
        results = verify(args.directory)
    except CorruptArtifact as exc:
        print(f"corrupt artifact: {exc}", file=sys.stderr)
        return 1
    failed = 0
    for name, (ok, detail) in results.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += not ok
    return 1 if failed else 0


def cmd_fixtures(args) -> int:
    for name in list_fixtures():
        print(name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="beatsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run a scenario config (path or bundled fixture name)")
    p.add_argument("config")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("verify", help="re-check invariants from a run's artifacts")
    p.add_argument("directory")
    p.set_defaults(func=cmd_verify)
    p = sub.add_parser("fixtures", help="bundled scenarios")
    p.add_argument("action", choices=["list"])
    p.set_defaults(func=cmd_fixtures)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
