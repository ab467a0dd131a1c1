"""Command-line entry point."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .errors import ConfigError, ContLearnError, InputError
from .harness import run_experiment, write_outputs
from .metrics import CBT_ROWS, ScoreMatrix, cbt, cft
from .tasks import generate_stream, write_stream

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

EPILOG = """\
exit codes:
  0  success
  2  config error (missing/unreadable config, invalid JSON, schema or value violation)
  3  data error (missing or malformed dataset / R matrix / result file)
  4  numeric abort (nonfinite loss or gradient during training)
"""

log = logging.getLogger("contlearn")


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set or ())
    out = args.out or cfg.output_dir or str(Path("results") / cfg.method_name)
    result = run_experiment(cfg)
    write_outputs(result, out)
    summary = result.to_json()["summary"]
    print(json.dumps({"method": result.method, "out": str(out), **summary}))
    return EXIT_OK


def cmd_generate_data(args) -> int:
    cfg = load_config(args.config, args.set or ())
    if cfg.stream is None:
        raise ConfigError("generate-data needs a 'stream' section")
    vocab = write_stream(generate_stream(cfg.stream), args.out)
    print(json.dumps({"data": str(args.out), "label_vocab": str(vocab)}))
    return EXIT_OK


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None


def cmd_metrics(args) -> int:
    R = ScoreMatrix.from_csv(_read_text(args.r))
    print(json.dumps({"T": R.T, "cft": cft(R), "cbt": cbt(R, args.cbt_row)}))
    return EXIT_OK


def compare_rows(paths) -> list[dict]:
    rows = []
    for p in paths:
        try:
            data = json.loads(_read_text(p))
            summary = data["summary"]
            rows.append({
                "method": data["method"],
                "cft": summary["cft"]["mean"] if summary.get("cft") else None,
                "cbt": summary["cbt"]["mean"] if summary.get("cbt") else None,
            })
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise InputError(f"{p}: not a result.json ({e})") from None
    return rows


def format_table(rows: list[dict], as_csv: bool = False) -> str:
    """Method x {CFT, CBT}; the best (highest) value per column is starred."""
    best = {}
    for col in ("cft", "cbt"):
        vals = [r[col] for r in rows if r[col] is not None]
        best[col] = max(vals) if vals else None

    def cell(r, col):
        v = r[col]
        if v is None:
            return "-"
        return f"{v:.2f}" + ("*" if v == best[col] else "")

    if as_csv:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "CFT", "CBT"])
        for r in rows:
            w.writerow([r["method"], cell(r, "cft"), cell(r, "cbt")])
        return buf.getvalue()
    width = max([len("method")] + [len(r["method"]) for r in rows])
    lines = [f"{'method':<{width}}  {'CFT':>8}  {'CBT':>8}"]
    for r in rows:
        lines.append(f"{r['method']:<{width}}  {cell(r, 'cft'):>8}  {cell(r, 'cbt'):>8}")
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    sys.stdout.write(format_table(compare_rows(args.results), args.csv))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contlearn",
        description="Sequential (continual) training experiments with LR ADJUST, replay, A-GEM and EWC.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the configured experiment", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key by dotted path, e.g. strategy.kind=ewc (repeatable)")
    p.add_argument("--out", help="output directory (default: config output_dir or results/<method>)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("generate-data", help="write the synthetic stream as JSONL")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True, help="JSONL path; the label vocabulary goes to <out>.labels")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("metrics", help="recompute CFT/CBT from a stored R matrix CSV")
    p.add_argument("--r", required=True, help="R_seed<k>.csv")
    p.add_argument("--cbt-row", choices=CBT_ROWS, default="final")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("compare", help="CFT/CBT table over several result.json files")
    p.add_argument("results", nargs="+")
    p.add_argument("--csv", action="store_true", help="emit CSV instead of aligned text")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ContLearnError as e:
        print(f"contlearn {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code if e.exit_code in (EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC) else 1


if __name__ == "__main__":
    sys.exit(main())
