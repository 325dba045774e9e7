"""Command-line entry point: ``pgame run|ablate|correct``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import runner


def _proportions(text: str):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgame", description="Quality-diversity experiments with PG variation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every replication of a config")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, help="override [experiment] master_seed")
    run.add_argument("--out", help="override [experiment] output_dir")

    abl = sub.add_parser("ablate", help="sweep the GA proportion with paired seeds")
    abl.add_argument("--config", required=True)
    abl.add_argument("--proportions", type=_proportions, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    abl.add_argument("--out")

    cor = sub.add_parser("correct", help="re-evaluate a dumped archive and write corrected.csv")
    cor.add_argument("--archive", required=True, help="replication directory holding archive.csv")
    cor.add_argument("--reevals", type=int, default=50)
    cor.add_argument("--seed", type=int, default=0)
    cor.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return runner.run_experiment(args.config, seed=args.seed, out=args.out)
    if args.command == "ablate":
        return runner.run_ablation(args.config, args.proportions, out=args.out)
    try:
        report = runner.correct_archive(args.archive, args.reevals, args.seed, args.out)
    except (OSError, KeyError, ValueError) as exc:
        logging.getLogger("pgame").error("cannot correct %s: %s", args.archive, exc)
        return 1
    print(f"qd_score_loss={report.qd_score_loss!r} max_fitness_loss={report.max_fitness_loss!r} "
          f"coverage_loss={report.coverage_loss!r}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
