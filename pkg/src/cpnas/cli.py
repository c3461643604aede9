"""Command-line entry point.

Verbs: search, train, eval, report, selftest, sweep. Exit codes: 0 success,
2 configuration or input-document error, 3 data error, 4 numerical failure.
"""

import os

# single-threaded BLAS keeps reductions in a fixed order; must precede numpy import
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import dataclasses  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402

from . import experiment as X  # noqa: E402
from .checkpoint import CheckpointError  # noqa: E402
from .config import ConfigError, ExperimentConfig, desk_profile, load_config, selftest_profile, with_overrides  # noqa: E402
from .data import DataError  # noqa: E402
from .space import GenotypeError, parse_genotype  # noqa: E402
from .tensor import NumericalError  # noqa: E402

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("cpnas")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="experiment seed (mandatory for search/train)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--beta-p", type=float, dest="beta_p", help="indicator weight of the Parent-Child gap")
    common.add_argument("--lambda", type=float, dest="lam", help="weight of the compactness term")
    common.add_argument("--desk-scale", action="store_true", help="use the small synthetic desk profile")
    common.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="cpnas", description="Child-Parent search for binarized architectures.")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("search", parents=[common], help="run the architecture search")
    t = sub.add_parser("train", parents=[common], help="train a genotype's binarized network")
    t.add_argument("--genotype", required=True, help="genotype document")
    e = sub.add_parser("eval", parents=[common], help="test accuracy of a trained checkpoint")
    e.add_argument("--checkpoint", required=True)
    r = sub.add_parser("report", parents=[common], help="memory/FLOPs table against WRN-22")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--genotype")
    src.add_argument("--checkpoint")
    r.add_argument("--format", choices=("tsv", "json"), default="tsv")
    sub.add_parser("selftest", parents=[common], help="seconds-long end-to-end run")
    s = sub.add_parser("sweep", parents=[common], help="beta_p sweep and random-genotype baseline")
    s.add_argument("--betas", default="0,1,2,4", help="comma-separated beta_p values")
    s.add_argument("--seeds", default="0", help="comma-separated search seeds")
    s.add_argument("--random", type=int, default=0, help="number of random genotypes to train")
    return p


def resolve_config(args) -> ExperimentConfig:
    if args.verb == "selftest":
        base = selftest_profile()
    elif args.desk_scale:
        base = desk_profile()
    else:
        base = ExperimentConfig()
    cfg = load_config(args.config, base) if args.config else base
    cfg = dataclasses.replace(cfg, mode=args.verb)
    return with_overrides(cfg, seed=args.seed, out=args.out, beta_p=args.beta_p, lam=args.lam)


def _read_genotype(path: str):
    try:
        with open(path) as fh:
            return parse_genotype(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read genotype {path}: {exc.strerror}") from None


def run(args) -> int:
    cfg = resolve_config(args)
    if args.verb == "search":
        g = X.search(cfg, resume=args.resume)
        print(os.path.join(cfg.out, "genotype.json"))
        print(json.dumps(g.to_dict()["normal"]))
    elif args.verb == "train":
        acc = X.train(cfg, _read_genotype(args.genotype), resume=args.resume)
        print(f"test_acc\t{acc:.6f}")
    elif args.verb == "eval":
        print(f"test_acc\t{X.eval_checkpoint(cfg, args.checkpoint):.6f}")
    elif args.verb == "report":
        if args.genotype:
            g = _read_genotype(args.genotype)
        else:
            _, g = X.load_model(args.checkpoint, cfg, cfg.data.classes)
        tsv, js = X.report(cfg, g)
        print(tsv if args.format == "tsv" else js, end="")
        if args.out:
            X._write(os.path.join(cfg.out, "report.tsv"), tsv)
            X._write(os.path.join(cfg.out, "report.json"), js)
    elif args.verb == "selftest":
        g = X.search(dataclasses.replace(cfg, out=os.path.join(cfg.out, "search")))
        acc = X.train(dataclasses.replace(cfg, out=os.path.join(cfg.out, "train")), g)
        tsv, js = X.report(cfg, g)
        X._write(os.path.join(cfg.out, "report.tsv"), tsv)
        X._write(os.path.join(cfg.out, "report.json"), js)
        print(f"selftest ok\ttest_acc\t{acc:.6f}")
    elif args.verb == "sweep":
        try:
            betas = [float(b) for b in args.betas.split(",") if b]
            seeds = [int(s) for s in args.seeds.split(",") if s]
        except ValueError:
            raise ConfigError("--betas and --seeds take comma-separated numbers") from None
        rows = X.sweep(cfg, betas, seeds, args.random, args.resume)
        print(X.sweep_csv(rows), end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return run(args)
    except (ConfigError, GenotypeError, CheckpointError) as exc:
        print(f"cpnas: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"cpnas: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"cpnas: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
