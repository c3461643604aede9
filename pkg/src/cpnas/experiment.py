"""Experiment orchestration shared by the CLI verbs and the acceptance suite.

Artifacts written under an output directory are deterministic for a given
configuration and seed; progress and timings go to the logger only.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import efficiency as E
from .config import ExperimentConfig, dump_config
from .data import Dataset, load_cifar10, make_splits, synth_dataset
from .ops import Flavor
from .search import SupernetEvaluator, history_json, run_search, score_table_tsv
from .space import (
    CELL_TYPES,
    EDGES,
    NODE_LABELS,
    ArchitectureSample,
    Genotype,
    NetworkConfig,
    build_network,
    parse_genotype,
    serialize_genotype,
)
from .trainer import LOG_HEADER, Trainer, evaluate, fit

log = logging.getLogger(__name__)

SEARCH_LOG_HEADER = "epoch\tk\trep\tslot\tacc_child\tacc_parent\tz"
CHILD_ONLY_FLAG = "# mode: BNAS-dagger (child-only scoring, beta_p = 0)"


@dataclass
class Splits:
    search_train: Dataset
    search_val: Dataset
    eval_train: Dataset
    test: Dataset


def load_data(cfg: ExperimentConfig) -> Splits:
    d = cfg.data
    if d.source == "cifar10":
        train = load_cifar10(d.path, "train")
        test = load_cifar10(d.path, "test")
    else:
        full = synth_dataset(d.classes, d.samples + d.test_samples, d.size, d.seed, d.separation, 3, d.noise, d.jitter)
        train = full.subset(np.arange(d.samples))
        test = full.subset(np.arange(d.samples, d.samples + d.test_samples))
    split = make_splits(len(train), len(test), d.seed, d.search_fraction, cfg.indicator.val_fraction)
    return Splits(
        train.subset(split.search_train), train.subset(split.search_val), train.subset(split.eval_train), test.subset(split.test)
    )


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def _with_classes(net: NetworkConfig, classes: int) -> NetworkConfig:
    return NetworkConfig(**{**net.__dict__, "num_classes": classes})


# --------------------------------------------------------------------------
# search
# --------------------------------------------------------------------------


def search(cfg: ExperimentConfig, splits: Splits | None = None, resume: bool = False) -> Genotype:
    """Run the CP search and write genotype, logs, round tables and the trace."""
    cfg.validate()
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    _write(os.path.join(out, "config.ini"), dump_config(cfg))
    splits = splits or load_data(cfg)
    net = _with_classes(cfg.search_network, splits.search_train.num_classes)
    total = cfg.search_epochs
    evaluator = SupernetEvaluator(
        net,
        splits.search_train,
        splits.search_val,
        cfg.search_schedule,
        cfg.cp_loss,
        cfg.seed,
        total,
        cfg.indicator.epochs_per_sample,
    )
    if cfg.indicator.child_only:
        log.info("beta_p = 0: child-only scoring (BNAS-dagger mode)")
    started = time.perf_counter()

    def on_sample(row):
        log.info(
            "epoch %d/%d K=%d rep=%d slot=%d A_C=%.4f A_P=%.4f z=%.4f (%.0fs)",
            row["epoch"] + 1, total, row["k"], row["rep"], row["slot"],
            row["acc_child"], row["acc_parent"], row["z"], time.perf_counter() - started,
        )  # fmt: skip

    result = run_search(
        cfg.indicator,
        evaluator,
        cfg.seed,
        checkpoint_path=os.path.join(out, "search.ckpt"),
        resume=resume and os.path.exists(os.path.join(out, "search.ckpt")),
        on_sample=on_sample,
    )
    g = result.genotype
    _write(os.path.join(out, "genotype.json"), serialize_genotype(g))
    lines = [CHILD_ONLY_FLAG] if cfg.indicator.child_only else []
    lines.append(SEARCH_LOG_HEADER)
    for r in result.history:
        lines.append(
            f"{r['epoch']}\t{r['k']}\t{r['rep']}\t{r['slot']}\t{r['acc_child']:.6f}\t{r['acc_parent']:.6f}\t{r['z']:.6f}"
        )
    _write(os.path.join(out, "search_log.tsv"), "\n".join(lines) + "\n")
    trace = ["round\tk\tcell\tedge\tsource\ttarget\tremoved"]
    for n, entry in enumerate(result.state.trace, 1):
        _write(os.path.join(out, "rounds", f"round_{n}_k{entry['k']}.tsv"), score_table_tsv(entry))
        for c in CELL_TYPES:
            for e, name in enumerate(entry["removed"][c]):
                i, j = EDGES[e]
                trace.append(f"{n}\t{entry['k']}\t{c}\t{e}\t{NODE_LABELS[i]}\t{NODE_LABELS[j]}\t{name}")
    _write(os.path.join(out, "elimination_trace.tsv"), "\n".join(trace) + "\n")
    _write(os.path.join(out, "search_history.json"), history_json(result.history) + "\n")
    log.info("search finished in %.1fs; genotype written to %s", time.perf_counter() - started, out)
    return g


# --------------------------------------------------------------------------
# evaluation-phase training
# --------------------------------------------------------------------------


def train(cfg: ExperimentConfig, genotype: Genotype, splits: Splits | None = None, resume: bool = False) -> float:
    """Train the binarized evaluation network; returns the final test accuracy."""
    cfg.validate()
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    _write(os.path.join(out, "config.ini"), dump_config(cfg))
    _write(os.path.join(out, "genotype.json"), serialize_genotype(genotype))
    splits = splits or load_data(cfg)
    net_cfg = _with_classes(cfg.eval_network, splits.eval_train.num_classes)
    net_cfg = NetworkConfig(**{**net_cfg.__dict__, "flavor": Flavor.CHILD})
    network = build_network(net_cfg, genotype.sample, cfg.seed)
    trainer = Trainer(network, cfg.train_schedule, cfg.cp_loss)
    ckpt_path = os.path.join(out, "model.ckpt")
    log_path = os.path.join(out, "train_log.tsv")
    start = 0
    if resume and os.path.exists(ckpt_path):
        arrays, meta = ckpt.load_checkpoint(ckpt_path)
        trainer.load_state_dict(arrays)
        start = int(meta["epoch"])
        # drop any log lines written after the checkpointed epoch
        with open(log_path) as fh:
            kept = fh.readlines()[: start + 1]
        _write(log_path, "".join(kept))
    started = time.perf_counter()

    def save(epoch_done):
        meta = {"kind": "model", "epoch": epoch_done, "genotype": genotype.to_dict(), "seed": cfg.seed}
        ckpt.save_checkpoint(ckpt_path, trainer.state_dict(), meta)
        log.info("train epoch %d/%d done (%.0fs)", epoch_done, cfg.train_schedule.epochs, time.perf_counter() - started)

    with open(log_path, "a" if start else "w") as fh:
        result = fit(trainer, splits.eval_train, splits.test, cfg.seed, log=fh, checkpoint=save, start_epoch=start)
    acc = result.final_val_acc if result.history else evaluate(network, splits.test)
    return acc


def load_model(path: str, cfg: ExperimentConfig, num_classes: int):
    arrays, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "model":
        raise ckpt.CheckpointError(f"{path} is not a model checkpoint")
    genotype = parse_genotype(json.dumps(meta["genotype"]))
    net_cfg = NetworkConfig(**{**_with_classes(cfg.eval_network, num_classes).__dict__, "flavor": Flavor.CHILD})
    network = build_network(net_cfg, genotype.sample, 0)
    network.load_state_dict({k[4:]: v for k, v in arrays.items() if k.startswith("net/")})
    return network, genotype


def eval_checkpoint(cfg: ExperimentConfig, path: str, splits: Splits | None = None) -> float:
    splits = splits or load_data(cfg)
    network, _ = load_model(path, cfg, splits.test.num_classes)
    return evaluate(network, splits.test)


# --------------------------------------------------------------------------
# efficiency report
# --------------------------------------------------------------------------


def report(cfg: ExperimentConfig, genotype: Genotype, name: str = "genotype") -> tuple[str, str]:
    """(TSV, JSON) efficiency tables of the binarized evaluation network vs WRN-22."""
    size = cfg.data.size
    rep = E.count_genotype(genotype, _with_classes(cfg.eval_network, cfg.data.classes), (3, size, size), name)
    baseline = E.wrn22_report()
    return E.report_tsv([rep], baseline), E.report_json([rep], baseline)


# --------------------------------------------------------------------------
# sweeps and random baselines
# --------------------------------------------------------------------------


def random_genotype(seed: int) -> Genotype:
    return Genotype(ArchitectureSample.random(np.random.default_rng([seed, 7919])), {"kind": "random", "seed": seed})


SWEEP_COLUMNS = ("kind", "beta_p", "seed", "test_acc")


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "beta_p": "" if r["beta_p"] is None else f"{r['beta_p']:g}", "test_acc": f"{r['test_acc']:.6f}"})
    return buf.getvalue()


def sweep(
    cfg: ExperimentConfig, betas: list[float], seeds: list[int], random_count: int, resume: bool = False
) -> list[dict]:
    """Search and train for every (beta_p, seed); train ``random_count`` random genotypes.

    Writes ``sweep.csv`` with one row per trained genotype. Finished sub-runs
    are reused when their ``result.json`` exists.
    """
    root = cfg.out
    splits = load_data(cfg)
    rows = []

    def cached(path, compute):
        done = os.path.join(path, "result.json")
        if os.path.exists(done):
            with open(done) as fh:
                return json.load(fh)["test_acc"]
        acc = compute()
        _write(done, json.dumps({"test_acc": acc}) + "\n")
        return acc

    for beta in betas:
        for seed in seeds:
            sub = dataclasses.replace(
                cfg, seed=seed, out=os.path.join(root, f"beta{beta:g}_seed{seed}"),
                indicator=dataclasses.replace(cfg.indicator, beta_p=beta),
            )  # fmt: skip

            def run(sub=sub):
                g = search(dataclasses.replace(sub, out=os.path.join(sub.out, "search")), splits, resume)
                return train(dataclasses.replace(sub, out=os.path.join(sub.out, "train")), g, splits, resume)

            rows.append({"kind": "search", "beta_p": beta, "seed": seed, "test_acc": cached(sub.out, run)})
    for k in range(random_count):
        sub = dataclasses.replace(cfg, seed=k, out=os.path.join(root, f"random{k}"))
        acc = cached(sub.out, lambda sub=sub, k=k: train(sub, random_genotype(k), splits, resume))
        rows.append({"kind": "random", "beta_p": None, "seed": k, "test_acc": acc})
    _write(os.path.join(root, "sweep.csv"), sweep_csv(rows))
    return rows
