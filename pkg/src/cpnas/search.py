"""Child-Parent architecture search by progressive operation elimination.

Each round holds ``K`` candidate operations per edge. A round runs ``T``
repetitions; a repetition draws ``K`` architectures so that every remaining
operation on every edge is sampled exactly once. Each sampled architecture is
trained for one epoch as a binarized Child and a full-precision Parent, and
the score ``z = A_C + beta_P * (A_P - A_C)`` is credited to every sampled
operation. After ``T`` repetitions each edge drops the operation with the
lowest softmax of mean score, and the round repeats with ``K - 1``.

Normal and reduction cells keep independent candidate sets and score tables
but are sampled together, one architecture per slot.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import checkpoint as ckpt
from .data import Dataset
from .ops import ALL_OPS, Flavor, OpKind
from .space import CELL_TYPES, NUM_EDGES, ArchitectureSample, Genotype, NetworkConfig, build_twins
from .trainer import CPLossConfig, Trainer, TrainSchedule, evaluate, train_paired_epoch

log = logging.getLogger(__name__)


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class IndicatorConfig:
    beta_p: float = 2.0
    repetitions: int = 3
    epochs_per_sample: int = 1
    val_fraction: float = 0.05
    num_ops: int = len(ALL_OPS)

    def __post_init__(self):
        if self.beta_p < 0:
            raise ValueError(f"beta_p must be non-negative, got {self.beta_p}")
        if self.repetitions < 1 or self.epochs_per_sample < 1:
            raise ValueError("repetitions and epochs_per_sample must be at least 1")
        if not 2 <= self.num_ops <= len(ALL_OPS):
            raise ValueError(f"num_ops must be in [2, {len(ALL_OPS)}], got {self.num_ops}")

    @property
    def child_only(self) -> bool:
        return self.beta_p == 0


@dataclass(frozen=True)
class AccuracyPair:
    child: float
    parent: float

    def __post_init__(self):
        for name in ("child", "parent"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} accuracy {v} outside [0, 1]")


def compute_indicator(acc: AccuracyPair, beta_p: float) -> float:
    return acc.child + beta_p * (acc.parent - acc.child)


def total_search_epochs(num_ops: int, repetitions: int) -> int:
    """``T * (K + (K-1) + ... + 2)``."""
    return repetitions * (num_ops * (num_ops + 1) // 2 - 1)


def softmax_scores(zbar: np.ndarray) -> np.ndarray:
    z = np.asarray(zbar, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


# --------------------------------------------------------------------------
# search state
# --------------------------------------------------------------------------


@dataclass
class SearchState:
    """Candidate sets, per-round score tables and counters.

    ``candidates[cell][edge]`` lists the remaining ops in enum order.
    ``scores[cell]`` has shape (edges, K, T); entry ``[e, i, t]`` is the score
    of ``candidates[cell][e][i]`` in repetition ``t`` (NaN until recorded).
    """

    rng: np.random.Generator
    repetitions: int
    candidates: dict[str, list[list[OpKind]]]
    scores: dict[str, np.ndarray] = field(default_factory=dict)
    unsampled: dict[str, list[list[OpKind]]] = field(default_factory=dict)
    rep: int = 0
    slot: int = 0
    epochs: int = 0
    eliminations: int = 0
    trace: list[dict] = field(default_factory=list)

    @classmethod
    def initial(cls, seed: int, repetitions: int, num_ops: int = len(ALL_OPS)) -> "SearchState":
        ops = list(ALL_OPS[:num_ops])
        state = cls(np.random.default_rng(seed), repetitions, {c: [list(ops) for _ in range(NUM_EDGES)] for c in CELL_TYPES})
        state._reset_round()
        return state

    @property
    def k(self) -> int:
        sizes = {len(ops) for c in CELL_TYPES for ops in self.candidates[c]}
        if len(sizes) != 1:
            raise SearchError(f"candidate sets have unequal sizes {sorted(sizes)}")
        return sizes.pop()

    @property
    def round_complete(self) -> bool:
        return self.rep == self.repetitions

    @property
    def finished(self) -> bool:
        return self.k == 1

    def _reset_round(self) -> None:
        k = self.k
        self.scores = {c: np.full((NUM_EDGES, k, self.repetitions), np.nan) for c in CELL_TYPES}
        self.rep = 0
        self.slot = 0
        self._reset_repetition()

    def _reset_repetition(self) -> None:
        self.unsampled = {c: [list(ops) for ops in self.candidates[c]] for c in CELL_TYPES}

    def genotype(self, meta: dict | None = None) -> Genotype:
        if not self.finished:
            raise SearchError(f"search unfinished: {self.k} candidates per edge remain")
        sample = ArchitectureSample(*(tuple(ops[0] for ops in self.candidates[c]) for c in CELL_TYPES))
        return Genotype(sample, dict(meta or {}))

    # persistence ---------------------------------------------------------

    def to_record(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {
            "repetitions": self.repetitions,
            "candidates": {c: [[int(o) for o in ops] for ops in self.candidates[c]] for c in CELL_TYPES},
            "unsampled": {c: [[int(o) for o in ops] for ops in self.unsampled[c]] for c in CELL_TYPES},
            "rep": self.rep,
            "slot": self.slot,
            "epochs": self.epochs,
            "eliminations": self.eliminations,
            "trace": self.trace,
            "rng": ckpt.rng_state(self.rng),
        }
        arrays = {f"scores/{c}": self.scores[c] for c in CELL_TYPES}
        return meta, arrays

    @classmethod
    def from_record(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "SearchState":
        conv = lambda table: {c: [[OpKind(o) for o in ops] for ops in table[c]] for c in CELL_TYPES}  # noqa: E731
        return cls(
            rng=ckpt.restore_rng(meta["rng"]),
            repetitions=meta["repetitions"],
            candidates=conv(meta["candidates"]),
            scores={c: np.array(arrays[f"scores/{c}"]) for c in CELL_TYPES},
            unsampled=conv(meta["unsampled"]),
            rep=meta["rep"],
            slot=meta["slot"],
            epochs=meta["epochs"],
            eliminations=meta["eliminations"],
            trace=meta["trace"],
        )


def sample_without_replacement(state: SearchState) -> ArchitectureSample:
    """Draw one not-yet-sampled op per edge uniformly at random for the current slot."""
    k = state.k
    if state.round_complete:
        raise SearchError("all repetitions of this round are sampled; eliminate first")
    if state.slot >= k:
        raise SearchError(f"slot {state.slot + 1} exceeds K = {k} for this repetition")
    chosen = {}
    for c in CELL_TYPES:
        ops = []
        for remaining in state.unsampled[c]:
            if len(remaining) != k - state.slot:
                raise SearchError(f"edge has {len(remaining)} unsampled ops, expected {k - state.slot}")
            ops.append(remaining.pop(int(state.rng.integers(len(remaining)))))
        chosen[c] = tuple(ops)
    return ArchitectureSample(chosen["normal"], chosen["reduce"])


def record(state: SearchState, sample: ArchitectureSample, z: float) -> None:
    """Credit ``z`` to every op in ``sample`` and advance the slot counter."""
    for c in CELL_TYPES:
        for e, op in enumerate(sample.ops(c)):
            i = state.candidates[c][e].index(op)
            if not np.isnan(state.scores[c][e, i, state.rep]):
                raise SearchError(f"{c} edge {e}: {op.op_name} already scored in repetition {state.rep + 1}")
            state.scores[c][e, i, state.rep] = z
    state.slot += 1
    state.epochs += 1
    if state.slot == state.k:
        state.slot = 0
        state.rep += 1
        state._reset_repetition()


def aggregate_scores(state: SearchState, cell_type: str, edge: int) -> np.ndarray:
    """Softmax over the candidates of ``edge`` of their mean score across repetitions."""
    table = state.scores[cell_type][edge]
    if np.isnan(table).any():
        raise SearchError(f"{cell_type} edge {edge}: scores incomplete")
    return softmax_scores(table.mean(axis=1))


def eliminate_worst(state: SearchState) -> dict[str, list[OpKind]]:
    """Remove the lowest-evaluated op on every edge; ties go to the lowest enum value."""
    k = state.k
    if k == 1:
        raise SearchError("cannot eliminate below one candidate per edge")
    if not state.round_complete:
        raise SearchError(f"round incomplete: {state.rep} of {state.repetitions} repetitions")
    removed: dict[str, list[OpKind]] = {}
    entry = {"k": k, "ops": {}, "zbar": {}, "e": {}, "removed": {}}
    for c in CELL_TYPES:
        removed[c] = []
        entry["ops"][c] = [[op.op_name for op in ops] for ops in state.candidates[c]]
        zbars, evals = [], []
        for e in range(NUM_EDGES):
            ev = aggregate_scores(state, c, e)
            # candidates are kept in enum order, so argmin picks the lowest enum among ties
            worst = state.candidates[c][e].pop(int(np.argmin(ev)))
            removed[c].append(worst)
            zbars.append([float(v) for v in state.scores[c][e].mean(axis=1)])
            evals.append([float(v) for v in ev])
        entry["zbar"][c] = zbars
        entry["e"][c] = evals
        entry["removed"][c] = [op.op_name for op in removed[c]]
    state.trace.append(entry)
    state.eliminations += 1
    state._reset_round()
    return removed


# --------------------------------------------------------------------------
# evaluators
# --------------------------------------------------------------------------


class Evaluator(Protocol):
    def evaluate_sample(self, sample: ArchitectureSample, epoch: int) -> AccuracyPair: ...

    def state_dict(self) -> dict[str, np.ndarray]: ...

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None: ...


class SupernetEvaluator:
    """Twin weight-sharing supernets trained one epoch per sampled architecture.

    Every (edge, op, flavor) owns one weight bank that persists across samples
    and rounds. Parent and Child see the same batch order. The learning rate
    follows a cosine schedule over the whole search budget.
    """

    def __init__(
        self,
        net_config: NetworkConfig,
        train_data: Dataset,
        val_data: Dataset,
        schedule: TrainSchedule,
        cp: CPLossConfig | None,
        seed: int,
        total_epochs: int,
        epochs_per_sample: int = 1,
        train_parent: bool = True,
    ):
        if len(train_data) == 0 or len(val_data) == 0:
            raise ValueError("search needs non-empty train and validation splits")
        self.parent, self.child = build_twins(net_config, seed)
        self.parent_trainer = Trainer(self.parent, schedule)
        self.child_trainer = Trainer(self.child, schedule, cp)
        self.train_data = train_data
        self.val_data = val_data
        self.seed = seed
        self.total_epochs = total_epochs
        self.epochs_per_sample = epochs_per_sample
        self.train_parent = train_parent
        self.last_stats = None

    def evaluate_sample(self, sample: ArchitectureSample, epoch: int) -> AccuracyPair:
        self.parent.activate(sample)
        self.child.activate(sample)
        trainers = [self.parent_trainer, self.child_trainer] if self.train_parent else [self.child_trainer]
        total = self.total_epochs * self.epochs_per_sample
        for sub in range(self.epochs_per_sample):
            e = epoch * self.epochs_per_sample + sub
            self.last_stats = train_paired_epoch(trainers, self.train_data, e, self.seed, total)
        a_c = evaluate(self.child, self.val_data)
        a_p = evaluate(self.parent, self.val_data) if self.train_parent else a_c
        return AccuracyPair(a_c, a_p)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = ckpt.prefixed("parent", self.parent_trainer.state_dict())
        out.update(ckpt.prefixed("child", self.child_trainer.state_dict()))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.parent_trainer.load_state_dict(ckpt.unprefixed("parent", state))
        self.child_trainer.load_state_dict(ckpt.unprefixed("child", state))


class PlantedEvaluator:
    """Synthetic evaluator: accuracy is a base plus additive per-(edge, op) quality plus noise.

    ``quality[cell]`` has shape (edges, ops) indexed by OpKind value. The Parent
    accuracy adds ``parent_gap``; both are clipped into [0, 1].
    """

    def __init__(self, quality: dict[str, np.ndarray], sigma: float, seed: int, base: float = 0.5, parent_gap: float = 0.0):
        self.quality = quality
        self.sigma = sigma
        self.base = base
        self.parent_gap = parent_gap
        self.rng = np.random.default_rng(seed)
        self.calls = 0

    def evaluate_sample(self, sample: ArchitectureSample, epoch: int) -> AccuracyPair:
        self.calls += 1
        q = sum(float(self.quality[c][e, int(op)]) for c in CELL_TYPES for e, op in enumerate(sample.ops(c)))
        a = self.base + q + self.sigma * float(self.rng.standard_normal())
        clip = lambda v: min(max(v, 0.0), 1.0)  # noqa: E731
        return AccuracyPair(clip(a), clip(a + self.parent_gap))

    def best_ops(self) -> dict[str, list[OpKind]]:
        return {c: [OpKind(int(np.argmax(row))) for row in self.quality[c]] for c in CELL_TYPES}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        pass


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------


@dataclass
class SearchResult:
    genotype: Genotype
    state: SearchState
    history: list[dict]


def save_search(path: str, state: SearchState, evaluator, history: list[dict]) -> None:
    meta, arrays = state.to_record()
    arrays.update(ckpt.prefixed("evaluator", evaluator.state_dict()))
    meta["history"] = history
    ckpt.save_checkpoint(path, arrays, {"kind": "search", **meta})


def load_search(path: str, evaluator) -> tuple[SearchState, list[dict]]:
    arrays, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "search":
        raise ckpt.CheckpointError(f"{path} is not a search checkpoint")
    state = SearchState.from_record(meta, arrays)
    evaluator.load_state_dict(ckpt.unprefixed("evaluator", arrays))
    return state, meta["history"]


def run_search(
    config: IndicatorConfig,
    evaluator,
    seed: int,
    checkpoint_path: str | None = None,
    resume: bool = False,
    on_sample: Callable[[dict], None] | None = None,
    on_round: Callable[[dict], None] | None = None,
) -> SearchResult:
    """Run the elimination loop from ``num_ops`` candidates down to one per edge.

    With ``checkpoint_path`` the state is saved after every sampled
    architecture; ``resume`` continues from that file.
    """
    if resume and checkpoint_path:
        state, history = load_search(checkpoint_path, evaluator)
        log.info("resumed search at epoch %d (K=%d)", state.epochs, state.k)
    else:
        state, history = SearchState.initial(seed, config.repetitions, config.num_ops), []
    while not state.finished:
        while not state.round_complete:
            sample = sample_without_replacement(state)
            acc = evaluator.evaluate_sample(sample, state.epochs)
            z = compute_indicator(acc, config.beta_p)
            row = {
                "epoch": state.epochs,
                "k": state.k,
                "rep": state.rep + 1,
                "slot": state.slot + 1,
                "acc_child": acc.child,
                "acc_parent": acc.parent,
                "z": z,
                "normal": [op.op_name for op in sample.normal],
                "reduce": [op.op_name for op in sample.reduce],
            }
            record(state, sample, z)
            history.append(row)
            if on_sample:
                on_sample(row)
            if checkpoint_path:
                save_search(checkpoint_path, state, evaluator, history)
        eliminate_worst(state)
        if on_round:
            on_round(state.trace[-1])
        if checkpoint_path:
            save_search(checkpoint_path, state, evaluator, history)
    meta = {
        "beta_p": config.beta_p,
        "repetitions": config.repetitions,
        "seed": seed,
        "epochs": state.epochs,
        "eliminations": state.eliminations,
        "mode": "child-only" if config.child_only else "child-parent",
    }
    return SearchResult(state.genotype(meta), state, history)


def score_table_tsv(entry: dict) -> str:
    """Per-round table: cell, edge, op, mean score, softmax evaluation, removed flag."""
    lines = ["cell\tedge\top\tzbar\te\tremoved"]
    for c in CELL_TYPES:
        for e, names in enumerate(entry["ops"][c]):
            for name, z, ev in zip(names, entry["zbar"][c][e], entry["e"][c][e]):
                gone = int(name == entry["removed"][c][e])
                lines.append(f"{c}\t{e}\t{name}\t{z:.6f}\t{ev:.6f}\t{gone}")
    return "\n".join(lines) + "\n"


def history_json(history: list[dict]) -> str:
    return json.dumps(history, sort_keys=True)
