"""Cell DAG, stacked networks and the genotype document.

A cell has two input nodes (outputs of the two previous cells, indexed -1 and
0) and four intermediate nodes 1..4. Every intermediate node sums one edge
operation from each earlier node, giving 14 edges. The cell output
concatenates the four intermediate nodes along channels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .binary import BinConv2d
from .layers import BatchNorm2d, Conv2d, GlobalAvgPool, Linear, Module, ReLU, Sequential
from .ops import ALL_OPS, EdgeOp, Flavor, OpKind, make_edge_op
from .tensor import ConvSpec, ShapeError

NUM_INTERMEDIATE = 4
NODE_LABELS = (-1, 0, 1, 2, 3, 4)
# (source, target) in internal indices 0..5; internal 0/1 are the input nodes
EDGES: tuple[tuple[int, int], ...] = tuple((i, j) for j in range(2, 2 + NUM_INTERMEDIATE) for i in range(j))
NUM_EDGES = len(EDGES)
CELL_TYPES = ("normal", "reduce")
GENOTYPE_FORMAT = "cpnas-genotype"
GENOTYPE_VERSION = 1


class GenotypeError(ValueError):
    pass


@dataclass(frozen=True)
class CellTemplate:
    """Per-edge candidate operation sets for one cell type."""

    candidates: tuple[tuple[OpKind, ...], ...] = tuple(ALL_OPS for _ in EDGES)

    def __post_init__(self):
        if len(self.candidates) != NUM_EDGES:
            raise ValueError(f"cell needs {NUM_EDGES} edges, got {len(self.candidates)}")
        for e, ops in enumerate(self.candidates):
            if not ops or len(set(ops)) != len(ops):
                raise ValueError(f"edge {e}: candidate set must be non-empty and duplicate-free")

    @property
    def edges(self):
        return EDGES


@dataclass(frozen=True)
class ArchitectureSample:
    """One operation per edge for the normal and the reduction cell."""

    normal: tuple[OpKind, ...]
    reduce: tuple[OpKind, ...]

    def __post_init__(self):
        for name in CELL_TYPES:
            ops = tuple(OpKind(o) for o in getattr(self, name))
            if len(ops) != NUM_EDGES:
                raise GenotypeError(f"{name} cell needs {NUM_EDGES} edges, got {len(ops)}")
            object.__setattr__(self, name, ops)

    def ops(self, cell_type: str) -> tuple[OpKind, ...]:
        return getattr(self, cell_type)

    @classmethod
    def random(cls, rng: np.random.Generator) -> "ArchitectureSample":
        pick = lambda: tuple(OpKind(int(k)) for k in rng.integers(0, len(ALL_OPS), NUM_EDGES))  # noqa: E731
        return cls(pick(), pick())


@dataclass
class NetworkConfig:
    num_cells: int = 6
    channels: int = 16
    reduction_cells: tuple[int, ...] = (2, 4)  # 1-indexed cell positions
    num_classes: int = 10
    in_channels: int = 3
    stem_multiplier: int = 3
    binarize_preprocessing: bool = False
    flavor: Flavor = Flavor.CHILD

    def __post_init__(self):
        self.reduction_cells = tuple(int(r) for r in self.reduction_cells)
        self.flavor = Flavor(self.flavor)
        for r in self.reduction_cells:
            if not 1 <= r <= self.num_cells:
                raise ValueError(f"reduction cell {r} outside [1, {self.num_cells}]")

    @classmethod
    def search(cls, **kw) -> "NetworkConfig":
        return cls(**{"num_cells": 6, "channels": 16, "reduction_cells": (2, 4), **kw})

    @classmethod
    def evaluation(cls, channels: int = 56, num_cells: int = 10, **kw) -> "NetworkConfig":
        red = (num_cells // 3 + 1, 2 * num_cells // 3 + 1)
        return cls(num_cells=num_cells, channels=channels, reduction_cells=red, **kw)


@dataclass
class Genotype:
    sample: ArchitectureSample
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def cell(ops):
            return [[op.op_name, NODE_LABELS[i], NODE_LABELS[j]] for op, (i, j) in zip(ops, EDGES)]

        return {
            "format": GENOTYPE_FORMAT,
            "version": GENOTYPE_VERSION,
            "normal": cell(self.sample.normal),
            "reduce": cell(self.sample.reduce),
            "meta": self.meta,
        }


def serialize_genotype(g: Genotype) -> str:
    return json.dumps(g.to_dict(), indent=1, sort_keys=True) + "\n"


def parse_genotype(text: str) -> Genotype:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenotypeError(f"malformed genotype document: {exc}") from None
    if not isinstance(doc, dict):
        raise GenotypeError("genotype document must be an object")
    if doc.get("format", GENOTYPE_FORMAT) != GENOTYPE_FORMAT:
        raise GenotypeError(f"unexpected format {doc.get('format')!r}")
    if doc.get("version", GENOTYPE_VERSION) != GENOTYPE_VERSION:
        raise GenotypeError(f"unsupported genotype version {doc.get('version')!r}")
    cells = {}
    for name in CELL_TYPES:
        rows = doc.get(name)
        if not isinstance(rows, list):
            raise GenotypeError(f"missing or malformed {name!r} cell")
        if len(rows) != NUM_EDGES:
            raise GenotypeError(f"{name} cell has {len(rows)} edges, expected {NUM_EDGES}")
        ops = []
        for row, (i, j) in zip(rows, EDGES):
            if not (isinstance(row, list) and len(row) == 3):
                raise GenotypeError(f"{name}: malformed edge entry {row!r}")
            op_name, src, dst = row
            if (src, dst) != (NODE_LABELS[i], NODE_LABELS[j]):
                raise GenotypeError(f"{name}: edge ({src}, {dst}) out of order, expected ({NODE_LABELS[i]}, {NODE_LABELS[j]})")
            try:
                ops.append(OpKind.from_name(op_name))
            except ValueError as exc:
                raise GenotypeError(str(exc)) from None
        cells[name] = tuple(ops)
    meta = doc.get("meta", {})
    if not isinstance(meta, dict):
        raise GenotypeError("meta must be an object")
    return Genotype(ArchitectureSample(cells["normal"], cells["reduce"]), meta)


# --------------------------------------------------------------------------
# modules
# --------------------------------------------------------------------------


def _pre_conv(spec: ConvSpec, flavor: Flavor, binarize: bool, rng) -> Module:
    if binarize and flavor is Flavor.CHILD:
        return BinConv2d(spec, rng)
    return Conv2d(spec, rng)


def _pre_relu(flavor: Flavor, binarize: bool) -> list[Module]:
    return [] if (binarize and flavor is Flavor.CHILD) else [ReLU()]


class FactorizedReduce(Module):
    """Halve spatial size with two offset 1x1 stride-2 convolutions, then BN."""

    def __init__(self, c_in: int, c_out: int, flavor: Flavor, binarize: bool, rng):
        if c_out % 2:
            raise ValueError("FactorizedReduce needs an even number of output channels")
        self.relu = _pre_relu(flavor, binarize)
        self.conv_a = _pre_conv(ConvSpec(c_in, c_out // 2, 1, stride=2), flavor, binarize, rng)
        self.conv_b = _pre_conv(ConvSpec(c_in, c_out // 2, 1, stride=2), flavor, binarize, rng)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x, training=True):
        for r in self.relu:
            x = r.forward(x, training)
        self._shape = x.shape
        a = self.conv_a.forward(x, training)
        b = self.conv_b.forward(x[:, :, 1:, 1:], training)
        self._b_hw = b.shape[2:]
        if b.shape[2:] != a.shape[2:]:
            b = np.pad(b, ((0, 0), (0, 0), (0, a.shape[2] - b.shape[2]), (0, a.shape[3] - b.shape[3])))
        return self.bn.forward(np.concatenate([a, b], axis=1), training)

    def backward(self, grad):
        g = self.bn.backward(grad)
        half = g.shape[1] // 2
        gx = self.conv_a.backward(g[:, :half])
        hb, wb = self._b_hw
        gx[:, :, 1:, 1:] += self.conv_b.backward(np.ascontiguousarray(g[:, half:, :hb, :wb]))
        for r in reversed(self.relu):
            gx = r.backward(gx)
        return gx


def _relu_conv_bn(c_in: int, c_out: int, flavor: Flavor, binarize: bool, rng) -> Sequential:
    return Sequential(*_pre_relu(flavor, binarize), _pre_conv(ConvSpec(c_in, c_out, 1), flavor, binarize, rng), BatchNorm2d(c_out))


class MixedEdge(Module):
    """All surviving candidate ops of one edge; exactly one is active at a time."""

    def __init__(self, ops: dict[OpKind, EdgeOp]):
        self.ops = ops
        self.active = next(iter(ops))

    def children(self, everything=False):
        if everything:
            for kind, op in self.ops.items():
                yield kind.op_name, op
        else:
            yield self.active.op_name, self.ops[self.active]

    def activate(self, kind: OpKind) -> None:
        kind = OpKind(kind)
        if kind not in self.ops:
            raise KeyError(f"{kind.op_name} is not a candidate on this edge")
        self.active = kind

    def forward(self, x, training=True):
        return self.ops[self.active].forward(x, training)

    def backward(self, grad):
        return self.ops[self.active].backward(grad)


class Cell(Module):
    def __init__(
        self,
        c_pp: int,
        c_p: int,
        c: int,
        reduction: bool,
        reduction_prev: bool,
        flavor: Flavor,
        candidates: Sequence[Sequence[OpKind]],
        rng: np.random.Generator,
        binarize_preprocessing: bool = False,
    ):
        self.reduction = reduction
        self.cell_type = "reduce" if reduction else "normal"
        self.channels = c
        b = binarize_preprocessing
        if reduction_prev:
            self.pre0 = FactorizedReduce(c_pp, c, flavor, b, rng)
        else:
            self.pre0 = _relu_conv_bn(c_pp, c, flavor, b, rng)
        self.pre1 = _relu_conv_bn(c_p, c, flavor, b, rng)
        self.edges = []
        for (i, _), ops in zip(EDGES, candidates):
            stride = 2 if reduction and i < 2 else 1
            self.edges.append(MixedEdge({OpKind(k): make_edge_op(k, flavor, c, stride, rng) for k in ops}))

    def activate(self, ops: Sequence[OpKind]) -> None:
        for edge, kind in zip(self.edges, ops):
            edge.activate(kind)

    def forward_nodes(self, s0, s1, training=True, order: Iterable[int] | None = None):
        """Evaluate intermediate nodes; ``order`` is any topological order of 2..5."""
        states: list = [self.pre0.forward(s0, training), self.pre1.forward(s1, training)] + [None] * NUM_INTERMEDIATE
        for j in order or range(2, 2 + NUM_INTERMEDIATE):
            total = None
            for e, (i, jj) in enumerate(EDGES):
                if jj != j:
                    continue
                if states[i] is None:
                    raise ValueError(f"node {j} evaluated before its input {i}")
                y = self.edges[e].forward(states[i], training)
                if total is not None and y.shape != total.shape:
                    raise ShapeError("cell", f"edge ({i},{j}) output", total.shape, y.shape)
                total = y if total is None else total + y
            states[j] = total
        return states

    def forward(self, inputs, training=True):
        s0, s1 = inputs
        states = self.forward_nodes(s0, s1, training)
        self._shapes = [s.shape for s in states]
        return np.concatenate(states[2:], axis=1)

    def backward(self, grad):
        c = self.channels
        grads: list = [None, None] + [grad[:, k * c : (k + 1) * c] for k in range(NUM_INTERMEDIATE)]
        for e in reversed(range(NUM_EDGES)):
            i, j = EDGES[e]
            g = self.edges[e].backward(grads[j])
            grads[i] = g if grads[i] is None else grads[i] + g
        return self.pre0.backward(grads[0]), self.pre1.backward(grads[1])


class Network(Module):
    """stem -> cells -> global average pool -> linear classifier."""

    def __init__(self, config: NetworkConfig, candidates: dict[str, Sequence[Sequence[OpKind]]], seed: int):
        self.config = config
        rng = np.random.default_rng(seed)
        flavor = config.flavor
        c = config.channels
        c_stem = config.stem_multiplier * c
        # first layer stays full precision in both flavors
        self.stem = Sequential(Conv2d(ConvSpec(config.in_channels, c_stem, 3), rng), BatchNorm2d(c_stem))
        c_pp, c_p, c_cur = c_stem, c_stem, c
        self.cells = []
        reduction_prev = False
        for pos in range(1, config.num_cells + 1):
            reduction = pos in config.reduction_cells
            if reduction:
                c_cur *= 2
            kind = "reduce" if reduction else "normal"
            cell = Cell(
                c_pp, c_p, c_cur, reduction, reduction_prev, flavor, candidates[kind], rng, config.binarize_preprocessing
            )
            self.cells.append(cell)
            reduction_prev = reduction
            c_pp, c_p = c_p, NUM_INTERMEDIATE * c_cur
        self.feature_channels = c_p
        self.gap = GlobalAvgPool()
        self.classifier = Linear(c_p, config.num_classes, rng)
        self.features = None

    def activate(self, sample: ArchitectureSample) -> None:
        for cell in self.cells:
            cell.activate(sample.ops(cell.cell_type))

    def forward(self, x, training=True):
        s0 = s1 = self.stem.forward(x, training)
        for cell in self.cells:
            s0, s1 = s1, cell.forward((s0, s1), training)
        self.features = s1
        return self.classifier.forward(self.gap.forward(s1, training), training)

    def backward(self, grad_logits, grad_features=None):
        g = self.gap.backward(self.classifier.backward(grad_logits))
        if grad_features is not None:
            g = g + grad_features
        n = len(self.cells)
        # g_out[k]: gradient of cell k's output (1-based); g_out[0]: the stem output
        g_out: list = [None] * (n + 1)
        g_out[n] = g
        for k in range(n, 0, -1):
            g0, g1 = self.cells[k - 1].backward(g_out[k])
            for idx, gi in ((max(k - 2, 0), g0), (k - 1, g1)):
                g_out[idx] = gi if g_out[idx] is None else g_out[idx] + gi
        return self.stem.backward(g_out[0])

    def conv_layers(self) -> list[Module]:
        """Active convolution layers in traversal order."""
        return [m for _, m in self.named_modules() if isinstance(m, (Conv2d, BinConv2d))]

    def binary_layers(self) -> list[BinConv2d]:
        return [m for m in self.conv_layers() if isinstance(m, BinConv2d)]


def full_candidates() -> dict[str, list[tuple[OpKind, ...]]]:
    return {name: [ALL_OPS] * NUM_EDGES for name in CELL_TYPES}


def sample_candidates(sample: ArchitectureSample) -> dict[str, list[tuple[OpKind, ...]]]:
    return {name: [(op,) for op in sample.ops(name)] for name in CELL_TYPES}


def build_network(config: NetworkConfig, sample: ArchitectureSample, seed: int) -> Network:
    net = Network(config, sample_candidates(sample), seed)
    net.activate(sample)
    return net


def build_supernet(config: NetworkConfig, candidates, seed: int) -> Network:
    return Network(config, candidates, seed)


def build_twins(config: NetworkConfig, seed: int, sample: ArchitectureSample | None = None) -> tuple[Network, Network]:
    """(parent, child) sharing architecture and initial latent weights."""
    nets = []
    for flavor in (Flavor.PARENT, Flavor.CHILD):
        cfg = NetworkConfig(**{**config.__dict__, "flavor": flavor})
        nets.append(build_network(cfg, sample, seed) if sample is not None else build_supernet(cfg, full_candidates(), seed))
    return nets[0], nets[1]
