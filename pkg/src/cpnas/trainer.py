"""Kernel-level Child-Parent loss and the training loops.

The Child's loss is ``CE + kernel_mse + compactness``:

* ``kernel_mse`` sums, over binarized layers and output channels, the mean
  squared gap between a latent filter ``H`` and its reconstruction
  ``alpha * sign(H)``. Its gradient is ``2 (H - H_hat) / n`` with ``alpha``
  and ``sign`` held constant. Because ``alpha`` is the least-squares scale,
  the term through ``alpha`` vanishes, so this equals the true derivative
  away from sign flips.
* ``compactness`` is ``lam/2 * sum_s ||f_s - mean_{class(s)}||^2`` on the
  features of the last cell, with the batch class mean held constant.

The Parent trains with plain cross-entropy.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .binary import BinConv2d, sign
from .data import Dataset, cutout
from .ops import Flavor

MSE_TARGETS = ("self", "parent")
COMPACTNESS_TARGETS = ("child_mean", "parent_mean")
LOG_HEADER = "epoch\tlr\tloss\tce\tmse\tcompact\ttrain_acc\tval_acc"


@dataclass
class CPLossConfig:
    lam: float = 1e-4
    mse_weight: float = 1.0
    mse_target: str = "self"
    compactness_target: str = "child_mean"
    bank_momentum: float = 0.9

    def __post_init__(self):
        if self.lam < 0 or self.mse_weight < 0:
            raise ValueError(f"lambda and mse_weight must be non-negative, got {self.lam}, {self.mse_weight}")
        if self.mse_target not in MSE_TARGETS:
            raise ValueError(f"mse_target must be one of {MSE_TARGETS}, got {self.mse_target!r}")
        if self.compactness_target not in COMPACTNESS_TARGETS:
            raise ValueError(f"compactness_target must be one of {COMPACTNESS_TARGETS}, got {self.compactness_target!r}")
        if not 0 <= self.bank_momentum < 1:
            raise ValueError(f"bank_momentum must be in [0, 1), got {self.bank_momentum}")

    @property
    def needs_parent(self) -> bool:
        return (self.mse_weight > 0 and self.mse_target == "parent") or (
            self.lam > 0 and self.compactness_target == "parent_mean"
        )


@dataclass
class TrainSchedule:
    epochs: int = 600
    batch_size: int = 96
    lr0: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    cutout: bool = True
    cutout_size: int = 16
    cosine: bool = True

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError(f"epochs and batch_size must be positive, got {self.epochs}, {self.batch_size}")
        if self.lr0 < 0 or self.momentum < 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ValueError("lr0, momentum, weight_decay and grad_clip must be non-negative")

    @classmethod
    def search(cls, **kw) -> "TrainSchedule":
        base = dict(epochs=105, batch_size=512, lr0=0.025, momentum=0.9, weight_decay=5e-4, grad_clip=0.0, cutout=False)
        return cls(**{**base, **kw})

    @classmethod
    def evaluation(cls, **kw) -> "TrainSchedule":
        return cls(**kw)

    def lr(self, epoch: int, total: int | None = None) -> float:
        if not self.cosine:
            return self.lr0
        return T.cosine_lr(epoch, total or self.epochs, self.lr0)


# --------------------------------------------------------------------------
# loss terms
# --------------------------------------------------------------------------


def kernel_mse(latents: list[np.ndarray], targets: list[np.ndarray] | None = None) -> tuple[float, list[np.ndarray]]:
    """Sum over layers and output channels of per-channel MSE; returns ``(value, grads)``.

    With ``targets`` None each latent bank ``H`` is compared with its own
    reconstruction. Otherwise ``targets[l]`` (a Parent filter bank) is
    compared with the reconstruction of ``latents[l]`` and the gradient
    reaches the latent weights through the clipped STE.
    """
    if targets is not None and len(targets) != len(latents):
        raise T.ShapeError("kernel_mse", "layer count", len(latents), len(targets))
    total = 0.0
    grads = []
    for l, h in enumerate(latents):
        n = h[0].size
        alpha = np.abs(h).mean(axis=tuple(range(1, h.ndim)), keepdims=True)
        s = sign(h)
        h_hat = alpha * s
        if targets is None:
            diff = h - h_hat
            grads.append(2 * diff / n)
        else:
            if targets[l].shape != h.shape:
                raise T.ShapeError("kernel_mse", f"layer {l} filter shape", h.shape, targets[l].shape)
            diff = targets[l] - h_hat
            grads.append(-2 * diff * alpha * (np.abs(h) <= 1) / n)
        total += float((diff.reshape(len(h), -1) ** 2).mean(axis=1).sum())
    return total, grads


class ClassMeanBank:
    """Running per-class mean feature maps, folded in with momentum."""

    def __init__(self, num_classes: int, feature_shape: tuple[int, ...], momentum: float = 0.9):
        self.momentum = momentum
        self.means = np.zeros((num_classes,) + tuple(feature_shape))
        self.counts = np.zeros(num_classes, dtype=np.int64)

    def update(self, batch_means: np.ndarray, batch_counts: np.ndarray) -> None:
        present = batch_counts > 0
        fresh = present & (self.counts == 0)
        seen = present & (self.counts > 0)
        self.means[fresh] = batch_means[fresh]
        self.means[seen] = self.momentum * self.means[seen] + (1 - self.momentum) * batch_means[seen]
        self.counts += batch_counts

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"means": self.means.copy(), "counts": self.counts.copy()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.means = np.array(state["means"])
        self.counts = np.array(state["counts"], dtype=np.int64)


def class_means(features: np.ndarray, labels: np.ndarray, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(labels, minlength=num_classes)
    sums = np.zeros((num_classes,) + features.shape[1:], dtype=np.float64)
    np.add.at(sums, labels, features)
    means = sums / np.maximum(counts, 1).reshape((-1,) + (1,) * (features.ndim - 1))
    return means, counts


def intra_class_compactness(
    features: np.ndarray,
    labels: np.ndarray,
    bank: ClassMeanBank | None,
    lam: float,
    target_features: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """``lam/2 * sum_s ||f_s - mean_class(s)||^2`` and its gradient ``lam * (f - mean)``.

    Class means come from the current batch, taken over ``target_features``
    when given (the Parent reading) and over ``features`` otherwise. The means
    are folded into ``bank`` after use.
    """
    labels = np.asarray(labels)
    if len(labels) != len(features):
        raise T.ShapeError("intra_class_compactness", "batch size", len(features), len(labels))
    ref = features if target_features is None else target_features
    if ref.shape != features.shape:
        raise T.ShapeError("intra_class_compactness", "target feature shape", features.shape, ref.shape)
    num_classes = bank.means.shape[0] if bank is not None else int(labels.max()) + 1
    means, counts = class_means(ref, labels, num_classes)
    if bank is not None:
        bank.update(means, counts)
    if lam == 0:
        return 0.0, np.zeros_like(features)
    diff = features - means[labels].astype(features.dtype)
    value = 0.5 * lam * float(np.sum(diff.astype(np.float64) ** 2))
    return value, lam * diff


def total_loss(ce: float, mse: float, compact: float) -> float:
    return ce + (mse + compact)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


class SGD:
    """Momentum SGD whose buffers are keyed by parameter name.

    Only the parameters passed to :meth:`step` move, so inactive supernet
    operations keep both their weights and their momentum.
    """

    def __init__(self, momentum: float, weight_decay: float):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, named_params: list[tuple[str, T.Parameter]], lr: float) -> None:
        bufs = []
        for name, p in named_params:
            if name not in self.buffers:
                self.buffers[name] = np.zeros_like(p.data)
            bufs.append(self.buffers[name])
        T.sgd_step(
            [p.data for _, p in named_params],
            [p.grad for _, p in named_params],
            bufs,
            lr,
            self.momentum,
            self.weight_decay,
        )

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.buffers.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.buffers = {k: np.array(v) for k, v in state.items()}


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class EpochStats:
    loss: float = 0.0
    ce: float = 0.0
    mse: float = 0.0
    compact: float = 0.0
    train_acc: float = 0.0
    lr: float = 0.0
    samples: int = 0

    def add(self, n: int, loss: float, ce: float, mse: float, compact: float, correct: int) -> None:
        self.loss += n * loss
        self.ce += n * ce
        self.mse += n * mse
        self.compact += n * compact
        self.train_acc += correct
        self.samples += n

    def finish(self) -> "EpochStats":
        n = max(self.samples, 1)
        return EpochStats(self.loss / n, self.ce / n, self.mse / n, self.compact / n, self.train_acc / n, self.lr, self.samples)

    def __iter__(self):
        yield self.loss
        yield self.train_acc


@dataclass
class ParentSnapshot:
    """Read-only Parent state taken at batch start for the cross-model loss readings."""

    filters: list[np.ndarray] | None = None
    features: np.ndarray | None = None


def paired_layers(child, parent) -> list[tuple[BinConv2d, object]]:
    """Child binarized convs matched with the Parent convs in the same positions."""
    pairs = []
    for c, p in zip(child.conv_layers(), parent.conv_layers()):
        if c.weight.shape != p.weight.shape:
            raise T.ShapeError("paired_layers", "filter shape", c.weight.shape, p.weight.shape)
        if isinstance(c, BinConv2d):
            pairs.append((c, p))
    return pairs


def _diagnose(network, batch: int, what: str) -> str:
    named = list(network.named_parameters())
    for name, p in named:
        if not np.all(np.isfinite(p.data)):
            return f"non-finite {what} at batch {batch}; non-finite weights in layer: {name}"
    # a bad gradient spreads towards the input, so the one nearest the loss is reported
    for name, p in reversed(named):
        if not np.all(np.isfinite(p.grad)):
            return f"non-finite {what} at batch {batch}; non-finite gradient in layer: {name}"
    return f"non-finite {what} at batch {batch}; parameters finite, see logits/features"


class Trainer:
    """One optimizer, one network; the Child flavor adds the CP loss terms."""

    def __init__(self, network, schedule: TrainSchedule, cp: CPLossConfig | None = None):
        self.network = network
        self.schedule = schedule
        self.flavor = Flavor(network.config.flavor)
        self.cp = cp if self.flavor is Flavor.CHILD else None
        self.optimizer = SGD(schedule.momentum, schedule.weight_decay)
        self.bank = None  # built on first use, when the feature-map shape is known

    def step(self, x, y, lr: float, batch: int = 0, ref: ParentSnapshot | None = None):
        """One SGD step; returns ``(loss, ce, mse, compact, correct)``."""
        net = self.network
        net.zero_grad()
        logits = net.forward(x, training=True)
        ce, g = T.softmax_cross_entropy(logits, y)
        mse = compact = 0.0
        g_feat = None
        cp = self.cp
        if cp is not None and cp.lam > 0:
            feats = net.features
            target = None
            if cp.compactness_target == "parent_mean":
                if ref is None or ref.features is None:
                    raise ValueError("compactness_target=parent_mean needs a Parent snapshot")
                target = ref.features
            if self.bank is None:
                self.bank = ClassMeanBank(net.config.num_classes, feats.shape[1:], cp.bank_momentum)
            compact, g_feat = intra_class_compactness(feats, y, self.bank, cp.lam, target)
        net.backward(g, g_feat)
        if cp is not None and cp.mse_weight > 0:
            layers = net.binary_layers()
            targets = None
            if cp.mse_target == "parent":
                if ref is None or ref.filters is None:
                    raise ValueError("mse_target=parent needs a Parent snapshot")
                targets = ref.filters
            mse, grads = kernel_mse([m.weight.data for m in layers], targets)
            for m, gr in zip(layers, grads):
                m.weight.grad += (cp.mse_weight * gr).astype(m.weight.grad.dtype)
            mse *= cp.mse_weight
        loss = total_loss(ce, mse, compact)
        if not math.isfinite(loss):
            raise T.NumericalError(_diagnose(net, batch, "loss"))
        named = list(net.named_parameters())
        if self.schedule.grad_clip > 0:
            T.clip_grad_norm([p for _, p in named], self.schedule.grad_clip)
        self.optimizer.step(named, lr)
        correct = int(np.sum(np.argmax(logits, axis=1) == y))
        return loss, ce, mse, compact, correct

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"net/{k}": v for k, v in self.network.state_dict().items()}
        out.update({f"opt/{k}": v for k, v in self.optimizer.state_dict().items()})
        if self.bank is not None:
            out.update({f"bank/{k}": v for k, v in self.bank.state_dict().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        def part(prefix):
            return {k[len(prefix) :]: v for k, v in state.items() if k.startswith(prefix)}

        self.network.load_state_dict(part("net/"))
        self.optimizer.load_state_dict(part("opt/"))
        bank = part("bank/")
        if bank:
            self.bank = ClassMeanBank(len(bank["counts"]), bank["means"].shape[1:], self.cp.bank_momentum)
            self.bank.load_state_dict(bank)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _augment(x, schedule: TrainSchedule, rng):
    if schedule.cutout and schedule.cutout_size > 0:
        return cutout(x, schedule.cutout_size, rng)
    return x


def train_epoch(
    trainer: Trainer, data: Dataset, epoch: int, seed: int, total_epochs: int | None = None
) -> EpochStats:
    """One shuffled pass; returns the epoch statistics."""
    return train_paired_epoch([trainer], data, epoch, seed, total_epochs)[0]


def train_paired_epoch(
    trainers: list[Trainer], data: Dataset, epoch: int, seed: int, total_epochs: int | None = None
) -> list[EpochStats]:
    """Train several networks on the identical batch sequence.

    When a Parent trainer is listed before a Child trainer whose CP loss needs
    Parent quantities, the Child sees a snapshot taken before the Parent's
    update on the same batch.
    """
    if len(data) == 0:
        raise ValueError("training set is empty")
    sched = trainers[0].schedule
    lr = sched.lr(epoch, total_epochs)
    order = epoch_order(len(data), seed, epoch)
    aug_rng = np.random.default_rng([seed, epoch, 1])
    stats = [EpochStats(lr=lr) for _ in trainers]
    pairs = None
    for b, (x, y) in enumerate(data.batches(sched.batch_size, order)):
        x = _augment(x, sched, aug_rng)
        snap = None
        for t, st in zip(trainers, stats):
            if t.flavor is Flavor.PARENT and any(o.cp is not None and o.cp.needs_parent for o in trainers):
                if pairs is None:
                    child = next(o for o in trainers if o.flavor is Flavor.CHILD).network
                    pairs = paired_layers(child, t.network)
                filters = [p.weight.data.copy() for _, p in pairs]
                result = t.step(x, y, lr, b)
                snap = ParentSnapshot(filters, t.network.features.copy())
            else:
                if t.cp is not None and t.cp.needs_parent and snap is None:
                    raise ValueError("a Child with a Parent-dependent CP loss needs a preceding Parent trainer")
                result = t.step(x, y, lr, b, snap)
            loss, ce, mse, compact, correct = result
            st.add(len(y), loss, ce, mse, compact, correct)
    return [st.finish() for st in stats]


def predict(network, data: Dataset, batch_size: int = 256) -> np.ndarray:
    out = []
    for x, _ in data.batches(batch_size):
        out.append(np.argmax(network.forward(x, training=False), axis=1))
    return np.concatenate(out)


def evaluate(network, data: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in eval mode (running BN statistics)."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(network, data, batch_size) == data.labels))


def log_line(epoch: int, stats: EpochStats, val_acc: float) -> str:
    return (
        f"{epoch}\t{stats.lr:.8f}\t{stats.loss:.6f}\t{stats.ce:.6f}\t{stats.mse:.6f}"
        f"\t{stats.compact:.6f}\t{stats.train_acc:.6f}\t{val_acc:.6f}"
    )


@dataclass
class FitResult:
    history: list[tuple[EpochStats, float]] = field(default_factory=list)
    final_val_acc: float = float("nan")


def fit(
    trainer: Trainer,
    train_data: Dataset,
    val_data: Dataset | None,
    seed: int,
    log=None,
    checkpoint=None,
    start_epoch: int = 0,
) -> FitResult:
    """Evaluation-phase loop: ``schedule.epochs`` epochs, one log line each.

    ``log`` is a writable text stream receiving the header (when starting at
    epoch 0) and one tab-separated line per epoch. ``checkpoint`` is called as
    ``checkpoint(epoch_done)`` after each epoch.
    """
    result = FitResult()
    epochs = trainer.schedule.epochs
    if log is not None and start_epoch == 0:
        log.write(LOG_HEADER + "\n")
    for epoch in range(start_epoch, epochs):
        st = train_epoch(trainer, train_data, epoch, seed, epochs)
        val = evaluate(trainer.network, val_data) if val_data is not None and len(val_data) else float("nan")
        result.history.append((st, val))
        result.final_val_acc = val
        if log is not None:
            log.write(log_line(epoch, st, val) + "\n")
            log.flush()
        if checkpoint is not None:
            checkpoint(epoch + 1)
    return result


def schedule_dict(s: TrainSchedule) -> dict:
    return asdict(s)
