"""Optimisation loop, learning-rate schedule, metrics and early stopping."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import SketchTensor
from .model import Batch, MGTConfig, ModelParams, forward, make_batch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    initial_lr: float = 5e-5
    decay_factor: float = 0.7
    decay_every: int = 10
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 128
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        for name in ("initial_lr", "decay_factor", "decay_every", "max_epochs", "patience", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        ad.dtype_for(self.precision)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.initial_lr * cfg.decay_factor ** (epoch // cfg.decay_every)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls({n: np.zeros_like(t.data) for n, t in params.items()},
                   {n: np.zeros_like(t.data) for n, t in params.items()})


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ad.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype, copy=False)


def top_k_accuracy(logits: np.ndarray, labels, ks: Sequence[int] = (1, 5, 10)) -> dict[int, float]:
    """Fraction of rows whose label is among the ``k`` largest logits.

    Equal logits rank the lower class index first.
    """
    Z = np.asarray(logits)
    y = np.asarray(labels)
    N, C = Z.shape
    true = Z[np.arange(N), y][:, None]
    lower = np.arange(C)[None, :] < y[:, None]
    rank = (Z > true).sum(axis=1) + ((Z == true) & lower).sum(axis=1)
    out = {}
    for k in ks:
        if k > C:
            raise ValueError(f"k = {k} exceeds the number of classes {C}")
        out[k] = float((rank < k).mean()) if N else 0.0
    return out


class SketchDataset:
    """Sketches with their adjacency masks, built once per sample."""

    def __init__(self, sketches: Sequence[SketchTensor], cfg: MGTConfig, graph_seed: int = 0):
        self.sketches = list(sketches)
        self.cfg = cfg
        self.graph_seed = graph_seed
        for s in self.sketches:
            if s.S != cfg.S:
                raise ValueError(f"sketch has S = {s.S}, model expects {cfg.S}")
        self._adj: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.sketches)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sketches])

    def adjacency(self) -> np.ndarray:
        """All masks as one ``[G, N, S, S]`` boolean array."""
        if self._adj is None:
            cfg = self.cfg
            adj = np.zeros((cfg.G, len(self), cfg.S, cfg.S), dtype=bool)
            for n, s in enumerate(self.sketches):
                for g, spec in enumerate(cfg.graph_specs):
                    rng = ad.derive_rng(self.graph_seed, n, g) if spec.uses_rng else None
                    adj[g, n] = spec.build(s, rng, cfg.self_loops).data
            self._adj = adj
        return self._adj

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        return make_batch([self.sketches[i] for i in idx], self.adjacency()[:, idx])


def batch_indices(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Consecutive chunks; a trailing chunk of one sample joins the previous chunk."""
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def predict_logits(params: ModelParams, data: SketchDataset, batch_size: int = 256) -> np.ndarray:
    out = []
    for idx in batch_indices(np.arange(len(data)), batch_size):
        logits, _ = forward(params, data.batch(idx), train=False)
        out.append(logits.data)
    return np.concatenate(out) if out else np.zeros((0, params.cfg.num_classes))


@dataclass
class EvalResult:
    acc1: float
    acc5: float
    acc10: float
    loss: float
    n: int


def evaluate(params: ModelParams, data: SketchDataset, batch_size: int = 256) -> EvalResult:
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    logits = predict_logits(params, data, batch_size)
    labels = data.labels
    C = logits.shape[1]
    ks = [min(k, C) for k in (1, 5, 10)]
    acc = top_k_accuracy(logits, labels, sorted(set(ks)))
    loss = float(ad.cross_entropy_logits(ad.Tensor(logits), labels).data)
    return EvalResult(acc[ks[0]], acc[ks[1]], acc[ks[2]], loss, len(data))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_acc1: float
    val_acc5: float
    val_acc10: float
    seconds: float

    def csv_row(self) -> str:
        return (f"{self.epoch},{self.lr:.10g},{self.train_loss:.8f},{self.val_acc1:.6f},"
                f"{self.val_acc5:.6f},{self.val_acc10:.6f},{self.seconds:.3f}")


METRICS_HEADER = "epoch,lr,train_loss,val_acc1,val_acc5,val_acc10,seconds"


def format_history(history: Sequence[EpochRecord]) -> str:
    return METRICS_HEADER + "\n" + "".join(r.csv_row() + "\n" for r in history)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainState:
    """Everything needed to continue or reproduce training."""

    params: ModelParams
    adam: AdamState
    rng: np.random.Generator
    epoch: int = 0  # next epoch to run
    best_val_acc: float = -1.0
    best_epoch: int = -1
    history: list[EpochRecord] = field(default_factory=list)

    def snapshot(self) -> "TrainState":
        return copy.deepcopy(self)


def new_train_state(params: ModelParams, tcfg: TrainConfig) -> TrainState:
    return TrainState(params, AdamState.zeros_like(params), ad.derive_rng(tcfg.seed, 2))


def train_one_epoch(state: TrainState, data: SketchDataset, tcfg: TrainConfig) -> float:
    """One pass over ``data``; returns the sample-weighted mean loss."""
    epoch = state.epoch
    lr = lr_at_epoch(tcfg, epoch)
    order = ad.derive_rng(tcfg.seed, 1, epoch).permutation(len(data))
    total, seen = 0.0, 0
    for b, idx in enumerate(batch_indices(order, tcfg.batch_size)):
        batch = data.batch(idx)
        with ad.recording() as tape:
            logits, _ = forward(state.params, batch, train=True, rng=state.rng)
            loss = ad.cross_entropy_logits(logits, batch.labels)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {b}")
        ad.backward(loss, tape)
        grads = {n: t.grad for n, t in state.params.items()}
        adam_step(state.params, grads, state.adam, lr)
        total += value * len(idx)
        seen += len(idx)
    return total / seen


EpochCallback = Callable[[EpochRecord, TrainState], bool]


def train(state: TrainState, train_data: SketchDataset, val_data: SketchDataset, tcfg: TrainConfig,
          on_epoch: EpochCallback | None = None, on_best: Callable[[TrainState], None] | None = None
          ) -> tuple[TrainState, list[EpochRecord]]:
    """Run epochs until ``max_epochs`` or ``patience`` epochs without a better
    validation acc@1.  Returns the best state seen and the full history.

    ``on_epoch`` may return True to stop early.  ``state`` is advanced in place.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if len(train_data) < 2:
        raise ValueError("batch norm needs at least 2 training samples")
    best = state.snapshot() if state.best_epoch >= 0 else None
    while state.epoch < tcfg.max_epochs:
        t0 = time.perf_counter()
        loss = train_one_epoch(state, train_data, tcfg)
        res = evaluate(state.params, val_data, max(tcfg.batch_size, 2))
        rec = EpochRecord(state.epoch, lr_at_epoch(tcfg, state.epoch), loss,
                          res.acc1, res.acc5, res.acc10, time.perf_counter() - t0)
        state.history.append(rec)
        log.info("epoch %d lr %.3g loss %.4f val acc@1 %.4f", rec.epoch, rec.lr, loss, res.acc1)
        state.epoch += 1
        if res.acc1 > state.best_val_acc:
            state.best_val_acc = res.acc1
            state.best_epoch = rec.epoch
            best = state.snapshot()
            if on_best is not None:
                on_best(best)
        stop = on_epoch(rec, state) if on_epoch is not None else False
        if stop or rec.epoch - state.best_epoch >= tcfg.patience:
            break
    if best is None:
        best = state.snapshot()
    best.history = list(state.history)
    return best, list(state.history)
