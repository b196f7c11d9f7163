"""Central finite-difference checks of the reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import flatten, pad_truncate, synthesize_sketch
from .model import MGTConfig, build_graphs, forward, init_params, make_batch

STEP = 1e-5
TOLERANCE = 1e-4


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |g - g_num| / max(1, |g|, |g_num|) over all entries."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))))


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = STEP,
                 entries: np.ndarray | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr`` (mutated and restored in place).

    Only the flat positions in ``entries`` are probed when given; other
    positions of the result are NaN.
    """
    out = np.full(arr.shape, np.nan)
    flat = arr.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.reshape(-1)[i] = (fp - fm) / (2 * h)
    return out


def check_function(f: Callable[[list[Tensor]], Tensor], inputs: list[np.ndarray],
                   seed: int = 0, h: float = STEP) -> float:
    """Gradcheck a scalar-valued differentiable function of float64 inputs.

    The scalar is ``sum(f(x) * w)`` for a fixed random weighting ``w`` so every
    output entry contributes.
    """
    rng = np.random.default_rng(seed)
    ts = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    with ad.recording() as tape:
        y = f(ts)
        w = Tensor(rng.standard_normal(y.shape) if y.shape else np.ones(()))
        loss = ad.sum_all(ad.mul(y, w)) if y.shape else y
    ad.backward(loss, tape)

    def value() -> float:
        return float((f(ts).data * w.data).sum())

    worst = 0.0
    for t in ts:
        num = numeric_grad(value, t.data, h)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_error(ana, num))
    return worst


@dataclass
class BlockResult:
    name: str
    checked: int
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def tiny_config(**overrides) -> MGTConfig:
    base = dict(S=8, d_hat=6, L=2, heads_per_graph=2, dropout=0.1,
                graph_specs="khop:1,global", num_classes=5)
    base.update(overrides)
    return MGTConfig(**base)


def check_model(cfg: MGTConfig | None = None, batch_size: int = 2, seed: int = 0,
                max_entries: int | None = None, h: float = STEP) -> list[BlockResult]:
    """End-to-end gradcheck of the cross-entropy loss for every parameter block.

    Runs in train mode (batch statistics, dropout with a re-seeded generator)
    at 64-bit precision.  ``max_entries`` caps the probed entries per block.
    """
    cfg = tiny_config() if cfg is None else cfg
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng, np.float64)
    for t in params:  # move off the symmetric init so biases/BN get generic gradients
        t.data += 0.1 * rng.standard_normal(t.shape)
    sketches = []
    for n in range(batch_size):
        d = synthesize_sketch(rng, int(rng.integers(1, 4)), (1, 4))
        sketches.append(pad_truncate(flatten(d), cfg.S, label=int(rng.integers(cfg.num_classes))))
    batch = make_batch(sketches, [build_graphs(cfg, s, rng) for s in sketches])

    def loss_value(record: bool = False):
        drop_rng = np.random.default_rng(seed + 1)
        if not record:
            logits, _ = forward(params, batch, train=True, rng=drop_rng)
            return float(ad.cross_entropy_logits(logits, batch.labels).data)
        with ad.recording() as tape:
            logits, _ = forward(params, batch, train=True, rng=drop_rng)
            loss = ad.cross_entropy_logits(logits, batch.labels)
        ad.backward(loss, tape)
        return float(loss.data)

    loss_value(record=True)
    analytic = {n: t.grad.copy() for n, t in params.items()}
    results = []
    for name, t in params.items():
        entries = None
        if max_entries is not None and t.data.size > max_entries:
            entries = rng.choice(t.data.size, size=max_entries, replace=False)
        num = numeric_grad(loss_value, t.data, h, entries)
        mask = ~np.isnan(num)
        results.append(BlockResult(name, int(mask.sum()), rel_error(analytic[name][mask], num[mask])))
    return results


def _op_cases(rng: np.random.Generator):
    """(name, function, inputs) for every differentiable op, on a few shapes each."""
    cases = []
    for shape in ((3, 4), (2, 3, 5), (1, 1)):
        x, y = rng.standard_normal(shape), rng.standard_normal(shape)
        mask = rng.random(shape[-2:]) < 0.6
        mask[..., 0] = True
        cases += [
            ("add", lambda t: ad.add(t[0], t[1]), [x, y]),
            ("mul", lambda t: ad.mul(t[0], t[1]), [x, y]),
            ("scale", lambda t: ad.scale(t[0], -1.5), [x]),
            ("relu", lambda t: ad.relu(t[0]), [x + 0.01 * np.sign(x)]),
            ("sum_all", lambda t: ad.sum_all(t[0]), [x]),
            ("reshape", lambda t: ad.reshape(t[0], (-1,)), [x]),
            ("swapaxes", lambda t: ad.swapaxes(t[0], -1, -2), [x]),
            ("concat_lastdim", lambda t: ad.concat_lastdim([t[0], t[1]]), [x, y]),
            ("softmax_lastdim", lambda t: ad.softmax_lastdim(t[0]), [x]),
            ("masked_fill_neg_inf", lambda t, m=mask: ad.softmax_lastdim(ad.masked_fill_neg_inf(t[0], m)), [x]),
            ("hadamard_mask", lambda t, m=mask: ad.hadamard_mask(t[0], m), [x]),
            # a fresh generator per call keeps the dropout mask fixed across probes
            ("dropout", lambda t: ad.dropout(t[0], 0.3, True, np.random.default_rng(7)), [x]),
        ]
    for a, b in (((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 3))):
        cases.append(("matmul", lambda t: ad.matmul(t[0], t[1]), [rng.standard_normal(a), rng.standard_normal(b)]))
    for B, S, d in ((1, 3, 2), (2, 4, 3), (3, 5, 1)):
        idx = rng.integers(0, 6, size=(B, S))
        valid = np.arange(S)[None, :] < rng.integers(1, S + 1, size=(B, 1))
        cases.append(("embedding_lookup", lambda t, i=idx: ad.embedding_lookup(t[0], i), [rng.standard_normal((6, d))]))
        cases.append(("sum_rows_masked", lambda t, v=valid: ad.sum_rows_masked(t[0], v),
                      [rng.standard_normal((B, S, d))]))
    for N, d, n_pad in ((5, 3, 0), (8, 2, 3), (4, 1, 0)):
        valid = np.arange(N) < N - n_pad
        cases.append(("batch_norm",
                      lambda t, v=valid, d=d: ad.batch_norm(t[0], t[1], t[2], ad.BatchNormState(d), True, v),
                      [rng.standard_normal((N, d)), rng.standard_normal(d), rng.standard_normal(d)]))
    for N, C in ((1, 2), (4, 3), (6, 7)):
        labels = rng.integers(0, C, size=N)
        cases.append(("cross_entropy_logits", lambda t, y=labels: ad.cross_entropy_logits(t[0], y),
                      [rng.standard_normal((N, C))]))
    return cases


def check_ops(seed: int = 0, h: float = STEP) -> list[BlockResult]:
    """Worst relative error per op over all its test shapes."""
    worst: dict[str, BlockResult] = {}
    for name, f, inputs in _op_cases(np.random.default_rng(seed)):
        err = check_function(f, inputs, seed, h)
        prev = worst.get(name)
        n = sum(np.size(x) for x in inputs)
        if prev is None:
            worst[name] = BlockResult(name, n, err)
        else:
            worst[name] = BlockResult(name, prev.checked + n, max(prev.max_rel_error, err))
    return list(worst.values())
