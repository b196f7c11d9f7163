"""Multi-graph transformer for sketch classification.

Weight layout (names double as checkpoint keys)::

    embed.coord            [2, d_hat]        coordinate embedding, no bias
    embed.table            [S + 3, d_hat]    rows 0..S-1 positions, S..S+2 flags
    layers.{l}.graph{g}.wq [d, d]            per-head projections fused column-wise
    layers.{l}.graph{g}.wk, .wv, .wo
    layers.{l}.mix.weight  [G * d, d]        cross-graph output projection
    layers.{l}.mix.bias    [d]
    layers.{l}.ff.weight / .ff.bias
    layers.{l}.bn1.*, layers.{l}.bn2.*       gamma/beta (+ running stats buffers)
    head.fc1.*, head.fc2.*, head.out.*       classifier MLP

Head ``i`` of a fused projection owns columns ``i*d_head:(i+1)*d_head``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SketchTensor
from .graphs import AdjacencyMatrix, GraphSpec, parse_graph_specs

MASK_MODES = ("pre_softmax", "post_softmax")
VARIANTS = ("mgt", "ff_only")
FF_ONLY_LAYERS = 4


@dataclass
class MGTConfig:
    S: int = 100
    d_hat: int = 128
    L: int = 4
    heads_per_graph: int = 8
    dropout: float = 0.1
    graph_specs: list[GraphSpec] = field(default_factory=lambda: parse_graph_specs("khop:1,khop:2,global"))
    mask_mode: str = "pre_softmax"
    self_loops: bool = True
    num_classes: int = 345
    coord_scale: float = 256.0
    variant: str = "mgt"

    def __post_init__(self):
        if isinstance(self.graph_specs, str):
            self.graph_specs = parse_graph_specs(self.graph_specs)
        if self.S < 1 or self.d_hat < 1 or self.num_classes < 1:
            raise ValueError("S, d_hat and num_classes must be positive")
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "mgt":
            if not self.graph_specs:
                raise ValueError("the mgt variant needs at least one graph")
            if self.d % self.heads_per_graph:
                raise ValueError(f"d = {self.d} is not divisible by heads_per_graph = {self.heads_per_graph}")

    @property
    def d(self) -> int:
        return 3 * self.d_hat

    @property
    def G(self) -> int:
        return len(self.graph_specs)

    @property
    def heads_total(self) -> int:
        return self.G * self.heads_per_graph

    @property
    def d_head(self) -> int:
        return self.d // self.heads_per_graph

    def to_dict(self) -> dict:
        return {
            "S": self.S, "d_hat": self.d_hat, "L": self.L, "heads_per_graph": self.heads_per_graph,
            "dropout": self.dropout, "graphs": ",".join(str(g) for g in self.graph_specs),
            "mask_mode": self.mask_mode, "self_loops": self.self_loops,
            "num_classes": self.num_classes, "coord_scale": self.coord_scale, "variant": self.variant,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MGTConfig":
        d = dict(d)
        d["graph_specs"] = parse_graph_specs(d.pop("graphs"))
        return cls(**d)


def param_shapes(cfg: MGTConfig) -> dict[str, tuple[int, ...]]:
    """Every trainable tensor, in a fixed order."""
    d, dh, S = cfg.d, cfg.d_hat, cfg.S
    shapes: dict[str, tuple[int, ...]] = {
        "embed.coord": (2, dh),
        "embed.table": (S + 3, dh),
    }
    if cfg.variant == "mgt":
        for l in range(cfg.L):
            p = f"layers.{l}"
            for g in range(cfg.G):
                for w in ("wq", "wk", "wv", "wo"):
                    shapes[f"{p}.graph{g}.{w}"] = (d, d)
            shapes[f"{p}.mix.weight"] = (cfg.G * d, d)
            shapes[f"{p}.mix.bias"] = (d,)
            shapes[f"{p}.ff.weight"] = (d, d)
            shapes[f"{p}.ff.bias"] = (d,)
            for bn in ("bn1", "bn2"):
                shapes[f"{p}.{bn}.gamma"] = (d,)
                shapes[f"{p}.{bn}.beta"] = (d,)
    else:
        for l in range(FF_ONLY_LAYERS):
            p = f"ff_layers.{l}"
            shapes[f"{p}.ff.weight"] = (d, d)
            shapes[f"{p}.ff.bias"] = (d,)
            shapes[f"{p}.bn.gamma"] = (d,)
            shapes[f"{p}.bn.beta"] = (d,)
    h = 4 * dh
    shapes["head.fc1.weight"] = (d, h)
    shapes["head.fc1.bias"] = (h,)
    shapes["head.fc2.weight"] = (h, h)
    shapes["head.fc2.bias"] = (h,)
    shapes["head.out.weight"] = (h, cfg.num_classes)
    shapes["head.out.bias"] = (cfg.num_classes,)
    return shapes


def bn_sites(cfg: MGTConfig) -> list[str]:
    if cfg.variant == "mgt":
        return [f"layers.{l}.{bn}" for l in range(cfg.L) for bn in ("bn1", "bn2")]
    return [f"ff_layers.{l}.bn" for l in range(FF_ONLY_LAYERS)]


def count_parameters(cfg: MGTConfig) -> int:
    """Trainable scalars; batch-norm running statistics are not counted."""
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def parameter_breakdown(cfg: MGTConfig) -> dict[str, int]:
    """Parameter counts grouped into embedding / attention / mix / ff / norm / classifier."""
    groups: dict[str, int] = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("embed."):
            key = name
        elif ".graph" in name:
            key = "attention (q/k/v/o)"
        elif ".mix." in name:
            key = "graph mix"
        elif ".ff." in name:
            key = "feed-forward"
        elif ".bn" in name:
            key = "batch norm"
        else:
            key = "classifier"
        groups[key] = groups.get(key, 0) + math.prod(shape)
    return groups


class ModelParams:
    """Named trainable tensors plus batch-norm running statistics."""

    def __init__(self, cfg: MGTConfig, tensors: dict[str, Tensor], bn: dict[str, ad.BatchNormState]):
        self.cfg = cfg
        self.tensors = tensors
        self.bn = bn

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for site, st in self.bn.items():
            out[f"{site}.running_mean"] = st.running_mean
            out[f"{site}.running_var"] = st.running_var
        return out

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for site, st in self.bn.items():
            st.running_mean = np.array(buffers[f"{site}.running_mean"])
            st.running_var = np.array(buffers[f"{site}.running_var"])


def init_params(cfg: MGTConfig, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit-normal embedding table, identity batch norm."""
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith((".bias", ".beta")):
            arr = np.zeros(shape)
        elif name == "embed.table":
            arr = rng.standard_normal(shape)
        else:
            lim = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-lim, lim, size=shape)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    bn = {site: ad.BatchNormState(cfg.d, dtype=dtype) for site in bn_sites(cfg)}
    return ModelParams(cfg, tensors, bn)


@dataclass
class Batch:
    coords: np.ndarray  # [B, S, 2]
    flags: np.ndarray  # [B, S]
    positions: np.ndarray  # [B, S]
    true_len: np.ndarray  # [B]
    labels: np.ndarray  # [B]
    adj: np.ndarray  # [G, B, S, S] bool

    @property
    def size(self) -> int:
        return len(self.true_len)

    @property
    def valid(self) -> np.ndarray:
        S = self.flags.shape[1]
        return np.arange(S)[None, :] < self.true_len[:, None]


def make_batch(sketches: Sequence[SketchTensor], adjs: Sequence[Sequence[AdjacencyMatrix]] | np.ndarray) -> Batch:
    """Stack sketches; ``adjs[n][g]`` is graph ``g`` of sketch ``n``."""
    if isinstance(adjs, np.ndarray):
        adj = adjs.astype(bool, copy=False)
    else:
        G = len(adjs[0]) if len(adjs) else 0
        adj = np.array([[a[g].data for a in adjs] for g in range(G)], dtype=bool)
    return Batch(
        coords=np.stack([s.coords for s in sketches]),
        flags=np.stack([s.flags for s in sketches]),
        positions=np.stack([s.positions for s in sketches]),
        true_len=np.array([s.true_len for s in sketches]),
        labels=np.array([s.label for s in sketches]),
        adj=adj,
    )


@dataclass
class ActivationSet:
    hidden: list[np.ndarray] = field(default_factory=list)  # h^(l), l = 0..L, each [B, S, d]
    intermediate: list[np.ndarray] = field(default_factory=list)  # h-hat per layer
    attention: list[list[np.ndarray]] = field(default_factory=list)  # [l][g] -> [B, heads, S, S]
    readout: np.ndarray | None = None


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ad.matmul(x, w)
    return y if b is None else ad.add(y, b)


def embed_input(params: ModelParams, batch: Batch) -> Tensor:
    cfg = params.cfg
    if batch.flags.shape[1] != cfg.S:
        raise ValueError(f"batch has S = {batch.flags.shape[1]}, model expects {cfg.S}")
    coords = Tensor(batch.coords / cfg.coord_scale, dtype=params.dtype)
    c = ad.matmul(coords, params["embed.coord"])
    f = ad.embedding_lookup(params["embed.table"], cfg.S + batch.flags)
    p = ad.embedding_lookup(params["embed.table"], batch.positions)
    return ad.concat_lastdim([c, f, p])


def graph_attention(q: Tensor, k: Tensor, v: Tensor, adj: np.ndarray, mask_mode: str) -> tuple[Tensor, Tensor]:
    """Masked scaled dot-product attention on ``[..., S, d_k]`` inputs.

    Returns ``(output, weights)``.  ``adj`` must broadcast to ``[..., S, S]``.
    """
    scores = ad.matmul(ad.scale(q, 1.0 / math.sqrt(q.shape[-1])), ad.swapaxes(k, -1, -2))
    if mask_mode == "pre_softmax":
        w = ad.softmax_lastdim(ad.masked_fill_neg_inf(scores, adj))
    elif mask_mode == "post_softmax":
        w = ad.hadamard_mask(ad.softmax_lastdim(scores), adj)
    else:
        raise ValueError(f"unknown mask mode {mask_mode!r}")
    return ad.matmul(w, v), w


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, S, d = x.shape
    return ad.swapaxes(ad.reshape(x, (B, S, heads, d // heads)), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    B, h, S, dk = x.shape
    return ad.reshape(ad.swapaxes(x, 1, 2), (B, S, h * dk))


def multi_head(h: Tensor, adj: np.ndarray, params: ModelParams, prefix: str, train: bool,
               rng: np.random.Generator | None) -> tuple[Tensor, Tensor]:
    """One graph's multi-head attention; ``adj`` is ``[B, S, S]``."""
    cfg = params.cfg
    hd = ad.dropout(h, cfg.dropout, train, rng)
    q = _split_heads(ad.matmul(hd, params[prefix + ".wq"]), cfg.heads_per_graph)
    k = _split_heads(ad.matmul(hd, params[prefix + ".wk"]), cfg.heads_per_graph)
    v = _split_heads(ad.matmul(hd, params[prefix + ".wv"]), cfg.heads_per_graph)
    out, w = graph_attention(q, k, v, adj[:, None, :, :], cfg.mask_mode)
    return ad.matmul(_merge_heads(out), params[prefix + ".wo"]), w


def mgmha(h: Tensor, adj: np.ndarray, params: ModelParams, layer: int, train: bool,
          rng: np.random.Generator | None, acts: ActivationSet | None = None) -> Tensor:
    """Multi-graph multi-head attention; ``adj`` is ``[G, B, S, S]``.

    All graphs' heads run as one batched attention.  This is numerically the
    concatenation of :func:`multi_head` outputs, except that a single dropout
    mask on ``h`` is shared across graphs.
    """
    cfg = params.cfg
    p = f"layers.{layer}"
    G, nh = cfg.G, cfg.heads_per_graph
    B, S, d = h.shape
    hd = ad.dropout(h, cfg.dropout, train, rng)

    def proj(w: str) -> Tensor:
        ws = [params[f"{p}.graph{g}.{w}"] for g in range(G)]
        return _split_heads(ad.matmul(hd, ws[0] if G == 1 else ad.concat_lastdim(ws)), G * nh)

    mask = np.repeat(np.swapaxes(adj, 0, 1), nh, axis=1)  # [B, G*nh, S, S]
    out, w = graph_attention(proj("wq"), proj("wk"), proj("wv"), mask, cfg.mask_mode)
    if acts is not None:
        acts.attention.append([w.data[:, g * nh:(g + 1) * nh] for g in range(G)])
    merged = _merge_heads(out)  # [B, S, G*d], graph-major columns
    wo = [params[f"{p}.graph{g}.wo"] for g in range(G)]
    if G == 1:
        gheads = ad.matmul(merged, wo[0])
    else:
        wo_stack = ad.swapaxes(ad.reshape(ad.concat_lastdim(wo), (d, G, d)), 0, 1)  # [G, d, d]
        per_graph = ad.matmul(ad.swapaxes(ad.reshape(merged, (B, S, G, d)), 1, 2), wo_stack)
        gheads = ad.reshape(ad.swapaxes(per_graph, 1, 2), (B, S, G * d))
    return ad.relu(_linear(gheads, params[p + ".mix.weight"], params[p + ".mix.bias"]))


def mgmha_unfused(h: Tensor, adj: np.ndarray, params: ModelParams, layer: int, train: bool,
                  rng: np.random.Generator | None) -> Tensor:
    """Reference path: one :func:`multi_head` call per graph."""
    p = f"layers.{layer}"
    heads = [multi_head(h, adj[g], params, f"{p}.graph{g}", train, rng)[0] for g in range(params.cfg.G)]
    mixed = heads[0] if len(heads) == 1 else ad.concat_lastdim(heads)
    return ad.relu(_linear(mixed, params[p + ".mix.weight"], params[p + ".mix.bias"]))


def _bn_nodes(x: Tensor, params: ModelParams, site: str, train: bool, valid: np.ndarray) -> Tensor:
    B, S, d = x.shape
    flat = ad.reshape(x, (B * S, d))
    y = ad.batch_norm(flat, params[site + ".gamma"], params[site + ".beta"], params.bn[site],
                      train, valid.reshape(-1))
    return ad.reshape(y, (B, S, d))


def _feed_forward(x: Tensor, params: ModelParams, prefix: str, train: bool, rng) -> Tensor:
    y = ad.relu(_linear(x, params[prefix + ".weight"], params[prefix + ".bias"]))
    return ad.dropout(y, params.cfg.dropout, train, rng)


def mgt_layer(h: Tensor, adj: np.ndarray, valid: np.ndarray, params: ModelParams, layer: int,
              train: bool, rng, acts: ActivationSet | None = None) -> Tensor:
    p = f"layers.{layer}"
    h_hat = _bn_nodes(ad.add(h, mgmha(h, adj, params, layer, train, rng, acts)), params, p + ".bn1", train, valid)
    if acts is not None:
        acts.intermediate.append(h_hat.data)
    out = ad.add(h_hat, _feed_forward(h_hat, params, p + ".ff", train, rng))
    return _bn_nodes(out, params, p + ".bn2", train, valid)


def readout(h: Tensor, true_len) -> Tensor:
    tl = np.asarray(true_len)
    if np.any(tl < 1) or np.any(tl > h.shape[1]):
        raise ValueError("true_len must lie in [1, S]")
    valid = np.arange(h.shape[1])[None, :] < tl[:, None]
    return ad.sum_rows_masked(h, valid)


def classify(h: Tensor, params: ModelParams, train: bool, rng) -> Tensor:
    x = _feed_forward(h, params, "head.fc1", train, rng)
    x = _feed_forward(x, params, "head.fc2", train, rng)
    return _linear(x, params["head.out.weight"], params["head.out.bias"])


def forward(params: ModelParams, batch: Batch, train: bool = False, rng: np.random.Generator | None = None,
            keep_activations: bool = False) -> tuple[Tensor, ActivationSet | None]:
    """Logits ``[B, num_classes]`` and, optionally, the intermediate activations."""
    cfg = params.cfg
    if train and cfg.dropout > 0 and rng is None:
        raise ValueError("train mode with dropout needs an rng")
    acts = ActivationSet() if keep_activations else None
    valid = batch.valid
    h = embed_input(params, batch)
    if acts is not None:
        acts.hidden.append(h.data)
    if cfg.variant == "mgt":
        if batch.adj.shape[0] != cfg.G:
            raise ValueError(f"batch carries {batch.adj.shape[0]} graphs, config expects {cfg.G}")
        for l in range(cfg.L):
            h = mgt_layer(h, batch.adj, valid, params, l, train, rng, acts)
            if acts is not None:
                acts.hidden.append(h.data)
    else:
        for l in range(FF_ONLY_LAYERS):
            p = f"ff_layers.{l}"
            h = _bn_nodes(ad.add(h, _feed_forward(h, params, p + ".ff", train, rng)), params, p + ".bn", train, valid)
            if acts is not None:
                acts.hidden.append(h.data)
    r = readout(h, batch.true_len)
    if acts is not None:
        acts.readout = r.data
    return classify(r, params, train, rng), acts


def build_graphs(cfg: MGTConfig, sketch: SketchTensor, rng: np.random.Generator | None = None) -> list[AdjacencyMatrix]:
    return [spec.build(sketch, rng, cfg.self_loops) for spec in cfg.graph_specs]


def attention_maps(params: ModelParams, sketch: SketchTensor, adjs: Sequence[AdjacencyMatrix]):
    """Effective attention weights of one sketch, keyed by ``(layer, graph, head)``.

    Also returns the logits so callers can report the prediction.
    """
    cfg = params.cfg
    batch = make_batch([sketch], [adjs])
    logits, acts = forward(params, batch, train=False, keep_activations=True)
    maps = {}
    for l, per_graph in enumerate(acts.attention):
        for g, w in enumerate(per_graph):
            for i in range(cfg.heads_per_graph):
                maps[(l, g, i)] = w[0, i]
    return maps, logits.data[0]
