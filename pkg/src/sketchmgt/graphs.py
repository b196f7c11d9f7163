"""Adjacency masks over the key points of one sketch.

All builders share the same conventions: entries are 0/1, padding nodes are
isolated (only their diagonal entry is set), and real nodes carry a
self-loop unless ``self_loops=False``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import SketchTensor


@dataclass
class AdjacencyMatrix:
    data: np.ndarray  # [S, S] uint8
    kind: str
    true_len: int

    @property
    def S(self) -> int:
        return self.data.shape[0]

    def to_text(self) -> str:
        return "".join("".join("1" if v else "0" for v in row) + "\n" for row in self.data)

    @classmethod
    def from_text(cls, text: str, kind: str = "text", true_len: int | None = None) -> "AdjacencyMatrix":
        rows = [r for r in text.splitlines() if r]
        data = np.array([[c == "1" for c in r] for r in rows], dtype=np.uint8)
        return cls(data, kind, len(rows) if true_len is None else true_len)


def _finish(sketch: SketchTensor, edges: np.ndarray, kind: str, self_loops: bool) -> AdjacencyMatrix:
    S, t = sketch.S, sketch.true_len
    valid = np.arange(S) < t
    a = edges & valid[:, None] & valid[None, :]
    diag = np.arange(S)
    a[diag, diag] = self_loops | ~valid
    return AdjacencyMatrix(a.astype(np.uint8), kind, t)


def _index_gap(S: int) -> np.ndarray:
    i = np.arange(S)
    return np.abs(i[:, None] - i[None, :])


def _same_stroke(sketch: SketchTensor) -> np.ndarray:
    ids = np.asarray(sketch.stroke_ids)
    return ids[:, None] == ids[None, :]


def build_khop(sketch: SketchTensor, K: int, self_loops: bool = True) -> AdjacencyMatrix:
    """Points of the same stroke within ``K`` steps along the stroke."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    edges = _same_stroke(sketch) & (_index_gap(sketch.S) <= K)
    return _finish(sketch, edges, f"khop:{K}", self_loops)


def build_global(sketch: SketchTensor, self_loops: bool = True) -> AdjacencyMatrix:
    """Temporally consecutive points that lie on different strokes."""
    edges = ~_same_stroke(sketch) & (_index_gap(sketch.S) == 1)
    return _finish(sketch, edges, "global", self_loops)


def build_full(sketch: SketchTensor, self_loops: bool = True) -> AdjacencyMatrix:
    return _finish(sketch, np.ones((sketch.S, sketch.S), dtype=bool), "full", self_loops)


def build_intra_full(sketch: SketchTensor, self_loops: bool = True) -> AdjacencyMatrix:
    return _finish(sketch, _same_stroke(sketch), "intra_full", self_loops)


def build_random(sketch: SketchTensor, density: float, rng: np.random.Generator,
                 self_loops: bool = True) -> AdjacencyMatrix:
    """Each unordered pair of real points is linked with probability ``density``."""
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must be in (0, 1], got {density}")
    S, t = sketch.S, sketch.true_len
    draw = np.zeros((S, S), dtype=bool)
    draw[:t, :t] = rng.random((t, t)) < density
    upper = np.triu(draw, 1)
    return _finish(sketch, upper | upper.T, f"random:{density:g}", self_loops)


def build_euclidean_knn(sketch: SketchTensor, k: int, self_loops: bool = True) -> AdjacencyMatrix:
    """Symmetrised k-nearest-neighbour graph on the point coordinates.

    Equal distances are resolved in favour of the lower index.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    S, t = sketch.S, sketch.true_len
    xy = np.asarray(sketch.coords[:t], dtype=np.float64)
    d2 = ((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :min(k, t - 1)]
    edges = np.zeros((S, S), dtype=bool)
    rows = np.repeat(np.arange(t), order.shape[1])
    edges[rows, order.ravel()] = True
    return _finish(sketch, edges | edges.T, f"knn:{k}", self_loops)


def union(adjs: Sequence[AdjacencyMatrix]) -> AdjacencyMatrix:
    if not adjs:
        raise ValueError("union of no graphs")
    S = adjs[0].S
    for a in adjs[1:]:
        if a.S != S:
            raise ValueError(f"union: size mismatch {S} vs {a.S}")
    data = np.zeros((S, S), dtype=np.uint8)
    for a in adjs:
        data |= a.data
    return AdjacencyMatrix(data, "union", adjs[0].true_len)


@dataclass(frozen=True)
class GraphSpec:
    kind: str  # khop | global | full | intra_full | random | knn | union
    param: float | None = None
    children: tuple["GraphSpec", ...] = field(default=())

    def __str__(self) -> str:
        if self.kind == "union":
            return "union(" + ",".join(str(c) for c in self.children) + ")"
        if self.param is None:
            return self.kind
        p = int(self.param) if self.kind in ("khop", "knn") else self.param
        return f"{self.kind}:{p:g}" if isinstance(p, float) else f"{self.kind}:{p}"

    @property
    def uses_rng(self) -> bool:
        return self.kind == "random" or any(c.uses_rng for c in self.children)

    def build(self, sketch: SketchTensor, rng: np.random.Generator | None = None,
              self_loops: bool = True) -> AdjacencyMatrix:
        if self.kind == "khop":
            return build_khop(sketch, int(self.param), self_loops)
        if self.kind == "global":
            return build_global(sketch, self_loops)
        if self.kind == "full":
            return build_full(sketch, self_loops)
        if self.kind == "intra_full":
            return build_intra_full(sketch, self_loops)
        if self.kind == "random":
            if rng is None:
                raise ValueError("random graph needs an rng")
            return build_random(sketch, float(self.param), rng, self_loops)
        if self.kind == "knn":
            return build_euclidean_knn(sketch, int(self.param), self_loops)
        if self.kind == "union":
            return union([c.build(sketch, rng, self_loops) for c in self.children])
        raise ValueError(f"unknown graph kind {self.kind!r}")


def _split_top(text: str) -> list[str]:
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise ValueError(f"unbalanced parentheses in {text!r}")
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if depth:
        raise ValueError(f"unbalanced parentheses in {text!r}")
    parts.append("".join(cur))
    return [p.strip() for p in parts]


_TOKEN = re.compile(r"^(khop|knn|random):([0-9.eE+-]+)$")


def parse_graph_spec(token: str) -> GraphSpec:
    token = token.strip()
    if token.startswith("union(") and token.endswith(")"):
        children = tuple(parse_graph_spec(t) for t in _split_top(token[6:-1]))
        return GraphSpec("union", None, children)
    if token in ("global", "full", "intra_full"):
        return GraphSpec(token)
    m = _TOKEN.match(token)
    if not m:
        raise ValueError(f"bad graph spec {token!r}")
    kind, raw = m.groups()
    if kind in ("khop", "knn"):
        if not raw.isdigit() or int(raw) < 1:
            raise ValueError(f"{kind} needs a positive integer, got {raw!r}")
        return GraphSpec(kind, int(raw))
    p = float(raw)
    if not 0.0 < p <= 1.0:
        raise ValueError(f"random density must be in (0, 1], got {raw!r}")
    return GraphSpec(kind, p)


def parse_graph_specs(text: str) -> list[GraphSpec]:
    """Ordered graph list, e.g. ``"khop:1,khop:2,global"``."""
    return [parse_graph_spec(t) for t in _split_top(text) if t]


def format_graph_specs(specs: Sequence[GraphSpec]) -> str:
    return ",".join(str(s) for s in specs)
