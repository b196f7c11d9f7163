"""Stroke drawings: parsing, flattening, padding, splitting and statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

F1, F2, F3 = 0, 1, 2  # ongoing point, stroke end, padding
PAD_COORD = -1.0


class DrawingParseError(ValueError):
    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        prefix = f"line {line_no}: " if line_no is not None else ""
        super().__init__(prefix + message)


class EmptyDrawingError(DrawingParseError):
    pass


@dataclass
class RawDrawing:
    strokes: list[list[tuple[int, int]]]
    label: str

    def __post_init__(self):
        if not self.strokes:
            raise EmptyDrawingError("drawing has no strokes")
        for stroke in self.strokes:
            if not stroke:
                raise EmptyDrawingError("drawing has an empty stroke")
            for x, y in stroke:
                if not (0 <= x <= 255 and 0 <= y <= 255):
                    raise DrawingParseError(f"coordinate ({x}, {y}) outside [0, 255]")

    @property
    def num_points(self) -> int:
        return sum(len(s) for s in self.strokes)


@dataclass
class FlatSequence:
    """Variable-length flagged key-point sequence."""

    coords: np.ndarray  # [n, 2]
    flags: np.ndarray  # [n]
    stroke_ids: np.ndarray  # [n]
    label: str = ""

    def __len__(self) -> int:
        return len(self.flags)


@dataclass
class SketchTensor:
    coords: np.ndarray  # [S, 2] float64
    flags: np.ndarray  # [S] int
    positions: np.ndarray  # [S] int
    true_len: int
    stroke_ids: np.ndarray  # [S] int, -1 on padding
    label: int = -1
    orig_len: int = 0  # key points before truncation

    @property
    def S(self) -> int:
        return len(self.flags)

    @property
    def truncated(self) -> bool:
        return self.orig_len > self.S

    def to_record(self) -> dict:
        return {
            "label_idx": int(self.label),
            "true_len": int(self.true_len),
            "coords": self.coords.tolist(),
            "flags": self.flags.tolist(),
            "stroke_ids": self.stroke_ids.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SketchTensor":
        coords = np.asarray(rec["coords"], dtype=np.float64).reshape(-1, 2)
        flags = np.asarray(rec["flags"], dtype=np.int64)
        S = len(flags)
        t = int(rec["true_len"])
        return cls(
            coords=coords,
            flags=flags,
            positions=np.arange(S),
            true_len=t,
            stroke_ids=np.asarray(rec["stroke_ids"], dtype=np.int64),
            label=int(rec["label_idx"]),
            orig_len=t,
        )


def parse_drawing_line(line: str, line_no: int | None = None) -> RawDrawing:
    """Parse one QuickDraw simplified-format record (``word`` + ``drawing``)."""
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DrawingParseError(f"invalid JSON ({exc.msg})", line_no) from None
    if not isinstance(rec, dict):
        raise DrawingParseError("record is not an object", line_no)
    if "word" not in rec or not isinstance(rec["word"], str):
        raise DrawingParseError("missing class-name field 'word'", line_no)
    if "drawing" not in rec:
        raise DrawingParseError("missing strokes field 'drawing'", line_no)
    raw = rec["drawing"]
    if not isinstance(raw, list):
        raise DrawingParseError("'drawing' is not a list", line_no)
    if not raw:
        raise EmptyDrawingError("empty strokes field", line_no)
    strokes = []
    for k, stroke in enumerate(raw):
        if not (isinstance(stroke, list) and len(stroke) >= 2):
            raise DrawingParseError(f"stroke {k} is not an [x-list, y-list] pair", line_no)
        xs, ys = stroke[0], stroke[1]
        if not isinstance(xs, list) or not isinstance(ys, list) or len(xs) != len(ys):
            raise DrawingParseError(f"stroke {k} has mismatched x/y lists", line_no)
        if not xs:
            raise EmptyDrawingError(f"stroke {k} has no points", line_no)
        try:
            strokes.append([(int(x), int(y)) for x, y in zip(xs, ys)])
        except (TypeError, ValueError):
            raise DrawingParseError(f"stroke {k} has non-integer coordinates", line_no) from None
    try:
        return RawDrawing(strokes, rec["word"])
    except DrawingParseError as exc:
        raise type(exc)(str(exc), line_no) from None


def drawing_to_line(drawing: RawDrawing) -> str:
    strokes = [[[p[0] for p in s], [p[1] for p in s]] for s in drawing.strokes]
    return json.dumps({"word": drawing.label, "drawing": strokes})


def flatten(drawing: RawDrawing) -> FlatSequence:
    coords, flags, ids = [], [], []
    for k, stroke in enumerate(drawing.strokes):
        n = len(stroke)
        coords.extend(stroke)
        flags.extend([F1] * (n - 1) + [F2])
        ids.extend([k] * n)
    return FlatSequence(
        coords=np.asarray(coords, dtype=np.float64).reshape(-1, 2),
        flags=np.asarray(flags, dtype=np.int64),
        stroke_ids=np.asarray(ids, dtype=np.int64),
        label=drawing.label,
    )


def pad_truncate(seq: FlatSequence, S: int, label: int = -1) -> SketchTensor:
    """Keep the first ``S`` points, padding shorter sequences with sentinels.

    A point cut mid-stroke keeps its original flag.
    """
    n = len(seq)
    if n < 1:
        raise ValueError("cannot pad an empty sequence")
    if S < 1:
        raise ValueError(f"S must be positive, got {S}")
    t = min(n, S)
    coords = np.full((S, 2), PAD_COORD)
    flags = np.full(S, F3, dtype=np.int64)
    ids = np.full(S, -1, dtype=np.int64)
    coords[:t] = seq.coords[:t]
    flags[:t] = seq.flags[:t]
    ids[:t] = seq.stroke_ids[:t]
    return SketchTensor(coords, flags, np.arange(S), t, ids, label, orig_len=n)


class LabelVocabulary:
    def __init__(self, names: Iterable[str]):
        self.names = list(names)
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate class names in vocabulary")
        self._index = {n: i for i, n in enumerate(self.names)}

    @classmethod
    def from_labels(cls, labels: Iterable[str]) -> "LabelVocabulary":
        return cls(sorted(set(labels)))

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"class {name!r} is not in the vocabulary") from None

    def name(self, idx: int) -> str:
        return self.names[idx]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(n + "\n" for n in self.names), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "LabelVocabulary":
        return cls(l for l in Path(path).read_text(encoding="utf-8").splitlines() if l)


@dataclass
class DatasetSplit:
    train: list[SketchTensor]
    val: list[SketchTensor]
    test: list[SketchTensor]
    seed: int = 0
    per_class: dict[int, tuple[int, int, int]] = field(default_factory=dict)

    def parts(self) -> dict[str, list[SketchTensor]]:
        return {"train": self.train, "val": self.val, "test": self.test}


class InsufficientSamplesError(ValueError):
    pass


def split_dataset(samples: Sequence[SketchTensor], per_class: tuple[int, int, int], seed: int,
                  class_names: Sequence[str] | None = None) -> DatasetSplit:
    """Per-class random split with exact requested counts."""
    n_tr, n_va, n_te = per_class
    need = n_tr + n_va + n_te
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(int(s.label), []).append(i)
    rng = np.random.default_rng(seed)
    train, val, test, counts = [], [], [], {}
    for c in sorted(by_class):
        idx = by_class[c]
        if len(idx) < need:
            name = class_names[c] if class_names is not None else str(c)
            raise InsufficientSamplesError(
                f"class {name!r} has {len(idx)} samples, {need} requested")
        chosen = [idx[j] for j in rng.permutation(len(idx))[:need]]
        train += [samples[j] for j in chosen[:n_tr]]
        val += [samples[j] for j in chosen[n_tr:n_tr + n_va]]
        test += [samples[j] for j in chosen[n_tr + n_va:]]
        counts[c] = (n_tr, n_va, n_te)
    return DatasetSplit(train, val, test, seed, counts)


@dataclass
class SetStats:
    count: int
    truncated: int
    truncated_ratio: float
    max_len: int
    min_len: int
    mean_len: float
    std_len: float


def set_stats(sketches: Sequence[SketchTensor]) -> SetStats:
    if not sketches:
        raise ValueError("cannot summarise an empty set")
    lens = np.array([s.true_len for s in sketches], dtype=np.float64)
    trunc = sum(1 for s in sketches if s.truncated)
    return SetStats(
        count=len(sketches),
        truncated=trunc,
        truncated_ratio=trunc / len(sketches),
        max_len=int(lens.max()),
        min_len=int(lens.min()),
        mean_len=float(lens.mean()),
        std_len=float(lens.std()),
    )


def dataset_stats(split: DatasetSplit) -> dict[str, SetStats]:
    """Key-point statistics per non-empty part of the split."""
    out = {name: set_stats(part) for name, part in split.parts().items() if part}
    if not out:
        raise ValueError("split is empty")
    return out


def format_stats_table(stats: dict[str, SetStats]) -> str:
    header = "set,samples,truncated,truncated_ratio,max,min,mean,std"
    rows = [header]
    for name, s in stats.items():
        rows.append(f"{name},{s.count},{s.truncated},{s.truncated_ratio:.4f},"
                    f"{s.max_len},{s.min_len},{s.mean_len:.2f},{s.std_len:.2f}")
    return "\n".join(rows) + "\n"


def synthesize_sketch(rng: np.random.Generator, n_strokes: int,
                      points_per_stroke: tuple[int, int] = (2, 8), label: str = "synthetic") -> RawDrawing:
    """Random drawing; ``points_per_stroke`` is an inclusive range."""
    if n_strokes < 1:
        raise ValueError("n_strokes must be >= 1")
    lo, hi = points_per_stroke
    strokes = []
    for _ in range(n_strokes):
        n = int(rng.integers(lo, hi + 1))
        pts = rng.integers(0, 256, size=(n, 2))
        strokes.append([(int(x), int(y)) for x, y in pts])
    return RawDrawing(strokes, label)


def write_dataset(path: str | Path, sketches: Iterable[SketchTensor]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sketches:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")) + "\n")


def read_dataset(path: str | Path) -> list[SketchTensor]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(SketchTensor.from_record(json.loads(line)))
    return out


def read_drawings(paths: Iterable[str | Path], max_errors: int = 0) -> tuple[list[RawDrawing], int]:
    """Parse QuickDraw ndjson files; returns drawings and the count of bad lines.

    Raises the first parse error once more than ``max_errors`` lines fail.
    """
    drawings, bad = [], 0
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            for no, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    drawings.append(parse_drawing_line(line, no))
                except DrawingParseError:
                    bad += 1
                    if bad > max_errors:
                        raise
    return drawings, bad
