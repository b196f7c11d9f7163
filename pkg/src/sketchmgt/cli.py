"""``sketchmgt`` command line: prepare, train, eval, attn, params, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import DATA_DIR_ENV, ConfigError, load_config, parse_config
from .data import (
    DrawingParseError, InsufficientSamplesError, LabelVocabulary, dataset_stats, drawing_to_line, flatten,
    format_stats_table, pad_truncate, read_dataset, read_drawings, split_dataset, write_dataset,
)
from .gradcheck import TOLERANCE, check_model, check_ops, tiny_config
from .model import attention_maps, count_parameters, init_params, parameter_breakdown
from .synthetic import make_corpus
from .training import (
    EpochRecord, SketchDataset, TrainingDiverged, evaluate, format_history,
    new_train_state, predict_logits, train,
)

log = logging.getLogger("sketchmgt")

PUBLISHED_COUNTS = {(128, 4, 3, 8, 345): 10_096_601, (256, 4, 3, 8, 345): 39_984_729}


class UsageError(Exception):
    """Bad input from the user; maps to exit code 2."""


def _data_root(arg: str | None) -> Path:
    root = arg or os.environ.get(DATA_DIR_ENV)
    if not root:
        raise UsageError(f"no dataset given and ${DATA_DIR_ENV} is not set")
    return Path(root)


def _dataset_file(arg: str | None, default_name: str) -> Path:
    p = _data_root(arg)
    if p.is_dir():
        p = p / default_name
    if not p.is_file():
        raise UsageError(f"dataset file {p} does not exist")
    return p


def _input_files(paths: list[str]) -> list[Path]:
    out = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            out += sorted(p.glob("*.ndjson"))
        elif p.is_file():
            out.append(p)
        else:
            raise UsageError(f"input {p} does not exist")
    if not out:
        raise UsageError("no input files found")
    return out


# --- prepare ---

def cmd_prepare(args) -> int:
    files = _input_files(args.input)
    try:
        per_class = tuple(int(x) for x in args.per_class.split(","))
    except ValueError:
        raise UsageError(f"--per-class must be three integers, got {args.per_class!r}") from None
    if len(per_class) != 3 or min(per_class) < 0:
        raise UsageError(f"--per-class must be three non-negative integers, got {args.per_class!r}")
    try:
        drawings, bad = read_drawings(files, args.max_errors)
    except DrawingParseError as exc:
        print(f"error: too many malformed lines (limit {args.max_errors}): {exc}", file=sys.stderr)
        return 1
    present = sorted({d.label for d in drawings})
    if args.classes == "all":
        wanted = present
    else:
        wanted = sorted({c.strip() for c in args.classes.split(",") if c.strip()})
        missing = [c for c in wanted if c not in present]
        if missing:
            raise UsageError(f"classes not found in input: {', '.join(missing)}")
    vocab = LabelVocabulary(wanted)
    keep = set(wanted)
    samples = [pad_truncate(flatten(d), args.max_len, vocab.index(d.label)) for d in drawings if d.label in keep]
    try:
        split = split_dataset(samples, per_class, args.seed, vocab.names)
    except InsufficientSamplesError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in split.parts().items():
        write_dataset(out / f"{name}.ndjson", part)
    vocab.save(out / "labels.txt")
    table = format_stats_table(dataset_stats(split)) if any(split.parts().values()) else ""
    (out / "stats.csv").write_text(table, encoding="utf-8")
    print(f"classes {len(vocab.names)}  train {len(split.train)}  val {len(split.val)}  test {len(split.test)}"
          f"  malformed lines {bad}")
    print(table, end="")
    return 0


def cmd_synth(args) -> int:
    corpus = make_corpus(args.classes, args.per_class, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(drawing_to_line(d) + "\n" for d in corpus), encoding="utf-8")
    print(f"wrote {len(corpus)} drawings of {args.classes} classes to {out}")
    return 0


# --- train / eval ---

def _load_split(path: Path, S: int, num_classes: int) -> list:
    if not path.is_file():
        raise UsageError(f"dataset file {path} does not exist")
    sk = read_dataset(path)
    for s in sk:
        if s.S != S:
            raise ConfigError(f"{path}: sketches have length {s.S}, config S = {S}")
        if not 0 <= s.label < num_classes:
            raise ConfigError(f"{path}: label {s.label} outside num_classes = {num_classes}")
    return sk


def _read_history(path: Path, upto: int) -> list[EpochRecord]:
    if not path.is_file():
        return []
    rows = path.read_text(encoding="utf-8").splitlines()[1:]
    out = []
    for row in rows:
        f = row.split(",")
        rec = EpochRecord(int(f[0]), float(f[1]), float(f[2]), float(f[3]), float(f[4]), float(f[5]), float(f[6]))
        if rec.epoch < upto:
            out.append(rec)
    return out


def cmd_train(args) -> int:
    exp = load_config(args.config)
    cfg, tcfg = exp.model, exp.train
    root = exp.data_dir
    train_sk = _load_split(root / "train.ndjson", cfg.S, cfg.num_classes)
    val_sk = _load_split(root / "val.ndjson", cfg.S, cfg.num_classes)
    out = exp.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(exp.to_text(), encoding="utf-8")

    if args.resume:
        try:
            state, _ = load_checkpoint(args.resume, expected=cfg)
        except CheckpointError as exc:
            raise UsageError(str(exc)) from None
        state.history = _read_history(out / "metrics.csv", state.epoch)
        log.info("resuming at epoch %d", state.epoch)
    else:
        params = init_params(cfg, ad.derive_rng(tcfg.seed, 0), ad.dtype_for(tcfg.precision))
        state = new_train_state(params, tcfg)

    tr = SketchDataset(train_sk, cfg, exp["graph_seed"])
    va = SketchDataset(val_sk, cfg, exp["graph_seed"] + 1)

    def on_epoch(rec, st):
        (out / "metrics.csv").write_text(format_history(st.history), encoding="utf-8")
        save_checkpoint(out / "last.ckpt", st, tcfg)
        return False

    try:
        best, history = train(state, tr, va, tcfg, on_epoch=on_epoch,
                              on_best=lambda b: save_checkpoint(out / "best.ckpt", b, tcfg))
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    (out / "metrics.csv").write_text(format_history(history), encoding="utf-8")
    print(f"epochs run {len(history)}  best epoch {best.best_epoch}  best val acc@1 {best.best_val_acc:.4f}")
    print(f"outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    try:
        state, tcfg = load_checkpoint(args.ckpt)
    except (CheckpointError, OSError) as exc:
        raise UsageError(str(exc)) from None
    cfg = state.params.cfg
    data = SketchDataset(_load_split(_dataset_file(args.data, "test.ndjson"), cfg.S, cfg.num_classes), cfg,
                         args.graph_seed)
    if len(data) == 0:
        raise UsageError("dataset is empty")
    res = evaluate(state.params, data)
    print(f"samples {res.n}")
    print(f"acc@1 {res.acc1:.6f}")
    print(f"acc@5 {res.acc5:.6f}")
    print(f"acc@10 {res.acc10:.6f}")
    print(f"loss {res.loss:.6f}")
    logits = predict_logits(state.params, data)
    top = logits.max(axis=1, keepdims=True)
    tied = int(((logits == top).sum(axis=1) > 1).sum())
    if tied:
        print(f"note: {tied} of {res.n} samples have tied top logits; ties rank the lower class index first")
    return 0


# --- attention export / params / gradcheck ---

def cmd_attn(args) -> int:
    try:
        state, _ = load_checkpoint(args.ckpt)
    except (CheckpointError, OSError) as exc:
        raise UsageError(str(exc)) from None
    cfg = state.params.cfg
    if cfg.variant != "mgt":
        raise UsageError("the ff_only variant has no attention to export")
    sketches = _load_split(_dataset_file(args.data, "test.ndjson"), cfg.S, cfg.num_classes)
    if not 0 <= args.sample_index < len(sketches):
        raise UsageError(f"--sample-index {args.sample_index} outside [0, {len(sketches)})")
    sk = sketches[args.sample_index]
    # same per-sample seeding as SketchDataset, so random graphs match evaluation
    adjs = [spec.build(sk, ad.derive_rng(args.graph_seed, args.sample_index, g) if spec.uses_rng else None,
                       cfg.self_loops) for g, spec in enumerate(cfg.graph_specs)]
    maps, logits = attention_maps(state.params, sk, adjs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for (l, g, i), m in sorted(maps.items()):
        name = f"layer{l}_graph{g}_head{i}.csv"
        np.savetxt(out / name, m, fmt="%.8f", delimiter=",")
        files.append({"layer": l, "graph": g, "head": i, "file": name})
    for g, a in enumerate(adjs):
        (out / f"graph{g}_adjacency.txt").write_text(a.to_text(), encoding="utf-8")
    manifest = {
        "sample_index": args.sample_index,
        "label": int(sk.label),
        "predicted": int(np.argmax(logits)),
        "true_len": int(sk.true_len),
        "S": cfg.S,
        "mask_mode": cfg.mask_mode,
        "graphs": [str(s) for s in cfg.graph_specs],
        "coords": sk.coords[:sk.true_len].astype(int).tolist(),
        "flags": sk.flags[:sk.true_len].tolist(),
        "stroke_ids": sk.stroke_ids[:sk.true_len].tolist(),
        "maps": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    print(f"wrote {len(files)} attention maps to {out}")
    return 0


def cmd_params(args) -> int:
    exp = load_config(args.config) if args.config else parse_config("")
    cfg = exp.model
    total = count_parameters(cfg)
    for name, n in parameter_breakdown(cfg).items():
        print(f"{name:22s} {n:>12,d}")
    print(f"{'total':22s} {total:>12,d}")
    key = (cfg.d_hat, cfg.L, cfg.G, cfg.heads_per_graph, cfg.num_classes)
    ref = PUBLISHED_COUNTS.get(key) if cfg.variant == "mgt" else None
    if ref is not None:
        print(f"published reference {ref:,d}  delta {total - ref:+,d}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.config:
        cfg = load_config(args.config).model
        entries = args.max_entries
    else:
        cfg, entries = tiny_config(), None
    results = [r.__class__("op:" + r.name, r.checked, r.max_rel_error) for r in check_ops(args.seed)]
    results += check_model(cfg, batch_size=2, seed=args.seed, max_entries=entries)
    worst = max(r.max_rel_error for r in results)
    for r in results:
        print(f"{r.name:32s} {r.checked:6d} {r.max_rel_error:.3e} {'ok' if r.ok else 'FAIL'}")
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:.0e})")
    return 0 if all(r.ok for r in results) else 1


# --- entry point ---

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sketchmgt", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse raw drawings, split per class, write dataset files")
    p.add_argument("--input", nargs="+", required=True, help="ndjson files or directories of them")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", default="all", help="comma-separated names or 'all'")
    p.add_argument("--per-class", default="1000,100,100", help="train,val,test counts")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int, default=100, help="padded length S")
    p.add_argument("--max-errors", type=int, default=0, help="malformed lines tolerated")
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("synth", help="write a synthetic raw ndjson corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--per-class", type=int, default=250)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="top-1/5/10 accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help=f"dataset file or directory (default ${DATA_DIR_ENV}/test.ndjson)")
    p.add_argument("--graph-seed", type=int, default=2, help="seed for random graphs")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("attn", help="export attention maps of one sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample-index", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help=f"dataset file or directory (default ${DATA_DIR_ENV}/test.ndjson)")
    p.add_argument("--graph-seed", type=int, default=2)
    p.set_defaults(fn=cmd_attn)

    p = sub.add_parser("params", help="parameter count and per-block breakdown")
    p.add_argument("--config", help="config file (defaults to the base model)")
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter block")
    p.add_argument("--config", help="check this model instead of the tiny default")
    p.add_argument("--max-entries", type=int, default=8, help="entries probed per block with --config")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
