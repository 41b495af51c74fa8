"""``gdn`` command line: synth, preprocess, train, classify, explain, ablate.

Exit codes: 0 ok, 2 usage, 3 data, 4 numeric. Fatal messages go to stderr
as ``gdn: <CODE>: <message>``. Every command writes ``run.json`` into its
output directory. ``GDN_LOG`` sets the log level (default WARNING).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .detector import (
    SegmentVerdict, Threshold, classify_segment, classify_subject, evaluate, format_subject_table,
    score_features, select_threshold, subject_report, write_verdicts_csv,
)
from .dsp import dump_features, featurize
from .errors import DataError, GDNError, NumericError, UsageError
from .explain import explain_segments
from .ingest import (
    Label, Recording, SplitPlan, default_rules, load_corpus, make_split, segment_recording,
    synth_corpus, write_corpus,
)
from .trainer import (
    PRECISIONS, StackSet, TrainConfig, load_checkpoint, save_checkpoint, train_generator,
)

log = logging.getLogger("gdn")

CKPT_NAME = "generator_{}.gdn"
SPLIT_NAME = "split.json"
RUN_NAME = "run.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--k", type=int, default=d.k, help="neighbouring electrodes per stack")
    p.add_argument("--band-low", type=float, default=d.band_low, help="pass-band lower edge, Hz")
    p.add_argument("--band-high", type=float, default=d.band_high, help="pass-band upper edge, Hz")
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--batch", type=int, default=d.batch_size, help="electrode stacks per minibatch")
    p.add_argument("--patience", type=int, default=d.early_stop_patience, help="early-stop patience in epochs")
    p.add_argument("--precision", choices=sorted(PRECISIONS), default=d.precision)


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", required=True, help="directory holding manifest.json")
    p.add_argument("--train-per-class", type=int, default=15)
    p.add_argument("--val-per-class", type=int, default=5)
    p.add_argument("--window", type=float, default=10.0, help="segment length, seconds")
    p.add_argument("--start", type=float, default=0.0, help="offset of the first segment, seconds")
    p.add_argument("--max-segments", type=int, default=None, help="cap on segments per subject")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gdn", description="Generative detection network for EEG depression screening.")
    parser.add_argument("--version", action="version", version=f"gdn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
        p.add_argument("--threads", type=int, default=1, help="worker threads for featurising and scoring")

    p = sub.add_parser("synth", help="write a synthetic two-class corpus")
    common(p)
    p.add_argument("--subjects", type=int, default=10, help="subjects per class")
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--fs", type=int, default=250)
    p.add_argument("--seconds", type=int, default=80)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--format", choices=("f32le", "csv"), default="f32le")

    p = sub.add_parser("preprocess", help="dump filtered wavelet features of one segment")
    common(p)
    _add_data_flags(p)
    p.add_argument("--k", type=int, default=TrainConfig.k)
    p.add_argument("--band-low", type=float, default=TrainConfig.band_low)
    p.add_argument("--band-high", type=float, default=TrainConfig.band_high)
    p.add_argument("--segment", required=True, help="SUBJECT:INDEX")

    p = sub.add_parser("train", help="train the MDD and HC generators")
    common(p)
    _add_data_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("classify", help="pick n0 on validation, evaluate on test")
    common(p)
    _add_data_flags(p)
    p.add_argument("--model", default=None, help="directory with the two checkpoints (default: --out)")
    p.add_argument("--n0-override", type=int, default=None, help="use this n0 instead of selecting one")

    p = sub.add_parser("explain", help="render per-electrode fit maps")
    common(p)
    _add_data_flags(p)
    p.add_argument("--model", default=None, help="directory with the two checkpoints (default: --out)")
    p.add_argument("--segment", action="append", required=True, help="SUBJECT:INDEX, repeatable")
    p.add_argument("--which", choices=("mdd", "hc", "winner"), default="winner")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--n0-override", type=int, default=None)

    p = sub.add_parser("ablate", help="train and classify for each k")
    common(p)
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--k-list", default="5,10,15,20", help="comma-separated k values")
    return parser


# -- shared helpers -------------------------------------------------------------

def _seed(args) -> int:
    if args.seed is None:
        log.info("no --seed given; using 0")
        return 0
    if args.seed < 0:
        raise UsageError("--seed must be non-negative")
    return args.seed


def _threads(args) -> int:
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return args.threads


def _train_config(args, k: Optional[int] = None) -> TrainConfig:
    cfg = TrainConfig(
        k=args.k if k is None else k, band_low=args.band_low, band_high=args.band_high, learning_rate=args.lr,
        batch_size=args.batch, epochs=args.epochs, seed=_seed(args), early_stop_patience=args.patience,
        precision=args.precision,
    )
    cfg.validate()
    return cfg


def _write_run(out: Path, command: str, argv: Sequence[str], config: dict, results: Optional[dict] = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": config,
    }
    if results is not None:
        record["results"] = results
    path = out / RUN_NAME
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _load(args) -> tuple[list[Recording], SplitPlan]:
    recs = load_corpus(args.corpus)
    labels = {r.label for r in recs}
    if labels != set(Label):
        raise DataError(f"corpus needs both classes, found {sorted(l.value for l in labels)}")
    return recs, make_split(recs, args.train_per_class, args.val_per_class)


def _segments(args, recs: Sequence[Recording], ids) -> list:
    wanted = set(ids)
    segs = []
    for r in recs:
        if r.subject_id in wanted:
            segs += segment_recording(r, args.window, args.start, args.max_segments)
    return segs


def _featurize_all(segs, k: int, band, threads: int) -> list:
    def one(s):
        return featurize(s.data, s.fs, k, band)

    if threads > 1 and len(segs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, segs))
    return [one(s) for s in segs]


def _stack_set(segs, feats, label: Label) -> Optional[StackSet]:
    items = [(f, s.subject_id, s.label) for s, f in zip(segs, feats) if s.label == label]
    return StackSet.from_features(items) if items else None


def _parse_segment_id(text: str) -> tuple[str, int]:
    sid, sep, idx = text.rpartition(":")
    if not sep or not sid:
        raise UsageError(f"segment id must look like SUBJECT:INDEX, got {text!r}")
    try:
        return sid, int(idx)
    except ValueError:
        raise UsageError(f"segment index must be an integer, got {idx!r}") from None


def _model_dir(args) -> Path:
    return Path(args.model) if args.model else Path(args.out)


def _load_generators(model: Path):
    gens = {}
    for label in Label:
        path = model / CKPT_NAME.format(label.value)
        if not path.exists():
            raise DataError(f"missing checkpoint {path}; run 'gdn train' first")
        gens[label] = load_checkpoint(path)
    cfgs = {lab: ck.train_config for lab, ck in gens.items()}
    if cfgs[Label.MDD]["k"] != cfgs[Label.HC]["k"]:
        raise DataError("the two checkpoints were trained with different k")
    return gens


def _score(segs, feats, gens, threads: int) -> list[SegmentVerdict]:
    def one(pair):
        s, f = pair
        return score_features(
            f, gens[Label.MDD].params, gens[Label.HC].params,
            subject_id=s.subject_id, segment_index=s.segment_index, true_label=Label(s.label),
        )

    pairs = list(zip(segs, feats))
    if threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, pairs))
    return [one(p) for p in pairs]


# -- commands ---------------------------------------------------------------------

def cmd_synth(args, argv) -> dict:
    seed = _seed(args)
    if args.channels < 2:
        raise UsageError("--channels must be >= 2")
    if args.subjects < 1:
        raise UsageError("--subjects must be >= 1")
    rule_a, rule_b = default_rules(args.channels, args.noise)
    recs = synth_corpus(seed, args.subjects, args.channels, args.fs, args.seconds, rule_a, rule_b)
    out = Path(args.out)
    write_corpus(recs, out, args.format)
    config = {
        "seed": seed, "subjects_per_class": args.subjects, "channels": args.channels, "fs": args.fs,
        "seconds": args.seconds, "noise": args.noise, "format": args.format,
        "rule_a": {"nonlinearity": rule_a.nonlinearity, "weights": rule_a.weights.tolist()},
        "rule_b": {"nonlinearity": rule_b.nonlinearity, "weights": rule_b.weights.tolist()},
    }
    _write_run(out, "synth", argv, config)
    print(f"wrote {len(recs)} recordings to {out}")
    return {"recordings": len(recs)}


def cmd_preprocess(args, argv) -> dict:
    recs = load_corpus(args.corpus)
    sid, idx = _parse_segment_id(args.segment)
    rec = next((r for r in recs if r.subject_id == sid), None)
    if rec is None:
        raise DataError(f"unknown subject {sid!r}")
    segs = segment_recording(rec, args.window, args.start, args.max_segments)
    if not 0 <= idx < len(segs):
        raise DataError(f"{sid} has {len(segs)} segments; index {idx} is out of range")
    cfg = TrainConfig(k=args.k, band_low=args.band_low, band_high=args.band_high)
    cfg.validate()
    feats = featurize(segs[idx].data, rec.fs, cfg.k, cfg.band)
    out = Path(args.out)
    dump_features(feats, out, f"{sid}_seg{idx:03d}")
    _write_run(out, "preprocess", argv, {"segment": args.segment, **cfg.to_dict()})
    print(f"features of {sid}:{idx} written to {out}")
    return {"length": int(feats.s_ca.shape[-1])}


def _train(args, cfg: TrainConfig, out: Path) -> dict:
    recs, split = _load(args)
    threads = _threads(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / SPLIT_NAME).write_text(json.dumps(split.to_dict(), indent=2) + "\n")
    train_segs = _segments(args, recs, split.train)
    val_segs = _segments(args, recs, split.val)
    train_feats = _featurize_all(train_segs, cfg.k, cfg.band, threads)
    val_feats = _featurize_all(val_segs, cfg.k, cfg.band, threads)

    def fit(label: Label):
        train = _stack_set(train_segs, train_feats, label)
        if train is None:
            raise DataError(f"no {label.value} subjects in the training split")
        val = _stack_set(val_segs, val_feats, label)
        log_path = out / f"train_log_{label.value}.jsonl"
        log_path.unlink(missing_ok=True)
        ck = train_generator(label, train, cfg, val, log_path=log_path)
        save_checkpoint(ck, out / CKPT_NAME.format(label.value))
        return label, ck

    if threads > 1:
        with ThreadPoolExecutor(max_workers=2) as pool:
            fitted = dict(pool.map(fit, list(Label)))
    else:
        fitted = dict(fit(label) for label in Label)
    summary = {
        lab.value: {"best_epoch": ck.epoch, "epochs_run": len(ck.history), "config_hash": ck.config_hash}
        for lab, ck in fitted.items()
    }
    for lab, s in summary.items():
        print(f"{lab} generator: best epoch {s['best_epoch']} of {s['epochs_run']}")
    return summary


def cmd_train(args, argv) -> dict:
    cfg = _train_config(args)
    out = Path(args.out)
    summary = _train(args, cfg, out)
    _write_run(out, "train", argv, {**cfg.to_dict(), **_split_flags(args)}, summary)
    return summary


def _split_flags(args) -> dict:
    return {
        "corpus": str(args.corpus), "train_per_class": args.train_per_class, "val_per_class": args.val_per_class,
        "window": args.window, "start": args.start, "max_segments": args.max_segments,
    }


def _classify(args, model: Path, out: Path, n0_override: Optional[int]) -> dict:
    recs, split = _load(args)
    if not split.test:
        raise DataError("the test split is empty")
    threads = _threads(args)
    gens = _load_generators(model)
    tc = gens[Label.MDD].train_config
    cfg = TrainConfig(k=tc["k"], band_low=tc["band_low"], band_high=tc["band_high"])
    results = {}
    verdicts = {}
    for name in ("val", "test"):
        segs = _segments(args, recs, getattr(split, name))
        feats = _featurize_all(segs, cfg.k, cfg.band, threads)
        verdicts[name] = _score(segs, feats, gens, threads)
    n_electrodes = verdicts["test"][0].n_electrodes
    if n0_override is not None:
        if not 0 <= n0_override <= n_electrodes + 1:
            raise UsageError(f"--n0-override must lie in [0, {n_electrodes + 1}]")
        threshold = Threshold(n0_override, float("nan"), rule="override")
    else:
        threshold = select_threshold([(v, v.true_label) for v in verdicts["val"]], n_electrodes)
    for name, vs in verdicts.items():
        for v in vs:
            v.decision = classify_segment(v, threshold)
        seg_metrics = evaluate([v.decision for v in vs], [v.true_label for v in vs])
        rows = subject_report(vs, threshold)
        subj_metrics = evaluate([Label(r["predicted"]) for r in rows], [Label(r["class"]) for r in rows])
        write_verdicts_csv(vs, out / f"verdicts_{name}.csv")
        (out / f"subjects_{name}.txt").write_text(format_subject_table(rows) + "\n")
        results[name] = {"segments": seg_metrics.as_dict(), "subjects": subj_metrics.as_dict(), "report": rows}
    results["threshold"] = {"n0": threshold.n0, "val_accuracy": threshold.val_accuracy, "rule": threshold.rule}
    (out / "metrics.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return results


def cmd_classify(args, argv) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _model_dir(args)
    res = _classify(args, model, out, args.n0_override)
    t = res["threshold"]
    test = res["test"]
    print(f"n0 = {t['n0']} (validation accuracy {t['val_accuracy']:.4f})")
    seg = test["segments"]
    print(f"test segments: sensitivity {seg['sensitivity']:.4f} specificity {seg['specificity']:.4f} "
          f"accuracy {seg['accuracy']:.4f}")
    print((out / "subjects_test.txt").read_text(), end="")
    summary = {"threshold": t, "test_segments": seg, "test_subjects": test["subjects"]}
    _write_run(out, "classify", argv, {"model": str(model), "n0_override": args.n0_override, **_split_flags(args)}, summary)
    return summary


def cmd_explain(args, argv) -> dict:
    recs, _ = _load(args)
    threads = _threads(args)
    model = _model_dir(args)
    gens = _load_generators(model)
    tc = gens[Label.MDD].train_config
    cfg = TrainConfig(k=tc["k"], band_low=tc["band_low"], band_high=tc["band_high"])
    by_id = {r.subject_id: r for r in recs}
    wanted = [_parse_segment_id(s) for s in args.segment]
    segs = []
    for sid, idx in wanted:
        if sid not in by_id:
            raise DataError(f"unknown subject {sid!r}")
        all_segs = segment_recording(by_id[sid], args.window, args.start, args.max_segments)
        if not 0 <= idx < len(all_segs):
            raise DataError(f"{sid} has {len(all_segs)} segments; index {idx} is out of range")
        segs.append(all_segs[idx])
    n0 = args.n0_override
    metrics = model / "metrics.json"
    if n0 is None and metrics.exists():
        n0 = json.loads(metrics.read_text())["threshold"]["n0"]
    feats = _featurize_all(segs, cfg.k, cfg.band, threads)
    verdicts = _score(segs, feats, gens, threads)
    if n0 is not None:
        for v in verdicts:
            v.decision = classify_segment(v, Threshold(n0, float("nan")))
    out = Path(args.out)
    written = []
    for seg, v in zip(segs, verdicts):
        rec = by_id[seg.subject_id]
        written += explain_segments([v], out, rec.positions, args.which, args.resolution, rec.channels)
    for w in written:
        print(f"wrote {w['ppm']}")
    summary = {"files": [str(w["ppm"]) for w in written], "n0": n0}
    _write_run(out, "explain", argv, {"model": str(model), "segments": args.segment, "which": args.which,
                                      "resolution": args.resolution, **_split_flags(args)}, summary)
    return summary


def _parse_k_list(text: str) -> list[int]:
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--k-list must be comma-separated integers, got {text!r}") from None
    if not ks:
        raise UsageError("--k-list is empty")
    unique = list(dict.fromkeys(ks))
    if len(unique) != len(ks):
        log.warning("duplicate k values removed: %s -> %s", ks, unique)
    return unique


def format_ablation(rows: Sequence[dict]) -> str:
    lines = [f"{'k':>4} {'sensitivity':>12} {'specificity':>12} {'accuracy':>9}"]
    for r in rows:
        lines.append(f"{r['k']:>4} {r['sensitivity']:>12.4f} {r['specificity']:>12.4f} {r['accuracy']:>9.4f}")
    return "\n".join(lines)


def cmd_ablate(args, argv) -> dict:
    ks = _parse_k_list(args.k_list)
    cfgs = [_train_config(args, k) for k in ks]
    out = Path(args.out)
    rows = []
    for cfg in cfgs:
        run = out / f"k{cfg.k:02d}"
        _train(args, cfg, run)
        res = _classify(args, run, run, None)
        seg = res["test"]["segments"]
        rows.append({"k": cfg.k, "sensitivity": seg["sensitivity"], "specificity": seg["specificity"],
                     "accuracy": seg["accuracy"], "n0": res["threshold"]["n0"]})
    table = format_ablation(rows)
    (out / "ablation.txt").write_text(table + "\n")
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(table)
    _write_run(out, "ablate", argv, {"k_list": ks, **cfgs[0].to_dict(), **_split_flags(args)}, {"rows": rows})
    return {"rows": rows}


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "classify": cmd_classify,
    "explain": cmd_explain,
    "ablate": cmd_ablate,
}


def _configure_logging() -> None:
    level = os.environ.get("GDN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args, argv)
    except GDNError as exc:
        print(f"gdn: {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"gdn: {NumericError.code}: {exc}", file=sys.stderr)
        return NumericError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
