"""Segment scoring by generator competition, threshold selection and
subject-level aggregation.

A segment's count ``n`` is the number of electrodes that the MDD generator
reconstructs strictly better than the HC generator. A segment is called MDD
when ``n >= n0``; subjects are called by majority over their segments.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dsp import SegmentFeatures, featurize
from .errors import DataError
from .ingest import Label, Segment
from .model import GeneratorParams
from .trainer import StackSet, TrainConfig, time_domain_errors


@dataclass
class ElectrodeScore:
    electrode: int
    err_mdd: float
    err_hc: float


@dataclass
class SegmentVerdict:
    n: int
    scores: list[ElectrodeScore]
    decision: Optional[Label] = None
    subject_id: str = ""
    segment_index: int = 0
    true_label: Optional[Label] = None

    @property
    def n_electrodes(self) -> int:
        return len(self.scores)


@dataclass
class Threshold:
    n0: int
    val_accuracy: float
    rule: str = "n > n0 => MDD; n < n0 => HC; n == n0 => MDD"


def check_generators(gen_mdd: GeneratorParams, gen_hc: GeneratorParams) -> None:
    if gen_mdd.cfg != gen_hc.cfg:
        raise DataError(f"generator configurations differ: {gen_mdd.cfg} vs {gen_hc.cfg}")


def verdict_from_errors(err_mdd: np.ndarray, err_hc: np.ndarray, **meta) -> SegmentVerdict:
    err_mdd = np.asarray(err_mdd, dtype=np.float64)
    err_hc = np.asarray(err_hc, dtype=np.float64)
    if err_mdd.shape != err_hc.shape or err_mdd.ndim != 1:
        raise DataError("error vectors must be 1-D and equally long")
    if not (np.all(np.isfinite(err_mdd)) and np.all(np.isfinite(err_hc))):
        raise DataError("reconstruction errors must be finite")
    scores = [ElectrodeScore(i, float(a), float(b)) for i, (a, b) in enumerate(zip(err_mdd, err_hc))]
    # strict inequality: an exact tie is a vote for HC
    return SegmentVerdict(int(np.sum(err_mdd < err_hc)), scores, **meta)


def score_features(
    feats: SegmentFeatures, gen_mdd: GeneratorParams, gen_hc: GeneratorParams, **meta
) -> SegmentVerdict:
    check_generators(gen_mdd, gen_hc)
    cfg = gen_mdd.cfg
    if feats.s_ca.shape[1:] != (cfg.k, cfg.length):
        raise DataError(
            f"segment features (k={feats.s_ca.shape[1]}, L={feats.s_ca.shape[2]}) do not match "
            f"generators (k={cfg.k}, L={cfg.length})"
        )
    stacks = StackSet(feats.s_ca, feats.s_cd, feats.o_ca, feats.o_cd, feats.filtered, [], [])
    return verdict_from_errors(time_domain_errors(gen_mdd, stacks), time_domain_errors(gen_hc, stacks), **meta)


def score_segment(seg: Segment, gen_mdd: GeneratorParams, gen_hc: GeneratorParams, cfg: TrainConfig) -> SegmentVerdict:
    """Preprocess one segment and let both generators reconstruct every electrode."""
    if cfg.k != gen_mdd.cfg.k:
        raise DataError(f"config k={cfg.k} does not match generator k={gen_mdd.cfg.k}")
    feats = featurize(seg.data, seg.fs, cfg.k, cfg.band)
    return score_features(
        feats, gen_mdd, gen_hc,
        subject_id=seg.subject_id, segment_index=seg.segment_index, true_label=Label(seg.label),
    )


def classify_segment(v: SegmentVerdict | int, t: Threshold) -> Label:
    n = v if isinstance(v, (int, np.integer)) else v.n
    return Label.MDD if n >= t.n0 else Label.HC


def select_threshold(val: Sequence[tuple[SegmentVerdict | int, Label]], n_electrodes: Optional[int] = None) -> Threshold:
    """Integer n0 in [0, C] maximising validation accuracy; ties go to the smallest n0."""
    if not val:
        raise DataError("empty validation set")
    counts = np.array([v if isinstance(v, (int, np.integer)) else v.n for v, _ in val], dtype=np.int64)
    is_mdd = np.array([Label(l) == Label.MDD for _, l in val])
    if is_mdd.all() or not is_mdd.any():
        raise DataError("threshold selection needs both classes in the validation set")
    if n_electrodes is None:
        sizes = {v.n_electrodes for v, _ in val if isinstance(v, SegmentVerdict)}
        n_electrodes = max(sizes) if sizes else int(counts.max())
    c = int(n_electrodes)
    # correct(n0) = #MDD with n >= n0 + #HC with n < n0, via cumulative histograms
    mdd_hist = np.bincount(counts[is_mdd], minlength=c + 1)
    hc_hist = np.bincount(counts[~is_mdd], minlength=c + 1)
    mdd_at_least = np.cumsum(mdd_hist[::-1])[::-1][: c + 1]
    hc_below = np.concatenate([[0], np.cumsum(hc_hist)[:c]])
    correct = mdd_at_least + hc_below
    n0 = int(np.argmax(correct))
    return Threshold(n0, float(correct[n0]) / len(counts))


def classify_subject(verdicts: Sequence[SegmentVerdict], t: Threshold) -> tuple[Label, dict]:
    """Majority vote over segments; an exact tie is called MDD."""
    if not verdicts:
        raise DataError("subject has no segments")
    decisions = [classify_segment(v, t) for v in verdicts]
    n_mdd = sum(d == Label.MDD for d in decisions)
    n_hc = len(decisions) - n_mdd
    label = Label.MDD if n_mdd >= n_hc else Label.HC
    return label, {"segments": len(decisions), "MDD": n_mdd, "HC": n_hc}


@dataclass
class Metrics:
    sensitivity: float
    specificity: float
    accuracy: float
    tp: int = 0
    fn: int = 0
    tn: int = 0
    fp: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _ratio(a: int, b: int) -> float:
    return a / b if b else float("nan")


def evaluate(predicted: Sequence[Label], truth: Sequence[Label]) -> Metrics:
    """Sensitivity (MDD positive), specificity and accuracy."""
    if len(predicted) != len(truth) or not predicted:
        raise DataError("evaluate needs equally long, non-empty prediction and label lists")
    p = np.array([Label(x) == Label.MDD for x in predicted])
    y = np.array([Label(x) == Label.MDD for x in truth])
    tp, fn = int(np.sum(p & y)), int(np.sum(~p & y))
    tn, fp = int(np.sum(~p & ~y)), int(np.sum(p & ~y))
    return Metrics(_ratio(tp, tp + fn), _ratio(tn, tn + fp), (tp + tn) / len(p), tp, fn, tn, fp)


def metrics_from_confusion(tp: int, fn: int, tn: int, fp: int) -> Metrics:
    total = tp + fn + tn + fp
    return Metrics(_ratio(tp, tp + fn), _ratio(tn, tn + fp), _ratio(tp + tn, total), tp, fn, tn, fp)


def write_verdicts_csv(verdicts: Sequence[SegmentVerdict], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "segment_index", "n", "decision", "true_label"])
        for v in verdicts:
            w.writerow([
                v.subject_id, v.segment_index, v.n,
                v.decision.value if v.decision else "",
                v.true_label.value if v.true_label else "",
            ])
    return path


def subject_report(verdicts: Sequence[SegmentVerdict], t: Threshold) -> list[dict]:
    """One row per subject in first-seen order, columns like the per-patient tally table."""
    by_subject: dict[str, list[SegmentVerdict]] = {}
    for v in verdicts:
        by_subject.setdefault(v.subject_id, []).append(v)
    rows = []
    for i, (sid, vs) in enumerate(by_subject.items(), start=1):
        label, tally = classify_subject(vs, t)
        truth = vs[0].true_label
        correct = tally["MDD"] if truth == Label.MDD else tally["HC"]
        rows.append({
            "patient": i,
            "subject_id": sid,
            "class": truth.value if truth else "",
            "segments": tally["segments"],
            "MDD": tally["MDD"],
            "HC": tally["HC"],
            "acc": correct / tally["segments"],
            "predicted": label.value,
        })
    return rows


def format_subject_table(rows: Sequence[dict]) -> str:
    lines = [f"{'patient':>7} {'subject':>10} {'class':>5} {'segs':>5} {'MDD':>4} {'HC':>4} {'acc':>6} {'pred':>5}"]
    for r in rows:
        lines.append(
            f"{r['patient']:>7} {r['subject_id']:>10} {r['class']:>5} {r['segments']:>5} "
            f"{r['MDD']:>4} {r['HC']:>4} {r['acc']:>6.3f} {r['predicted']:>5}"
        )
    n_ok = sum(r["class"] == r["predicted"] for r in rows)
    lines.append(f"subject accuracy = {n_ok}/{len(rows)} = {n_ok / max(len(rows), 1):.3f}")
    return "\n".join(lines)
