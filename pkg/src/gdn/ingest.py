"""Corpus loading, segmentation, subject splits and synthetic corpora.

On-disk layout: a directory with ``manifest.json`` plus one payload per
recording. A manifest looks like::

    {"subjects": [{"id": "mdd01", "label": "MDD", "fs": 250,
                   "channels": ["E1", ...], "positions": [[x, y], ...],
                   "file": "mdd01.f32", "format": "f32le",
                   "rows": 16, "cols": 20000}]}

``f32le`` payloads are row-major little-endian binary32 (rows = channels);
``csv`` payloads hold one channel per line.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, UsageError

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
FORMATS = ("f32le", "csv")


class Label(str, Enum):
    MDD = "MDD"
    HC = "HC"


@dataclass
class Recording:
    subject_id: str
    label: Label
    fs: int
    channels: list[str]
    data: np.ndarray
    positions: Optional[np.ndarray] = None

    def __post_init__(self):
        self.label = Label(self.label)
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise DataError(f"{self.subject_id}: data must be (channels, samples)")
        c, t = self.data.shape
        if int(self.fs) != self.fs or self.fs <= 0:
            raise DataError(f"{self.subject_id}: fs must be a positive integer, got {self.fs}")
        self.fs = int(self.fs)
        if c < 2:
            raise DataError(f"{self.subject_id}: need at least 2 channels, got {c}")
        if len(self.channels) != c:
            raise DataError(f"{self.subject_id}: {len(self.channels)} channel names for {c} rows")
        if t < self.fs:
            raise DataError(f"{self.subject_id}: {t} samples is shorter than 1 s at fs={self.fs}")
        if not np.all(np.isfinite(self.data)):
            raise DataError(f"{self.subject_id}: data contains NaN or Inf")
        if self.positions is not None:
            self.positions = np.asarray(self.positions, dtype=np.float64)
            if self.positions.shape != (c, 2):
                raise DataError(
                    f"{self.subject_id}: positions shape {self.positions.shape}, expected ({c}, 2)"
                )

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


@dataclass
class Segment:
    subject_id: str
    label: Label
    segment_index: int
    fs: int
    data: np.ndarray


@dataclass
class SplitPlan:
    train: list[str]
    val: list[str]
    test: list[str]

    def split_of(self, subject_id: str) -> str:
        for name in ("train", "val", "test"):
            if subject_id in getattr(self, name):
                return name
        raise KeyError(subject_id)

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}


# -- on-disk corpus ----------------------------------------------------------

def _read_payload(path: Path, fmt: str, rows: int, cols: int) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"payload file not found: {path}")
    if fmt == "f32le":
        raw = np.fromfile(path, dtype="<f4")
        if raw.size != rows * cols:
            raise DataError(
                f"{path.name}: manifest declares {rows}x{cols} = {rows * cols} values, payload has {raw.size}"
            )
        data = raw.reshape(rows, cols).astype(np.float64)
    elif fmt == "csv":
        try:
            data = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
        except ValueError as exc:
            raise DataError(f"{path.name}: unparsable CSV ({exc})") from exc
        if data.shape != (rows, cols):
            raise DataError(f"{path.name}: manifest declares {rows}x{cols}, payload is {data.shape[0]}x{data.shape[1]}")
    else:
        raise DataError(f"{path.name}: unknown payload format {fmt!r} (expected one of {FORMATS})")
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path.name}: payload contains NaN or Inf")
    return data


def load_corpus(root: str | Path) -> list[Recording]:
    root = Path(root)
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise DataError(f"missing {MANIFEST} in {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{mpath}: invalid JSON ({exc})") from exc
    entries = manifest.get("subjects")
    if not isinstance(entries, list) or not entries:
        raise DataError(f"{mpath}: 'subjects' must be a non-empty list")

    recordings = []
    seen = set()
    for entry in entries:
        try:
            sid = str(entry["id"])
            rows, cols = int(entry["rows"]), int(entry["cols"])
            channels = [str(c) for c in entry["channels"]]
            fmt = entry.get("format", "f32le")
            fname = entry["file"]
            label, fs = entry["label"], entry["fs"]
        except (KeyError, TypeError) as exc:
            raise DataError(f"{mpath}: malformed subject entry {entry!r}: missing {exc}") from exc
        if sid in seen:
            raise DataError(f"{mpath}: duplicate subject id {sid!r}")
        seen.add(sid)
        if label not in (Label.MDD.value, Label.HC.value):
            raise DataError(f"{fname}: label must be 'MDD' or 'HC', got {label!r}")
        if len(channels) != rows:
            raise DataError(f"{fname}: manifest lists {len(channels)} channels but rows={rows}")
        data = _read_payload(root / fname, fmt, rows, cols)
        recordings.append(
            Recording(sid, Label(label), fs, channels, data, entry.get("positions"))
        )
    log.debug("loaded %d recordings from %s", len(recordings), root)
    return recordings


def write_corpus(recordings: Sequence[Recording], root: str | Path, fmt: str = "f32le") -> Path:
    """Write recordings plus manifest. ``f32le`` stores binary32, so only
    float32-representable data round-trips bit-exactly; ``csv`` is exact for float64."""
    if fmt not in FORMATS:
        raise UsageError(f"unknown format {fmt!r}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    subjects = []
    for r in recordings:
        if fmt == "f32le":
            fname = f"{r.subject_id}.f32"
            np.ascontiguousarray(r.data, dtype="<f4").tofile(root / fname)
        else:
            fname = f"{r.subject_id}.csv"
            np.savetxt(root / fname, r.data, delimiter=",", fmt="%.17g")
        entry = {
            "id": r.subject_id,
            "label": r.label.value,
            "fs": r.fs,
            "channels": list(r.channels),
            "file": fname,
            "format": fmt,
            "rows": r.n_channels,
            "cols": r.n_samples,
        }
        if r.positions is not None:
            entry["positions"] = [[float(x), float(y)] for x, y in r.positions]
        subjects.append(entry)
    path = root / MANIFEST
    path.write_text(json.dumps({"subjects": subjects}, indent=1))
    return path


# -- segmentation and splits ---------------------------------------------------

def segment_recording(
    r: Recording,
    window_seconds: float = 10.0,
    start_seconds: float = 0.0,
    max_segments: Optional[int] = None,
) -> list[Segment]:
    """Consecutive non-overlapping windows; a trailing partial window is dropped."""
    if window_seconds <= 0 or start_seconds < 0:
        raise UsageError("window must be positive and start non-negative")
    n = int(round(window_seconds * r.fs))
    start = int(round(start_seconds * r.fs))
    count = max(0, (r.n_samples - start) // n)
    if max_segments is not None:
        count = min(count, int(max_segments))
    if count == 0:
        raise DataError(
            f"{r.subject_id}: no full {window_seconds} s window fits in {r.n_samples} samples from {start_seconds} s"
        )
    return [
        Segment(r.subject_id, r.label, i, r.fs, r.data[:, start + i * n : start + (i + 1) * n])
        for i in range(count)
    ]


def make_split(
    recordings: Sequence[Recording],
    train_per_class: int = 15,
    val_per_class: int = 5,
    allow_empty_test: bool = False,
) -> SplitPlan:
    """Per class, in manifest order: first ``train_per_class`` subjects train,
    the next ``val_per_class`` validate, the rest test."""
    if train_per_class < 1 or val_per_class < 1:
        raise UsageError("train_per_class and val_per_class must be >= 1")
    plan = SplitPlan([], [], [])
    for label in Label:
        ids = [r.subject_id for r in recordings if r.label == label]
        if not ids:
            continue
        need = train_per_class + val_per_class
        if len(ids) < need or (len(ids) == need and not allow_empty_test):
            raise DataError(
                f"class {label.value} has {len(ids)} subjects; need more than {need} "
                f"for train={train_per_class}, val={val_per_class} plus a test set"
            )
        plan.train += ids[:train_per_class]
        plan.val += ids[train_per_class:need]
        plan.test += ids[need:]
    return plan


# -- synthetic corpora ---------------------------------------------------------

NONLINEARITIES = {
    "identity": lambda z: z,
    "tanh": np.tanh,
    "cubic": lambda z: z + 0.25 * z**3,
}


@dataclass
class MixRule:
    """How target electrodes derive from source electrodes for one class.

    ``weights[t, j]`` mixes source electrode ``j`` into target ``t``. Rows that
    are all zero mark free-running source electrodes; a target may only mix
    sources. The mixture passes through ``nonlinearity`` and then gets
    band-limited noise of standard deviation ``noise`` added.
    """

    weights: np.ndarray
    nonlinearity: str = "identity"
    noise: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        w = self.weights
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise UsageError(f"mixing weights must be square, got {w.shape}")
        if np.any(np.diag(w) != 0):
            raise UsageError("an electrode cannot mix itself")
        if self.nonlinearity not in NONLINEARITIES:
            raise UsageError(f"unknown nonlinearity {self.nonlinearity!r}; one of {sorted(NONLINEARITIES)}")
        if self.noise < 0:
            raise UsageError("noise amplitude must be >= 0")
        targets = self.targets
        if np.any(w[:, targets] != 0):
            raise UsageError("targets may only mix source electrodes")

    @property
    def targets(self) -> np.ndarray:
        return np.flatnonzero(np.any(self.weights != 0, axis=1))

    def same_as(self, other: "MixRule") -> bool:
        return (
            self.nonlinearity == other.nonlinearity
            and self.noise == other.noise
            and self.weights.shape == other.weights.shape
            and np.array_equal(self.weights, other.weights)
        )


def default_rules(n_channels: int, noise: float = 0.2) -> tuple[MixRule, MixRule]:
    """Two distinct rules: the first half of the electrodes are targets, the second half sources.

    Class A targets are an even blend of two adjacent sources; class B targets
    are dominated by one source with a weaker, more distant one mixed in
    through a saturating nonlinearity.
    """
    if n_channels < 4:
        raise UsageError("synthetic rules need at least 4 channels")
    h = n_channels // 2
    n_src = n_channels - h
    wa = np.zeros((n_channels, n_channels))
    wb = np.zeros((n_channels, n_channels))
    for t in range(h):
        wa[t, h + t % n_src] = 0.5
        wa[t, h + (t + 1) % n_src] = 0.5
        wb[t, h + t % n_src] = 0.9
        wb[t, h + (t + n_src // 2) % n_src] = -0.4
    return MixRule(wa, "identity", noise), MixRule(wb, "tanh", noise)


def scalp_layout(n_channels: int, radius: float = 0.9) -> np.ndarray:
    """Sunflower layout of distinct points inside the unit disk."""
    i = np.arange(n_channels)
    r = radius * np.sqrt((i + 0.5) / n_channels)
    theta = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


# Narrow spectral lines (Hz) that carry most of the synthetic source power.
SYNTH_PEAKS_HZ = (5.5, 7.5, 9.5, 11.5, 13.0)


def _band_limited(rng: np.random.Generator, n_rows: int, n: int, fs: int, width_hz: float = 0.1) -> np.ndarray:
    """Unit-variance rows: a few narrow spectral lines over a weak 2-20 Hz floor."""
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    shape = np.where((freqs >= 2.0) & (freqs <= 20.0), 0.02, 0.0)
    for f0 in SYNTH_PEAKS_HZ:
        shape = shape + np.exp(-0.5 * ((freqs - f0) / width_hz) ** 2)
    coef = rng.standard_normal((n_rows, freqs.size)) + 1j * rng.standard_normal((n_rows, freqs.size))
    x = np.fft.irfft(coef * shape, n=n, axis=-1)
    return x / x.std(axis=1, keepdims=True)


def _synth_subject(rng, rule: MixRule, n_channels: int, n: int, fs: int) -> np.ndarray:
    x = _band_limited(rng, n_channels, n, fs)
    noise = _band_limited(rng, n_channels, n, fs)
    nonlin = NONLINEARITIES[rule.nonlinearity]
    sources = x.copy()
    for t in rule.targets:
        x[t] = nonlin(rule.weights[t] @ sources) + rule.noise * noise[t]
    gain = rng.uniform(0.8, 1.25)
    return (gain * x).astype(np.float32).astype(np.float64)


def synth_corpus(
    seed: int,
    n_subjects_per_class: int,
    n_channels: int,
    fs: int,
    seconds: int,
    rule_a: MixRule,
    rule_b: MixRule,
) -> list[Recording]:
    """Two-class corpus: class A (labelled MDD) follows ``rule_a``, class B (HC) ``rule_b``.

    Data are rounded to float32 so the f32le writer round-trips exactly.
    """
    if n_subjects_per_class < 1 or n_channels < 2 or fs < 1 or seconds < 1:
        raise UsageError("synth_corpus needs positive subject count, >= 2 channels, fs and seconds")
    for rule in (rule_a, rule_b):
        if rule.weights.shape != (n_channels, n_channels):
            raise UsageError(f"rule weights {rule.weights.shape} do not match {n_channels} channels")
    if rule_a.same_as(rule_b):
        raise UsageError("the two classes need distinct mixing rules")
    n = fs * seconds
    channels = [f"E{i + 1:02d}" for i in range(n_channels)]
    positions = scalp_layout(n_channels)
    root = np.random.SeedSequence(seed)
    class_streams = root.spawn(2)
    out = []
    for (label, prefix, rule), stream in zip(
        ((Label.MDD, "mdd", rule_a), (Label.HC, "hc", rule_b)), class_streams
    ):
        for i, sub in enumerate(stream.spawn(n_subjects_per_class)):
            rng = np.random.default_rng(sub)
            data = _synth_subject(rng, rule, n_channels, n, fs)
            out.append(Recording(f"{prefix}{i + 1:02d}", label, fs, list(channels), data, positions.copy()))
    return out
