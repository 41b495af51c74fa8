"""Training of one class generator, Adam updates and checkpoint files.

Checkpoint layout (little-endian)::

    b"GDNCKPT1"  uint64 header_len  header_json  tensor_blob

The JSON header lists every tensor as ``{name, shape, offset, nbytes}`` into
the blob; all tensors share the header's ``dtype`` (``f32le`` or ``f64le``).
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import BatchNormState, Tensor
from .dsp import BandSpec, SegmentFeatures, idwt_db6
from .errors import DataError, NumericError, UsageError
from .ingest import Label
from .model import GeneratorConfig, GeneratorParams, generator_forward, loss as generator_loss

log = logging.getLogger(__name__)

MAGIC = b"GDNCKPT1"
SUPPORTED_K = (5, 10, 15, 20)
PRECISIONS = {"f32": np.float32, "f64": np.float64}


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator for a named purpose, e.g. ``substream(7, "init", "MDD")``."""
    key = [zlib.crc32(str(n).encode()) for n in names]
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass
class TrainConfig:
    k: int = 10
    band_low: float = 4.0
    band_high: float = 14.0
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    early_stop_patience: int = 10
    precision: str = "f64"
    hidden: int = 300
    channels: int = 16

    def validate(self) -> None:
        if self.k < 1 or self.batch_size < 1 or self.epochs < 0 or self.early_stop_patience < 1:
            raise UsageError(f"invalid training configuration {self}")
        if self.learning_rate <= 0 or self.hidden < 2 or self.channels < 1:
            raise UsageError(f"invalid training configuration {self}")
        if self.precision not in PRECISIONS:
            raise UsageError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.k not in SUPPORTED_K:
            log.warning("k=%d is outside the studied set %s", self.k, SUPPORTED_K)
        if not 0 < self.band_low < self.band_high:
            raise UsageError(f"band {self.band_low}-{self.band_high} Hz must satisfy 0 < low < high")

    @property
    def band(self) -> BandSpec:
        return BandSpec(self.band_low, self.band_high)

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def generator_config(self, length: int) -> GeneratorConfig:
        return GeneratorConfig(k=self.k, length=length, hidden=self.hidden, channels=self.channels)

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(cfg: TrainConfig, gen_cfg: GeneratorConfig) -> str:
    """Digest of everything that shapes the trajectory; the epoch budget is left out so runs can be extended."""
    train = {k: v for k, v in cfg.to_dict().items() if k != "epochs"}
    blob = json.dumps({"train": train, "generator": gen_cfg.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- datasets -------------------------------------------------------------------

@dataclass
class StackSet:
    """Electrode stacks pooled over many segments; one row per (segment, electrode)."""

    s_ca: np.ndarray
    s_cd: np.ndarray
    o_ca: np.ndarray
    o_cd: np.ndarray
    target: np.ndarray  # band-passed target electrode, time domain
    subject_ids: list[str]
    labels: list[Label]

    def __len__(self) -> int:
        return self.o_ca.shape[0]

    @property
    def length(self) -> int:
        return self.o_ca.shape[1]

    @property
    def n_samples(self) -> int:
        return self.target.shape[1]

    @classmethod
    def from_features(cls, items: Iterable[tuple[SegmentFeatures, str, Label]]) -> "StackSet":
        parts = list(items)
        if not parts:
            raise DataError("no segments to build a training set from")
        rows = {f: [] for f in ("s_ca", "s_cd", "o_ca", "o_cd", "filtered")}
        sids, labels = [], []
        for feats, sid, label in parts:
            for f in rows:
                rows[f].append(getattr(feats, f))
            sids += [sid] * feats.n_channels
            labels += [Label(label)] * feats.n_channels
        cat = {f: np.concatenate(v, axis=0) for f, v in rows.items()}
        return cls(cat["s_ca"], cat["s_cd"], cat["o_ca"], cat["o_cd"], cat["filtered"], sids, labels)

    def subset(self, idx: np.ndarray) -> "StackSet":
        return StackSet(
            self.s_ca[idx], self.s_cd[idx], self.o_ca[idx], self.o_cd[idx], self.target[idx],
            [self.subject_ids[i] for i in idx], [self.labels[i] for i in idx],
        )


# -- optimiser ------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(
            self.beta1, self.beta2, self.eps, self.step,
            {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()},
        )


def apply_update(params: GeneratorParams, state: AdamState, lr: float) -> None:
    """One Adam step in place; tensors without a gradient count as zero gradient."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, t in params.tensors.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        if t.grad is None:
            g = np.zeros_like(t.data)
        else:
            g = t.grad.astype(t.data.dtype, copy=False)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        t.data = t.data - (lr / c1) * m / denom


# -- checkpoints ----------------------------------------------------------------

@dataclass
class Checkpoint:
    params: GeneratorParams
    optimizer: AdamState
    epoch: int
    history: list[dict]
    label: str
    train_config: dict
    config_hash: str

    @property
    def gen_config(self) -> GeneratorConfig:
        return self.params.cfg


def _ckpt_arrays(ck: Checkpoint) -> list[tuple[str, np.ndarray]]:
    arrays = [(f"param/{n}", t.data) for n, t in ck.params.tensors.items()]
    for n, st in ck.params.bn.items():
        if st.initialized:
            arrays.append((f"bn/{n}/mean", st.running_mean))
            arrays.append((f"bn/{n}/var", st.running_var))
    for n in ck.params.tensors:
        if n in ck.optimizer.m:
            arrays.append((f"adam_m/{n}", ck.optimizer.m[n]))
            arrays.append((f"adam_v/{n}", ck.optimizer.v[n]))
    return arrays


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    dtype = np.dtype(ck.params.dtype).newbyteorder("<")
    entries, blobs, offset = [], [], 0
    for name, arr in _ckpt_arrays(ck):
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    opt = ck.optimizer
    header = {
        "format": 1,
        "dtype": "f32le" if dtype.itemsize == 4 else "f64le",
        "label": ck.label,
        "epoch": ck.epoch,
        "history": ck.history,
        "train_config": ck.train_config,
        "generator_config": ck.params.cfg.to_dict(),
        "config_hash": ck.config_hash,
        "optimizer": {"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step},
        "bn": {n: {"momentum": s.momentum, "eps": s.eps, "num_features": s.num_features}
               for n, s in ck.params.bn.items()},
        "tensors": entries,
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(hjson)) + hjson + b"".join(blobs)


def save_checkpoint(ck: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ck))
    return path


def load_checkpoint(path: str | Path, expected_hash: Optional[str] = None, override: bool = False) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[: len(MAGIC)] != MAGIC or len(raw) < len(MAGIC) + 8:
        raise DataError(f"{path}: not a generator checkpoint")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start : start + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: corrupt or truncated header ({exc})") from exc
    blob = raw[start + hlen :]
    dtype = np.dtype("<f4") if header["dtype"] == "f32le" else np.dtype("<f8")
    entries = header["tensors"]
    expected = sum(e["nbytes"] for e in entries)
    if len(blob) != expected:
        raise DataError(f"{path}: tensor payload is {len(blob)} bytes, header declares {expected} (truncated?)")
    arrays = {}
    for e in entries:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if n * dtype.itemsize != e["nbytes"]:
            raise DataError(f"{path}: tensor {e['name']} shape {e['shape']} does not match {e['nbytes']} bytes")
        arrays[e["name"]] = np.frombuffer(blob, dtype=dtype, count=n, offset=e["offset"]).reshape(e["shape"]).astype(dtype.newbyteorder("="))

    gen_cfg = GeneratorConfig(**header["generator_config"])
    ref = GeneratorParams.init(gen_cfg, np.random.default_rng(0), dtype=dtype.newbyteorder("="))
    names = list(ref.tensors)
    have = [n[len("param/"):] for n in arrays if n.startswith("param/")]
    if sorted(have) != sorted(names):
        raise DataError(f"{path}: header lists {len(have)} parameter tensors, architecture needs {len(names)}")
    tensors = {}
    for n in names:
        arr = arrays[f"param/{n}"]
        if arr.shape != ref.tensors[n].shape:
            raise DataError(f"{path}: tensor {n} has shape {arr.shape}, expected {ref.tensors[n].shape}")
        tensors[n] = Tensor(arr, requires_grad=True, name=n)
    bn = {}
    for n, meta in header["bn"].items():
        mean = arrays.get(f"bn/{n}/mean")
        var = arrays.get(f"bn/{n}/var")
        bn[n] = BatchNormState(meta["num_features"], meta["momentum"], meta["eps"], mean, var)
    o = header["optimizer"]
    opt = AdamState(o["beta1"], o["beta2"], o["eps"], o["step"])
    for n in names:
        if f"adam_m/{n}" in arrays:
            opt.m[n] = arrays[f"adam_m/{n}"]
            opt.v[n] = arrays[f"adam_v/{n}"]
    if expected_hash is not None and header["config_hash"] != expected_hash and not override:
        raise DataError(
            f"{path}: config hash {header['config_hash']} does not match {expected_hash}; pass override to resume anyway"
        )
    return Checkpoint(
        GeneratorParams(gen_cfg, tensors, bn), opt, header["epoch"], header["history"],
        header["label"], header["train_config"], header["config_hash"],
    )


# -- training loop ----------------------------------------------------------------

def batch_gradients(params: GeneratorParams, batch: StackSet, training: bool = True) -> float:
    """Forward + backward on one batch; gradients accumulate into ``params``."""
    dtype = params.dtype
    with ag.Tape() as tape:
        out = generator_forward(batch.s_ca.astype(dtype), batch.s_cd.astype(dtype), params, training)
        value = generator_loss(out, batch.o_ca, batch.o_cd)
    tape.backward(value)
    return value.item()


def predict_coefficients(params: GeneratorParams, data: StackSet, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode G_cA, G_cD for every stack (no tape, running statistics untouched)."""
    dtype = params.dtype
    ga, gd = [], []
    for i in range(0, len(data), batch_size):
        out = generator_forward(
            data.s_ca[i : i + batch_size].astype(dtype), data.s_cd[i : i + batch_size].astype(dtype), params, False
        )
        ga.append(out.g_ca.data)
        gd.append(out.g_cd.data)
    return np.concatenate(ga).astype(np.float64), np.concatenate(gd).astype(np.float64)


def time_domain_errors(params: GeneratorParams, data: StackSet) -> np.ndarray:
    """Per-stack MSE between the inverse-DWT reconstruction and the filtered target."""
    ga, gd = predict_coefficients(params, data)
    recon = idwt_db6(ga, gd, data.n_samples)
    return np.mean((recon - data.target) ** 2, axis=1)


def _check_single_class(data: StackSet, label: Label, what: str) -> None:
    bad = sorted({s for s, l in zip(data.subject_ids, data.labels) if l != label})
    if bad:
        raise DataError(f"{what} set for the {label.value} generator contains other-class subjects {bad}")


def train_generator(
    label: Label | str,
    train: StackSet,
    cfg: TrainConfig,
    val: Optional[StackSet] = None,
    resume: Optional[Checkpoint] = None,
    log_path: Optional[str | Path] = None,
) -> Checkpoint:
    """Minibatch Adam on the coefficient-domain loss; returns the best checkpoint.

    Selection uses the time-domain validation error when ``val`` is given,
    otherwise the epoch training loss.
    """
    label = Label(label)
    cfg.validate()
    if len(train) == 0:
        raise DataError("empty training set")
    _check_single_class(train, label, "training")
    if val is not None:
        _check_single_class(val, label, "validation")
    gen_cfg = cfg.generator_config(train.length)
    if train.s_ca.shape[1] != cfg.k:
        raise DataError(f"training stacks have {train.s_ca.shape[1]} neighbours, config says k={cfg.k}")
    chash = config_hash(cfg, gen_cfg)

    if resume is not None:
        if resume.config_hash != chash:
            raise DataError(f"resume checkpoint hash {resume.config_hash} does not match config {chash}")
        params, opt = resume.params.copy(), resume.optimizer.copy()
        start_epoch = resume.epoch
        history = [dict(h) for h in resume.history if h["epoch"] <= start_epoch]
    else:
        params = GeneratorParams.init(gen_cfg, substream(cfg.seed, "init", label.value), dtype=cfg.dtype)
        opt = AdamState()
        history = []
        start_epoch = 0

    def snapshot(epoch):
        return Checkpoint(params.copy(), opt.copy(), epoch, [dict(h) for h in history], label.value, cfg.to_dict(), chash)

    def score(h):
        return h["val_loss"] if h["val_loss"] is not None else h["train_loss"]

    best = snapshot(start_epoch)
    best_score = min((score(h) for h in history), default=np.inf)
    best_epoch = min(history, key=score)["epoch"] if history else start_epoch
    since_best = start_epoch - best_epoch
    logf = open(log_path, "a") if log_path else None
    try:
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = substream(cfg.seed, "shuffle", label.value, epoch).permutation(len(train))
            total, count = 0.0, 0
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i : i + cfg.batch_size]
                if len(idx) < 2:
                    continue  # batch statistics need >= 2 stacks
                params.zero_grad()
                with np.errstate(over="ignore", invalid="ignore"):  # reported below as NumericError
                    value = batch_gradients(params, train.subset(idx))
                if not np.isfinite(value):
                    raise NumericError(
                        f"non-finite training loss at epoch {epoch} (lr={cfg.learning_rate}); "
                        "lower the learning rate or use --precision f64"
                    )
                apply_update(params, opt, cfg.learning_rate)
                total += value * len(idx)
                count += len(idx)
            train_loss = total / max(count, 1)
            val_loss = float(np.mean(time_domain_errors(params, val))) if val is not None and len(val) else None
            if val_loss is not None and not np.isfinite(val_loss):
                raise NumericError(f"non-finite validation loss at epoch {epoch}")
            rec = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}
            history.append(rec)
            wall_ms = round(1000 * (time.perf_counter() - t0), 1)
            log.info("%s epoch %d train %.5f val %s (%.0f ms)", label.value, epoch, train_loss, val_loss, wall_ms)
            if logf:
                logf.write(json.dumps({**rec, "label": label.value, "wall_ms": wall_ms}) + "\n")
                logf.flush()
            if score(rec) < best_score:
                best_score = score(rec)
                best = snapshot(epoch)
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.early_stop_patience:
                    log.info("%s early stop at epoch %d (best %d)", label.value, epoch, best.epoch)
                    break
    finally:
        if logf:
            logf.close()
    best.history = [dict(h) for h in history]
    return best
