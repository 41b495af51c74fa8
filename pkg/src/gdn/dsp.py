"""Deterministic signal transforms used ahead of the generators.

Per segment the order is fixed: band-pass every channel, rank neighbours on
the filtered channels, then take a single-level db6 DWT of every row.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError, UsageError

# Daubechies-6 analysis low-pass taps (12 taps, sum sqrt(2)), obtained by
# spectral factorisation with minimum-phase root selection.
DB6_DEC_LO = np.array([
    -0.0010773010853084795649,
    0.0047772575109455106396,
    0.00055384220116149613925,
    -0.031582039317486029565,
    0.027522865530305728626,
    0.097501605587323049102,
    -0.12976686756726193556,
    -0.22626469396543982008,
    0.31525035170919762909,
    0.75113390802109535068,
    0.49462389039845308568,
    0.11154074335010946362,
])
DB6_FILTER_LEN = DB6_DEC_LO.size
_SIGN = (-1.0) ** (np.arange(DB6_FILTER_LEN) + 1)
DB6_DEC_HI = _SIGN * DB6_DEC_LO[::-1]
DB6_REC_LO = DB6_DEC_LO[::-1].copy()
DB6_REC_HI = DB6_DEC_HI[::-1].copy()

# Relative-to-fs slack for the inclusive band edges.
_BAND_EDGE_RTOL = 1e-9
_RANK_DECIMALS = 12


@dataclass(frozen=True)
class BandSpec:
    low_hz: float = 4.0
    high_hz: float = 14.0

    def validate(self, fs: float) -> None:
        if not (0 < self.low_hz < self.high_hz < fs / 2):
            raise UsageError(
                f"band {self.low_hz}-{self.high_hz} Hz must satisfy 0 < low < high < fs/2 = {fs / 2}"
            )


@dataclass
class WaveletPair:
    """Coefficients for one target electrode: neighbours (k x L) and the target (L,)."""

    s_ca: np.ndarray
    s_cd: np.ndarray
    o_ca: np.ndarray
    o_cd: np.ndarray

    @property
    def length(self) -> int:
        return self.o_ca.shape[-1]


@dataclass
class SegmentFeatures:
    """Stacked per-electrode wavelet inputs for one segment.

    ``s_ca``/``s_cd`` are (C, k, L); ``o_ca``/``o_cd`` are (C, L); ``filtered``
    is the band-passed (C, N) segment that time-domain errors are measured
    against; ``neighbors`` is (C, k).
    """

    s_ca: np.ndarray
    s_cd: np.ndarray
    o_ca: np.ndarray
    o_cd: np.ndarray
    filtered: np.ndarray
    neighbors: np.ndarray

    @property
    def n_channels(self) -> int:
        return self.o_ca.shape[0]

    def pairs(self) -> list[WaveletPair]:
        return [
            WaveletPair(self.s_ca[a], self.s_cd[a], self.o_ca[a], self.o_cd[a])
            for a in range(self.n_channels)
        ]


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise DataError(f"cosine_similarity needs equal-length vectors, got {a.shape} and {b.shape}")
    na = np.sqrt(np.dot(a, a))
    nb = np.sqrt(np.dot(b, b))
    if na == 0.0 or nb == 0.0:
        raise NumericError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def similarity_matrix(x: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity between the rows of a (C, N) matrix."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    if np.any(norms == 0.0):
        bad = np.flatnonzero(norms == 0.0).tolist()
        raise NumericError(f"cosine similarity undefined for all-zero channels {bad}")
    unit = x / norms[:, None]
    return np.clip(unit @ unit.T, -1.0, 1.0)


def rank_neighbors(rho: np.ndarray, k: int) -> np.ndarray:
    """For every row of a similarity matrix, the k most similar other indices.

    Order is descending similarity with ties going to the lower channel index.
    Similarities are rounded to 12 decimals first so that values equal up to
    BLAS rounding count as ties.
    """
    c = rho.shape[0]
    if not 1 <= k <= c - 1:
        raise UsageError(f"k={k} out of range for {c} channels (need 1 <= k <= {c - 1})")
    rounded = np.round(rho, _RANK_DECIMALS)
    idx = np.arange(c)
    out = np.empty((c, k), dtype=np.int64)
    for a in range(c):
        others = idx[idx != a]
        order = np.lexsort((others, -rounded[a, others]))
        out[a] = others[order[:k]]
    return out


def select_neighbors(data: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Build the (C, k+1, N) stack: row 0 is the electrode, rows 1..k its neighbours.

    Returns ``(stack, neighbors)``.
    """
    data = np.asarray(data)
    nbrs = rank_neighbors(similarity_matrix(data), k)
    rows = np.concatenate([np.arange(data.shape[0])[:, None], nbrs], axis=1)
    return data[rows], nbrs


def hamming_window(n: int) -> np.ndarray:
    if n < 2:
        raise UsageError(f"hamming window needs n >= 2, got {n}")
    t = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * t / (n - 1))


def band_mask(n: int, fs: float, band: BandSpec) -> np.ndarray:
    """Boolean mask over the rfft bins 0..n//2 kept by the band-pass."""
    freqs = fs * np.arange(n // 2 + 1) / n
    slack = _BAND_EDGE_RTOL * fs
    return (freqs >= band.low_hz - slack) & (freqs <= band.high_hz + slack)


def bandpass_dft(x, fs: float, band: BandSpec = BandSpec()) -> np.ndarray:
    """Hamming-windowed DFT band-pass along the last axis.

    The signal is windowed, transformed, every bin outside ``band`` (and its
    mirror) is zeroed, and the inverse transform is divided by the window.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        raise UsageError(f"bandpass needs at least 2 samples, got {n}")
    band.validate(fs)
    w = hamming_window(n)
    spec = np.fft.rfft(x * w, axis=-1)
    spec *= band_mask(n, fs, band)
    return np.fft.irfft(spec, n=n, axis=-1) / w


def coeff_length(n: int) -> int:
    return (n + DB6_FILTER_LEN - 1) // 2


def _analysis_index(n: int) -> np.ndarray:
    f = DB6_FILTER_LEN
    m = np.arange(coeff_length(n))[:, None]
    j = np.arange(f)[None, :]
    # offset by the f-1 samples of symmetric padding on the left
    return 2 * m + 1 - j + (f - 1)


def dwt_db6(x) -> tuple[np.ndarray, np.ndarray]:
    """Single-level db6 analysis along the last axis, symmetric half-point extension."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < DB6_FILTER_LEN:
        raise DataError(f"dwt_db6 needs at least {DB6_FILTER_LEN} samples, got {n}")
    f = DB6_FILTER_LEN
    pad = [(0, 0)] * (x.ndim - 1) + [(f - 1, f - 1)]
    xp = np.pad(x, pad, mode="symmetric")
    windows = xp[..., _analysis_index(n)]
    return windows @ DB6_DEC_LO, windows @ DB6_DEC_HI


def idwt_db6(ca, cd, n: int) -> np.ndarray:
    """Inverse of :func:`dwt_db6`; returns ``n`` samples along the last axis."""
    ca = np.asarray(ca, dtype=np.float64)
    cd = np.asarray(cd, dtype=np.float64)
    if ca.shape != cd.shape:
        raise DataError(f"cA/cD shape mismatch: {ca.shape} vs {cd.shape}")
    length = ca.shape[-1]
    if n < DB6_FILTER_LEN or coeff_length(n) != length:
        raise DataError(f"coefficient length {length} inconsistent with signal length {n}")
    f = DB6_FILTER_LEN
    # x[i] = sum_m cA[m] rec_lo[i + f - 2 - 2m] + cD[m] rec_hi[...]; upsampled
    # coefficients sit at odd positions of a buffer shifted by one sample.
    shape = ca.shape[:-1] + (2 * length + 1,)
    up_a = np.zeros(shape)
    up_d = np.zeros(shape)
    up_a[..., 1::2] = ca
    up_d[..., 1::2] = cd
    out = np.zeros(ca.shape[:-1] + (n,))
    for t in range(f):
        start = f - 1 - t
        out += DB6_REC_LO[t] * up_a[..., start:start + n]
        out += DB6_REC_HI[t] * up_d[..., start:start + n]
    return out


def featurize(data: np.ndarray, fs: float, k: int, band: BandSpec = BandSpec()) -> SegmentFeatures:
    """Band-pass, neighbour selection on the filtered channels, then DWT of every row."""
    data = np.asarray(data, dtype=np.float64)
    filtered = bandpass_dft(data, fs, band)
    nbrs = rank_neighbors(similarity_matrix(filtered), k)
    ca, cd = dwt_db6(filtered)
    return SegmentFeatures(
        s_ca=ca[nbrs], s_cd=cd[nbrs], o_ca=ca, o_cd=cd, filtered=filtered, neighbors=nbrs
    )


def preprocess_segment(seg, k: int, band: BandSpec = BandSpec()) -> list[WaveletPair]:
    return featurize(seg.data, seg.fs, k, band).pairs()


def dump_features(feats: SegmentFeatures, out_dir: str | Path, name: str = "segment") -> Path:
    """Write the feature arrays as f32le payloads with a JSON sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for field in ("s_ca", "s_cd", "o_ca", "o_cd", "filtered", "neighbors"):
        arr = np.ascontiguousarray(getattr(feats, field), dtype="<f4")
        fname = f"{name}.{field}.f32"
        arr.tofile(out / fname)
        entries[field] = {"file": fname, "shape": list(arr.shape), "format": "f32le"}
    sidecar = out / f"{name}.json"
    sidecar.write_text(json.dumps(entries, indent=2, sort_keys=True))
    return sidecar
