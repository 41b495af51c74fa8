"""Per-electrode fit maps and their scalp rendering.

Each electrode gets a score ``-log(err + 1e-9)`` from one generator's
time-domain reconstruction error, so better-fitting regions are brighter.
Scores are spread over the head by inverse-distance weighting of the four
nearest electrodes and written as a binary PPM, a CSV grid and a JSON sidecar.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .detector import SegmentVerdict
from .errors import DataError, UsageError
from .ingest import Label

log = logging.getLogger(__name__)

EPS_VIS = 1e-9
WHICH = ("mdd", "hc", "winner")
# blue -> white -> red, sampled at t = 0, 0.5, 1
_STOPS = np.array([[0.0, 0.0, 0.0, 0.75], [0.5, 1.0, 1.0, 1.0], [1.0, 0.75, 0.0, 0.0]])
BACKGROUND = (255, 255, 255)


@dataclass
class HeatmapData:
    scores: np.ndarray
    positions: Optional[np.ndarray] = None
    which: str = "winner"
    segment_id: str = ""
    channels: Optional[list[str]] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1 or self.scores.size == 0:
            raise DataError("heatmap needs a non-empty 1-D score vector")
        if not np.all(np.isfinite(self.scores)):
            raise DataError("heatmap scores must be finite")
        if self.positions is not None:
            self.positions = np.asarray(self.positions, dtype=np.float64)
            if self.positions.shape != (self.scores.size, 2):
                raise DataError(f"expected {self.scores.size} 2-D positions, got shape {self.positions.shape}")

    @property
    def vmin(self) -> float:
        return float(self.scores.min())

    @property
    def vmax(self) -> float:
        return float(self.scores.max())


def error_score(err) -> np.ndarray:
    """Monotone decreasing map from reconstruction error to display score."""
    err = np.asarray(err, dtype=np.float64)
    if np.any(err < 0) or not np.all(np.isfinite(err)):
        raise DataError("errors must be finite and non-negative")
    return -np.log(err + EPS_VIS)


def heatmap_from_verdict(
    v: SegmentVerdict, which: str = "winner", positions=None, channels: Optional[list[str]] = None
) -> HeatmapData:
    """Scores from the MDD generator, the HC generator, or the one the segment was assigned to.

    ``winner`` falls back to the better generator per electrode when the
    verdict carries no decision.
    """
    if which not in WHICH:
        raise UsageError(f"which must be one of {WHICH}, got {which!r}")
    if not v.scores:
        raise DataError("verdict has no electrode scores")
    mdd = np.array([s.err_mdd for s in v.scores])
    hc = np.array([s.err_hc for s in v.scores])
    if which == "mdd":
        err = mdd
    elif which == "hc":
        err = hc
    elif v.decision is None:
        err = np.minimum(mdd, hc)
    else:
        err = mdd if Label(v.decision) == Label.MDD else hc
    seg_id = f"{v.subject_id}:{v.segment_index}" if v.subject_id else str(v.segment_index)
    return HeatmapData(error_score(err), positions, which, seg_id, channels)


def check_positions(positions: np.ndarray) -> None:
    rounded = {tuple(p) for p in np.asarray(positions, dtype=np.float64).tolist()}
    if len(rounded) != len(positions):
        raise DataError("duplicate electrode positions")


def grid_coordinates(resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates in [-1, 1]^2; row 0 is the top (front of the head)."""
    if resolution < 1:
        raise UsageError("resolution must be >= 1")
    c = -1.0 + (2.0 * np.arange(resolution) + 1.0) / resolution
    x, y = np.meshgrid(c, c[::-1])
    return x, y


def idw_interpolate(positions, scores, qx, qy, power: float = 2.0, n_nearest: int = 4) -> np.ndarray:
    """Inverse-distance weighting from the ``n_nearest`` electrodes of each query point.

    Equal distances are ordered by electrode (x, y), so the result does not
    depend on the order electrodes are listed in.
    """
    pos = np.asarray(positions, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    qx = np.asarray(qx, dtype=np.float64).ravel()
    qy = np.asarray(qy, dtype=np.float64).ravel()
    d = np.hypot(qx[:, None] - pos[None, :, 0], qy[:, None] - pos[None, :, 1])
    px = np.broadcast_to(pos[:, 0], d.shape)
    py = np.broadcast_to(pos[:, 1], d.shape)
    order = np.lexsort((py, px, d), axis=-1)[:, : min(n_nearest, len(s))]
    dn = np.take_along_axis(d, order, axis=1)
    sn = s[order]
    exact = dn[:, 0] == 0.0
    with np.errstate(divide="ignore"):
        w = np.where(dn > 0, dn ** (-power), 0.0)
    out = np.empty(len(qx))
    out[~exact] = (w[~exact] * sn[~exact]).sum(1) / w[~exact].sum(1)
    out[exact] = sn[exact, 0]
    return out


def render_topomap(h: HeatmapData, resolution: int = 64) -> np.ndarray:
    """resolution x resolution grid of interpolated scores, NaN outside the unit disk.

    Without positions the result is a (C, 1) strip of the raw scores.
    """
    if h.positions is None:
        return h.scores[:, None].copy()
    check_positions(h.positions)
    x, y = grid_coordinates(resolution)
    inside = x**2 + y**2 <= 1.0
    grid = np.full(x.shape, np.nan)
    grid[inside] = idw_interpolate(h.positions, h.scores, x[inside], y[inside])
    return grid


def colorize(grid: np.ndarray, vmin: float, vmax: float) -> np.ndarray:
    """(H, W) scores -> (H, W, 3) uint8; NaN cells get the background colour."""
    span = vmax - vmin
    t = np.full(grid.shape, 0.5) if span <= 0 else (grid - vmin) / span
    t = np.clip(np.nan_to_num(t, nan=0.0), 0.0, 1.0)
    rgb = np.stack([np.interp(t, _STOPS[:, 0], _STOPS[:, i]) for i in (1, 2, 3)], axis=-1)
    img = np.round(rgb * 255.0).astype(np.uint8)
    img[np.isnan(grid)] = BACKGROUND
    return img


def ppm_bytes(img: np.ndarray) -> bytes:
    hgt, wid, _ = img.shape
    return f"P6\n{wid} {hgt}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def write_heatmap(h: HeatmapData, out_dir: str | Path, name: str, resolution: int = 64, cell: int = 8) -> dict[str, Path]:
    """Write ``name.ppm``, ``name.csv`` and ``name.json``; strips are drawn ``cell`` pixels per electrode."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = render_topomap(h, resolution)
    mode = "topomap"
    img = colorize(grid, h.vmin, h.vmax)
    if h.positions is None:
        log.warning("no electrode positions for %s; writing a %dx1 score strip", h.segment_id or name, grid.shape[0])
        mode = "strip"
        img = np.repeat(np.repeat(img, cell, axis=0), cell, axis=1)
    paths = {"ppm": out / f"{name}.ppm", "csv": out / f"{name}.csv", "json": out / f"{name}.json"}
    paths["ppm"].write_bytes(ppm_bytes(img))
    with paths["csv"].open("w") as fh:
        for row in grid:
            fh.write(",".join("nan" if np.isnan(x) else repr(float(x)) for x in row) + "\n")
    meta = {
        "segment_id": h.segment_id,
        "which": h.which,
        "mode": mode,
        "min": h.vmin,
        "max": h.vmax,
        "electrodes": int(h.scores.size),
        "channels": h.channels,
        "scores": [float(s) for s in h.scores],
        "resolution": resolution if mode == "topomap" else None,
        "interpolation": {"method": "idw", "power": 2, "nearest": 4} if mode == "topomap" else None,
    }
    paths["json"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths


def explain_segments(
    verdicts: Sequence[SegmentVerdict], out_dir, positions=None, which: str = "winner",
    resolution: int = 64, channels: Optional[list[str]] = None,
) -> list[dict[str, Path]]:
    written = []
    for v in verdicts:
        h = heatmap_from_verdict(v, which, positions, channels)
        written.append(write_heatmap(h, out_dir, f"{v.subject_id}_seg{v.segment_index:03d}_{which}", resolution))
    return written
