"""Samples, manifests, depth-file I/O and ground-truth hygiene."""

from __future__ import annotations

import bisect
import logging
import os
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import netpbm
from .depthmap import DepthMap, EmptyMaskError

log = logging.getLogger(__name__)

MAX_DEPTH_MM = 65535
MANIFEST_MAGIC = "# depthstack manifest v1"


class DataError(Exception):
    """Missing or malformed data on disk."""


@dataclass
class Sample:
    """RGB frame (H, W, 3) in [0, 1] with its depth map.

    ``rgb`` is kept raw; the per-dataset channel mean is subtracted only when
    the network input is assembled.
    """

    id: str
    rgb: np.ndarray
    depth: DepthMap
    timestamp: float | None = None
    scene: str = ""

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"rgb must be (H, W, 3), got {self.rgb.shape}")
        if self.rgb.shape[:2] != self.depth.shape:
            raise ValueError(f"rgb {self.rgb.shape[:2]} and depth {self.depth.shape} frames differ")


# ---------------------------------------------------------------------------
# depth and rgb files
# ---------------------------------------------------------------------------

def encode_depth_mm(depth: DepthMap) -> np.ndarray:
    """Millimetre uint16 raster; 0 marks invalid, values above 65.535 m clamp with a warning."""
    mm = np.zeros(depth.shape, dtype=np.float64)
    mm[depth.mask] = np.round(depth.depth[depth.mask] * 1000.0)
    over = mm > MAX_DEPTH_MM
    if over.any():
        warnings.warn(f"{int(over.sum())} depth values exceed {MAX_DEPTH_MM / 1000} m and were clamped",
                      stacklevel=2)
        mm[over] = MAX_DEPTH_MM
    # sub-millimetre valid depths must not collapse to the invalid code
    mm[depth.mask & (mm < 1)] = 1
    return mm.astype(np.uint16)


def decode_depth_mm(raw: np.ndarray) -> DepthMap:
    raw = np.asarray(raw)
    mask = raw > 0
    return DepthMap(np.where(mask, raw.astype(np.float64) / 1000.0, 0.0), mask)


def save_depth(path: str | os.PathLike, depth: DepthMap) -> None:
    netpbm.write(path, encode_depth_mm(depth), maxval=65535)


def load_depth(path: str | os.PathLike) -> DepthMap:
    raw = netpbm.read(path)
    if raw.ndim != 2:
        raise netpbm.FormatError(f"{path}: depth file must be single-channel")
    return decode_depth_mm(raw)


def save_rgb(path: str | os.PathLike, rgb: np.ndarray) -> None:
    netpbm.write(path, np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8))


def load_rgb(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"))
    else:
        arr = netpbm.read(path)
        if arr.ndim != 3:
            raise netpbm.FormatError(f"{path}: rgb file must have three channels")
    return arr.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    rgb_path: str
    depth_path: str
    scene: str
    timestamp: float | None = None


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    split: str = "train"
    rgb_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = Counter(e.id for e in self.entries)
        dup = [k for k, c in ids.items() if c > 1]
        if dup:
            raise DataError(f"duplicate sample ids in manifest: {dup[:5]}")
        if any(not e.scene for e in self.entries):
            raise DataError("every manifest entry needs a scene id")

    def __len__(self) -> int:
        return len(self.entries)

    def scenes(self) -> list[str]:
        return sorted({e.scene for e in self.entries})

    def write(self, path: str | os.PathLike) -> None:
        lines = [MANIFEST_MAGIC, f"# split {self.split}",
                 "# rgb_mean " + " ".join(repr(float(v)) for v in self.rgb_mean)]
        for e in self.entries:
            ts = "" if e.timestamp is None else repr(float(e.timestamp))
            lines.append("\t".join([e.id, e.rgb_path, e.depth_path, e.scene, ts]))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path: str | os.PathLike) -> "Manifest":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"manifest not found: {path}")
        split, mean, entries = "train", (0.0, 0.0, 0.0), []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts[:1] == ["split"] and len(parts) == 2:
                    split = parts[1]
                elif parts[:1] == ["rgb_mean"] and len(parts) == 4:
                    mean = tuple(float(v) for v in parts[1:])
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(cols)}")
            ts = float(cols[4]) if cols[4] else None
            entries.append(ManifestEntry(cols[0], cols[1], cols[2], cols[3], ts))
        return cls(entries, split, mean, path.parent)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p


def load_sample(manifest: Manifest, entry: ManifestEntry) -> Sample:
    rgb_path, depth_path = manifest.resolve(entry.rgb_path), manifest.resolve(entry.depth_path)
    for p in (rgb_path, depth_path):
        if not p.is_file():
            raise DataError(f"missing file: {p}")
    try:
        rgb = load_rgb(rgb_path)
        depth = load_depth(depth_path)
    except netpbm.FormatError as exc:
        raise DataError(str(exc)) from exc
    return Sample(entry.id, rgb, depth, entry.timestamp, entry.scene)


def load_samples(manifest: Manifest, drop_extremes: bool = False) -> tuple[list[Sample], int]:
    """Load every entry; targets with no valid pixel (after optional extreme masking) are dropped.

    Returns the samples and the number dropped.
    """
    out, dropped = [], 0
    for e in manifest.entries:
        s = load_sample(manifest, e)
        try:
            if drop_extremes:
                s.depth = mask_extremes(s.depth)
            elif s.depth.n_valid == 0:
                raise EmptyMaskError(e.id)
        except EmptyMaskError:
            dropped += 1
            continue
        out.append(s)
    if dropped:
        log.warning("dropped %d samples without valid depth", dropped)
    return out, dropped


def channel_mean(samples: Iterable[Sample]) -> tuple[float, float, float]:
    total = np.zeros(3)
    count = 0
    for s in samples:
        total += s.rgb.reshape(-1, 3).sum(axis=0)
        count += s.rgb.shape[0] * s.rgb.shape[1]
    if count == 0:
        raise DataError("cannot compute a channel mean of no samples")
    return tuple(float(v) for v in total / count)


# ---------------------------------------------------------------------------
# ground-truth hygiene
# ---------------------------------------------------------------------------

def mask_extremes(depth: DepthMap) -> DepthMap:
    """Invalidate every pixel equal to the per-image valid minimum or maximum.

    Re-applying it removes the next extremes, so it is idempotent only when
    nothing is left to remove.
    """
    if depth.n_valid == 0:
        raise EmptyMaskError("depth map has no valid pixels")
    vals = depth.depth[depth.mask]
    lo, hi = vals.min(), vals.max()
    mask = depth.mask & (depth.depth != lo) & (depth.depth != hi)
    if not mask.any():
        raise EmptyMaskError("masking the extremes removed every pixel")
    return DepthMap(np.where(mask, depth.depth, 0.0), mask)


@dataclass(frozen=True)
class Frame:
    id: str
    timestamp: float


def associate_frames(rgb: Sequence[Frame], depth: Sequence[Frame]) -> list[tuple[Frame, Frame]]:
    """Pair each depth frame with the RGB frame nearest in time.

    Ties in |dt| go to the earlier RGB frame.  An RGB frame claimed by two or
    more depth frames is discarded together with all of its claimants.
    Returns (rgb, depth) pairs in depth-time order.
    """
    if not rgb or not depth:
        raise DataError("both frame lists must be non-empty")
    rgb_sorted = sorted(rgb, key=lambda f: (f.timestamp, f.id))
    times = [f.timestamp for f in rgb_sorted]
    claims: dict[int, list[Frame]] = defaultdict(list)
    for d in sorted(depth, key=lambda f: (f.timestamp, f.id)):
        k = bisect.bisect_left(times, d.timestamp)
        best = None
        for cand in (k - 1, k):
            if 0 <= cand < len(times):
                gap = abs(times[cand] - d.timestamp)
                # candidates are visited earlier-first so '<' keeps the earlier on ties
                if best is None or gap < best[0]:
                    best = (gap, cand)
        # equal timestamps: the earliest RGB with that time wins
        idx = best[1]
        while idx > 0 and times[idx - 1] == times[idx]:
            idx -= 1
        claims[idx].append(d)
    pairs = [(rgb_sorted[i], ds[0]) for i, ds in claims.items() if len(ds) == 1]
    pairs.sort(key=lambda p: (p[1].timestamp, p[1].id))
    if not pairs:
        raise DataError("frame association left no pairs")
    return pairs


def resolve_depth_conflicts(rows: np.ndarray, cols: np.ndarray, depths: np.ndarray, times: np.ndarray,
                            rgb_time: float, height: int, width: int) -> DepthMap:
    """Rasterise timestamped depth points; where several land on one pixel,
    keep the one recorded closest to ``rgb_time`` (ties: the earlier point,
    then the smaller depth)."""
    rows, cols = np.asarray(rows, dtype=int), np.asarray(cols, dtype=int)
    depths, times = np.asarray(depths, dtype=np.float64), np.asarray(times, dtype=np.float64)
    inside = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width) & (depths > 0)
    rows, cols, depths, times = rows[inside], cols[inside], depths[inside], times[inside]
    flat = rows * width + cols
    # group by pixel with the best candidate last in each group
    order = np.lexsort((-depths, -times, -np.abs(times - rgb_time), flat))
    flat, depths = flat[order], depths[order]
    last = np.ones(flat.size, dtype=bool)
    last[:-1] = flat[1:] != flat[:-1]
    out = np.zeros(height * width)
    out[flat[last]] = depths[last]
    out = out.reshape(height, width)
    return DepthMap.from_encoded(out)


def even_scenes(entries: Sequence[ManifestEntry], per_scene: int,
                rng: np.random.Generator) -> list[ManifestEntry]:
    """Exactly ``per_scene`` entries for every scene, shuffled.

    Scenes with fewer frames repeat them (each frame used as evenly as possible).
    """
    if per_scene < 1:
        raise ValueError("per_scene must be positive")
    by_scene: dict[str, list[ManifestEntry]] = defaultdict(list)
    for e in entries:
        by_scene[e.scene].append(e)
    out = []
    for scene in sorted(by_scene):
        group = by_scene[scene]
        reps = -(-per_scene // len(group))
        pool = []
        for _ in range(reps):
            pool.extend(group[i] for i in rng.permutation(len(group)))
        out.extend(pool[:per_scene])
    return [out[i] for i in rng.permutation(len(out))]


# ---------------------------------------------------------------------------
# mean-depth baseline
# ---------------------------------------------------------------------------

def mean_depth_baseline(targets: Sequence[DepthMap], mode: str = "log") -> DepthMap:
    """Per-pixel mean training depth.

    ``mode="log"`` averages log depths (geometric mean), ``"linear"`` averages
    depths.  Pixels valid in no target take the mean over all valid pixels.
    """
    if not targets:
        raise DataError("mean-depth baseline needs at least one target")
    shape = targets[0].shape
    if any(t.shape != shape for t in targets):
        raise DataError("targets must share one resolution")
    if mode not in ("log", "linear"):
        raise ValueError(f"unknown baseline mode {mode!r}")
    total = np.zeros(shape)
    count = np.zeros(shape)
    for t in targets:
        vals = t.log_depth() if mode == "log" else np.where(t.mask, t.depth, 0.0)
        total += vals
        count += t.mask
    if count.sum() == 0:
        raise EmptyMaskError("no valid pixels in any target")
    fill = total.sum() / count.sum()
    mean = np.where(count > 0, total / np.maximum(count, 1), fill)
    depth = np.exp(mean) if mode == "log" else mean
    return DepthMap.dense(depth)
