"""Evaluation pipeline: centre crop, predict, exponentiate, upsample, intersect, pool.

Predictions live on a region of the full-resolution frame.  Before scoring,
each prediction is magnified with nearest-neighbour sampling to its region's
pixel size, and competing methods are cropped to the intersection of their
regions.
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .augment import crop_offset
from .data import Sample
from .depthmap import DepthMap, EmptyMaskError
from .losses import ImageTerms, MetricsReport, image_terms, pool_terms, REPORT_HEADER
from .training import downsample_nearest, network_input

log = logging.getLogger(__name__)


class Region(NamedTuple):
    top: int
    left: int
    height: int
    width: int

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    @property
    def area(self) -> int:
        return self.height * self.width

    def intersect(self, other: "Region") -> "Region":
        top, left = max(self.top, other.top), max(self.left, other.left)
        bottom, right = min(self.bottom, other.bottom), min(self.right, other.right)
        if bottom <= top or right <= left:
            raise EmptyMaskError(f"regions {self} and {other} do not overlap")
        return Region(top, left, bottom - top, right - left)


def upsample_nearest(pred: DepthMap, height: int, width: int) -> DepthMap:
    """Magnify with source index ``floor(i * src / dst)``; the mask follows the same map."""
    h, w = pred.shape
    if height < h or width < w:
        raise ValueError(f"target {height}x{width} is smaller than source {h}x{w}")
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return DepthMap(pred.depth[np.ix_(rows, cols)], pred.mask[np.ix_(rows, cols)])


def crop_to(pred: DepthMap, region: Region, target: Region) -> DepthMap:
    """Cut ``target`` (a sub-rectangle of ``region``) out of a map covering ``region``."""
    return pred.crop(target.top - region.top, target.left - region.left, target.height, target.width)


def intersect_regions(a: tuple[DepthMap, Region], b: tuple[DepthMap, Region]
                      ) -> tuple[DepthMap, DepthMap, Region]:
    """Crop two full-resolution predictions to the overlap of their regions."""
    (pa, ra), (pb, rb) = a, b
    common = ra.intersect(rb)
    return crop_to(pa, ra, common), crop_to(pb, rb, common), common


# ---------------------------------------------------------------------------
# predictors
# ---------------------------------------------------------------------------

class Predictor:
    """Maps a full frame to ``(depth at native resolution, region in frame coordinates)``."""

    name = "predictor"

    def region(self, frame_height: int, frame_width: int) -> Region:
        raise NotImplementedError

    def predict(self, samples: Sequence[Sample]) -> list[DepthMap]:
        raise NotImplementedError


class NetworkPredictor(Predictor):
    """Coarse-only or coarse+fine prediction on the centre crop."""

    def __init__(self, coarse, fine=None, rgb_mean=(0.0, 0.0, 0.0), name: str | None = None,
                 batch_size: int = 64):
        self.coarse = coarse
        self.fine = fine
        self.rgb_mean = rgb_mean
        self.name = name or ("coarse+fine" if fine is not None else "coarse")
        self.batch_size = batch_size
        self.spec = coarse.spec

    def region(self, frame_height, frame_width):
        top, left = crop_offset(frame_height, frame_width, self.spec.input_height, self.spec.input_width)
        return Region(top, left, self.spec.input_height, self.spec.input_width)

    def predict_log(self, samples: Sequence[Sample]) -> np.ndarray:
        """(N, h, w) log depth from the network, after the test-time centre crop."""
        out = []
        for start in range(0, len(samples), self.batch_size):
            chunk = [self._crop(s) for s in samples[start:start + self.batch_size]]
            x = network_input(chunk, self.rgb_mean, self.coarse.dtype)
            y = self.coarse.forward(x, train=False)
            if self.fine is not None:
                y = self.fine.forward(x, y)
            out.append(y.data[:, 0].astype(np.float64))
        return np.concatenate(out)

    def _crop(self, s: Sample) -> Sample:
        from .augment import test_transform

        return test_transform(s, self.spec.input_height, self.spec.input_width)

    def predict(self, samples):
        return [DepthMap.dense(np.exp(p)) for p in self.predict_log(samples)]


class MapPredictor(Predictor):
    """Returns one fixed depth map (e.g. the training-set mean) for every input."""

    def __init__(self, depth: DepthMap, crop_height: int, crop_width: int, name: str = "mean"):
        self.depth = depth
        self.crop_height = crop_height
        self.crop_width = crop_width
        self.name = name

    def region(self, frame_height, frame_width):
        top, left = crop_offset(frame_height, frame_width, self.crop_height, self.crop_width)
        return Region(top, left, self.crop_height, self.crop_width)

    def predict(self, samples):
        return [self.depth.copy() for _ in samples]


class OraclePredictor(Predictor):
    """Ground truth itself (invalid pixels filled with 1 m and masked)."""

    name = "oracle"

    def region(self, frame_height, frame_width):
        return Region(0, 0, frame_height, frame_width)

    def predict(self, samples):
        return [DepthMap(np.where(s.depth.mask, s.depth.depth, 1.0), s.depth.mask.copy()) for s in samples]


class ScaledPredictor(Predictor):
    """Another predictor's output multiplied by a constant."""

    def __init__(self, inner: Predictor, factor: float, name: str | None = None):
        self.inner = inner
        self.factor = factor
        self.name = name or f"{inner.name}x{factor:g}"

    def region(self, frame_height, frame_width):
        return self.inner.region(frame_height, frame_width)

    def predict(self, samples):
        return [p.scaled(self.factor) for p in self.inner.predict(samples)]


# ---------------------------------------------------------------------------
# dataset evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalProtocol:
    """``mode="upsample"`` scores at ground-truth resolution (the default);
    ``"downsample"`` instead samples the ground truth down to each
    prediction's native grid."""

    mode: str = "upsample"
    workers: int = 1

    def __post_init__(self):
        if self.mode not in ("upsample", "downsample"):
            raise ValueError(f"unknown evaluation mode {self.mode!r}")


@dataclass(frozen=True)
class ImageRow:
    id: str
    terms: ImageTerms

    def as_list(self) -> list[str]:
        t = self.terms
        return [self.id, str(t.n), repr(t.si_mse), repr(float(np.sqrt(t.si_mse))), repr(t.rmse_log),
                repr(t.alpha), repr(t.sum_abs_rel / t.n)]


IMAGE_HEADER = ("id", "n_pixels", "si_mse", "si_rmse_log", "rmse_log", "alpha", "abs_rel")


@dataclass
class EvalResult:
    report: MetricsReport
    rows: list[ImageRow]  # best (lowest si error) first
    skipped: list[str]
    overlap: float = 1.0  # mean fraction of the method's own region that was scored

    def images_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(IMAGE_HEADER)
        for r in self.rows:
            w.writerow(r.as_list())
        return buf.getvalue()


def _native_pair(pred: DepthMap, region: Region, target: Region, gt: DepthMap,
                 mode: str) -> tuple[DepthMap, DepthMap]:
    """Prediction and ground truth on ``target`` at the resolution the protocol scores at."""
    full = upsample_nearest(pred, region.height, region.width)
    gt_t = gt.crop(target.top, target.left, target.height, target.width)
    if mode == "upsample":
        return crop_to(full, region, target), gt_t
    # downsample: score on the prediction's own grid restricted to the target
    gt_region = gt.crop(region.top, region.left, region.height, region.width)
    gt_small = downsample_nearest(gt_region, *pred.shape)
    if target != region:
        rows = (np.arange(pred.shape[0]) + 0.5) * region.height / pred.shape[0] + region.top
        cols = (np.arange(pred.shape[1]) + 0.5) * region.width / pred.shape[1] + region.left
        keep = np.outer((rows >= target.top) & (rows < target.bottom),
                        (cols >= target.left) & (cols < target.right))
        gt_small = DepthMap(gt_small.depth, gt_small.mask & keep)
    return pred, gt_small


def _score(predictors: Sequence[Predictor], samples: Sequence[Sample], protocol: EvalProtocol
           ) -> tuple[list[EvalResult], list[float]]:
    preds = [p.predict(samples) for p in predictors]
    results = [([], [], []) for _ in predictors]  # rows, skipped, overlaps

    def one(i: int):
        s = samples[i]
        fh, fw = s.depth.shape
        regions = [p.region(fh, fw) for p in predictors]
        common = regions[0]
        for r in regions[1:]:
            common = common.intersect(r)
        out = []
        for k, r in enumerate(regions):
            pr, gt = _native_pair(preds[k][i], r, common, s.depth, protocol.mode)
            out.append((image_terms(pr, gt), common.area / r.area))
        return out

    order = sorted(range(len(samples)), key=lambda i: samples[i].id)
    if protocol.workers > 1:
        with ThreadPoolExecutor(protocol.workers) as pool:
            outcomes = list(pool.map(lambda i: _safe(one, i), order))
    else:
        outcomes = [_safe(one, i) for i in order]
    for i, res in zip(order, outcomes):
        for k in range(len(predictors)):
            rows, skipped, overlaps = results[k]
            if isinstance(res, Exception):
                skipped.append(samples[i].id)
            else:
                rows.append(ImageRow(samples[i].id, res[k][0]))
                overlaps.append(res[k][1])
    out = []
    for rows, skipped, overlaps in results:
        if skipped:
            warnings.warn(f"skipped {len(skipped)} images during evaluation", stacklevel=3)
        if not rows:
            raise EmptyMaskError("no image could be evaluated")
        report = pool_terms([r.terms for r in rows])  # sorted-id order
        ranked = sorted(rows, key=lambda r: (r.terms.si_mse, r.id))
        out.append(EvalResult(report, ranked, skipped, float(np.mean(overlaps))))
    return out, [r.overlap for r in out]


def _safe(fn, i):
    try:
        return fn(i)
    except (EmptyMaskError, ValueError) as exc:
        log.warning("image %d skipped: %s", i, exc)
        return exc


def evaluate_dataset(predictor: Predictor, samples: Sequence[Sample],
                     protocol: EvalProtocol = EvalProtocol()) -> EvalResult:
    """Pooled report plus per-image rows sorted from best to worst scale-invariant error."""
    return _score([predictor], samples, protocol)[0][0]


def compare_methods(predictors: Sequence[Predictor], samples: Sequence[Sample],
                    protocol: EvalProtocol = EvalProtocol()) -> list[tuple[str, EvalResult]]:
    """Score every method on the common intersection of all methods' regions."""
    if not predictors:
        raise ValueError("need at least one predictor")
    results, _ = _score(predictors, samples, protocol)
    return [(p.name, r) for p, r in zip(predictors, results)]


def comparison_csv(table: Sequence[tuple[str, EvalResult]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method",) + REPORT_HEADER + ("overlap",))
    for name, res in table:
        w.writerow([name] + res.report.csv_row() + [repr(res.overlap)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# edge alignment
# ---------------------------------------------------------------------------

def gradient_magnitude(log_depth: np.ndarray, mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Forward-difference gradient magnitude on the (H-1, W-1) grid and where it is defined."""
    g = np.asarray(log_depth, dtype=np.float64)
    gx = g[:-1, 1:] - g[:-1, :-1]
    gy = g[1:, :-1] - g[:-1, :-1]
    if mask is None:
        ok = np.ones(gx.shape, dtype=bool)
    else:
        ok = mask[:-1, 1:] & mask[:-1, :-1] & mask[1:, :-1]
    return np.hypot(gx, gy), ok


def edge_alignment(pred_log: Sequence[np.ndarray], gts: Sequence[DepthMap]) -> float:
    """Pearson correlation of prediction and ground-truth log-depth gradient magnitudes.

    Pooled over all images at pixels where the ground-truth gradient is defined.
    """
    a, b = [], []
    for p, g in zip(pred_log, gts):
        pm, _ = gradient_magnitude(p)
        gm, ok = gradient_magnitude(g.log_depth(), g.mask)
        a.append(pm[ok])
        b.append(gm[ok])
    a, b = np.concatenate(a), np.concatenate(b)
    if a.std() == 0 or b.std() == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])
