"""Scale-invariant depth error, the blended training loss, and evaluation metrics.

All logarithms are natural.  With ``d_i = log y_i - log y*_i`` over the
pixels valid in both maps, the scale-invariant MSE is
``mean(d**2) - mean(d)**2``; it is unchanged when the prediction is
multiplied by any positive constant.
"""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass, fields, asdict
from typing import Iterable, Sequence

import numpy as np

from .depthmap import DepthMap, EmptyMaskError, joint_mask

DELTA_THRESHOLDS = (1.25, 1.25 ** 2, 1.25 ** 3)
DEFAULT_LAMBDA = 0.5


@dataclass(frozen=True)
class LogDiffStats:
    n_valid: int
    sum_d: float
    sum_d2: float

    @property
    def mean_d(self) -> float:
        return self.sum_d / self.n_valid

    @property
    def si_mse(self) -> float:
        n = self.n_valid
        return max(self.sum_d2 / n - (self.sum_d / n) ** 2, 0.0)


def log_differences(pred: DepthMap, gt: DepthMap) -> np.ndarray:
    """``log pred - log gt`` over the joint mask, row-major order."""
    mask = joint_mask(pred, gt)
    return np.log(pred.depth[mask]) - np.log(gt.depth[mask])


def log_diff_stats(pred: DepthMap, gt: DepthMap) -> LogDiffStats:
    d = log_differences(pred, gt)
    return LogDiffStats(d.size, float(d.sum()), float((d * d).sum()))


def optimal_log_scale(pred: DepthMap, gt: DepthMap) -> float:
    """Mean of ``log gt - log pred``; ``exp`` of it best aligns pred to gt."""
    return -float(np.mean(log_differences(pred, gt)))


def si_error(pred: DepthMap, gt: DepthMap) -> float:
    """Scale-invariant MSE via the linear-time identity."""
    return log_diff_stats(pred, gt).si_mse


def si_error_explicit(pred: DepthMap, gt: DepthMap) -> float:
    """Scale-invariant MSE with the optimal log offset added explicitly."""
    d = log_differences(pred, gt)
    alpha = -d.mean()
    return float(np.mean((d + alpha) ** 2))


def si_error_pairwise(pred: DepthMap, gt: DepthMap, chunk: int = 1024) -> float:
    """O(n^2) pairwise form: mean over all (i, j) of squared relative-depth mismatch.

    Intended as an oracle for :func:`si_error` on maps up to ~10^4 valid pixels.
    """
    mask = joint_mask(pred, gt)
    lp = np.log(pred.depth[mask])
    lg = np.log(gt.depth[mask])
    n = lp.size
    total = 0.0
    for start in range(0, n, chunk):
        dp = lp[start:start + chunk, None] - lp[None, :]
        dg = lg[start:start + chunk, None] - lg[None, :]
        total += float(((dp - dg) ** 2).sum())
    # sum over ordered pairs of (d_i - d_j)^2 is 2 n^2 D
    return total / (2 * n * n)


def _check_lambda(lam: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")


def training_loss_arrays(pred_log: np.ndarray, gt_log: np.ndarray, mask: np.ndarray,
                         lam: float = DEFAULT_LAMBDA) -> tuple[float, np.ndarray]:
    """Batched masked loss on log-depth arrays.

    Arrays share a leading batch axis.  Each sample's loss is
    ``sum(d^2)/n - lam * sum(d)^2 / n^2`` over its valid pixels; the batch loss
    is the mean over samples and the returned gradient is with respect to
    ``pred_log`` (exactly zero on masked pixels).
    """
    _check_lambda(lam)
    pred_log = np.asarray(pred_log)
    mask = np.asarray(mask, dtype=bool)
    if pred_log.shape != mask.shape or np.shape(gt_log) != mask.shape:
        raise ValueError("pred_log, gt_log and mask must share a shape")
    b = pred_log.shape[0]
    axes = tuple(range(1, pred_log.ndim))
    n = mask.sum(axis=axes)
    if (n == 0).any():
        raise EmptyMaskError("a target in the batch has no valid pixels")
    d = np.where(mask, pred_log.astype(np.float64) - np.where(mask, gt_log, 0.0), 0.0)
    sum_d = d.sum(axis=axes)
    sum_d2 = (d * d).sum(axis=axes)
    per_sample = sum_d2 / n - lam * sum_d ** 2 / n ** 2
    expand = (slice(None),) + (None,) * len(axes)
    grad = np.where(mask, 2.0 * d / n[expand] - 2.0 * lam * (sum_d / n ** 2)[expand], 0.0)
    grad /= b
    return float(per_sample.mean()), grad.astype(pred_log.dtype)


def training_loss(pred_log, gt: DepthMap, lam: float = DEFAULT_LAMBDA) -> tuple[float, np.ndarray]:
    """Loss of one log-depth prediction against a masked target.

    Returns ``(L, dL/dpred_log)``.
    """
    _check_lambda(lam)
    pred_log = np.asarray(getattr(pred_log, "data", pred_log), dtype=np.float64)
    if pred_log.shape != gt.shape:
        raise ValueError(f"prediction {pred_log.shape} and target {gt.shape} are not aligned")
    mask = gt.mask
    n = int(mask.sum())
    if n == 0:
        raise EmptyMaskError("target has no valid pixels")
    d = pred_log[mask] - np.log(gt.depth[mask])
    sum_d = float(d.sum())
    loss = float((d * d).sum()) / n - lam * sum_d ** 2 / n ** 2
    grad = np.zeros(pred_log.shape)
    grad[mask] = 2.0 * d / n - 2.0 * lam * sum_d / n ** 2
    return loss, grad


# ---------------------------------------------------------------------------
# evaluation metrics
# ---------------------------------------------------------------------------

REPORT_HEADER = ("delta1", "delta2", "delta3", "abs_rel", "sqr_rel", "rmse_lin",
                 "rmse_log", "si_rmse_log", "n_images", "n_pixels")


@dataclass(frozen=True)
class MetricsReport:
    delta1: float
    delta2: float
    delta3: float
    abs_rel: float
    sqr_rel: float
    rmse_lin: float
    rmse_log: float
    si_rmse_log: float
    n_images: int
    n_pixels: int

    def as_dict(self) -> dict:
        return asdict(self)

    def csv_row(self) -> list[str]:
        return [_fmt(getattr(self, f.name)) for f in fields(self)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        writer.writerow(self.csv_row())
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        rows = list(csv.reader(io.StringIO(text)))
        if tuple(rows[0]) != REPORT_HEADER:
            raise ValueError(f"unexpected header {rows[0]}")
        vals = rows[1]
        return cls(*[float(v) for v in vals[:8]], int(vals[8]), int(vals[9]))


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


@dataclass(frozen=True)
class ImageTerms:
    """Per-image sums from which every pooled metric can be formed."""

    n: int
    below: tuple[int, int, int]
    sum_abs_rel: float
    sum_sqr_rel: float
    sum_sq_lin: float
    sum_sq_log: float
    sum_d: float
    si_sum: float  # sum over pixels of (d_i - mean d)^2, accumulated after centring

    @property
    def alpha(self) -> float:
        return -self.sum_d / self.n

    @property
    def si_mse(self) -> float:
        return self.si_sum / self.n

    @property
    def rmse_log(self) -> float:
        return float(np.sqrt(self.sum_sq_log / self.n))


def image_terms(pred: DepthMap, gt: DepthMap) -> ImageTerms:
    mask = joint_mask(pred, gt)
    y = pred.depth[mask]
    ys = gt.depth[mask]
    ratio = np.maximum(y / ys, ys / y)
    d = np.log(y) - np.log(ys)
    diff = y - ys
    return ImageTerms(
        n=int(y.size),
        below=tuple(int((ratio < t).sum()) for t in DELTA_THRESHOLDS),
        sum_abs_rel=float((np.abs(diff) / ys).sum()),
        sum_sqr_rel=float((diff * diff / ys).sum()),
        sum_sq_lin=float((diff * diff).sum()),
        sum_sq_log=float((d * d).sum()),
        sum_d=float(d.sum()),
        si_sum=float(np.square(d - d.mean()).sum()),
    )


def pool_terms(terms: Sequence[ImageTerms]) -> MetricsReport:
    """Pool per-pixel terms over an image set; the caller fixes the order."""
    if not terms:
        raise EmptyMaskError("no images to pool")
    n = sum(t.n for t in terms)
    below = [sum(t.below[k] for t in terms) for k in range(3)]
    return MetricsReport(
        delta1=below[0] / n, delta2=below[1] / n, delta3=below[2] / n,
        abs_rel=sum(t.sum_abs_rel for t in terms) / n,
        sqr_rel=sum(t.sum_sqr_rel for t in terms) / n,
        rmse_lin=float(np.sqrt(sum(t.sum_sq_lin for t in terms) / n)),
        rmse_log=float(np.sqrt(sum(t.sum_sq_log for t in terms) / n)),
        si_rmse_log=float(np.sqrt(sum(t.si_sum for t in terms) / n)),
        n_images=len(terms), n_pixels=n,
    )


def evaluate(pred: DepthMap | Sequence[DepthMap], gt: DepthMap | Sequence[DepthMap]) -> MetricsReport:
    """Six-metric report for one aligned pair or a list of pairs (pooled per pixel)."""
    if isinstance(pred, DepthMap):
        pred, gt = [pred], [gt]
    if len(pred) != len(gt):
        raise ValueError("prediction and ground-truth lists differ in length")
    return pool_terms([image_terms(p, g) for p, g in zip(pred, gt)])


def oracle_mean_substitution(pred: DepthMap | Sequence[DepthMap],
                             gt: DepthMap | Sequence[DepthMap]) -> tuple[float, float]:
    """Log RMSE before and after replacing each prediction's mean log depth with the truth's.

    The shift is applied to the prediction itself and the error recomputed,
    so the result can be checked against ``sqrt(si MSE)``.
    """
    if isinstance(pred, DepthMap):
        pred, gt = [pred], [gt]
    sq_before = sq_after = 0.0
    n = 0
    for p, g in zip(pred, gt):
        d = log_differences(p, g)
        shifted = d + (-d.mean())
        sq_before += float((d * d).sum())
        sq_after += float((shifted * shifted).sum())
        n += d.size
    if n == 0:
        raise EmptyMaskError("no images")
    return float(np.sqrt(sq_before / n)), float(np.sqrt(sq_after / n))


def pooled_si_rmse(pred: Iterable[DepthMap], gt: Iterable[DepthMap]) -> float:
    return evaluate(list(pred), list(gt)).si_rmse_log
