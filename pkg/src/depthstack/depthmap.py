from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EmptyMaskError(ValueError):
    """Raised when a depth map has no valid pixels where at least one is required."""


@dataclass
class DepthMap:
    """Metric depths (meters) on an H x W grid plus a validity mask.

    Values under a false mask entry are never read by any loss or metric, so
    they may hold anything (zeros, garbage, NaN).
    """

    depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.depth.shape != self.mask.shape:
            raise ValueError(f"depth shape {self.depth.shape} != mask shape {self.mask.shape}")
        valid = self.depth[self.mask]
        if not (np.isfinite(valid).all() and (valid > 0).all()):
            raise ValueError("valid depths must be finite and strictly positive")

    @classmethod
    def dense(cls, depth) -> "DepthMap":
        depth = np.asarray(depth, dtype=np.float64)
        return cls(depth, np.ones(depth.shape, dtype=bool))

    @classmethod
    def from_encoded(cls, depth) -> "DepthMap":
        """Treat non-positive or non-finite entries as missing."""
        depth = np.asarray(depth, dtype=np.float64)
        mask = np.isfinite(depth) & (depth > 0)
        return cls(np.where(mask, depth, 0.0), mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def log_depth(self) -> np.ndarray:
        """Natural log of depth, 0 at invalid pixels."""
        out = np.zeros(self.depth.shape)
        np.log(self.depth, out=out, where=self.mask)
        return out

    def scaled(self, factor: float) -> "DepthMap":
        return DepthMap(np.where(self.mask, self.depth * factor, 0.0), self.mask.copy())

    def crop(self, top: int, left: int, height: int, width: int) -> "DepthMap":
        return DepthMap(self.depth[top:top + height, left:left + width].copy(),
                        self.mask[top:top + height, left:left + width].copy())

    def copy(self) -> "DepthMap":
        return DepthMap(self.depth.copy(), self.mask.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, DepthMap):
            return NotImplemented
        return (self.shape == other.shape and np.array_equal(self.mask, other.mask)
                and np.array_equal(self.depth[self.mask], other.depth[other.mask]))


def joint_mask(pred: DepthMap, gt: DepthMap) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} are not aligned")
    mask = pred.mask & gt.mask
    if not mask.any():
        raise EmptyMaskError("no pixel is valid in both prediction and ground truth")
    return mask
