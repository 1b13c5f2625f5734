"""Two-stage training: coarse stack first, then the fine stack on frozen coarse output."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .augment import AugmentParams, augment, test_transform
from .checkpoint import save_checkpoint
from .data import Sample
from .depthmap import DepthMap
from .losses import DEFAULT_LAMBDA, training_loss_arrays
from .model import CoarseNet, FineNet, NetworkSpec, build_networks
from .synthetic import sample_seed

log = logging.getLogger(__name__)


class DivergenceError(ArithmeticError):
    def __init__(self, phase: str, step: int, detail: str = ""):
        super().__init__(f"training diverged in {phase} phase at step {step}{': ' + detail if detail else ''}")
        self.phase = phase
        self.step = step


@dataclass
class TrainConfig:
    batch_size: int = 32
    momentum: float = 0.9
    lr: float = 1.0
    coarse_samples: int = 32000
    fine_samples: int = 32000
    lam: float = DEFAULT_LAMBDA
    seed: int = 0
    augment: AugmentParams | None = None
    rgb_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    workers: int = 1
    checkpoint_every: int = 0
    fine_init: str = "pass-through"
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.coarse_samples <= 0 or self.fine_samples <= 0:
            raise ValueError("phase sample counts must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must be in [0, 1]")
        if self.fine_init not in ("pass-through", "random"):
            raise ValueError(f"unknown fine_init {self.fine_init!r}")

    def steps(self, phase: str) -> int:
        n = self.coarse_samples if phase == "coarse" else self.fine_samples
        return max(1, n // self.batch_size)


@dataclass
class TrainResult:
    spec: NetworkSpec
    coarse: CoarseNet
    fine: FineNet
    losses: list[tuple[int, str, float]] = field(default_factory=list)
    coarse_checkpoint: bytes = b""


def downsample_nearest(depth: DepthMap, height: int, width: int) -> DepthMap:
    """Pick the pixel nearest each output cell centre."""
    h, w = depth.shape
    rows = np.minimum(((np.arange(height) + 0.5) * h / height).astype(int), h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * w / width).astype(int), w - 1)
    return DepthMap(depth.depth[np.ix_(rows, cols)], depth.mask[np.ix_(rows, cols)])


def network_input(samples: Sequence[Sample], rgb_mean, dtype=np.float32) -> np.ndarray:
    """(N, 3, H, W) mean-subtracted batch."""
    mean = np.asarray(rgb_mean, dtype=np.float64)
    return np.stack([(s.rgb - mean).transpose(2, 0, 1) for s in samples]).astype(dtype)


def target_arrays(samples: Sequence[Sample], height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    maps = [downsample_nearest(s.depth, height, width) for s in samples]
    return np.stack([m.log_depth() for m in maps]), np.stack([m.mask for m in maps])


class BatchStream:
    """Deterministic sample order and per-sample augmentation.

    Position ``k`` of the stream is element ``k % n`` of the permutation for
    epoch ``k // n``; each sample's transform draws come from a seed derived
    from (seed, sample id, stream position), so results do not depend on the
    number of worker threads.
    """

    def __init__(self, samples: Sequence[Sample], config: TrainConfig, spec: NetworkSpec, salt: int):
        self.samples = list(samples)
        self.config = config
        self.spec = spec
        self.salt = salt
        self._perms: dict[int, np.ndarray] = {}
        self._pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()

    def _index(self, pos: int) -> int:
        n = len(self.samples)
        epoch = pos // n
        if epoch not in self._perms:
            self._perms = {epoch: np.random.default_rng([self.config.seed, self.salt, epoch]).permutation(n)}
        return int(self._perms[epoch][pos % n])

    def _prepare(self, item: tuple[int, int]) -> Sample:
        pos, idx = item
        s = self.samples[idx]
        params = self.config.augment
        if params is None:
            # no augmentation: train on the same centre crop used at test time
            return test_transform(s, self.spec.input_height, self.spec.input_width)
        rng = np.random.default_rng(sample_seed(self.config.seed * 1000003 + self.salt, s.id, pos))
        return augment(s, params, rng)

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        b = self.config.batch_size
        positions = [(p, self._index(p)) for p in range(step * b, (step + 1) * b)]
        if self._pool is not None:
            prepared = list(self._pool.map(self._prepare, positions))
        else:
            prepared = [self._prepare(p) for p in positions]
        x = network_input(prepared, self.config.rgb_mean, np.dtype(self.config.dtype))
        y, m = target_arrays(prepared, self.spec.output_height, self.spec.output_width)
        return x, y, m


def _train_phase(phase: str, stream: BatchStream, model, params, config: TrainConfig,
                 forward, losses: list, out_dir: Path | None, save) -> None:
    opt = ad.SGDMomentum(params, config.lr, config.momentum, model.multipliers())
    for step in range(config.steps(phase)):
        x, y, m = stream.batch(step)
        try:
            pred = forward(x, step)
            loss, grad = training_loss_arrays(pred.data[:, 0], y, m, config.lam)
            if not np.isfinite(loss):
                raise DivergenceError(phase, step, "non-finite loss")
            opt.zero_grad()
            pred.backward(grad[:, None])
            opt.step()
        except ad.NonFiniteError as exc:
            raise DivergenceError(phase, step, str(exc)) from exc
        losses.append((step, phase, loss))
        if out_dir is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save(out_dir / f"{phase}_step{step + 1:06d}.ckpt")
        if step % 100 == 0:
            log.info("%s step %d loss %.5f", phase, step, loss)


def train_two_stage(spec: NetworkSpec, train: Sequence[Sample], config: TrainConfig,
                    out_dir: str | Path | None = None) -> TrainResult:
    """Train the coarse stack, freeze it, then train the fine stack on its output.

    Writes ``losses.csv``, ``coarse.ckpt`` (after phase 1) and ``model.ckpt``
    into ``out_dir`` when given.  Deterministic for a fixed ``config.seed``.
    """
    if not train:
        raise ValueError("training set is empty")
    dtype = np.dtype(config.dtype)
    coarse, fine = build_networks(spec, dtype)
    rng = np.random.default_rng([config.seed, 1])
    mean_log = float(np.mean(np.concatenate([np.log(s.depth.depth[s.depth.mask]) for s in train])))
    # start the output layer at the average training log depth
    coarse.init_random(rng, output_bias=mean_log)
    fine.init_random(rng)
    if config.fine_init == "pass-through":
        fine.set_pass_through(zero_rest=False)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    save = lambda path: save_checkpoint(path, spec, coarse, fine)  # noqa: E731
    losses: list[tuple[int, str, float]] = []

    stream = BatchStream(train, config, spec, salt=1)
    try:
        _train_phase("coarse", stream, coarse, coarse.tensors(), config,
                     lambda x, step: coarse.forward(x, train=True,
                                                    rng=np.random.default_rng([config.seed, 2, step])),
                     losses, out, save)
    finally:
        stream.close()
    coarse_bytes = b"".join(a.tobytes() for a in coarse.state())
    if out is not None:
        save(out / "coarse.ckpt")

    stream = BatchStream(train, config, spec, salt=2)
    try:
        _train_phase("fine", stream, fine, fine.tensors(), config,
                     lambda x, step: fine.forward(x, coarse.forward(x, train=False)),
                     losses, out, save)
    finally:
        stream.close()
    if out is not None:
        save(out / "model.ckpt")
        write_losses(out / "losses.csv", losses)
    return TrainResult(spec, coarse, fine, losses, coarse_bytes)


def write_losses(path: str | Path, losses: Sequence[tuple[int, str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "phase", "loss"])
        for step, phase, loss in losses:
            writer.writerow([step, phase, repr(float(loss))])
