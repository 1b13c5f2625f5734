"""Built-in numerical checks: gradient checks and loss-form agreement.

These are the same oracles the test-suite uses, packaged so an installed
copy can verify itself (``depthstack selfcheck``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .depthmap import DepthMap
from .losses import si_error, si_error_explicit, si_error_pairwise, training_loss
from .model import CONCAT, RELU, LayerSpec, NetworkSpec, build_networks, conv, fc, pool

LINEAR_TOL = 1e-7
STACK_TOL = 1e-4
LOSS_TOL = 1e-6
FORM_TOL = 1e-10


def tiny_spec() -> NetworkSpec:
    """16x16 input, 4x4 output; small enough for exhaustive finite differences."""
    coarse = [conv(4, 3, stride=2, padding=1), RELU, pool(2),
              conv(4, 3, padding=1), RELU, pool(2),
              fc(8), RELU, LayerSpec("dropout", rate=0.5), LayerSpec("linear-output")]
    fine = [conv(4, 3, stride=2, padding=1), RELU, pool(2), CONCAT,
            conv(4, 3, padding=1), RELU, conv(1, 3, padding=1)]
    return NetworkSpec(16, 16, 4, 4, coarse, fine)


def random_masked_pair(rng: np.random.Generator, height: int, width: int,
                       p_valid: float = 0.7) -> tuple[DepthMap, DepthMap]:
    """Log-normal depths; at least one jointly valid pixel."""
    pred = np.exp(rng.normal(0.5, 0.6, (height, width)))
    gt = np.exp(rng.normal(0.5, 0.6, (height, width)))
    mask = rng.random((height, width)) < p_valid
    mask.flat[rng.integers(mask.size)] = True
    return DepthMap.dense(pred), DepthMap(np.where(mask, gt, 0.0), mask)


def loss_form_residual(n_pairs: int = 200, seed: int = 0, max_height: int = 48,
                       max_width: int = 64) -> float:
    """Largest disagreement among the three algebraic forms of the scale-invariant error."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_pairs):
        h = 1 if k == 0 else int(rng.integers(1, max_height + 1))
        w = 1 if k == 0 else int(rng.integers(1, max_width + 1))
        if k == n_pairs - 1:
            h, w = max_height, max_width
        pred, gt = random_masked_pair(rng, h, w)
        a, b, c = si_error(pred, gt), si_error_explicit(pred, gt), si_error_pairwise(pred, gt)
        worst = max(worst, abs(a - b), abs(a - c), abs(b - c))
    return worst


def _kink_free(build, tensors_fn, seed: int, margin: float = 1e-4, tries: int = 50):
    """Retry random draws until no ReLU or max-pool decision lies within ``margin`` of a switch."""
    for k in range(tries):
        rng = np.random.default_rng([seed, k])
        made = build(rng)
        with ad.record_kink_margin() as rec:
            tensors_fn(made)()
        if not rec or min(rec) > margin:
            return made
    raise RuntimeError("could not draw kink-free inputs")


def primitive_errors(seed: int = 0) -> dict[str, float]:
    """Relative gradcheck error per primitive at double precision."""
    errs: dict[str, float] = {}
    rng = np.random.default_rng(seed)

    def leaf(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    x, w, b = leaf(2, 3, 7, 6), leaf(4, 3, 3, 2), leaf(4)
    errs["conv2d"] = ad.gradcheck(lambda: ad.conv2d(x, w, b, stride=2, padding=1), [x, w, b])
    x2, w2 = leaf(1, 2, 5, 5), leaf(3, 2, 5, 5)
    errs["conv2d_same"] = ad.gradcheck(lambda: ad.conv2d(x2, w2, None, stride=1, padding=2), [x2, w2])
    xf, wf, bf = leaf(3, 10), leaf(5, 10), leaf(5)
    errs["fully_connected"] = ad.gradcheck(lambda: ad.fully_connected(xf, wf, bf), [xf, wf, bf])
    a, c = leaf(2, 2, 3, 3), leaf(2, 1, 3, 3)
    errs["concat"] = ad.gradcheck(lambda: ad.concat([a, c], axis=1), [a, c])
    r = leaf(2, 12)
    errs["reshape"] = ad.gradcheck(lambda: ad.reshape(r, (2, 3, 4)), [r])
    d = leaf(4, 20)
    errs["dropout"] = ad.gradcheck(lambda: ad.dropout(d, 0.5, np.random.default_rng(3), train=True), [d])

    # piecewise-linear ops: keep inputs away from the switch points
    def far_from_zero(shape):
        v = rng.uniform(0.1, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
        return Tensor(v, requires_grad=True)

    xr = far_from_zero((3, 11))
    errs["relu"] = ad.gradcheck(lambda: ad.relu(xr), [xr])
    # distinct values with gaps >> eps so the argmax never flips
    xp = Tensor(rng.permutation(2 * 3 * 7 * 7).reshape(2, 3, 7, 7) * 0.01, requires_grad=True)
    errs["maxpool2d"] = ad.gradcheck(lambda: ad.maxpool2d(xp, 3, 2), [xp])
    return errs


def stack_errors(seed: int = 0) -> dict[str, float]:
    """Gradcheck of the whole coarse and fine stacks of ``tiny_spec`` (eval mode)."""
    spec = tiny_spec()

    def build(rng):
        coarse, fine = build_networks(spec, np.float64)
        coarse.init_random(rng, output_bias=0.3)
        fine.init_random(rng)
        x = Tensor(rng.standard_normal((2, 3, 16, 16)), requires_grad=True)
        return coarse, fine, x

    coarse, fine, x = _kink_free(build, lambda m: (lambda: m[0].forward(m[2])), seed)
    errs = {"coarse_stack": ad.gradcheck(lambda: coarse.forward(x), coarse.tensors() + [x])}
    cmap = coarse.forward(x).data
    coarse_f, fine_f, x_f = _kink_free(build, lambda m: (lambda: m[1].forward(m[2], cmap)), seed + 1)
    errs["fine_stack"] = ad.gradcheck(lambda: fine_f.forward(x_f, cmap), fine_f.tensors() + [x_f])
    return errs


def loss_gradient_error(seed: int = 0, lams=(0.0, 0.5, 1.0)) -> tuple[float, bool]:
    """Worst relative error of the training-loss gradient, and whether masked pixels got exact zeros."""
    rng = np.random.default_rng(seed)
    worst, zeros_ok = 0.0, True
    eps = 1e-6
    for lam in lams:
        pred_log = rng.normal(0.0, 0.5, (6, 7))
        _, gt = random_masked_pair(rng, 6, 7, p_valid=0.6)
        _, grad = training_loss(pred_log, gt, lam)
        numeric = np.zeros_like(pred_log)
        for i in np.ndindex(pred_log.shape):
            p = pred_log.copy()
            p[i] += eps
            fp = training_loss(p, gt, lam)[0]
            p[i] -= 2 * eps
            fm = training_loss(p, gt, lam)[0]
            numeric[i] = (fp - fm) / (2 * eps)
        denom = max(np.linalg.norm(grad), np.linalg.norm(numeric), 1e-300)
        worst = max(worst, float(np.linalg.norm(grad - numeric) / denom))
        zeros_ok &= bool(np.all(grad[~gt.mask] == 0.0))
    return worst, zeros_ok


@dataclass
class SelfCheckResult:
    primitives: dict[str, float]
    stacks: dict[str, float]
    loss_gradient: float
    masked_zero: bool
    form_residual: float

    @property
    def ok(self) -> bool:
        return (max(self.primitives.values()) < LINEAR_TOL
                and max(self.stacks.values()) < STACK_TOL
                and self.loss_gradient < LOSS_TOL and self.masked_zero
                and self.form_residual < FORM_TOL)

    def lines(self) -> list[str]:
        out = [f"gradcheck {k}: {v:.3e}" for k, v in self.primitives.items()]
        out += [f"gradcheck {k}: {v:.3e}" for k, v in self.stacks.items()]
        out.append(f"loss gradient: {self.loss_gradient:.3e} (masked zeros exact: {self.masked_zero})")
        out.append(f"max gradcheck error: {max(list(self.primitives.values()) + list(self.stacks.values())):.3e}")
        out.append(f"loss-form residual: {self.form_residual:.3e}")
        out.append("selfcheck " + ("passed" if self.ok else "FAILED"))
        return out


def run_selfcheck(seed: int = 0) -> SelfCheckResult:
    lg, zeros = loss_gradient_error(seed)
    return SelfCheckResult(primitive_errors(seed), stack_errors(seed), lg, zeros, loss_form_residual(seed=seed))
