"""Acceptance suite.

One class per criterion; ``conftest.py`` prints a pass/fail line for each at
the end of the run.  The desk-scale criteria share one trained model: the
pinned synthetic dataset (500 scenes x 4 frames at 64x48, seed 7) trained with
``configs/desk.cfg`` through the command-line entry point.
"""

import csv
import time
from pathlib import Path

import numpy as np
import pytest

from depthstack.augment import AugmentParams, Draw, apply_draw, augment, draw_params
from depthstack.checkpoint import load_checkpoint
from depthstack.cli import main
from depthstack.data import Manifest, Sample, load_samples
from depthstack.depthmap import DepthMap
from depthstack.evaluation import (EvalProtocol, MapPredictor, NetworkPredictor, OraclePredictor,
                                   ScaledPredictor, compare_methods, edge_alignment, evaluate_dataset)
from depthstack.losses import (evaluate, image_terms, oracle_mean_substitution, si_error, si_error_explicit,
                               si_error_pairwise, training_loss, training_loss_arrays)
from depthstack.selfcheck import (LINEAR_TOL, LOSS_TOL, STACK_TOL, loss_form_residual, loss_gradient_error,
                                  primitive_errors, random_masked_pair, stack_errors)
from depthstack.synthetic import render_scene_frames
from depthstack.training import downsample_nearest

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk.cfg"

# Edge-alignment gain of coarse+fine over coarse required by criterion 7.  The
# pilot run of the pinned configuration measured 0.4307 -> 0.5156 (+0.085).
EDGE_MARGIN = 0.05
TRAIN_BUDGET_S = 15 * 60

C1 = pytest.mark.criterion(1, "loss-form equivalence (200 pairs, 1e-10, < 10 s)")
C2 = pytest.mark.criterion(2, "scale invariance of si error and of compare_methods")
C3 = pytest.mark.criterion(3, "gradient correctness (1e-7 / 1e-4 / 1e-6, < 60 s)")
C4 = pytest.mark.criterion(4, "lambda endpoints within 1e-12")
C5 = pytest.mark.criterion(5, "oracle mean-substitution identity")
C6 = pytest.mark.criterion(6, "mask insensitivity (bitwise)")
C7 = pytest.mark.criterion(7, "desk-scale training beats baseline, fine refines edges, <= 15 min")
C8 = pytest.mark.criterion(8, "frozen coarse parameters during phase 2")
C9 = pytest.mark.criterion(9, "augmentation geometry")
C10 = pytest.mark.criterion(10, "CLI determinism independent of --workers")


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Generate, train and compare once; returns paths, timings and loaded results."""
    root = tmp_path_factory.mktemp("acceptance")
    t0 = time.perf_counter()
    assert main(["gen-data", "--scenes", "500", "--frames", "4", "--width", "64", "--height", "48",
                 "--seed", "7", "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(DESK_CONFIG), "--train", str(root / "data/train.tsv"),
                 "--out", str(root / "train")]) == 0
    assert main(["compare", "--checkpoint", str(root / "train/model.ckpt"), "--manifest",
                 str(root / "data/test.tsv"), "--train", str(root / "data/train.tsv"),
                 "--out", str(root / "compare")]) == 0
    elapsed = time.perf_counter() - t0
    with open(root / "compare/comparison.csv") as fh:
        table = {row["method"]: row for row in csv.DictReader(fh)}
    manifest = Manifest.read(root / "data/test.tsv")
    test, _ = load_samples(manifest)
    spec, coarse, fine = load_checkpoint(root / "train/model.ckpt")
    return dict(root=root, elapsed=elapsed, table=table, manifest=manifest, test=test,
                spec=spec, coarse=coarse, fine=fine)


def random_pairs(n, seed, max_h=48, max_w=64):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        yield random_masked_pair(rng, int(rng.integers(1, max_h + 1)), int(rng.integers(1, max_w + 1)))


# ---------------------------------------------------------------------------
# 1-6: properties of the losses, metrics and gradients
# ---------------------------------------------------------------------------

@C1
class TestLossFormEquivalence:
    def test_three_forms_agree(self):
        t0 = time.perf_counter()
        residual = loss_form_residual(n_pairs=200, seed=11, max_height=48, max_width=64)
        elapsed = time.perf_counter() - t0
        assert residual <= 1e-10
        assert elapsed < 10.0

    def test_extreme_sizes_included(self):
        rng = np.random.default_rng(1)
        for h, w in ((1, 1), (48, 64)):
            p, g = random_masked_pair(rng, h, w)
            a, b, c = si_error(p, g), si_error_explicit(p, g), si_error_pairwise(p, g)
            assert max(abs(a - b), abs(a - c), abs(b - c)) <= 1e-10


@C2
class TestScaleInvariance:
    @pytest.mark.parametrize("c", [0.01, 1.0, 2.0, 137.0])
    def test_si_error_unchanged_by_scale(self, c):
        for pred, gt in random_pairs(50, seed=int(c * 100)):
            assert si_error(pred.scaled(c), gt) - si_error(pred, gt) <= 1e-10

    def test_compare_methods_scaled_copy(self, run):
        base = NetworkPredictor(run["coarse"], run["fine"], run["manifest"].rgb_mean)
        table = compare_methods([base] + [ScaledPredictor(base, c) for c in (0.01, 2.0, 137.0)], run["test"])
        ref = table[0][1].report
        for _, res in table[1:]:
            # two-pass centring leaves at most last-ulp differences after the log shift
            assert abs(res.report.si_rmse_log - ref.si_rmse_log) <= 1e-15
            assert res.report.rmse_log != ref.rmse_log

    @pytest.mark.parametrize("c", [0.01, 2.0, 137.0])
    def test_constant_ratio_rmse_log_shift(self, run, c):
        table = compare_methods([OraclePredictor(), ScaledPredictor(OraclePredictor(), c)], run["test"][:50])
        a, b = table[0][1].report, table[1][1].report
        assert a.rmse_log == 0.0
        assert abs(b.rmse_log - abs(np.log(c))) <= 1e-12
        assert b.si_rmse_log <= 1e-10


@C3
class TestGradients:
    def test_primitives_and_stacks(self):
        t0 = time.perf_counter()
        prim = primitive_errors(seed=5)
        stacks = stack_errors(seed=5)
        loss_err, masked_zero = loss_gradient_error(seed=5, lams=(0.0, 0.5, 1.0))
        elapsed = time.perf_counter() - t0
        assert set(prim) >= {"conv2d", "fully_connected", "maxpool2d", "relu", "dropout", "concat", "reshape"}
        assert max(prim.values()) < LINEAR_TOL == 1e-7
        assert max(stacks.values()) < STACK_TOL == 1e-4
        assert loss_err < LOSS_TOL == 1e-6
        assert masked_zero
        assert elapsed < 60.0

    def test_masked_gradient_exact_zero(self):
        for pred, gt in random_pairs(20, seed=3):
            for lam in (0.0, 0.5, 1.0):
                _, grad = training_loss(pred.log_depth(), gt, lam)
                assert np.all(grad[~gt.mask] == 0.0)


@C4
class TestLambdaEndpoints:
    def test_endpoints(self):
        for pred, gt in random_pairs(100, seed=4):
            d = np.log(pred.depth[gt.mask]) - np.log(gt.depth[gt.mask])
            l0, _ = training_loss(pred.log_depth(), gt, 0.0)
            l1, _ = training_loss(pred.log_depth(), gt, 1.0)
            assert abs(l0 - np.mean(d ** 2)) <= 1e-12
            assert abs(l1 - si_error(pred, gt)) <= 1e-12


@C5
class TestOracleSubstitution:
    def test_random_predictions(self):
        for pred, gt in random_pairs(100, seed=6):
            before, after = oracle_mean_substitution(pred, gt)
            assert abs(after - np.sqrt(si_error(pred, gt))) <= 1e-10
            assert after <= before

    def test_trained_model(self, run):
        h, w = run["spec"].output_height, run["spec"].output_width
        gts = [downsample_nearest(s.depth, h, w) for s in run["test"]]
        for fine in (None, run["fine"]):
            logs = NetworkPredictor(run["coarse"], fine, run["manifest"].rgb_mean).predict_log(run["test"])
            preds = [DepthMap.dense(np.exp(p)) for p in logs]
            for p, g in zip(preds, gts):
                b, a = oracle_mean_substitution(p, g)
                assert abs(a - np.sqrt(si_error(p, g))) <= 1e-10 and a <= b
            before, after = oracle_mean_substitution(preds, gts)
            assert abs(after - evaluate(preds, gts).si_rmse_log) <= 1e-10
            assert after <= before
            if fine is None:
                assert before - after > 0


@C6
class TestMaskInsensitivity:
    @pytest.mark.parametrize("garbage", [np.nan, np.inf, -5.0, 0.0, 1e300])
    def test_no_output_bit_changes(self, garbage):
        rng = np.random.default_rng(8)
        for _ in range(20):
            pred, gt = random_masked_pair(rng, 12, 16)
            pmask = rng.random(pred.shape) > 0.1
            pmask[gt.mask.nonzero()[0][0], gt.mask.nonzero()[1][0]] = True
            pred = DepthMap(np.where(pmask, pred.depth, 0.0), pmask)
            dirty_pred = DepthMap(np.where(pmask, pred.depth, garbage), pmask)
            dirty_gt = DepthMap(np.where(gt.mask, gt.depth, garbage), gt.mask)
            joint = pmask & gt.mask
            gt_j = DepthMap(np.where(joint, gt.depth, 0.0), joint)
            dirty_gt_j = DepthMap(np.where(joint, gt.depth, garbage), joint)
            with np.errstate(all="ignore"):
                outs = [
                    (si_error(pred, gt), si_error(dirty_pred, dirty_gt)),
                    (si_error_explicit(pred, gt), si_error_explicit(dirty_pred, dirty_gt)),
                    (si_error_pairwise(pred, gt), si_error_pairwise(dirty_pred, dirty_gt)),
                    (evaluate(pred, gt), evaluate(dirty_pred, dirty_gt)),
                    (image_terms(pred, gt), image_terms(dirty_pred, dirty_gt)),
                    (oracle_mean_substitution(pred, gt), oracle_mean_substitution(dirty_pred, dirty_gt)),
                ]
                for lam in (0.0, 0.5, 1.0):
                    clean = training_loss(pred.log_depth(), gt_j, lam)
                    dirty_log = np.where(joint, pred.log_depth(), garbage)
                    dirty = training_loss(dirty_log, dirty_gt_j, lam)
                    outs.append((clean[0], dirty[0]))
                    assert clean[1].tobytes() == dirty[1].tobytes()
                    y = np.where(gt.mask, gt.log_depth(), garbage)[None]
                    a = training_loss_arrays(pred.log_depth()[None], gt.log_depth()[None], gt.mask[None], lam)
                    b = training_loss_arrays(np.where(gt.mask, pred.log_depth(), garbage)[None], y,
                                             gt.mask[None], lam)
                    outs.append((a[0], b[0]))
                    assert a[1].tobytes() == b[1].tobytes()
            for clean, dirty in outs:
                assert repr(clean) == repr(dirty)


# ---------------------------------------------------------------------------
# 7-8: desk-scale two-stage training
# ---------------------------------------------------------------------------

@C7
class TestDeskTraining:
    def si(self, run, method):
        return float(run["table"][method]["si_rmse_log"])

    def test_coarse_beats_mean_baseline_by_20_percent(self, run):
        mean, coarse = self.si(run, "mean"), self.si(run, "coarse")
        print(f"si_rmse_log mean {mean:.4f} coarse {coarse:.4f} ({1 - coarse / mean:.1%} better)")
        assert coarse <= 0.8 * mean

    def test_fine_not_worse_than_coarse(self, run):
        coarse, fine = self.si(run, "coarse"), self.si(run, "coarse+fine")
        print(f"si_rmse_log coarse {coarse:.4f} coarse+fine {fine:.4f}")
        assert fine <= coarse

    def test_fine_increases_edge_alignment(self, run):
        h, w = run["spec"].output_height, run["spec"].output_width
        gts = [downsample_nearest(s.depth, h, w) for s in run["test"]]
        mean = run["manifest"].rgb_mean
        e_coarse = edge_alignment(NetworkPredictor(run["coarse"], None, mean).predict_log(run["test"]), gts)
        e_fine = edge_alignment(NetworkPredictor(run["coarse"], run["fine"], mean).predict_log(run["test"]), gts)
        print(f"edge alignment coarse {e_coarse:.4f} coarse+fine {e_fine:.4f}")
        assert e_fine - e_coarse >= EDGE_MARGIN

    def test_within_budget(self, run):
        print(f"generate + train + compare: {run['elapsed']:.0f} s")
        assert run["elapsed"] <= TRAIN_BUDGET_S


@C8
class TestFrozenCoarse:
    def test_coarse_bytes_identical_after_phase_two(self, run):
        _, after_phase1, _ = load_checkpoint(run["root"] / "train/coarse.ckpt")
        assert [a.tobytes() for a in after_phase1.state()] == [a.tobytes() for a in run["coarse"].state()]
        # and the fine stack did train
        _, _, fine_before = load_checkpoint(run["root"] / "train/coarse.ckpt")
        assert [a.tobytes() for a in fine_before.state()] != [a.tobytes() for a in run["fine"].state()]


# ---------------------------------------------------------------------------
# 9: augmentation
# ---------------------------------------------------------------------------

@C9
class TestAugmentationGeometry:
    @pytest.mark.parametrize("s", [1.0, 1.1, 1.25, 1.37, 1.5])
    def test_scale_divides_constant_depth_exactly(self, s):
        for depth in (0.7, 2.0, 3.0, 9.5):
            sample = Sample("c", np.full((48, 64, 3), 0.4), DepthMap.dense(np.full((48, 64), depth)))
            out = apply_draw(sample, Draw(scale=s, top=1, left=2), 40, 56)
            assert out.depth.mask.all()
            assert np.all(out.depth.depth == depth / s)

    def test_double_flip_identity_on_crop(self):
        frames = render_scene_frames(1, 3, seed=4, width=64, height=48)
        rng = np.random.default_rng(0)
        params = AugmentParams.nyu(40, 56)
        for s in frames:
            crop = augment(s, params, rng)
            twice = apply_draw(apply_draw(crop, Draw(flip=True), 40, 56), Draw(flip=True), 40, 56)
            assert twice.rgb.tobytes() == crop.rgb.tobytes()
            assert twice.depth == crop.depth

    def test_rotation_off_never_rotates(self):
        params = AugmentParams.kitti(40, 56)
        rng = np.random.default_rng(2)
        assert all(draw_params(params, 48, 64, rng).angle_deg == 0.0 for _ in range(2000))
        s = render_scene_frames(2, 1, seed=4, width=64, height=48)[0]
        for k in range(20):
            draw = draw_params(params, 48, 64, np.random.default_rng(k))
            out = augment(s, params, np.random.default_rng(k))
            assert draw.angle_deg == 0.0
            unrotated = apply_draw(s, draw, 40, 56)
            assert out.rgb.tobytes() == unrotated.rgb.tobytes() and out.depth == unrotated.depth


# ---------------------------------------------------------------------------
# 10: determinism of CLI runs
# ---------------------------------------------------------------------------

@C10
class TestDeterminism:
    def test_gen_data_repeatable(self, run, tmp_path):
        assert main(["gen-data", "--scenes", "20", "--frames", "4", "--width", "64", "--height", "48",
                     "--seed", "7", "--out", str(tmp_path)]) == 0
        src = run["root"] / "data"
        for f in sorted((tmp_path / "depth").iterdir()):
            assert f.read_bytes() == (src / "depth" / f.name).read_bytes()
            rgb = f.name.replace(".pgm", ".ppm")
            assert (tmp_path / "rgb" / rgb).read_bytes() == (src / "rgb" / rgb).read_bytes()

    def test_train_repeatable_across_workers(self, run, tmp_path):
        outs = []
        for workers in ("1", "3"):
            out = tmp_path / f"w{workers}"
            assert main(["train", "--config", str(DESK_CONFIG), "--train", str(run["root"] / "data/train.tsv"),
                         "--coarse-samples", "320", "--fine-samples", "160", "--seed", "7",
                         "--workers", workers, "--out", str(out)]) == 0
            outs.append(out)
        for name in ("coarse.ckpt", "model.ckpt", "losses.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_evaluation_outputs_repeatable_across_workers(self, run, tmp_path):
        ckpt, test, train = (str(run["root"] / p) for p in ("train/model.ckpt", "data/test.tsv", "data/train.tsv"))
        for workers in ("1", "4"):
            assert main(["evaluate", "--checkpoint", ckpt, "--manifest", test, "--workers", workers,
                         "--out", str(tmp_path / f"e{workers}")]) == 0
            assert main(["compare", "--checkpoint", ckpt, "--manifest", test, "--train", train,
                         "--workers", workers, "--out", str(tmp_path / f"c{workers}")]) == 0
            assert main(["predict", "--checkpoint", ckpt, "--manifest", test, "--workers", workers,
                         "--out", str(tmp_path / f"p{workers}")]) == 0
        for name in ("report.csv", "images.csv"):
            assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e4" / name).read_bytes()
        assert (tmp_path / "c1/comparison.csv").read_bytes() == (tmp_path / "c4/comparison.csv").read_bytes()
        assert (tmp_path / "c1/comparison.csv").read_bytes() == (run["root"] / "compare/comparison.csv").read_bytes()
        for f in (tmp_path / "p1/depth").iterdir():
            assert f.read_bytes() == (tmp_path / "p4/depth" / f.name).read_bytes()


# ---------------------------------------------------------------------------
# evaluation-harness behaviour on the trained model (supplementary)
# ---------------------------------------------------------------------------

class TestHarnessOnTrainedModel:
    def test_method_ordering(self, run):
        si = [float(run["table"][m]["si_rmse_log"]) for m in ("mean", "coarse", "coarse+fine")]
        assert si[0] >= si[1] >= si[2]

    def test_baseline_resolution_choice(self, run):
        h, w = run["spec"].output_height, run["spec"].output_width
        train, _ = load_samples(Manifest.read(run["root"] / "data/train.tsv"), drop_extremes=True)
        from depthstack.data import mean_depth_baseline
        base = MapPredictor(mean_depth_baseline([downsample_nearest(s.depth, h, w) for s in train]), 48, 64)
        up = evaluate_dataset(base, run["test"]).report.rmse_log
        down = evaluate_dataset(base, run["test"], EvalProtocol("downsample")).report.rmse_log
        assert abs(up - down) / up < 0.005

    def test_model_resolution_choice(self, run):
        # a trained model's blocky upsampling costs more than the smooth baseline;
        # this tolerance was re-derived from the pinned run (observed 0.94%)
        pred = NetworkPredictor(run["coarse"], None, run["manifest"].rgb_mean)
        up = evaluate_dataset(pred, run["test"]).report.rmse_log
        down = evaluate_dataset(pred, run["test"], EvalProtocol("downsample")).report.rmse_log
        assert abs(up - down) / up < 0.015
