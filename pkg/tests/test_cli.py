"""Command-line entry point: exit codes, artifacts and reproducibility."""

import csv

import pytest

from depthstack.cli import main

SMALL_CFG = """
[spec]
input_width = 32
input_height = 24

[train]
batch_size = 4
lr = 1
coarse_samples = 24
fine_samples = 8
"""


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--scenes", "5", "--frames", "2", "--width", "36", "--height", "28",
                 "--seed", "3", "--out", str(root / "data")]) == 0
    (root / "small.cfg").write_text(SMALL_CFG)
    return root


@pytest.fixture(scope="module")
def trained(dataset):
    out = dataset / "train"
    assert main(["train", "--config", str(dataset / "small.cfg"), "--train", str(dataset / "data/train.tsv"),
                 "--out", str(out)]) == 0
    return out / "model.ckpt"


class TestExitCodes:
    def test_selfcheck_passes(self, capsys):
        assert main(["selfcheck"]) == 0
        text = capsys.readouterr().out
        assert "max gradcheck error" in text and "loss-form residual" in text

    def test_missing_manifest_is_data_error(self, tmp_path, capsys, trained):
        missing = tmp_path / "absent.tsv"
        code = main(["evaluate", "--checkpoint", str(trained), "--manifest", str(missing), "--out", str(tmp_path)])
        assert code == 2
        assert str(missing) in capsys.readouterr().err

    def test_missing_checkpoint_is_data_error(self, dataset, tmp_path):
        assert main(["evaluate", "--checkpoint", str(tmp_path / "x.ckpt"),
                     "--manifest", str(dataset / "data/test.tsv"), "--out", str(tmp_path)]) == 2

    def test_corrupt_checkpoint_is_data_error(self, dataset, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"garbage")
        assert main(["dump-weights", "--checkpoint", str(tmp_path / "bad.ckpt"), "--out", str(tmp_path)]) == 2

    @pytest.mark.parametrize("argv", [[], ["frobnicate"], ["train"], ["gen-data", "--scenes", "many"]])
    def test_usage_errors(self, argv, capsys):
        assert main(argv) == 1

    def test_bad_config_is_usage_error(self, dataset, tmp_path):
        (tmp_path / "bad.cfg").write_text("[train]\nepochs = 4\n")
        assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--train", str(dataset / "data/train.tsv"),
                     "--out", str(tmp_path)]) == 1
        assert main(["train", "--config", str(tmp_path / "none.cfg"), "--train", str(dataset / "data/train.tsv"),
                     "--out", str(tmp_path)]) == 1

    def test_undersized_frames_are_data_error(self, dataset, tmp_path, capsys):
        # default desk spec wants 76x57 frames
        assert main(["train", "--train", str(dataset / "data/train.tsv"), "--out", str(tmp_path)]) == 2
        assert "input_width" in capsys.readouterr().err

    def test_divergence_is_numeric_failure(self, dataset, tmp_path):
        with pytest.warns(RuntimeWarning):
            code = main(["train", "--config", str(dataset / "small.cfg"), "--lr", "1e12",
                         "--train", str(dataset / "data/train.tsv"), "--out", str(tmp_path)])
        assert code == 3


class TestArtifacts:
    def test_run_txt(self, trained):
        text = (trained.parent / "run.txt").read_text()
        assert "command = train" in text and "seed = 0" in text
        assert "config_sha256 = " in text and "[train]" in text and "numpy = " in text

    def test_evaluate_outputs(self, dataset, trained, tmp_path):
        assert main(["evaluate", "--checkpoint", str(trained), "--manifest", str(dataset / "data/test.tsv"),
                     "--out", str(tmp_path), "--dump", "1"]) == 0
        report = list(csv.reader(open(tmp_path / "report.csv")))
        assert report[0][:3] == ["delta1", "delta2", "delta3"] and len(report) == 2
        images = list(csv.reader(open(tmp_path / "images.csv")))
        assert len(images) == 1 + int(report[1][-2])
        names = sorted(p.name for p in (tmp_path / "gallery").iterdir())
        assert [n.split("_")[-2] + "_" + n.split("_")[-1] for n in names] == \
            ["a_input.pgm", "b_coarse.pgm", "c_fine.pgm", "d_gt.pgm"]

    def test_compare_outputs(self, dataset, trained, tmp_path):
        assert main(["compare", "--checkpoint", str(trained), "--manifest", str(dataset / "data/test.tsv"),
                     "--train", str(dataset / "data/train.tsv"), "--scaled", "2", "--out", str(tmp_path)]) == 0
        rows = list(csv.reader(open(tmp_path / "comparison.csv")))
        assert [r[0] for r in rows[1:]] == ["mean", "coarse", "coarse+fine", "coarse+finex2"]
        si = rows[0].index("si_rmse_log")
        assert abs(float(rows[3][si]) - float(rows[4][si])) <= 1e-15

    def test_predict_and_dump_weights(self, dataset, trained, tmp_path):
        assert main(["predict", "--checkpoint", str(trained), "--manifest", str(dataset / "data/test.tsv"),
                     "--stage", "coarse", "--out", str(tmp_path / "p")]) == 0
        assert len(list((tmp_path / "p/depth").glob("*.pgm"))) == 2
        assert main(["dump-weights", "--checkpoint", str(trained), "--top", "3", "--out", str(tmp_path / "w")]) == 0
        assert sorted(p.name for p in (tmp_path / "w").glob("*.pgm")) == \
            ["template_000.pgm", "template_001.pgm", "template_002.pgm"]

    def test_augment_preview(self, dataset, tmp_path):
        assert main(["augment-preview", "--config", str(dataset / "small.cfg"), "--count", "2",
                     "--manifest", str(dataset / "data/train.tsv"), "--out", str(tmp_path)]) == 0
        assert len(list(tmp_path.glob("*_aug.ppm"))) == 2 and len(list(tmp_path.glob("*_aug.pgm"))) == 2

    def test_default_out_root_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DEPTHSTACK_OUT", str(tmp_path))
        assert main(["gen-data", "--scenes", "1", "--frames", "1", "--width", "16", "--height", "12"]) == 0
        assert (tmp_path / "gen-data" / "train.tsv").is_file()


class TestReproducible:
    def test_train_and_evaluate_byte_identical_across_workers(self, dataset, trained, tmp_path):
        out = tmp_path / "again"
        assert main(["train", "--config", str(dataset / "small.cfg"), "--train", str(dataset / "data/train.tsv"),
                     "--workers", "3", "--out", str(out)]) == 0
        for name in ("model.ckpt", "coarse.ckpt", "losses.csv"):
            assert (out / name).read_bytes() == (trained.parent / name).read_bytes()
        csvs = []
        for workers in ("1", "3"):
            d = tmp_path / f"eval{workers}"
            assert main(["evaluate", "--checkpoint", str(out / "model.ckpt"), "--workers", workers,
                         "--manifest", str(dataset / "data/test.tsv"), "--out", str(d)]) == 0
            csvs.append(((d / "report.csv").read_bytes(), (d / "images.csv").read_bytes()))
        assert csvs[0] == csvs[1]

    def test_seed_changes_checkpoint(self, dataset, trained, tmp_path):
        assert main(["train", "--config", str(dataset / "small.cfg"), "--train", str(dataset / "data/train.tsv"),
                     "--seed", "1", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "model.ckpt").read_bytes() != trained.read_bytes()
