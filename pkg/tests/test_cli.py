"""Command-line contracts: subcommand behavior, exit codes, file outputs,
and reproducibility of reruns."""

import os

import numpy as np
import pytest
from PIL import Image

from esknet.cli import main
from esknet.network import load_checkpoint


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A synthetic dataset plus one quickly trained checkpoint, shared by the
    read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    run = root / "run"
    config = root / "fast.cfg"
    config.write_text("train.epochs = 2\ndata.synth_n = 8\ntrain.batch_size = 4\n")
    assert main(["synth", "--out", str(data), "--n", "8", "--size", "64",
                 "--seed", "5"]) == 0
    assert main(["train", "--synthetic", "--out", str(run), "--seed", "5",
                 "--config", str(config)]) == 0
    return {"root": root, "data": data, "run": run, "config": config}


class TestSynth:
    def test_writes_images_masks_manifest(self, workspace):
        data = workspace["data"]
        images = sorted(os.listdir(data / "images"))
        masks = sorted(os.listdir(data / "masks"))
        assert len(images) == len(masks) == 8
        assert (data / "manifest.txt").read_text().startswith("id\tfold")

    def test_masks_are_eight_bit_binary(self, workspace):
        mask_dir = workspace["data"] / "masks"
        arr = np.asarray(Image.open(mask_dir / sorted(os.listdir(mask_dir))[0]))
        assert arr.dtype == np.uint8
        assert set(np.unique(arr)) <= {0, 255}


class TestTrain:
    def test_outputs_exist(self, workspace):
        run = workspace["run"]
        assert (run / "checkpoint.eskn").exists()
        assert (run / "trainlog.tsv").exists()
        assert (run / "effective_config.txt").exists()
        assert (run / "folds.txt").exists()

    def test_checkpoint_is_loadable(self, workspace):
        ckpt = load_checkpoint(workspace["run"] / "checkpoint.eskn")
        assert ckpt.spec.input_size == (64, 64)

    def test_effective_config_echoes_overrides(self, workspace):
        text = (workspace["run"] / "effective_config.txt").read_text()
        assert "train.epochs = 2" in text
        assert "train.seed = 5" in text
        assert "profile = desk" in text

    def test_missing_dataset_exits_2(self, tmp_path):
        assert main(["train", "--dataset", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "o")]) == 2

    def test_no_data_source_exits_1(self, tmp_path):
        assert main(["train", "--out", str(tmp_path / "o")]) == 1

    def test_bad_config_file_exits_1(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("this line has no equals sign\n")
        assert main(["train", "--synthetic", "--config", str(bad),
                     "--out", str(tmp_path / "o")]) == 1

    def test_rerun_same_seed_identical_loss_columns(self, workspace, tmp_path):
        run2 = tmp_path / "rerun"
        assert main(["train", "--synthetic", "--out", str(run2), "--seed", "5",
                     "--config", str(workspace["config"])]) == 0

        def loss_cols(path):
            rows = [line.split("\t") for line in path.read_text().splitlines()
                    if line and not line.startswith(("#", "epoch"))]
            return [(r[0], r[1], r[2], r[3]) for r in rows]

        assert loss_cols(workspace["run"] / "trainlog.tsv") == \
            loss_cols(run2 / "trainlog.tsv")


class TestEval:
    def test_writes_report_and_curves(self, workspace, tmp_path):
        out = tmp_path / "eval"
        assert main(["eval", "--checkpoint", str(workspace["run"] / "checkpoint.eskn"),
                     "--dataset", str(workspace["data"]), "--out", str(out)]) == 0
        report = (out / "metrics_report.csv").read_text()
        assert report.startswith("id,category")
        curves = (out / "curves.csv").read_text().strip().splitlines()
        assert curves[0] == "threshold,precision,recall,tpr,fpr"
        assert len(curves) == 1 + 101      # header + n_thresholds rows

    def test_degrade_flag_changes_predictions(self, workspace, tmp_path):
        base, noisy = tmp_path / "base", tmp_path / "noisy"
        ckpt = str(workspace["run"] / "checkpoint.eskn")
        data = str(workspace["data"])
        assert main(["eval", "--checkpoint", ckpt, "--dataset", data,
                     "--out", str(base)]) == 0
        assert main(["eval", "--checkpoint", ckpt, "--dataset", data,
                     "--out", str(noisy), "--degrade"]) == 0
        assert (base / "curves.csv").read_text() != (noisy / "curves.csv").read_text()

    def test_bad_checkpoint_exits_1(self, workspace, tmp_path):
        junk = tmp_path / "junk.eskn"
        junk.write_bytes(b"not a checkpoint")
        assert main(["eval", "--checkpoint", str(junk),
                     "--dataset", str(workspace["data"]),
                     "--out", str(tmp_path / "o")]) == 1

    def test_threads_flag_keeps_results_identical(self, workspace, tmp_path):
        one, four = tmp_path / "t1", tmp_path / "t4"
        ckpt = str(workspace["run"] / "checkpoint.eskn")
        data = str(workspace["data"])
        assert main(["eval", "--checkpoint", ckpt, "--dataset", data,
                     "--out", str(one), "--threads", "1"]) == 0
        assert main(["eval", "--checkpoint", ckpt, "--dataset", data,
                     "--out", str(four), "--threads", "4"]) == 0
        assert (one / "metrics_report.csv").read_text() == \
            (four / "metrics_report.csv").read_text()


class TestPredict:
    def test_mask_matches_input_dimensions(self, workspace, tmp_path):
        out = tmp_path / "pred"
        image = workspace["data"] / "images" / "synth0000.png"
        assert main(["predict", "--checkpoint",
                     str(workspace["run"] / "checkpoint.eskn"),
                     "--out", str(out), str(image)]) == 0
        prob = np.asarray(Image.open(out / "synth0000_prob.png"))
        mask = np.asarray(Image.open(out / "synth0000_mask.png"))
        source = np.asarray(Image.open(image))
        assert prob.shape == mask.shape == source.shape
        assert prob.dtype == np.uint8
        assert set(np.unique(mask)) <= {0, 255}

    def test_all_stages_emits_exactly_five_stage_files(self, workspace, tmp_path):
        out = tmp_path / "stages"
        image = workspace["data"] / "images" / "synth0001.png"
        assert main(["predict", "--checkpoint",
                     str(workspace["run"] / "checkpoint.eskn"),
                     "--out", str(out), "--all-stages", str(image)]) == 0
        stage_files = [f for f in os.listdir(out) if "_stage" in f]
        assert len(stage_files) == 5

    def test_odd_sized_input_round_trips(self, workspace, tmp_path):
        # Inference resizes to the network extent and maps back.
        odd = tmp_path / "odd.png"
        rng = np.random.default_rng(0)
        Image.fromarray(rng.integers(0, 255, (50, 70), dtype=np.uint8),
                        "L").save(odd)
        out = tmp_path / "pred"
        assert main(["predict", "--checkpoint",
                     str(workspace["run"] / "checkpoint.eskn"),
                     "--out", str(out), str(odd)]) == 0
        assert np.asarray(Image.open(out / "odd_prob.png")).shape == (50, 70)

    def test_unreadable_image_exits_2(self, workspace, tmp_path):
        broken = tmp_path / "broken.png"
        broken.write_bytes(b"nope")
        assert main(["predict", "--checkpoint",
                     str(workspace["run"] / "checkpoint.eskn"),
                     "--out", str(tmp_path / "o"), str(broken)]) == 2


class TestVerify:
    def test_fresh_build_passes(self, capsys):
        assert main(["verify", "--seeds", "1"]) == 0
        out = capsys.readouterr().out
        assert "all" in out and "passed" in out

    def test_corrupted_gradient_exits_4_naming_the_op(self, capsys):
        assert main(["verify", "--seeds", "1", "--corrupt-op", "grad:conv2d"]) == 4
        out = capsys.readouterr().out
        assert "FAIL" in out and "grad:conv2d" in out

    def test_unknown_subcommand_exits_1(self):
        assert main(["frobnicate"]) == 1
