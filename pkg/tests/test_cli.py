import json
import subprocess
import sys

import numpy as np
import pytest

from echodiff.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from echodiff.data import load_dataset
from echodiff.models import load_checkpoint

SMALL = ["--set", "side=16", "--set", "epochs=1", "--set", "batch_size=4"]


@pytest.fixture(scope="module")
def phantoms(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["phantom", "--out", str(root / "a"), "--n", "10", "--side", "16",
                 "--style", "a", "--seed", "1"]) == EXIT_OK
    assert main(["phantom", "--out", str(root / "b"), "--n", "4", "--side", "16",
                 "--style", "b", "--seed", "2"]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def trained(phantoms):
    out = phantoms / "run"
    assert main(["train", "--data", str(phantoms / "a"), "--out", str(out)] + SMALL) == EXIT_OK
    return out


class TestPhantom:
    def test_count_and_determinism(self, phantoms, tmp_path):
        ds = load_dataset(phantoms / "a")
        assert len(ds) == 10 and ds.domain_tag == "phantom-a"
        main(["phantom", "--out", str(tmp_path / "x"), "--n", "10", "--side", "16",
              "--style", "a", "--seed", "1"])
        a = sorted(p.relative_to(phantoms / "a") for p in (phantoms / "a").rglob("*.png"))
        b = sorted(p.relative_to(tmp_path / "x") for p in (tmp_path / "x").rglob("*.png"))
        assert a == b
        for rel in a:
            assert (phantoms / "a" / rel).read_bytes() == (tmp_path / "x" / rel).read_bytes()

    def test_bad_style(self, tmp_path, capsys):
        assert main(["phantom", "--out", str(tmp_path), "--style", "z"]) == EXIT_USAGE
        assert "a, b, c" in capsys.readouterr().err

    def test_refuses_non_empty_out(self, phantoms, tmp_path):
        assert main(["phantom", "--out", str(phantoms / "a"), "--n", "2"]) == EXIT_USAGE
        assert len(load_dataset(phantoms / "a")) == 10
        target = tmp_path / "o"
        main(["phantom", "--out", str(target), "--n", "3", "--side", "16"])
        assert main(["phantom", "--out", str(target), "--n", "2", "--side", "16",
                     "--force"]) == EXIT_OK
        assert len(load_dataset(target)) == 2
        assert len(list((target / "images").iterdir())) == 2

    def test_unknown_flag_is_usage(self, tmp_path):
        assert main(["phantom", "--out", str(tmp_path), "--bogus"]) == EXIT_USAGE


class TestTrain:
    def test_outputs(self, trained):
        ck = load_checkpoint(trained / "checkpoint.echodiff")
        assert ck.epoch == 1 and ck.step == 3
        assert (trained / "config.txt").read_text().startswith("seed = 0\n")
        steps = (trained / "steps.log").read_text()
        assert steps.count("\nstep step=") + steps.startswith("step step=") == 3

    def test_zero_epochs(self, phantoms, tmp_path):
        out = tmp_path / "z"
        assert main(["train", "--data", str(phantoms / "a"), "--out", str(out),
                     "--set", "side=16", "--set", "epochs=0"]) == EXIT_OK
        assert load_checkpoint(out / "checkpoint.echodiff").step == 0
        assert "step step=" not in (out / "steps.log").read_text()

    def test_deterministic(self, phantoms, trained, tmp_path):
        out = tmp_path / "again"
        main(["train", "--data", str(phantoms / "a"), "--out", str(out)] + SMALL)
        for name in ("checkpoint.echodiff", "steps.log", "config.txt"):
            assert (out / name).read_bytes() == (trained / name).read_bytes()

    def test_config_file_errors(self, phantoms, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("seed = 1\nlamda_rec = 3\n")
        code = main(["train", "--data", str(phantoms / "a"), "--out", str(tmp_path / "o"),
                     "--config", str(cfg)])
        assert code == EXIT_USAGE
        assert "line 2" in capsys.readouterr().err

    def test_missing_data_marks_failure(self, tmp_path):
        out = tmp_path / "o"
        out.mkdir()
        code = main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(out)] + SMALL)
        assert code == EXIT_DATA
        assert (out / "FAILED").exists()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_exits_numeric(self, phantoms, tmp_path):
        out = tmp_path / "nan"
        code = main(["train", "--data", str(phantoms / "a"), "--out", str(out),
                     "--set", "lr_g=1e30", "--set", "lr_d=1e30", "--set", "epochs=3"] + SMALL[:2])
        if code == EXIT_OK:
            pytest.skip("huge learning rate did not overflow on this platform")
        assert code == EXIT_NUMERIC
        assert (out / "FAILED").read_text().startswith("NonFiniteLossError")


@pytest.fixture(scope="module")
def translated(phantoms, trained):
    out = phantoms / "tb"
    assert main(["translate", "--checkpoint", str(trained), "--data", str(phantoms / "b"),
                 "--out", str(out), "--seed", "5"]) == EXIT_OK
    return out


class TestTranslateEvaluate:
    def test_ids_and_masks_kept(self, phantoms, translated):
        src, out = load_dataset(phantoms / "b"), load_dataset(translated)
        assert out.ids == src.ids and out.domain_tag == "phantom-b-translated"
        for a, b in zip(src, out):
            np.testing.assert_array_equal(a.mask, b.mask)
        assert "fingerprint=" in out.provenance

    def test_deterministic(self, phantoms, trained, translated, tmp_path):
        main(["translate", "--checkpoint", str(trained / "checkpoint.echodiff"),
              "--data", str(phantoms / "b"), "--out", str(tmp_path), "--force", "--seed", "5"])
        for p in translated.rglob("*.png"):
            assert p.read_bytes() == (tmp_path / p.relative_to(translated)).read_bytes()

    def test_fingerprint_guard(self, phantoms, trained, tmp_path, capsys):
        args = ["translate", "--checkpoint", str(trained), "--data", str(phantoms / "b"),
                "--set", "lambda_rec=1"]
        assert main(args + ["--out", str(tmp_path / "x")]) == EXIT_DATA
        assert "fingerprint" in capsys.readouterr().err
        assert not (tmp_path / "x").exists()  # refused before the output is created
        assert main(args + ["--out", str(tmp_path / "y"), "--allow-mismatch"]) == EXIT_OK

    def test_evaluate_identity(self, phantoms, tmp_path):
        a = str(phantoms / "a")
        assert main(["evaluate", "--generated", a, "--reference", a, "--ground-truth", a,
                     "--out", str(tmp_path)]) == EXIT_OK
        doc = json.loads((tmp_path / "report.json").read_text())
        assert doc["fid"]["generated_vs_reference"] <= 1e-10
        assert all(r["mse"] == 0 and r["psnr_db"] is None and r["ssim"] == 1.0
                   for r in doc["rows"])
        assert (tmp_path / "report.csv").read_text().startswith("id,mse,psnr_db,ssim\n")

    def test_evaluate_translation(self, phantoms, translated, trained, tmp_path):
        assert main(["evaluate", "--generated", str(translated),
                     "--reference", str(phantoms / "a"), "--source", str(phantoms / "b"),
                     "--out", str(tmp_path)]) == EXIT_OK
        doc = json.loads((tmp_path / "report.json").read_text())
        assert set(doc["fid"]) == {"generated_vs_reference", "source_vs_reference"}
        ck = load_checkpoint(trained / "checkpoint.echodiff")
        assert doc["metadata"]["checkpoint_fingerprint"] == ck.fingerprint

    def test_evaluate_mismatched_ids(self, phantoms, tmp_path):
        code = main(["evaluate", "--generated", str(phantoms / "a"),
                     "--reference", str(phantoms / "a"), "--ground-truth", str(phantoms / "b"),
                     "--out", str(tmp_path / "e")])
        assert code == EXIT_DATA
        assert (tmp_path / "e" / "FAILED").exists()


def test_help_lists_defaults():
    res = subprocess.run([sys.executable, "-m", "echodiff.cli", "train", "--help"],
                         capture_output=True, text=True, check=True)
    assert "lambda_rec = 50.0" in res.stdout and "k = 250" in res.stdout
    res = subprocess.run([sys.executable, "-m", "echodiff.cli", "phantom", "--help"],
                         capture_output=True, text=True, check=True)
    assert "(default: 100)" in res.stdout
