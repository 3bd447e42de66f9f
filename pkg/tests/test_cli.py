import json

import numpy as np
import pytest

from asense import cli
from asense.data import read_csv
from asense.models import file_sha256, load_checkpoint, net_bytes


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    common = ["--train-images", "64", "--batch-size", "32", "--epochs", "1", "--seed", "7"]
    assert cli.main(["train-vae", *common, "--out", str(root / "vae")]) == 0
    assert cli.main(["train-partial", *common, "--checkpoint", str(root / "vae" / "vae.ckpt"),
                     "--mask-seed", "3", "--out", str(root / "par")]) == 0
    return root


def bundle_path(trained):
    return str(trained / "par" / "bundle.ckpt")


class TestTraining:
    def test_outputs_and_manifest(self, trained):
        man = json.loads((trained / "vae" / "manifest.json").read_text())
        assert man["command"] == "train-vae" and man["seed"] == 7
        assert set(man["outputs"]) == {"checkpoint", "report"}
        rows = read_csv(trained / "vae" / "vae_report.csv")
        assert list(rows[0]) == ["epoch", "mean_loss", "mean_kl", "mean_recon", "wall_seconds"]
        assert json.loads((trained / "par" / "manifest.json").read_text())["checkpoint_sha256"] == \
            file_sha256(trained / "vae" / "vae.ckpt")

    def test_repeat_gives_same_checkpoint(self, trained, tmp_path):
        args = ["train-vae", "--train-images", "64", "--batch-size", "32", "--epochs", "1", "--seed", "7"]
        assert cli.main([*args, "--out", str(tmp_path)]) == 0
        assert file_sha256(tmp_path / "vae.ckpt") == file_sha256(trained / "vae" / "vae.ckpt")

    def test_partial_keeps_decoder_bytes(self, trained):
        a = load_checkpoint(trained / "vae" / "vae.ckpt")
        b = load_checkpoint(trained / "par" / "bundle.ckpt")
        assert net_bytes(a.decoder_params) == net_bytes(b.decoder_params)
        assert net_bytes(a.encoder_params) == net_bytes(b.encoder_params)

    def test_zero_epochs_rejected(self, tmp_path, capsys):
        assert cli.main(["train-vae", "--epochs", "0", "--out", str(tmp_path)]) == cli.EXIT_CONFIG
        assert "epochs" in capsys.readouterr().err
        assert not (tmp_path / "vae.ckpt").exists()

    def test_missing_fmnist_files(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("ASENSE_DATA_DIR", raising=False)
        assert cli.main(["train-vae", "--data", "fmnist", "--out", str(tmp_path)]) == cli.EXIT_DATA
        monkeypatch.setenv("ASENSE_DATA_DIR", str(tmp_path))
        assert cli.main(["train-vae", "--data", "fmnist", "--out", str(tmp_path)]) == cli.EXIT_DATA
        assert "train-images-idx3-ubyte.gz" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path):
        assert cli.main(["train-partial", "--checkpoint", str(tmp_path / "nope"), "--out", str(tmp_path)]) \
            == cli.EXIT_DATA


class TestRun:
    def test_run_writes_trajectory_and_maps(self, trained, tmp_path):
        out = tmp_path / "run"
        code = cli.main(["run", "--checkpoint", bundle_path(trained), "--criterion", "mi", "--candidates", "3",
                         "--steps", "3", "--index", "4", "--info-maps", "--out", str(out)])
        assert code == 0
        rows = read_csv(out / "trajectory.csv")
        assert len(rows) == 3 and [int(r["step"]) for r in rows] == [1, 2, 3]
        grids = sorted((out / "info_maps").glob("*.csv"))
        assert len(grids) == 3 and len(read_csv(grids[0])) == 7
        man = json.loads((out / "manifest.json").read_text())
        assert man["checkpoint_sha256"] == file_sha256(bundle_path(trained))
        assert man["config"]["criterion"] == "mi"

    def test_ho_full_noiseless(self, trained, tmp_path):
        code = cli.main(["run", "--checkpoint", bundle_path(trained), "--criterion", "ho", "--steps", "784",
                         "--noise", "0", "--candidates", "1", "--posterior-update", "pvae", "--out", str(tmp_path)])
        assert code == 0
        assert float(read_csv(tmp_path / "trajectory.csv")[-1]["mse"]) < 1e-10

    def test_image_file_target(self, trained, tmp_path):
        np.save(tmp_path / "t.npy", np.full((28, 28), 0.3))
        assert cli.main(["run", "--checkpoint", bundle_path(trained), "--image", str(tmp_path / "t.npy"),
                         "--steps", "1", "--candidates", "1", "--out", str(tmp_path / "o")]) == 0
        np.save(tmp_path / "bad.npy", np.zeros((5, 5)))
        assert cli.main(["run", "--checkpoint", bundle_path(trained), "--image", str(tmp_path / "bad.npy"),
                         "--steps", "1", "--out", str(tmp_path / "o2")]) == cli.EXIT_DATA

    @pytest.mark.parametrize("flags", [["--criterion", "entropy"], ["--candidates", "0"], ["--steps", "785"],
                                       ["--candidate-posterior", "svi:0"], ["--noise", "-1"]])
    def test_config_errors_before_work(self, tmp_path, flags, capsys):
        # checkpoint does not exist: validation must fail first with a config code
        code = cli.main(["run", "--checkpoint", str(tmp_path / "missing"), *flags, "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_CONFIG
        if flags[0] == "--criterion":
            assert "{qp, mi, ho}" in capsys.readouterr().err

    def test_unknown_flag(self, tmp_path):
        assert cli.main(["run", "--bogus", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


class TestSweeps:
    def test_compare_svi_schema(self, trained, tmp_path):
        code = cli.main(["compare-svi", "--checkpoint", bundle_path(trained), "--steps", "2", "--candidates", "2",
                         "--seeds", "1", "--methods", "pvae,svi@2", "--out", str(tmp_path)])
        assert code == 0
        rows = read_csv(tmp_path / "compare_svi.csv")
        assert len(rows) == 2
        assert list(rows[0]) == ["step", "pvae_mse", "pvae_ssim", "svi@2_mse", "svi@2_ssim"]

    def test_compare_criteria_schema(self, trained, tmp_path):
        code = cli.main(["compare-criteria", "--checkpoint", bundle_path(trained), "--steps", "2", "--seeds", "1",
                         "--candidate-counts", "1,2", "--out", str(tmp_path)])
        assert code == 0
        rows = read_csv(tmp_path / "compare_criteria.csv")
        assert list(rows[0]) == ["step", "criterion", "candidates", "mean_ssim", "mean_mse"]
        assert len(rows) == 3 * 2 * 2
        assert {(r["criterion"], r["candidates"]) for r in rows} == {(c, n) for c in ("qp", "mi", "ho")
                                                                    for n in ("1", "2")}

    def test_sweep_validation(self, trained, tmp_path):
        base = ["--checkpoint", bundle_path(trained), "--out", str(tmp_path)]
        assert cli.main(["compare-svi", *base, "--methods", "pvae,svi"]) == cli.EXIT_CONFIG
        assert cli.main(["compare-criteria", *base, "--criteria", "qp,xx"]) == cli.EXIT_CONFIG
        assert cli.main(["compare-criteria", *base, "--candidate-counts", "0"]) == cli.EXIT_CONFIG
        assert cli.main(["compare-svi", *base, "--workers", "0"]) == cli.EXIT_CONFIG

    def test_export_latents(self, trained, tmp_path):
        assert cli.main(["export-latents", "--checkpoint", bundle_path(trained), "--count", "12",
                         "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "latents.csv")
        assert len(rows) == 12 and list(rows[0])[:2] == ["label", "mu_0"] and len(rows[0]) == 17


class TestReplay:
    def test_run_replay_byte_identical(self, trained, tmp_path):
        out = tmp_path / "a"
        assert cli.main(["run", "--checkpoint", bundle_path(trained), "--steps", "3", "--candidates", "3",
                         "--seed", "11", "--info-maps", "--out", str(out)]) == 0
        assert cli.main(["replay", str(out / "manifest.json"), "--out", str(tmp_path / "b")]) == 0
        for f in out.rglob("*.csv"):
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(out)).read_bytes()

    def test_replay_rejects_changed_checkpoint(self, trained, tmp_path):
        import shutil
        ck = tmp_path / "copy.ckpt"
        shutil.copy(bundle_path(trained), ck)
        out = tmp_path / "a"
        assert cli.main(["run", "--checkpoint", str(ck), "--steps", "1", "--candidates", "1", "--out", str(out)]) == 0
        ck.write_bytes(ck.read_bytes() + b"x")
        assert cli.main(["replay", str(out / "manifest.json")]) == cli.EXIT_DATA

    def test_replay_garbage(self, tmp_path):
        (tmp_path / "m.json").write_text("{}")
        assert cli.main(["replay", str(tmp_path / "m.json")]) == cli.EXIT_DATA
