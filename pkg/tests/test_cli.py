import csv
import json

import numpy as np
import pytest
from PIL import Image

from diffkit.checkpoint import load_checkpoint
from diffkit.cli import build_parser, main
from diffkit.config import RunConfig
from support import cifar_fixture_bytes

TINY = ["--image-size", "8", "--unet-ch", "8", "--unet-ch-mult", "1,2", "--unet-attn", "1",
        "--unet-num-res-blocks", "1", "--batch-size", "4", "--num-epochs", "1", "--num-train-timesteps", "20",
        "--num-inference-steps", "5", "--num-workers", "1"]


@pytest.fixture(scope="module")
def image_folder(tmp_path_factory):
    root = tmp_path_factory.mktemp("images")
    r = np.random.default_rng(0)
    for cls, level in (("bright", 220), ("dark", 30)):
        (root / cls).mkdir()
        for i in range(4):
            px = np.clip(level + r.normal(0, 8, (8, 8, 3)), 0, 255).astype(np.uint8)
            Image.fromarray(px).save(root / cls / f"{i}.png")
    return root


@pytest.fixture(scope="module")
def trained(image_folder, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--data", str(image_folder), "--out", str(out), *TINY,
                 "--class-conditional", "true", "--num-classes", "3"])
    assert code == 0
    return out


class TestParser:
    def test_every_config_key_has_a_flag(self):
        help_text = build_parser()._subparsers._group_actions[0].choices["train"].format_help()
        for key in RunConfig.__dataclass_fields__:
            assert f"--{key.replace('_', '-')}" in help_text


class TestTrainAndSample:
    def test_train_outputs(self, trained):
        for name in ("checkpoint.dfck", "train_log.jsonl", "loss.png", "manifest.json"):
            assert (trained / name).exists()
        ckpt = load_checkpoint(trained / "checkpoint.dfck")
        assert ckpt.step == 2 and ckpt.config.class_conditional
        assert ckpt.meta["class_names"] == ["bright", "dark"]
        lines = (trained / "train_log.jsonl").read_text().splitlines()
        assert json.loads(lines[0])["step"] == 1

    def test_sample_is_reproducible_and_replayable(self, trained, tmp_path):
        args = ["sample", "--checkpoint", str(trained / "checkpoint.dfck"), "--num-images", "3",
                "--labels", "0,1,0", "--guidance-weight", "2", "--steps", "4"]
        assert main([*args, "--out", str(tmp_path / "a")]) == 0
        assert main([*args, "--out", str(tmp_path / "b")]) == 0
        assert main(["sample", "--manifest", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "c")]) == 0
        grids = [(tmp_path / d / "grid.png").read_bytes() for d in "abc"]
        assert grids[0] == grids[1] == grids[2]
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert manifest["config"]["num_inference_steps"] == 4
        assert manifest["config"]["guidance_weight"] == 2.0
        assert manifest["labels"] == [0, 1, 0] and len(manifest["config_hash"]) == 16
        assert len(list((tmp_path / "a" / "images").glob("*.png"))) == 3

    def test_seed_flag_changes_output(self, trained, tmp_path):
        base = ["sample", "--checkpoint", str(trained / "checkpoint.dfck"), "--num-images", "2", "--eta", "1"]
        main([*base, "--out", str(tmp_path / "a")])
        main([*base, "--seed", "5", "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "grid.png").read_bytes() != (tmp_path / "b" / "grid.png").read_bytes()

    def test_cifar_binary_input(self, tmp_path):
        (tmp_path / "data").mkdir()
        (tmp_path / "data" / "data_batch_1.bin").write_bytes(cifar_fixture_bytes(8)[0])
        args = ["train", "--data", str(tmp_path / "data"), "--out", str(tmp_path / "run"), *TINY,
                "--image-size", "32", "--max-steps", "1"]
        assert main(args) == 0


class TestLatentPipeline:
    def test_vae_then_latent_diffusion(self, image_folder, tmp_path):
        common = ["--image-size", "8", "--batch-size", "4", "--num-epochs", "1", "--num-workers", "1",
                  "--vae-ch", "4", "--latent-factor", "2", "--num-train-timesteps", "20", "--num-inference-steps", "5"]
        assert main(["train-vae", "--data", str(image_folder), "--out", str(tmp_path / "vae"), *common]) == 0
        assert load_checkpoint(tmp_path / "vae" / "vae.dfck").latent_scale > 0
        assert main(["train", "--data", str(image_folder), "--out", str(tmp_path / "ldm"), *common,
                     "--latent", "true", "--unet-in-ch", "4", "--unet-ch", "8", "--unet-ch-mult", "1,2",
                     "--unet-attn", "", "--unet-num-res-blocks", "1",
                     "--vae", str(tmp_path / "vae" / "vae.dfck")]) == 0
        assert (tmp_path / "ldm" / "latents.dflt").exists()
        for d in ("s1", "s2"):
            assert main(["sample", "--checkpoint", str(tmp_path / "ldm" / "checkpoint.dfck"), "--num-images", "2",
                         "--out", str(tmp_path / d)]) == 0
        img = Image.open(tmp_path / "s1" / "images" / "00000.png")
        assert img.size == (8, 8)
        assert (tmp_path / "s1" / "grid.png").read_bytes() == (tmp_path / "s2" / "grid.png").read_bytes()

    def test_latent_needs_vae(self, image_folder, tmp_path):
        assert main(["train", "--data", str(image_folder), "--out", str(tmp_path), "--image-size", "8",
                     "--latent", "true", "--unet-in-ch", "4"]) == 2


class TestEvaluate:
    def test_default_backend(self, image_folder, tmp_path, capsys):
        out = tmp_path / "m.json"
        assert main(["evaluate", "--real", str(image_folder), "--gen", str(image_folder), "--out", str(out),
                     "--splits", "2"]) == 0
        result = json.loads(out.read_text())
        assert set(result) == {"fid", "is_mean", "is_std", "n_real", "n_gen"}
        assert abs(result["fid"]) < 1e-6 and result["n_real"] == 8

    def test_trained_classifier_backend(self, image_folder, tmp_path):
        assert main(["train-classifier", "--data", str(image_folder), "--out", str(tmp_path / "clf"),
                     "--image-size", "8", "--batch-size", "4", "--num-epochs", "2", "--num-workers", "1"]) == 0
        assert main(["evaluate", "--real", str(image_folder), "--gen", str(image_folder / "dark"),
                     "--classifier", str(tmp_path / "clf" / "classifier.dfck"), "--splits", "1",
                     "--out", str(tmp_path / "m.json")]) == 0
        assert json.loads((tmp_path / "m.json").read_text())["fid"] > 0


class TestScheduleDump:
    def test_csv_and_figure(self, tmp_path):
        out, fig = tmp_path / "s.csv", tmp_path / "s.png"
        assert main(["schedule", "dump", "--num-train-timesteps", "10", "--out", str(out),
                     "--figure", str(fig), "--compare"]) == 0
        rows = list(csv.reader(out.open()))
        assert rows[0] == ["t", "beta", "alpha", "alpha_cumprod"] and len(rows) == 11
        assert float(rows[1][1]) == 0.0002 and float(rows[-1][1]) == 0.02
        assert fig.read_bytes()[:4] == b"\x89PNG"

    def test_config_file_and_env(self, tmp_path, capsys, monkeypatch):
        (tmp_path / "c.cfg").write_text("beta_schedule = cosine\nnum_train_timesteps = 4\n")
        monkeypatch.setenv("DIFFKIT_SEED", "3")
        assert main(["schedule", "dump", "--config", str(tmp_path / "c.cfg")]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 5


class TestExitCodes:
    def test_config_error(self, capsys):
        assert main(["schedule", "dump", "--beta-schedule", "sigmoid"]) == 2
        assert "beta_schedule" in capsys.readouterr().err

    def test_missing_paths(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2
        assert main(["sample", "--checkpoint", str(tmp_path / "none.dfck"), "--out", str(tmp_path / "o")]) == 2
        assert main(["schedule", "dump", "--config", str(tmp_path / "none.cfg")]) == 2

    def test_data_error(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"\x00" * 100)
        assert main(["train", "--data", str(tmp_path / "bad.bin"), "--out", str(tmp_path / "o")]) == 3
        (tmp_path / "bad.dfck").write_bytes(b"DFCK\x01\x00")
        assert main(["sample", "--checkpoint", str(tmp_path / "bad.dfck"), "--out", str(tmp_path / "o")]) == 3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_abort(self, image_folder, tmp_path):
        code = main(["train", "--data", str(image_folder), "--out", str(tmp_path), *TINY, "--learning-rate", "1e30",
                     "--num-epochs", "5"])
        assert code == 4

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["train"])
        assert exc.value.code == 2
