"""Command-line behavior: config resolution, artifacts, exit codes."""

import warnings

import numpy as np
import pytest

from promptforge.cli import main, parse_config_file, write_ppm
from promptforge.errors import ConfigError
from promptforge.pipeline import BaselineConfig, init_params, save_baseline, save_params

# small enough to train in well under a second, shift within the limit at 16px
DATA_ARGS = [
    "--hw", "16", "--classes", "3",
    "--n-train", "48", "--n-val", "16", "--n-test", "16",
    "--shift-tx", "2", "--shift-ty", "1",
    "--shift-hue", "0.8", "--shift-background", "-0.1",
]


def run_train(out, extra=()):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        code = main(["train", *DATA_ARGS, "--epochs", "2", "--batch-size", "16",
                     "--out", str(out), *extra])
    assert code == 0
    runs = list(out.glob("train-*"))
    assert len(runs) == 1
    return runs[0]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tiny end-to-end run shared by every test that only reads it."""
    return run_train(tmp_path_factory.mktemp("cli-train"))


class TestConfigFile:
    def test_parses_pairs_skips_comments(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\n\nepochs = 3\nseed=9\n")
        assert parse_config_file(p) == {"epochs": "3", "seed": "9"}

    def test_malformed_line_names_location(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("epochs 3\n")
        with pytest.raises(ConfigError, match=r"c\.cfg:1"):
            parse_config_file(p)

    def test_unknown_key_exits_2_and_names_it(self, tmp_path, capsys):
        p = tmp_path / "c.cfg"
        p.write_text("bogus=1\n")
        assert main(["train", "--config", str(p)]) == 2
        assert "bogus" in capsys.readouterr().err

    def test_flag_overrides_file(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("epochs=1\n")
        run = run_train(tmp_path / "out", ["--config", str(cfg), "--epochs", "2"])
        lines = (run / "metrics.csv").read_text().splitlines()
        assert len(lines) == 3  # header plus one row per epoch

    def test_env_seed_fallback_and_flag_precedence(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PROMPTFORGE_SEED", "7")
        assert main(["visualize", "--hw", "16", "--out", str(tmp_path)]) == 0
        assert list(tmp_path.glob("visualize-seed7-*"))
        assert main(["visualize", "--hw", "16", "--seed", "3",
                     "--out", str(tmp_path)]) == 0
        assert list(tmp_path.glob("visualize-seed3-*"))

    def test_bad_value_type_exits_2(self, capsys):
        assert main(["train", "--epochs", "soon"]) == 2
        assert "epochs" in capsys.readouterr().err


class TestTrain:
    def test_artifacts_and_summary(self, trained, capsys):
        for name in ("metrics.csv", "prompt.bin", "model.bin", "manifest.txt"):
            assert (trained / name).is_file()
        header = (trained / "metrics.csv").read_text().splitlines()[0]
        assert header == "epoch,lr,train_loss,train_acc,val_acc"

    def test_epochs_zero_emits_init_params(self, tmp_path, capsys):
        run = run_train(tmp_path / "out", ["--epochs", "0"])
        text = (run / "metrics.csv").read_text()
        assert text == "epoch,lr,train_loss,train_acc,val_acc\n"
        reference = tmp_path / "init.bin"
        save_params(reference, init_params(16, 16))
        assert (run / "prompt.bin").read_bytes() == reference.read_bytes()
        assert "epoch 0 val accuracy" in capsys.readouterr().out

    def test_manifest_reproduces_run_byte_for_byte(self, trained, tmp_path):
        manifest = (trained / "manifest.txt").read_text().splitlines()
        # redirect the output root, keep everything else as resolved
        rewritten = [f"out={tmp_path / 'redo'}" if line.startswith("out=")
                     else line for line in manifest]
        cfg = tmp_path / "redo.cfg"
        cfg.write_text("\n".join(rewritten) + "\n")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert main(["train", "--config", str(cfg)]) == 0
        redo = next((tmp_path / "redo").glob("train-*"))
        assert (redo / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()
        assert (redo / "prompt.bin").read_bytes() == (trained / "prompt.bin").read_bytes()


class TestEvalCorrupt:
    def eval_args(self, trained, extra=()):
        return ["eval", *DATA_ARGS, "--model", str(trained / "model.bin"), *extra]

    def test_eval_writes_csv(self, trained, tmp_path, capsys):
        args = self.eval_args(trained, ["--prompt", str(trained / "prompt.bin"),
                                        "--out", str(tmp_path)])
        assert main(args) == 0
        run = next(tmp_path.glob("eval-*"))
        lines = (run / "eval.csv").read_text().splitlines()
        assert lines[0] == "class,accuracy,count"
        assert lines[1].startswith("overall,")
        assert len(lines) == 5  # overall plus three classes
        assert "accuracy" in capsys.readouterr().out

    def test_eval_reruns_byte_identical(self, trained, tmp_path):
        csvs = []
        for sub in ("a", "b"):
            args = self.eval_args(trained, ["--out", str(tmp_path / sub)])
            assert main(args) == 0
            run = next((tmp_path / sub).glob("eval-*"))
            csvs.append((run / "eval.csv").read_bytes())
        assert csvs[0] == csvs[1]

    def test_eval_accepts_baseline_prompt_file(self, trained, tmp_path):
        p = tmp_path / "vp.bin"
        save_baseline(p, BaselineConfig("vp", np.zeros((3, 16, 16), np.float32), pad=4))
        args = self.eval_args(trained, ["--prompt", str(p), "--out", str(tmp_path)])
        assert main(args) == 0

    def test_corrupt_single_kind_rows(self, trained, tmp_path):
        args = ["corrupt", *DATA_ARGS, "--model", str(trained / "model.bin"),
                "--kinds", "gaussian-noise", "--out", str(tmp_path)]
        assert main(args) == 0
        run = next(tmp_path.glob("corrupt-*"))
        lines = (run / "corrupt.csv").read_text().splitlines()
        assert lines[0] == "kind,severity,accuracy"
        assert len(lines) == 6
        assert all(line.startswith("gaussian-noise,") for line in lines[1:])

    def test_corrupt_reruns_byte_identical(self, trained, tmp_path):
        csvs = []
        for sub in ("a", "b"):
            args = ["corrupt", *DATA_ARGS, "--model", str(trained / "model.bin"),
                    "--prompt", str(trained / "prompt.bin"),
                    "--kinds", "brightness,pixelate", "--out", str(tmp_path / sub)]
            assert main(args) == 0
            run = next((tmp_path / sub).glob("corrupt-*"))
            csvs.append((run / "corrupt.csv").read_bytes())
        assert csvs[0] == csvs[1]


class TestBench:
    def test_reports_all_variants(self, trained, tmp_path, capsys):
        args = ["bench", "--model", str(trained / "model.bin"),
                "--hw", "32", "--reps", "5", "--out", str(tmp_path)]
        assert main(args) == 0
        run = next(tmp_path.glob("bench-*"))
        lines = (run / "bench.csv").read_text().splitlines()
        assert lines[0] == "variant,prompt_s,model_s,relative"
        assert sorted(line.split(",")[0] for line in lines[1:]) == [
            "acavp", "autovp", "evp", "vp"]
        assert "relative" in capsys.readouterr().out

    def test_prompt_file_fills_matching_slot(self, trained, tmp_path):
        args = ["bench", "--model", str(trained / "model.bin"),
                "--prompt", str(trained / "prompt.bin"),
                "--hw", "16", "--reps", "5", "--out", str(tmp_path)]
        assert main(args) == 0

    def test_prompt_size_mismatch_is_runtime_error(self, trained, tmp_path, capsys):
        args = ["bench", "--model", str(trained / "model.bin"),
                "--prompt", str(trained / "prompt.bin"),
                "--hw", "32", "--reps", "5", "--out", str(tmp_path)]
        assert main(args) == 3
        assert "timing" in capsys.readouterr().err


class TestVisualize:
    def test_identity_prompt_round_trips_pixels(self, tmp_path, capsys):
        assert main(["visualize", "--hw", "16", "--prompt", "identity",
                     "--out", str(tmp_path)]) == 0
        run = next(tmp_path.glob("visualize-*"))
        original = (run / "original.ppm").read_bytes()
        assert original.startswith(b"P6\n16 16\n255\n")
        assert len(original) == 13 + 3 * 16 * 16
        assert original == (run / "final.ppm").read_bytes()
        assert "mask fraction 0.0000" in capsys.readouterr().out

    def test_init_prompt_masks_outer_border(self, tmp_path, capsys):
        assert main(["visualize", "--hw", "224", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        fraction = float(out.split("mask fraction")[1].split()[0])
        assert abs(fraction - 0.464) < 0.01
        run = next(tmp_path.glob("visualize-*"))
        for name in ("original.ppm", "warped.ppm", "mask.ppm", "final.ppm"):
            assert (run / name).stat().st_size == 15 + 3 * 224 * 224

    def test_prompt_file_renders(self, trained, tmp_path):
        assert main(["visualize", "--hw", "16",
                     "--prompt", str(trained / "prompt.bin"),
                     "--out", str(tmp_path)]) == 0

    def test_baseline_prompt_file_renders(self, tmp_path):
        p = tmp_path / "evp.bin"
        save_baseline(p, BaselineConfig("evp", np.zeros((3, 16, 16), np.float32)))
        assert main(["visualize", "--hw", "16", "--prompt", str(p),
                     "--out", str(tmp_path)]) == 0

    def test_bad_index_exits_2(self, tmp_path, capsys):
        assert main(["visualize", "--hw", "16", "--index", "99",
                     "--out", str(tmp_path)]) == 2
        assert "index" in capsys.readouterr().err

    def test_write_ppm_gray_plane(self, tmp_path):
        p = tmp_path / "g.ppm"
        write_ppm(p, np.full((4, 5), 0.5, np.float32))
        data = p.read_bytes()
        assert data.startswith(b"P6\n5 4\n255\n")
        assert set(data[11:]) == {128}


class TestEmbedCheck:
    def test_exact_match_exits_0(self, capsys):
        assert main(["embed-check", "--n", "2", "--configs", "2", "--hw", "16"]) == 0
        assert "max abs deviation 0.000e+00" in capsys.readouterr().out

    def test_perturbation_hook_exits_1(self, capsys):
        assert main(["embed-check", "--n", "2", "--configs", "1", "--hw", "16",
                     "--perturb", "0.001"]) == 1
        assert "exceeds" in capsys.readouterr().out

    def test_zero_images_exits_2(self, capsys):
        assert main(["embed-check", "--n", "0"]) == 2
        capsys.readouterr()


class TestErrorPaths:
    def test_missing_model_file_exits_2(self, capsys):
        assert main(["eval", "--model", "/no/such/model.bin"]) == 2
        assert "model" in capsys.readouterr().err

    def test_unknown_corruption_kind_exits_2(self, trained, capsys):
        assert main(["corrupt", "--model", str(trained / "model.bin"),
                     "--kinds", "sepia"]) == 2
        assert "sepia" in capsys.readouterr().err

    def test_oversized_shift_exits_2(self, capsys):
        assert main(["train", "--hw", "16", "--n-train", "48", "--n-val", "16",
                     "--n-test", "16", "--epochs", "1"]) == 2
        assert "translation" in capsys.readouterr().err

    def test_argparse_failures_exit_2(self, capsys):
        assert main([]) == 2
        assert main(["bogus-command"]) == 2
        assert main(["train", "--not-a-flag", "1"]) == 2
        capsys.readouterr()
