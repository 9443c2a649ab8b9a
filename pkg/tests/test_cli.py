import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from flowtok.cli import main

TINY_CONFIG = {
    "seed": 11,
    "dataset": {"kind": "synthetic", "n_train": 32, "n_val": 8,
                "image_side": 16, "n_classes": 4},
    "vfm": {"kind": "stub", "seed": 0, "d_vfm": 32},
    "encoder": {"image_side": 16, "patch_size": 8, "d_e": 32, "depth": 2,
                "heads": 2, "K": 16, "d_token": 16},
    "decoder": {"latent_side": 16, "patch_size": 8, "d_model": 32, "depth": 2,
                "heads": 2, "token_dim": 16, "n_tokens": 16, "repa_layer": 1},
    "train": {"total_epochs": 2, "batch_size": 8, "mf_start_epoch": 0,
              "interval_start_epoch": 1},
    "ar": {"d_ar": 32, "depth": 2, "heads": 2, "K": 16, "n_classes": 4,
           "head_hidden": 32, "head_depth": 2, "token_dim": 16,
           "diff_train_steps": 100, "diff_sample_steps": 8},
    "ar_train": {"epochs": 2, "batch_size": 8},
    "logging": {"log_every": 1, "ckpt_every_epochs": 1, "sample_every_epochs": 2},
}


def write_config(tmp_path: Path, out_dir: Path, name: str = "config.yaml",
                 **overrides) -> Path:
    cfg = json.loads(json.dumps(TINY_CONFIG))
    cfg["output_dir"] = str(out_dir)
    for key, val in overrides.items():
        if isinstance(val, dict):
            cfg.setdefault(key, {}).update(val)
        else:
            cfg[key] = val
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli-run")
    out = tmp / "run"
    cfg_path = write_config(tmp, out)
    assert main(["train-tokenizer", "--config", str(cfg_path)]) == 0
    tok_ckpt = out / "tokenizer-last.ckpt"
    assert main(["train-ar", "--config", str(cfg_path),
                 "--tokenizer", str(tok_ckpt)]) == 0
    return {"cfg_path": cfg_path, "out": out, "tok_ckpt": tok_ckpt,
            "ar_ckpt": out / "ar-last.ckpt"}


class TestTrainTokenizer:
    def test_artifacts_written(self, trained_run):
        out = trained_run["out"]
        assert (out / "tokenizer-last.ckpt").exists()
        assert (out / "tokenizer-e0001.ckpt").exists()
        assert (out / "metrics.jsonl").exists()
        assert (out / "config.yaml").exists()
        assert (out / "samples-e0002.png").exists()

    def test_log_has_per_step_records(self, trained_run):
        records = [json.loads(line) for line in
                   (trained_run["out"] / "metrics.jsonl").read_text().splitlines()]
        steps = [r for r in records if "total" in r]
        assert len(steps) == 8  # 32/8 * 2 epochs
        for r in steps:
            for key in ("l_mf", "l_rf", "l_repa", "l_repa_a", "total",
                        "lr", "grad_norm", "epoch", "step"):
                assert key in r

    def test_determinism_same_seed(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            cfg_path = write_config(tmp_path / f"cfg-{name}", out,
                                    train={"total_epochs": 1})
            main(["train-tokenizer", "--config", str(cfg_path)])
            first = json.loads((out / "metrics.jsonl").read_text().splitlines()[0])
            outs.append(first["total"])
        assert outs[0] == outs[1]

    def test_resume_continues(self, trained_run, tmp_path):
        out = tmp_path / "resumed"
        out.mkdir()
        cfg_path = write_config(tmp_path, out, train={"total_epochs": 3})
        assert main(["train-tokenizer", "--config", str(cfg_path),
                     "--resume", str(trained_run["tok_ckpt"])]) == 0
        records = [json.loads(line) for line in
                   (out / "metrics.jsonl").read_text().splitlines()]
        steps = [r for r in records if "total" in r]
        assert steps[0]["epoch"] == 2  # continues after the 2 trained epochs
        assert (out / "tokenizer-last.ckpt").exists()

    def test_staging_visible_in_log(self, tmp_path):
        out = tmp_path / "staged"
        cfg_path = write_config(tmp_path, out,
                                train={"total_epochs": 2, "mf_start_epoch": 1,
                                       "interval_start_epoch": 2})
        main(["train-tokenizer", "--config", str(cfg_path)])
        records = [json.loads(line) for line in
                   (out / "metrics.jsonl").read_text().splitlines() if "total" in line]
        for r in records:
            if r["epoch"] < 1:
                assert r["l_mf"] == 0.0
            assert r["interval_active"] is False  # activates at epoch 2


class TestTrainAr:
    def test_artifacts(self, trained_run):
        assert trained_run["ar_ckpt"].exists()
        assert (trained_run["out"] / "ar-metrics.jsonl").exists()
        assert (trained_run["out"] / "token-cache.npz").exists()

    def test_tokenizer_checkpoint_untouched(self, trained_run, tmp_path):
        before = hashlib.sha256(trained_run["tok_ckpt"].read_bytes()).hexdigest()
        out2 = tmp_path / "ar2"
        out2.mkdir()
        assert main(["train-ar", "--config", str(trained_run["cfg_path"]),
                     "--tokenizer", str(trained_run["tok_ckpt"]),
                     "--out", str(out2)]) == 0
        after = hashlib.sha256(trained_run["tok_ckpt"].read_bytes()).hexdigest()
        assert before == after

    def test_token_cache_hit_on_second_run(self, trained_run):
        out = trained_run["out"]
        assert main(["train-ar", "--config", str(trained_run["cfg_path"]),
                     "--tokenizer", str(trained_run["tok_ckpt"])]) == 0
        events = [json.loads(line).get("event") for line in
                  (out / "ar-metrics.jsonl").read_text().splitlines()
                  if "event" in line]
        assert "token-cache-write" in events
        assert "token-cache-hit" in events


class TestReconstruct:
    @pytest.mark.parametrize("mode", ["one-step", "multi-step:4:2.0",
                                      "multi-step:4:1.0", "prefix:8", "segment:2:6"])
    def test_modes(self, trained_run, tmp_path, mode):
        out = tmp_path / mode.replace(":", "-")
        assert main(["reconstruct", "--checkpoint", str(trained_run["tok_ckpt"]),
                     "--images", "synthetic:4", "--mode", mode,
                     "--out", str(out)]) == 0
        tag = mode.replace(":", "-")
        assert (out / f"recon-{tag}.png").exists()
        records = [json.loads(line) for line in
                   (out / f"recon-{tag}.jsonl").read_text().splitlines()]
        assert "mean_psnr" in records[-1]
        assert all("psnr" in r and "ssim" in r for r in records[:-1])

    def test_unknown_mode_errors(self, trained_run):
        with pytest.raises(SystemExit):
            main(["reconstruct", "--checkpoint", str(trained_run["tok_ckpt"]),
                  "--mode", "quantum"])

    def test_live_weights_flag(self, trained_run, tmp_path):
        out = tmp_path / "live"
        assert main(["reconstruct", "--checkpoint", str(trained_run["tok_ckpt"]),
                     "--images", "synthetic:2", "--mode", "one-step",
                     "--weights", "live", "--out", str(out)]) == 0


class TestGenerate:
    def test_grid_and_token_files(self, trained_run, tmp_path):
        out = tmp_path / "gen"
        assert main(["generate", "--tokenizer", str(trained_run["tok_ckpt"]),
                     "--ar", str(trained_run["ar_ckpt"]), "--class-id", "1",
                     "--n", "3", "--s-max", "2.0", "--seed", "5",
                     "--out", str(out)]) == 0
        assert (out / "gen-c1.png").exists()
        token_files = sorted(out.glob("gen-c1-*-tokens.npy"))
        assert len(token_files) == 3
        tokens = np.load(token_files[0])
        assert tokens.shape == (16, 16)
        assert np.allclose(np.linalg.norm(tokens, axis=1), 1.0, atol=1e-4)

    def test_seed_reproducible_bitwise(self, trained_run, tmp_path):
        digests = []
        for name in ("g1", "g2"):
            out = tmp_path / name
            main(["generate", "--tokenizer", str(trained_run["tok_ckpt"]),
                  "--ar", str(trained_run["ar_ckpt"]), "--class-id", "0",
                  "--n", "2", "--s-max", "1.0", "--seed", "9", "--out", str(out)])
            digests.append(hashlib.sha256((out / "gen-c0.png").read_bytes()).hexdigest())
        assert digests[0] == digests[1]

    def test_class_out_of_range(self, trained_run, tmp_path):
        with pytest.raises(SystemExit):
            main(["generate", "--tokenizer", str(trained_run["tok_ckpt"]),
                  "--ar", str(trained_run["ar_ckpt"]), "--class-id", "99",
                  "--out", str(tmp_path / "bad")])


class TestEvaluate:
    @pytest.mark.parametrize("suite", ["recon", "balance", "causality"])
    def test_suites(self, trained_run, tmp_path, suite):
        out = tmp_path / suite
        assert main(["evaluate", "--checkpoint", str(trained_run["tok_ckpt"]),
                     "--suite", suite, "--dataset", "synthetic:8",
                     "--out", str(out)]) == 0
        report = json.loads((out / f"report-{suite}.json").read_text())
        assert report["suite"] == suite

    def test_gen_suite(self, trained_run, tmp_path):
        out = tmp_path / "gen-suite"
        assert main(["evaluate", "--checkpoint", str(trained_run["tok_ckpt"]),
                     "--ar", str(trained_run["ar_ckpt"]), "--suite", "gen",
                     "--dataset", "synthetic:8", "--s-max", "1.0",
                     "--out", str(out)]) == 0
        report = json.loads((out / "report-gen.json").read_text())
        assert report["frechet"] >= 0

    def test_gen_suite_needs_ar(self, trained_run, tmp_path):
        with pytest.raises(SystemExit):
            main(["evaluate", "--checkpoint", str(trained_run["tok_ckpt"]),
                  "--suite", "gen", "--out", str(tmp_path / "x")])

    def test_balance_report_contents(self, trained_run, tmp_path):
        out = tmp_path / "balance2"
        main(["evaluate", "--checkpoint", str(trained_run["tok_ckpt"]),
              "--suite", "balance", "--out", str(out)])
        report = json.loads((out / "report-balance.json").read_text())
        assert report["interval"]["max_min_ratio"] < report["first-k"]["max_min_ratio"]
        assert report["all"]["max_min_ratio"] == pytest.approx(1.0)

    def test_causality_report_ks(self, trained_run, tmp_path):
        out = tmp_path / "causality2"
        main(["evaluate", "--checkpoint", str(trained_run["tok_ckpt"]),
              "--suite", "causality", "--dataset", "synthetic:8",
              "--out", str(out)])
        report = json.loads((out / "report-causality.json").read_text())
        assert [row["k"] for row in report["curve"]] == [2, 4, 8, 16]


class TestOutputRootEnv:
    def test_env_override(self, trained_run, tmp_path, monkeypatch):
        monkeypatch.setenv("FLOWTOK_OUTPUT_ROOT", str(tmp_path))
        assert main(["reconstruct", "--checkpoint", str(trained_run["tok_ckpt"]),
                     "--images", "synthetic:2", "--mode", "one-step",
                     "--out", "rel-dir"]) == 0
        assert (tmp_path / "rel-dir" / "recon-one-step.png").exists()
