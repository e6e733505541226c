import csv
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from spironet.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VERIFY, main


def run_cli(*args, env_extra=None):
    env = dict(os.environ)
    env.update(env_extra or {})
    return subprocess.run(
        [sys.executable, "-m", "spironet", *map(str, args)],
        capture_output=True, text=True, env=env,
    )


GEN_ARGS = ["--count", "12", "--size", "32", "--seed", "0"]
TRAIN_ARGS = [
    "--size", "32", "--base-channels", "4", "--stages", "2",
    "--epochs", "3", "--batch-size", "4", "--lr-init", "0.02",
]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "ds"
    r = run_cli("generate", "--out", root, *GEN_ARGS)
    assert r.returncode == EXIT_OK, r.stderr
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    r = run_cli("train", "--data", dataset, "--out", out, "--seed", "0",
                "--precision", "f64", "--deterministic", *TRAIN_ARGS)
    assert r.returncode == EXIT_OK, r.stderr
    return {"out": out, "ckpt": out / "ckpt_seed0.spiro", "log": out / "log_seed0.csv",
            "data": dataset}


class TestGenerate:
    def test_writes_pairs_and_manifest(self, dataset):
        images = sorted((dataset / "images").glob("*.pgm"))
        masks = sorted((dataset / "masks").glob("*.pgm"))
        assert len(images) == len(masks) == 12
        with open(dataset / "manifest.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 12
        assert {r["split"] for r in rows} == {"train", "test"}

    def test_repeat_seed_byte_identical(self, dataset, tmp_path):
        again = tmp_path / "again"
        r = run_cli("generate", "--out", again, *GEN_ARGS)
        assert r.returncode == EXIT_OK
        for sub in ("images", "masks"):
            for p in sorted((dataset / sub).glob("*.pgm")):
                assert (again / sub / p.name).read_bytes() == p.read_bytes(), p.name
        assert (again / "manifest.csv").read_bytes() == (dataset / "manifest.csv").read_bytes()

    def test_refuses_nonempty_target_without_force(self, dataset):
        r = run_cli("generate", "--out", dataset, *GEN_ARGS)
        assert r.returncode == EXIT_USAGE
        assert "--force" in r.stderr
        r = run_cli("generate", "--out", dataset, *GEN_ARGS, "--force")
        assert r.returncode == EXIT_OK


class TestTrain:
    def test_log_schema_and_lr_schedule(self, trained):
        with open(trained["log"]) as f:
            rows = list(csv.DictReader(f))
        assert list(rows[0]) == ["epoch", "lr", "train_loss", "val_iou"]
        assert len(rows) == 3
        for e, row in enumerate(rows):
            expect = 0.02 * (1.0 - e / 3) ** 0.9
            assert float(row["lr"]) == expect, f"epoch {e}"

    def test_deterministic_runs_byte_identical(self, trained, tmp_path):
        out2 = tmp_path / "run2"
        r = run_cli("train", "--data", trained["data"], "--out", out2, "--seed", "0",
                    "--precision", "f64", "--deterministic", *TRAIN_ARGS)
        assert r.returncode == EXIT_OK, r.stderr
        assert (out2 / "ckpt_seed0.spiro").read_bytes() == trained["ckpt"].read_bytes()
        assert (out2 / "log_seed0.csv").read_bytes() == trained["log"].read_bytes()

    def test_missing_dataset_is_usage_error(self, tmp_path):
        r = run_cli("train", "--data", tmp_path / "nope", "--out", tmp_path / "o")
        assert r.returncode == EXIT_USAGE

    def test_param_count_reported(self, trained):
        pass  # covered in stdout assertion below

    def test_stdout_reports_params_and_iou(self, dataset, tmp_path):
        r = run_cli("train", "--data", dataset, "--out", tmp_path / "o", "--seed", "1",
                    "--epochs", "1", *TRAIN_ARGS[:8])
        assert r.returncode == EXIT_OK
        assert "params" in r.stdout and "best val IoU" in r.stdout


class TestEval:
    def test_consistency_with_training_log(self, trained, tmp_path):
        # the best checkpoint re-evaluated on the val split reproduces the
        # best logged val_iou
        with open(trained["log"]) as f:
            best = max(float(r["val_iou"]) for r in csv.DictReader(f))
        out = tmp_path / "eval"
        r = run_cli("eval", "--data", trained["data"], "--split", "test",
                    "--ckpt", trained["ckpt"], "--out", out)
        assert r.returncode == EXIT_OK, r.stderr
        with open(out / "metrics_ckpt_seed0.csv") as f:
            rows = list(csv.reader(f))
        mean_row = [r for r in rows if r[0] == "mean"][0]
        iou_idx = rows[0].index("iou")
        assert abs(float(mean_row[iou_idx]) - best) < 1e-6

    def test_aggregate_std_zero_for_identical_ckpts(self, trained, tmp_path):
        out = tmp_path / "agg"
        r = run_cli("eval", "--data", trained["data"], "--split", "test",
                    "--ckpt", trained["ckpt"], trained["ckpt"], "--out", out)
        assert r.returncode == EXIT_OK
        with open(out / "aggregate.csv") as f:
            rows = list(csv.DictReader(f))
        assert all(float(r["std"]) == 0.0 for r in rows)

    def test_aggregation_matches_recomputation(self, trained, tmp_path):
        out = tmp_path / "re"
        r = run_cli("eval", "--data", trained["data"], "--split", "test",
                    "--ckpt", trained["ckpt"], "--out", out)
        assert r.returncode == EXIT_OK
        with open(out / "metrics_ckpt_seed0.csv") as f:
            rows = list(csv.reader(f))
        header, body = rows[0], rows[1:-2]
        per_image = [float(r[header.index("f1")]) for r in body]
        mean_row = rows[-2]
        assert abs(float(mean_row[header.index("f1")]) - np.mean(per_image)) < 1e-9


class TestInfer:
    def test_deterministic_mask_bytes(self, trained, tmp_path):
        img = next((Path(trained["data"]) / "images").glob("*.pgm"))
        m1, m2 = tmp_path / "m1.pgm", tmp_path / "m2.pgm"
        for m in (m1, m2):
            r = run_cli("infer", "--ckpt", trained["ckpt"], "--image", img, "--mask-out", m)
            assert r.returncode == EXIT_OK, r.stderr
        assert m1.read_bytes() == m2.read_bytes()

    def test_mask_is_strictly_binary_bytes(self, trained, tmp_path):
        img = next((Path(trained["data"]) / "images").glob("*.pgm"))
        out = tmp_path / "m.pgm"
        run_cli("infer", "--ckpt", trained["ckpt"], "--image", img, "--mask-out", out)
        payload = out.read_bytes().split(b"255\n", 1)[1]
        assert set(payload).issubset({0, 255})

    def test_probability_map_written(self, trained, tmp_path):
        img = next((Path(trained["data"]) / "images").glob("*.pgm"))
        prob = tmp_path / "p.pgm"
        r = run_cli("infer", "--ckpt", trained["ckpt"], "--image", img,
                    "--mask-out", tmp_path / "m.pgm", "--prob-out", prob)
        assert r.returncode == EXIT_OK and prob.exists()

    def test_size_mismatch_suggests_configured_size(self, trained, tmp_path):
        from spironet.data import write_pgm
        bad = tmp_path / "bad.pgm"
        write_pgm(bad, np.zeros((16, 16)))
        r = run_cli("infer", "--ckpt", trained["ckpt"], "--image", bad,
                    "--mask-out", tmp_path / "m.pgm")
        assert r.returncode == EXIT_RUNTIME
        assert "32x32" in r.stderr


class TestBench:
    def test_reports_positive_fps_with_std(self, trained):
        r = run_cli("bench", "--ckpt", trained["ckpt"], "--iters", "2", "--repeats", "3",
                    "--batch-size", "2")
        assert r.returncode == EXIT_OK, r.stderr
        assert "+/-" in r.stdout
        fps = float(r.stdout.split("throughput:")[1].split("+/-")[0])
        assert fps > 0

    def test_timed_core_does_no_file_io(self, trained, monkeypatch):
        import builtins

        from spironet.cli import bench_forward
        from spironet.network import load_checkpoint
        from spironet.tensor import Tensor

        params, _ = load_checkpoint(trained["ckpt"])
        x = Tensor(np.random.default_rng(0).random((1, 1, 32, 32)))
        real_open = builtins.open

        def guarded_open(*a, **k):
            raise AssertionError("file I/O inside the timed bench core")

        monkeypatch.setattr(builtins, "open", guarded_open)
        try:
            fps = bench_forward(params, x, iters=1, repeats=2)
        finally:
            monkeypatch.setattr(builtins, "open", real_open)
        assert len(fps) == 2 and all(f > 0 for f in fps)


class TestVerify:
    def test_clean_build_passes(self):
        r = run_cli("verify")
        assert r.returncode == EXIT_OK, r.stdout + r.stderr
        assert "all suites passed" in r.stdout

    def test_injected_fault_detected_with_name(self):
        r = run_cli("verify", "--inject-fault", "fft_oracle")
        assert r.returncode == EXIT_VERIFY
        assert "FAIL] fft_oracle" in r.stdout

    def test_injected_gradient_fault(self):
        r = run_cli("verify", "--inject-fault", "gradients")
        assert r.returncode == EXIT_VERIFY
        assert "FAIL] gradients" in r.stdout


class TestUsage:
    def test_unknown_flag_exits_one(self):
        r = run_cli("train", "--no-such-flag")
        assert r.returncode == EXIT_USAGE

    def test_missing_subcommand_exits_one(self):
        r = run_cli()
        assert r.returncode == EXIT_USAGE

    def test_config_file_merge_and_override(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("count=4\nsize=32\nseed=3\n")
        out = tmp_path / "ds"
        r = run_cli("generate", "--config", cfg, "--out", out, "--count", "6")
        assert r.returncode == EXIT_OK
        assert len(list((out / "images").glob("*.pgm"))) == 6  # CLI beats file

    def test_bad_config_line_is_usage_error(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("not a kv line\n")
        r = run_cli("generate", "--config", cfg, "--out", tmp_path / "x")
        assert r.returncode == EXIT_USAGE

    def test_in_process_main_exit_codes(self, tmp_path):
        assert main(["verify", "--inject-fault", "metric_identities"]) == EXIT_VERIFY
