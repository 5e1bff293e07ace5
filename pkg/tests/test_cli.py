import json
import os
import subprocess
import sys

import numpy as np
import pytest

from rnnopt.cli import main, parse_config
from rnnopt.gp import Kernel
from rnnopt.policy import LstmPolicy, SearchSpace, save_checkpoint


@pytest.fixture
def checkpoint(tmp_path):
    policy = LstmPolicy.initialise(SearchSpace.unit(1), 8, 42)
    path = tmp_path / "ck.json"
    save_checkpoint(policy, path, kernel=Kernel(0.3, 1.0, 1e-6), loss="sum")
    return str(path)


def write(path, text):
    path.write_text(text)
    return str(path)


class TestParseConfig:
    def test_basic(self, tmp_path):
        p = write(tmp_path / "c.cfg", "a = 1\n# comment\nb = two words\n\nc=3\n")
        assert parse_config(p) == {"a": "1", "b": "two words", "c": "3"}

    def test_rejects_bad_line(self, tmp_path):
        p = write(tmp_path / "c.cfg", "just some words\n")
        with pytest.raises(ValueError, match=":1:"):
            parse_config(p)


class TestTrainCommand:
    def test_train_writes_outputs(self, tmp_path):
        cfg = write(tmp_path / "t.cfg", "\n".join([
            "dim = 1", "hidden = 4", "loss = sum", "batch_size = 2",
            "curriculum = 3:4", "seed = 7", "processes = 1",
        ]))
        out = tmp_path / "run"
        assert main(["train", "--config", cfg, "--out", str(out)]) == 0
        assert (out / "checkpoint.json").exists()
        assert (out / "training.csv").exists()
        assert (out / "manifest.json").exists()
        lines = (out / "training.csv").read_text().splitlines()
        assert lines[0] == "outer_step,horizon,mean_loss,grad_norm,wall_ms"
        assert len(lines) == 5

    def test_train_deterministic_curve(self, tmp_path):
        cfg = write(tmp_path / "t.cfg", "\n".join([
            "dim = 1", "hidden = 4", "loss = oi", "batch_size = 2",
            "curriculum = 3:3", "seed = 9", "processes = 1",
        ]))
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        main(["train", "--config", cfg, "--out", str(out1)])
        main(["train", "--config", cfg, "--out", str(out2)])
        assert (out1 / "training.csv").read_bytes() == (out2 / "training.csv").read_bytes()
        assert (out1 / "checkpoint.json").read_bytes() == (out2 / "checkpoint.json").read_bytes()


class TestOptimizeCommand:
    def test_trajectory_csv(self, tmp_path, checkpoint):
        out = tmp_path / "opt"
        rc = main(["optimize", "--checkpoint", checkpoint, "--objective", "gp1",
                   "--steps", "6", "--seed", "3", "--out", str(out)])
        assert rc == 0
        lines = (out / "trajectory.csv").read_text().splitlines()
        assert lines[0] == "step,x_1,y,min_so_far,wall_ns"
        assert len(lines) == 7

    def test_byte_identical_rerun(self, tmp_path, checkpoint):
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            main(["optimize", "--checkpoint", checkpoint, "--objective", "gp1",
                  "--steps", "6", "--seed", "3", "--out", str(out)])
            outs.append((out / "trajectory.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_parallel_mode_columns(self, tmp_path, checkpoint):
        out = tmp_path / "par"
        main(["optimize", "--checkpoint", checkpoint, "--objective", "gp1",
              "--steps", "6", "--seed", "3", "--parallel", "3", "--out", str(out)])
        header = (out / "trajectory.csv").read_text().splitlines()[0]
        assert header.endswith("worker_id,issue_idx,complete_idx,sim_time")


class TestCompareCommand:
    def test_compare_outputs_and_determinism(self, tmp_path, checkpoint):
        cfg = write(tmp_path / "c.cfg", "\n".join([
            "objective = gp1", "n_functions = 3", "budget = 5", "seed = 2",
            f"optimizers = random,rnn:{checkpoint}",
        ]))
        out1, out2 = tmp_path / "c1", tmp_path / "c2"
        assert main(["compare", "--config", cfg, "--out", str(out1)]) == 0
        assert main(["compare", "--config", cfg, "--out", str(out2)]) == 0
        for name in ("aggregate.csv", "paired.csv", "runs.csv", "manifest.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name

    def test_gp_ei_limit(self, tmp_path):
        cfg = write(tmp_path / "c.cfg", "\n".join([
            "objective = gp1", "n_functions = 4", "budget = 4", "seed = 2",
            "optimizers = random,gp_ei", "gp_ei_functions = 2",
        ]))
        out = tmp_path / "cl"
        main(["compare", "--config", cfg, "--out", str(out)])
        rows = (out / "aggregate.csv").read_text().splitlines()[1:]
        ns = {r.split(",")[0]: r.split(",")[-1] for r in rows}
        assert ns["gp_ei"] == "2" and ns["random"] == "4"


class TestTimeCommand:
    def test_timing_csv(self, tmp_path):
        cfg = write(tmp_path / "t.cfg", "\n".join([
            "objective = gp1", "optimizer = random", "budget = 5",
            "repeats = 3", "seed = 1",
        ]))
        out = tmp_path / "tm"
        assert main(["time", "--config", cfg, "--out", str(out)]) == 0
        lines = (out / "timing.csv").read_text().splitlines()
        assert lines[0] == "step,median_ns"
        assert len(lines) == 6


class TestCheckCommand:
    def test_check_passes_and_writes_csv(self, tmp_path):
        out = tmp_path / "chk"
        assert main(["check", "--out", str(out)]) == 0
        body = (out / "check.csv").read_text().splitlines()
        assert body[0] == "check,passed"
        assert all(line.endswith(",1") for line in body[1:])

    def test_check_csv_byte_identical(self, tmp_path):
        out1, out2 = tmp_path / "k1", tmp_path / "k2"
        main(["check", "--out", str(out1)])
        main(["check", "--out", str(out2)])
        assert (out1 / "check.csv").read_bytes() == (out2 / "check.csv").read_bytes()


class TestEntryPoint:
    def test_module_invocation(self):
        proc = subprocess.run(
            [sys.executable, "-m", "rnnopt.cli", "--help"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "train" in proc.stdout and "compare" in proc.stdout
