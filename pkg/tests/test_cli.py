"""End-to-end CLI checks on a micro configuration.

One shared train run feeds the eval/rerun assertions; everything here is
sized to finish in well under a minute apart from the tiny ablation grid.
"""

import csv
import math

import numpy as np
import pytest

from streamnav.cli import main

MICRO = """\
[model]
layers = 2
heads = 2
d_model = 32
queries_per_modality = 2
masked_tokens_per_modality = 16
trainable_2d = true
[training]
episodes = 8
epochs = 1
batch_size = 4
[eval]
episodes = 4
max_steps = 60
"""


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def micro_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "micro.ini"
    p.write_text(MICRO)
    return str(p)


@pytest.fixture(scope="module")
def trained(micro_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    rc = main(["train", "--config", micro_cfg, "--seed", "3",
               "--out", str(out)])
    assert rc == 0
    return out / "model.ckpt", out / "train_log.csv"


class TestTrain:
    def test_outputs_exist(self, trained):
        ckpt, log = trained
        assert ckpt.exists() and log.exists()

    def test_log_columns_and_steps(self, trained):
        _, log = trained
        rows = read_csv(str(log))
        assert list(rows[0].keys()) == ["step", "nav_loss", "l2d", "l3d",
                                        "loss_all"]
        assert [int(r["step"]) for r in rows] == list(range(1, len(rows) + 1))
        assert len(rows) == math.ceil(8 / 4) * 1
        for r in rows:
            assert np.isfinite(float(r["loss_all"]))

    def test_rerun_is_byte_identical(self, micro_cfg, trained, tmp_path):
        ckpt, log = trained
        rc = main(["train", "--config", micro_cfg, "--seed", "3",
                   "--out", str(tmp_path)])
        assert rc == 0
        assert (tmp_path / "model.ckpt").read_bytes() == ckpt.read_bytes()
        assert (tmp_path / "train_log.csv").read_bytes() == log.read_bytes()

    def test_different_seed_differs(self, micro_cfg, trained, tmp_path):
        ckpt, _ = trained
        main(["train", "--config", micro_cfg, "--seed", "4",
              "--out", str(tmp_path)])
        assert (tmp_path / "model.ckpt").read_bytes() != ckpt.read_bytes()

    def test_gamma_zero_logs_zero_latents(self, tmp_path):
        cfg = tmp_path / "g0.ini"
        cfg.write_text(MICRO + "[loss]\ngamma = 0\n")
        rc = main(["train", "--config", str(cfg), "--seed", "0",
                   "--out", str(tmp_path)])
        assert rc == 0
        for r in read_csv(str(tmp_path / "train_log.csv")):
            assert float(r["l2d"]) == 0.0 and float(r["l3d"]) == 0.0

    def test_numeric_abort_saves_last_good(self, tmp_path):
        # an absurd lr overflows the first post-update forward pass
        cfg = tmp_path / "hot.ini"
        cfg.write_text(MICRO.replace("epochs = 1", "epochs = 5")
                       .replace("batch_size = 4", "batch_size = 4\nlr = 1e150"))
        rc = main(["train", "--config", str(cfg), "--seed", "0",
                   "--out", str(tmp_path)])
        assert rc == 3
        assert (tmp_path / "model.ckpt").exists()
        assert (tmp_path / "train_log.csv").exists()


class TestEval:
    def test_metrics_csv_shape(self, micro_cfg, trained, tmp_path):
        ckpt, _ = trained
        rc = main(["eval", "--config", micro_cfg, "--seed", "7",
                   "--out", str(tmp_path), "--checkpoint", str(ckpt)])
        assert rc == 0
        rows = read_csv(str(tmp_path / "eval_metrics.csv"))
        assert [r["stratum"] for r in rows] == ["overall", "short", "medium",
                                                "long"]
        overall = rows[0]
        assert int(overall["episodes"]) == 4
        assert sum(int(r["episodes"]) for r in rows[1:]) == 4
        for r in rows:
            if int(r["episodes"]) == 0:
                assert r["sr"] == "nan"
            else:
                assert 0.0 <= float(r["sr"]) <= 1.0

    def test_expert_mode_is_perfect(self, micro_cfg, tmp_path):
        rc = main(["eval", "--config", micro_cfg, "--seed", "1",
                   "--out", str(tmp_path), "--expert"])
        assert rc == 0
        overall = read_csv(str(tmp_path / "eval_metrics.csv"))[0]
        assert float(overall["sr"]) == 1.0
        assert float(overall["spl"]) == 1.0
        assert float(overall["ndtw"]) == 1.0

    def test_eval_rerun_identical(self, micro_cfg, trained, tmp_path):
        ckpt, _ = trained
        outs = []
        for d in ("a", "b"):
            out = tmp_path / d
            main(["eval", "--config", micro_cfg, "--seed", "7",
                  "--out", str(out), "--checkpoint", str(ckpt)])
            outs.append((out / "eval_metrics.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_missing_checkpoint_flag(self, micro_cfg, tmp_path):
        assert main(["eval", "--config", micro_cfg,
                     "--out", str(tmp_path)]) == 2

    def test_config_hash_mismatch(self, trained, tmp_path):
        ckpt, _ = trained
        other = tmp_path / "other.ini"
        other.write_text(MICRO.replace("layers = 2", "layers = 2\nwindow = 6"))
        assert main(["eval", "--config", str(other), "--out", str(tmp_path),
                     "--checkpoint", str(ckpt)]) == 2


class TestExitCodes:
    def test_bad_config_file(self, tmp_path):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[model]\nlayers = many\n")
        assert main(["train", "--config", str(cfg),
                     "--out", str(tmp_path)]) == 2

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[model]\nwidth = 3\n")
        assert main(["train", "--config", str(cfg),
                     "--out", str(tmp_path)]) == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.ini"),
                     "--out", str(tmp_path)]) == 2


class TestMaskDump:
    def test_single_turn_no_queries_is_lower_triangular(self, tmp_path):
        rc = main(["mask-dump", "--out", str(tmp_path), "--turns", "1",
                   "--len-instruction", "4", "--no-queries"])
        assert rc == 0
        grid = (tmp_path / "mask_strict.txt").read_text().splitlines()
        n = len(grid)
        assert all(len(row) == n for row in grid)
        for i in range(n):
            for j in range(n):
                assert (grid[i][j] == "1") == (j <= i)

    def test_strict_noiso_differ_only_in_query_rows(self, tmp_path):
        for variant in ("strict", "noiso"):
            main(["mask-dump", "--out", str(tmp_path), "--variant", variant,
                  "--turns", "2", "--len-instruction", "4"])
        a = (tmp_path / "mask_strict.txt").read_text().splitlines()
        b = (tmp_path / "mask_noiso.txt").read_text().splitlines()
        assert a != b
        diff_rows = [i for i, (ra, rb) in enumerate(zip(a, b)) if ra != rb]
        from streamnav.config import default_config
        from streamnav.layout import build_layout
        pc = default_config().policy_config()
        lay = build_layout(2, 4, 0, pc.len_ctxt, pc.n_a,
                           pc.queries_per_modality, with_queries=True)
        qrows = {i for i, role in enumerate(lay.token_roles())
                 if role.is_query}
        assert diff_rows and set(diff_rows) <= qrows

    def test_pgm_format(self, tmp_path):
        rc = main(["mask-dump", "--out", str(tmp_path), "--format", "pgm",
                   "--turns", "1", "--len-instruction", "3"])
        assert rc == 0
        lines = (tmp_path / "mask_strict.pgm").read_text().splitlines()
        assert lines[0] == "P2"
        w, h = map(int, lines[1].split())
        assert w == h
        assert lines[2] == "255"


@pytest.fixture(scope="module")
def grid(micro_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("ablate")
    rc = main(["ablate", "--config", micro_cfg, "--seed", "5",
               "--out", str(out), "--replicates", "1"])
    assert rc == 0
    return read_csv(str(out / "ablate.csv"))


class TestAblate:
    def test_row_arithmetic(self, grid):
        cells = {r["cell"] for r in grid}
        assert len(cells) == 6
        data = [r for r in grid if r["replicate"] != "mean"]
        means = [r for r in grid if r["replicate"] == "mean"]
        assert len(data) == 6 and len(means) == 6

    def test_shared_eval_suite(self, grid):
        digests = {r["digest"] for r in grid if r["replicate"] != "mean"}
        assert len(digests) == 1

    def test_means_recompute(self, grid):
        data = [r for r in grid if r["replicate"] != "mean"]
        means = {r["cell"]: float(r["sr"])
                 for r in grid if r["replicate"] == "mean"}
        for cell in means:
            vals = [float(r["sr"]) for r in data if r["cell"] == cell]
            assert means[cell] == pytest.approx(np.mean(vals), abs=1e-6)
