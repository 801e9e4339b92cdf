import csv
import hashlib
import json
import math
import random

import numpy as np
import pytest

from ghostlab import toy
from ghostlab.expcli import (ExperimentConfig, KINDS, RunSummary, SweepResult, cli_main,
                             derive_seed, preset, resolved_config, run_fig2, run_figS1,
                             run_figS2)
from ghostlab.expcli.config import parse_seeds
from ghostlab.rnn import init_params

# pi**2 / (4 * 50**2) at 30 digits
R_STAR_50 = 9.86960440108935862e-4


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    @pytest.mark.parametrize("kind", KINDS)
    def test_round_trip(self, kind):
        for scale in (False, True):
            cfg = preset(kind, paper_scale=scale)
            back = ExperimentConfig.from_json(cfg.to_json())
            assert back == cfg and back.to_json() == cfg.to_json()

    def test_caption_defaults(self):
        cfg = ExperimentConfig()
        assert (cfg.T, cfg.toy_dt, cfg.x_star) == (100.0, 0.1, 10.0)
        assert (cfg.tau, cfg.dt, cfg.N, cfg.c, cfg.kappa_star, cfg.x0) == (10, 5, 100, 10, 1, -0.3)
        assert (cfg.r0_mean, cfg.r0_std) == (10.0, 0.1)
        assert preset("figS2").ranks == [1, 2, 3, 4, 5, 10, 30, 50, 100]
        assert len(preset("fig4").seeds) == 20 and len(preset("fig4", True).seeds) == 100
        assert preset("fig4").phase1_epochs == 6000 and preset("fig4").c == 10
        toy_alphas = preset("fig2bcd").toy_alphas
        assert min(toy_alphas) == 1e-11 and max(toy_alphas) == 2e-9

    def test_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig(seeds=[])
        with pytest.raises(ValueError):
            ExperimentConfig(kind="fig9")
        with pytest.raises(ValueError):
            ExperimentConfig(ranks=[0])
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"bogus": 1})

    def test_overrides(self):
        cfg = ExperimentConfig().with_override("T=50")
        assert cfg.T == 50.0 and isinstance(cfg.T, float)
        assert ExperimentConfig().with_override("alphas=1e-4,2e-3").alphas == [1e-4, 2e-3]
        assert ExperimentConfig().with_override("ranks=[1, 10]").ranks == [1, 10]
        assert ExperimentConfig().with_override("c_trainable=true").c_trainable is True
        assert ExperimentConfig().with_override("epochs=12").epochs == 12
        with pytest.raises(ValueError):
            ExperimentConfig().with_override("nope=1")
        with pytest.raises(ValueError):
            ExperimentConfig().with_override("T")

    def test_resolved_config(self):
        res = resolved_config(ExperimentConfig().with_override("T=50"))
        assert res["T"] == 50.0
        assert res["derived"]["r_star"] == pytest.approx(R_STAR_50, rel=1e-12)
        assert res["derived"]["rnn_steps"] == 20
        assert set(ExperimentConfig().to_dict()) <= set(res)

    def test_parse_seeds(self):
        assert parse_seeds("3") == [0, 1, 2]
        assert parse_seeds("4,1") == [4, 1]
        with pytest.raises(ValueError):
            parse_seeds("0")


class TestSeeds:
    def test_rule(self):
        digest = hashlib.sha256(b"7:fig3:1:4").digest()
        expected = int.from_bytes(digest[:8], "big") & (2**63 - 1)
        assert derive_seed(7, "fig3", 1, 4) == expected

    def test_distinct(self):
        seeds = {derive_seed(0, k, c, i) for k in KINDS for c in range(3) for i in range(10)}
        assert len(seeds) == len(KINDS) * 30


class TestSweepResult:
    def make(self, order):
        res = SweepResult("x", ("alpha",), [(1.0,), (2.0,)], [0, 1, 2])
        vals = {(1.0, 0): 1.0, (1.0, 1): 2.0, (1.0, 2): 6.0,
                (2.0, 0): 100.0, (2.0, 1): 100.0, (2.0, 2): 100.0}
        for a, s in order:
            res.add((a,), RunSummary(s, s, vals[(a, s)], 5 if a == 1.0 else None,
                                     "learned" if a == 1.0 else "stuck"))
        return res

    def test_stats(self):
        keys = [(a, s) for a in (1.0, 2.0) for s in range(3)]
        res = self.make(keys)
        assert len(res) == 6
        st = res.cell((1.0,))
        assert st.mean_final_loss == 3.0
        assert st.sem_final_loss == pytest.approx(math.sqrt(7.0 / 3.0), rel=1e-12)
        assert st.counts == {"learned": 3, "stuck": 0, "neither": 0}
        assert res.cell((2.0,)).sem_final_loss == 0.0
        assert res.cell((2.0,)).median_epochs_to_learned is None

    def test_permutation_invariant(self):
        keys = [(a, s) for a in (1.0, 2.0) for s in range(3)]
        ref = self.make(keys)
        for seed in range(5):
            shuffled = keys[:]
            random.Random(seed).shuffle(shuffled)
            other = self.make(shuffled)
            assert other.summary_csv() == ref.summary_csv()
            assert other.runs_csv() == ref.runs_csv()


class TestRunners:
    def test_fig2_outputs(self, tmp_path):
        res = run_fig2(preset("fig2bcd"), tmp_path)
        assert len(res) == 12 * 10
        assert res.cell((1e-10,)).mean_final_loss < 5
        rows = read_csv(tmp_path / "profile.csv")
        at_opt = [r for r in rows if float(r["r_over_r_star"]) == 1.0]
        assert float(at_opt[0]["analytic"]) == 0.0
        assert list(rows[0]) == ["r", "r_over_r_star", "analytic", "numeric_c1",
                                 "numeric_c5", "numeric_c25"]
        trace = read_csv(tmp_path / "traces" / "trace_00.csv")
        assert len(trace) == 3001 and trace[0]["regime"] == "DESCENDING_BRANCH"
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        for entry in manifest["files"]:
            data = (tmp_path / entry["path"]).read_bytes()
            assert hashlib.sha256(data).hexdigest() == entry["sha256"]
        assert "config.json" in {e["path"] for e in manifest["files"]}

    @pytest.mark.xfail(strict=True, reason="9.2e-10 is below the critical rate 9.132e-10 "
                       "only for some inits; most seeds never reach the no-learning zone")
    def test_fig2_near_critical_cell_fully_stuck(self, tmp_path):
        res = run_fig2(preset("fig2bcd"), tmp_path)
        assert res.cell((9.2e-10,)).mean_final_loss == 100.0

    def test_fig2_supercritical_cells_stuck(self, tmp_path):
        res = run_fig2(preset("fig2bcd").replace(toy_alphas=[1e-9, 2e-9]), tmp_path)
        for a in (1e-9, 2e-9):
            st = res.cell((a,))
            assert st.mean_final_loss == 100.0 and st.sem_final_loss == 0.0
            assert st.counts["stuck"] == 10

    def test_figS1_empty_seeds(self):
        with pytest.raises(ValueError):
            run_figS1(preset("figS1").replace(seeds=[]))

    def test_small_grid_and_workers(self, tmp_path):
        cfg = preset("figS1").replace(alphas=[1e-4, 1e-3], seeds=[0, 1], epochs=60,
                                      analysis_stride=20)
        a = run_figS1(cfg, tmp_path / "a")
        b = run_figS1(cfg.replace(workers=2), tmp_path / "b")
        assert len(a.sweep) == 4
        for name in ("summary.csv", "runs.csv", "diagnostics.csv",
                     "runs/alpha0.0001/seed_001/epochs.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        log = read_csv(tmp_path / "a/runs/alpha0.001/seed_000/epochs.csv")
        assert len(log) == 60 and log[20]["fp_count"] != "" and log[21]["fp_count"] == ""

    def test_figS2_small(self, tmp_path):
        cfg = preset("figS2").replace(alphas=[1e-4], ranks=[1, 100], seeds=[0], epochs=30)
        res = run_figS2(cfg, tmp_path)
        assert len(res.sweep) == 2
        rows = read_csv(tmp_path / "summary.csv")
        assert [r["rank"] for r in rows] == ["1", "100"]

    def test_full_rank_construction(self):
        p = init_params(derive_seed(0, "figS2", 8, 0), N=100, K=100, readout="linear")
        assert np.linalg.matrix_rank(p.W()) == 100


class TestCli:
    def test_check(self, tmp_path, capsys):
        assert cli_main(["check", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and out.count("PASS") >= 5
        assert (tmp_path / "config.json").exists() and (tmp_path / "check.txt").exists()

    def test_unknown_flag(self, capsys):
        assert cli_main(["fig2", "--bogus"]) != 0
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert cli_main(["fig7"]) != 0
        assert "usage" in capsys.readouterr().err

    def test_bad_override(self, capsys, tmp_path):
        assert cli_main(["fig2a", "--out", str(tmp_path), "--override", "zzz=1"]) != 0
        assert "usage" in capsys.readouterr().err

    def test_override_T(self, tmp_path):
        assert cli_main(["fig2a", "--out", str(tmp_path), "--override", "T=50",
                         "--override", "profile_points=5"]) == 0
        res = json.loads((tmp_path / "config.json").read_text())
        assert res["T"] == 50.0 and res["kind"] == "fig2a"
        assert res["derived"]["r_star"] == pytest.approx(R_STAR_50, rel=1e-12)
        rows = read_csv(tmp_path / "profile.csv")
        assert any(float(r["r"]) == toy.optimal_r(50) for r in rows)

    def test_fig2_twice_identical(self, tmp_path):
        for d in ("a", "b"):
            assert cli_main(["fig2", "--out", str(tmp_path / d)]) == 0
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
        assert len(files) >= 6
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_config_file_and_seeds(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"epochs": 15, "alphas": [1e-3], "ranks": [2],
                                        "N": 20}))
        out = tmp_path / "run"
        assert cli_main(["custom", "--config", str(cfg_path), "--seeds", "0,5",
                         "--out", str(out)]) == 0
        res = json.loads((out / "config.json").read_text())
        assert res["seeds"] == [0, 5] and res["N"] == 20 and res["kind"] == "custom"
        assert (out / "runs/alpha0.001_rank2/seed_005/epochs.csv").exists()
        assert ExperimentConfig.from_dict(res).to_dict() == {k: v for k, v in res.items()
                                                             if k != "derived"}
