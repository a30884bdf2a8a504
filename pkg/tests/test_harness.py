import csv
import json

import numpy as np
import pytest

from gate_bilevel import harness
from gate_bilevel.bilevel import DivergenceError, quadratic_variation
from gate_bilevel.config import ConfigError, from_dict

TINY = {
    "seed": 0,
    "model": {"d_z": 2, "d_m": 2, "embed_hidden": [4], "enc_hidden": [4], "map_hidden": [4]},
    "data": {"synthetic": {"loadings": [[1.0, 0.2], [0.9, 0.3]], "samples": 30, "d_x": 3, "tasks": ["p", "q"]}},
    "train": {"epochs": 3, "batch_size": 8, "patience": None, "checkpoint_every": 2},
    "loss": {"m": 2},
}


def cfg(**over):
    d = json.loads(json.dumps(TINY))
    for k, v in over.items():
        d.setdefault(k, {}).update(v) if isinstance(v, dict) else d.__setitem__(k, v)
    return from_dict(d)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestTrain:
    def test_outputs(self, tmp_path):
        tr = harness.run_train(cfg(), tmp_path)
        rows = read_csv(tmp_path / "metrics.csv")
        assert list(rows[0]) == harness.METRICS_HEADER
        assert len(rows) == 4 * 2
        assert all(float(r["val_rmse"]) >= 0 and r["seconds"] == "" for r in rows)
        epochs = [int(r["epoch"]) for r in rows if r["task"] == "p"]
        assert epochs == sorted(set(epochs))
        for r in rows:
            parts = sum(float(r[k]) for k in ("l_reg", "l_map", "l_ae", "l_cons", "l_dis"))
            assert abs(parts - float(r["l_tot"])) < 1e-9
        lam = read_csv(tmp_path / "lambda.csv")
        assert list(lam[0]) == harness.LAMBDA_HEADER and len(lam) == 4 * 2
        assert sorted(p.name for p in tmp_path.glob("ckpt_*.bin")) == ["ckpt_2.bin", "ckpt_3.bin"]
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["mode"] == "bilevel" and summary["epochs_run"] == 3
        assert summary["theta_checksum_final"] == tr.theta.checksum()

    def test_fixed_lambda_column_constant(self, tmp_path):
        harness.run_train(harness.with_overrides(cfg(), fixed_lambda=1.0), tmp_path)
        assert {r["lambda"] for r in read_csv(tmp_path / "lambda.csv")} == {"1.0"}

    def test_rerun_bitwise(self, tmp_path):
        for d in ("a", "b"):
            harness.run_train(cfg(), tmp_path / d)
        for name in ("metrics.csv", "lambda.csv", "summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_wall_clock_opt_in(self, tmp_path):
        harness.run_train(cfg(output={"wall_clock": True}), tmp_path)
        assert all(r["seconds"] != "" for r in read_csv(tmp_path / "metrics.csv"))

    def test_resume_bitwise(self, tmp_path):
        harness.run_train(cfg(), tmp_path / "full")
        harness.run_train(cfg(), tmp_path / "part", stop_after=2)
        harness.run_train(cfg(), tmp_path / "part", resume=tmp_path / "part" / "ckpt_2.bin")
        for name in ("metrics.csv", "lambda.csv", "summary.json"):
            assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()

    def test_divergence_writes_partial(self, tmp_path):
        with pytest.raises(DivergenceError):
            harness.run_train(cfg(train={"divergence_limit": 1e-9}), tmp_path)
        assert len(read_csv(tmp_path / "metrics.csv")) >= 2

    def test_csv_dataset_with_manifest(self, tmp_path, caplog):
        synth = cfg()
        harness.write_synthetic(synth, tmp_path / "d")
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        manifest[0]["count"] = 999
        (tmp_path / "d" / "manifest.json").write_text(json.dumps(manifest))
        c = from_dict({**{k: v for k, v in TINY.items() if k != "data"},
                       "data": {"tasks": [{"task": "p", "path": "d/p.csv"}, {"task": "q", "path": "d/q.csv"}],
                                "manifest": "d/manifest.json"}}, base_dir=tmp_path)
        ds = harness.build_datasets(c)
        orig = harness.build_datasets(synth)
        assert [len(d) for d in ds] == [30, 30]
        np.testing.assert_array_equal(ds[0].x, orig[0].x)
        assert "manifest lists 999" in caplog.text

    def test_width_mismatch(self, tmp_path):
        with pytest.raises(ConfigError):
            harness.model_config(cfg(), [harness.build_datasets(cfg())[0],
                                        harness.build_datasets(cfg(data={"synthetic": {
                                            **TINY["data"]["synthetic"], "d_x": 4}}))[1]])


class TestGrid:
    def test_combinatorics_and_argmin(self, tmp_path):
        c = cfg(data={"synthetic": {"loadings": [[1, 0], [1, 0.1], [0, 1]], "samples": 30, "d_x": 3,
                                     "tasks": ["a", "b", "c"]}}, train={"epochs": 1}, grid={"values": [0.2, 1.0]})
        res = harness.run_grid(c, tmp_path)
        rows = read_csv(tmp_path / "grid.csv")
        assert len(rows) == len(res.rows) == 2**3
        means = [float(r["mean_rmse"]) for r in rows]
        assert [int(r["best"]) for r in rows].index(1) == int(np.argmin(means))
        for r in rows:
            assert float(r["mean_rmse"]) == pytest.approx(np.mean([float(r[f"rmse_{t}"]) for t in "abc"]), abs=1e-12)

    def test_single_point_equals_run_train(self, tmp_path):
        c = cfg(grid={"values": [0.6]})
        res = harness.run_grid(c, tmp_path / "g")
        assert len(res.rows) == 1
        tr = harness.run_train(harness.with_overrides(c, fixed_lambda=0.6), tmp_path / "t")
        assert res.rows[0]["rmse"] == tr.history[-1].val_rmse

    def test_noise_seeds(self, tmp_path):
        res = harness.run_grid(cfg(grid={"values": [1.0], "noise_seeds": [0, 1, 2]}), tmp_path)
        assert res.noise_std is not None and res.noise_std > 0
        assert json.loads((tmp_path / "grid_summary.json").read_text())["noise_std_at_best"] == res.noise_std

    def test_empty_axis(self, tmp_path):
        with pytest.raises(ConfigError, match="empty"):
            harness.run_grid(cfg(grid={"values": []}), tmp_path)

    def test_unknown_pair(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown task"):
            harness.run_grid(cfg(grid={"pairs": [["p", "zz"]]}), tmp_path)


class TestCompare:
    def test_report(self, tmp_path):
        rep = harness.run_compare(cfg(), [0, 1], tmp_path)
        rows = read_csv(tmp_path / "compare.csv")
        assert len(rows) == 4
        b, g = rep.mean_rmse("baseline"), rep.mean_rmse("bilevel")
        assert rep.ratio_mean_of_ratios == pytest.approx(np.mean([g[t] / b[t] for t in rep.tasks]), abs=1e-9)
        assert 0 <= rep.improved <= len(rep.tasks) and rep.ratio_mean_of_ratios > 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["improved_tasks"] == rep.improved and "avg_rmse_ratio_of_means" in report
        for seed in (0, 1):
            base = read_csv(tmp_path / f"seed_{seed}" / "baseline" / "metrics.csv")
            gate = read_csv(tmp_path / f"seed_{seed}" / "bilevel" / "metrics.csv")
            assert [r for r in base if r["epoch"] == "0"] == [r for r in gate if r["epoch"] == "0"]
            sb = json.loads((tmp_path / f"seed_{seed}" / "baseline" / "summary.json").read_text())
            sg = json.loads((tmp_path / f"seed_{seed}" / "bilevel" / "summary.json").read_text())
            assert sb["theta_checksum_initial"] == sg["theta_checksum_initial"]
            assert sb["mode"] == "fixed" and sg["mode"] == "bilevel"

    def test_needs_seed(self, tmp_path):
        with pytest.raises(ConfigError):
            harness.run_compare(cfg(), [], tmp_path)


def test_convergence_epoch():
    assert harness.convergence_epoch([10.0, 5.0, 2.0, 1.1, 1.0]) == 3
    assert harness.convergence_epoch([1.0, 1.0]) == 0
    assert harness.convergence_epoch([5.0, 1.0]) == 1


class TestLambdaReport:
    def test_fixed_run(self, tmp_path):
        harness.run_train(harness.with_overrides(cfg(), fixed_lambda=0.5), tmp_path)
        rep = harness.report_lambda(tmp_path, 0.1)
        assert rep["fraction_under"] == 1.0
        assert all(float(r["quadratic_variation"]) == 0 for r in read_csv(tmp_path / "lambda_qv.csv"))

    def test_recomputation(self, tmp_path):
        harness.run_train(cfg(bilevel={"eta": 0.2}), tmp_path)
        harness.report_lambda(tmp_path, 1e-3, tmp_path / "rep")
        traj = read_csv(tmp_path / "rep" / "lambda_trajectories.csv")
        qv = {(r["source"], r["target"]): float(r["quadratic_variation"]) for r in read_csv(tmp_path / "rep" / "lambda_qv.csv")}
        for (s, t), v in qv.items():
            assert v == quadratic_variation([float(r[f"{s}->{t}"]) for r in traj])
        assert any(v > 0 for v in qv.values())

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            harness.report_lambda(tmp_path)


class TestCurves:
    def test_rows_and_stats(self, tmp_path):
        harness.run_train(cfg(), tmp_path / "r1")
        harness.run_train(cfg(seed=1), tmp_path / "r2")
        harness.emit_curves([tmp_path / "r1", tmp_path / "r2"], tmp_path / "c")
        rows = read_csv(tmp_path / "c" / "curves.csv")
        assert len(rows) == 2 * 4 * 2
        assert rows == sorted(rows, key=lambda r: (r["run"], int(r["epoch"]), r["task"]))
        summary = read_csv(tmp_path / "c" / "curves_summary.csv")
        for s in summary:
            vals = [float(r["val_loss"]) for r in rows if r["run"] == s["run"] and r["epoch"] == s["epoch"]]
            assert float(s["std_val_loss"]) >= 0
            assert float(s["mean_val_loss"]) == pytest.approx(np.mean(vals), abs=1e-9)

    def test_schema_mismatch(self, tmp_path):
        harness.run_train(cfg(), tmp_path / "r1")
        (tmp_path / "r2").mkdir()
        (tmp_path / "r2" / "metrics.csv").write_text("epoch,task,rmse\n0,p,1\n")
        with pytest.raises(ValueError, match="schema"):
            harness.emit_curves([tmp_path / "r1", tmp_path / "r2"], tmp_path / "c")
        with pytest.raises(ValueError):
            harness.emit_curves([], tmp_path / "c")
