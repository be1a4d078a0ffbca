import csv
import json

import pytest

from sumgp import cli
from sumgp.optimizer import run as real_run
from sumgp.sim import Heightmap, reward
from sumgp.cli import main, read_dataset

FAST = ["--iterations", "3"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--preset", "exp1", "--out", str(out), "--force"]) == 0
    return out


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestGenData:
    def test_writes_three_observations(self, data_dir):
        assert len(list(data_dir.glob("obs_*.json"))) == 3
        assert len(list(data_dir.glob("obs_*.hmap"))) == 3

    def test_heightmaps_parse(self, data_dir):
        for p in sorted(data_dir.glob("obs_*.hmap")):
            hm = Heightmap.loads(p.read_text())
            assert reward(hm, hm) == 0.0

    def test_read_back_matches_preset(self, data_dir):
        from sumgp.bench import build_preset
        space, obs, manifest = read_dataset(data_dir)
        preset = build_preset("exp1")
        assert space == preset.space and manifest["preset"] == "exp1"
        assert [o.observed for o in obs] == [o.observed for o in preset.dataset()]

    def test_overwrite_guard(self, data_dir):
        assert main(["gen-data", "--preset", "exp1", "--out", str(data_dir)]) == 4

    def test_unknown_preset(self, tmp_path):
        assert main(["gen-data", "--preset", "exp7", "--out", str(tmp_path)]) == 2

    def test_io_error(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["gen-data", "--preset", "exp1", "--out", str(blocker / "sub")]) == 3


class TestRun:
    def test_two_modes(self, data_dir, tmp_path, capsys):
        code = main(["run", "--data", str(data_dir), "--out", str(tmp_path), "--mode", "naive",
                     "--mode", "sum-partial", *FAST])
        assert code == 0
        assert sorted(p.name for p in (tmp_path / "traces").iterdir()) == [
            "naive-full_seed0.csv", "sum-partial_seed0.csv"]
        assert len(rows(tmp_path / "traces" / "sum-partial_seed0.csv")) == 3
        assert capsys.readouterr().out.count("seed=0") == 2
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["modes"] == ["naive-full", "sum-partial"]

    def test_deterministic_with_force(self, data_dir, tmp_path):
        args = ["run", "--data", str(data_dir), "--out", str(tmp_path), "--seed", "3", *FAST]
        assert main(args) == 0
        first = (tmp_path / "traces" / "sum-partial_seed3.csv").read_text()
        assert main(args) == 4
        assert main(args + ["--force"]) == 0
        assert (tmp_path / "traces" / "sum-partial_seed3.csv").read_text() == first

    def test_config_file(self, data_dir, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"modes": ["sum-full"], "seeds": [1, 2], "iterations": 2,
                                   "multistart_count": 4}))
        assert main(["run", "--config", str(cfg), "--data", str(data_dir),
                     "--out", str(tmp_path / "o")]) == 0
        assert len(list((tmp_path / "o" / "traces").iterdir())) == 2

    def test_missing_data(self, tmp_path, capsys):
        missing = tmp_path / "nowhere"
        assert main(["run", "--data", str(missing), "--out", str(tmp_path / "o")]) == 2
        assert str(missing) in capsys.readouterr().err

    def test_bad_config(self, data_dir, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text('{"beta": -1}')
        assert main(["run", "--config", str(cfg), "--data", str(data_dir),
                     "--out", str(tmp_path / "o")]) == 2
        cfg.write_text("{not json")
        assert main(["run", "--config", str(cfg), "--data", str(data_dir),
                     "--out", str(tmp_path / "o")]) == 2

    def test_simulator_failure(self, data_dir, tmp_path, monkeypatch):
        calls = {"n": 0}

        def flaky(scene, theta):
            from sumgp.sim import surrogate_simulate
            calls["n"] += 1
            if calls["n"] > 20:
                raise FloatingPointError("blew up")
            return surrogate_simulate(scene, theta)

        monkeypatch.setattr(cli, "run", lambda *a, **k: real_run(*a, simulator=flaky, **k))
        code = main(["run", "--data", str(data_dir), "--out", str(tmp_path), "--iterations", "20"])
        assert code == 5
        # the partial trace is still written
        written = rows(tmp_path / "traces" / "sum-partial_seed0.csv")
        assert 0 < len(written) < 20

    def test_usage_error(self):
        assert main(["run"]) == 2
        assert main(["frobnicate"]) == 2

    def test_full_length_run_improves(self, data_dir, tmp_path):
        assert main(["run", "--data", str(data_dir), "--out", str(tmp_path), "--seed", "0",
                     "--iterations", "200"]) == 0
        trace = rows(tmp_path / "traces" / "sum-partial_seed0.csv")
        assert len(trace) == 200
        curve = rows(tmp_path / "curves" / "sum-partial_trial_0.csv")
        assert float(curve[-1]["best_error"]) < float(curve[0]["best_error"])


class TestCompareAndReport:
    @pytest.fixture(scope="class")
    @classmethod
    def run_dir(cls, data_dir, tmp_path_factory):
        out = tmp_path_factory.mktemp("run")
        assert main(["run", "--data", str(data_dir), "--out", str(out), "--mode", "naive",
                     "--mode", "sum-partial", "--trials", "2", *FAST]) == 0
        return out

    def test_self_compare(self, run_dir, capsys):
        glob = str(run_dir / "curves" / "sum-partial_trial_*.csv")
        assert main(["compare", "--a", glob, "--b", glob, "--budget", "16"]) == 0
        doc = json.loads(capsys.readouterr().out.splitlines()[-1])
        assert {"err_a", "err_b", "ratio"} <= set(doc)
        assert doc["ratio"] == 1.0

    def test_compare_json_file(self, run_dir, tmp_path):
        a = str(run_dir / "curves" / "sum-partial_trial_*.csv")
        b = str(run_dir / "curves" / "naive-full_trial_*.csv")
        out = tmp_path / "cmp.json"
        assert main(["compare", "--a", a, "--b", b, "--budget", "16", "--json", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["ratio"] == pytest.approx(doc["err_a"] / doc["err_b"])

    def test_budget_beyond_curves(self, run_dir):
        glob = str(run_dir / "curves" / "sum-partial_trial_*.csv")
        assert main(["compare", "--a", glob, "--b", glob, "--budget", "500"]) == 2

    def test_schema_mismatch(self, run_dir, tmp_path):
        bad = tmp_path / "x_trial_0.csv"
        bad.write_text("iter,foo\n0,1\n")
        glob = str(run_dir / "curves" / "sum-partial_trial_*.csv")
        assert main(["compare", "--a", str(bad), "--b", glob, "--budget", "16"]) == 2

    def test_report(self, run_dir):
        # sum-partial stops at 5*3 + 3 = 18 sims, naive-full at 3*(5 + 3) = 24
        assert main(["report", "--run", str(run_dir), "--budget", "20"]) == 0
        report = json.loads((run_dir / "report.json").read_text())
        assert set(report) == {"naive-full", "sum-partial"}
        assert report["sum-partial"]["trials"] == 2
        assert report["sum-partial"]["total_error_at_budget"] is None
        assert report["naive-full"]["total_error_at_budget"] > 0

    def test_report_missing_dir(self, tmp_path):
        assert main(["report", "--run", str(tmp_path)]) == 2
