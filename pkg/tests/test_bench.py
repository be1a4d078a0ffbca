import json

import numpy as np
import pytest

from sumgp.bench import (AGGREGATE_HEADER, TRIAL_HEADER, BenchError, CurvePoint, CurveSet,
                         LearningCurve, build_preset, compare, export, load_preset,
                         read_curve_set, read_trial_csv, run_trials)
from sumgp.optimizer import expected_sim_count
from sumgp.sim import reward, surrogate_simulate
from sumgp.space import slice_params

FAST = dict(multistart_count=4, ascent_steps=8)


@pytest.fixture(scope="module")
def small_curves():
    return run_trials(build_preset("exp1"), ["naive", "sum-partial"], n_trials=2,
                      iterations=4, **FAST)


class TestPresets:
    @pytest.mark.parametrize("name,objects,obs,dims", [
        ("exp1", 4, 3, 5), ("exp2", 5, 6, 7), ("exp3", 6, 8, 9), ("exp4", 6, 8, 9)])
    def test_sizes(self, name, objects, obs, dims):
        p = build_preset(name)
        assert (p.n_objects, p.n_observations, p.space.total_dims) == (objects, obs, dims)

    def test_exp1_roster(self):
        p = build_preset("exp1")
        assert [(o.name, o.material_class.value) for o in p.space.objects] == [
            ("slime", "deformable"), ("cylinder", "rigid"), ("ladle", "rigid"), ("cube", "rigid")]

    def test_nested_presets(self):
        # each preset extends the previous one
        p1, p2, p3 = (build_preset(n) for n in ("exp1", "exp2", "exp3"))
        assert p2.scenes[:3] == p1.scenes and p3.scenes[:6] == p2.scenes
        assert [o.name for o in p3.space.objects][4:] == ["sponge", "bag"]

    def test_exp4_schedule(self):
        p3, p4 = build_preset("exp3"), build_preset("exp4")
        assert p4.schedule == {0: [0, 1, 2], 50: [3, 4, 5], 100: [6, 7]}
        assert p4.scenes == p3.scenes
        np.testing.assert_array_equal(p4.theta_star, p3.theta_star)

    def test_every_deformable_has_two_partners(self):
        p = build_preset("exp3")
        for o in p.space.objects:
            if o.material_class.value == "deformable":
                partners = {oid for s in p.scenes if o.id in s.k for oid in s.k} - {o.id}
                assert len(partners) >= 2

    @pytest.mark.parametrize("name", ["exp1", "exp2", "exp3"])
    def test_generative_identity(self, name):
        p = build_preset(name)
        for obs in p.dataset():
            pred = surrogate_simulate(obs.scene, slice_params(p.space, p.theta_star, obs.k))
            assert reward(obs.observed, pred) == 0.0

    def test_unknown(self):
        with pytest.raises(BenchError):
            build_preset("exp9")

    def test_missing_theta_star(self):
        from importlib import resources
        doc = json.loads(resources.files("sumgp.presets").joinpath("exp1.json").read_text())
        del doc["theta_star"]["cube.mass"]
        with pytest.raises(BenchError):
            load_preset(doc)


class TestRunTrials:
    def test_structure(self, small_curves):
        assert set(small_curves) == {"naive-full", "sum-partial"}
        for cs in small_curves.values():
            assert [t.seed for t in cs.trials] == [0, 1]
            assert all(len(t.points) == 4 for t in cs.trials)

    def test_budget(self, small_curves):
        for mode, cs in small_curves.items():
            for t in cs.trials:
                assert t.initial.sim_count == expected_sim_count(mode, 3, 5, 0)
                for p in t.points:
                    assert p.sim_count == expected_sim_count(mode, 3, 5, p.iteration + 1)

    def test_best_error_non_increasing(self, small_curves):
        for cs in small_curves.values():
            for t in cs.trials:
                best = t.errors("best_error")
                assert np.all(np.diff(best) <= 0)

    def test_deterministic(self, small_curves):
        again = run_trials(build_preset("exp1"), ["sum-partial"], n_trials=2, iterations=4, **FAST)
        for a, b in zip(small_curves["sum-partial"].trials, again["sum-partial"].trials):
            assert a.all_points() == b.all_points()

    def test_n_trials_checked(self):
        with pytest.raises(BenchError):
            run_trials(build_preset("exp1"), ["sum"], n_trials=0)

    def test_naive_cannot_run_incremental(self):
        with pytest.raises(BenchError):
            run_trials(build_preset("exp4"), ["naive"], n_trials=1, iterations=2)


def curve(seed, sims, errs):
    pts = [CurvePoint(i - 1, s, e, min(errs[:i + 1])) for i, (s, e) in enumerate(zip(sims, errs))]
    return LearningCurve("m", seed, pts[0], pts[1:])


class TestCompare:
    def test_self_ratio(self, small_curves):
        cs = small_curves["sum-partial"]
        assert compare(cs, cs, 17).ratio == 1.0

    def test_interpolation(self):
        a = CurveSet("a", [curve(0, [10, 20, 30], [4.0, 2.0, 1.0])])
        b = CurveSet("b", [curve(0, [10, 30], [8.0, 4.0])])
        c = compare(a, b, 25)
        assert (c.err_a, c.err_b) == (1.5, 5.0)
        assert c.ratio == pytest.approx(0.3)
        assert set(c.to_dict()) == {"budget", "err_a", "err_b", "ratio"}

    def test_median_over_trials(self):
        a = CurveSet("a", [curve(s, [0, 10], [e, e]) for s, e in enumerate([1.0, 5.0, 3.0])])
        assert a.median_at_budget(5) == 3.0

    def test_budget_out_of_range(self, small_curves):
        cs = small_curves["sum-partial"]
        with pytest.raises(BenchError):
            compare(cs, cs, 1000)
        with pytest.raises(BenchError):
            compare(cs, cs, 3)

    def test_at_post_seeding_budget(self, small_curves):
        cs = small_curves["naive-full"]
        c = compare(cs, cs, 15)
        assert c.err_a == np.median([t.initial.total_error for t in cs.trials])


class TestExport:
    def test_file_count(self, tmp_path):
        trials = [curve(s, [15, 18, 21], [3.0, 2.0, 2.5]) for s in range(10)]
        files = export({"naive-full": CurveSet("naive-full", trials),
                        "sum-partial": CurveSet("sum-partial", trials)}, tmp_path)
        assert len(files) == 22
        assert len(list(tmp_path.iterdir())) == 22

    def test_round_trip(self, small_curves, tmp_path):
        export(small_curves, tmp_path)
        for mode, cs in small_curves.items():
            back = read_curve_set(sorted(tmp_path.glob(f"{mode}_trial_*.csv")), mode)
            for a, b in zip(cs.trials, back.trials):
                assert a.seed == b.seed
                np.testing.assert_allclose(b.errors(), a.errors(), rtol=1e-9)
                np.testing.assert_array_equal(b.sims(), a.sims())

    def test_schemas(self, small_curves, tmp_path):
        export(small_curves, tmp_path)
        trial = (tmp_path / "sum-partial_trial_0.csv").read_text().splitlines()
        assert trial[0] == ",".join(TRIAL_HEADER)
        assert trial[1].startswith("-1,15,seed,")
        agg = (tmp_path / "sum-partial_aggregate.csv").read_text().splitlines()
        assert agg[0] == ",".join(AGGREGATE_HEADER)
        # one row per iteration
        assert [int(r.split(",")[0]) for r in agg[1:]] == [0, 1, 2, 3]

    def test_bad_header(self, tmp_path):
        p = tmp_path / "x_trial_0.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(BenchError):
            read_trial_csv(p)
