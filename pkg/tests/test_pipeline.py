import math

import numpy as np
import pytest

from shadowgen.gpt import ModelConfig, init_params
from shadowgen.pipeline import (
    COLUMNS,
    ExactSampler,
    ModelSampler,
    PredictionPlan,
    evaluate,
    evaluation_grid,
    exact_value,
    parse_observable,
    parse_point,
    placements,
    predict_observables,
    read_table,
    write_table,
)
from shadowgen.qsim import HamiltonianSpec, ParameterDomainError, solve
from shadowgen.shadow import MoMConfig, estimate_energy


class CountingSampler:
    def __init__(self, inner):
        self.inner = inner
        self.calls = []

    def sample(self, g, count, seed, stream=0):
        self.calls.append((g, count, stream))
        return self.inner.sample(g, count, seed, stream)


def tfim_plan(points, count=20_000, n=6, observables=None, seed=0):
    obs = observables or ("energy", "zz_1", "zz_2", "xstr_1", "xstr_2", "renyi2_2")
    return PredictionPlan("tfim", n, points, {"energy": count, "renyi": count}, obs, MoMConfig(), seed)


@pytest.fixture(scope="module")
def tiny_model():
    cfg = ModelConfig(n_qubits=4, param_dim=1, d_model=16, n_layers=1, n_heads=2, d_ff=32)
    return ModelSampler(cfg, init_params(cfg, 0), chunk=512)


class TestObservables:
    def test_parse(self):
        assert parse_observable("energy") == ("energy", 0)
        assert parse_observable("zz_3") == ("zz", 3)
        assert parse_observable("renyi2_3") == ("renyi2", 3)
        for bad in ("zz", "zz_0", "foo_1", "xstr_-1"):
            with pytest.raises(ValueError):
                parse_observable(bad)

    def test_placements_cyclic(self):
        places = placements("zz_2", 5)
        assert len(places) == 5
        assert str(places[4]) == "Z1 Z4"
        regions = placements("renyi2_3", 4)
        assert regions[3] == [3, 0, 1]

    def test_placement_limits(self):
        with pytest.raises(ValueError):
            placements("zz_6", 6)
        with pytest.raises(ValueError):
            placements("renyi2_7", 10)

    def test_exact_value_translation_average(self):
        spec = HamiltonianSpec("tfim", (0.3,), 6)
        gs = solve(spec)
        from shadowgen.qsim import expect_pauli, zz
        assert exact_value(gs, "zz_2", spec) == pytest.approx(expect_pauli(gs, zz(0, 2)), abs=1e-12)


class TestPlan:
    def test_default_tfim(self):
        plan = PredictionPlan.default("tfim")
        assert len(plan.points) == 41
        assert plan.points[1] == (0.025,)
        assert plan.counts == {"energy": 300_000, "renyi": 300_000}

    def test_default_cluster(self):
        plan = PredictionPlan.default("cluster")
        assert len(plan.points) == 66
        assert plan.counts == {"energy": 200_000, "renyi": 300_000}
        assert all(min(p) >= 0 and abs(sum(p) - 1) < 1e-12 for p in plan.points)

    def test_invalid_point(self):
        with pytest.raises(ParameterDomainError):
            PredictionPlan("cluster", 6, [(0.5, 0.5, 0.5)], {"energy": 10}, ("energy",))

    def test_nonpositive_count(self):
        with pytest.raises(ValueError, match="positive"):
            PredictionPlan("tfim", 6, [(0.5,)], {"energy": 0}, ("energy",))

    def test_digest_stable(self):
        assert PredictionPlan.default("tfim").digest() == PredictionPlan.default("tfim").digest()
        assert PredictionPlan.default("tfim", seed=1).digest() != PredictionPlan.default("tfim").digest()

    def test_evaluation_grid(self):
        assert evaluation_grid("tfim")[-1] == (1.0,)
        assert len(set(evaluation_grid("cluster"))) == 66


class TestModelShadows:
    def test_reproducible(self, tiny_model):
        a = tiny_model.sample((0.5,), 1000, seed=3)
        b = tiny_model.sample((0.5,), 1000, seed=3)
        assert np.array_equal(a.bases, b.bases) and np.array_equal(a.outcomes, b.outcomes)

    def test_params_verbatim(self, tiny_model):
        ens = tiny_model.sample(0.3, 10, seed=0)
        assert np.all(ens.params == 0.3)

    def test_uniform_bases(self, tiny_model):
        ens = tiny_model.sample((0.5,), 3000, seed=1)
        sigma = math.sqrt((1 / 3) * (2 / 3) / len(ens))
        for label in range(3):
            assert np.all(np.abs((ens.bases == label).mean(axis=0) - 1 / 3) < 5 * sigma)

    def test_invalid_g(self, tiny_model):
        with pytest.raises(ParameterDomainError):
            tiny_model.sample((1.5,), 10, seed=0)


class TestPrediction:
    def test_one_ensemble_per_count(self):
        sampler = CountingSampler(ExactSampler("tfim", 4))
        plan = PredictionPlan("tfim", 4, [(0.2,), (0.8,)], {"energy": 200, "renyi": 300},
                              ("energy", "zz_1", "renyi2_2"))
        reports = predict_observables(sampler, plan)
        assert len(reports) == 6
        assert [c for _, c, _ in sampler.calls] == [200, 300, 200, 300]
        assert len({s for _, _, s in sampler.calls}) == 4

    def test_ferromagnet_zz(self):
        rep = predict_observables(ExactSampler("tfim", 6), tfim_plan([(0.0,)], observables=("zz_1",)))[0]
        assert abs(rep.value - 1) < 5 * rep.stderr
        assert min(rep.group_values) <= rep.value <= max(rep.group_values)

    def test_oracle_stub_closure(self):
        plan = tfim_plan([(0.0,), (0.3,), (0.5,), (0.7,), (1.0,)])
        rows = evaluate(ExactSampler("tfim", 6), plan)
        assert len(rows) == len(plan.points) * len(plan.observables)
        for r in rows:
            if r["observable"].startswith("renyi2"):
                assert r["abs_err"] < 0.1, r
            else:
                assert r["abs_err"] <= 5 * r["stderr"] + 1e-12, r

    def test_cluster_renyi_spt(self):
        plan = PredictionPlan("cluster", 6, [(0.0, 0.0, 1.0)], {"renyi": 50_000}, ("renyi2_3",))
        (row,) = evaluate(ExactSampler("cluster", 6), plan)
        assert row["exact"] == pytest.approx(2 * math.log(2), abs=1e-9)
        assert abs(row["predicted"] - row["exact"]) < 0.1

    def test_stderr_shrinks(self):
        spec = HamiltonianSpec("tfim", (0.5,), 6)
        sampler = ExactSampler("tfim", 6)
        small = estimate_energy(sampler.sample((0.5,), 10_000, seed=1), spec)
        large = estimate_energy(sampler.sample((0.5,), 100_000, seed=2), spec)
        assert 2.1 <= small.stderr / large.stderr <= 4.5


@pytest.fixture(scope="module")
def rows():
    plan = tfim_plan([(0.0,), (0.25,), (0.75,)], count=2000)
    return evaluate(ExactSampler("tfim", 6), plan)


class TestEvaluate:
    def test_error_columns(self, rows):
        for r in rows:
            assert r["abs_err"] == abs(r["predicted"] - r["exact"])
            if r["exact"] != 0:
                assert r["rel_err"] == r["abs_err"] / abs(r["exact"])

    def test_ferromagnet_energy_oracle(self, rows):
        row = next(r for r in rows if r["point"] == "0.0" and r["observable"] == "energy")
        assert row["exact"] == pytest.approx(-6, abs=1e-12)

    def test_kramers_wannier_columns(self, rows):
        zz = [r for r in rows if r["observable"].startswith("zz")]
        assert zz and all(r["kw_dual_exact"] is not None for r in zz)
        for r in zz:
            if parse_point(r["point"])[0] in (0.25, 0.75):
                assert r["kw_dual_exact"] == pytest.approx(r["exact"], abs=1e-6)
                assert r["kw_gap"] is not None
        # g = 0 has no dual point (g = 1) in the plan
        assert next(r for r in zz if r["point"] == "0.0")["kw_gap"] is None

    def test_sorted(self, rows):
        keys = [(parse_point(r["point"]), r["observable"]) for r in rows]
        assert keys == sorted(keys)

    def test_triality_column(self):
        pts = [(0.2, 0.3, 0.5), (0.5, 0.2, 0.3)]
        plan = PredictionPlan("cluster", 6, pts, {"energy": 500}, ("energy", "zz_2"))
        rows = evaluate(ExactSampler("cluster", 6), plan)
        energies = [r for r in rows if r["observable"] == "energy"]
        assert all(r["triality_dev"] < 1e-9 for r in energies)
        assert energies[0]["exact"] == pytest.approx(energies[1]["exact"], abs=1e-9)
        assert all(r["triality_dev"] is None for r in rows if r["observable"] != "energy")

    def test_table_round_trip(self, rows, tmp_path):
        path = tmp_path / "table.tsv"
        write_table(rows, path, {"plan": "abc", "seed": 0})
        back, prov = read_table(path)
        assert prov == {"plan": "abc", "seed": "0"}
        assert back == [{c: r[c] for c in COLUMNS} for r in rows]

    def test_deterministic_bytes(self, tmp_path):
        plan = tfim_plan([(0.4,)], count=1000)
        for name in ("a", "b"):
            write_table(evaluate(ExactSampler("tfim", 6), plan), tmp_path / name, {"plan": plan.digest()})
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_model_sampler_deterministic(self, tiny_model, tmp_path):
        plan = PredictionPlan("tfim", 4, [(0.5,)], {"energy": 600}, ("energy", "zz_1"))
        for name in ("a", "b"):
            write_table(evaluate(tiny_model, plan), tmp_path / name, {})
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
