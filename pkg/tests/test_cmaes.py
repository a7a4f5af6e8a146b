import numpy as np
import pytest

from rankpipe.cmaes import NoFeasiblePointFound, cma_es_constrained
from rankpipe.space import ParameterDescriptor, ParameterSpace, continuous_space


def sphere(point):
    return sum(v * v for v in point.values())


class TestCmaEs:
    def test_sphere(self):
        space = continuous_space(5, -5.0, 5.0, default=3.0)
        result = cma_es_constrained(sphere, [], space, budget=2000, seed=1)

        assert result.best_objective < 1e-4
        assert result.evaluations <= 2000
        assert len(result.archive) == result.evaluations

    def test_linear_constraint_active_at_optimum(self):
        space = continuous_space(3, -5.0, 5.0, default=3.0)
        result = cma_es_constrained(
            sphere, [lambda p: 1.0 - p["x0"]], space, budget=3000, seed=2
        )

        assert result.best["x0"] >= 1.0
        assert result.best_objective == pytest.approx(1.0, abs=0.1)
        for entry in result.feasible_entries():
            assert entry.point["x0"] >= 1.0

    def test_infeasible_start(self):
        space = continuous_space(3, -5.0, 5.0, default=-3.0)
        result = cma_es_constrained(
            sphere, [lambda p: 1.0 - p["x0"]], space, budget=3000, seed=3
        )
        assert result.best["x0"] >= 1.0
        # the start point is recorded, but without an objective
        assert result.archive[0].objective is None
        assert not result.archive[0].feasible

    def test_bounds_are_respected(self):
        space = continuous_space(2, 1.0, 5.0, default=3.0)
        result = cma_es_constrained(sphere, [], space, budget=1000, seed=4)

        assert result.best_objective == pytest.approx(2.0, abs=0.05)
        for entry in result.feasible_entries():
            assert all(1.0 <= v <= 5.0 for v in entry.point.values())
        assert any(not e.in_bounds for e in result.archive)

    def test_deterministic_for_a_seed(self):
        space = continuous_space(3, -5.0, 5.0, default=3.0)
        a = cma_es_constrained(sphere, [], space, budget=200, seed=7)
        b = cma_es_constrained(sphere, [], space, budget=200, seed=7)
        assert [e.objective for e in a.archive] == [e.objective for e in b.archive]

    def test_minimum_budget(self):
        space = continuous_space(2, -5.0, 5.0, default=1.0)
        result = cma_es_constrained(sphere, [], space, budget=50)
        assert len(result.archive) == 50
        assert result.best_objective <= 2.0

    @pytest.mark.parametrize("budget", [0, 1, 49])
    def test_budget_below_minimum(self, budget):
        with pytest.raises(ValueError):
            cma_es_constrained(sphere, [], continuous_space(2, -1.0, 1.0), budget=budget)

    def test_no_feasible_point(self):
        space = continuous_space(2, -5.0, 5.0)
        with pytest.raises(NoFeasiblePointFound) as e:
            cma_es_constrained(sphere, [lambda p: 1.0], space, budget=50)
        assert len(e.value.archive) == 50

    def test_mixed_space(self):
        space = ParameterSpace(
            [
                ParameterDescriptor("batch", "integer", 30, 1, 45),
                ParameterDescriptor("mode", "categorical", "a", categories=("a", "b", "c")),
            ]
        )
        cost = {"a": 3.0, "b": 0.0, "c": 1.0}

        def objective(p):
            return (p["batch"] - 12) ** 2 + cost[p["mode"]]

        result = cma_es_constrained(objective, [], space, budget=500, seed=5)
        assert result.best.to_dict() == {"batch": 12, "mode": "b"}
        assert isinstance(result.best["batch"], int)
        assert np.isclose(result.best_objective, 0.0)
