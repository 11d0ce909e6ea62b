import numpy as np
import pytest

from cgrepair.models import Affine, Box, Fcnn, Layer, LinReg1D, SingleNeuron, sigmoid
from cgrepair.specs import (
    AffineSat,
    Property,
    VertexPolytope,
    is_counterexample,
    robustness_property,
    satisfaction,
)
from cgrepair.search import (
    SearchConfig,
    Searcher,
    falsify_bim,
    make_searcher,
    monotone_vertex_descent,
    scripted_searcher,
    verify_bab,
    verify_single_neuron,
    verify_vertex_enum,
    vertex_searcher,
)

from helpers import random_fcnn, sample_in_box


def grid_minimum(model, prop, points_per_dim):
    box = prop.input_set
    axes = [np.linspace(lo, hi, points_per_dim) for lo, hi in zip(box.lo, box.hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    X = np.stack([m.ravel() for m in mesh], axis=1)
    Y = model.forward_many(X)
    vals = np.array([satisfaction(prop, y) for y in Y])
    idx = int(np.argmin(vals))
    return float(vals[idx]), X[idx]


def affine_scalar_property(a_vec, c, box, name="p"):
    """Property whose composed constraint is affine in x."""
    return Property(name, box, AffineSat(a_vec, c))


class TestVertexEnum:
    def test_most_violating_vertex(self):
        # g(x) = x1 - 2 x2 + 0.5 on [0,1]^2; vertex values 0.5, -1.5, 1.5, -0.5
        model = Affine([[1.0, -2.0]], [0.5])
        prop = affine_scalar_property([1.0], 0.0, Box([0.0, 0.0], [1.0, 1.0]))
        res = verify_vertex_enum(model, prop, SearchConfig())
        assert res.is_counterexample
        assert np.array_equal(res.x, [0.0, 1.0])
        assert res.value == pytest.approx(-1.5)

    def test_positive_affine_verifies_with_bound(self):
        model = Affine([[1.0, 0.0]], [1.0])
        prop = affine_scalar_property([1.0], 0.0, Box([0.0, 0.0], [1.0, 1.0]))
        res = verify_vertex_enum(model, prop, SearchConfig())
        assert res.is_verified
        assert res.lower_bound == pytest.approx(1.0)

    def test_one_dimensional_interval_checks_endpoints(self):
        model = LinReg1D(2.0, -1.0)
        prop = affine_scalar_property([1.0], 0.0, Box([-1.0], [3.0]))
        res = verify_vertex_enum(model, prop, SearchConfig())
        assert res.stats.evaluations == 2
        endpoint_vals = [satisfaction(prop, model.forward([x])) for x in (-1.0, 3.0)]
        assert res.value == pytest.approx(min(endpoint_vals))
        assert np.array_equal(res.x, [-1.0])

    def test_early_exit_returns_first_lexicographic_violation(self):
        model = Affine([[1.0, -2.0]], [0.5])
        prop = affine_scalar_property([1.0], 0.0, Box([0.0, 0.0], [1.0, 1.0]))
        res = verify_vertex_enum(model, prop, SearchConfig(mode="early_exit"))
        assert res.is_counterexample
        # lexicographic enumeration hits (0,1) before (1,1)
        assert np.array_equal(res.x, [0.0, 1.0])

    def test_polytope_vertices(self):
        model = Affine([[1.0, 1.0]], [-1.5])
        poly = VertexPolytope([[1.0, 1.0], [0.0, 0.0], [1.0, 0.0]])
        prop = affine_scalar_property([1.0], 0.0, poly)
        res = verify_vertex_enum(model, prop, SearchConfig())
        assert res.is_counterexample
        assert np.array_equal(res.x, [0.0, 0.0])
        assert res.value == pytest.approx(-1.5)

    def test_vertex_cap(self):
        model = Affine([np.ones(25)], [0.0])
        prop = affine_scalar_property([1.0], 0.0, Box(np.zeros(25), np.ones(25)))
        with pytest.raises(ValueError):
            verify_vertex_enum(model, prop, SearchConfig())

    def test_matches_grid_oracle_on_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(1, 4))
            model = Affine(rng.normal(size=(2, n)), rng.normal(size=2))
            box = Box(rng.uniform(-1, 0, n), rng.uniform(0.2, 1.2, n))
            prop = Property("p", box, AffineSat(rng.normal(size=2), rng.normal()))
            res = verify_vertex_enum(model, prop, SearchConfig())
            pts = {1: 10_001, 2: 101, 3: 22}[n]
            gmin, _ = grid_minimum(model, prop, pts)
            found = res.value if res.is_counterexample else res.lower_bound
            assert found == pytest.approx(gmin, abs=1e-9)


class TestSingleNeuron:
    def test_relu_counterexample_at_sign_vertex(self):
        model = SingleNeuron([1.0, -1.0], 0.0, "relu")
        prop = affine_scalar_property([1.0], -0.25, Box([0.0, 0.0], [1.0, 1.0]))
        res = verify_single_neuron(model, prop, SearchConfig())
        assert res.is_counterexample
        assert np.array_equal(res.x, [0.0, 1.0])
        assert res.value == pytest.approx(-0.25)
        # grid oracle agreement
        gmin, _ = grid_minimum(model, prop, 101)
        assert res.value == pytest.approx(gmin, abs=1e-9)

    def test_relu_nonnegativity_verifies(self):
        model = SingleNeuron([1.0, -1.0], 0.0, "relu")
        prop = affine_scalar_property([1.0], 1.0, Box([0.0, 0.0], [1.0, 1.0]))
        res = verify_single_neuron(model, prop, SearchConfig())
        assert res.is_verified
        assert res.lower_bound >= 1.0

    def test_negative_coefficient_maximizes_preactivation(self):
        model = SingleNeuron([1.0], 0.0, "sigmoid")
        prop = affine_scalar_property([-1.0], 0.9, Box([0.0], [3.0]))
        res = verify_single_neuron(model, prop, SearchConfig())
        assert res.is_counterexample
        assert np.array_equal(res.x, [3.0])
        assert res.value == pytest.approx(0.9 - float(sigmoid(np.array([3.0]))[0]))

    def test_matches_grid_oracle_on_random_instances(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(1, 4))
            model = SingleNeuron(
                rng.normal(size=n), float(rng.normal()), rng.choice(["relu", "sigmoid"])
            )
            box = Box(rng.uniform(-1, 0, n), rng.uniform(0.2, 1.2, n))
            prop = Property("p", box, AffineSat([float(rng.normal())], float(rng.normal())))
            res = verify_single_neuron(model, prop, SearchConfig())
            pts = {1: 10_001, 2: 101, 3: 22}[n]
            gmin, _ = grid_minimum(model, prop, pts)
            found = res.value if res.is_counterexample else res.lower_bound
            assert found == pytest.approx(gmin, abs=1e-9)

    def test_rejects_non_affine_sat(self):
        model = SingleNeuron([1.0], 0.0, "relu")
        prop = robustness_property([0.5], 0, 0.1, 2)
        with pytest.raises(ValueError):
            verify_single_neuron(model, prop, SearchConfig())


class TestMonotoneDescent:
    def test_affine_gradient_sign_selection(self):
        box = Box([0.0, 0.0], [1.0, 1.0])
        g = lambda x: float(x[0] - 2.0 * x[1])
        v = monotone_vertex_descent(g, box, box.center)
        assert np.array_equal(v, [0.0, 1.0])

    def test_never_increases_from_vertex(self):
        rng = np.random.default_rng(2)
        box = Box([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
        model = SingleNeuron([2.0, -3.0, 1.0], 1.0, "relu")
        g = lambda x: float(model.forward(x)[0])
        for _ in range(20):
            start = rng.integers(0, 2, size=3).astype(float)
            v = monotone_vertex_descent(g, box, start)
            assert g(v) <= g(start)

    def test_relu_neuron_descent_beats_sampling(self):
        rng = np.random.default_rng(3)
        box = Box([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
        model = SingleNeuron([2.0, -3.0, 1.0], 1.0, "relu")
        g = lambda x: float(model.forward(x)[0])
        samples = sample_in_box(rng, box, 100_000)
        sample_min = float(model.forward_many(samples).min())
        for _ in range(10):
            start = rng.uniform(size=3)
            v = monotone_vertex_descent(g, box, start)
            assert g(v) <= g(start)
            assert g(v) <= sample_min + 1e-12

    def test_start_outside_box_rejected(self):
        box = Box([0.0], [1.0])
        with pytest.raises(ValueError):
            monotone_vertex_descent(lambda x: 0.0, box, [2.0])


class TestBranchAndBound:
    def test_affine_model_single_node(self):
        model = Fcnn((Layer([[1.0, -2.0]], [0.5], "none"),))
        prop = affine_scalar_property([1.0], 0.0, Box([0.0, 0.0], [1.0, 1.0]))
        res = verify_bab(model, prop, SearchConfig(tolerance=1e-9))
        assert res.is_counterexample
        assert res.value == pytest.approx(-1.5, abs=1e-6)

    def test_optimal_matches_dense_grid(self):
        rng = np.random.default_rng(4)
        model = random_fcnn(rng, (2, 4, 4, 2), scale=0.8)
        prop = robustness_property([0.4, 0.6], label=0, epsilon=0.35, num_classes=2)
        res = verify_bab(model, prop, SearchConfig(tolerance=1e-6, max_nodes=500_000))
        gmin, _ = grid_minimum(model, prop, 1000)
        found = res.value if res.is_counterexample else res.lower_bound
        assert found == pytest.approx(gmin, abs=1e-3)

    def test_early_exit_value_bounded_by_optimal(self):
        rng = np.random.default_rng(5)
        found_pairs = 0
        for _ in range(10):
            model = random_fcnn(rng, (2, 5, 2), scale=1.0)
            center = rng.uniform(0.2, 0.8, size=2)
            prop = robustness_property(center, label=int(rng.integers(0, 2)), epsilon=0.3, num_classes=2)
            cfg = SearchConfig(tolerance=1e-6, max_nodes=500_000)
            opt = verify_bab(model, prop, cfg)
            early = verify_bab(model, prop, SearchConfig(mode="early_exit", tolerance=1e-6, max_nodes=500_000))
            if early.is_counterexample:
                assert opt.is_counterexample
                assert early.value < 0.0
                assert opt.value <= early.value + 1e-12
                found_pairs += 1
        assert found_pairs >= 2

    def test_budget_exhaustion_returns_unknown(self):
        rng = np.random.default_rng(6)
        model = random_fcnn(rng, (2, 6, 6, 2), scale=1.0)
        prop = robustness_property([0.5, 0.5], label=0, epsilon=0.4, num_classes=2)
        res = verify_bab(model, prop, SearchConfig(max_nodes=1))
        assert res.status == "unknown"
        assert res.stats.best_bound is not None


class TestBim:
    def test_finds_deep_violation_on_offset_line(self):
        # N(x) = -x on [0, 1] with f(y) = y: true minimum -1 at x = 1
        model = LinReg1D(-1.0, 0.0)
        prop = affine_scalar_property([1.0], 0.0, Box([0.0], [1.0]))
        res = falsify_bim(model, prop, SearchConfig(rng_seed=7))
        assert res.is_counterexample
        assert res.value <= -0.9

    def test_satisfied_property_gives_unknown(self):
        model = LinReg1D(1.0, 1.0)
        prop = affine_scalar_property([1.0], 0.0, Box([0.0], [1.0]))
        res = falsify_bim(model, prop, SearchConfig(rng_seed=8))
        assert res.status == "unknown"

    def test_counterexamples_revalidate(self):
        rng = np.random.default_rng(9)
        for seed in range(5):
            model = random_fcnn(rng, (2, 4, 2), scale=1.5)
            center = rng.uniform(0.2, 0.8, size=2)
            prop = robustness_property(center, label=int(rng.integers(0, 2)), epsilon=0.3, num_classes=2)
            res = falsify_bim(model, prop, SearchConfig(rng_seed=seed))
            if res.is_counterexample:
                assert is_counterexample(model, prop, res.x, threshold=0.0)
                assert satisfaction(prop, model.forward(res.x)) == res.value


class TestScripted:
    def test_replays_genuine_points_then_falls_back(self):
        model = LinReg1D(-1.0, 0.25)  # f(x) = 0.25 - x, violated for x > 0.25
        prop = affine_scalar_property([1.0], 0.0, Box([0.0], [1.0]))
        fallback = vertex_searcher(SearchConfig())
        searcher = scripted_searcher([[0.5], [0.1], [0.9]], fallback)
        first = searcher(model, prop)
        assert first.is_counterexample and np.array_equal(first.x, [0.5])
        # 0.1 is not a counterexample -> fallback finds the endpoint minimum
        second = searcher(model, prop)
        assert second.is_counterexample and np.array_equal(second.x, [1.0])
        third = searcher(model, prop)
        assert third.is_counterexample and np.array_equal(third.x, [0.9])
        exhausted = searcher(model, prop)
        assert exhausted.is_counterexample and np.array_equal(exhausted.x, [1.0])

    def test_empty_script_is_pure_delegation(self):
        model = LinReg1D(1.0, 1.0)
        prop = affine_scalar_property([1.0], 0.0, Box([0.0], [1.0]))
        searcher = scripted_searcher([], vertex_searcher(SearchConfig()))
        assert searcher(model, prop).is_verified
        assert searcher.complete


class TestContracts:
    def test_all_searchers_sound(self):
        rng = np.random.default_rng(10)
        cfg = SearchConfig(rng_seed=11, max_nodes=200_000)
        for _ in range(10):
            model = random_fcnn(rng, (2, 4, 2), scale=1.2)
            center = rng.uniform(0.2, 0.8, size=2)
            prop = robustness_property(center, label=int(rng.integers(0, 2)), epsilon=0.25, num_classes=2)
            for run in (verify_bab, falsify_bim):
                res = run(model, prop, cfg)
                if res.is_counterexample:
                    assert is_counterexample(model, prop, res.x, threshold=0.0)

    def test_determinism_with_fixed_seed(self):
        rng = np.random.default_rng(12)
        model = random_fcnn(rng, (2, 4, 2), scale=1.2)
        prop = robustness_property([0.5, 0.5], label=0, epsilon=0.3, num_classes=2)
        cfg = SearchConfig(rng_seed=13, parallelism=1)
        for run in (verify_bab, falsify_bim, verify_vertex_enum):
            if run is verify_vertex_enum:
                use = Property("p", prop.input_set, AffineSat([1.0, -1.0], 0.0))
            else:
                use = prop
            a = run(model, use, cfg)
            b = run(model, use, cfg)
            assert a.status == b.status
            assert (a.x is None) == (b.x is None)
            if a.x is not None:
                assert np.array_equal(a.x, b.x)
                assert a.value == b.value
            if a.lower_bound is not None:
                assert a.lower_bound == b.lower_bound
            assert a.stats.nodes_explored == b.stats.nodes_explored
            assert a.stats.evaluations == b.stats.evaluations

    def test_make_searcher_selectors(self):
        cfg = SearchConfig()
        for sel, complete in [
            ("vertex", True),
            ("neuron", True),
            ("bab:optimal", True),
            ("bab:early", True),
            ("bim", False),
        ]:
            s = make_searcher(sel, cfg)
            assert isinstance(s, Searcher)
            assert s.complete == complete
        with pytest.raises(ValueError):
            make_searcher("magic", cfg)
