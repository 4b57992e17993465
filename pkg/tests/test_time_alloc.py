import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snapplan.errors import ArgumentError
from snapplan.gradcheck import central_fd, rel_error
from snapplan.nn.mlp import Mlp
from snapplan.time_alloc import (
    TAU_MIN,
    GdTrace,
    TimeAllocation,
    allocate_accel_decel,
    allocate_gradient_descent,
    allocate_learned,
    allocate_uniform,
    floor_renormalize,
    project_capped_simplex,
    random_path,
    snap_objective,
    tan_features,
    total_time,
)


def line(*xs):
    return np.array([[x, 0.0, 0.0] for x in xs])


class TestTotalTime:
    def test_two_points(self):
        assert total_time(line(0, 2), 1.0) == 2.0

    def test_coincident_points_hit_floor(self):
        assert total_time(line(1, 1, 1), 1.0) == 2 * TAU_MIN

    def test_unit_spaced(self):
        assert total_time(line(0, 1, 2, 3, 4), 2.0) == 2.0

    def test_rejects_nonpositive_speed(self):
        with pytest.raises(ArgumentError):
            total_time(line(0, 1), 0.0)


class TestUniform:
    def test_chord_proportional(self):
        np.testing.assert_allclose(allocate_uniform(line(0, 1, 2, 4), 4.0).durations, [1, 1, 2])

    def test_equal_chords(self):
        d = allocate_uniform(line(0, 1, 2, 3), 1.5).durations
        np.testing.assert_allclose(d, [0.5, 0.5, 0.5])

    def test_zero_chord_floor(self):
        np.testing.assert_allclose(allocate_uniform(line(0, 0, 1), 1.0).durations, [0.05, 0.95])

    def test_equal_duration_variant(self):
        np.testing.assert_allclose(allocate_uniform(line(0, 1, 5), 3.0, equal=True).durations, [1.5, 1.5])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=8), st.floats(0.5, 20.0))
    def test_floor_renormalize_invariants(self, w, total):
        out = floor_renormalize(np.array(w), total)
        assert out.sum() == pytest.approx(total, rel=1e-12)
        assert np.all(out >= TAU_MIN - 1e-15)

    def test_floor_budget_too_small(self):
        with pytest.raises(ArgumentError):
            floor_renormalize(np.ones(4), 0.1)


class TestAccelDecel:
    def test_velocity_limited(self):
        d = allocate_accel_decel(line(0, 1), 15 / 8, 1e9).durations
        assert d[0] == pytest.approx(1.0, rel=1e-12)

    def test_zero_length(self):
        assert allocate_accel_decel(line(0, 0), 1.0, 1.0).durations[0] == TAU_MIN

    def test_doubling_length_doubles_duration(self):
        d = allocate_accel_decel(line(0, 1, 3), 1.0, 1e9).durations
        assert d[1] == pytest.approx(2 * d[0], rel=1e-12)

    def test_acceleration_limited(self):
        L, a = 2.0, 0.5
        d = allocate_accel_decel(line(0, L), 1e9, a).durations[0]
        assert 10 * L / (np.sqrt(3) * d**2) == pytest.approx(a, rel=1e-12)


class TestProjection:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 100_000), st.integers(1, 8))
    def test_projection_is_feasible_and_idempotent(self, seed, n):
        rng = np.random.default_rng(seed)
        total = n * TAU_MIN + rng.uniform(0.0, 10.0)
        x = project_capped_simplex(rng.normal(size=n) * 5, total)
        assert x.sum() == pytest.approx(total, rel=1e-12, abs=1e-12)
        assert np.all(x >= TAU_MIN - 1e-12)
        np.testing.assert_allclose(project_capped_simplex(x, total), x, atol=1e-12)

    def test_projection_is_nearest_point(self):
        rng = np.random.default_rng(0)
        v, total = rng.normal(size=4), 2.0
        x = project_capped_simplex(v, total)
        for _ in range(200):
            y = project_capped_simplex(x + 0.3 * rng.normal(size=4), total)
            assert np.linalg.norm(v - x) <= np.linalg.norm(v - y) + 1e-12


class TestGradientDescent:
    def test_objective_gradient(self):
        xi = random_path(np.random.default_rng(1), 4)
        tau = allocate_uniform(xi, total_time(xi, 1.0)).durations
        _, g = snap_objective(xi, tau, with_grad=True)
        fd = central_fd(lambda t: snap_objective(xi, t), tau, 1e-6 * tau.min())
        assert rel_error(g, fd) <= 1e-5

    def test_symmetric_path_gives_equal_durations(self):
        xi = np.array([[0.0, 0, 0], [1.0, 0, 0], [1.0, 1.0, 0]])
        d = allocate_gradient_descent(xi, None, 3.0).durations
        assert abs(d[0] - d[1]) <= 1e-3

    def test_two_segment_grid_oracle(self):
        xi = np.array([[0.0, 0, 0], [0.5, 0.3, 0], [3.0, -1.0, 0.5]])
        total = 2.5
        gd = snap_objective(xi, allocate_gradient_descent(xi, None, total).durations)
        grid = [snap_objective(xi, [t, total - t]) for t in np.linspace(TAU_MIN, total - TAU_MIN, 101)]
        assert gd <= 1.02 * min(grid)

    @pytest.mark.parametrize("seed", range(5))
    def test_not_worse_than_uniform_and_monotone(self, seed):
        xi = random_path(np.random.default_rng(seed))
        total = total_time(xi, 1.0)
        trace = GdTrace()
        alloc = allocate_gradient_descent(xi, None, total, trace=trace)
        assert alloc.total == pytest.approx(total, rel=1e-12)
        assert np.all(alloc.durations >= TAU_MIN - 1e-12)
        assert snap_objective(xi, alloc.durations) <= snap_objective(xi, allocate_uniform(xi, total).durations)
        assert np.all(np.diff(trace.objectives) <= 0)

    def test_total_time_scaling(self):
        xi = random_path(np.random.default_rng(4))
        total = total_time(xi, 1.0)
        a = allocate_gradient_descent(xi, None, total).fractions
        b = allocate_gradient_descent(xi, None, 2 * total).fractions
        np.testing.assert_allclose(a, b, atol=1e-3)


class TestLearned:
    def make_tan(self, n_kp=5, seed=0):
        return Mlp.init([4 * (n_kp - 1), 16, n_kp - 1], "relu", "softmax", np.random.default_rng(seed), zero_last=True)

    def test_zero_last_layer_gives_uniform_fractions(self):
        xi = random_path(np.random.default_rng(0))
        alloc = allocate_learned(xi, 8.0, self.make_tan())
        np.testing.assert_allclose(alloc.fractions, 0.25, atol=1e-15)

    def test_wrong_keypoint_count(self):
        with pytest.raises(ArgumentError):
            allocate_learned(random_path(np.random.default_rng(0), 4), 3.0, self.make_tan())

    def test_translation_invariance(self):
        rng = np.random.default_rng(3)
        xi = random_path(rng)
        tan = Mlp.init([16, 16, 4], "relu", "softmax", rng)
        a = allocate_learned(xi, 5.0, tan).fractions
        b = allocate_learned(xi + rng.normal(size=3) * 50, 5.0, tan).fractions
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_length_features_rotation_invariant(self):
        rng = np.random.default_rng(5)
        xi = random_path(rng)
        R, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        np.testing.assert_allclose(tan_features(xi)[-4:], tan_features(xi @ R.T)[-4:], atol=1e-12)


class TestTimeAllocationType:
    def test_rejects_nonpositive(self):
        with pytest.raises(ArgumentError):
            TimeAllocation([1.0, 0.0])

    def test_timestamps(self):
        np.testing.assert_allclose(TimeAllocation([1.0, 2.0]).timestamps, [1.0, 3.0])


@pytest.mark.parametrize("seed", range(3))
def test_random_path_chords_in_range(seed):
    xi = random_path(np.random.default_rng(seed), 6)
    L = np.linalg.norm(np.diff(xi, axis=0), axis=1)
    assert xi.shape == (6, 3) and np.all((L >= 0.1) & (L <= 10.0))
