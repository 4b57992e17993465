import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import sampled_signed_distance

from snapplan.cost_map import (
    Box,
    Cylinder,
    EsdfGrid,
    Scene,
    Sphere,
    build_sdf,
    collision_check,
    gaussian_smooth,
    load_grid,
    load_scene,
    query,
    query_many,
    random_scene,
    save_grid,
    save_scene,
    sdf_to_cost,
    write_slice_csv,
)
from snapplan.errors import ArgumentError, ResourceError
from snapplan.gradcheck import check_esdf, interior_cell_points


def sphere_scene():
    # voxel centres land on multiples of 0.1 including the origin
    return Scene((-3.05, -3.05, -3.05), (3.05, 3.05, 3.05), (Sphere((0, 0, 0), 1.0),))


def linear_grid(dims=(6, 5, 4), res=0.5):
    x = np.arange(dims[0]) * res
    vals = np.broadcast_to(x[:, None, None], dims).copy()
    return EsdfGrid(origin=(0, 0, 0), resolution=res, signed_distance=vals, values=vals)


class TestSignedDistance:
    def test_sphere_outside_and_centre(self):
        grid = build_sdf(sphere_scene(), 0.1)
        assert query(grid, (2.0, 0, 0), "sd").cost == pytest.approx(1.0, abs=0.05)
        assert query(grid, (0.0, 0, 0), "sd").cost == pytest.approx(-1.0, abs=0.05)

    def test_primitive_distances(self):
        box = Box((0, 0, 0), (1, 2, 3))
        assert box.signed_distance(np.array([2.0, 1.0, 1.0])) == pytest.approx(1.0)
        assert box.signed_distance(np.array([0.5, 1.0, 1.5])) == pytest.approx(-0.5)
        cyl = Cylinder((0, 0), 1.0, (0, 2))
        assert cyl.signed_distance(np.array([3.0, 0.0, 1.0])) == pytest.approx(2.0)
        assert cyl.signed_distance(np.array([0.0, 0.0, 3.0])) == pytest.approx(1.0)
        assert cyl.signed_distance(np.array([0.0, 0.0, 1.0])) == pytest.approx(-1.0)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_surface_sampling(self, seed):
        rng = np.random.default_rng(seed)
        scene = random_scene(rng, 1 + seed)
        grid = build_sdf(scene, 0.1)
        X, Y, Z = np.meshgrid(*[grid.centers(a) for a in range(3)], indexing="ij")
        pts = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)
        ref = sampled_signed_distance(scene, pts, np.random.default_rng(100 + seed))
        err = np.abs(grid.signed_distance.reshape(-1) - ref)
        assert err.max() <= grid.resolution * np.sqrt(3)

    def test_oversize_grid(self):
        with pytest.raises(ResourceError):
            build_sdf(sphere_scene(), 0.1, max_voxels=1000)

    def test_bad_primitives(self):
        with pytest.raises(ArgumentError):
            Box((0, 0, 0), (1, 0, 1))
        with pytest.raises(ArgumentError):
            Sphere((0, 0, 0), -1.0)
        with pytest.raises(ArgumentError):
            Scene((0, 0, 0), (1, 1, 1), (Sphere((5, 5, 5), 0.5),))


class TestCost:
    def test_empty_scene_is_zero(self):
        grid = sdf_to_cost(build_sdf(Scene((0, 0, 0), (2, 2, 1)), 0.1))
        assert np.all(grid.values == 0.0)

    def test_surface_voxel_has_d_safe_cost(self):
        sd = np.ones((3, 3, 3)) * 5.0
        sd[1, 1, 1] = 0.0
        grid = sdf_to_cost(EsdfGrid((0, 0, 0), 1.0, sd), d_safe=0.7, sigma=0.0)
        assert grid.values[1, 1, 1] == 0.7
        assert grid.values.sum() == 0.7

    def test_monotone_in_distance(self):
        sd = np.linspace(-2, 3, 60).reshape(60, 1, 1)
        cost = sdf_to_cost(EsdfGrid((0, 0, 0), 1.0, sd), sigma=0.0).values.reshape(-1)
        assert np.all(np.diff(cost) <= 0)
        below = sd.reshape(-1) < 1.0
        assert np.all(np.diff(cost[below]) < 0)

    def test_smoothing_preserves_interior_mass(self):
        rng = np.random.default_rng(0)
        field = np.zeros((40, 40, 40))
        field[14:26, 14:26, 14:26] = rng.random((12, 12, 12))
        out = gaussian_smooth(field, 2.0)
        assert out.sum() == pytest.approx(field.sum(), rel=1e-6)

    def test_smoothing_keeps_constants_at_edges(self):
        out = gaussian_smooth(np.full((8, 9, 10), 3.0), 2.0)
        np.testing.assert_allclose(out, 3.0, rtol=1e-14)

    def test_adjacent_gap_after_smoothing(self):
        grid = sdf_to_cost(build_sdf(random_scene(np.random.default_rng(4), 4), 0.1), sigma=1.0)
        for axis in range(3):
            assert np.abs(np.diff(grid.values, axis=axis)).max() <= grid.d_safe / 2

    def test_bad_parameters(self):
        grid = build_sdf(sphere_scene(), 0.5)
        with pytest.raises(ArgumentError):
            sdf_to_cost(grid, d_safe=0.0)
        with pytest.raises(ArgumentError):
            sdf_to_cost(grid, sigma=-1.0)


class TestQuery:
    def test_voxel_centre_returns_stored_value(self):
        grid = sdf_to_cost(build_sdf(random_scene(np.random.default_rng(1), 3), 0.1))
        i, j, k = 7, 11, 13
        p = grid.origin + grid.resolution * np.array([i, j, k])
        assert query(grid, p).cost == pytest.approx(grid.values[i, j, k], abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.0, 2.5), st.floats(0.0, 2.0), st.floats(0.0, 1.5))
    def test_linear_field(self, x, y, z):
        s = query(linear_grid(), (x, y, z))
        assert s.cost == pytest.approx(x, abs=1e-12)
        np.testing.assert_allclose(s.gradient, [1.0, 0.0, 0.0], atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        res = check_esdf(n_points=200, seed=2)
        assert res.passed, res

    def test_interior_points_stay_inside_cells(self):
        grid = linear_grid()
        pts = interior_cell_points(grid, np.random.default_rng(0), 100)
        frac = (pts - grid.origin) / grid.resolution % 1.0
        assert np.all((frac >= 0.15) & (frac <= 0.85))

    def test_out_of_bounds_is_clamped(self):
        s = query(linear_grid(), (-1.0, 1.0, 1.0))
        assert s.clamped and s.cost == 0.0 and s.gradient[0] == 0.0

    def test_nan_rejected(self):
        with pytest.raises(ArgumentError):
            query(linear_grid(), (np.nan, 0, 0))

    def test_batch_matches_single(self):
        grid = linear_grid()
        pts = np.random.default_rng(0).uniform(0, 2, (10, 3))
        vals, grads, _ = query_many(grid, pts)
        for p, v, g in zip(pts, vals, grads):
            s = query(grid, p)
            assert s.cost == v and np.array_equal(s.gradient, g)


class TestCollision:
    def test_sphere_centre_collides(self):
        grid = build_sdf(sphere_scene(), 0.1)
        assert collision_check(grid, [[0.0, 0.0, 0.0]]).collision

    def test_far_samples_are_clear(self):
        grid = build_sdf(sphere_scene(), 0.1)
        pts = np.array([[2.5, 0, 0], [0, 2.5, 0], [-2.1, -2.1, 0]])
        assert not collision_check(grid, pts, margin=0.3).collision

    def test_empty_samples(self):
        with pytest.raises(ArgumentError):
            collision_check(build_sdf(sphere_scene(), 0.5), np.zeros((0, 3)))

    def test_agrees_with_analytic_check(self):
        rng = np.random.default_rng(3)
        scene = random_scene(rng, 3)
        grid = build_sdf(scene, 0.1)
        margin, tol = 0.3, grid.resolution * np.sqrt(3)
        checked = 0
        for _ in range(100):
            a, b = rng.uniform(-1.4, 1.4, (2, 3))
            pts = a + np.linspace(0, 1, 40)[:, None] * (b - a)
            exact = scene.signed_distance(pts).min()
            if abs(exact - margin) <= tol:
                continue
            assert collision_check(grid, pts, margin).collision == (exact < margin)
            checked += 1
        assert checked >= 50


class TestIo:
    def test_grid_round_trip(self, tmp_path):
        grid = sdf_to_cost(build_sdf(random_scene(np.random.default_rng(0), 2), 0.2))
        save_grid(grid, tmp_path / "g.esdf")
        back = load_grid(tmp_path / "g.esdf")
        assert back.dims == grid.dims and back.resolution == grid.resolution
        np.testing.assert_allclose(back.values, grid.values, rtol=1e-6, atol=1e-6)
        np.testing.assert_allclose(back.signed_distance, grid.signed_distance, rtol=1e-6, atol=1e-6)

    def test_bad_magic_and_truncation(self, tmp_path):
        (tmp_path / "bad.esdf").write_bytes(b"NOPE" + bytes(100))
        with pytest.raises(ArgumentError):
            load_grid(tmp_path / "bad.esdf")
        (tmp_path / "short.esdf").write_bytes(b"ES")
        with pytest.raises(ArgumentError):
            load_grid(tmp_path / "short.esdf")

    def test_scene_round_trip(self, tmp_path):
        scene = random_scene(np.random.default_rng(5), 4)
        save_scene(scene, tmp_path / "s.json")
        back = load_scene(tmp_path / "s.json")
        assert back.to_json() == scene.to_json()

    def test_malformed_json_reports_position(self, tmp_path):
        (tmp_path / "s.json").write_text('{"bounds": {\n  "min": [0, 0, 0],\n  "max": [1, 1 1]}}')
        with pytest.raises(ArgumentError, match="line 3, column"):
            load_scene(tmp_path / "s.json")

    def test_unknown_obstacle(self, tmp_path):
        data = {"bounds": {"min": [0, 0, 0], "max": [1, 1, 1]}, "obstacles": [{"type": "cone"}]}
        (tmp_path / "s.json").write_text(json.dumps(data))
        with pytest.raises(ArgumentError, match="cone"):
            load_scene(tmp_path / "s.json")

    def test_slice_picks_nearest_layer(self, tmp_path):
        grid = sdf_to_cost(build_sdf(sphere_scene(), 0.5))
        k = write_slice_csv(grid, 0.1, tmp_path / "s.csv")
        assert k == int(np.argmin(np.abs(grid.centers(2) - 0.1)))
        rows = (tmp_path / "s.csv").read_text().splitlines()
        assert len(rows) == grid.dims[1] and len(rows[0].split(",")) == grid.dims[0]
