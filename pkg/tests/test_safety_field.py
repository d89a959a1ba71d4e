"""Field energies, bounding-box quadrature, and force normalization."""
import math

import numpy as np
import pytest

from gsu.errors import DataError
from gsu.safety_field import (AgentSnapshot, BboxPose, FieldParams, average_over_bbox,
                              bbox_grid, dynamic_energy, ego_pose_from_snapshot,
                              normalize_forces, render_field, static_energy,
                              total_energy, vif_vector, virtual_force,
                              write_grid_image, write_grid_text)
from gsu.scene_model import AgentTrack, Scene
from gsu.seeding import sub_rng

DEFAULTS = FieldParams()


def snapshot(pos, vel, attribute="vehicle"):
    return AgentSnapshot(position=np.asarray(pos, float), velocity=np.asarray(vel, float),
                         attribute=attribute)


def ego_pose(center=(0.0, 0.0), heading=0.0, velocity=(0.0, 0.0)):
    return BboxPose(center=np.asarray(center, float), heading=heading,
                    length=4.8, width=1.8, velocity=np.asarray(velocity, float))


class TestStaticEnergy:
    def test_direct_evaluation(self):
        # G=1, mass=1500, a=b=c=1, v=10, r=10 -> 1500 * 11 / 100
        e = static_energy((0.0, 0.0), 10.0, (10.0, 0.0), DEFAULTS)
        assert e == pytest.approx(165.0, abs=1e-12)

    def test_radius_clamp(self):
        inside = static_energy((0.0, 0.0), 10.0, (0.1, 0.0), DEFAULTS)
        at_clamp = static_energy((0.0, 0.0), 10.0, (DEFAULTS.r_min, 0.0), DEFAULTS)
        assert inside == at_clamp

    def test_inverse_square_law_exact(self):
        rng = sub_rng(0, "field")
        for _ in range(50):
            r = rng.uniform(DEFAULTS.r_min, 200.0)
            v = rng.uniform(0.0, 30.0)
            near = static_energy((0.0, 0.0), v, (r, 0.0), DEFAULTS)
            far = static_energy((0.0, 0.0), v, (2.0 * r, 0.0), DEFAULTS)
            assert 4.0 * far == near     # doubling r quarters the energy, exactly


class TestDynamicEnergy:
    def test_zero_relative_velocity_exact(self):
        e = dynamic_energy((0.0, 0.0), (7.0, 3.0), (10.0, 5.0), (7.0, 3.0), DEFAULTS)
        assert e == 0.0

    def test_orthogonal_geometry_drops_exponent(self):
        # dv perpendicular to dr: energy is k1 |dv|^2 / r
        e = dynamic_energy((0.0, 0.0), (0.0, 0.0), (10.0, 0.0), (0.0, 2.0), DEFAULTS)
        assert e == pytest.approx(DEFAULTS.k1 * 4.0 / 10.0, rel=1e-12)

    def test_closing_geometry_less_energetic_than_opening(self):
        # as written, the exponent rewards opening geometries
        closing = dynamic_energy((0.0, 0.0), (0.0, 0.0), (10.0, 0.0), (-3.0, 0.0), DEFAULTS)
        opening = dynamic_energy((0.0, 0.0), (0.0, 0.0), (10.0, 0.0), (3.0, 0.0), DEFAULTS)
        assert closing < opening

    def test_negate_exponent_switch(self):
        params = FieldParams(negate_exponent=True)
        closing = dynamic_energy((0.0, 0.0), (0.0, 0.0), (10.0, 0.0), (-3.0, 0.0), params)
        opening = dynamic_energy((0.0, 0.0), (0.0, 0.0), (10.0, 0.0), (3.0, 0.0), params)
        assert closing > opening


class TestTotalEnergy:
    def test_static_only(self):
        e = total_energy((10.0, 0.0), (10.0, 0.0), (0.0, 0.0), (10.0, 0.0), DEFAULTS)
        assert e == pytest.approx(165.0, abs=1e-12)

    def test_additivity_exact(self):
        rng = sub_rng(1, "field")
        for _ in range(50):
            sp = rng.normal(scale=20, size=2)
            sv = rng.normal(scale=5, size=2)
            qp = rng.normal(scale=20, size=2)
            qv = rng.normal(scale=5, size=2)
            s = static_energy(sp, float(np.linalg.norm(sv)), qp, DEFAULTS)
            d = dynamic_energy(sp, sv, qp, qv, DEFAULTS)
            assert total_energy(sp, sv, qp, qv, DEFAULTS) == s + d

    def test_both_zero(self):
        params = FieldParams()
        e = dynamic_energy((0, 0), (1, 0), (5, 0), (1, 0), params)
        assert e == 0.0


class TestVirtualForce:
    def test_constant_field_averages_to_itself(self):
        force = average_over_bbox(lambda pts: np.full(pts.shape[0], 2.75),
                                  ego_pose(), grid_res=0.2)
        assert force == pytest.approx(2.75, abs=1e-12)

    def test_grid_matches_planned_cell_count(self):
        centers = bbox_grid(ego_pose(), 0.2)
        assert centers.shape == (24 * 9, 2)

    def test_grid_res_too_coarse_rejected(self):
        with pytest.raises(DataError):
            bbox_grid(ego_pose(), 1.0)

    def test_halving_resolution_changes_little(self):
        rng = sub_rng(2, "field")
        for _ in range(20):
            direction = rng.normal(size=2)
            direction /= np.linalg.norm(direction)
            src = snapshot(direction * rng.uniform(2.0, 60.0), rng.normal(scale=5, size=2))
            pose = ego_pose(velocity=rng.normal(scale=5, size=2),
                            heading=rng.uniform(-math.pi, math.pi))
            coarse = virtual_force(src, pose, FieldParams(grid_res=0.2))
            fine = virtual_force(src, pose, FieldParams(grid_res=0.1))
            assert abs(coarse - fine) / fine < 0.01

    def test_far_field_limit(self):
        # source 1 km away, static only: the field is constant over the box
        src = snapshot((1000.0, 0.0), (12.0, 0.0))
        pose = ego_pose(velocity=(12.0, 0.0))   # same velocity -> no kinetic term
        force = virtual_force(src, pose, DEFAULTS)
        expected = DEFAULTS.g * DEFAULTS.vehicle_mass * (12.0 + 1.0) / 1000.0 ** 2
        assert force == pytest.approx(expected, rel=1e-3)

    def test_monotone_decay_with_distance(self):
        src = snapshot((0.0, 0.0), (0.0, 0.0))
        prev = math.inf
        for r in np.linspace(6.0, 80.0, 12):
            pose = ego_pose(center=(r, 0.0))
            force = virtual_force(src, pose, DEFAULTS)
            assert force < prev
            prev = force

    def test_pedestrian_mass_scaling(self):
        car = virtual_force(snapshot((12.0, 0.0), (0.0, 0.0)), ego_pose(), DEFAULTS)
        ped = virtual_force(snapshot((12.0, 0.0), (0.0, 0.0), "pedestrian"),
                            ego_pose(), DEFAULTS)
        assert ped == pytest.approx(car * DEFAULTS.pedestrian_mass_scale, rel=1e-12)


class TestNormalization:
    def test_min_max(self):
        np.testing.assert_allclose(normalize_forces([2.0, 4.0, 6.0]), [0.0, 0.5, 1.0])

    def test_single_positive_force(self):
        np.testing.assert_array_equal(normalize_forces([3.7]), [1.0])

    def test_all_zero(self):
        np.testing.assert_array_equal(normalize_forces([0.0, 0.0]), [0.0, 0.0])

    def test_bounds_and_extremes(self):
        rng = sub_rng(3, "field")
        for _ in range(50):
            raw = rng.uniform(0.1, 100.0, size=rng.integers(2, 9))
            out = normalize_forces(raw)
            assert out.min() >= 0.0 and out.max() <= 1.0
            if np.unique(raw).size > 1:
                assert (out == 1.0).sum() >= 1 and (out == 0.0).sum() >= 1

    def test_scale_invariance(self):
        rng = sub_rng(4, "field")
        raw = rng.uniform(0.5, 50.0, size=7)
        base = normalize_forces(raw)
        for lam in (2.0, 10.0, 1337.5, 1e-6):
            np.testing.assert_allclose(normalize_forces(lam * raw), base, atol=1e-12)


def two_step_track(pos, vel, attribute="vehicle", bbox=(4.8, 1.8)):
    pos = np.asarray(pos, float)
    vel = np.asarray(vel, float)
    times = np.arange(3)[:, None] * 0.1
    return AgentTrack(positions=pos + (times - 0.2) * vel,
                      velocities=np.tile(vel, (3, 1)), attribute=attribute, bbox=bbox)


class TestVifVector:
    def test_slots_align_and_pad(self):
        agents = [
            AgentSnapshot(np.zeros(2), np.array([10.0, 0.0])),
            snapshot((8.0, 0.0), (6.0, 0.0)),
            None,
            snapshot((-30.0, 3.0), (14.0, 0.0)),
        ]
        target = vif_vector(agents, ego_index=0, params=DEFAULTS)
        np.testing.assert_array_equal(target.valid_mask, [False, True, False, True])
        assert target.forces[0] == 0.0 and target.forces[2] == 0.0
        valid = target.forces[target.valid_mask]
        assert valid.max() == 1.0 and valid.min() == 0.0

    def test_rigid_transform_invariance(self):
        rng = sub_rng(5, "field")
        base = [AgentSnapshot(np.zeros(2), np.array([8.0, 1.0]), heading=0.1)]
        base += [snapshot(rng.normal(scale=25, size=2), rng.normal(scale=6, size=2))
                 for _ in range(4)]
        raw_base = [virtual_force(s, ego_pose_from_snapshot(base[0]), DEFAULTS)
                    for s in base[1:]]
        theta = rng.uniform(-math.pi, math.pi)
        shift = rng.normal(scale=100, size=2)
        rot = np.array([[math.cos(theta), -math.sin(theta)],
                        [math.sin(theta), math.cos(theta)]])
        moved = [AgentSnapshot(rot @ s.position + shift, rot @ s.velocity,
                               s.attribute, s.bbox, s.heading + theta) for s in base]
        raw_moved = [virtual_force(s, ego_pose_from_snapshot(moved[0]), DEFAULTS)
                     for s in moved[1:]]
        np.testing.assert_allclose(raw_moved, raw_base, rtol=1e-6)


class TestRenderField:
    def scene_with(self, others):
        target = two_step_track((0.0, 0.0), (5.0, 0.0))
        return Scene(agents=[target] + others, lanes=[], target_agent_id=0)

    def test_empty_scene_all_zero(self):
        grid = render_field(self.scene_with([]), ((-10, -10), (10, 10)), 1.0)
        assert np.all(grid == 0.0)

    def test_grid_dims_follow_resolution(self):
        grid = render_field(self.scene_with([]), ((0, 0), (10.2, 5.0)), 1.0)
        assert grid.shape == (5, 11)   # rows = ceil(5/1), cols = ceil(10.2/1)

    def test_single_agent_peak_at_nearest_cell(self):
        other = two_step_track((3.2, 1.4), (0.0, 0.0))
        grid = render_field(self.scene_with([other]), ((-10, -10), (10, 10)), 0.5)
        i, j = np.unravel_index(np.argmax(grid), grid.shape)
        cell = np.array([-10 + (j + 0.5) * 0.5, -10 + (i + 0.5) * 0.5])
        assert np.linalg.norm(cell - [3.2, 1.4]) < 0.5 * math.sqrt(2.0) / 2.0 + 1e-9

    def test_bad_resolution(self):
        with pytest.raises(DataError):
            render_field(self.scene_with([]), ((0, 0), (10, 10)), 0.0)

    def test_exports(self, tmp_path):
        other = two_step_track((4.0, 0.0), (0.0, 0.0))
        grid = render_field(self.scene_with([other]), ((-5, -5), (5, 5)), 1.0)
        write_grid_text(tmp_path / "grid.txt", grid, 1.0, (-5.0, -5.0))
        lines = (tmp_path / "grid.txt").read_text().splitlines()
        width, height = int(lines[0].split()[0]), int(lines[0].split()[1])
        assert (width, height) == (10, 10) and len(lines) == 11
        parsed = np.array([[float(v) for v in row.split()] for row in lines[1:]])
        np.testing.assert_allclose(parsed, grid)   # repr round-trips exactly
        write_grid_image(tmp_path / "grid.pgm", grid)
        blob = (tmp_path / "grid.pgm").read_bytes()
        assert blob.startswith(b"P5\n10 10\n255\n") and len(blob) == 13 + 100
