"""Feature engineering: frames, filtering, resampling, tensor building."""
import math

import numpy as np
import pytest

from gsu.errors import DataError, ShapeError
from gsu.scene_model import (AgentTrack, FeatureConfig, FrameTransform, LanePolyline,
                             Scene, build_agent_features, build_map_features,
                             filter_nearest, make_frame, resample_lane, to_local,
                             to_world, wrap_angle)
from gsu.seeding import sub_rng


def straight_track(start, velocity, steps=4, hz=10.0, attribute="vehicle"):
    times = np.arange(steps + 1)[:, None] / hz
    v = np.asarray(velocity, dtype=float)
    positions = np.asarray(start, dtype=float) + times * v
    velocities = np.tile(v, (steps + 1, 1))
    return AgentTrack(positions=positions, velocities=velocities,
                      attribute=attribute, bbox=(4.8, 1.8))


def one_agent_scene(track, lanes=()):
    return Scene(agents=[track], lanes=list(lanes), target_agent_id=0)


class TestMakeFrame:
    def test_heading_from_motion(self):
        # ends at (3, 4) after moving along +y
        track = straight_track((3.0, 3.6), (0.0, 1.0))
        frame = make_frame(one_agent_scene(track))
        np.testing.assert_allclose(frame.origin, [3.0, 4.0])
        assert frame.heading == pytest.approx(math.pi / 2.0)

    def test_identity_case(self):
        track = straight_track((-0.4, 0.0), (1.0, 0.0))
        frame = make_frame(one_agent_scene(track))
        np.testing.assert_allclose(frame.origin, [0.0, 0.0], atol=1e-12)
        assert frame.heading == pytest.approx(0.0)

    def test_stationary_falls_back_with_warning(self):
        track = straight_track((5.0, 5.0), (0.0, 0.0))
        with pytest.warns(UserWarning):
            frame = make_frame(one_agent_scene(track))
        assert frame.heading == 0.0

    def test_target_out_of_range(self):
        with pytest.raises(DataError):
            Scene(agents=[straight_track((0, 0), (1, 0))], lanes=[], target_agent_id=3)


class TestToLocal:
    def test_identity_rotation(self):
        tf = FrameTransform(origin=np.zeros(2), heading=0.0)
        np.testing.assert_allclose(to_local(tf, [2.0, 3.0]), [2.0, 3.0])

    def test_point_ahead_maps_to_plus_x(self):
        tf = FrameTransform(origin=np.zeros(2), heading=math.pi / 2.0)
        np.testing.assert_allclose(to_local(tf, [0.0, 5.0]), [5.0, 0.0], atol=1e-12)

    def test_translated_rotated_case(self):
        tf = FrameTransform(origin=np.array([1.0, 1.0]), heading=math.pi / 2.0)
        np.testing.assert_allclose(to_local(tf, [1.0, 3.0]), [2.0, 0.0], atol=1e-12)

    def test_round_trip(self):
        rng = sub_rng(0, "frames")
        for _ in range(100):
            tf = FrameTransform(origin=rng.normal(scale=50, size=2),
                                heading=rng.uniform(-math.pi, math.pi))
            p = rng.normal(scale=80, size=2)
            np.testing.assert_allclose(to_world(tf, to_local(tf, p)), p, atol=1e-9)

    def test_distances_preserved(self):
        rng = sub_rng(1, "frames")
        for _ in range(100):
            tf = FrameTransform(origin=rng.normal(scale=50, size=2),
                                heading=rng.uniform(-math.pi, math.pi))
            p, q = rng.normal(scale=80, size=(2, 2))
            d_world = np.linalg.norm(p - q)
            d_local = np.linalg.norm(to_local(tf, p) - to_local(tf, q))
            assert abs(d_world - d_local) < 1e-9

    def test_target_at_origin_with_x_aligned_motion(self):
        rng = sub_rng(2, "frames")
        for _ in range(20):
            vel = rng.normal(size=2)
            if np.linalg.norm(vel) < 0.6:
                vel = vel + 1.0
            track = straight_track(rng.normal(scale=30, size=2), vel)
            scene = one_agent_scene(track)
            tf = make_frame(scene)
            here = to_local(tf, track.positions[-1])
            np.testing.assert_allclose(here, [0.0, 0.0], atol=1e-9)
            motion = to_local(tf, track.positions[-1]) - to_local(tf, track.positions[-2])
            assert abs(motion[1]) < 1e-9

    def test_wrap_angle_range(self):
        for theta in np.linspace(-12.0, 12.0, 101):
            assert -math.pi < wrap_angle(theta) <= math.pi


class TestFilterNearest:
    def test_sorts_by_distance(self):
        points = [np.array([9.0, 0.0]), np.array([1.0, 0.0]), np.array([4.0, 0.0])]
        order, mask = filter_nearest(points, np.zeros(2), cap=2)
        np.testing.assert_array_equal(order, [1, 2])
        np.testing.assert_array_equal(mask, [True, True])

    def test_padding_when_fewer_items(self):
        rng = sub_rng(3, "filter")
        points = list(rng.normal(size=(5, 2)))
        order, mask = filter_nearest(points, np.zeros(2), cap=20)
        assert len(order) == 5
        assert mask.sum() == 5 and not mask[5:].any()

    def test_tie_breaks_to_lower_index(self):
        points = [np.array([2.0, 0.0]), np.array([0.0, 2.0]), np.array([1.0, 0.0])]
        order, _ = filter_nearest(points, np.zeros(2), cap=3)
        np.testing.assert_array_equal(order, [2, 0, 1])

    def test_permutation_invariant_selection(self):
        rng = sub_rng(4, "filter")
        points = rng.normal(scale=10, size=(12, 2))
        base_order, _ = filter_nearest(list(points), np.zeros(2), cap=6)
        base_set = {tuple(points[i]) for i in base_order}
        for _ in range(10):
            perm = rng.permutation(12)
            order, _ = filter_nearest(list(points[perm]), np.zeros(2), cap=6)
            assert {tuple(points[perm][i]) for i in order} == base_set

    def test_lane_items_use_nearest_point(self):
        far_lane = np.array([[100.0, 0.0], [101.0, 0.0]])
        xs = np.linspace(-500.0, 500.0, 201)                   # passes right by origin
        long_lane = np.stack([xs, np.ones_like(xs)], axis=1)
        order, _ = filter_nearest([far_lane, long_lane], np.zeros(2), cap=1)
        assert order[0] == 1

    def test_cap_must_be_positive(self):
        with pytest.raises(ShapeError):
            filter_nearest([np.zeros(2)], np.zeros(2), cap=0)


class TestResampleLane:
    def test_straight_lane_uniform_split(self):
        lane = LanePolyline(points=np.array([[0.0, 0.0], [10.0, 0.0]]))
        segs = resample_lane(lane, 5)
        assert segs.shape == (5, 2, 2)
        lengths = np.linalg.norm(segs[:, 1] - segs[:, 0], axis=1)
        np.testing.assert_allclose(lengths, 2.0, atol=1e-12)

    def test_single_segment_is_endpoints(self):
        lane = LanePolyline(points=np.array([[0.0, 0.0], [3.0, 0.0], [3.0, 4.0]]))
        segs = resample_lane(lane, 1)
        np.testing.assert_allclose(segs[0, 0], [0.0, 0.0])
        np.testing.assert_allclose(segs[0, 1], [3.0, 4.0])

    def test_segments_share_endpoints(self):
        rng = sub_rng(5, "resample")
        pts = np.cumsum(rng.uniform(0.5, 2.0, size=(9, 2)), axis=0)
        segs = resample_lane(LanePolyline(points=pts), 7)
        np.testing.assert_allclose(segs[1:, 0], segs[:-1, 1], atol=1e-12)

    def test_quarter_circle_chord_deviation(self):
        radius = 30.0
        theta = np.linspace(0.0, math.pi / 2.0, 1000)
        arc = radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        segs = resample_lane(LanePolyline(points=arc), 8)
        # max deviation of the chords from the circle is the sagitta
        worst = 0.0
        for seg in segs:
            for u in np.linspace(0.0, 1.0, 50):
                point = seg[0] * (1 - u) + seg[1] * u
                worst = max(worst, abs(radius - np.linalg.norm(point)))
        assert worst < radius * (1.0 - math.cos(math.pi / 32.0))

    def test_degenerate_polyline_rejected(self):
        with pytest.raises(DataError):
            LanePolyline(points=np.array([[1.0, 1.0], [1.0, 1.0]]))


class TestBuildFeatures:
    def test_lone_target_fills_slot_zero(self, tiny_feat):
        scene = one_agent_scene(straight_track((0.0, 0.0), (5.0, 0.0)))
        tensor = build_agent_features(scene, make_frame(scene), tiny_feat)
        assert tensor.valid_mask[0] and not tensor.valid_mask[1:].any()
        assert np.all(tensor.data[1:] == 0.0)
        assert tensor.slot_indices[0] == 0

    def test_motion_vector_step_matches_speed(self, tiny_feat):
        scene = one_agent_scene(straight_track((0.0, 0.0), (5.0, 0.0)))
        tensor = build_agent_features(scene, make_frame(scene), tiny_feat)
        row = tensor.data[0, 0]
        assert row[2] - row[0] == pytest.approx(0.5, abs=1e-9)   # end_x - start_x at 10 Hz
        assert row[4] == pytest.approx(5.0)                      # v_x in local frame

    def test_attribute_one_hot(self, tiny_feat):
        scene = one_agent_scene(straight_track((0.0, 0.0), (5.0, 0.0)))
        tensor = build_agent_features(scene, make_frame(scene), tiny_feat)
        np.testing.assert_array_equal(tensor.data[0, 0, 6:], [1.0, 0.0, 0.0])
        ped = straight_track((2.0, 2.0), (1.0, 0.0), attribute="pedestrian")
        ped_scene = Scene(agents=[straight_track((0, 0), (5, 0)), ped],
                          lanes=[], target_agent_id=0)
        tensor = build_agent_features(ped_scene, make_frame(ped_scene), tiny_feat)
        np.testing.assert_array_equal(tensor.data[1, 0, 6:], [0.0, 1.0, 0.0])

    def test_target_always_slot_zero_even_if_far(self, tiny_feat):
        target = straight_track((0.0, 0.0), (5.0, 0.0))
        near = straight_track((0.5, 0.5), (5.0, 0.0))
        scene = Scene(agents=[near, target], lanes=[], target_agent_id=1)
        tensor = build_agent_features(scene, make_frame(scene), tiny_feat)
        assert tensor.slot_indices[0] == 1
        assert tensor.slot_indices[1] == 0

    def test_history_length_mismatch(self, tiny_feat):
        scene = one_agent_scene(straight_track((0.0, 0.0), (5.0, 0.0), steps=9))
        with pytest.raises(ShapeError):
            build_agent_features(scene, make_frame(scene), tiny_feat)

    def test_no_lanes_fully_padded(self, tiny_feat):
        scene = one_agent_scene(straight_track((0.0, 0.0), (5.0, 0.0)))
        tensor = build_map_features(scene, make_frame(scene), tiny_feat)
        assert not tensor.valid_mask.any()
        assert np.all(tensor.data == 0.0)

    def test_single_lane_row_zero(self, tiny_feat):
        lane = LanePolyline(points=np.array([[0.0, 2.0], [30.0, 2.0]]), attributes=(1, 0))
        scene = one_agent_scene(straight_track((0.0, 0.0), (5.0, 0.0)), lanes=[lane])
        tensor = build_map_features(scene, make_frame(scene), tiny_feat)
        assert tensor.valid_mask[0] and not tensor.valid_mask[1:].any()
        # lane attributes appended to every segment row
        np.testing.assert_array_equal(tensor.data[0, :, 4:],
                                      np.tile([1.0, 0.0], (tiny_feat.lane_segments, 1)))

    def test_padded_rows_zero_valid_rows_flagged(self, tiny_feat):
        rng = sub_rng(6, "features")
        agents = [straight_track(rng.normal(scale=20, size=2), rng.normal(size=2) + 1.0)
                  for _ in range(7)]
        scene = Scene(agents=agents, lanes=[], target_agent_id=0)
        tensor = build_agent_features(scene, make_frame(scene), tiny_feat)
        for slot in range(tiny_feat.n_agents):
            if tensor.valid_mask[slot]:
                assert np.any(tensor.data[slot] != 0.0)
            else:
                assert np.all(tensor.data[slot] == 0.0)
