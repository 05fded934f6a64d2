import numpy as np
import pytest

from neurotraj.episodes import (
    Episode,
    EpisodeError,
    ManeuverSpec,
    TrajectorySample,
    episodes_equal,
    expert_motion,
    file_sha256,
    generate_episode,
    generate_suite,
    read_episode,
    relabel_causal,
    stop_scenario_sampler,
    write_episode,
    write_manifest,
    verify_manifest,
    N_SAMPLES,
    WINDOW,
)
from neurotraj.gridmap import GridSpec, PotentialMap


# --- generation ---------------------------------------------------------------

def test_straight_constant_speed_label():
    ep = generate_episode(ManeuverSpec("straight", v0=5.0), seed=1)
    t = ep.times
    np.testing.assert_allclose(ep.positions[:, 0], 5.0 * t, atol=1e-9)
    np.testing.assert_allclose(ep.positions[:, 1], 0.0, atol=1e-12)
    np.testing.assert_allclose(ep.velocities, np.tile([5.0, 0.0], (N_SAMPLES, 1)), atol=1e-12)
    np.testing.assert_allclose(ep.accelerations, 0.0, atol=1e-12)
    assert ep.v0 == pytest.approx(5.0)
    assert len(ep.map_window) == WINDOW
    assert ep.obstacle_map is None


def test_turn_circular_motion():
    ep = generate_episode(ManeuverSpec("turn", v0=5.0, curvature=0.1), seed=2)
    radius = 10.0
    # Positions lie on the circle centered at (0, radius).
    d = np.linalg.norm(ep.positions - np.array([0.0, radius]), axis=1)
    np.testing.assert_allclose(d, radius, atol=1e-9)
    # Centripetal acceleration magnitude v^2 * kappa.
    np.testing.assert_allclose(
        np.linalg.norm(ep.accelerations, axis=1), 2.5, atol=1e-9)
    np.testing.assert_allclose(ep.speeds, 5.0, atol=1e-12)


def test_stop_profile_reaches_zero_before_margin():
    ep = generate_episode(
        ManeuverSpec("stop", v0=4.0, obstacle=(10.0, 0.0)), seed=3)
    # Constant deceleration a = v0^2 / (2 * 8): the 3 s label travels 7.5 m < 8.
    arc = np.linalg.norm(np.diff(ep.positions, axis=0), axis=1).sum()
    assert arc < 8.0
    assert ep.speeds[-1] == pytest.approx(1.0, abs=1e-9)
    assert ep.speeds[0] == pytest.approx(4.0)
    # Deceleration is constant while moving.
    np.testing.assert_allclose(ep.accelerations[:-1, 0], -1.0, atol=1e-9)


def test_infeasible_stop_rejected():
    with pytest.raises(EpisodeError, match="infeasible stop"):
        generate_episode(ManeuverSpec("stop", v0=4.0, obstacle=(1.5, 0.0)), seed=4)


def test_sharp_turn_leaving_grid_rejected():
    with pytest.raises(EpisodeError, match="(leaves the grid|infeasible)"):
        generate_episode(ManeuverSpec("turn", v0=8.0, curvature=0.2), seed=5)


def test_label_velocity_matches_fd_of_position():
    eps = 1e-6
    specs = [
        ManeuverSpec("straight", v0=5.0),
        ManeuverSpec("straight", v0=4.0, target_speed=6.0, jerk_limit=2.0),
        ManeuverSpec("straight", v0=5.0, lateral_offset=0.7),
        ManeuverSpec("turn", v0=5.0, curvature=0.08),
        ManeuverSpec("stop", v0=4.0, obstacle=(12.0, 0.0)),
    ]
    for spec in specs:
        t = np.linspace(0.05, 2.95, 15)
        pos_p, vel_p, _ = expert_motion(spec, t + eps)
        pos_m, vel_m, _ = expert_motion(spec, t - eps)
        pos, vel, acc = expert_motion(spec, t)
        fd_vel = (pos_p - pos_m) / (2 * eps)
        fd_acc = (vel_p - vel_m) / (2 * eps)
        assert np.abs(vel - fd_vel).max() < 1e-9 * max(1.0, np.abs(vel).max())
        # Acceleration has kinks at profile phase changes; sample away from them.
        assert np.abs(acc - fd_acc).max() < 1e-5


def test_generation_deterministic():
    spec = ManeuverSpec("turn", v0=4.0, curvature=0.05)
    a = generate_episode(spec, seed=77)
    b = generate_episode(spec, seed=77)
    assert episodes_equal(a, b)


def test_window_frames_differ_by_motion():
    # A path viewed from points on itself looks identical (straights and
    # constant-curvature arcs are self-similar), so only obstacle scenes
    # show frame-to-frame window motion: the obstacle slides closer.
    stop = generate_episode(ManeuverSpec("stop", v0=4.0, obstacle=(12.0, 0.0)), seed=6)
    assert not np.array_equal(stop.map_window[0].values, stop.map_window[3].values)
    straight = generate_episode(ManeuverSpec("straight", v0=5.0), seed=6)
    assert np.array_equal(straight.map_window[0].values, straight.map_window[3].values)


# --- relabeling ---------------------------------------------------------------

def test_relabel_without_collision_returns_same_object():
    ep = generate_episode(ManeuverSpec("straight", v0=5.0), seed=7)
    assert relabel_causal(ep) is ep


def test_relabel_crossing_frozen_kinematics():
    # Crossing: constant 4 m/s straight through an obstacle zone; craft the
    # obstacle map so the first colliding sample is at arclength 10.0 m.
    ep = generate_episode(ManeuverSpec("straight", v0=4.0), seed=8)
    values = np.zeros((64, 64))
    spec = ep.map_window[0].spec
    # Cell at (10.8, 0.25): sample k=25 (s=10.0) is 0.838 m away (collides),
    # sample k=24 (s=9.6) is 1.226 m away (does not).
    row, col = spec.xy_to_cell(10.75, 0.25)
    values[row, col] = 0.6
    ep = Episode(ep.id, ep.map_window, ep.v0, ep.label, ep.scenario_tag,
                 obstacle_map=PotentialMap(spec, values), meta=ep.meta)
    out = relabel_causal(ep, margin=2.0, vehicle_radius=1.0)
    assert out is not ep
    # s_c = 10 -> d_s = 8, a_req = v0^2 / (2 d_s) = 1.
    assert out.meta["collision_arclength"] == pytest.approx(10.0, abs=0.26)
    # Frozen closed-form values at t = 3: v = 1 m/s, distance 7.5 m < 8.
    d_s = max(0.0, out.meta["collision_arclength"] - 2.0)
    a_req = 16.0 / (2 * d_s)
    assert out.speeds[-1] == pytest.approx(4.0 - a_req * 3.0, abs=1e-9)
    arc = np.linalg.norm(np.diff(out.positions, axis=0), axis=1).sum()
    assert arc == pytest.approx(4.0 * 3 - 0.5 * a_req * 9, abs=1e-9)
    assert arc < d_s


def test_relabel_exact_example_values():
    # Direct constant-deceleration oracle: v0=4, s_c=10 -> at t=3, v=1, s=7.5.
    v0, s_c, margin = 4.0, 10.0, 2.0
    d_s = s_c - margin
    a_req = v0**2 / (2 * d_s)
    assert a_req == pytest.approx(1.0)
    assert v0 - a_req * 3.0 == pytest.approx(1.0)
    assert v0 * 3.0 - 0.5 * a_req * 9.0 == pytest.approx(7.5)


def test_relabel_immediate_stop_pins_all_samples():
    ep = generate_episode(ManeuverSpec("straight", v0=4.0), seed=9)
    values = np.zeros((64, 64))
    spec = ep.map_window[0].spec
    # Hot cell right at the start: collision at s_c < margin -> d_s = 0.
    row, col = spec.xy_to_cell(0.75, 0.25)
    values[row, col] = 0.9
    ep = Episode(ep.id, ep.map_window, ep.v0, ep.label, ep.scenario_tag,
                 obstacle_map=PotentialMap(spec, values), meta=ep.meta)
    out = relabel_causal(ep)
    for s in out.label:
        np.testing.assert_array_equal(s.position, out.label[0].position)
        assert s.speed == 0.0
        np.testing.assert_array_equal(s.velocity, [0.0, 0.0])
        np.testing.assert_array_equal(s.acceleration, [0.0, 0.0])
    np.testing.assert_array_equal(out.label[0].position, [0.0, 0.0])


def test_relabel_idempotent_and_safe_on_stop_suite():
    eps = generate_suite(12, seed=123, relabel=False,
                         sampler=stop_scenario_sampler)
    for ep in eps:
        once = relabel_causal(ep)
        twice = relabel_causal(once)
        assert episodes_equal(once, twice)
        # No relabeled sample may sit within the inflated obstacle cells.
        if once.obstacle_map is not None:
            hot = np.argwhere(once.obstacle_map.values >= 0.5)
            if len(hot):
                centers = np.stack([once.obstacle_map.spec.cell_to_xy(i, j)
                                    for i, j in hot])
                d = np.linalg.norm(
                    once.positions[:, None, :] - centers[None, :, :], axis=2)
                assert d.min() > 1.0


# --- file round trip ------------------------------------------------------------

def test_episode_round_trip_bit_identical(tmp_path):
    ep = generate_episode(
        ManeuverSpec("stop", v0=4.0, obstacle=(12.0, 0.3)), seed=10)
    write_episode(ep, tmp_path / "ep.json")
    back = read_episode(tmp_path / "ep.json")
    assert episodes_equal(ep, back)


def test_truncated_episode_file_rejected(tmp_path):
    ep = generate_episode(ManeuverSpec("straight", v0=5.0), seed=11)
    write_episode(ep, tmp_path / "ep.json")
    raw = (tmp_path / "ep.json").read_text()
    (tmp_path / "ep.json").write_text(raw[: len(raw) // 2])
    with pytest.raises(EpisodeError, match="malformed episode JSON"):
        read_episode(tmp_path / "ep.json")


def test_missing_field_named(tmp_path):
    import json

    ep = generate_episode(ManeuverSpec("straight", v0=5.0), seed=12)
    write_episode(ep, tmp_path / "ep.json")
    doc = json.loads((tmp_path / "ep.json").read_text())
    del doc["label"]["vx"]
    (tmp_path / "ep.json").write_text(json.dumps(doc))
    with pytest.raises(EpisodeError, match="label.vx"):
        read_episode(tmp_path / "ep.json")


def test_manifest_checksums(tmp_path):
    eps = generate_suite(5, seed=5, relabel=True)
    entries = []
    for k, ep in enumerate(eps):
        files = write_episode(ep, tmp_path / f"ep{k:03d}.json")
        entries.append({
            "id": ep.id,
            "file": f"ep{k:03d}.json",
            "seed": ep.meta["seed"],
            "files": {p.name: file_sha256(p) for p in files},
        })
    write_manifest(entries, tmp_path / "manifest.json", command="gen", seed=5)
    assert verify_manifest(tmp_path / "manifest.json") == []
    # Corrupt one map file; the mismatch must be reported.
    victim = tmp_path / "ep002.json"
    victim.write_text(victim.read_text() + " ")
    bad = verify_manifest(tmp_path / "manifest.json")
    assert "ep002.json" in bad


# --- invariants ------------------------------------------------------------------

def test_episode_invariants_enforced():
    ep = generate_episode(ManeuverSpec("straight", v0=5.0), seed=13)
    with pytest.raises(EpisodeError, match="map_window"):
        Episode("x", ep.map_window[:3], ep.v0, ep.label, "straight")
    bad_label = list(ep.label)
    bad_label[0] = TrajectorySample(0.0, np.array([1.0, 0.0]),
                                    np.array([5.0, 0.0]), np.zeros(2), 5.0)
    with pytest.raises(EpisodeError, match="origin"):
        Episode("x", ep.map_window, ep.v0, tuple(bad_label), "straight")


def test_merge_offset_episode_starts_at_origin_with_path_offset():
    ep = generate_episode(
        ManeuverSpec("straight", v0=5.0, lateral_offset=0.8), seed=14)
    np.testing.assert_array_equal(ep.label[0].position, [0.0, 0.0])
    # By the end of the merge the label runs along the path, 0.8 m right
    # of the start in the vehicle frame.
    assert ep.positions[-1][1] == pytest.approx(-0.8, abs=1e-9)
    assert ep.speeds[0] == pytest.approx(5.0)
