import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurotraj.gridmap import (
    GridError,
    GridSpec,
    IntentionPath,
    PotentialMap,
    build_goal_potential,
    build_obstacle_potential,
    compose,
    gaussian_kernel,
    read_map,
    write_map,
    write_pgm,
)

SPEC = GridSpec()


# --- independent oracles ----------------------------------------------------

def brute_force_smooth(mask: np.ndarray, sigma: float = 2.0, truncate: float = 3.0) -> np.ndarray:
    """Direct nested-loop truncated-Gaussian convolution, zero padding."""
    radius = int(truncate * sigma)
    rows, cols = mask.shape
    out = np.zeros_like(mask, dtype=float)
    for i in range(rows):
        for j in range(cols):
            acc = 0.0
            for di in range(-radius, radius + 1):
                for dj in range(-radius, radius + 1):
                    si, sj = i + di, j + dj
                    if 0 <= si < rows and 0 <= sj < cols:
                        acc += mask[si, sj] * np.exp(-(di * di + dj * dj) / (2 * sigma * sigma))
            out[i, j] = acc
    peak = out.max()
    return out / peak if peak > 0 else out


def brute_force_obstacle(cells, spec: GridSpec, sigma: float = 1.5) -> np.ndarray:
    out = np.zeros((spec.rows, spec.cols))
    for i in range(spec.rows):
        for j in range(spec.cols):
            x, y = spec.cell_to_xy(i, j)
            best = 0.0
            for (oi, oj) in cells:
                ox, oy = spec.cell_to_xy(oi, oj)
                d2 = (x - ox) ** 2 + (y - oy) ** 2
                best = max(best, np.exp(-d2 / (2 * sigma * sigma)))
            out[i, j] = best
    return out


# --- grid geometry ----------------------------------------------------------

def test_grid_covers_declared_extent():
    assert SPEC.extent_x == pytest.approx(32.0)
    assert SPEC.extent_y == pytest.approx(32.0)
    # Cell (0,0) center sits half a cell inside the coverage corner.
    assert SPEC.cell_to_xy(0, 0) == (0.25, -15.75)
    assert SPEC.cell_to_xy(63, 63) == (31.75, 15.75)


def test_cell_metric_round_trip_exact():
    for i in range(0, SPEC.rows, 7):
        for j in range(0, SPEC.cols, 7):
            x, y = SPEC.cell_to_xy(i, j)
            assert SPEC.xy_to_cell(x, y) == (i, j)


def test_in_bounds_edges():
    assert SPEC.in_bounds_xy(0.0, -16.0)
    assert not SPEC.in_bounds_xy(32.0, 0.0)
    assert not SPEC.in_bounds_xy(-0.01, 0.0)
    assert not SPEC.in_bounds_xy(0.0, 16.0)


# --- goal potential ---------------------------------------------------------

def straight_center_path(length=30.0):
    xs = np.arange(0.25, length, 0.25)
    return IntentionPath(np.stack([xs, np.zeros_like(xs)], axis=1))


def test_straight_path_peak_on_center_and_lateral_decay():
    pm = build_goal_potential(straight_center_path(), SPEC)
    vals = pm.values
    assert vals.max() == pytest.approx(1.0)
    # Center columns straddle y = 0 (centers at -0.25 and +0.25).
    mid = vals[32, :]  # a row well inside the path extent
    assert mid[31] == pytest.approx(1.0, abs=1e-9)
    assert mid[32] == pytest.approx(1.0, abs=1e-9)
    # Monotone decay with lateral distance until truncation kills it.
    left = mid[:32][::-1]  # from center outward
    diffs = np.diff(left)
    assert np.all(diffs <= 1e-12)


def test_single_point_path_radial_bump():
    x, y = SPEC.cell_to_xy(32, 32)
    pm = build_goal_potential(IntentionPath(np.array([[x, y]])), SPEC)
    assert pm.values[32, 32] == pytest.approx(1.0)
    assert pm.values.argmax() == 32 * SPEC.cols + 32
    # Symmetric under the lattice reflections around the peak.
    for d in (1, 3, 6):
        assert pm.values[32 + d, 32] == pytest.approx(pm.values[32 - d, 32])
        assert pm.values[32, 32 + d] == pytest.approx(pm.values[32, 32 - d])
        assert pm.values[32 + d, 32] == pytest.approx(pm.values[32, 32 + d])


def test_l_shaped_path_matches_brute_force_convolution():
    # L: forward along x then a leg to the left.
    leg1 = np.stack([np.arange(0.25, 10.0, 0.25), np.zeros(39)], axis=1)
    leg2 = np.stack([np.full(20, 9.75), np.arange(0.25, 5.25, 0.25)], axis=1)
    path = IntentionPath(np.vstack([leg1, leg2]))
    pm = build_goal_potential(path, SPEC)

    # Oracle: rebuild the mask independently, then nested-loop convolve.
    mask = np.zeros((SPEC.rows, SPEC.cols))
    pts = path.points
    for i in range(SPEC.rows):
        for j in range(SPEC.cols):
            cx, cy = SPEC.cell_to_xy(i, j)
            d = min(
                _point_segment_distance(cx, cy, pts[k], pts[k + 1])
                for k in range(len(pts) - 1)
            )
            mask[i, j] = 1.0 if d <= 1.0 else 0.0
    expected = brute_force_smooth(mask)
    np.testing.assert_allclose(pm.values, expected, atol=1e-12)


def _point_segment_distance(px, py, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.hypot(px - a[0], py - a[1]))
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    cx, cy = a + t * ab
    return float(np.hypot(px - cx, py - cy))


def test_empty_path_rejected():
    with pytest.raises(GridError, match="empty intention path"):
        IntentionPath(np.zeros((0, 2)))
    with pytest.raises(GridError):
        build_goal_potential(IntentionPath.resample(np.zeros((0, 2))), SPEC)


def test_out_of_bounds_path_rejected():
    with pytest.raises(GridError, match="out of grid bounds"):
        build_goal_potential(IntentionPath(np.array([[40.0, 0.0]])), SPEC)


def test_goal_invariant_under_resampling():
    sparse = np.array([[0.5, 0.0], [8.0, 0.0], [8.0, 4.0]])
    coarse = IntentionPath.resample(sparse, spacing=0.5)
    fine = IntentionPath.resample(sparse, spacing=0.1)
    a = build_goal_potential(coarse, SPEC)
    b = build_goal_potential(fine, SPEC)
    np.testing.assert_allclose(a.values, b.values, atol=1e-12)


# --- obstacle potential -----------------------------------------------------

def test_no_obstacles_all_zero():
    pm = build_obstacle_potential([], SPEC)
    assert np.all(pm.values == 0.0)


def test_single_cell_peak_one():
    pm = build_obstacle_potential([(10, 20)], SPEC)
    assert pm.values[10, 20] == pytest.approx(1.0)
    assert pm.values.max() == pytest.approx(1.0)


def test_two_cells_match_brute_force_max():
    cells = [(10, 20), (14, 25)]
    pm = build_obstacle_potential(cells, SPEC)
    np.testing.assert_allclose(pm.values, brute_force_obstacle(cells, SPEC), atol=1e-12)


def test_out_of_bounds_obstacle_rejected():
    with pytest.raises(GridError, match="out of bounds"):
        build_obstacle_potential([(64, 0)], SPEC)


# --- compose ----------------------------------------------------------------

def test_compose_zero_obstacle_is_identity():
    goal = build_goal_potential(straight_center_path(), SPEC)
    zero = build_obstacle_potential([], SPEC)
    np.testing.assert_array_equal(compose(goal, zero).values, goal.values)


def test_compose_pure_obstacle_is_negative():
    goal = PotentialMap(SPEC, np.zeros((64, 64)))
    obs = build_obstacle_potential([(30, 30)], SPEC)
    composed = compose(goal, obs)
    assert composed.values[30, 30] == pytest.approx(-1.0)


def test_compose_arithmetic():
    g = np.zeros((64, 64))
    o = np.zeros((64, 64))
    g[5, 5] = 0.6
    o[5, 5] = 0.9
    composed = compose(PotentialMap(SPEC, g), PotentialMap(SPEC, o))
    assert composed.values[5, 5] == pytest.approx(-0.3)


def test_compose_spec_mismatch():
    other = GridSpec(rows=32, cols=32)
    with pytest.raises(GridError, match="different grid specs"):
        compose(PotentialMap(SPEC, np.zeros((64, 64))),
                PotentialMap(other, np.zeros((32, 32))))


@given(
    goal_val=st.floats(0.0, 1.0),
    obs_val=st.floats(0.0, 1.0),
    bump=st.floats(0.0, 0.5),
)
@settings(max_examples=50, deadline=None)
def test_compose_monotone_in_goal(goal_val, obs_val, bump):
    g = np.zeros((4, 4))
    o = np.zeros((4, 4))
    g[1, 1] = goal_val
    o[1, 1] = obs_val
    spec = GridSpec(rows=4, cols=4)
    base = compose(PotentialMap(spec, g), PotentialMap(spec, o)).values[1, 1]
    g2 = g.copy()
    g2[1, 1] = min(1.0, goal_val + bump)
    raised = compose(PotentialMap(spec, g2), PotentialMap(spec, o)).values[1, 1]
    assert raised >= base - 1e-12


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_outputs_bounded(seed):
    rng = np.random.default_rng(seed)
    n_pts = rng.integers(1, 12)
    start = np.array([rng.uniform(1, 20), rng.uniform(-10, 10)])
    steps = rng.uniform(-0.3, 0.3, size=(n_pts, 2))
    steps[:, 0] = np.abs(steps[:, 0])
    pts = np.clip(start + np.cumsum(steps, axis=0), [0.0, -15.0], [30.0, 15.0])
    goal = build_goal_potential(IntentionPath(pts), SPEC)
    cells = [tuple(c) for c in rng.integers(0, 64, size=(rng.integers(0, 5), 2))]
    obs = build_obstacle_potential(cells, SPEC)
    composed = compose(goal, obs)
    assert goal.values.min() >= 0.0 and goal.values.max() <= 1.0
    assert obs.values.min() >= 0.0 and obs.values.max() <= 1.0
    assert composed.values.min() >= -1.0 and composed.values.max() <= 1.0


# --- serialization ----------------------------------------------------------

def test_map_round_trip(tmp_path):
    pm = compose(build_goal_potential(straight_center_path(), SPEC),
                 build_obstacle_potential([(20, 31)], SPEC))
    f = tmp_path / "m.pmap"
    write_map(pm, f)
    back = read_map(f)
    assert back.spec == pm.spec
    np.testing.assert_array_equal(back.values, pm.values)


def test_truncated_map_rejected(tmp_path):
    pm = build_obstacle_potential([(1, 1)], SPEC)
    f = tmp_path / "m.pmap"
    write_map(pm, f)
    data = f.read_bytes()
    f.write_bytes(data[:-16])
    with pytest.raises(GridError, match="truncated"):
        read_map(f)


def test_pgm_export(tmp_path):
    pm = build_obstacle_potential([(5, 5)], SPEC)
    f = tmp_path / "m.pgm"
    write_pgm(pm, f)
    data = f.read_bytes()
    assert data.startswith(b"P5\n64 64\n255\n")
    body = data.split(b"255\n", 1)[1]
    assert len(body) == 64 * 64
    # Zero potential maps to mid-gray, peak obstacle would be 0 in compose;
    # here the raw map peak 1.0 maps to 255.
    assert max(body) == 255


def test_kernel_shape():
    k = gaussian_kernel()
    assert k.shape == (13, 13)
    assert k[6, 6] == pytest.approx(1.0)
