"""Synthetic expert demonstrations and causal relabeling.

Episodes stand in for logged driving data: a 3 s label sampled at 10 Hz
with exact closed-form kinematics, a window of four potential maps (the
newest at the decision instant, older frames rendered by rolling the ego
pose back along the path at 10 Hz), and the starting speed. Relabeling
rewrites labels that retrospectively cross an obstacle into a causal
constant-deceleration stop.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    BasePath,
    ConstantProfile,
    JerkLimitedProfile,
    MergeOffset,
    Pose,
    StopProfile,
    frenet_motion,
)
from .gridmap import (
    GridSpec,
    IntentionPath,
    PotentialMap,
    build_goal_potential,
    build_obstacle_potential,
    compose,
    read_map,
    write_map,
)

HORIZON = 3.0
SAMPLE_DT = 0.1
N_SAMPLES = 31
WINDOW = 4           # K + 1 potential maps
SPEED_LIMIT = 30.0 / 3.6
MAX_CURVATURE = 0.2
OBSTACLE_RADIUS = 0.5          # m, footprint used when rasterizing obstacles
EPISODE_FORMAT = "neurotraj-episode-v1"
MANIFEST_FORMAT = "neurotraj-manifest-v1"

FAMILIES = ("straight", "turn", "stop")


class EpisodeError(ValueError):
    """Raised for invalid maneuver specs or malformed episode files."""


@dataclass(frozen=True)
class TrajectorySample:
    t: float
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    speed: float

    def __post_init__(self) -> None:
        for name in ("position", "velocity", "acceleration"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (2,):
                raise EpisodeError(f"{name} must be a 2-vector")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class Episode:
    id: str
    map_window: tuple[PotentialMap, ...]
    v0: float
    label: tuple[TrajectorySample, ...]
    scenario_tag: str
    obstacle_map: PotentialMap | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.map_window) != WINDOW:
            raise EpisodeError(f"map_window must hold {WINDOW} maps")
        if len(self.label) != N_SAMPLES:
            raise EpisodeError(f"label must hold {N_SAMPLES} samples")
        ts = np.array([s.t for s in self.label])
        if np.any(np.diff(ts) <= 0):
            raise EpisodeError("label times must be strictly increasing")
        if np.linalg.norm(self.label[0].position) > 1e-9:
            raise EpisodeError("label must start at the origin")
        for s in self.label:
            if abs(np.linalg.norm(s.velocity) - s.speed) > 1e-9:
                raise EpisodeError("sample speed must equal |velocity|")
        object.__setattr__(self, "map_window", tuple(self.map_window))
        object.__setattr__(self, "label", tuple(self.label))

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.label])

    @property
    def positions(self) -> np.ndarray:
        return np.stack([s.position for s in self.label])

    @property
    def velocities(self) -> np.ndarray:
        return np.stack([s.velocity for s in self.label])

    @property
    def accelerations(self) -> np.ndarray:
        return np.stack([s.acceleration for s in self.label])

    @property
    def speeds(self) -> np.ndarray:
        return np.array([s.speed for s in self.label])


@dataclass(frozen=True)
class ManeuverSpec:
    """Parameters of one synthetic expert maneuver.

    ``lateral_offset`` starts the ego that far left of the path with a
    smooth closed-form merge back (recovery demonstration). ``obstacle``
    is a vehicle-frame point; with family "straight" it produces a
    retrospective crossing label for relabel_causal to fix, with family
    "stop" the expert brakes to rest ``stop_margin`` meters short of it.
    """

    family: str
    v0: float
    target_speed: float | None = None
    curvature: float = 0.0
    jerk_limit: float = 2.0
    obstacle: tuple[float, float] | None = None
    lateral_offset: float = 0.0
    merge_time: float = 2.0
    stop_margin: float = 2.0

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise EpisodeError(f"unknown family {self.family!r}")
        if not (0.0 <= self.v0 <= SPEED_LIMIT):
            raise EpisodeError(f"v0 {self.v0} outside [0, {SPEED_LIMIT:.3f}]")
        tgt = self.v0 if self.target_speed is None else self.target_speed
        if not (0.0 <= tgt <= SPEED_LIMIT):
            raise EpisodeError("target speed outside the speed limit")
        if abs(self.curvature) > MAX_CURVATURE:
            raise EpisodeError(f"|curvature| > {MAX_CURVATURE}")
        if self.family == "stop" and self.obstacle is None:
            raise EpisodeError("stop family needs an obstacle")
        if self.family == "stop" and self.curvature != 0.0:
            raise EpisodeError("stop family uses a straight path")


def _profile_for(spec: ManeuverSpec):
    target = spec.v0 if spec.target_speed is None else spec.target_speed
    if spec.family == "stop":
        d = float(np.hypot(*spec.obstacle)) - spec.stop_margin
        if d <= 0.0:
            raise EpisodeError("infeasible stop: obstacle inside the stop margin")
        return StopProfile(spec.v0, d)
    if target == spec.v0:
        return ConstantProfile(spec.v0)
    return JerkLimitedProfile(spec.v0, target, spec.jerk_limit)


def _ego_pose_at(path: BasePath, s: float, delta: float) -> Pose:
    p = path.point(s)[0] + delta * path.normal(s)[0]
    return Pose(float(p[0]), float(p[1]), float(path.heading(s)))


def _clip_to_grid(points: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Contiguous in-bounds run around the point nearest the ego."""
    lo_x = spec.origin[0] - 0.5 * spec.cell_size
    lo_y = spec.origin[1] - 0.5 * spec.cell_size
    mask = ((points[:, 0] >= lo_x) & (points[:, 0] < lo_x + spec.extent_x)
            & (points[:, 1] >= lo_y) & (points[:, 1] < lo_y + spec.extent_y))
    if not mask.any():
        return points[:0]
    dist = np.linalg.norm(points, axis=1)
    dist[~mask] = np.inf
    anchor = int(np.argmin(dist))
    lo = anchor
    while lo > 0 and mask[lo - 1]:
        lo -= 1
    hi = anchor
    while hi + 1 < len(points) and mask[hi + 1]:
        hi += 1
    run = points[lo:hi + 1]
    # Cap total arclength just under the grid's longitudinal coverage.
    if len(run) > 1:
        arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(run, axis=0), axis=1))])
        run = run[arc <= spec.extent_x - 0.5]
    return run


def _render_frame(path: BasePath, ego: Pose, obstacle_world: np.ndarray | None,
                  grid: GridSpec, s_center: float):
    """Goal/obstacle/composed maps as seen from one ego pose."""
    s_samples = np.arange(s_center - 2.0, s_center + grid.extent_x + 10.0,
                          grid.cell_size * 0.9)
    pts = ego.to_frame(path.point(s_samples))
    clipped = _clip_to_grid(pts, grid)
    if len(clipped) == 0:
        raise EpisodeError("infeasible maneuver: intention path leaves the grid")
    goal = build_goal_potential(IntentionPath(clipped), grid)
    cells: list[tuple[int, int]] = []
    if obstacle_world is not None:
        ob = ego.to_frame(obstacle_world[None, :])[0]
        cx, cy = grid.cell_centers()
        near = (cx - ob[0]) ** 2 + (cy - ob[1]) ** 2 <= OBSTACLE_RADIUS**2
        cells = [tuple(c) for c in np.argwhere(near)]
    obstacle = build_obstacle_potential(cells, grid)
    return compose(goal, obstacle), obstacle


def expert_motion(spec: ManeuverSpec, times) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vehicle-frame expert kinematics at arbitrary times, closed form."""
    path = BasePath(spec.curvature)
    profile = _profile_for(spec)
    offset = MergeOffset(spec.lateral_offset, spec.merge_time)
    t = np.atleast_1d(np.asarray(times, dtype=float))
    s, v, a = profile.at(t)
    dlt, ddlt, dddlt = offset.at(t)
    pos_pf, vel_pf, acc_pf = frenet_motion(path, s, v, a, dlt, ddlt, dddlt)
    origin = _episode_origin(spec)
    return origin.to_frame(pos_pf), origin.rotate_to_frame(vel_pf), \
        origin.rotate_to_frame(acc_pf)


def _episode_origin(spec: ManeuverSpec) -> Pose:
    path = BasePath(spec.curvature)
    p0 = path.point(0.0)[0] + spec.lateral_offset * path.normal(0.0)[0]
    return Pose(float(p0[0]), float(p0[1]), float(path.heading(0.0)))


def generate_episode(spec: ManeuverSpec, seed: int,
                     grid: GridSpec | None = None) -> Episode:
    """Deterministic closed-form episode for one maneuver spec."""
    grid = grid or GridSpec()
    path = BasePath(spec.curvature)
    profile = _profile_for(spec)

    times = np.round(np.arange(N_SAMPLES) * SAMPLE_DT, 10)
    s, v, a = profile.at(times)
    origin = _episode_origin(spec)
    pos_v, vel_v, acc_v = expert_motion(spec, times)
    pos_v = pos_v.copy()
    pos_v[0] = 0.0  # exact origin despite rounding

    for x, y in pos_v:
        if not grid.in_bounds_xy(x, y):
            raise EpisodeError(
                f"infeasible maneuver: label leaves the grid at ({x:.1f}, {y:.1f})"
            )

    obstacle_world = None
    if spec.obstacle is not None:
        obstacle_world = origin.from_frame(np.array([spec.obstacle]))[0]

    window = []
    obstacle_only = None
    if obstacle_world is None:
        # Straights and constant-curvature arcs are self-similar: the view
        # from any on-path pose is identical, so one render serves all
        # frames of an obstacle-free window.
        composed, _ = _render_frame(path, _ego_pose_at(path, 0.0, spec.lateral_offset),
                                    None, grid, 0.0)
        window = [composed] * WINDOW
    else:
        for age_steps in range(WINDOW - 1, -1, -1):
            t_frame = -age_steps * SAMPLE_DT
            s_frame = float(v[0] * t_frame)
            ego = _ego_pose_at(path, s_frame, spec.lateral_offset)
            composed, obstacle = _render_frame(path, ego, obstacle_world, grid, s_frame)
            window.append(composed)
            if age_steps == 0:
                obstacle_only = obstacle

    speeds = np.linalg.norm(vel_v, axis=1)
    label = tuple(
        TrajectorySample(float(times[k]), pos_v[k], vel_v[k], acc_v[k], float(speeds[k]))
        for k in range(N_SAMPLES)
    )
    meta = {
        "family": spec.family,
        "seed": int(seed),
        "v0": spec.v0,
        "target_speed": spec.v0 if spec.target_speed is None else spec.target_speed,
        "curvature": spec.curvature,
        "jerk_limit": spec.jerk_limit,
        "obstacle": list(spec.obstacle) if spec.obstacle else None,
        "lateral_offset": spec.lateral_offset,
        "stop_margin": spec.stop_margin,
    }
    return Episode(
        id=f"{spec.family}-{seed:08d}",
        map_window=tuple(window),
        v0=float(speeds[0]),
        label=label,
        scenario_tag=spec.family,
        obstacle_map=obstacle_only,
        meta=meta,
    )


# --- causal relabeling -------------------------------------------------------

def _polyline_arclengths(points: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _interp_on_polyline(points: np.ndarray, arcs: np.ndarray, s: float):
    """Position and unit tangent at arclength s along the label polyline."""
    s = min(max(s, 0.0), float(arcs[-1]))
    k = int(np.searchsorted(arcs, s, side="right")) - 1
    k = min(max(k, 0), len(points) - 2)
    seg = points[k + 1] - points[k]
    seg_len = float(np.linalg.norm(seg))
    if seg_len < 1e-12:
        # Degenerate segment: walk back for a usable tangent.
        j = k
        while j > 0 and np.linalg.norm(points[j + 1] - points[j]) < 1e-12:
            j -= 1
        seg = points[j + 1] - points[j]
        seg_len = float(np.linalg.norm(seg))
        if seg_len < 1e-12:
            return points[k].copy(), np.array([1.0, 0.0])
        return points[k].copy(), seg / seg_len
    frac = (s - arcs[k]) / seg_len
    return points[k] + frac * seg, seg / seg_len


def relabel_causal(ep: Episode, margin: float = 2.0,
                   vehicle_radius: float = 1.0,
                   threshold: float = 0.5) -> Episode:
    """Rewrite labels that cross obstacle cells into a causal stop.

    A label sample collides when it lies within ``vehicle_radius`` of a
    cell whose obstacle potential is at least ``threshold`` in the newest
    frame. The relabeled motion keeps the original path geometry and
    decelerates at a_req = v0^2 / (2 d_s) to rest ``margin`` meters short
    of the first collision arclength.
    """
    if ep.obstacle_map is None:
        return ep
    hot = np.argwhere(ep.obstacle_map.values >= threshold)
    if len(hot) == 0:
        return ep
    spec = ep.obstacle_map.spec
    centers = np.stack([[*spec.cell_to_xy(i, j)] for i, j in hot])
    pos = ep.positions
    dists = np.linalg.norm(pos[:, None, :] - centers[None, :, :], axis=2).min(axis=1)
    colliding = np.flatnonzero(dists <= vehicle_radius)
    if len(colliding) == 0:
        return ep

    arcs = _polyline_arclengths(pos)
    s_c = float(arcs[colliding[0]])
    d_s = max(0.0, s_c - margin)
    times = ep.times
    v0 = ep.v0

    new_label = []
    if d_s <= 0.0 or v0 <= 0.0:
        anchor = pos[0]
        for t in times:
            new_label.append(TrajectorySample(float(t), anchor.copy(),
                                              np.zeros(2), np.zeros(2), 0.0))
    else:
        a_req = v0**2 / (2.0 * d_s)
        for t in times:
            v_t = max(0.0, v0 - a_req * float(t))
            if v_t > 0.0:
                s_t = v0 * float(t) - 0.5 * a_req * float(t) ** 2
                p, tan = _interp_on_polyline(pos, arcs, s_t)
                new_label.append(TrajectorySample(
                    float(t), p, v_t * tan, -a_req * tan, v_t))
            else:
                p, _ = _interp_on_polyline(pos, arcs, d_s)
                new_label.append(TrajectorySample(
                    float(t), p, np.zeros(2), np.zeros(2), 0.0))

    meta = dict(ep.meta)
    meta["relabeled"] = True
    meta["collision_arclength"] = s_c
    return replace(ep, label=tuple(new_label), meta=meta)


def episodes_equal(a: Episode, b: Episode) -> bool:
    """Bitwise equality over labels, maps, and scalar fields."""
    if (a.id != b.id or a.scenario_tag != b.scenario_tag or a.v0 != b.v0
            or a.meta != b.meta):
        return False
    for sa, sb in zip(a.label, b.label):
        if sa.t != sb.t or sa.speed != sb.speed:
            return False
        if not (np.array_equal(sa.position, sb.position)
                and np.array_equal(sa.velocity, sb.velocity)
                and np.array_equal(sa.acceleration, sb.acceleration)):
            return False
    if len(a.map_window) != len(b.map_window):
        return False
    for ma, mb in zip(a.map_window, b.map_window):
        if ma.spec != mb.spec or not np.array_equal(ma.values, mb.values):
            return False
    if (a.obstacle_map is None) != (b.obstacle_map is None):
        return False
    if a.obstacle_map is not None:
        if not np.array_equal(a.obstacle_map.values, b.obstacle_map.values):
            return False
    return True


# --- episode files -------------------------------------------------------------

def _require(doc: dict, dotted: str, prefix: str = ""):
    node = doc
    seen = []
    for key in dotted.split("."):
        seen.append(key)
        full = prefix + ".".join(seen) if prefix else ".".join(seen)
        if not isinstance(node, dict) or key not in node:
            raise EpisodeError(f"episode file missing field {full!r}")
        node = node[key]
    return node


def write_episode(ep: Episode, json_path) -> list:
    """One JSON document plus sibling potential-map files; returns all paths."""
    from pathlib import Path

    json_path = Path(json_path)
    stem = json_path.stem
    map_names = [f"{stem}.m{i}.pmap" for i in range(WINDOW)]
    written = []
    for name, pmap in zip(map_names, ep.map_window):
        write_map(pmap, json_path.parent / name)
        written.append(json_path.parent / name)
    obs_name = None
    if ep.obstacle_map is not None:
        obs_name = f"{stem}.obs.pmap"
        write_map(ep.obstacle_map, json_path.parent / obs_name)
        written.append(json_path.parent / obs_name)
    doc = {
        "format": EPISODE_FORMAT,
        "id": ep.id,
        "scenario_tag": ep.scenario_tag,
        "v0": ep.v0,
        "horizon": HORIZON,
        "label": {
            "t": [s.t for s in ep.label],
            "x": [float(s.position[0]) for s in ep.label],
            "y": [float(s.position[1]) for s in ep.label],
            "vx": [float(s.velocity[0]) for s in ep.label],
            "vy": [float(s.velocity[1]) for s in ep.label],
            "ax": [float(s.acceleration[0]) for s in ep.label],
            "ay": [float(s.acceleration[1]) for s in ep.label],
            "speed": [s.speed for s in ep.label],
        },
        "maps": map_names,
        "obstacle_map": obs_name,
        "meta": ep.meta,
    }
    json_path.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
    written.insert(0, json_path)
    return written


def read_episode(json_path) -> Episode:
    from pathlib import Path

    json_path = Path(json_path)
    try:
        doc = json.loads(json_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise EpisodeError(f"malformed episode JSON: {exc}") from exc
    if _require(doc, "format") != EPISODE_FORMAT:
        raise EpisodeError("episode file has wrong format tag")
    label = _require(doc, "label")
    cols = {key: _require(label, key, prefix="label.") for key in
            ("t", "x", "y", "vx", "vy", "ax", "ay", "speed")}
    n = len(cols["t"])
    for key, vals in cols.items():
        if len(vals) != n:
            raise EpisodeError(f"episode file field label.{key} has wrong length")
    samples = tuple(
        TrajectorySample(
            float(cols["t"][k]),
            np.array([cols["x"][k], cols["y"][k]]),
            np.array([cols["vx"][k], cols["vy"][k]]),
            np.array([cols["ax"][k], cols["ay"][k]]),
            float(cols["speed"][k]),
        )
        for k in range(n)
    )
    maps = tuple(read_map(json_path.parent / name) for name in _require(doc, "maps"))
    obs_name = _require(doc, "obstacle_map")
    obstacle = read_map(json_path.parent / obs_name) if obs_name else None
    return Episode(
        id=_require(doc, "id"),
        map_window=maps,
        v0=float(_require(doc, "v0")),
        label=samples,
        scenario_tag=_require(doc, "scenario_tag"),
        obstacle_map=obstacle,
        meta=_require(doc, "meta"),
    )


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(entries: list[dict], path, command: str, seed: int,
                   extra: dict | None = None) -> None:
    doc = {
        "format": MANIFEST_FORMAT,
        "command": command,
        "seed": seed,
        "episodes": entries,
    }
    if extra:
        doc.update(extra)
    from pathlib import Path

    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1), encoding="utf-8")


def verify_manifest(path) -> list[str]:
    """Return a list of mismatched files (empty when all checksums agree)."""
    from pathlib import Path

    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format") != MANIFEST_FORMAT:
        raise EpisodeError("not a manifest file")
    bad = []
    for entry in doc["episodes"]:
        for fname, digest in entry["files"].items():
            target = path.parent / fname
            if not target.exists() or file_sha256(target) != digest:
                bad.append(fname)
    return bad


# --- suites --------------------------------------------------------------------

def sample_maneuver(rng: np.random.Generator) -> ManeuverSpec:
    """One maneuver from the standard synthetic mix."""
    roll = rng.uniform()
    v0 = float(rng.uniform(3.0, 7.0))
    if roll < 0.30:  # plain straight, possibly with a recovery offset
        offset = float(rng.uniform(-0.8, 0.8)) if rng.uniform() < 0.5 else 0.0
        target = v0
        if rng.uniform() < 0.15:
            target = float(np.clip(v0 + rng.uniform(-1.0, 1.0), 1.0, SPEED_LIMIT))
        return ManeuverSpec("straight", v0=v0, target_speed=target,
                            lateral_offset=offset)
    if roll < 0.65:  # constant-curvature turn
        mag = float(rng.uniform(0.02, 0.08))
        kappa = mag if rng.uniform() < 0.5 else -mag
        # Keep the 3 s label inside the grid: cap the swept angle.
        if abs(kappa) * v0 * HORIZON > 1.3:
            v0 = 1.3 / (abs(kappa) * HORIZON)
        return ManeuverSpec("turn", v0=float(v0), curvature=kappa)
    if roll < 0.85:  # stop behind an obstacle
        dist = float(rng.uniform(8.0, 18.0))
        return ManeuverSpec("stop", v0=v0, obstacle=(dist, float(rng.uniform(-0.5, 0.5))))
    # Crossing: retrospective constant-speed label through an obstacle.
    dist = float(rng.uniform(8.0, 16.0))
    return ManeuverSpec("straight", v0=v0,
                        obstacle=(dist, float(rng.uniform(-0.5, 0.5))))


def generate_suite(count: int, seed: int, grid: GridSpec | None = None,
                   relabel: bool = True,
                   sampler=sample_maneuver) -> list[Episode]:
    """Deterministic episode suite; each episode derives from (seed, index)."""
    episodes = []
    for idx in range(count):
        ep_seed = (seed * 1_000_003 + idx) % (2**31)
        rng = np.random.default_rng(ep_seed)
        for _ in range(64):
            spec = sampler(rng)
            try:
                ep = generate_episode(spec, ep_seed, grid=grid)
                break
            except EpisodeError:
                continue
        else:
            raise EpisodeError("could not sample a feasible maneuver")
        if relabel:
            ep = relabel_causal(ep)
        episodes.append(ep)
    return episodes


def stop_scenario_sampler(rng: np.random.Generator) -> ManeuverSpec:
    """Stop-heavy mix used by the relabeling safety suite."""
    v0 = float(rng.uniform(3.0, 7.0))
    dist = float(rng.uniform(8.0, 18.0))
    lateral = float(rng.uniform(-0.5, 0.5))
    if rng.uniform() < 0.5:
        return ManeuverSpec("stop", v0=v0, obstacle=(dist, lateral))
    return ManeuverSpec("straight", v0=v0, obstacle=(dist, lateral))
