"""Bird's-eye grid potential maps.

A potential map combines goal guidance (a smoothed intention-path mask)
with obstacle repulsion (max of per-obstacle Gaussians) into one scalar
grid in [-1, 1] that downstream planning consumes. Maps are immutable
value objects and safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

# Smoothing and repulsion constants. The lane half-width and both sigmas
# are configuration, not physics; they are module defaults overridable
# per call.
LANE_HALF_WIDTH = 1.0     # m, intention mask inflation around the path
GOAL_SIGMA_CELLS = 2.0    # goal smoothing stddev, in cells
GOAL_TRUNCATE = 3.0       # kernel radius = GOAL_TRUNCATE * sigma, in cells
OBSTACLE_SIGMA = 1.5      # m, obstacle repulsion stddev

MAGIC = "neurotraj-potential-map"


class GridError(ValueError):
    """Raised for invalid grid inputs (bad paths, indices, spec mismatch)."""


@dataclass(frozen=True)
class GridSpec:
    """Geometry of the bird's-eye grid.

    Rows index the longitudinal (forward, +x) axis and columns the
    lateral (+y, left) axis. ``origin`` is the vehicle-frame position of
    the *center* of cell (0, 0). The default covers longitudinal
    [0, 32) m and lateral [-16, 16) m at 0.5 m per cell.
    """

    rows: int = 64
    cols: int = 64
    cell_size: float = 0.5
    origin: tuple[float, float] = (0.25, -15.75)

    def __post_init__(self) -> None:
        if self.rows <= 0 or self.cols <= 0 or self.cell_size <= 0:
            raise GridError("grid dimensions and cell size must be positive")

    @property
    def extent_x(self) -> float:
        return self.rows * self.cell_size

    @property
    def extent_y(self) -> float:
        return self.cols * self.cell_size

    def cell_to_xy(self, row: int, col: int) -> tuple[float, float]:
        """Vehicle-frame coordinates of a cell center."""
        return (
            self.origin[0] + row * self.cell_size,
            self.origin[1] + col * self.cell_size,
        )

    def xy_to_cell(self, x: float, y: float) -> tuple[int, int]:
        """Cell whose center is nearest (x, y); exact round trip for centers."""
        row = int(round((x - self.origin[0]) / self.cell_size))
        col = int(round((y - self.origin[1]) / self.cell_size))
        return row, col

    def in_bounds_cell(self, row: int, col: int) -> bool:
        return 0 <= row < self.rows and 0 <= col < self.cols

    def in_bounds_xy(self, x: float, y: float) -> bool:
        lo_x = self.origin[0] - 0.5 * self.cell_size
        lo_y = self.origin[1] - 0.5 * self.cell_size
        return (
            lo_x <= x < lo_x + self.extent_x
            and lo_y <= y < lo_y + self.extent_y
        )

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(rows, cols) arrays of x and y coordinates of all cell centers."""
        xs = self.origin[0] + self.cell_size * np.arange(self.rows)
        ys = self.origin[1] + self.cell_size * np.arange(self.cols)
        return np.meshgrid(xs, ys, indexing="ij")


@dataclass(frozen=True)
class PotentialMap:
    """Scalar potential grid with values in [-1, 1]."""

    spec: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (self.spec.rows, self.spec.cols):
            raise GridError(
                f"values shape {vals.shape} does not match grid "
                f"{(self.spec.rows, self.spec.cols)}"
            )
        if not np.all(np.isfinite(vals)):
            raise GridError("potential values must be finite")
        if vals.min() < -1.0 - 1e-12 or vals.max() > 1.0 + 1e-12:
            raise GridError("potential values must lie in [-1, 1]")
        vals = np.clip(vals, -1.0, 1.0)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def value_at(self, row: int, col: int) -> float:
        return float(self.values[row, col])


@dataclass(frozen=True)
class IntentionPath:
    """Ordered vehicle-frame 2-D points tracing the local route to the goal.

    Consecutive spacing must not exceed the target grid's cell size and
    total arclength must not exceed the grid's longitudinal coverage;
    ``resample`` densifies sparse waypoint lists to satisfy the spacing
    rule.
    """

    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            raise GridError("empty intention path")
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise GridError("path must be an (N, 2) array")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def arclength(self) -> float:
        if len(self.points) < 2:
            return 0.0
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))

    @staticmethod
    def resample(waypoints: np.ndarray, spacing: float = 0.25) -> "IntentionPath":
        """Densify a waypoint polyline to at most ``spacing`` between points."""
        pts = np.asarray(waypoints, dtype=np.float64)
        if pts.size == 0:
            raise GridError("empty intention path")
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise GridError("path must be an (N, 2) array")
        if len(pts) == 1:
            return IntentionPath(pts)
        out = [pts[0]]
        for a, b in zip(pts[:-1], pts[1:]):
            seg = np.linalg.norm(b - a)
            n = max(1, int(np.ceil(seg / spacing)))
            for k in range(1, n + 1):
                out.append(a + (b - a) * (k / n))
        return IntentionPath(np.array(out))


def _validate_path(path: IntentionPath, spec: GridSpec) -> None:
    if len(path.points) == 0:
        raise GridError("empty intention path")
    diffs = np.diff(path.points, axis=0)
    if len(diffs) and np.linalg.norm(diffs, axis=1).max() > spec.cell_size + 1e-9:
        raise GridError("path point spacing exceeds cell size")
    if path.arclength > spec.extent_x + 1e-9:
        raise GridError("path arclength exceeds grid coverage")
    for x, y in path.points:
        if not spec.in_bounds_xy(x, y):
            raise GridError(f"path point ({x:.2f}, {y:.2f}) out of grid bounds")


def _distance_to_polyline(px: np.ndarray, py: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Min distance from each (px, py) to the polyline through ``pts``.

    Distances are to segments, so the result depends only on the path
    geometry, not on how densely it was sampled.
    """
    q = np.stack([px.ravel(), py.ravel()], axis=1)  # (P, 2)
    if len(pts) == 1:
        d = np.hypot(q[:, 0] - pts[0, 0], q[:, 1] - pts[0, 1])
        return d.reshape(px.shape)
    a = pts[:-1]                     # (S, 2)
    b = pts[1:]
    ab = b - a                       # (S, 2)
    ab_len2 = np.maximum(np.einsum("sd,sd->s", ab, ab), 1e-300)
    # t in [0, 1] per (point, segment); all in squared distances.
    ap = q[:, None, :] - a[None, :, :]             # (P, S, 2)
    t = np.einsum("psd,sd->ps", ap, ab, optimize=True) / ab_len2
    np.clip(t, 0.0, 1.0, out=t)
    diff = ap - t[:, :, None] * ab[None, :, :]
    d2 = np.einsum("psd,psd->ps", diff, diff, optimize=True).min(axis=1)
    return np.sqrt(d2).reshape(px.shape)


def gaussian_kernel(sigma_cells: float = GOAL_SIGMA_CELLS,
                    truncate: float = GOAL_TRUNCATE) -> np.ndarray:
    """Square-truncated 2-D Gaussian kernel on the cell lattice."""
    radius = int(truncate * sigma_cells)
    offs = np.arange(-radius, radius + 1)
    di, dj = np.meshgrid(offs, offs, indexing="ij")
    return np.exp(-(di**2 + dj**2) / (2.0 * sigma_cells**2))


def build_goal_potential(path: IntentionPath, spec: GridSpec,
                         lane_half_width: float = LANE_HALF_WIDTH,
                         sigma_cells: float = GOAL_SIGMA_CELLS) -> PotentialMap:
    """Goal-guided potential: smoothed binary mask of the intention path.

    Cells whose centers lie within ``lane_half_width`` of the path form a
    binary mask; the mask is convolved with a truncated Gaussian
    (zero-padded borders) and rescaled so the maximum equals 1.
    """
    _validate_path(path, spec)
    cx, cy = spec.cell_centers()
    # Only cells inside the path's inflated bounding box can be masked.
    pts = path.points
    margin = lane_half_width + 1e-9
    box = ((cx >= pts[:, 0].min() - margin) & (cx <= pts[:, 0].max() + margin)
           & (cy >= pts[:, 1].min() - margin) & (cy <= pts[:, 1].max() + margin))
    mask = np.zeros((spec.rows, spec.cols))
    if box.any():
        d = _distance_to_polyline(cx[box], cy[box], pts)
        mask[box] = d <= lane_half_width
    smoothed = ndimage.convolve(mask, gaussian_kernel(sigma_cells),
                                mode="constant", cval=0.0)
    peak = smoothed.max()
    if peak > 0:
        smoothed /= peak
    return PotentialMap(spec, smoothed)


def build_obstacle_potential(occupied_cells: list[tuple[int, int]],
                             spec: GridSpec,
                             sigma: float = OBSTACLE_SIGMA) -> PotentialMap:
    """Obstacle repulsion: per-cell max of Gaussians centered on occupied cells."""
    values = np.zeros((spec.rows, spec.cols))
    if not occupied_cells:
        return PotentialMap(spec, values)
    for row, col in occupied_cells:
        if not spec.in_bounds_cell(int(row), int(col)):
            raise GridError(f"occupied cell ({row}, {col}) out of bounds")
    cx, cy = spec.cell_centers()
    for row, col in occupied_cells:
        ox, oy = spec.cell_to_xy(int(row), int(col))
        d2 = (cx - ox) ** 2 + (cy - oy) ** 2
        np.maximum(values, np.exp(-d2 / (2.0 * sigma**2)), out=values)
    return PotentialMap(spec, values)


def compose(goal: PotentialMap, obstacle: PotentialMap) -> PotentialMap:
    """Combined map: clamp(goal - obstacle, -1, 1) elementwise."""
    if goal.spec != obstacle.spec:
        raise GridError("goal and obstacle maps have different grid specs")
    return PotentialMap(goal.spec, np.clip(goal.values - obstacle.values, -1.0, 1.0))


# ---------------------------------------------------------------------------
# Serialization: one JSON header line, then row-major float64 little-endian.

def write_map(pmap: PotentialMap, path) -> None:
    header = {
        "magic": MAGIC,
        "rows": pmap.spec.rows,
        "cols": pmap.spec.cols,
        "cell_size": pmap.spec.cell_size,
        "origin": list(pmap.spec.origin),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(pmap.values, dtype="<f8").tobytes())


def read_map(path) -> PotentialMap:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        raise GridError(f"malformed potential map header: {exc}") from exc
    if header.get("magic") != MAGIC:
        raise GridError("not a potential map file (bad magic)")
    spec = GridSpec(rows=int(header["rows"]), cols=int(header["cols"]),
                    cell_size=float(header["cell_size"]),
                    origin=tuple(header["origin"]))
    expected = spec.rows * spec.cols * 8
    if len(payload) != expected:
        raise GridError(
            f"truncated potential map payload: {len(payload)} bytes, expected {expected}"
        )
    values = np.frombuffer(payload, dtype="<f8").reshape(spec.rows, spec.cols)
    return PotentialMap(spec, values.astype(np.float64))


def write_pgm(pmap: PotentialMap, path) -> None:
    """8-bit PGM export, [-1, 1] mapped affinely to [0, 255], for inspection."""
    gray = np.round((pmap.values + 1.0) * 0.5 * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pmap.spec.cols} {pmap.spec.rows}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())
