"""Continuous trajectories as conditioned sinusoidal basis combinations.

A trajectory is y_a(t) = sum_i w_i^a f(omega_i * t/T + phi_i) + b_a per
axis a in {x, y}, with f = cos by default. Because the basis is smooth
in t, velocity and acceleration are exact closed forms of the same
coefficients; nothing here differentiates numerically. Frequencies and
phases are shared across the two axes, weights and biases are per axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

V_MIN = 0.05  # m/s, below this heading/curvature are undefined

BASIS_COS = "cos"
BASIS_LEAKY_RELU = "leaky_relu"  # ablation basis; second derivative is 0 a.e.
_LEAKY_SLOPE = 0.2


class CurvatureUndefined(ValueError):
    """Raised when curvature is requested at near-zero speed."""


@dataclass(frozen=True)
class KinematicState:
    """Position, velocity, acceleration at one query time."""

    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.velocity))


def _basis(kind: str, z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return f(z), f'(z), f''(z) for the chosen basis function."""
    if kind == BASIS_COS:
        return np.cos(z), -np.sin(z), -np.cos(z)
    if kind == BASIS_LEAKY_RELU:
        slope = np.where(z >= 0.0, 1.0, _LEAKY_SLOPE)
        return np.where(z >= 0.0, z, _LEAKY_SLOPE * z), slope, np.zeros_like(z)
    raise ValueError(f"unknown basis kind {kind!r}")


@dataclass(frozen=True)
class ContinuousTrajectory:
    """Immutable basis-coefficient bundle; evaluation is pure.

    ``omega`` and ``phi`` are rad per normalized time (tau = t / horizon)
    and rad; ``wx``/``wy`` weight the basis per axis, ``bx``/``by`` are
    the per-axis biases. All arrays share length M.
    """

    omega: np.ndarray
    phi: np.ndarray
    wx: np.ndarray
    wy: np.ndarray
    bx: float
    by: float
    horizon: float = 3.0
    basis: str = field(default=BASIS_COS)

    def __post_init__(self) -> None:
        for name in ("omega", "phi", "wx", "wy"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 1 or arr.shape != np.shape(self.omega):
                raise ValueError("coefficient arrays must be 1-D with equal length")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (np.isfinite(self.bx) and np.isfinite(self.by)):
            raise ValueError("non-finite bias")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")

    @property
    def n_basis(self) -> int:
        return len(self.omega)

    def eval(self, t: float) -> KinematicState:
        states = self.eval_batch(np.array([t]))
        return states[0]

    def eval_batch(self, times) -> list[KinematicState]:
        pos, vel, acc = self.eval_arrays(times)
        return [KinematicState(pos[k], vel[k], acc[k]) for k in range(len(pos))]

    def eval_arrays(self, times) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized evaluation: (N, 2) position, velocity, acceleration."""
        t = np.atleast_1d(np.asarray(times, dtype=np.float64))
        tau = t / self.horizon
        z = tau[:, None] * self.omega[None, :] + self.phi[None, :]   # (N, M)
        f, fp, fpp = _basis(self.basis, z)
        w = np.stack([self.wx, self.wy], axis=1)                     # (M, 2)
        b = np.array([self.bx, self.by])
        pos = f @ w + b
        vel = ((fp * self.omega) @ w) / self.horizon
        acc = ((fpp * self.omega**2) @ w) / self.horizon**2
        return pos, vel, acc

    def curvature(self, t: float) -> float:
        """Signed curvature from analytic derivatives; needs speed >= V_MIN."""
        pos, vel, acc = self.eval_arrays(np.array([t]))
        xd, yd = vel[0]
        xdd, ydd = acc[0]
        speed = float(np.hypot(xd, yd))
        if speed < V_MIN:
            raise CurvatureUndefined("curvature undefined at near-zero speed")
        return float((xd * ydd - yd * xdd) / speed**3)


@dataclass
class TrajectoryGradients:
    """Gradients of some scalar objective w.r.t. the coefficient bundle."""

    omega: np.ndarray
    phi: np.ndarray
    wx: np.ndarray
    wy: np.ndarray
    bx: float
    by: float


def backward_through_eval(traj: ContinuousTrajectory, times,
                          grad_pos: np.ndarray,
                          grad_vel: np.ndarray | None = None,
                          grad_acc: np.ndarray | None = None) -> TrajectoryGradients:
    """Chain upstream gradients at sample times back to the coefficients.

    ``grad_pos``/``grad_vel``/``grad_acc`` are (N, 2) arrays of partials
    of the objective w.r.t. the evaluated position, velocity, and
    acceleration at each time. Everything is an exact closed form of the
    basis; the cos basis uses its third derivative (sin) for the
    acceleration-through-omega/phi terms.
    """
    t = np.atleast_1d(np.asarray(times, dtype=np.float64))
    n = len(t)
    gp = np.zeros((n, 2)) if grad_pos is None else np.asarray(grad_pos, dtype=np.float64)
    gv = np.zeros((n, 2)) if grad_vel is None else np.asarray(grad_vel, dtype=np.float64)
    ga = np.zeros((n, 2)) if grad_acc is None else np.asarray(grad_acc, dtype=np.float64)

    T = traj.horizon
    tau = t / T                                                     # (N,)
    om = traj.omega
    z = tau[:, None] * om[None, :] + traj.phi[None, :]              # (N, M)
    f, fp, fpp = _basis(traj.basis, z)
    if traj.basis == BASIS_COS:
        fppp = np.sin(z)
    else:
        fppp = np.zeros_like(z)

    w = np.stack([traj.wx, traj.wy], axis=1)                        # (M, 2)
    # Upstream combined per (sample, basis) for the shared omega / phi.
    # pos_a   = w f(z) + b          -> d/dz = w f'
    # vel_a   = w om f'(z) / T      -> d/dz = w om f'' / T
    # acc_a   = w om^2 f''(z) / T^2 -> d/dz = w om^2 f''' / T^2
    gw_sum = gp @ w.T                                               # (N, M) of sum_a g_pos,a w_a
    gv_sum = gv @ w.T
    ga_sum = ga @ w.T

    dz = gw_sum * fp + gv_sum * (om[None, :] * fpp) / T \
        + ga_sum * (om[None, :] ** 2 * fppp) / T**2                 # (N, M)

    g_phi = dz.sum(axis=0)
    g_omega = (dz * tau[:, None]).sum(axis=0)
    # Direct omega dependence outside z (vel and acc scale with omega).
    g_omega += (gv_sum * fp).sum(axis=0) / T
    g_omega += 2.0 * (ga_sum * fpp * om[None, :]).sum(axis=0) / T**2

    # Per-axis weights and biases.
    gw = (f.T @ gp) + (fp * om[None, :]).T @ gv / T \
        + (fpp * om[None, :] ** 2).T @ ga / T**2                    # (M, 2)
    gb = gp.sum(axis=0)

    return TrajectoryGradients(
        omega=g_omega, phi=g_phi,
        wx=gw[:, 0], wy=gw[:, 1],
        bx=float(gb[0]), by=float(gb[1]),
    )


def fit_trajectory(times, positions, velocities=None, accelerations=None,
                   horizon: float = 3.0, n_basis: int = 32,
                   vel_weight: float = 1.0, acc_weight: float = 1.0,
                   basis: str = BASIS_COS) -> ContinuousTrajectory:
    """Least-squares fit of a coefficient bundle to sampled kinematics.

    Frequencies are a fixed spread over [0.5, 14] rad per unit tau with
    paired phases (0 and -pi/2, giving cos and sin terms), so the fit is
    linear in the weights and biases. Velocity/acceleration samples, when
    given, join the system and pin the derivatives. Used by the oracle
    planner and by tests that need a trajectory through known geometry.
    """
    t = np.asarray(times, dtype=np.float64)
    pos = np.asarray(positions, dtype=np.float64)
    if n_basis % 2:
        raise ValueError("n_basis must be even (cos/sin pairs)")
    freqs = np.linspace(0.5, 14.0, n_basis // 2)
    omega = np.repeat(freqs, 2)
    phi = np.tile([0.0, -np.pi / 2.0], n_basis // 2)

    tau = t / horizon
    z = tau[:, None] * omega[None, :] + phi[None, :]
    f, fp, fpp = _basis(basis, z)
    ones = np.ones((len(t), 1))

    blocks = [np.hstack([f, ones])]
    targets = [pos]
    if velocities is not None:
        vel = np.asarray(velocities, dtype=np.float64)
        blocks.append(vel_weight * np.hstack([(fp * omega[None, :]) / horizon,
                                              np.zeros((len(t), 1))]))
        targets.append(vel_weight * vel)
    if accelerations is not None:
        acc = np.asarray(accelerations, dtype=np.float64)
        blocks.append(acc_weight * np.hstack([(fpp * omega[None, :] ** 2) / horizon**2,
                                              np.zeros((len(t), 1))]))
        targets.append(acc_weight * acc)
    A = np.vstack(blocks)
    rhs = np.vstack(targets)                                        # (rows, 2)
    coef, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    return ContinuousTrajectory(
        omega=omega, phi=phi,
        wx=coef[:-1, 0], wy=coef[:-1, 1],
        bx=float(coef[-1, 0]), by=float(coef[-1, 1]),
        horizon=horizon, basis=basis,
    )
