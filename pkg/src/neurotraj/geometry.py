"""Closed-form path geometry shared by the synthetic expert and the simulator.

Base paths are straight lines or constant-curvature arcs parameterized by
arclength; speed profiles give (s, v, a)(t) analytically; the Frenet
composite adds a smoothly decaying lateral offset so recovery maneuvers
(start off the path, merge back) still have exact derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    out = np.mod(-np.asarray(a) + np.pi, 2.0 * np.pi)
    return -(out - np.pi)


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float

    def to_frame(self, points: np.ndarray) -> np.ndarray:
        """World points (N, 2) expressed in this pose's frame."""
        c, s = np.cos(self.heading), np.sin(self.heading)
        rel = np.atleast_2d(points) - np.array([self.x, self.y])
        return rel @ np.array([[c, -s], [s, c]])

    def rotate_to_frame(self, vecs: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.heading), np.sin(self.heading)
        return np.atleast_2d(vecs) @ np.array([[c, -s], [s, c]])

    def from_frame(self, points: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.heading), np.sin(self.heading)
        return np.atleast_2d(points) @ np.array([[c, s], [-s, c]]) + np.array([self.x, self.y])

    def rotate_from_frame(self, vecs: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.heading), np.sin(self.heading)
        return np.atleast_2d(vecs) @ np.array([[c, s], [-s, c]])


@dataclass(frozen=True)
class BasePath:
    """Arclength-parameterized straight line (curvature 0) or circular arc."""

    curvature: float = 0.0

    def point(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        k = self.curvature
        if k == 0.0:
            return np.stack([s, np.zeros_like(s)], axis=-1)
        return np.stack([np.sin(k * s) / k, (1.0 - np.cos(k * s)) / k], axis=-1)

    def tangent(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        a = self.curvature * s
        return np.stack([np.cos(a), np.sin(a)], axis=-1)

    def normal(self, s) -> np.ndarray:
        """Left normal."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        a = self.curvature * s
        return np.stack([-np.sin(a), np.cos(a)], axis=-1)

    def heading(self, s):
        return self.curvature * np.asarray(s, dtype=float)


# --- speed profiles: closed-form (s, v, a)(t) -------------------------------

@dataclass(frozen=True)
class ConstantProfile:
    v0: float

    def at(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return self.v0 * t, np.full_like(t, self.v0), np.zeros_like(t)


@dataclass(frozen=True)
class JerkLimitedProfile:
    """Speed transition v0 -> target with a triangular acceleration pulse.

    Acceleration ramps at +/- jerk, so position is piecewise cubic and the
    acceleration labels are exact derivatives of the speed profile.
    """

    v0: float
    target: float
    jerk: float

    def at(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        dv = self.target - self.v0
        if dv == 0.0 or self.jerk <= 0.0:
            return ConstantProfile(self.v0).at(t)
        sign = np.sign(dv)
        j = self.jerk
        t1 = np.sqrt(abs(dv) / j)
        v1 = self.v0 + sign * j * t1**2 / 2.0
        s1 = self.v0 * t1 + sign * j * t1**3 / 6.0
        v2 = self.target
        s2 = s1 + v1 * t1 + sign * j * (t1 * t1**2 / 2.0 - t1**3 / 6.0)

        s = np.empty_like(t)
        v = np.empty_like(t)
        a = np.empty_like(t)
        ph1 = t <= t1
        ph2 = (t > t1) & (t <= 2 * t1)
        ph3 = t > 2 * t1
        tt = t[ph1]
        a[ph1] = sign * j * tt
        v[ph1] = self.v0 + sign * j * tt**2 / 2.0
        s[ph1] = self.v0 * tt + sign * j * tt**3 / 6.0
        u = t[ph2] - t1
        a[ph2] = sign * j * (t1 - u)
        v[ph2] = v1 + sign * j * (t1 * u - u**2 / 2.0)
        s[ph2] = s1 + v1 * u + sign * j * (t1 * u**2 / 2.0 - u**3 / 6.0)
        u = t[ph3] - 2 * t1
        a[ph3] = 0.0
        v[ph3] = v2
        s[ph3] = s2 + v2 * u
        return s, v, a


@dataclass(frozen=True)
class StopProfile:
    """Constant deceleration from v0 to rest over stop_distance meters."""

    v0: float
    stop_distance: float

    def at(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.stop_distance <= 0.0 or self.v0 <= 0.0:
            return np.zeros_like(t), np.zeros_like(t), np.zeros_like(t)
        a_req = self.v0**2 / (2.0 * self.stop_distance)
        t_stop = self.v0 / a_req
        moving = t < t_stop
        v = np.where(moving, self.v0 - a_req * t, 0.0)
        s = np.where(moving, self.v0 * t - 0.5 * a_req * t**2, self.stop_distance)
        a = np.where(moving, -a_req, 0.0)
        return s, v, a


# --- lateral merge offset ---------------------------------------------------

@dataclass(frozen=True)
class MergeOffset:
    """delta(t): constant at delta0 for t <= 0, quintic decay to 0 by t_merge."""

    delta0: float = 0.0
    t_merge: float = 2.0

    def at(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.delta0 == 0.0:
            z = np.zeros_like(t)
            return z, z.copy(), z.copy()
        u = np.clip(t / self.t_merge, 0.0, 1.0)
        blend = 10 * u**3 - 15 * u**4 + 6 * u**5
        dblend = (30 * u**2 - 60 * u**3 + 30 * u**4) / self.t_merge
        ddblend = (60 * u - 180 * u**2 + 120 * u**3) / self.t_merge**2
        inside = (t > 0.0) & (t < self.t_merge)
        dlt = self.delta0 * (1.0 - blend)
        dlt = np.where(t <= 0.0, self.delta0, np.where(t >= self.t_merge, 0.0, dlt))
        ddlt = np.where(inside, -self.delta0 * dblend, 0.0)
        dddlt = np.where(inside, -self.delta0 * ddblend, 0.0)
        return dlt, ddlt, dddlt


def frenet_motion(path: BasePath, s, v, a, delta, ddelta, dddelta):
    """Kinematics of pos = P(s) + delta * n(s), exact closed form.

    vel = v (1 - k delta) t + delta' n
    acc = [a (1 - k delta) - 2 k v delta'] t + [k v^2 (1 - k delta) + delta''] n
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    k = path.curvature
    tan = path.tangent(s)
    nor = path.normal(s)
    one = 1.0 - k * np.asarray(delta)
    pos = path.point(s) + np.asarray(delta)[:, None] * nor
    vel = (np.asarray(v) * one)[:, None] * tan + np.asarray(ddelta)[:, None] * nor
    acc = ((np.asarray(a) * one - 2.0 * k * np.asarray(v) * np.asarray(ddelta))[:, None] * tan
           + (k * np.asarray(v) ** 2 * one + np.asarray(dddelta))[:, None] * nor)
    return pos, vel, acc
