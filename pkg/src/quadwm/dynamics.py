"""Flat-earth 6DOF rigid-body equations of motion and a fixed-step RK4.

Everything below the public wrappers works on lists of state components, so
the same code path runs on floats, batched numpy arrays (one array per
component) and tape variables. The wrench is held constant across the four
RK4 stages and attitude is wrapped only after the full step.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .types import PITCH, PITCH_LIMIT, RigidBodyParams, SingularityError, wrap_angle


def _guard(theta, where: str = "") -> None:
    t = ad.value(theta)
    if np.any(np.abs(t) >= PITCH_LIMIT):
        raise SingularityError(f"pitch {np.max(np.abs(t)):.4f} rad beyond Euler guard{where}")


def _dcm(phi, theta, psi):
    """Z-Y-X body-to-earth rotation, as nested lists of entries."""
    sphi, cphi = ad.sin(phi), ad.cos(phi)
    sth, cth = ad.sin(theta), ad.cos(theta)
    spsi, cpsi = ad.sin(psi), ad.cos(psi)
    return [
        [cth * cpsi, sphi * sth * cpsi - cphi * spsi, cphi * sth * cpsi + sphi * spsi],
        [cth * spsi, sphi * sth * spsi + cphi * cpsi, cphi * sth * spsi - sphi * cpsi],
        [-sth, sphi * cth, cphi * cth],
    ]


def gravity_body(phi, theta, mass: float, g: float):
    """Weight expressed in the body frame, ``m g R^T (0, 0, 1)``."""
    mg = mass * g
    cth = ad.cos(theta)
    return [-mg * ad.sin(theta), mg * ad.sin(phi) * cth, mg * ad.cos(phi) * cth]


def _matvec_sparse(m: np.ndarray, v: Sequence):
    out = []
    for i in range(3):
        acc = None
        for j in range(3):
            if m[i, j] == 0.0:
                continue
            term = m[i, j] * v[j]
            acc = term if acc is None else acc + term
        out.append(0.0 * v[0] if acc is None else acc)
    return out


def _cross(a, b):
    return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]


def derivative_components(x: Sequence, w: Sequence, p: RigidBodyParams, add_gravity: bool = False) -> list:
    """State derivative on component lists (12 state, 6 wrench entries)."""
    u, v, wv = x[3], x[4], x[5]
    phi, theta, psi = x[6], x[7], x[8]
    rate = [x[9], x[10], x[11]]
    _guard(theta)

    force = list(w[:3])
    if add_gravity:
        gb = gravity_body(phi, theta, p.mass, p.gravity)
        force = [force[i] + gb[i] for i in range(3)]
    moment = list(w[3:6])

    r = _dcm(phi, theta, psi)
    vel = [u, v, wv]
    pos_dot = [r[i][0] * u + r[i][1] * v + r[i][2] * wv for i in range(3)]

    wxv = _cross(rate, vel)
    inv_m = 1.0 / p.mass
    vel_dot = [force[i] * inv_m - wxv[i] for i in range(3)]

    sphi, cphi = ad.sin(phi), ad.cos(phi)
    tth = ad.tan(theta)
    sec = 1.0 / ad.cos(theta)
    pr, qr, rr = rate
    att_dot = [
        pr + (sphi * qr + cphi * rr) * tth,
        cphi * qr - sphi * rr,
        (sphi * qr + cphi * rr) * sec,
    ]

    i_rate = _matvec_sparse(p.inertia, rate)
    gyro = _cross(rate, i_rate)
    rate_dot = _matvec_sparse(p.inertia_inv, [moment[i] - gyro[i] for i in range(3)])
    return pos_dot + vel_dot + att_dot + rate_dot


def rk4_components(x: Sequence, w: Sequence, dt: float, p: RigidBodyParams, add_gravity: bool = False) -> list:
    """One classical RK4 step on component lists; attitude wrapped at the end."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = len(x)
    half = 0.5 * dt
    k1 = derivative_components(x, w, p, add_gravity)
    k2 = derivative_components([x[i] + half * k1[i] for i in range(n)], w, p, add_gravity)
    k3 = derivative_components([x[i] + half * k2[i] for i in range(n)], w, p, add_gravity)
    k4 = derivative_components([x[i] + dt * k3[i] for i in range(n)], w, p, add_gravity)
    sixth = dt / 6.0
    out = [x[i] + sixth * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) for i in range(n)]
    for i in (6, 7, 8):
        out[i] = wrap_angle(out[i])
    return out


def _split(x):
    if ad.is_var(x):
        return ad.unstack(x)
    x = np.asarray(x, dtype=float)
    return [x[..., i] for i in range(x.shape[-1])]


def _join(comps):
    if any(ad.is_var(c) for c in comps):
        return ad.stack(comps, axis=-1)
    return np.stack(np.broadcast_arrays(*comps), axis=-1)


def dcm_body_to_earth(att) -> np.ndarray:
    att = np.asarray(att, dtype=float)
    _guard(att[..., 1])
    r = _dcm(att[..., 0], att[..., 1], att[..., 2])
    return np.stack([np.stack(row, axis=-1) for row in r], axis=-2)


def state_derivative(x, w, p: RigidBodyParams, add_gravity: bool = False):
    """12-vector time derivative; ``w`` is the net body wrench (gravity included
    unless ``add_gravity`` asks for it to be added here)."""
    return _join(derivative_components(_split(x), _split(w), p, add_gravity))


def rk4_step(x, w, dt: float, p: RigidBodyParams, add_gravity: bool = False):
    """Advance one step with the wrench held fixed. Accepts arrays shaped
    ``(..., 12)``/``(..., 6)`` or tape variables of the same shapes."""
    return _join(rk4_components(_split(x), _split(w), dt, p, add_gravity))


def integrate_rollout(x0, wrenches, dt: float, p: RigidBodyParams, add_gravity: bool = False) -> np.ndarray:
    """States after each wrench; ``result[k]`` follows ``wrenches[k]``."""
    wrenches = np.asarray(wrenches, dtype=float)
    if len(wrenches) == 0:
        raise ValueError("integrate_rollout needs at least one wrench")
    x = np.asarray(x0, dtype=float)
    out = []
    for k, w in enumerate(wrenches):
        try:
            x = rk4_step(x, w, dt, p, add_gravity)
        except SingularityError as exc:
            raise SingularityError(f"step {k}: {exc}") from exc
        out.append(x)
    return np.array(out)


__all__ = [
    "PITCH",
    "dcm_body_to_earth",
    "derivative_components",
    "gravity_body",
    "integrate_rollout",
    "rk4_components",
    "rk4_step",
    "state_derivative",
]
