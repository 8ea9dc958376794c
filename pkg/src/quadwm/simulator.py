"""Ground-truth quadcopter plant with rate, velocity and position loops.

The plant reuses the 6DOF core from :mod:`quadwm.dynamics` and adds an
X-configuration mixer, first-order motor lag and linear drag. Actions are
rate setpoints plus collective thrust; the rate loop runs at every physics
substep (``dt / substeps``), the outer loops once per control period.

Motor layout (FRD body, viewed from above)::

    2 (front-left, CW)    0 (front-right, CCW)
    1 (rear-left, CCW)    3 (rear-right, CW)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics
from .types import (
    ATT,
    PITCH_LIMIT,
    POS,
    RATE,
    VEL,
    Episode,
    RigidBodyParams,
    SingularityError,
    Tag,
    wrap_angle,
)

HIDDEN_DIM = 10  # motors (4), rate integrators (3), previous rate error (3)

_SIGN_X = np.array([1.0, -1.0, 1.0, -1.0])
_SIGN_Y = np.array([1.0, -1.0, -1.0, 1.0])
_SPIN = np.array([1.0, 1.0, -1.0, -1.0])


@dataclass(frozen=True)
class PlantParams:
    body: RigidBodyParams = field(default_factory=RigidBodyParams)
    arm: float = 0.16
    max_thrust: float = 20.0
    torque_coeff: float = 0.08
    motor_tau: float = 0.05
    lin_drag: tuple = (0.1, 0.1, 0.2)
    ang_drag: tuple = (0.01, 0.01, 0.02)

    def __post_init__(self):
        if min(self.arm, self.max_thrust, self.torque_coeff, self.motor_tau) <= 0:
            raise ValueError("arm, max_thrust, torque_coeff and motor_tau must be positive")
        if min(self.lin_drag) < 0 or min(self.ang_drag) < 0:
            raise ValueError("drag coefficients must be non-negative")
        if self.max_thrust <= self.body.mass * self.body.gravity:
            raise ValueError("max thrust must exceed weight for hover")
        object.__setattr__(self, "lin_drag", tuple(float(v) for v in self.lin_drag))
        object.__setattr__(self, "ang_drag", tuple(float(v) for v in self.ang_drag))

    @property
    def thrust_coeff(self) -> float:
        """Newtons per unit motor command."""
        return self.max_thrust / 4.0

    @property
    def hover_command(self) -> float:
        return self.body.mass * self.body.gravity / self.max_thrust

    def mixer(self) -> np.ndarray:
        """Rows (thrust, roll, pitch, yaw moment) from the four motor commands."""
        d = self.arm / math.sqrt(2.0)
        kt = self.thrust_coeff
        return np.stack([np.full(4, kt), -_SIGN_Y * d * kt, _SIGN_X * d * kt, _SPIN * self.torque_coeff])


@dataclass(frozen=True)
class RateGains:
    kp: tuple = (10.0, 10.0, 5.0)
    ki: tuple = (10.0, 10.0, 5.0)
    kd: tuple = (0.05, 0.05, 0.0)
    integral_limit: float = 1.0


@dataclass(frozen=True)
class PosGains:
    kp_pos: float = 1.0
    kp_alt: float = 1.5
    kv: float = 2.0
    kv_z: float = 3.0
    k_att: float = 6.0
    k_yaw: float = 2.0
    vmax_xy: float = 2.0
    vmax_z: float = 1.0
    amax_xy: float = 4.0
    amax_z: float = 3.0
    tilt_max: float = 0.5
    rate_max: float = 3.0


@dataclass(frozen=True)
class EnvState:
    x: np.ndarray
    motors: np.ndarray
    rate_integral: np.ndarray = field(default_factory=lambda: np.zeros(3))
    prev_rate_err: np.ndarray = field(default_factory=lambda: np.zeros(3))
    time: float = 0.0
    truncated: bool = False

    @classmethod
    def hover(cls, p: PlantParams, pos=(0.0, 0.0, 0.0), yaw: float = 0.0) -> "EnvState":
        x = np.zeros(12)
        x[POS] = pos
        x[8] = yaw
        return cls(x, np.full(4, p.hover_command))

    def hidden(self) -> np.ndarray:
        return np.concatenate([self.motors, self.rate_integral, self.prev_rate_err])

    @classmethod
    def from_hidden(cls, x, hidden, time: float = 0.0) -> "EnvState":
        hidden = np.asarray(hidden, dtype=float)
        return cls(np.array(x, dtype=float), hidden[:4].copy(), hidden[4:7].copy(), hidden[7:10].copy(), time)


# ---------------------------------------------------------------------------
# plant


def plant_wrench(s: EnvState, p: PlantParams) -> np.ndarray:
    """Net body wrench (force incl. gravity, moment) from the motor states."""
    x = s.x
    tlmn = p.mixer() @ s.motors
    grav = dynamics.gravity_body(x[6], x[7], p.body.mass, p.body.gravity)
    force = np.array([0.0, 0.0, -tlmn[0]]) + np.array(grav) - np.asarray(p.lin_drag) * x[VEL]
    moment = tlmn[1:] - np.asarray(p.ang_drag) * x[RATE]
    return np.concatenate([force, moment])


def rate_controller(s: EnvState, action, g: RateGains, p: PlantParams, dt: float):
    """PID on body-rate error; returns (motor commands, integrator, error).

    Torque demands are mixed around the collective command and scaled down
    to fit the available headroom, so zero thrust yields all-zero motors.
    """
    action = np.asarray(action, dtype=float)
    thrust = float(np.clip(action[3], 0.0, 1.0))
    err = action[:3] - s.x[RATE]
    derr = (err - s.prev_rate_err) / dt
    integ = np.clip(s.rate_integral + err * dt, -g.integral_limit, g.integral_limit)
    accel = np.asarray(g.kp) * err + np.asarray(g.ki) * integ + np.asarray(g.kd) * derr
    torque = p.body.inertia @ accel
    delta = np.linalg.solve(p.mixer(), np.concatenate([[0.0], torque]))
    peak = np.max(np.abs(delta))
    headroom = min(thrust, 1.0 - thrust)
    saturated = peak > headroom
    if saturated:
        delta = delta * (headroom / peak) if peak > 0 else delta
        integ = s.rate_integral  # anti-windup: hold the integrator
    motors = np.clip(thrust + delta, 0.0, 1.0)
    return motors, integ, err


def step_env(s: EnvState, action, p: PlantParams, gains: RateGains, dt: float, substeps: int = 10) -> EnvState:
    """Advance one control period; the plant runs ``substeps`` RK4 substeps."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if s.truncated:
        return s
    h = dt / substeps
    alpha = 1.0 - math.exp(-h / p.motor_tau)
    x, motors, integ, prev = s.x, s.motors, s.rate_integral, s.prev_rate_err
    for _ in range(substeps):
        cur = EnvState(x, motors, integ, prev, s.time)
        cmd, integ, prev = rate_controller(cur, action, gains, p, h)
        motors = motors + alpha * (cmd - motors)
        w = plant_wrench(EnvState(x, motors), p)
        try:
            x_new = dynamics.rk4_step(x, w, h, p.body)
        except SingularityError:
            return replace(s, truncated=True)
        if not np.all(np.isfinite(x_new)) or abs(x_new[7]) >= PITCH_LIMIT:
            return replace(s, truncated=True)
        x = x_new
    return EnvState(x, motors, integ, prev, s.time + dt)


def step_env_batch(x, hidden, actions, p: PlantParams, gains: RateGains, dt: float, substeps: int = 10):
    """:func:`step_env` over a batch of rows ``(B, 12)``, ``(B, 10)``, ``(B, 4)``.

    Returns the next states, next hidden vectors and a truncation mask;
    truncated rows keep their input values.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.array(x, dtype=float)
    hidden = np.asarray(hidden, dtype=float)
    actions = np.asarray(actions, dtype=float)
    motors, integ, prev = hidden[:, :4].copy(), hidden[:, 4:7].copy(), hidden[:, 7:10].copy()
    h = dt / substeps
    alpha = 1.0 - math.exp(-h / p.motor_tau)
    mix = p.mixer()
    mix_inv = np.linalg.inv(mix)
    kp, ki, kd = (np.asarray(v, dtype=float) for v in (gains.kp, gains.ki, gains.kd))
    thrust = np.clip(actions[:, 3], 0.0, 1.0)
    headroom = np.minimum(thrust, 1.0 - thrust)
    lin_drag, ang_drag = np.asarray(p.lin_drag), np.asarray(p.ang_drag)
    dead = np.zeros(len(x), dtype=bool)
    x0, hidden0 = x.copy(), hidden.copy()
    for _ in range(substeps):
        err = actions[:, :3] - x[:, RATE]
        derr = (err - prev) / h
        integ_new = np.clip(integ + err * h, -gains.integral_limit, gains.integral_limit)
        torque = (kp * err + ki * integ_new + kd * derr) @ p.body.inertia.T
        delta = np.column_stack([np.zeros(len(x)), torque]) @ mix_inv.T
        peak = np.max(np.abs(delta), axis=1)
        sat = peak > headroom
        scale = np.where(sat & (peak > 0), headroom / np.where(peak > 0, peak, 1.0), 1.0)
        delta = delta * scale[:, None]
        integ = np.where(sat[:, None], integ, integ_new)
        prev = err
        motors = motors + alpha * (np.clip(thrust[:, None] + delta, 0.0, 1.0) - motors)
        tlmn = motors @ mix.T
        grav = np.column_stack(dynamics.gravity_body(x[:, 6], x[:, 7], p.body.mass, p.body.gravity))
        force = grav - lin_drag * x[:, VEL]
        force[:, 2] -= tlmn[:, 0]
        w = np.column_stack([force, tlmn[:, 1:] - ang_drag * x[:, RATE]])
        live = ~dead
        try:
            x_new = x.copy()
            x_new[live] = dynamics.rk4_step(x[live], w[live], h, p.body)
        except SingularityError:
            x_new = x.copy()
            for i in np.flatnonzero(live):
                try:
                    x_new[i] = dynamics.rk4_step(x[i], w[i], h, p.body)
                except SingularityError:
                    dead[i] = True
        bad = ~np.all(np.isfinite(x_new), axis=1) | (np.abs(x_new[:, 7]) >= PITCH_LIMIT)
        dead |= bad
        x = np.where(dead[:, None], x, x_new)
    hidden_out = np.concatenate([motors, integ, prev], axis=1)
    x[dead] = x0[dead]
    hidden_out[dead] = hidden0[dead]
    return x, hidden_out, dead


# ---------------------------------------------------------------------------
# outer loops


def velocity_controller(s: EnvState, vel_sp_e, yaw_sp: float, g: PosGains, p: PlantParams) -> np.ndarray:
    """Earth-frame velocity setpoint -> (rate setpoint, thrust) action."""
    x = s.x
    phi, theta, psi = x[ATT]
    r = dynamics.dcm_body_to_earth(x[ATT])
    v_e = r @ x[VEL]
    acc = g.kv * (np.asarray(vel_sp_e, dtype=float) - v_e)
    acc[2] = g.kv_z / g.kv * acc[2]
    horiz = np.linalg.norm(acc[:2])
    if horiz > g.amax_xy:
        acc[:2] *= g.amax_xy / horiz
    acc[2] = np.clip(acc[2], -g.amax_z, g.amax_z)
    grav = p.body.gravity
    a_fwd = math.cos(psi) * acc[0] + math.sin(psi) * acc[1]
    a_right = -math.sin(psi) * acc[0] + math.cos(psi) * acc[1]
    pitch_sp = float(np.clip(-math.atan2(a_fwd, grav), -g.tilt_max, g.tilt_max))
    roll_sp = float(np.clip(math.atan2(a_right, grav), -g.tilt_max, g.tilt_max))
    thrust = p.body.mass * (grav - acc[2]) / (math.cos(phi) * math.cos(theta)) / p.max_thrust
    rate_sp = np.array(
        [
            g.k_att * (roll_sp - phi),
            g.k_att * (pitch_sp - theta),
            g.k_yaw * wrap_angle(yaw_sp - psi),
        ]
    )
    rate_sp = np.clip(rate_sp, -g.rate_max, g.rate_max)
    return np.concatenate([rate_sp, [np.clip(thrust, 0.0, 1.0)]])


def position_controller(s: EnvState, target_pos, target_yaw: float, g: PosGains, p: PlantParams) -> np.ndarray:
    """Cascaded P position loop feeding :func:`velocity_controller`."""
    err = np.asarray(target_pos, dtype=float) - s.x[POS]
    v_sp = np.empty(3)
    v_sp[:2] = g.kp_pos * err[:2]
    n = np.linalg.norm(v_sp[:2])
    if n > g.vmax_xy:
        v_sp[:2] *= g.vmax_xy / n
    v_sp[2] = np.clip(g.kp_alt * err[2], -g.vmax_z, g.vmax_z)
    return velocity_controller(s, v_sp, target_yaw, g, p)


# ---------------------------------------------------------------------------
# environment wrapper


@dataclass
class QuadEnv:
    plant: PlantParams = field(default_factory=PlantParams)
    rate_gains: RateGains = field(default_factory=RateGains)
    pos_gains: PosGains = field(default_factory=PosGains)
    dt: float = 0.05
    substeps: int = 10
    obs_noise: float = 0.0
    state: EnvState | None = None

    def __post_init__(self):
        if self.state is None:
            self.state = EnvState.hover(self.plant)

    def reset(self, pos=(0.0, 0.0, 0.0), yaw: float = 0.0) -> EnvState:
        self.state = EnvState.hover(self.plant, pos, yaw)
        return self.state

    def step(self, action) -> EnvState:
        self.state = step_env(self.state, action, self.plant, self.rate_gains, self.dt, self.substeps)
        return self.state

    def observe(self, rng: np.random.Generator | None = None) -> np.ndarray:
        x = self.state.x.copy()
        if self.obs_noise > 0 and rng is not None:
            x = x + rng.normal(0.0, self.obs_noise, size=x.shape)
            x[ATT] = wrap_angle(x[ATT])
        return x


class Recorder:
    """Accumulates a 20 Hz episode from an environment."""

    def __init__(self, env: QuadEnv, tag: Tag, rng: np.random.Generator | None = None):
        self.env = env
        self.tag = tag
        self.rng = rng
        self.states = [env.observe(rng)]
        self.hidden = [env.state.hidden()]
        self.actions: list[np.ndarray] = []

    def step(self, action) -> bool:
        """Apply ``action``; returns False once the pitch guard has tripped."""
        state = self.env.step(action)
        if state.truncated:
            return False
        self.actions.append(np.asarray(action, dtype=float))
        self.states.append(self.env.observe(self.rng))
        self.hidden.append(state.hidden())
        return True

    def episode(self) -> Episode:
        return Episode(
            states=np.array(self.states),
            actions=np.array(self.actions).reshape(-1, 4),
            tag=self.tag,
            dt=self.env.dt,
            truncated=self.env.state.truncated,
            hidden=np.array(self.hidden),
        )


def fly_hover_to_forward(
    env: QuadEnv,
    cruise: float = 3.0,
    duration: float = 6.4,
    hover_time: float = 1.0,
    ramp_time: float = 2.0,
    rng: np.random.Generator | None = None,
) -> Episode:
    """Hold hover, then ramp the forward velocity setpoint to ``cruise``.

    Altitude and heading are held at their starting values throughout.
    """
    st = env.state
    start = st.x[POS].copy()
    yaw0 = float(st.x[8])
    heading = np.array([math.cos(yaw0), math.sin(yaw0)])
    rec = Recorder(env, Tag.HOVER_TO_FORWARD, rng)
    n = int(round(duration / env.dt))
    for k in range(n):
        t = k * env.dt
        s = env.state
        if t < hover_time:
            a = position_controller(s, start, yaw0, env.pos_gains, env.plant)
        else:
            speed = cruise * min(1.0, (t - hover_time) / ramp_time)
            v_sp = np.zeros(3)
            v_sp[:2] = speed * heading
            v_sp[2] = np.clip(env.pos_gains.kp_alt * (start[2] - s.x[2]), -env.pos_gains.vmax_z, env.pos_gains.vmax_z)
            a = velocity_controller(s, v_sp, yaw0, env.pos_gains, env.plant)
        if not rec.step(a):
            break
    return rec.episode()
