"""Chirp-with-trim data collection used to fill the replay buffer.

Each cycle holds a randomly drawn body-velocity trim with the velocity loop,
superimposes a linear chirp on the rate setpoints for ``sweep_time``
seconds, then flies back to the origin with the position controller. Both
segments are recorded.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .replay import ReplayBuffer
from .simulator import QuadEnv, Recorder, position_controller, velocity_controller
from .types import POS, RATE, VEL, Episode, Tag

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChirpConfig:
    f0: float = 0.5
    f1: float = 4.0
    sweep_time: float = 2.5
    amplitude: tuple = (0.8, 0.8, 0.4)
    trim_low: tuple = (-2.0, -2.0, -0.5)
    trim_high: tuple = (2.0, 2.0, 0.5)
    random_phase: bool = True
    reset_timeout: float = 10.0
    reset_pos_tol: float = 0.1
    reset_vel_tol: float = 0.1
    load_duration: float = 100.0
    include_resets: bool = True

    def __post_init__(self):
        if not (0 < self.f0 <= self.f1):
            raise ValueError("need 0 < f0 <= f1")
        if self.sweep_time <= 0:
            raise ValueError("sweep_time must be positive")
        if min(self.amplitude) < 0:
            raise ValueError("amplitudes must be non-negative")
        if any(lo > hi for lo, hi in zip(self.trim_low, self.trim_high)):
            raise ValueError("trim box has low > high")


def chirp_value(t: float, cfg: ChirpConfig, phase=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Linear sweep ``A sin(2 pi (f0 t + (f1 - f0) t^2 / (2 T)) + phase)`` per axis."""
    if not (0.0 <= t <= cfg.sweep_time):
        raise ValueError(f"t={t} outside [0, {cfg.sweep_time}]")
    arg = 2.0 * math.pi * (cfg.f0 * t + (cfg.f1 - cfg.f0) * t * t / (2.0 * cfg.sweep_time))
    return np.asarray(cfg.amplitude, dtype=float) * np.sin(arg + np.asarray(phase, dtype=float))


def sample_trim(rng: np.random.Generator, cfg: ChirpConfig) -> np.ndarray:
    lo = np.asarray(cfg.trim_low, dtype=float)
    hi = np.asarray(cfg.trim_high, dtype=float)
    return lo + (hi - lo) * rng.random(3)


def _settled(env: QuadEnv, cfg: ChirpConfig) -> bool:
    x = env.state.x
    return (
        np.linalg.norm(x[POS]) < cfg.reset_pos_tol
        and np.linalg.norm(x[VEL]) < cfg.reset_vel_tol
        and np.linalg.norm(x[RATE]) < cfg.reset_vel_tol
    )


def fly_reset(env: QuadEnv, cfg: ChirpConfig, rng=None) -> Episode | None:
    """Position-controlled return to the origin; None if nothing was flown."""
    rec = Recorder(env, Tag.RESET, rng if env.obs_noise > 0 else None)
    n = int(round(cfg.reset_timeout / env.dt))
    for _ in range(n):
        if len(rec.actions) > 0 and _settled(env, cfg):
            break
        a = position_controller(env.state, (0.0, 0.0, 0.0), 0.0, env.pos_gains, env.plant)
        if not rec.step(a):
            break
    if not rec.actions:
        return None
    return rec.episode()


def collect_chirp_episode(env: QuadEnv, cfg: ChirpConfig, rng: np.random.Generator) -> tuple[Episode, Episode | None]:
    """One chirp-with-trim segment followed by its reset segment."""
    trim_b = sample_trim(rng, cfg)
    phase = rng.uniform(0.0, 2.0 * math.pi, size=3) if cfg.random_phase else np.zeros(3)
    yaw0 = float(env.state.x[8])
    c, s = math.cos(yaw0), math.sin(yaw0)
    trim_e = np.array([c * trim_b[0] - s * trim_b[1], s * trim_b[0] + c * trim_b[1], trim_b[2]])

    rec = Recorder(env, Tag.CHIRP, rng if env.obs_noise > 0 else None)
    n = int(round(cfg.sweep_time / env.dt))
    for k in range(n):
        t = min(k * env.dt, cfg.sweep_time)
        a = velocity_controller(env.state, trim_e, yaw0, env.pos_gains, env.plant)
        a[:3] += chirp_value(t, cfg, phase)
        if not rec.step(a):
            log.warning("chirp episode truncated by pitch guard after %d steps", len(rec.actions))
            break
    chirp = rec.episode()
    if env.state.truncated:
        env.reset()
        return chirp, None
    return chirp, fly_reset(env, cfg, rng)


def load_buffer(env: QuadEnv, cfg: ChirpConfig, rng: np.random.Generator, buffer: ReplayBuffer | None = None) -> ReplayBuffer:
    """Repeat chirp/reset cycles until ``load_duration`` seconds of chirp flight."""
    if cfg.load_duration <= 0:
        raise ValueError("load_duration must be positive")
    buf = buffer if buffer is not None else ReplayBuffer()
    flown = 0.0
    while flown < cfg.load_duration - 1e-9:
        chirp, reset = collect_chirp_episode(env, cfg, rng)
        if len(chirp) > 0:
            buf.append(chirp)
        else:
            env.reset()
        flown += max(len(chirp), 1) * env.dt
        if reset is not None and cfg.include_resets:
            buf.append(reset)
    return buf
