"""Shared state, action and trajectory vocabulary.

Frames are NED (earth) and FRD (body). Attitude is Z-Y-X Euler
(roll, pitch, yaw). The 12-vector ordering used everywhere is::

    0  1  2 | 3  4  5 | 6    7      8    | 9  10 11
    N  E  D | u  v  w | roll pitch  yaw  | p  q  r

and actions are ``(p_sp, q_sp, r_sp, thrust)``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

POS = slice(0, 3)
VEL = slice(3, 6)
ATT = slice(6, 9)
RATE = slice(9, 12)
PITCH = 7

STATE_DIM = 12
ACTION_DIM = 4

GROUPS = ("position", "velocity", "attitude", "rates")
GROUP_SLICES = {"position": POS, "velocity": VEL, "attitude": ATT, "rates": RATE}

PITCH_LIMIT = math.pi / 2 - 1e-3
TWO_PI = 2.0 * math.pi


class SingularityError(ValueError):
    """Pitch reached the Euler-kinematics guard."""


def wrap_angle(a):
    """Wrap angle(s) into (-pi, pi].

    Works on floats, arrays and tape variables; for the latter the shift is
    treated as a constant so the derivative is the identity.
    """
    if hasattr(a, "tape"):
        shift = TWO_PI * np.ceil((a.value - math.pi) / TWO_PI)
        return a - shift
    arr = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("wrap_angle: non-finite input")
    out = arr - TWO_PI * np.ceil((arr - math.pi) / TWO_PI)
    # ceil rounding can land exactly on -pi for inputs a hair above an odd multiple
    out = np.where(out <= -math.pi, out + TWO_PI, out)
    if out.ndim == 0:
        return float(out)
    return out


def state_delta(a, b) -> np.ndarray:
    """Componentwise ``a - b`` with attitude differences wrapped."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = a - b
    d[..., ATT] = wrap_angle(d[..., ATT])
    return d


def check_state(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != STATE_DIM:
        raise ValueError(f"state must have {STATE_DIM} entries, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("state contains non-finite entries")
    return x


def pitch_ok(x) -> bool:
    return bool(np.all(np.abs(np.asarray(x)[..., PITCH]) < PITCH_LIMIT))


@dataclass(frozen=True)
class State12:
    pos_e: np.ndarray
    vel_b: np.ndarray
    att: np.ndarray
    rate_b: np.ndarray

    def __post_init__(self):
        parts = [np.asarray(getattr(self, k), dtype=float) for k in ("pos_e", "vel_b", "att", "rate_b")]
        if any(v.shape != (3,) for v in parts):
            raise ValueError("State12 fields must be 3-vectors")
        check_state(np.concatenate(parts))
        if abs(parts[2][1]) >= PITCH_LIMIT:
            raise SingularityError(f"pitch {parts[2][1]:.6f} outside the Euler guard")
        parts[2] = np.asarray(wrap_angle(parts[2]))
        for k, v in zip(("pos_e", "vel_b", "att", "rate_b"), parts):
            object.__setattr__(self, k, v)

    @classmethod
    def from_array(cls, x) -> "State12":
        x = check_state(x)
        return cls(x[POS].copy(), x[VEL].copy(), x[ATT].copy(), x[RATE].copy())

    @classmethod
    def zeros(cls) -> "State12":
        return cls.from_array(np.zeros(STATE_DIM))

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.pos_e, self.vel_b, self.att, self.rate_b]).astype(float)

    def __array__(self, dtype=None, copy=None):
        arr = self.to_array()
        return arr if dtype is None else arr.astype(dtype)


@dataclass(frozen=True)
class Action:
    rate_sp: np.ndarray
    thrust: float

    def __post_init__(self):
        rate = np.asarray(self.rate_sp, dtype=float)
        if rate.shape != (3,) or not np.all(np.isfinite(rate)):
            raise ValueError("rate_sp must be a finite 3-vector")
        object.__setattr__(self, "rate_sp", rate)
        object.__setattr__(self, "thrust", float(np.clip(self.thrust, 0.0, 1.0)))

    @classmethod
    def from_array(cls, a) -> "Action":
        a = np.asarray(a, dtype=float)
        return cls(a[:3], a[3])

    def to_array(self) -> np.ndarray:
        return np.array([*self.rate_sp, self.thrust])

    def __array__(self, dtype=None, copy=None):
        arr = self.to_array()
        return arr if dtype is None else arr.astype(dtype)


@dataclass(frozen=True)
class Wrench:
    force_b: np.ndarray
    moment_b: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.force_b, dtype=float)
        m = np.asarray(self.moment_b, dtype=float)
        if f.shape != (3,) or m.shape != (3,) or not (np.all(np.isfinite(f)) and np.all(np.isfinite(m))):
            raise ValueError("wrench must be two finite 3-vectors")
        object.__setattr__(self, "force_b", f)
        object.__setattr__(self, "moment_b", m)

    @classmethod
    def from_array(cls, w) -> "Wrench":
        w = np.asarray(w, dtype=float)
        return cls(w[:3].copy(), w[3:6].copy())

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.force_b, self.moment_b]).astype(float)

    def __array__(self, dtype=None, copy=None):
        arr = self.to_array()
        return arr if dtype is None else arr.astype(dtype)


@dataclass(frozen=True)
class RigidBodyParams:
    mass: float = 1.0
    inertia: np.ndarray = field(default_factory=lambda: np.diag([0.01, 0.01, 0.02]))
    gravity: float = 9.81

    def __post_init__(self):
        inertia = np.asarray(self.inertia, dtype=float)
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if inertia.shape != (3, 3) or not np.allclose(inertia, inertia.T):
            raise ValueError("inertia must be a symmetric 3x3 matrix")
        if np.any(np.linalg.eigvalsh(inertia) <= 0):
            raise ValueError("inertia must be positive definite")
        object.__setattr__(self, "inertia", inertia)
        # cached once per instance
        object.__setattr__(self, "inertia_inv", np.linalg.inv(inertia))

    def scaled(self, factor: float) -> "RigidBodyParams":
        """Copy with mass and inertia multiplied by ``factor``."""
        return RigidBodyParams(self.mass * factor, self.inertia * factor, self.gravity)


class Tag(str, enum.Enum):
    CHIRP = "Chirp"
    RESET = "Reset"
    HOVER_TO_FORWARD = "HoverToForward"


@dataclass
class Episode:
    """A recorded flight segment: ``len(states) == len(actions) + 1``.

    ``hidden`` optionally carries the plant's non-observable state (motor
    lags and rate-loop integrators) at each recorded state. Learned models
    never see it; it lets an oracle replay the plant exactly.
    """

    states: np.ndarray
    actions: np.ndarray
    tag: Tag = Tag.CHIRP
    dt: float = 0.05
    truncated: bool = False
    hidden: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(-1, STATE_DIM)
        self.actions = np.asarray(self.actions, dtype=float).reshape(-1, ACTION_DIM)
        self.tag = Tag(self.tag)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if len(self.states) != len(self.actions) + 1:
            raise ValueError(
                f"episode needs len(states) == len(actions) + 1, got {len(self.states)} and {len(self.actions)}"
            )
        if self.hidden is not None:
            self.hidden = np.asarray(self.hidden, dtype=float)
            if len(self.hidden) != len(self.states):
                raise ValueError("hidden must have one row per state")

    def __len__(self) -> int:
        return len(self.actions)

    def to_record(self) -> dict:
        rec = {
            "dt": self.dt,
            "tag": self.tag.value,
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
        }
        if self.truncated:
            rec["truncated"] = True
        if self.hidden is not None:
            rec["hidden"] = self.hidden.tolist()
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Episode":
        return cls(
            states=rec["states"],
            actions=rec["actions"] if rec["actions"] else np.zeros((0, ACTION_DIM)),
            tag=rec["tag"],
            dt=rec["dt"],
            truncated=rec.get("truncated", False),
            hidden=rec.get("hidden"),
        )


def write_episodes(path: str | Path, episodes: Iterable[Episode]) -> None:
    """One JSON record per line. Floats round-trip exactly through ``repr``."""
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_record()))
            fh.write("\n")


def iter_episodes(path: str | Path) -> Iterator[Episode]:
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield Episode.from_record(json.loads(line))


def read_episodes(path: str | Path) -> list[Episode]:
    return list(iter_episodes(path))
