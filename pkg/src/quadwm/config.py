"""Experiment configuration: one YAML file, nested dataclasses, strict keys."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .excitation import ChirpConfig
from .simulator import PlantParams, PosGains, QuadEnv, RateGains
from .training import TrainConfig
from .types import RigidBodyParams

OUTPUT_ENV = "QUADWM_OUTPUT"


class ConfigError(ValueError):
    pass


@dataclass
class PlantSection:
    mass: float = 1.0
    inertia: list = field(default_factory=lambda: [0.01, 0.01, 0.02])
    gravity: float = 9.81
    arm: float = 0.16
    max_thrust: float = 20.0
    torque_coeff: float = 0.08
    motor_tau: float = 0.05
    lin_drag: list = field(default_factory=lambda: [0.1, 0.1, 0.2])
    ang_drag: list = field(default_factory=lambda: [0.01, 0.01, 0.02])
    dt: float = 0.05
    substeps: int = 10
    obs_noise: float = 0.0

    def body(self) -> RigidBodyParams:
        inertia = np.asarray(self.inertia, dtype=float)
        if inertia.shape == (3,):
            inertia = np.diag(inertia)
        return RigidBodyParams(self.mass, inertia, self.gravity)

    def params(self) -> PlantParams:
        return PlantParams(
            self.body(), self.arm, self.max_thrust, self.torque_coeff, self.motor_tau,
            tuple(self.lin_drag), tuple(self.ang_drag),
        )  # fmt: skip


@dataclass
class RateSection:
    kp: list = field(default_factory=lambda: [10.0, 10.0, 5.0])
    ki: list = field(default_factory=lambda: [10.0, 10.0, 5.0])
    kd: list = field(default_factory=lambda: [0.05, 0.05, 0.0])
    integral_limit: float = 1.0


@dataclass
class PositionSection:
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


@dataclass
class ControllersSection:
    rate: RateSection = field(default_factory=RateSection)
    position: PositionSection = field(default_factory=PositionSection)


@dataclass
class ExcitationSection:
    f0: float = 0.5
    f1: float = 4.0
    sweep_time: float = 2.5
    amplitude: list = field(default_factory=lambda: [0.8, 0.8, 0.4])
    trim_low: list = field(default_factory=lambda: [-2.0, -2.0, -0.5])
    trim_high: list = field(default_factory=lambda: [2.0, 2.0, 0.5])
    random_phase: bool = True
    reset_timeout: float = 10.0
    reset_pos_tol: float = 0.1
    reset_vel_tol: float = 0.1
    load_duration: float = 100.0
    include_resets: bool = True

    def chirp(self) -> ChirpConfig:
        kw = dataclasses.asdict(self)
        for k in ("amplitude", "trim_low", "trim_high"):
            kw[k] = tuple(kw[k])
        return ChirpConfig(**kw)


@dataclass
class ReplaySection:
    capacity: int = 100_000
    history: int = 8


@dataclass
class PhysicsSection:
    hidden: list = field(default_factory=lambda: [128, 128])
    gravity_prior: bool = False
    mass_mismatch: float = 0.0


@dataclass
class RnnSection:
    hidden: int = 128
    init_hidden: list = field(default_factory=lambda: [128, 128])


@dataclass
class ModelSection:
    kind: str = "physics"
    physics: PhysicsSection = field(default_factory=PhysicsSection)
    rnn: RnnSection = field(default_factory=RnnSection)


@dataclass
class TrainingSection:
    horizon: int = 16
    batch_size: int = 32
    total_updates: int = 5000
    lr: float = 3e-4
    grad_clip: float = 10.0
    val_period: int = 250
    val_horizon: int = 128
    val_rollouts: int = 16
    holdout_fraction: float = 0.1
    loss_weights: dict = field(default_factory=lambda: {"position": 1.0, "velocity": 1.0, "attitude": 1.0, "rates": 1.0})
    online_collect: bool = False
    online_period: int = 50
    checkpoint_period: int = 1000


@dataclass
class EvaluationSection:
    id_horizon: int = 128
    n_rollouts: int = 20
    ood_horizons: list = field(default_factory=lambda: [128, 50])
    ood_cruise: float = 3.0
    ood_duration: float = 6.4
    ood_hover_time: float = 1.0
    ood_ramp_time: float = 2.0
    id_thresholds: dict = field(default_factory=lambda: {"position": 0.5, "velocity": 0.5, "attitude": 0.3, "rates": 0.5})
    divergence_threshold: float = 3.0
    ood_ratio_threshold: float = 3.0
    ood_ratio_min_groups: int = 2


@dataclass
class ExperimentConfig:
    seed: int = 0
    run_id: str = "default"
    output_dir: str = "runs"
    plant: PlantSection = field(default_factory=PlantSection)
    controllers: ControllersSection = field(default_factory=ControllersSection)
    excitation: ExcitationSection = field(default_factory=ExcitationSection)
    replay: ReplaySection = field(default_factory=ReplaySection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    # builders ----------------------------------------------------------
    def make_env(self) -> QuadEnv:
        rate = self.controllers.rate
        return QuadEnv(
            plant=self.plant.params(),
            rate_gains=RateGains(tuple(rate.kp), tuple(rate.ki), tuple(rate.kd), rate.integral_limit),
            pos_gains=PosGains(**dataclasses.asdict(self.controllers.position)),
            dt=self.plant.dt,
            substeps=self.plant.substeps,
            obs_noise=self.plant.obs_noise,
        )

    def train_config(self, kind: str) -> TrainConfig:
        kw = dataclasses.asdict(self.training)
        return TrainConfig(seed=self.seed, history=self.replay.history, **kw)

    def model_config(self, kind: str) -> dict:
        if kind == "physics":
            return {"hidden": tuple(self.model.physics.hidden), "gravity_prior": self.model.physics.gravity_prior}
        return {"hidden": self.model.rnn.hidden, "init_hidden": tuple(self.model.rnn.init_hidden)}

    def nominal_body(self) -> RigidBodyParams:
        body = self.plant.body()
        mismatch = self.model.physics.mass_mismatch
        return body.scaled(1.0 + mismatch) if mismatch else body

    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)

    def validate(self) -> None:
        if self.model.kind not in ("physics", "rnn", "oracle"):
            raise ConfigError(f"model.kind must be physics, rnn or oracle, got {self.model.kind!r}")
        try:
            self.plant.params()
            self.excitation.chirp()
            self.train_config(self.model.kind)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.plant.dt <= 0 or self.plant.substeps < 1:
            raise ConfigError("plant.dt must be positive and plant.substeps >= 1")
        if any(h < 1 for h in self.evaluation.ood_horizons) or self.evaluation.id_horizon < 1:
            raise ConfigError("evaluation horizons must be positive")


# ---------------------------------------------------------------------------
# loading


def _line_of(node, path: list[str]) -> int | None:
    """1-based line of the key at ``path`` inside a composed YAML node."""
    for key in path:
        if not isinstance(node, yaml.MappingNode):
            return None
        for k, v in node.value:
            if k.value == key:
                if key == path[-1]:
                    return k.start_mark.line + 1
                node = v
                break
        else:
            return None
    return None


def _build(cls, data: Any, path: list[str], root_node) -> Any:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section {'.'.join(path) or '<root>'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, val in data.items():
        if key not in known:
            where = ".".join([*path, str(key)])
            line = _line_of(root_node, [*path, str(key)])
            at = f" (line {line})" if line else ""
            raise ConfigError(f"unknown config key '{where}'{at}")
        f = known[key]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), val, [*path, key], root_node)
        else:
            kwargs[key] = val
    return cls(**kwargs)


def config_from_text(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    cfg = _build(ExperimentConfig, data, [], node)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
        cfg.validate()
        return cfg
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    return config_from_text(p.read_text())


DEFAULT_CONFIG_YAML = """\
# quadwm experiment configuration.
# Values marked ASSUMED are not fixed by the study being reproduced and were
# chosen for a desk-scale CPU run.

seed: 0
run_id: default
output_dir: runs            # overridden by $QUADWM_OUTPUT when set

plant:                      # ground-truth quadcopter (ASSUMED, 450-class)
  mass: 1.0                 # kg
  inertia: [0.01, 0.01, 0.02]   # kg m^2, principal moments (or a 3x3 list)
  gravity: 9.81
  arm: 0.16                 # m
  max_thrust: 20.0          # N, all four motors
  torque_coeff: 0.08        # N m of yaw reaction per unit motor command
  motor_tau: 0.05           # s, first-order motor lag
  lin_drag: [0.1, 0.1, 0.2]     # N s/m
  ang_drag: [0.01, 0.01, 0.02]  # N m s/rad
  dt: 0.05                  # s, control/recording period (20 Hz)
  substeps: 10              # physics substeps per control period
  obs_noise: 0.0            # std of optional Gaussian state noise

controllers:                # frozen environment gains (ASSUMED)
  rate:
    kp: [10.0, 10.0, 5.0]
    ki: [10.0, 10.0, 5.0]
    kd: [0.05, 0.05, 0.0]
    integral_limit: 1.0
  position:
    kp_pos: 1.0
    kp_alt: 1.5
    kv: 2.0
    kv_z: 3.0
    k_att: 6.0
    k_yaw: 2.0
    vmax_xy: 2.0
    vmax_z: 1.0
    amax_xy: 4.0
    amax_z: 3.0
    tilt_max: 0.5
    rate_max: 3.0

excitation:
  f0: 0.5                   # Hz (ASSUMED)
  f1: 4.0                   # Hz (ASSUMED)
  sweep_time: 2.5           # s per chirp
  amplitude: [0.8, 0.8, 0.4]    # rad/s roll, pitch, yaw (ASSUMED)
  trim_low: [-2.0, -2.0, -0.5]  # body-velocity trim box, m/s (ASSUMED)
  trim_high: [2.0, 2.0, 0.5]
  random_phase: true        # independent phase offset per axis and chirp (ASSUMED)
  reset_timeout: 10.0       # s
  reset_pos_tol: 0.1        # m
  reset_vel_tol: 0.1        # m/s and rad/s
  load_duration: 100.0      # s of chirp flight loaded into the buffer
  include_resets: true

replay:
  capacity: 100000          # steps
  history: 8                # recurrent initializer window (ASSUMED)

model:
  kind: physics             # default kind for `train`/`eval` without --kind
  physics:
    hidden: [128, 128]      # ASSUMED
    gravity_prior: false    # true: weight added analytically, net predicts the rest
    mass_mismatch: 0.0      # fractional error of the nominal mass/inertia
  rnn:
    hidden: 128             # ASSUMED
    init_hidden: [128, 128] # ASSUMED

training:
  horizon: 16               # training rollout length (ASSUMED)
  batch_size: 32            # ASSUMED
  total_updates: 5000
  lr: 0.0003                # Adam (ASSUMED)
  grad_clip: 10.0           # global-norm clip (ASSUMED)
  val_period: 250
  val_horizon: 128
  val_rollouts: 16
  holdout_fraction: 0.1
  loss_weights: {position: 1.0, velocity: 1.0, attitude: 1.0, rates: 1.0}
  online_collect: false     # true: one new chirp cycle every online_period updates
  online_period: 50
  checkpoint_period: 1000

evaluation:
  id_horizon: 128
  n_rollouts: 20
  ood_horizons: [128, 50]
  ood_cruise: 3.0           # m/s
  ood_duration: 6.4         # s
  ood_hover_time: 1.0       # s
  ood_ramp_time: 2.0        # s (ASSUMED)
  id_thresholds: {position: 0.5, velocity: 0.5, attitude: 0.3, rates: 0.5}
  divergence_threshold: 3.0
  ood_ratio_threshold: 3.0
  ood_ratio_min_groups: 2
"""
