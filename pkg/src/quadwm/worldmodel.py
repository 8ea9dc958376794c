"""The two learned world models behind one rollout interface.

``PhysicsModel``: an MLP maps (velocity, attitude sin/cos, rates, action)
to a body wrench which is pushed through the 6DOF equations with RK4.

``RnnModel``: an MLP turns a short (state, action) history into the LSTM's
initial (h, c); the LSTM then consumes one feature vector per step and a
linear head emits the next-state increment.

Both expose ``rollout(batch, flat=None)``. Passing a tape variable as
``flat`` differentiates the whole closed-loop rollout with respect to the
parameters. An ``OracleModel`` wrapping the true plant uses the same
interface to test the evaluation harness.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import autodiff as ad
from .dynamics import rk4_components
from .nn import (
    LstmSpec,
    MlpSpec,
    init_lstm,
    init_mlp,
    lstm_cell,
    mlp_apply,
    named_rng,
    unflatten_lstm,
    unflatten_mlp,
)
from .replay import Batch, ReplayBuffer, make_batch
from .simulator import PlantParams, RateGains, step_env_batch
from .types import ATT, RATE, STATE_DIM, VEL, RigidBodyParams, SingularityError, state_delta, wrap_angle

N_FEATURES = 16
KINDS = ("physics", "rnn")


class RolloutTruncated(SingularityError):
    def __init__(self, step: int, partial):
        super().__init__(f"rollout left the pitch guard at step {step}")
        self.step = step
        self.partial = partial


# ---------------------------------------------------------------------------
# features and normalisation


def feature_components(xc, a) -> list:
    """16 raw feature columns from state components and an action array."""
    a = np.asarray(a, dtype=float)
    phi, theta, psi = xc[6], xc[7], xc[8]
    return [
        xc[3], xc[4], xc[5],
        ad.sin(phi), ad.cos(phi), ad.sin(theta), ad.cos(theta), ad.sin(psi), ad.cos(psi),
        xc[9], xc[10], xc[11],
        a[..., 0], a[..., 1], a[..., 2], a[..., 3],
    ]  # fmt: skip


def features(x, a) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.stack(feature_components([x[..., i] for i in range(STATE_DIM)], a), axis=-1)


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, v):
        return (v - self.mean) / self.std

    def denormalize(self, z):
        return z * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


@dataclass
class Stats:
    """Statistics frozen from the initial buffer."""

    feat: Normalizer
    state_std: np.ndarray  # loss standardisation
    delta_scale: np.ndarray  # one-step increment scale (RNN head)
    wrench_scale: np.ndarray  # net wrench scale (physics head)

    def to_dict(self) -> dict:
        return {
            "feat": self.feat.to_dict(),
            "state_std": self.state_std.tolist(),
            "delta_scale": self.delta_scale.tolist(),
            "wrench_scale": self.wrench_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "Stats":
        return cls(
            Normalizer.from_dict(d["feat"]),
            np.asarray(d["state_std"]),
            np.asarray(d["delta_scale"]),
            np.asarray(d["wrench_scale"]),
        )

    @classmethod
    def identity(cls) -> "Stats":
        return cls(Normalizer(np.zeros(N_FEATURES), np.ones(N_FEATURES)), np.ones(12), np.ones(12), np.ones(6))


def compute_stats(buffer: ReplayBuffer, body: RigidBodyParams, feat_floor: float = 0.1, floor: float = 1e-3) -> Stats:
    eps = buffer.episodes
    if not eps:
        raise ValueError("cannot compute statistics from an empty buffer")
    x0 = np.concatenate([e.states[:-1] for e in eps])
    x1 = np.concatenate([e.states[1:] for e in eps])
    acts = np.concatenate([e.actions for e in eps])
    dt = eps[0].dt
    f = features(x0, acts)
    feat = Normalizer(f.mean(axis=0), np.maximum(f.std(axis=0), feat_floor))
    states = np.concatenate([e.states for e in eps])
    state_std = np.maximum(states.std(axis=0), floor)
    d = state_delta(x1, x0)
    delta_scale = np.maximum(d.std(axis=0), floor)
    # finite-difference estimate of the net wrench, for output scaling only
    v, w = x0[:, VEL], x0[:, RATE]
    vdot = (x1[:, VEL] - v) / dt
    wdot = (x1[:, RATE] - w) / dt
    force = body.mass * (vdot + np.cross(w, v))
    moment = wdot @ body.inertia.T + np.cross(w, w @ body.inertia.T)
    wrench_scale = np.maximum(np.concatenate([force, moment], axis=1).std(axis=0), floor)
    return Stats(feat, state_std, delta_scale, wrench_scale)


def _comps(x):
    if ad.is_var(x):
        return ad.unstack(x)
    x = np.asarray(x, dtype=float)
    return [x[..., i] for i in range(x.shape[-1])]


def _stack(comps):
    if any(ad.is_var(c) for c in comps):
        return ad.stack(comps, axis=-1)
    return np.stack(np.broadcast_arrays(*comps), axis=-1)


def _wrap_att(comps):
    out = list(comps)
    for i in (6, 7, 8):
        out[i] = wrap_angle(out[i])
    return out


# ---------------------------------------------------------------------------
# physics-informed model


@dataclass
class PhysicsModel:
    body: RigidBodyParams
    stats: Stats
    hidden: tuple = (128, 128)
    dt: float = 0.05
    gravity_prior: bool = False
    flat: np.ndarray | None = None
    kind: str = field(default="physics", init=False)

    def __post_init__(self):
        self.spec = MlpSpec((N_FEATURES, *self.hidden, 6))
        if self.flat is None:
            self.flat = np.zeros(self.spec.n_params)

    def init_params(self, seed: int) -> np.ndarray:
        # zero output layer: the untrained model predicts zero net wrench
        self.flat = init_mlp(self.spec, named_rng(seed, "physics.mlp"), zero_output=True)
        return self.flat

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    def layers(self, flat=None):
        return unflatten_mlp(self.spec, self.flat if flat is None else flat)

    def wrench(self, layers, xc, a):
        z = ad.stack(feature_components(xc, a), axis=-1) if any(ad.is_var(c) for c in xc) else np.stack(
            np.broadcast_arrays(*feature_components(xc, a)), axis=-1
        )
        z = (z - self.stats.feat.mean) / self.stats.feat.std
        return mlp_apply(layers, z) * self.stats.wrench_scale

    def step_components(self, layers, xc, a):
        w = self.wrench(layers, xc, a)
        return rk4_components(xc, _comps(w), self.dt, self.body, add_gravity=self.gravity_prior)

    def predict_step(self, x, a, flat=None):
        """Next state from state ``x`` and action ``a`` (arrays or tape vars)."""
        return _stack(self.step_components(self.layers(flat), _comps(x), a))

    def rollout_components(self, batch: Batch, flat=None):
        layers = self.layers(flat)
        xc = [batch.x0[:, i] for i in range(STATE_DIM)]
        preds = []
        for k in range(batch.horizon):
            try:
                xc = self.step_components(layers, xc, batch.actions[:, k])
            except SingularityError:
                raise RolloutTruncated(k, preds)
            preds.append(xc)
        return preds

    def rollout(self, batch: Batch, flat=None):
        try:
            return _rollout_array(self.rollout_components(batch, flat))
        except RolloutTruncated as exc:
            if exc.partial and not ad.is_var(flat):
                exc.partial = _rollout_array(exc.partial)
            else:
                exc.partial = np.zeros((batch.size, 0, STATE_DIM))
            raise

    # persistence -------------------------------------------------------
    def config(self) -> dict:
        return {"hidden": list(self.hidden), "dt": self.dt, "gravity_prior": self.gravity_prior}


# ---------------------------------------------------------------------------
# recurrent baseline


@dataclass
class RnnModel:
    stats: Stats
    hidden: int = 128
    init_hidden: tuple = (128, 128)
    history: int = 8
    dt: float = 0.05
    flat: np.ndarray | None = None
    kind: str = field(default="rnn", init=False)

    def __post_init__(self):
        self.init_spec = MlpSpec((self.history * (N_FEATURES + 1), *self.init_hidden, 2 * self.hidden))
        self.lstm_spec = LstmSpec(N_FEATURES, self.hidden)
        self.head_spec = MlpSpec((self.hidden, STATE_DIM))
        a = self.init_spec.n_params
        b = a + self.lstm_spec.n_params
        self._bounds = (a, b, b + self.head_spec.n_params)
        if self.flat is None:
            self.flat = np.zeros(self.n_params)

    @property
    def n_params(self) -> int:
        return self._bounds[2]

    def init_params(self, seed: int) -> np.ndarray:
        self.flat = np.concatenate(
            [
                init_mlp(self.init_spec, named_rng(seed, "rnn.init")),
                init_lstm(self.lstm_spec, named_rng(seed, "rnn.lstm")),
                np.zeros(self.head_spec.n_params),
            ]
        )
        return self.flat

    def parts(self, flat=None):
        flat = self.flat if flat is None else flat
        a, b, c = self._bounds
        return (
            unflatten_mlp(self.init_spec, flat[:a]),
            unflatten_lstm(self.lstm_spec, flat[a:b]),
            unflatten_mlp(self.head_spec, flat[b:c]),
        )

    def _norm_features(self, x, a):
        f = features(x, a)
        return (f - self.stats.feat.mean) / self.stats.feat.std

    def init_state(self, parts, hist_states, hist_actions, hist_mask):
        hist_states = np.asarray(hist_states, dtype=float)
        if hist_states.shape[-2] != self.history:
            raise ValueError(f"history window must have {self.history} steps, got {hist_states.shape[-2]}")
        mask = np.asarray(hist_mask, dtype=float)[..., None]
        f = self._norm_features(hist_states, hist_actions) * mask
        flat_in = np.concatenate([f, mask], axis=-1).reshape(*hist_states.shape[:-2], -1)
        out = mlp_apply(parts[0], flat_in)
        return out[..., : self.hidden], out[..., self.hidden :]

    def step(self, parts, h, c, xc, a):
        z = ad.stack(feature_components(xc, a), axis=-1) if any(ad.is_var(v) for v in xc) else np.stack(
            np.broadcast_arrays(*feature_components(xc, a)), axis=-1
        )
        z = (z - self.stats.feat.mean) / self.stats.feat.std
        h, c = lstm_cell(parts[1], h, c, z)
        delta = mlp_apply(parts[2], h) * self.stats.delta_scale
        dc = _comps(delta)
        return _wrap_att([xc[i] + dc[i] for i in range(STATE_DIM)]), h, c

    def rollout_components(self, batch: Batch, flat=None):
        parts = self.parts(flat)
        h, c = self.init_state(parts, batch.hist_states, batch.hist_actions, batch.hist_mask)
        xc = [batch.x0[:, i] for i in range(STATE_DIM)]
        preds = []
        for k in range(batch.horizon):
            xc, h, c = self.step(parts, h, c, xc, batch.actions[:, k])
            preds.append(xc)
        return preds

    def rollout(self, batch: Batch, flat=None):
        return _rollout_array(self.rollout_components(batch, flat))

    def config(self) -> dict:
        return {"hidden": self.hidden, "init_hidden": list(self.init_hidden), "history": self.history, "dt": self.dt}


def _rollout_array(preds):
    """(B, H, 12) from per-step component lists (plain path) or stacked vars."""
    steps = [_stack(p) for p in preds]
    if any(ad.is_var(s) for s in steps):
        return steps
    return np.stack(steps, axis=1)


# ---------------------------------------------------------------------------
# oracle


@dataclass
class OracleModel:
    """The true plant dressed as a model; needs the recorded plant internals."""

    plant: PlantParams = field(default_factory=PlantParams)
    rate_gains: RateGains = field(default_factory=RateGains)
    dt: float = 0.05
    substeps: int = 10
    kind: str = field(default="oracle", init=False)

    def rollout(self, batch: Batch, flat=None):
        if batch.hidden0 is None:
            raise ValueError("oracle rollout needs recorded plant internals (hidden0)")
        out = np.zeros(batch.truth.shape)
        x, hidden = batch.x0, batch.hidden0
        for k in range(batch.horizon):
            x, hidden, dead = step_env_batch(x, hidden, batch.actions[:, k], self.plant, self.rate_gains, self.dt, self.substeps)
            if dead.any():
                b = int(np.flatnonzero(dead)[0])
                raise RolloutTruncated(k, out[b : b + 1, :k])
            out[:, k] = x
        return out


# ---------------------------------------------------------------------------
# module-level API


def pi_predict_step(model: PhysicsModel, x, a, dt: float | None = None, flat=None):
    if dt is not None and dt != model.dt:
        model = PhysicsModel(model.body, model.stats, model.hidden, dt, model.gravity_prior, model.flat)
    return model.predict_step(x, a, flat)


def rnn_init(model: RnnModel, hist_states, hist_actions, hist_mask=None, flat=None):
    hist_states = np.asarray(hist_states, dtype=float)
    if hist_mask is None:
        hist_mask = np.ones(hist_states.shape[:-1])
    return model.init_state(model.parts(flat), hist_states, hist_actions, hist_mask)


def rnn_predict_step(model: RnnModel, h, c, x, a, flat=None):
    nxt, h, c = model.step(model.parts(flat), h, c, _comps(x), a)
    return _stack(nxt), h, c


def rollout_model(model, x0, actions, history=None, hidden0=None) -> np.ndarray:
    """Closed-loop rollout of one sequence; returns ``(len(actions), 12)``.

    ``history`` is ``(states, actions, mask)`` for the recurrent model.
    """
    x0 = np.asarray(x0, dtype=float)
    actions = np.asarray(actions, dtype=float)
    L = getattr(model, "history", 0)
    if history is None:
        history = (np.zeros((L, 12)), np.zeros((L, 4)), np.zeros(L))
    hs, ha, hm = history
    item = (x0, actions, np.zeros((len(actions), 12)), np.asarray(hs), np.asarray(ha), np.asarray(hm), hidden0)
    return model.rollout(make_batch([item]))[0]


def make_model(kind: str, stats: Stats, body: RigidBodyParams, cfg: dict | None = None, seed: int | None = None):
    cfg = dict(cfg or {})
    if kind == "physics":
        model = PhysicsModel(
            body,
            stats,
            hidden=tuple(cfg.get("hidden", (128, 128))),
            dt=cfg.get("dt", 0.05),
            gravity_prior=cfg.get("gravity_prior", False),
        )
    elif kind == "rnn":
        model = RnnModel(
            stats,
            hidden=cfg.get("hidden", 128),
            init_hidden=tuple(cfg.get("init_hidden", (128, 128))),
            history=cfg.get("history", 8),
            dt=cfg.get("dt", 0.05),
        )
    else:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    if seed is not None:
        model.init_params(seed)
    return model


def model_payload(model) -> dict[str, Any]:
    payload = {"kind": model.kind, "model": model.config(), "stats": model.stats.to_dict(), "params": model.flat.tolist()}
    if model.kind == "physics":
        payload["body"] = {"mass": model.body.mass, "inertia": model.body.inertia.tolist(), "gravity": model.body.gravity}
    return payload


def model_from_payload(payload: dict):
    stats = Stats.from_dict(payload["stats"])
    body = None
    if "body" in payload:
        b = payload["body"]
        body = RigidBodyParams(b["mass"], np.asarray(b["inertia"]), b["gravity"])
    model = make_model(payload["kind"], stats, body, payload["model"])
    model.flat = np.asarray(payload["params"], dtype=float)
    return model
