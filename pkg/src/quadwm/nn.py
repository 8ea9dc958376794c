"""Neural building blocks over the tape: MLP, LSTM cell, Adam, checkpoints.

Parameters live in one flat float64 vector per network with a fixed layout,
so a whole model is a single tape leaf and an optimizer step is one vector
update. ``unflatten`` slices that vector (or a ``Var`` over it) into layer
tensors.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad

CHECKPOINT_VERSION = 1


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream for a named call site; same (seed, name) -> same stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))


# ---------------------------------------------------------------------------
# MLP


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid MLP widths {self.widths}")
        object.__setattr__(self, "widths", widths)

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def layout(self) -> list[tuple[int, int, int]]:
        """(offset, fan_in, fan_out) per layer; weights then biases."""
        out, off = [], 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            out.append((off, a, b))
            off += (a + 1) * b
        return out


@dataclass
class MlpParams:
    spec: MlpSpec
    flat: Any  # np.ndarray or Var

    def layers(self):
        return unflatten_mlp(self.spec, self.flat)


def unflatten_mlp(spec: MlpSpec, flat) -> list:
    layers = []
    for off, a, b in spec.layout():
        w = flat[off : off + a * b].reshape(a, b)
        bias = flat[off + a * b : off + (a + 1) * b]
        layers.append((w, bias))
    return layers


def flatten_mlp(layers: Sequence) -> np.ndarray:
    return np.concatenate([np.concatenate([np.ravel(w), np.ravel(b)]) for w, b in layers])


def init_mlp(spec: MlpSpec, rng: np.random.Generator, zero_output: bool = False) -> np.ndarray:
    """Xavier-uniform weights, zero biases; optionally a zeroed output layer."""
    layers = []
    n = len(spec.widths) - 1
    for k, (_, a, b) in enumerate(spec.layout()):
        w = np.zeros((a, b)) if (zero_output and k == n - 1) else xavier_uniform(rng, a, b)
        layers.append((w, np.zeros(b)))
    return flatten_mlp(layers)


def mlp_apply(layers: Sequence, x):
    """tanh hidden layers, linear output; ``x`` is ``(..., n_in)``."""
    h = x
    last = len(layers) - 1
    for k, (w, b) in enumerate(layers):
        h = ad.matmul(h, w) + b
        if k < last:
            h = ad.tanh(h)
    return h


def mlp_forward(params: MlpParams, x):
    n_in = params.spec.n_in
    if np.shape(ad.value(x))[-1] != n_in:
        raise ValueError(f"MLP expects {n_in} inputs, got shape {np.shape(ad.value(x))}")
    return mlp_apply(params.layers(), x)


# ---------------------------------------------------------------------------
# LSTM


@dataclass(frozen=True)
class LstmSpec:
    n_in: int
    hidden: int

    @property
    def n_params(self) -> int:
        return (self.n_in + self.hidden + 1) * 4 * self.hidden


@dataclass
class LstmParams:
    spec: LstmSpec
    flat: Any

    def tensors(self):
        return unflatten_lstm(self.spec, self.flat)


def unflatten_lstm(spec: LstmSpec, flat):
    """(W_x, W_h, b) with gate blocks ordered input, forget, cell, output."""
    n, h = spec.n_in, spec.hidden
    g = 4 * h
    wx = flat[: n * g].reshape(n, g)
    wh = flat[n * g : (n + h) * g].reshape(h, g)
    b = flat[(n + h) * g : (n + h + 1) * g]
    return wx, wh, b


def init_lstm(spec: LstmSpec, rng: np.random.Generator, forget_bias: float = 1.0) -> np.ndarray:
    n, h = spec.n_in, spec.hidden
    wx = xavier_uniform(rng, n, h, shape=(n, 4 * h))
    wh = xavier_uniform(rng, h, h, shape=(h, 4 * h))
    b = np.zeros(4 * h)
    b[h : 2 * h] = forget_bias
    return np.concatenate([wx.ravel(), wh.ravel(), b])


def lstm_cell(tensors, h, c, x):
    wx, wh, b = tensors
    hid = np.shape(ad.value(wh))[0]
    z = ad.matmul(x, wx) + ad.matmul(h, wh) + b
    i = ad.sigmoid(z[..., 0:hid])
    f = ad.sigmoid(z[..., hid : 2 * hid])
    g = ad.tanh(z[..., 2 * hid : 3 * hid])
    o = ad.sigmoid(z[..., 3 * hid : 4 * hid])
    c_new = f * c + i * g
    h_new = o * ad.tanh(c_new)
    return h_new, c_new


def lstm_step(params: LstmParams, h, c, x):
    spec = params.spec
    if np.shape(ad.value(x))[-1] != spec.n_in:
        raise ValueError(f"LSTM expects {spec.n_in} inputs, got shape {np.shape(ad.value(x))}")
    if np.shape(ad.value(h))[-1] != spec.hidden or np.shape(ad.value(c))[-1] != spec.hidden:
        raise ValueError("hidden/cell state size mismatch")
    return lstm_cell(params.tensors(), h, c, x)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 3e-4, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)

    def to_dict(self) -> dict:
        return {
            "m": self.m.tolist(),
            "v": self.v.tolist(),
            "step": self.step,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(np.asarray(d["m"]), np.asarray(d["v"]), int(d["step"]), d["lr"], d["beta1"], d["beta2"], d["eps"])


def adam_update(params: np.ndarray, grads: np.ndarray, st: AdamState) -> tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam step. Raises on non-finite gradients."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != st.m.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient")
    step = st.step + 1
    m = st.beta1 * st.m + (1 - st.beta1) * grads
    v = st.beta2 * st.v + (1 - st.beta2) * grads * grads
    m_hat = m / (1 - st.beta1**step)
    v_hat = v / (1 - st.beta2**step)
    new = params - st.lr * m_hat / (np.sqrt(v_hat) + st.eps)
    return new, AdamState(m, v, step, st.lr, st.beta1, st.beta2, st.eps)


def clip_by_norm(g: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(g))
    if max_norm > 0 and norm > max_norm:
        g = g * (max_norm / norm)
    return g, norm


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(path: str | Path, payload: dict) -> None:
    doc = {"format": "quadwm-checkpoint", "version": CHECKPOINT_VERSION, **payload}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "quadwm-checkpoint":
        raise ValueError(f"{path} is not a checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    return doc
