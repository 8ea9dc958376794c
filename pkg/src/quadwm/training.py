"""Closed-loop multi-step rollout training for either world model."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .evaluation import evaluate_id, id_windows
from .nn import AdamState, adam_update, clip_by_norm, named_rng, rng_state, save_checkpoint
from .replay import Batch, ReplayBuffer
from .types import GROUPS, GROUP_SLICES, STATE_DIM, TWO_PI, RigidBodyParams, state_delta
from .worldmodel import RolloutTruncated, Stats, compute_stats, make_model, model_payload

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    horizon: int = 16
    batch_size: int = 32
    total_updates: int = 5000
    lr: float = 3e-4
    grad_clip: float = 10.0
    val_period: int = 250
    val_horizon: int = 128
    val_rollouts: int = 16
    holdout_fraction: float = 0.1
    history: int = 8
    loss_weights: dict = field(default_factory=lambda: {g: 1.0 for g in GROUPS})
    seed: int = 0
    online_collect: bool = False
    online_period: int = 50
    checkpoint_period: int = 1000

    def __post_init__(self):
        for name in ("horizon", "batch_size", "val_period", "val_horizon", "val_rollouts", "history"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.total_updates < 0 or self.lr <= 0 or self.grad_clip < 0:
            raise ValueError("total_updates >= 0, lr > 0 and grad_clip >= 0 required")
        if not 0 < self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must be in (0, 1)")
        unknown = set(self.loss_weights) - set(GROUPS)
        if unknown or any(w < 0 for w in self.loss_weights.values()):
            raise ValueError(f"loss_weights must be non-negative and keyed by {GROUPS}")


def weight_vector(weights: dict | None) -> np.ndarray:
    w = np.ones(STATE_DIM)
    for g, v in (weights or {}).items():
        w[GROUP_SLICES[g]] = v
    return w


# ---------------------------------------------------------------------------
# loss


def _step_sq_error(pred, truth, scale):
    """Sum over batch and state of ``(wrapped error * scale)^2`` for one step."""
    d = pred - truth
    dv = ad.value(d)
    shift = np.zeros_like(dv)
    shift[..., 6:9] = TWO_PI * np.ceil((dv[..., 6:9] - math.pi) / TWO_PI)
    e = (d - shift) * scale
    return (e * e).sum()


def rollout_loss(model, batch: Batch, flat=None, weights: dict | None = None, stats: Stats | None = None):
    """Mean weighted squared standardised error over batch, horizon and state.

    A rollout that leaves the pitch guard contributes the steps completed
    before it did; the truncation is logged.
    """
    stats = stats or model.stats
    scale = np.sqrt(weight_vector(weights)) / stats.state_std
    try:
        preds = model.rollout_components(batch, flat)
    except RolloutTruncated as exc:
        log.warning("training rollout truncated at step %d", exc.step)
        preds = exc.partial
        if not preds:
            raise
    total = 0.0
    for k, xc in enumerate(preds):
        p = ad.stack(xc, axis=-1) if any(ad.is_var(c) for c in xc) else np.stack(np.broadcast_arrays(*xc), axis=-1)
        total = total + _step_sq_error(p, batch.truth[:, k], scale)
    return total * (1.0 / (batch.size * len(preds) * STATE_DIM))


def loss_and_grad(model, batch: Batch, weights=None, flat=None) -> tuple[float, np.ndarray]:
    tape = ad.Tape()
    p = tape.var(model.flat if flat is None else flat)
    loss = rollout_loss(model, batch, p, weights)
    if not ad.is_var(loss):
        return float(loss), np.zeros_like(p.value)
    grads = tape.backward(loss)
    g = grads[p.index]
    return float(loss.value), (np.zeros_like(p.value) if g is None else g)


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    skipped: bool


def train_step(model, batch: Batch, opt: AdamState, cfg: TrainConfig) -> tuple[AdamState, StepResult]:
    """One clipped Adam update in place on ``model.flat``.

    A non-finite forward value or gradient skips the update but still
    advances the optimizer's step counter.
    """
    try:
        loss, g = loss_and_grad(model, batch, cfg.loss_weights)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
    except (FloatingPointError, RolloutTruncated) as exc:
        log.warning("update %d skipped: %s", opt.step + 1, exc)
        return AdamState(opt.m, opt.v, opt.step + 1, opt.lr, opt.beta1, opt.beta2, opt.eps), StepResult(
            float("nan"), float("nan"), True
        )
    g, norm = clip_by_norm(g, cfg.grad_clip)
    model.flat, opt = adam_update(model.flat, g, opt)
    return opt, StepResult(loss, norm, False)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    validations: list[dict] = field(default_factory=list)

    def record(self, **row) -> None:
        if self.rows and row["update"] <= self.rows[-1]["update"]:
            raise ValueError("update counter must increase")
        self.rows.append(row)

    def comparable(self) -> tuple:
        """Everything except wall-clock fields."""
        strip = lambda r: {k: v for k, v in r.items() if k != "wall"}
        return [strip(r) for r in self.rows], [strip(v) for v in self.validations]

    def write_csv(self, path: str | Path) -> None:
        cols = ["update", "loss", "grad_norm", "skipped", *[f"val_{g}" for g in GROUPS], "val_score", "wall"]
        vals = {v["update"]: v for v in self.validations}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                v = vals.get(r["update"], {})
                w.writerow(
                    [r["update"], repr(r["loss"]), repr(r["grad_norm"]), int(r["skipped"])]
                    + [repr(v[f"val_{g}"]) if v else "" for g in GROUPS]
                    + [repr(v["val_score"]) if v else "", f"{r['wall']:.3f}"]
                )


def split_holdout(buffer: ReplayBuffer, fraction: float) -> tuple[ReplayBuffer, ReplayBuffer]:
    """The final ``fraction`` of episodes (a contiguous block) is held out."""
    n = len(buffer)
    if n == 0:
        raise ValueError("empty replay buffer")
    n_hold = max(1, int(math.ceil(fraction * n)))
    if n_hold >= n:
        raise ValueError("buffer too small to hold out validation episodes")
    return buffer.subset(range(n - n_hold)), buffer.subset(range(n - n_hold, n))


def validation_score(model, windows: Batch) -> dict:
    rep = evaluate_id(model, None, windows=windows, dataset="id-heldout")
    out = {f"val_{g}": rep.overall(g) for g in GROUPS}
    # standardised RMSE across all 12 dimensions selects the best checkpoint
    mse = np.concatenate([rep.per_axis[g] ** 2 for g in GROUPS]) / model.stats.state_std**2
    out["val_score"] = float(np.sqrt(mse.mean()))
    out["val_truncated"] = rep.truncated
    return out


def train_world_model(
    buffer: ReplayBuffer,
    kind: str,
    cfg: TrainConfig,
    body: RigidBodyParams | None = None,
    model_cfg: dict | None = None,
    out_dir: str | Path | None = None,
    collector: Callable[[], list] | None = None,
    progress: Callable[[dict], None] | None = None,
):
    """Train ``kind`` on ``buffer``; returns the best-validation model and log."""
    if buffer is None or len(buffer) == 0:
        raise ValueError("empty replay buffer")
    body = body or RigidBodyParams()
    train_buf, held = split_holdout(buffer, cfg.holdout_fraction)
    stats = compute_stats(train_buf, body)
    mcfg = dict(model_cfg or {})
    mcfg.setdefault("dt", buffer.episodes[0].dt)
    if kind == "rnn":
        mcfg.setdefault("history", cfg.history)
    model = make_model(kind, stats, body, mcfg, seed=cfg.seed)
    opt = AdamState.zeros(model.n_params, lr=cfg.lr)
    rng = named_rng(cfg.seed, "train.batches")
    val_windows = id_windows(held, named_rng(cfg.seed, "train.validation"), cfg.val_rollouts, cfg.val_horizon, cfg.history)
    tlog = TrainLog()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def ckpt(name: str, flat: np.ndarray, update: int) -> None:
        if out is None:
            return
        saved = model.flat
        model.flat = flat
        payload = model_payload(model)
        model.flat = saved
        payload.update(
            update=update,
            optimizer=opt.to_dict(),
            rng=rng_state(rng),
            train_config=asdict(cfg),
        )
        save_checkpoint(out / name, payload)

    v = validation_score(model, val_windows)
    tlog.validations.append({"update": 0, **v})
    best = (v["val_score"], model.flat.copy(), 0)
    ckpt("init.json", model.flat, 0)
    t0 = time.perf_counter()
    for u in range(1, cfg.total_updates + 1):
        batch = train_buf.sample_sequences(rng, cfg.batch_size, cfg.horizon, cfg.history)
        opt, res = train_step(model, batch, opt, cfg)
        tlog.record(update=u, loss=res.loss, grad_norm=res.grad_norm, skipped=res.skipped, wall=time.perf_counter() - t0)
        if cfg.online_collect and collector is not None and u % cfg.online_period == 0:
            for ep in collector():
                train_buf.append(ep)
        if u % cfg.val_period == 0 or u == cfg.total_updates:
            v = validation_score(model, val_windows)
            tlog.validations.append({"update": u, **v})
            if v["val_truncated"] == 0 and v["val_score"] < best[0]:
                best = (v["val_score"], model.flat.copy(), u)
                ckpt("best.json", model.flat, u)
            if progress is not None:
                progress({"update": u, "loss": res.loss, **v})
            log.info("update %d loss %.5f val %.4f", u, res.loss, v["val_score"])
        if out is not None and cfg.checkpoint_period and u % cfg.checkpoint_period == 0:
            ckpt(f"update_{u:06d}.json", model.flat, u)
    if out is not None:
        ckpt("last.json", model.flat, cfg.total_updates)
    model.flat = best[1]
    if out is not None:
        ckpt("best.json", model.flat, best[2])
        tlog.write_csv(out / "train_log.csv")
    model.best_update = best[2]
    model.holdout = held
    return model, tlog
