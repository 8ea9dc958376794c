import logging

import numpy as np
import pytest

from quadwm.excitation import ChirpConfig, load_buffer
from quadwm.nn import AdamState, named_rng
from quadwm.replay import ReplayBuffer, make_batch, window
from quadwm.simulator import QuadEnv
from quadwm.training import TrainConfig, TrainLog, rollout_loss, split_holdout, train_step, train_world_model
from quadwm.types import Episode, RigidBodyParams, Tag, state_delta
from quadwm.worldmodel import PhysicsModel, RnnModel, Stats, compute_stats

P = RigidBodyParams()
SMALL = {"physics": {"hidden": (8,)}, "rnn": {"hidden": 4, "init_hidden": (8,)}}


@pytest.fixture(scope="module")
def buffer():
    return load_buffer(QuadEnv(), ChirpConfig(load_duration=15.0), named_rng(0, "collect.chirp"))


def quick_cfg(**kw):
    base = dict(horizon=4, batch_size=4, total_updates=6, val_period=3, val_horizon=16, val_rollouts=4, checkpoint_period=0)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(horizon=0)
    with pytest.raises(ValueError):
        TrainConfig(holdout_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(loss_weights={"position": -1.0})
    with pytest.raises(ValueError):
        TrainConfig(loss_weights={"altitude": 1.0})


def test_loss_zero_for_exact_model(buffer):
    m = PhysicsModel(P, compute_stats(buffer, P), hidden=(8,))
    m.init_params(0)
    batch = buffer.sample_sequences(np.random.default_rng(0), 4, 6)
    batch.truth = m.rollout(batch)
    assert rollout_loss(m, batch) == 0.0


def test_loss_of_constant_prediction(buffer):
    stats = compute_stats(buffer, P)
    m = RnnModel(stats, hidden=4, init_hidden=(8,))
    m.init_params(0)  # zero head: every prediction equals x0
    batch = buffer.sample_sequences(np.random.default_rng(1), 5, 7)
    expect = np.mean((state_delta(batch.truth, batch.x0[:, None, :]) / stats.state_std) ** 2)
    assert rollout_loss(m, batch) == pytest.approx(expect, rel=1e-12)


def test_doubling_weights_doubles_loss(buffer):
    m = PhysicsModel(P, compute_stats(buffer, P), hidden=(8,))
    m.init_params(1)
    m.flat += 0.01 * named_rng(0, "p").normal(size=m.n_params)
    batch = buffer.sample_sequences(np.random.default_rng(2), 4, 5)
    one = rollout_loss(m, batch, weights={"position": 1.0, "velocity": 0.5, "attitude": 2.0, "rates": 1.0})
    two = rollout_loss(m, batch, weights={"position": 2.0, "velocity": 1.0, "attitude": 4.0, "rates": 2.0})
    assert two == pytest.approx(2 * one, rel=1e-12)


def test_perfect_model_does_not_move(buffer):
    m = PhysicsModel(P, compute_stats(buffer, P), hidden=(8,))
    m.init_params(0)
    batch = buffer.sample_sequences(np.random.default_rng(0), 4, 6)
    batch.truth = m.rollout(batch)
    before = m.flat.copy()
    opt, res = train_step(m, batch, AdamState.zeros(m.n_params), quick_cfg())
    assert res.loss == 0.0 and np.array_equal(m.flat, before) and opt.step == 1


def test_non_finite_step_is_skipped(buffer, caplog):
    m = PhysicsModel(P, compute_stats(buffer, P), hidden=(8,))
    m.init_params(0)
    m.flat[-6:] = np.inf
    batch = buffer.sample_sequences(np.random.default_rng(0), 2, 3)
    before = m.flat.copy()
    with caplog.at_level(logging.WARNING), np.errstate(all="ignore"):
        opt, res = train_step(m, batch, AdamState.zeros(m.n_params), quick_cfg())
    assert res.skipped and opt.step == 1
    assert np.array_equal(m.flat, before)
    assert "skipped" in caplog.text


def test_truncated_rollout_uses_completed_steps(buffer, caplog):
    m = PhysicsModel(P, Stats.identity(), hidden=(4,))
    m.init_params(0)
    m.flat[-2] = 0.05  # constant pitch moment trips the guard after ~16 steps
    ep = Episode(np.zeros((41, 12)), np.tile([0, 0, 0, 0.5], (40, 1)), Tag.CHIRP)
    batch = make_batch([window(ep, 0, 40, 2)])
    with caplog.at_level(logging.WARNING):
        loss = rollout_loss(m, batch)
    assert np.isfinite(loss) and loss > 0
    assert "truncated" in caplog.text


def test_train_log_monotone():
    log = TrainLog()
    log.record(update=1, loss=1.0, grad_norm=1.0, skipped=False, wall=0.0)
    with pytest.raises(ValueError):
        log.record(update=1, loss=1.0, grad_norm=1.0, skipped=False, wall=0.0)


def test_split_holdout(buffer):
    train, held = split_holdout(buffer, 0.1)
    n = len(buffer)
    assert len(held) == int(np.ceil(0.1 * n)) and len(train) + len(held) == n
    assert held.episodes[-1] is buffer.episodes[-1]
    with pytest.raises(ValueError):
        split_holdout(ReplayBuffer(), 0.1)


def test_zero_updates(buffer, tmp_path):
    m, log = train_world_model(buffer, "physics", quick_cfg(total_updates=0), P, SMALL["physics"], tmp_path)
    assert log.rows == [] and len(log.validations) == 1
    assert (tmp_path / "init.json").exists() and (tmp_path / "best.json").exists()
    assert (tmp_path / "train_log.csv").read_text().startswith("update,loss")


def test_empty_buffer_rejected():
    with pytest.raises(ValueError):
        train_world_model(ReplayBuffer(), "physics", quick_cfg())


def test_holdout_never_sampled(buffer, monkeypatch):
    held_ids = {id(e) for e in split_holdout(buffer, 0.1)[1].episodes}
    seen = []
    orig = ReplayBuffer.sample_sequences

    def spy(self, rng, batch, horizon, history=8):
        if horizon == 4:
            seen.extend(id(e) for e in self.episodes)
        return orig(self, rng, batch, horizon, history)

    monkeypatch.setattr(ReplayBuffer, "sample_sequences", spy)
    train_world_model(buffer, "rnn", quick_cfg(), P, SMALL["rnn"])
    assert seen and not held_ids & set(seen)


def test_training_is_reproducible(buffer, tmp_path):
    runs = []
    for k in range(2):
        m, log = train_world_model(buffer, "physics", quick_cfg(), P, SMALL["physics"], tmp_path / str(k))
        runs.append((m.flat.copy(), log.comparable()))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert runs[0][1] == runs[1][1]
    a = (tmp_path / "0" / "last.json").read_text()
    assert a == (tmp_path / "1" / "last.json").read_text()


def test_training_loss_falls(buffer):
    cfg = quick_cfg(total_updates=80, val_period=80, batch_size=8, lr=1e-3)
    for kind in ("physics", "rnn"):
        _, log = train_world_model(buffer, kind, cfg, P, SMALL[kind])
        losses = [r["loss"] for r in log.rows]
        assert np.mean(losses[-20:]) < np.mean(losses[:20])
