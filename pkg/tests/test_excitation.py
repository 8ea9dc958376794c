import math

import numpy as np
import pytest

from quadwm.excitation import ChirpConfig, chirp_value, collect_chirp_episode, load_buffer, sample_trim
from quadwm.nn import named_rng
from quadwm.simulator import QuadEnv
from quadwm.types import Tag


@pytest.fixture(scope="module")
def default_buffer():
    env = QuadEnv()
    return load_buffer(env, ChirpConfig(), named_rng(0, "collect.chirp"))


def test_config_validation():
    with pytest.raises(ValueError):
        ChirpConfig(f0=2.0, f1=1.0)
    with pytest.raises(ValueError):
        ChirpConfig(sweep_time=0.0)
    with pytest.raises(ValueError):
        ChirpConfig(amplitude=(-1.0, 0.0, 0.0))


def test_chirp_examples():
    cfg = ChirpConfig()
    assert np.array_equal(chirp_value(0.0, cfg), np.zeros(3))
    one = ChirpConfig(f0=1.0, f1=1.0, amplitude=(1.0, 1.0, 1.0))
    assert np.allclose(chirp_value(0.25, one), 1.0)
    expect = 0.8 * math.sin(2 * math.pi * (0.5 * 2.5 + 3.5 * 2.5**2 / 5.0))
    assert chirp_value(2.5, cfg)[0] == pytest.approx(expect, abs=1e-12)
    with pytest.raises(ValueError):
        chirp_value(2.6, cfg)
    with pytest.raises(ValueError):
        chirp_value(-0.1, cfg)


def test_chirp_instantaneous_frequency():
    cfg = ChirpConfig(amplitude=(1.0, 1.0, 1.0))
    t = np.linspace(0, cfg.sweep_time, 20001)
    y = np.array([chirp_value(v, cfg)[0] for v in t])
    zc = t[1:][np.diff(np.signbit(y)) != 0]
    mid = 0.5 * (zc[1:] + zc[:-1])
    freq = 1.0 / (2 * np.diff(zc))
    slope, icept = np.polyfit(mid, freq, 1)
    assert abs(icept - cfg.f0) / cfg.f0 < 0.1
    assert abs(icept + slope * cfg.sweep_time - cfg.f1) / cfg.f1 < 0.1


def test_sample_trim():
    point = ChirpConfig(trim_low=(1.0, -1.0, 0.2), trim_high=(1.0, -1.0, 0.2))
    assert np.array_equal(sample_trim(named_rng(0, "t"), point), [1.0, -1.0, 0.2])
    cfg = ChirpConfig()
    assert np.array_equal(sample_trim(named_rng(4, "t"), cfg), sample_trim(named_rng(4, "t"), cfg))
    r = named_rng(1, "t")
    box = ChirpConfig(trim_low=(-2, -2, -2), trim_high=(2, 2, 2))
    s = np.array([sample_trim(r, box) for _ in range(10000)])
    assert np.all(np.abs(s.mean(0)) < 0.1)
    assert s.min() >= -2 and s.max() <= 2


def test_quiet_chirp_is_hover():
    cfg = ChirpConfig(amplitude=(0, 0, 0), trim_low=(0, 0, 0), trim_high=(0, 0, 0))
    ep, _ = collect_chirp_episode(QuadEnv(), cfg, named_rng(0, "c"))
    assert np.abs(ep.states[:, :3]).max() < 0.1 and np.abs(ep.states[:, 6:9]).max() < 0.1


def test_chirp_episode_shape_and_seeds():
    cfg = ChirpConfig()
    a, reset = collect_chirp_episode(QuadEnv(), cfg, named_rng(0, "c"))
    b, _ = collect_chirp_episode(QuadEnv(), cfg, named_rng(1, "c"))
    assert len(a) == 50 and a.tag == Tag.CHIRP
    assert reset is not None and reset.tag == Tag.RESET
    assert np.array_equal(a.states[-1], reset.states[0])
    assert not np.array_equal(a.states, b.states)


def test_load_buffer_rejects_zero_duration():
    with pytest.raises(ValueError):
        load_buffer(QuadEnv(), ChirpConfig(load_duration=0.0), named_rng(0, "c"))


def test_default_buffer(default_buffer):
    counts = default_buffer.tag_counts()
    assert counts["Chirp"] == 2000
    assert (counts.get("Chirp", 0) + counts.get("Reset", 0)) / default_buffer.size >= 0.9
    for ep in default_buffer.episodes:
        assert len(ep.states) == len(ep.actions) + 1
        assert not ep.truncated


def test_load_buffer_deterministic(default_buffer):
    cfg = ChirpConfig(load_duration=10.0)
    a = load_buffer(QuadEnv(), cfg, named_rng(0, "collect.chirp"))
    b = load_buffer(QuadEnv(), cfg, named_rng(0, "collect.chirp"))
    assert len(a) == len(b)
    for x, y in zip(a.episodes, b.episodes):
        assert np.array_equal(x.states, y.states) and np.array_equal(x.actions, y.actions)
    # the short run is a prefix of the default one
    assert np.array_equal(a.episodes[0].states, default_buffer.episodes[0].states)
