"""Episode store with whole-episode FIFO eviction and window sampling."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .types import ACTION_DIM, STATE_DIM, Episode, read_episodes, write_episodes

MANIFEST = "manifest.json"
EPISODES_FILE = "episodes.jsonl"


class NoEligibleEpisode(ValueError):
    pass


@dataclass
class Batch:
    """Training/validation windows.

    ``truth[:, k]`` is the state reached after ``actions[:, k]``. The history
    arrays hold the ``(state, action)`` pairs preceding ``x0`` (oldest first);
    ``hist_mask`` is 0 where the window ran past the episode start.
    """

    x0: np.ndarray  # (B, 12)
    actions: np.ndarray  # (B, H, 4)
    truth: np.ndarray  # (B, H, 12)
    hist_states: np.ndarray  # (B, L, 12)
    hist_actions: np.ndarray  # (B, L, 4)
    hist_mask: np.ndarray  # (B, L)
    hidden0: np.ndarray | None = None  # (B, hidden) plant internals at x0, when recorded
    source: np.ndarray | None = None  # (B, 2) episode index and start offset

    @property
    def size(self) -> int:
        return self.x0.shape[0]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    def item(self, i: int) -> "Batch":
        sl = slice(i, i + 1)
        return Batch(
            self.x0[sl],
            self.actions[sl],
            self.truth[sl],
            self.hist_states[sl],
            self.hist_actions[sl],
            self.hist_mask[sl],
            None if self.hidden0 is None else self.hidden0[sl],
            None if self.source is None else self.source[sl],
        )


def window(ep: Episode, start: int, horizon: int, history: int):
    """Single window from ``ep`` beginning at state ``start``."""
    hs = np.zeros((history, STATE_DIM))
    ha = np.zeros((history, ACTION_DIM))
    hm = np.zeros(history)
    lo = start - history
    for j in range(history):
        k = lo + j
        if k >= 0:
            hs[j] = ep.states[k]
            ha[j] = ep.actions[k]
            hm[j] = 1.0
    return (
        ep.states[start],
        ep.actions[start : start + horizon],
        ep.states[start + 1 : start + horizon + 1],
        hs,
        ha,
        hm,
        None if ep.hidden is None else ep.hidden[start],
    )


def make_batch(items: Sequence[tuple], source=None) -> Batch:
    cols = list(zip(*items))
    hidden = None if any(h is None for h in cols[6]) else np.array(cols[6])
    return Batch(
        np.array(cols[0]),
        np.array(cols[1]),
        np.array(cols[2]),
        np.array(cols[3]),
        np.array(cols[4]),
        np.array(cols[5]),
        hidden,
        None if source is None else np.asarray(source),
    )


def merge_contiguous(episodes: Iterable[Episode]) -> list[Episode]:
    """Join consecutive episodes whose boundary states coincide exactly.

    Chirp and reset segments flown back to back share their boundary state,
    so merging recovers the continuous flight they were cut from. Segments
    separated by a hard reset or a truncation stay apart.
    """
    out: list[Episode] = []
    for ep in episodes:
        prev = out[-1] if out else None
        if (
            prev is not None
            and not prev.truncated
            and prev.dt == ep.dt
            and np.array_equal(prev.states[-1], ep.states[0])
        ):
            hidden = None
            if prev.hidden is not None and ep.hidden is not None:
                hidden = np.concatenate([prev.hidden, ep.hidden[1:]])
            out[-1] = Episode(
                np.concatenate([prev.states, ep.states[1:]]),
                np.concatenate([prev.actions, ep.actions]),
                prev.tag,
                prev.dt,
                ep.truncated,
                hidden,
            )
        else:
            out.append(ep)
    return out


class ReplayBuffer:
    def __init__(self, capacity: int = 100_000, episodes: Iterable[Episode] = ()):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._episodes: deque[Episode] = deque()
        self._size = 0
        for ep in episodes:
            self.append(ep)

    def __len__(self) -> int:
        return len(self._episodes)

    @property
    def size(self) -> int:
        """Stored steps (sum of episode action counts)."""
        return self._size

    @property
    def episodes(self) -> list[Episode]:
        return list(self._episodes)

    def append(self, ep: Episode) -> None:
        if len(ep.states) < 2:
            raise ValueError("episode needs at least 2 states")
        if len(ep.states) != len(ep.actions) + 1:
            raise ValueError("episode length invariant violated")
        self._episodes.append(ep)
        self._size += len(ep)
        while self._size > self.capacity and len(self._episodes) > 1:
            old = self._episodes.popleft()
            self._size -= len(old)
        if self._size > self.capacity:
            # a lone episode larger than capacity cannot be kept whole
            old = self._episodes.popleft()
            self._size -= len(old)

    def subset(self, indices: Iterable[int]) -> "ReplayBuffer":
        eps = self.episodes
        return ReplayBuffer(self.capacity, [eps[i] for i in indices])

    def tag_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for ep in self._episodes:
            counts[ep.tag.value] = counts.get(ep.tag.value, 0) + len(ep)
        return counts

    def sample_sequences(self, rng: np.random.Generator, batch: int, horizon: int, history: int = 8) -> Batch:
        """Windows drawn uniformly over all eligible (episode, start) pairs."""
        eps = self.episodes
        counts = np.array([max(0, len(ep) - horizon + 1) for ep in eps], dtype=float)
        total = counts.sum()
        if total == 0:
            longest = max((len(ep) for ep in eps), default=0)
            raise NoEligibleEpisode(f"need an episode with >= {horizon} steps, longest available is {longest}")
        idx = rng.choice(len(eps), size=batch, p=counts / total)
        starts = [int(rng.integers(0, counts[i])) for i in idx]
        items = [window(eps[i], s, horizon, history) for i, s in zip(idx, starts)]
        return make_batch(items, np.stack([idx, starts], axis=1))

    # persistence -------------------------------------------------------
    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_episodes(d / EPISODES_FILE, self._episodes)
        manifest = {
            "format": "quadwm-replay",
            "version": 1,
            "capacity": self.capacity,
            "episodes": len(self._episodes),
            "steps": self._size,
            "tags": self.tag_counts(),
            "file": EPISODES_FILE,
        }
        (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory: str | Path) -> "ReplayBuffer":
        d = Path(directory)
        mpath = d / MANIFEST
        if not mpath.exists():
            raise FileNotFoundError(f"no replay manifest in {d}")
        manifest = json.loads(mpath.read_text())
        buf = cls(manifest["capacity"], read_episodes(d / manifest["file"]))
        if buf.size != manifest["steps"]:
            raise ValueError(f"manifest says {manifest['steps']} steps, found {buf.size}")
        return buf
