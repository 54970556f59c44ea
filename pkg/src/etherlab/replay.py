"""Prioritized sequence replay with stored recurrent states and burn-in rooms.

Episodes are cut into fixed-length windows of 20 transitions overlapping by
10; windows never span episode boundaries, short tails are zero-padded behind
a validity mask. Each window snapshots the actor's recurrent state at its
first step. Sampling is proportional to priority^0.9 with max-normalized
importance weights at exponent 0.6; capacity is counted in observations and
enforced by oldest-first eviction.
"""

from __future__ import annotations

import threading
import warnings
from dataclasses import dataclass

import numpy as np

UNROLL_LENGTH = 20
OVERLAP = 10
BURN_IN = 10

PRIORITY_EXPONENT = 0.9
IS_EXPONENT = 0.6
PRIORITY_MIX_ETA = 0.9
PRIORITY_FLOOR = 1e-6


class ReplayUsageError(RuntimeError):
    pass


def segment_starts(episode_length: int, stride: int = OVERLAP) -> list[int]:
    """Window offsets covering an episode: 0, stride, 2*stride, ..."""
    if episode_length <= 0:
        raise ReplayUsageError("cannot segment an empty trajectory")
    return list(range(0, episode_length, stride))


@dataclass
class _StoredEpisode:
    observations: np.ndarray  # (T+1, ...) the state chain
    actions: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    dones: np.ndarray  # (T,)
    goal_tokens: tuple[int, ...]
    recurrent_states: list  # per-step actor state (may be empty)
    quantized: bool


class SequenceSegment:
    """A 20-slot window into one stored episode."""

    def __init__(self, segment_id: int, episode: _StoredEpisode, start: int,
                 unroll: int = UNROLL_LENGTH):
        self.segment_id = segment_id
        self.episode = episode
        self.start = start
        self.unroll = unroll
        self.n_valid = min(unroll, len(episode.actions) - start)
        self.initial_recurrent_state = (
            episode.recurrent_states[start]
            if start < len(episode.recurrent_states)
            else None
        )

    @property
    def valid_mask(self) -> np.ndarray:
        mask = np.zeros(self.unroll, dtype=bool)
        mask[: self.n_valid] = True
        return mask

    @property
    def goal_tokens(self) -> tuple[int, ...]:
        return self.episode.goal_tokens

    def arrays(self) -> dict:
        """Materialize padded arrays, including the 21-long observation chain
        and the previous-action/previous-reward input features."""
        ep = self.episode
        t_end = self.start + self.n_valid
        obs_chain = ep.observations[self.start : t_end + 1]
        if ep.quantized:
            obs_chain = obs_chain.astype(np.float32) / 255.0
        pad = self.unroll + 1 - obs_chain.shape[0]
        if pad > 0:
            obs_chain = np.concatenate(
                [obs_chain, np.repeat(obs_chain[-1:], pad, axis=0)], axis=0
            )

        def padded(src: np.ndarray, fill) -> np.ndarray:
            out = np.full(self.unroll, fill, dtype=src.dtype)
            out[: self.n_valid] = src[self.start : t_end]
            return out

        actions = padded(ep.actions, 0)
        rewards = padded(ep.rewards, 0.0)
        dones = padded(ep.dones, False)

        prev_actions = np.full(self.unroll + 1, -1, dtype=np.int64)
        prev_rewards = np.zeros(self.unroll + 1, dtype=np.float32)
        for j in range(self.unroll + 1):
            idx = self.start + j - 1
            if 0 <= idx < t_end:
                prev_actions[j] = ep.actions[idx]
                prev_rewards[j] = ep.rewards[idx]
        return {
            "observations": obs_chain,
            "actions": actions,
            "rewards": rewards,
            "dones": dones,
            "valid": self.valid_mask,
            "prev_actions": prev_actions,
            "prev_rewards": prev_rewards,
            "goal_tokens": self.goal_tokens,
            "initial_recurrent_state": self.initial_recurrent_state,
        }


class PrioritizedBuffer:
    """Proportional prioritized replay over sequence segments.

    Safe for concurrent appends and sampling (single lock); also usable
    synchronously for deterministic tests.
    """

    def __init__(
        self,
        capacity_observations: int = 10_000,
        unroll: int = UNROLL_LENGTH,
        stride: int = OVERLAP,
        priority_exponent: float = PRIORITY_EXPONENT,
        is_exponent: float = IS_EXPONENT,
        eta: float = PRIORITY_MIX_ETA,
        priority_floor: float = PRIORITY_FLOOR,
        quantize: bool = True,
    ):
        self.capacity = capacity_observations
        self.unroll = unroll
        self.stride = stride
        self.priority_exponent = priority_exponent
        self.is_exponent = is_exponent
        self.eta = eta
        self.priority_floor = priority_floor
        self.quantize = quantize

        self._segments: dict[int, SequenceSegment] = {}
        self._priorities: dict[int, float] = {}
        self._order: list[int] = []  # insertion order, oldest first
        self._next_id = 0
        self._max_priority = 1.0
        self._observation_count = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._segments)

    @property
    def observation_count(self) -> int:
        return self._observation_count

    # ------------------------------------------------------------- storing

    def store_episode(self, trajectory) -> list[int]:
        """Cut a finished episode into segments and insert them at max priority."""
        length = trajectory.length
        if length == 0:
            raise ReplayUsageError("cannot store an empty trajectory")
        obs = np.stack(trajectory.observations)
        quantized = False
        if self.quantize and obs.dtype.kind == "f":
            obs = np.round(obs * 255.0).astype(np.uint8)
            quantized = True
        episode = _StoredEpisode(
            observations=obs,
            actions=np.asarray(trajectory.actions, dtype=np.int64),
            rewards=np.asarray(trajectory.rewards, dtype=np.float32),
            dones=np.asarray(trajectory.dones, dtype=bool),
            goal_tokens=tuple(trajectory.goal_tokens),
            recurrent_states=list(trajectory.recurrent_states),
            quantized=quantized,
        )
        ids = []
        with self._lock:
            for start in segment_starts(length, self.stride):
                seg = SequenceSegment(self._next_id, episode, start, self.unroll)
                self._segments[seg.segment_id] = seg
                self._priorities[seg.segment_id] = self._max_priority
                self._order.append(seg.segment_id)
                self._observation_count += min(self.stride, length - start)
                ids.append(seg.segment_id)
                self._next_id += 1
            self._evict_locked()
        return ids

    def _evict_locked(self) -> None:
        while self._observation_count > self.capacity and self._order:
            victim = self._order.pop(0)
            seg = self._segments.pop(victim)
            self._priorities.pop(victim)
            length = len(seg.episode.actions)
            self._observation_count -= min(self.stride, length - seg.start)

    # ------------------------------------------------------------- sampling

    def sample_batch(self, batch_size: int = 64, rng=None):
        """Draw segments with probability proportional to priority^exponent.

        Returns (segments, importance_weights, segment_ids); weights are
        (1 / (N * P(i)))^is_exponent, normalized by the batch maximum.
        """
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        with self._lock:
            if not self._segments:
                raise ReplayUsageError("sample_batch on an empty buffer")
            ids = np.array(self._order)
            prios = np.array([self._priorities[i] for i in ids], dtype=np.float64)
            scaled = prios**self.priority_exponent
            probs = scaled / scaled.sum()
            chosen = rng.choice(len(ids), size=batch_size, replace=True, p=probs)
            chosen_ids = ids[chosen].tolist()
            segments = [self._segments[i] for i in chosen_ids]
            n = len(ids)
            weights = (1.0 / (n * probs[chosen])) ** self.is_exponent
            weights = weights / weights.max()
        return segments, weights.astype(np.float32), chosen_ids

    def update_priorities(self, segment_ids, td_errors) -> None:
        """priority = eta * max|td| + (1 - eta) * mean|td| over valid steps."""
        with self._lock:
            for seg_id, errors in zip(segment_ids, td_errors):
                if seg_id not in self._priorities:
                    warnings.warn(
                        f"priority update for unknown segment {seg_id} (evicted?)",
                        stacklevel=2,
                    )
                    continue
                abs_err = np.abs(np.asarray(errors, dtype=np.float64))
                if abs_err.size == 0:
                    continue
                prio = self.eta * abs_err.max() + (1 - self.eta) * abs_err.mean()
                prio = max(float(prio), self.priority_floor)
                self._priorities[seg_id] = prio
                self._max_priority = max(self._max_priority, prio)

    def priorities(self) -> dict[int, float]:
        with self._lock:
            return dict(self._priorities)
