"""Goal relabelling: mapping/predicate plumbing, final and future-k strategies,
the derived predicate, contrastive negatives and the harvested datasets.

A mapping function turns a state into a goal it satisfies; a predicate
function decides whether a (state, goal) pair is satisfied. Failed episodes
are duplicated with goals the mapping claims were reached and rewards
recomputed through the predicate; originals are never touched.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .gridworld import EpisodeOutcome, Trajectory
from .vocab import EOS, truncate_at_eos

MappingFunction = Callable[[object], tuple[int, ...]]
PredicateFunction = Callable[[object, tuple[int, ...]], int]


class HindsightUsageError(RuntimeError):
    pass


def derive_predicate(mapping: MappingFunction) -> PredicateFunction:
    """Predicate f(s, g) = 1 iff the mapping's goal for s equals g token-exactly
    (both sides truncated at EoS)."""

    def predicate(state, goal_tokens) -> int:
        return int(truncate_at_eos(mapping(state)) == truncate_at_eos(goal_tokens))

    return predicate


def _duplicate_prefix(
    trajectory: Trajectory,
    cut: int,
    new_goal: tuple[int, ...],
    predicate: PredicateFunction,
) -> Trajectory:
    """Relabelled copy of transitions 0..cut-1 ending at state s_cut."""
    rewards = np.array(
        [predicate(trajectory.observations[t + 1], new_goal) for t in range(cut)],
        dtype=np.float32,
    )
    dones = np.zeros(cut, dtype=bool)
    dones[-1] = True
    return Trajectory(
        observations=list(trajectory.observations[: cut + 1]),
        actions=trajectory.actions[:cut].copy(),
        rewards=rewards,
        dones=dones,
        goal_tokens=tuple(new_goal),
        outcome=EpisodeOutcome("relabelled", cut),
        episode_seed=trajectory.episode_seed,
        recurrent_states=list(trajectory.recurrent_states[:cut]),
    )


def relabel(
    trajectory: Trajectory,
    mapping: MappingFunction,
    predicate: PredicateFunction,
    strategy: str = "final",
    k_her: int = 0,
    rng=None,
) -> list[Trajectory]:
    """Relabelled duplicates of an unsuccessful trajectory.

    ``final`` produces one full-length duplicate with the goal mapped from the
    final state. ``future_k`` produces ``k_her`` duplicates, each cut at a
    timestep drawn uniformly from [1, T] (duplicates of the same cut allowed),
    relabelled with the goal mapped from its own final state. Successful
    trajectories are a no-op. Originals are never modified.
    """
    if trajectory.successful:
        return []
    if strategy not in ("final", "future_k"):
        raise HindsightUsageError(f"unknown relabelling strategy {strategy!r}")
    t_final = trajectory.length
    if strategy == "final":
        new_goal = truncate_at_eos(mapping(trajectory.observations[t_final]))
        return [_duplicate_prefix(trajectory, t_final, new_goal, predicate)]
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    duplicates = []
    for _ in range(k_her):
        cut = int(rng.integers(1, t_final + 1))
        new_goal = truncate_at_eos(mapping(trajectory.observations[cut]))
        duplicates.append(_duplicate_prefix(trajectory, cut, new_goal, predicate))
    return duplicates


def contrastive_negatives(trajectory: Trajectory, n: int) -> list[tuple[object, tuple[int, ...]]]:
    """(state, EoS-goal) pairs from the approach to a success, newest first.

    Pairs are (s_{T-i}, (EoS,)) for i in [1, min(n, T)]; the goal-fulfilling
    final state itself is never used.
    """
    if n < 1:
        raise HindsightUsageError("contrastive_negatives needs n >= 1")
    if not trajectory.successful:
        raise HindsightUsageError("contrastive negatives come from successes only")
    t_final = trajectory.length
    eos_goal = (EOS,)
    return [
        (trajectory.observations[t_final - i], eos_goal)
        for i in range(1, min(n, t_final) + 1)
    ]


def harvest_supervised_pair(trajectory: Trajectory):
    """(final state, episode goal) from a success; None otherwise."""
    if not trajectory.successful:
        return None
    return trajectory.final_state(), tuple(trajectory.goal_tokens)


# ------------------------------------------------------------------ datasets


def _stable_hash_unit(key) -> float:
    digest = hashlib.blake2s(repr(key).encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2**64


@dataclass
class SplitDataset:
    """Train/validation pools with a stable hash-of-key split assignment."""

    split_ratio: float = 0.9
    max_items: int | None = None
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)

    def add(self, item, split_key) -> str:
        pool, name = (
            (self.train, "train")
            if _stable_hash_unit(split_key) < self.split_ratio
            else (self.val, "val")
        )
        pool.append(item)
        if self.max_items is not None and len(pool) > self.max_items:
            pool.pop(0)
        return name

    def __len__(self) -> int:
        return len(self.train) + len(self.val)


class SupervisedDataset(SplitDataset):
    """(state, goal) pairs with predicate value 1, from success-final states."""

    def add_pair(self, state, goal_tokens, episode_seed) -> str:
        return self.add((state, tuple(goal_tokens)), episode_seed)


class RGDataset(SplitDataset):
    """Stimuli (with their episode goals) harvested from every step of every
    trajectory, successful or not."""

    def add_stimulus(self, stimulus, goal_tokens, episode_seed, step) -> str:
        # The split follows the episode so a trajectory never straddles it.
        return self.add((stimulus, tuple(goal_tokens)), episode_seed)

    def train_records(self) -> list:
        return [item[0] for item in self.train]

    def val_records(self) -> list:
        return [item[0] for item in self.val]


# --------------------------------------------------------------------- gates


def gate_relabelling(
    mode: str,
    sup_val_size: int = 0,
    speaker_val_accuracy: float = 0.0,
    rg_val_size: int = 0,
    rg_val_accuracy: float = 0.0,
    theta_sup: float = 0.75,
    n_min: int = 32,
    theta_rg: float = 0.75,
) -> bool:
    """Whether relabelling may run.

    ``higher`` modes: speaker validation exact-match accuracy >= theta_sup and
    a big-enough validation pool. ``ether`` modes: game validation accuracy on
    a non-empty validation pool >= theta_rg. Thresholds are inclusive.
    """
    if mode == "higher":
        return sup_val_size > 0 and sup_val_size >= n_min and speaker_val_accuracy >= theta_sup
    if mode == "ether":
        return rg_val_size > 0 and rg_val_accuracy >= theta_rg
    raise HindsightUsageError(f"unknown gate mode {mode!r}")
