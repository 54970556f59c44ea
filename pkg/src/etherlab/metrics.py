"""Evaluation suite: success ratios, speaker/instruction alignment accuracies,
semantic co-occurrence histograms and topographic similarity."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import vocab
from .gridworld import COLORS, SHAPES, PickupRoom, run_episode


def success_ratio(policy, env_factory=PickupRoom, n_envs: int = 256, seed: int = 0,
                  env_kwargs: dict | None = None) -> float:
    """Percentage of seeded evaluation episodes ending in success.

    ``policy(env, obs, goal, carry) -> (action, carry)`` must act greedily for
    the deterministic evaluation contract to hold.
    """
    rng = np.random.default_rng(seed)
    episode_seeds = [int(rng.integers(2**31)) for _ in range(n_envs)]
    successes = 0
    for ep_seed in episode_seeds:
        env = env_factory(**(env_kwargs or {}))
        traj = run_episode(env, ep_seed, policy)
        successes += traj.successful
    return 100.0 * successes / n_envs


# ------------------------------------------------------------- alignment


ALIGNMENT_MODES = ("any_colour", "any_shape", "all_colour", "all_shape",
                   "any_object", "all_object")


def _message_hits(message_tokens, visible: list[tuple[str, str]], mode: str) -> bool:
    token_set = set(int(t) for t in message_tokens)
    colour_ok = [vocab.WORD_TO_ID[c] in token_set for c, _ in visible]
    shape_ok = [vocab.WORD_TO_ID[s] in token_set for _, s in visible]
    both_ok = [c and s for c, s in zip(colour_ok, shape_ok)]
    if mode == "any_colour":
        return any(colour_ok)
    if mode == "all_colour":
        return all(colour_ok)
    if mode == "any_shape":
        return any(shape_ok)
    if mode == "all_shape":
        return all(shape_ok)
    if mode == "any_object":
        return any(both_ok)
    if mode == "all_object":
        return all(both_ok)
    raise ValueError(f"unknown alignment mode {mode!r}")


@dataclass
class AlignmentReport:
    accuracies: dict[str, float]  # per mode, in [0, 100]
    n_scored: int
    n_skipped: int

    def __getitem__(self, mode: str) -> float:
        return self.accuracies[mode]


def alignment_report(speak, observations, symbolic_views) -> AlignmentReport:
    """All six alignment accuracies of a speaker over paired observations.

    ``speak(observations) -> list of token id sequences`` decodes greedily.
    Observations whose symbolic view is missing are skipped (and counted).
    Samples with no visible object are skipped too: every mode is vacuous
    there, and counting them would only inflate the all_* scores.
    """
    keep = [i for i, s in enumerate(symbolic_views) if s is not None]
    n_skipped = len(symbolic_views) - len(keep)
    messages = speak([observations[i] for i in keep])
    hits = {mode: 0 for mode in ALIGNMENT_MODES}
    scored = 0
    for msg, idx in zip(messages, keep):
        visible = symbolic_views[idx].visible_objects()
        if not visible:
            n_skipped += 1
            continue
        scored += 1
        for mode in ALIGNMENT_MODES:
            hits[mode] += _message_hits(vocab.truncate_at_eos(msg), visible, mode)
    accuracies = {
        mode: (100.0 * hits[mode] / scored if scored else 0.0)
        for mode in ALIGNMENT_MODES
    }
    return AlignmentReport(accuracies, scored, n_skipped)


def alignment_accuracy(speak, observations, symbolic_views, mode: str) -> float:
    return alignment_report(speak, observations, symbolic_views)[mode]


# --------------------------------------------------------- co-occurrence


def co_occurrence_histogram(policy, goal: tuple[str | None, str],
                            n_episodes: int = 500, seed: int = 0,
                            env_kwargs: dict | None = None):
    """Counts of every colour/shape semantic over all fields of view.

    Episodes run with the goal pinned; each visible object contributes its
    colour and shape once per step it is seen.
    """
    kwargs = dict(env_kwargs or {})
    kwargs.setdefault("render_pixels", False)
    kwargs["forced_goal"] = goal
    colour_counts = {c: 0 for c in COLORS}
    shape_counts = {s: 0 for s in SHAPES}
    rng = np.random.default_rng(seed)
    for _ in range(n_episodes):
        env = PickupRoom(**kwargs)
        env.reset(int(rng.integers(2**31)))
        carry = None
        while not env.done:
            for colour, shape in env.symbolic_view().visible_objects():
                colour_counts[colour] += 1
                shape_counts[shape] += 1
            action, carry = policy(env, None, env.goal, carry)
            env.step(action)
        for colour, shape in env.symbolic_view().visible_objects():
            colour_counts[colour] += 1
            shape_counts[shape] += 1
    return colour_counts, shape_counts


def semantic_rank(counts: dict[str, int], key: str) -> int:
    """1-based rank of ``key`` by count (ties share the better rank)."""
    return 1 + sum(1 for k, v in counts.items() if v > counts[key])


# ------------------------------------------------- topographic similarity


def edit_distance(a, b) -> int:
    """Levenshtein distance between two token sequences."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def hamming_distance(a, b) -> int:
    if len(a) != len(b):
        raise ValueError("meaning tuples must share a length")
    return sum(x != y for x, y in zip(a, b))


def topographic_similarity(meanings, messages,
                           meaning_distance=hamming_distance,
                           message_distance=edit_distance) -> float:
    """Spearman correlation between pairwise meaning and message distances.

    Returns NaN when a correlation is undefined (all meanings identical, all
    messages identical, or fewer than 3 pairs).
    """
    if len(meanings) != len(messages):
        raise ValueError("meanings and messages must pair up")
    n = len(meanings)
    md, sd = [], []
    for i in range(n):
        for j in range(i + 1, n):
            md.append(meaning_distance(meanings[i], meanings[j]))
            sd.append(message_distance(messages[i], messages[j]))
    if len(md) < 3 or len(set(md)) < 2 or len(set(sd)) < 2:
        return float("nan")
    rho, _ = stats.spearmanr(md, sd)
    return float(rho) if math.isfinite(rho) else float("nan")
