"""Semantic co-occurrence grounding of token embeddings against observations.

A table of prior semantic-only token embeddings is pulled (cosine) toward the
pooled visual embeddings of observations whose episode goal contains the
token, and pushed away for every other token, with noisy +/-1 labels and an
entropy mask that silences tokens whose presence is constant over the
minibatch (e.g. the "pick up" prefix).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


class GroundingDomainError(ValueError):
    pass


class GroundingUsageError(RuntimeError):
    pass


NOISE_MAX = 0.2


class SemanticEmbeddingTable(nn.Module):
    """One prior embedding per vocabulary token, trained only by this loss."""

    def __init__(self, vocab_size: int = 64, dim: int = 64, init_scale: float = 0.02):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(vocab_size, dim) * init_scale)

    @property
    def vocab_size(self) -> int:
        return self.weight.shape[0]


def noisy_indicator(w: int, w_prime: int, noise: float) -> float:
    """(1 - noise) * (+1 if tokens match else -1); noise must lie in [0, 0.2]."""
    if not 0.0 <= noise <= NOISE_MAX:
        raise GroundingDomainError(f"noise {noise} outside [0, {NOISE_MAX}]")
    return (1.0 - noise) * (1.0 if w == w_prime else -1.0)


def entropy_mask(goals: list[tuple[int, ...]], vocab_size: int) -> torch.Tensor:
    """Entropy of each token's presence/absence distribution over the minibatch.

    Zero exactly when a token appears in every goal or in none.
    """
    if len(goals) == 0:
        raise GroundingUsageError("entropy_mask needs a non-empty minibatch")
    present = torch.zeros(len(goals), vocab_size)
    for row, goal in enumerate(goals):
        for tok in goal:
            present[row, int(tok)] = 1.0
    p = present.mean(dim=0)
    h = torch.zeros(vocab_size)
    interior = (p > 0) & (p < 1)
    pi = p[interior]
    h[interior] = -(pi * torch.log(pi) + (1 - pi) * torch.log(1 - pi))
    return h


@dataclass
class GroundingBatch:
    """Observations sampled from experience, each paired with its episode goal."""

    observations: torch.Tensor  # (B, ...) raw stimuli fed to the visual function
    goals: list[tuple[int, ...]]

    def __post_init__(self):
        if self.observations.shape[0] != len(self.goals):
            raise GroundingUsageError("one goal per observation required")


def grounding_loss(
    batch: GroundingBatch,
    table: SemanticEmbeddingTable,
    visual_fn,
    noise_max: float = NOISE_MAX,
    generator: torch.Generator | None = None,
    eps_norm: float = 1e-8,
) -> torch.Tensor:
    """Batch mean of sum_w H(w) sum_{g_i} (1_w(g_i) - cos(lambda_w, f(s)))^2.

    ``visual_fn`` maps the raw observations to pooled embeddings of the table
    dimension; gradient flows into both the table and the visual function.
    Noise is resampled per (sample, goal position, token) term; pass a seeded
    generator for determinism, or set ``noise_max=0`` to disable it.
    """
    if not 0.0 <= noise_max <= NOISE_MAX:
        raise GroundingDomainError(f"noise_max {noise_max} outside [0, {NOISE_MAX}]")
    if len(batch.goals) == 0:
        raise GroundingUsageError("grounding_loss needs a non-empty batch")

    vocab_size = table.vocab_size
    visual = visual_fn(batch.observations)
    lam = table.weight
    v_unit = visual / visual.norm(dim=-1, keepdim=True).clamp_min(eps_norm)
    l_unit = lam / lam.norm(dim=-1, keepdim=True).clamp_min(eps_norm)
    cos = v_unit @ l_unit.t()  # (B, V)

    max_len = max(len(g) for g in batch.goals)
    if max_len == 0:
        raise GroundingUsageError("grounding_loss needs non-empty goals")
    tokens = torch.full((len(batch.goals), max_len), -1, dtype=torch.long)
    for row, goal in enumerate(batch.goals):
        tokens[row, : len(goal)] = torch.tensor([int(t) for t in goal])
    valid = (tokens >= 0).to(cos.dtype)

    onehot = torch.zeros(*tokens.shape, vocab_size, dtype=cos.dtype)
    safe = tokens.clamp(min=0)
    onehot.scatter_(-1, safe.unsqueeze(-1), 1.0)
    sign = 2.0 * onehot - 1.0  # +1 where g_i == w else -1

    if noise_max > 0:
        noise = noise_max * torch.rand(sign.shape, generator=generator, dtype=cos.dtype)
    else:
        noise = torch.zeros_like(sign)
    indicator = (1.0 - noise) * sign

    h = entropy_mask(batch.goals, vocab_size).to(cos.dtype)
    sq = (indicator - cos.unsqueeze(1)) ** 2  # (B, Lg, V)
    per_sample = (sq * valid.unsqueeze(-1) * h.view(1, 1, -1)).sum(dim=(1, 2))
    return per_sample.mean()
