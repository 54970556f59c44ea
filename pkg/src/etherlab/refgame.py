"""Descriptive, discriminative, object-centric visual referential game.

A speaker describes a (differently augmented) target stimulus through a
straight-through Gumbel-Softmax channel with a learned per-step temperature;
a listener scores the message against K distractors plus the target (plus an
optional learnable no-target outcome). Training combines an EoS-pressure
("lazy") loss on the speaker's step distributions with a per-prefix
("impatient") hinge loss on the listener's decisions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .nets import MessageBatch, MessageEncoder, SpeakerDecoder
from .vocab import EOS


class ChannelDomainError(ValueError):
    pass


class GameDivergedError(RuntimeError):
    """Raised when a game step produces a non-finite loss."""


# ----------------------------------------------------------------- channel


def stgs_sample(
    logits: torch.Tensor,
    temperature,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Straight-through Gumbel-Softmax sample over the last dimension.

    Returns (one_hot, relaxed): the forward value is the exact one-hot at the
    argmax of the relaxed sample, the backward gradient is that of the relaxed
    sample softmax((log p + g) / tau) with g = -log(-log u).
    """
    temperature = torch.as_tensor(temperature, dtype=logits.dtype, device=logits.device)
    if bool((temperature <= 0).any()):
        raise ChannelDomainError("temperature must be positive")
    tiny = torch.finfo(logits.dtype).tiny
    u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype,
                   device=logits.device).clamp_min(tiny)
    gumbel = -torch.log(-torch.log(u))
    log_p = F.log_softmax(logits, dim=-1)
    relaxed = F.softmax((log_p + gumbel) / temperature, dim=-1)
    hard = F.one_hot(relaxed.argmax(dim=-1), logits.shape[-1]).to(logits.dtype)
    return (hard - relaxed).detach() + relaxed, relaxed


def learned_temperature(alpha_out: torch.Tensor, tau0: float) -> torch.Tensor:
    """tau = 1 / (tau0 + softplus(alpha)); lies in (0, 1/tau0]."""
    if tau0 <= 0:
        raise ChannelDomainError("tau0 must be positive")
    return 1.0 / (tau0 + F.softplus(alpha_out))


class StgsChannel:
    """Bundles the sampler and the temperature map handed to the speaker."""

    def __init__(self, tau0: float = 0.2):
        self.tau0 = tau0

    def temperature(self, alpha_out: torch.Tensor) -> torch.Tensor:
        return learned_temperature(alpha_out, self.tau0)

    def stgs_sample(self, logits, temperature, generator=None):
        return stgs_sample(logits, temperature, generator)


# ------------------------------------------------------------- augmentation


@dataclass
class AugmentConfig:
    """Gaussian blur + colour jitter + affine; all-zero strengths = identity."""

    blur_sigma_max: float = 1.2
    jitter_strength: float = 0.3
    translate_frac: float = 0.1
    rotate_degrees: float = 10.0

    @property
    def is_identity(self) -> bool:
        return (
            self.blur_sigma_max == 0
            and self.jitter_strength == 0
            and self.translate_frac == 0
            and self.rotate_degrees == 0
        )


def _gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = max(1, int(math.ceil(2 * sigma)))
    coords = torch.arange(-radius, radius + 1, dtype=x.dtype)
    kernel1d = torch.exp(-(coords**2) / (2 * sigma * sigma))
    kernel1d = kernel1d / kernel1d.sum()
    c = x.shape[0]
    kh = kernel1d.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    kw = kernel1d.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    x = x.unsqueeze(0)
    x = F.pad(x, (0, 0, radius, radius), mode="replicate")
    x = F.conv2d(x, kh, groups=c)
    x = F.pad(x, (radius, radius, 0, 0), mode="replicate")
    x = F.conv2d(x, kw, groups=c)
    return x.squeeze(0)


def augment(stimulus: torch.Tensor, seed: int, config: AugmentConfig) -> torch.Tensor:
    """Seed-deterministic augmentation of a (C, H, W) pixel stimulus in [0, 1]."""
    out = stimulus.clone()
    if config.is_identity:
        return out
    gen = torch.Generator().manual_seed(seed)

    def uniform(lo: float, hi: float) -> float:
        return lo + (hi - lo) * torch.rand((), generator=gen).item()

    if config.blur_sigma_max > 0:
        sigma = uniform(0.0, config.blur_sigma_max)
        if sigma > 1e-3:
            out = _gaussian_blur(out, sigma)
    if config.jitter_strength > 0:
        s = config.jitter_strength
        brightness = uniform(1 - s, 1 + s)
        contrast = uniform(1 - s, 1 + s)
        mean = out.mean()
        out = (out - mean) * contrast + mean
        out = out * brightness
    if config.translate_frac > 0 or config.rotate_degrees > 0:
        angle = math.radians(uniform(-config.rotate_degrees, config.rotate_degrees))
        tx = uniform(-config.translate_frac, config.translate_frac)
        ty = uniform(-config.translate_frac, config.translate_frac)
        cos_a, sin_a = math.cos(angle), math.sin(angle)
        theta = torch.tensor(
            [[cos_a, -sin_a, tx], [sin_a, cos_a, ty]], dtype=out.dtype
        ).unsqueeze(0)
        grid = F.affine_grid(theta, (1, *out.shape), align_corners=False)
        out = F.grid_sample(
            out.unsqueeze(0), grid, align_corners=False, padding_mode="zeros"
        ).squeeze(0)
    return out.clamp(0.0, 1.0)


# ------------------------------------------------------------------- agents


class Speaker(nn.Module):
    """Stimulus encoder + recurrent decoder over the shared vocabulary."""

    def __init__(self, stimulus_encoder: nn.Module, vocab_size: int,
                 hidden_size: int, max_len: int = 10):
        super().__init__()
        self.stimulus_encoder = stimulus_encoder
        self.decoder = SpeakerDecoder(vocab_size, hidden_size, max_len)

    def forward(self, stimuli: torch.Tensor, channel: StgsChannel | None = None,
                generator: torch.Generator | None = None,
                greedy: bool = False) -> MessageBatch:
        return self.decoder(self.stimulus_encoder(stimuli), channel, generator, greedy)

    def describe(self, stimuli: torch.Tensor) -> list[tuple[int, ...]]:
        """Deterministic greedy decode, returning raw token id sequences."""
        with torch.no_grad():
            return self.forward(stimuli, greedy=True).token_ids()


class Listener(nn.Module):
    """Scores each candidate stimulus against every prefix of the message."""

    def __init__(self, stimulus_encoder: nn.Module, vocab_size: int,
                 hidden_size: int, descriptive: bool = False):
        super().__init__()
        self.stimulus_encoder = stimulus_encoder
        self.message_encoder = MessageEncoder(vocab_size, hidden_size)
        self.descriptive = descriptive
        if descriptive:
            self.no_target_logit = nn.Parameter(torch.zeros(1))

    def encode_candidates(self, stimuli: torch.Tensor) -> torch.Tensor:
        """(B, K+1, ...) candidate stimuli -> (B, K+1, H) features."""
        b, k1 = stimuli.shape[:2]
        flat = stimuli.reshape(b * k1, *stimuli.shape[2:])
        return self.stimulus_encoder(flat).view(b, k1, -1)

    def prefix_logits(self, message: torch.Tensor,
                      candidate_features: torch.Tensor) -> torch.Tensor:
        """(B, L, V) message, (B, K+1, H) features -> (B, L, K+1[+1]) logits."""
        hiddens = self.message_encoder(message)
        logits = torch.einsum("blh,bkh->blk", hiddens, candidate_features)
        if self.descriptive:
            extra = self.no_target_logit.view(1, 1, 1).expand(
                logits.shape[0], logits.shape[1], 1
            )
            logits = torch.cat([logits, extra], dim=-1)
        return logits


def listener_decision(listener: Listener, message: MessageBatch,
                      candidate_features: torch.Tensor) -> torch.Tensor:
    """Probability vector over candidates from the full message.

    An empty message is treated as the EoS-only message.
    """
    onehot, lengths = message.onehot, message.lengths
    if onehot.shape[1] == 0 or bool((lengths == 0).any()):
        b = candidate_features.shape[0]
        eos = torch.zeros(b, 1, listener.message_encoder.embed.in_features,
                          dtype=candidate_features.dtype)
        eos[:, 0, EOS] = 1.0
        if onehot.shape[1] == 0:
            onehot, lengths = eos, torch.ones(b, dtype=torch.long)
        else:
            onehot = torch.where(lengths.view(-1, 1, 1) > 0, onehot, eos)
            lengths = lengths.clamp(min=1)
    logits = listener.prefix_logits(onehot, candidate_features)
    idx = (lengths - 1).view(-1, 1, 1).expand(-1, 1, logits.shape[-1])
    final = logits.gather(1, idx).squeeze(1)
    return F.softmax(final, dim=-1)


# ------------------------------------------------------------------- losses


def eos_pointmass_kl(step_distribution: torch.Tensor,
                     prob_floor: float = 1e-12) -> torch.Tensor:
    """KL(W_EoS || W) for a point mass on EoS: the closed form -log W[EoS]."""
    return -torch.log(step_distribution[..., EOS].clamp_min(prob_floor))


def generic_kl(p: torch.Tensor, q: torch.Tensor,
               prob_floor: float = 1e-12) -> torch.Tensor:
    """KL(p || q) over the last dimension, with 0 log 0 = 0."""
    q = q.clamp_min(prob_floor)
    ratio = torch.where(p > 0, p * (torch.log(p.clamp_min(prob_floor)) - torch.log(q)),
                        torch.zeros_like(p))
    return ratio.sum(dim=-1)


def linear_beta(beta0: float):
    """The default monotonically increasing position coefficient beta(l) = beta0 * l."""

    def beta(position: int) -> float:
        return beta0 * position

    return beta


def lazy_loss(step_distributions: torch.Tensor, lengths: torch.Tensor,
              beta=None, prob_floor: float = 1e-12) -> torch.Tensor:
    """EoS-pressure loss: sum_l beta(l) * KL(W_EoS || W_l), batch mean.

    ``step_distributions`` is (B, L, V); positions l = 1..length contribute.
    """
    if beta is None:
        beta = linear_beta(0.01)
    b, max_l, _ = step_distributions.shape
    coeffs = torch.tensor([beta(l + 1) for l in range(max_l)],
                          dtype=step_distributions.dtype)
    mask = (torch.arange(max_l).unsqueeze(0) < lengths.unsqueeze(1)).to(
        step_distributions.dtype
    )
    terms = eos_pointmass_kl(step_distributions, prob_floor) * coeffs.unsqueeze(0)
    return (terms * mask).sum(dim=1).mean()


def hinge_loss(logits: torch.Tensor, target_index: torch.Tensor,
               margin: float = 1.0) -> torch.Tensor:
    """sum_{j != target} max(0, margin - logit_target + logit_j), per row."""
    target = logits.gather(-1, target_index.unsqueeze(-1))
    violations = (margin - target + logits).clamp_min(0.0)
    # The j == target term is always exactly ``margin``; remove it.
    return violations.sum(dim=-1) - margin


def impatient_loss(prefix_logits: torch.Tensor, lengths: torch.Tensor,
                   target_index: torch.Tensor, margin: float = 1.0) -> torch.Tensor:
    """Mean over prefixes of the hinge loss against the target, batch mean."""
    b, max_l, _ = prefix_logits.shape
    per_prefix = hinge_loss(
        prefix_logits.reshape(b * max_l, -1),
        target_index.repeat_interleave(max_l),
        margin,
    ).view(b, max_l)
    mask = (torch.arange(max_l).unsqueeze(0) < lengths.unsqueeze(1)).to(
        per_prefix.dtype
    )
    return ((per_prefix * mask).sum(dim=1) / lengths.clamp(min=1)).mean()


def length_cost_diagnostic(accuracy: float, lengths: torch.Tensor) -> float:
    """The original non-differentiable length cost alpha(acc) * |m|.

    Reported as a metric only; the EoS-pressure loss replaces it for training.
    """
    return float(accuracy) * float(lengths.float().mean())


# ------------------------------------------------------------------ the game


@dataclass
class GameConfig:
    vocab_size: int = 64
    max_len: int = 10
    distractors: int = 3
    descriptive: bool = False
    descriptive_target_prob: float = 0.5
    tau0: float = 0.2
    beta0: float = 0.01
    hinge_margin: float = 1.0
    prob_floor: float = 1e-12
    batch_size: int = 32
    lr: float = 1e-3
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        from .vocab import MIN_VOCAB_SIZE

        if self.vocab_size < MIN_VOCAB_SIZE:
            raise ValueError(
                f"vocab_size {self.vocab_size} < instruction tokens + 2 ({MIN_VOCAB_SIZE})"
            )
        if self.distractors < 0:
            raise ValueError("distractors must be >= 0")
        if self.tau0 <= 0:
            raise ChannelDomainError("tau0 must be positive")


@dataclass
class StimulusBatch:
    speaker_views: torch.Tensor  # (B, ...) augmented target as the speaker sees it
    listener_views: torch.Tensor  # (B, K+1, ...) candidates in shuffled order
    target_index: torch.Tensor  # (B,) long; K+1 means "no target" (descriptive)


def sample_stimulus_batch(
    stimuli,
    batch_size: int,
    config: GameConfig,
    rng: np.random.Generator,
) -> StimulusBatch:
    """Draw targets and distractors (uniform, no replacement, target excluded).

    ``stimuli`` is a tensor or any indexable sequence of equally shaped
    tensors. Pixel stimuli (>= 3 dims each) get per-view augmentation draws,
    so the speaker and listener views of the target come from distinct seeds.
    """
    n = len(stimuli)
    k = min(config.distractors, max(n - 1, 0))
    is_pixel = stimuli[0].dim() >= 3

    speaker_views, listener_views, targets = [], [], []
    for _ in range(batch_size):
        target = int(rng.integers(n))
        others = [i for i in range(n) if i != target]
        distractors = list(rng.choice(others, size=k, replace=False)) if k else []
        candidates = [target] + [int(d) for d in distractors]
        order = rng.permutation(len(candidates))
        shuffled = [candidates[i] for i in order]
        target_pos = int(np.nonzero(order == 0)[0][0])

        if config.descriptive and rng.random() < 1 - config.descriptive_target_prob:
            # Target absent: swap it out for a fresh distractor.
            pool = [i for i in others if i not in shuffled]
            replacement = int(rng.choice(pool)) if pool else shuffled[target_pos - 1]
            shuffled[target_pos] = replacement
            target_pos = len(candidates)  # the learnable no-target outcome

        if is_pixel:
            sv = augment(stimuli[target], int(rng.integers(2**31)), config.augment)
            lv = torch.stack(
                [augment(stimuli[i], int(rng.integers(2**31)), config.augment)
                 for i in shuffled]
            )
        else:
            sv = stimuli[target]
            lv = torch.stack([stimuli[i] for i in shuffled])
        speaker_views.append(sv)
        listener_views.append(lv)
        targets.append(target_pos)

    return StimulusBatch(
        speaker_views=torch.stack(speaker_views),
        listener_views=torch.stack(listener_views),
        target_index=torch.tensor(targets, dtype=torch.long),
    )


@dataclass
class GameStepResult:
    loss: float
    lazy: float
    impatient: float
    accuracy: float
    mean_length: float
    speaker_grad_norm: float
    length_cost: float


def game_losses(speaker: Speaker, listener: Listener, batch: StimulusBatch,
                config: GameConfig, channel: StgsChannel,
                generator: torch.Generator | None = None):
    """Forward pass of one game round; returns (total, lazy, impatient, acc, msg)."""
    message = speaker(batch.speaker_views, channel=channel, generator=generator)
    features = listener.encode_candidates(batch.listener_views)
    prefix = listener.prefix_logits(message.onehot, features)

    lazy = lazy_loss(message.step_distributions, message.lengths,
                     linear_beta(config.beta0), config.prob_floor)
    impatient = impatient_loss(prefix, message.lengths, batch.target_index,
                               config.hinge_margin)
    total = lazy + impatient

    idx = (message.lengths - 1).clamp(min=0).view(-1, 1, 1).expand(-1, 1, prefix.shape[-1])
    final = prefix.gather(1, idx).squeeze(1)
    accuracy = (final.argmax(dim=-1) == batch.target_index).float().mean().item()
    return total, lazy, impatient, accuracy, message


def play_game_step(
    speaker: Speaker,
    listener: Listener,
    batch: StimulusBatch,
    config: GameConfig,
    optimizer: torch.optim.Optimizer,
    channel: StgsChannel | None = None,
    generator: torch.Generator | None = None,
    extra_loss=None,
) -> GameStepResult:
    """One optimizer step on both agents through the straight-through channel.

    ``extra_loss``, when given, is a callable returning an additional scalar
    to add to the objective (used for the grounding term).
    """
    channel = channel or StgsChannel(config.tau0)
    total, lazy, impatient, accuracy, message = game_losses(
        speaker, listener, batch, config, channel, generator
    )
    objective = total if extra_loss is None else total + extra_loss()
    if not torch.isfinite(objective):
        raise GameDivergedError(
            f"non-finite game loss (lazy={lazy.item()!r}, impatient={impatient.item()!r})"
        )
    optimizer.zero_grad()
    objective.backward()
    grad_sq = 0.0
    for p in speaker.parameters():
        if p.grad is not None:
            grad_sq += float(p.grad.pow(2).sum())
    optimizer.step()
    return GameStepResult(
        loss=float(total.item()),
        lazy=float(lazy.item()),
        impatient=float(impatient.item()),
        accuracy=accuracy,
        mean_length=float(message.lengths.float().mean()),
        speaker_grad_norm=math.sqrt(grad_sq),
        length_cost=length_cost_diagnostic(accuracy, message.lengths),
    )


@torch.no_grad()
def evaluate_game(speaker: Speaker, listener: Listener, batch: StimulusBatch) -> float:
    """Game accuracy with deterministic greedy messages, no updates."""
    message = speaker(batch.speaker_views, greedy=True)
    features = listener.encode_candidates(batch.listener_views)
    probs = listener_decision(listener, message, features)
    return (probs.argmax(dim=-1) == batch.target_index).float().mean().item()
