"""Differentiable building blocks shared by the RL agent and the game agents.

One visual encoder is shared by every agent (single parameter store, one
adapter per agent): the RL policy adapts it with goal-conditioned FiLM layers,
the speaker and listener with pooled fully-connected adapters. Also houses the
dueling head, the recurrent speaker decoder, a finite-difference gradient
checker and the versioned parameter store used for snapshots/checkpoints.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .vocab import EOS, SOS


class ShapeError(ValueError):
    pass


class VisualEncoder(nn.Module):
    """Three stride-2 conv blocks (32, 32, 64 filters), batch-norm, ReLU.

    (C_in, 64, 64) -> (64, 8, 8). Convolutions carry no bias.
    """

    def __init__(self, in_channels: int = 12):
        super().__init__()
        self.in_channels = in_channels
        widths = (32, 32, 64)
        layers = []
        prev = in_channels
        for w in widths:
            layers += [
                nn.Conv2d(prev, w, kernel_size=3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(),
            ]
            prev = w
        self.blocks = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.shape[-3] != self.in_channels or x.shape[-2:] != (64, 64):
            raise ShapeError(
                f"expected (*, {self.in_channels}, 64, 64) input, got {tuple(x.shape)}"
            )
        return self.blocks(x)


class PooledAdapter(nn.Module):
    """Agent-specific adaptation: global average pool then one linear layer."""

    def __init__(self, in_channels: int = 64, out_dim: int = 64):
        super().__init__()
        self.proj = nn.Linear(in_channels, out_dim)

    def forward(self, feature_maps: torch.Tensor) -> torch.Tensor:
        pooled = feature_maps.mean(dim=(-2, -1))
        return self.proj(pooled)


def pooled_visual_embedding(feature_maps: torch.Tensor) -> torch.Tensor:
    """Plain pooled view of the encoder output, used by the grounding loss."""
    return feature_maps.mean(dim=(-2, -1))


class FiLMLayer(nn.Module):
    """Per-channel affine modulation of feature maps from a conditioning vector."""

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.channels = channels
        self.scale = nn.Linear(cond_dim, channels)
        self.shift = nn.Linear(cond_dim, channels)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {x.shape[-3]}")
        if cond.shape[-1] != self.scale.in_features:
            raise ShapeError(
                f"conditioning dim {cond.shape[-1]} != {self.scale.in_features}"
            )
        gamma = self.scale(cond)[..., :, None, None]
        beta = self.shift(cond)[..., :, None, None]
        return gamma * x + beta


class FiLMAdapter(nn.Module):
    """Two stacked FiLM layers; reduces to the identity at scale 1, shift 0."""

    def __init__(self, channels: int, cond_dim: int, n_layers: int = 2):
        super().__init__()
        self.layers = nn.ModuleList(FiLMLayer(channels, cond_dim) for _ in range(n_layers))

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x, cond)
        return x

    def set_identity(self) -> None:
        """Force scale=1, shift=0 (used to check the identity contract)."""
        for layer in self.layers:
            nn.init.zeros_(layer.scale.weight)
            nn.init.ones_(layer.scale.bias)
            nn.init.zeros_(layer.shift.weight)
            nn.init.zeros_(layer.shift.bias)


class GoalEncoder(nn.Module):
    """Token embedding (dim 64) + one GRU layer; returns the last hidden state."""

    def __init__(self, vocab_size: int, hidden_size: int, embed_dim: int = 64):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, embed_dim)
        self.gru = nn.GRU(embed_dim, hidden_size, batch_first=True)
        self.hidden_size = hidden_size

    def forward(self, tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        out, _ = self.gru(self.embed(tokens))
        idx = (lengths - 1).clamp(min=0).view(-1, 1, 1).expand(-1, 1, out.shape[-1])
        return out.gather(1, idx).squeeze(1)


class MessageEncoder(nn.Module):
    """One-hot message embedding + one LSTM layer, zero initial state.

    Accepts relaxed (non-exactly-one-hot) vectors so gradient can flow from
    the listener back into the speaker through the channel.
    """

    def __init__(self, vocab_size: int, hidden_size: int, embed_dim: int = 64):
        super().__init__()
        self.embed = nn.Linear(vocab_size, embed_dim, bias=False)
        self.lstm = nn.LSTM(embed_dim, hidden_size, batch_first=True)
        self.hidden_size = hidden_size

    def forward(self, message: torch.Tensor) -> torch.Tensor:
        """All per-prefix hidden states, shape (B, L, H)."""
        out, _ = self.lstm(self.embed(message))
        return out


@dataclass
class MessageBatch:
    """EoS-terminated one-hot messages; positions at or past ``lengths`` are zero."""

    onehot: torch.Tensor  # (B, L, V)
    lengths: torch.Tensor  # (B,) long, includes the EoS position when emitted
    step_distributions: torch.Tensor | None = None  # (B, L, V) softmax(logits)

    def token_ids(self) -> list[tuple[int, ...]]:
        ids = self.onehot.argmax(dim=-1)
        return [
            tuple(ids[b, : int(self.lengths[b])].tolist())
            for b in range(ids.shape[0])
        ]


class SpeakerDecoder(nn.Module):
    """Recurrent decoder over the vocabulary, seeded by the visual encoding.

    Generation starts from the start symbol with the stimulus embedding as the
    initial hidden state, and halts at EoS or after ``max_len`` tokens. During
    game play tokens come from the channel's straight-through sampler with a
    learned per-step temperature; ``greedy=True`` gives deterministic argmax
    decoding (used when relabelling).
    """

    def __init__(self, vocab_size: int, hidden_size: int, max_len: int = 10,
                 embed_dim: int = 64):
        super().__init__()
        self.vocab_size = vocab_size
        self.hidden_size = hidden_size
        self.max_len = max_len
        self.embed = nn.Linear(vocab_size, embed_dim, bias=False)
        self.cell = nn.LSTMCell(embed_dim, hidden_size)
        self.logits_head = nn.Linear(hidden_size, vocab_size)
        self.temperature_head = nn.Linear(hidden_size, 1)

    def forward(
        self,
        init_hidden: torch.Tensor,
        channel=None,
        generator: torch.Generator | None = None,
        greedy: bool = False,
    ) -> MessageBatch:
        batch = init_hidden.shape[0]
        device = init_hidden.device
        dtype = init_hidden.dtype
        h = init_hidden
        c = torch.zeros_like(init_hidden)
        prev = torch.zeros(batch, self.vocab_size, device=device, dtype=dtype)
        prev[:, SOS] = 1.0
        alive = torch.ones(batch, dtype=torch.bool, device=device)
        lengths = torch.full((batch,), 0, dtype=torch.long, device=device)

        tokens, dists = [], []
        for step in range(self.max_len):
            h, c = self.cell(self.embed(prev), (h, c))
            logits = self.logits_head(h)
            dist = F.softmax(logits, dim=-1)
            if greedy:
                tok = F.one_hot(logits.argmax(dim=-1), self.vocab_size).to(dtype)
            else:
                tau = channel.temperature(self.temperature_head(h))
                tok, _ = channel.stgs_sample(logits, tau, generator)
            mask = alive.to(dtype).unsqueeze(-1)
            tokens.append(tok * mask)
            dists.append(dist * mask)
            emitted_eos = alive & (tok.detach().argmax(dim=-1) == EOS)
            lengths = torch.where(
                emitted_eos, torch.full_like(lengths, step + 1), lengths
            )
            alive = alive & ~emitted_eos
            prev = tok
            if not bool(alive.any()):
                break

        lengths = torch.where(alive, torch.full_like(lengths, len(tokens)), lengths)
        return MessageBatch(
            onehot=torch.stack(tokens, dim=1),
            lengths=lengths,
            step_distributions=torch.stack(dists, dim=1),
        )


class DuelingHead(nn.Module):
    """Q(s, a) = V(s) + A(s, a) - mean_a A(s, a); single-layer heads."""

    def __init__(self, hidden_size: int, n_actions: int):
        super().__init__()
        self.value = nn.Linear(hidden_size, 1)
        self.advantage = nn.Linear(hidden_size, n_actions)

    def forward(self, core_output: torch.Tensor) -> torch.Tensor:
        v = self.value(core_output)
        a = self.advantage(core_output)
        return v + a - a.mean(dim=-1, keepdim=True)


class RecurrentPolicy(nn.Module):
    """Goal-conditioned recurrent Q-network.

    Shared visual encoder -> goal-conditioned FiLM -> flatten -> 3-layer trunk
    (256, 128, 64) -> concat(previous action one-hot, previous reward) ->
    one-layer LSTM core -> dueling head over the action set.
    """

    def __init__(
        self,
        encoder: VisualEncoder,
        n_actions: int = 4,
        vocab_size: int = 64,
        goal_hidden: int = 128,
        core_hidden: int = 1024,
        trunk_widths: tuple[int, ...] = (256, 128, 64),
    ):
        super().__init__()
        self.encoder = encoder
        self.n_actions = n_actions
        self.goal_encoder = GoalEncoder(vocab_size, goal_hidden)
        self.film = FiLMAdapter(64, goal_hidden)
        trunk = []
        prev = 64 * 8 * 8
        for w in trunk_widths:
            trunk += [nn.Linear(prev, w), nn.ReLU()]
            prev = w
        self.trunk = nn.Sequential(*trunk)
        self.core = nn.LSTMCell(prev + n_actions + 1, core_hidden)
        self.core_hidden = core_hidden
        self.dueling = DuelingHead(core_hidden, n_actions)

    def initial_state(self, batch: int, device=None):
        h = torch.zeros(batch, self.core_hidden, device=device)
        return (h, torch.zeros_like(h))

    def encode_goal(self, tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        return self.goal_encoder(tokens, lengths)

    def q_step(self, obs, goal_embedding, prev_action, prev_reward, state):
        """One recurrent step. ``prev_action`` is one-hot (B, A); reward (B,)."""
        feats = self.film(self.encoder(obs), goal_embedding)
        x = self.trunk(feats.flatten(1))
        x = torch.cat([x, prev_action, prev_reward.unsqueeze(-1)], dim=-1)
        h, c = self.core(x, state)
        return self.dueling(h), (h, c)


# -------------------------------------------------------------- grad checks


@dataclass
class GradCheckReport:
    per_tensor: dict[str, float]
    tolerance: float
    failure: str | None = None

    @property
    def max_rel_error(self) -> float:
        return max(self.per_tensor.values()) if self.per_tensor else float("inf")

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_rel_error < self.tolerance


def check_gradients(
    fn,
    tensors: dict[str, torch.Tensor],
    tolerance: float,
    step: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward gradients of scalar ``fn()`` against central differences.

    ``tensors`` maps names to the leaf tensors ``fn`` closes over (they must
    have requires_grad set). When a tensor is large, ``max_entries`` random
    coordinates per tensor are probed. Use float64 tensors for tight bounds.
    """
    out = fn()
    if out.dim() != 0:
        raise ValueError("check_gradients needs a scalar-valued function")
    if not torch.isfinite(out):
        return GradCheckReport({}, tolerance, failure="non-finite output")

    grads = torch.autograd.grad(out, list(tensors.values()), allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    per_tensor: dict[str, float] = {}
    for (name, tensor), grad in zip(tensors.items(), grads):
        flat = tensor.detach().view(-1)
        n = flat.numel()
        if max_entries is not None and n > max_entries:
            idx = torch.randperm(n, generator=gen)[:max_entries]
        else:
            idx = torch.arange(n)
        analytic = (
            torch.zeros(n, dtype=tensor.dtype)
            if grad is None
            else grad.detach().reshape(-1)
        )
        worst = 0.0
        with torch.no_grad():
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = fn().item()
                flat[i] = orig - step
                f_minus = fn().item()
                flat[i] = orig
                fd = (f_plus - f_minus) / (2 * step)
                a = analytic[i].item()
                if not (torch.isfinite(torch.tensor(fd)) and torch.isfinite(torch.tensor(a))):
                    return GradCheckReport({}, tolerance, failure=f"non-finite at {name}[{i}]")
                rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
                worst = max(worst, rel)
        per_tensor[name] = worst
    return GradCheckReport(per_tensor, tolerance)


# ------------------------------------------------------------ parameter store


@dataclass
class ParameterSnapshot:
    version: int
    tensors: dict[str, torch.Tensor]


class ParameterStore:
    """Named parameter tensors with a version counter and consistent snapshots.

    One exclusive writer (the learner) and any number of snapshot readers;
    reads and writes are serialized so a snapshot never observes a
    half-applied update.
    """

    def __init__(self):
        self._modules: dict[str, nn.Module] = {}
        self._version = 0
        self._lock = threading.Lock()

    def register(self, name: str, module: nn.Module) -> None:
        if name in self._modules:
            raise ValueError(f"duplicate parameter group {name!r}")
        self._modules[name] = module

    @property
    def version(self) -> int:
        return self._version

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        for group, module in self._modules.items():
            for pname, param in module.state_dict().items():
                out[f"{group}/{pname}"] = param
        return out

    def snapshot(self) -> ParameterSnapshot:
        with self._lock:
            tensors = {k: v.detach().clone() for k, v in self.named_tensors().items()}
            return ParameterSnapshot(self._version, tensors)

    def load(self, tensors: dict[str, torch.Tensor]) -> None:
        with self._lock:
            current = self.named_tensors()
            unknown = set(tensors) - set(current)
            if unknown:
                raise KeyError(f"unknown tensors: {sorted(unknown)[:3]}...")
            for name, value in tensors.items():
                if tuple(current[name].shape) != tuple(value.shape):
                    raise ShapeError(
                        f"{name}: stored shape {tuple(value.shape)} != "
                        f"model shape {tuple(current[name].shape)}"
                    )
                current[name].copy_(value)
            self._version += 1

    def bump_version(self) -> int:
        with self._lock:
            self._version += 1
            return self._version
