"""Recurrent Q-learning loop and the five-variant training orchestration.

A synchronous vectorized runner: n_actors environments stepped round-robin
against the current parameters (actor update interval is one environment
step), one learner doing prioritized sequence updates with burn-in, 3-step
double-Q targets against a periodically synced target network, plus the
per-episode hindsight/relabelling and referential-game machinery the chosen
variant calls for.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig, derive_seed
from .grounding import GroundingBatch, SemanticEmbeddingTable, grounding_loss
from .gridworld import ACTIONS, EpisodeOutcome, PickupRoom, Trajectory
from .hindsight import (
    RGDataset,
    SupervisedDataset,
    contrastive_negatives,
    derive_predicate,
    gate_relabelling,
    harvest_supervised_pair,
    relabel,
)
from .metrics import alignment_report, success_ratio
from .nets import (
    ParameterStore,
    PooledAdapter,
    RecurrentPolicy,
    VisualEncoder,
    pooled_visual_embedding,
)
from .refgame import (
    GameConfig,
    Listener,
    Speaker,
    StgsChannel,
    evaluate_game,
    play_game_step,
    sample_stimulus_batch,
)
from .replay import PrioritizedBuffer
from .vocab import EOS, SOS, truncate_at_eos


class TrainingError(RuntimeError):
    pass


def actor_epsilons(n_actors: int, base: float = 0.4, alpha: float = 7.0) -> list[float]:
    """Per-actor exploration rates eps_i = base^(1 + i * alpha / (N - 1))."""
    if n_actors == 1:
        return [base]
    return [base ** (1 + i * alpha / (n_actors - 1)) for i in range(n_actors)]


def pad_token_batch(token_seqs) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([max(len(t), 1) for t in token_seqs], dtype=torch.long)
    out = torch.zeros(len(token_seqs), int(lengths.max()), dtype=torch.long)
    for i, seq in enumerate(token_seqs):
        if len(seq):
            out[i, : len(seq)] = torch.tensor([int(t) for t in seq])
    return out, lengths


def _prev_action_onehot(prev_actions: torch.Tensor, n_actions: int) -> torch.Tensor:
    """-1 (episode start) maps to the all-zero vector."""
    onehot = F.one_hot(prev_actions.clamp(min=0), n_actions).float()
    return onehot * (prev_actions >= 0).float().unsqueeze(-1)


@torch.no_grad()
def act(policy, obs, goal_tokens, state, prev_action, prev_reward, epsilon, rng):
    """epsilon-greedy recurrent action selection for a single environment."""
    tokens, lengths = pad_token_batch([goal_tokens])
    goal_emb = policy.encode_goal(tokens, lengths)
    obs_t = torch.as_tensor(obs, dtype=torch.float32).unsqueeze(0)
    pa = _prev_action_onehot(torch.tensor([prev_action]), policy.n_actions)
    pr = torch.tensor([float(prev_reward)])
    if state is None:
        state = policy.initial_state(1)
    q, new_state = policy.q_step(obs_t, goal_emb, pa, pr, state)
    if rng.random() < epsilon:
        action = int(rng.integers(policy.n_actions))
    else:
        action = int(q.argmax(dim=-1).item())
    return action, new_state, q.squeeze(0)


# ------------------------------------------------------------- n-step math


def n_step_targets(rewards, dones, q_online, q_target, gamma: float, n_step: int):
    """Per-step double-Q n-step targets over a batch of unrolls.

    rewards/dones are (B, T); q_online/q_target are (B, T+1, A) evaluated on
    the unroll's observation chain. The sum truncates at episode termination
    (no bootstrap past done) and at the end of the stored window, where the
    bootstrap uses the last available observation. No value rescaling.
    """
    b, t_len = rewards.shape
    rewards = rewards.float()
    targets = torch.zeros(b, t_len, dtype=q_online.dtype)
    for t in range(t_len):
        acc = torch.zeros(b, dtype=q_online.dtype)
        disc = torch.ones(b, dtype=q_online.dtype)
        alive = torch.ones(b, dtype=torch.bool)
        j = t
        for _ in range(n_step):
            if j >= t_len:
                break
            acc = acc + alive.to(acc.dtype) * disc * rewards[:, j]
            alive = alive & ~dones[:, j]
            disc = torch.where(alive, disc * gamma, disc)
            j += 1
        greedy = q_online[:, j].argmax(dim=-1, keepdim=True)
        bootstrap = q_target[:, j].gather(-1, greedy).squeeze(-1)
        targets[:, t] = acc + alive.to(acc.dtype) * disc * bootstrap
    return targets


def collate_segments(segments):
    arrays = [seg.arrays() for seg in segments]
    batch = {
        "observations": torch.from_numpy(
            np.stack([a["observations"] for a in arrays])
        ).float(),
        "actions": torch.from_numpy(np.stack([a["actions"] for a in arrays])).long(),
        "rewards": torch.from_numpy(np.stack([a["rewards"] for a in arrays])).float(),
        "dones": torch.from_numpy(np.stack([a["dones"] for a in arrays])),
        "valid": torch.from_numpy(np.stack([a["valid"] for a in arrays])),
        "prev_actions": torch.from_numpy(np.stack([a["prev_actions"] for a in arrays])).long(),
        "prev_rewards": torch.from_numpy(np.stack([a["prev_rewards"] for a in arrays])).float(),
    }
    tokens, lengths = pad_token_batch([a["goal_tokens"] for a in arrays])
    batch["goal_tokens"], batch["goal_lengths"] = tokens, lengths

    states = []
    for a in arrays:
        stored = a["initial_recurrent_state"]
        states.append(stored)
    batch["initial_states"] = states
    return batch


class Learner:
    """Prioritized sequence updates with burn-in and periodic target syncing."""

    def __init__(self, policy, target, buffer: PrioritizedBuffer, cfg, n_actions: int = 4):
        self.policy = policy
        self.target = target
        self.buffer = buffer
        self.cfg = cfg
        self.n_actions = n_actions
        self.target.load_state_dict(self.policy.state_dict())
        self.target.eval()  # keep batch-norm statistics frozen between syncs
        for p in self.target.parameters():
            p.requires_grad_(False)
        self.optimizer = torch.optim.Adam(
            self.policy.parameters(), lr=cfg.lr, eps=cfg.adam_eps
        )
        self.update_count = 0

    def _stack_states(self, stored_states, batch: int):
        h0 = []
        c0 = []
        hidden = self.policy.core_hidden
        for stored in stored_states:
            if stored is None:
                h0.append(torch.zeros(hidden))
                c0.append(torch.zeros(hidden))
            else:
                h, c = stored
                h0.append(torch.as_tensor(np.asarray(h)).reshape(-1).float())
                c0.append(torch.as_tensor(np.asarray(c)).reshape(-1).float())
        return torch.stack(h0), torch.stack(c0)

    def _unroll(self, net, batch, state, with_grad_from: int | None):
        """Q values over the T+1 observation chain; before ``with_grad_from``
        (and entirely, when None) the pass runs without autograd."""
        t_plus_1 = batch["observations"].shape[1]
        prev_a = _prev_action_onehot(batch["prev_actions"], self.n_actions)
        with torch.no_grad():
            goal_emb_ng = net.encode_goal(batch["goal_tokens"], batch["goal_lengths"])
        goal_emb = (
            net.encode_goal(batch["goal_tokens"], batch["goal_lengths"])
            if with_grad_from is not None
            else goal_emb_ng
        )
        qs = []
        for j in range(t_plus_1):
            grad_on = with_grad_from is not None and j >= with_grad_from
            ctx = torch.enable_grad() if grad_on else torch.no_grad()
            with ctx:
                q, state = net.q_step(
                    batch["observations"][:, j],
                    goal_emb if grad_on else goal_emb_ng,
                    prev_a[:, j],
                    batch["prev_rewards"][:, j],
                    state,
                )
            qs.append(q)
        return torch.stack(qs, dim=1)

    def compute_loss(self, batch, weights: torch.Tensor):
        cfg = self.cfg
        t_len = batch["actions"].shape[1]
        h0, c0 = self._stack_states(batch["initial_states"], batch["actions"].shape[0])

        q_online = self._unroll(self.policy, batch, (h0, c0), with_grad_from=cfg.burn_in)
        q_target = self._unroll(self.target, batch, (h0.clone(), c0.clone()), None)

        targets = n_step_targets(
            batch["rewards"], batch["dones"], q_online.detach(), q_target,
            cfg.gamma, cfg.n_step,
        )
        q_taken = q_online[:, :t_len].gather(-1, batch["actions"].unsqueeze(-1)).squeeze(-1)
        trainable = batch["valid"] & (
            torch.arange(t_len).unsqueeze(0) >= cfg.burn_in
        )
        delta = (targets - q_taken) * trainable.float()
        counts = trainable.float().sum(dim=1).clamp(min=1.0)
        per_segment = (delta**2).sum(dim=1) / counts
        loss = (weights * per_segment).mean()

        td_abs = [
            delta[b][trainable[b]].detach().abs().numpy() for b in range(delta.shape[0])
        ]
        return loss, td_abs

    def update(self, rng) -> dict:
        segments, weights, ids = self.buffer.sample_batch(self.cfg.batch_size, rng)
        batch = collate_segments(segments)
        loss, td_abs = self.compute_loss(batch, torch.from_numpy(weights))
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite TD loss at update {self.update_count}")
        self.optimizer.zero_grad()
        loss.backward()
        if self.cfg.grad_clip and self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.policy.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        self.buffer.update_priorities(ids, td_abs)
        self.update_count += 1
        if self.update_count % self.cfg.target_update_interval == 0:
            self.sync_target()
        return {"loss": float(loss.item()), "update": self.update_count}

    def sync_target(self) -> None:
        self.target.load_state_dict(self.policy.state_dict())


# --------------------------------------------------------- variant assembly


@dataclass
class StimulusRecord:
    """One environment stimulus kept for game/grounding training."""

    obs_u8: np.ndarray
    goal_tokens: tuple[int, ...]
    symbolic: object = None

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.obs_u8.astype(np.float32) / 255.0)


class _LazyStimuli:
    def __init__(self, records):
        self.records = records

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i].tensor()


@dataclass
class AgentBundle:
    store: ParameterStore
    encoder: VisualEncoder
    policy: RecurrentPolicy
    target: RecurrentPolicy
    speaker: Speaker | None = None
    listener: Listener | None = None
    table: SemanticEmbeddingTable | None = None
    rg_optimizer: torch.optim.Optimizer | None = None
    sup_optimizer: torch.optim.Optimizer | None = None
    channel: StgsChannel | None = None


def build_agents(cfg: RunConfig, seed: int) -> AgentBundle:
    torch.manual_seed(derive_seed(seed, "nets"))
    encoder = VisualEncoder(in_channels=12)
    policy = RecurrentPolicy(
        encoder,
        n_actions=len(ACTIONS),
        vocab_size=cfg.nets.vocab_size,
        goal_hidden=cfg.nets.goal_hidden,
        core_hidden=cfg.nets.core_hidden,
    )
    target = copy.deepcopy(policy)
    store = ParameterStore()
    store.register("policy", policy)

    bundle = AgentBundle(store=store, encoder=encoder, policy=policy, target=target)
    if cfg.uses_speaker:
        speaker_encoder = torch.nn.Sequential(
            encoder, PooledAdapter(64, cfg.nets.rg_hidden)
        )
        bundle.speaker = Speaker(
            speaker_encoder, cfg.rg.vocab_size, cfg.nets.rg_hidden, cfg.rg.max_len
        )
        store.register("speaker", bundle.speaker)
        bundle.sup_optimizer = torch.optim.Adam(
            _dedup_params(bundle.speaker.parameters()), lr=cfg.rg.lr
        )
    if cfg.uses_refgame:
        listener_encoder = torch.nn.Sequential(
            encoder, PooledAdapter(64, cfg.nets.rg_hidden)
        )
        bundle.listener = Listener(
            listener_encoder, cfg.rg.vocab_size, cfg.nets.rg_hidden, cfg.rg.descriptive
        )
        store.register("listener", bundle.listener)
        bundle.channel = StgsChannel(cfg.rg.tau0)
        params = list(bundle.speaker.parameters()) + list(bundle.listener.parameters())
        if cfg.uses_grounding:
            bundle.table = SemanticEmbeddingTable(cfg.rg.vocab_size, 64)
            store.register("grounding_table", bundle.table)
            params += list(bundle.table.parameters())
        bundle.rg_optimizer = torch.optim.Adam(_dedup_params(params), lr=cfg.rg.lr)
    return bundle


def _dedup_params(params):
    seen = {}
    for p in params:
        seen[id(p)] = p
    return list(seen.values())


def game_config_from(cfg: RunConfig) -> GameConfig:
    from .refgame import AugmentConfig

    a = cfg.rg.augment
    return GameConfig(
        vocab_size=cfg.rg.vocab_size,
        max_len=cfg.rg.max_len,
        distractors=cfg.rg.distractors,
        descriptive=cfg.rg.descriptive,
        descriptive_target_prob=cfg.rg.descriptive_target_prob,
        tau0=cfg.rg.tau0,
        beta0=cfg.rg.beta0,
        hinge_margin=cfg.rg.hinge_margin,
        batch_size=cfg.rg.batch_size,
        lr=cfg.rg.lr,
        augment=AugmentConfig(
            blur_sigma_max=a.blur_sigma_max,
            jitter_strength=a.jitter_strength,
            translate_frac=a.translate_frac,
            rotate_degrees=a.rotate_degrees,
        ),
    )


# ---------------------------------------------- mapping/predicate adapters


def speaker_mapping(speaker: Speaker):
    """State -> goal tokens via deterministic greedy decoding."""

    def mapping(state) -> tuple[int, ...]:
        stim = torch.as_tensor(np.asarray(state), dtype=torch.float32).unsqueeze(0)
        return truncate_at_eos(speaker.describe(stim)[0])

    return mapping


def listener_predicate(listener: Listener):
    """State x goal -> {0, 1} through the listener's single-stimulus score.

    With the descriptive head the goal counts as satisfied when the stimulus
    outscores the learnable no-target outcome; without it, when the raw
    message-stimulus score is positive.
    """

    def predicate(state, goal_tokens) -> int:
        stim = torch.as_tensor(np.asarray(state), dtype=torch.float32)
        tokens = tuple(truncate_at_eos(goal_tokens)) + (EOS,)
        vocab_size = listener.message_encoder.embed.in_features
        onehot = torch.zeros(1, len(tokens), vocab_size)
        for pos, tok in enumerate(tokens):
            onehot[0, pos, int(tok)] = 1.0
        with torch.no_grad():
            features = listener.encode_candidates(stim.unsqueeze(0).unsqueeze(0))
            logits = listener.prefix_logits(onehot, features)[:, -1]
        if listener.descriptive:
            return int(logits[0, 0].item() > logits[0, 1].item())
        return int(logits[0, 0].item() > 0.0)

    return predicate


# --------------------------------------------- instruction generator loss


def instruction_generator_loss(speaker: Speaker, stimuli: torch.Tensor,
                               goal_token_seqs) -> torch.Tensor:
    """Teacher-forcing cross-entropy of goal-plus-EoS given the stimulus."""
    dec = speaker.decoder
    init = speaker.stimulus_encoder(stimuli)
    batch = init.shape[0]
    seqs = [tuple(truncate_at_eos(g)) + (EOS,) for g in goal_token_seqs]
    max_len = max(len(s) for s in seqs)
    targets = torch.full((batch, max_len), -100, dtype=torch.long)
    for i, s in enumerate(seqs):
        targets[i, : len(s)] = torch.tensor(s)

    h, c = init, torch.zeros_like(init)
    prev = torch.zeros(batch, dec.vocab_size)
    prev[:, SOS] = 1.0
    losses = []
    for pos in range(max_len):
        h, c = dec.cell(dec.embed(prev), (h, c))
        logits = dec.logits_head(h)
        losses.append(F.cross_entropy(logits, targets[:, pos], ignore_index=-100,
                                      reduction="sum"))
        teacher = targets[:, pos].clamp(min=0)
        prev = F.one_hot(teacher, dec.vocab_size).float()
    n_tokens = (targets != -100).sum().clamp(min=1)
    return torch.stack(losses).sum() / n_tokens


@torch.no_grad()
def instruction_exact_match(speaker: Speaker, stimuli: torch.Tensor,
                            goal_token_seqs) -> float:
    decoded = speaker.describe(stimuli)
    hits = sum(
        truncate_at_eos(d) == truncate_at_eos(g)
        for d, g in zip(decoded, goal_token_seqs)
    )
    return hits / max(len(goal_token_seqs), 1)


# -------------------------------------------------------------- the runner


@dataclass
class _ActorSlot:
    env: PickupRoom
    epsilon: float
    episode_seed: int = 0
    obs: np.ndarray | None = None
    goal_tokens: tuple[int, ...] = ()
    state: object = None
    prev_action: int = -1
    prev_reward: float = 0.0
    observations: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    rec_states: list = field(default_factory=list)


class TrainingRun:
    """Owns all mutable training state for one run of one variant."""

    def __init__(self, cfg: RunConfig, sink=None):
        if not cfg.env.render_pixels:
            raise TrainingError("training requires env.render_pixels=true")
        self.cfg = cfg
        self.sink = sink or (lambda step, name, value: None)
        self.seed = cfg.seed
        self.bundle = build_agents(cfg, cfg.seed)
        self.buffer = PrioritizedBuffer(
            capacity_observations=cfg.replay.capacity,
            unroll=cfg.replay.unroll,
            stride=cfg.replay.overlap,
            priority_exponent=cfg.replay.priority_exponent,
            is_exponent=cfg.replay.is_exponent,
            eta=cfg.replay.eta,
            priority_floor=cfg.replay.priority_floor,
        )
        self.learner = Learner(
            self.bundle.policy, self.bundle.target, self.buffer, cfg.trainer
        )
        self.d_sup = SupervisedDataset(split_ratio=cfg.hindsight.split_ratio)
        self.d_rg = RGDataset(split_ratio=cfg.hindsight.split_ratio,
                              max_items=cfg.rg.dataset_cap)
        self.negatives: list = []
        self.game_cfg = game_config_from(cfg)

        self.env_rng = np.random.default_rng(derive_seed(cfg.seed, "env"))
        self.act_rng = np.random.default_rng(derive_seed(cfg.seed, "act"))
        self.replay_rng = np.random.default_rng(derive_seed(cfg.seed, "replay"))
        self.rg_rng = np.random.default_rng(derive_seed(cfg.seed, "rg"))
        self.relabel_rng = np.random.default_rng(derive_seed(cfg.seed, "relabel"))
        self.torch_gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "stgs"))

        self.total_steps = 0
        self.episode_count = 0
        self.relabelled_count = 0
        self.rg_val_accuracy = 0.0
        self.sup_val_accuracy = 0.0
        self.gate_open = False
        self._next_eval = cfg.eval_interval

        epsilons = actor_epsilons(
            cfg.trainer.n_actors, cfg.trainer.eps_base, cfg.trainer.eps_alpha
        )
        self.slots = [
            _ActorSlot(env=PickupRoom(**self._env_kwargs()), epsilon=eps)
            for eps in epsilons
        ]
        for slot in self.slots:
            self._begin_episode(slot)

    def _env_kwargs(self) -> dict:
        e = self.cfg.env
        return dict(
            room_size=e.room_size,
            n_distractors=e.n_distractors,
            allow_colorless_goals=e.allow_colorless_goals,
            max_steps=e.max_steps,
            render_pixels=e.render_pixels,
            reward_free=e.reward_free,
        )

    # --------------------------------------------------------- episode flow

    def _begin_episode(self, slot: _ActorSlot) -> None:
        slot.episode_seed = int(self.env_rng.integers(2**31))
        obs, goal = slot.env.reset(slot.episode_seed)
        slot.obs = obs
        slot.goal_tokens = goal.tokens
        slot.state = None
        slot.prev_action = -1
        slot.prev_reward = 0.0
        slot.observations = [obs]
        slot.actions, slot.rewards, slot.dones, slot.rec_states = [], [], [], []

    def _store_state(self, slot: _ActorSlot) -> None:
        if slot.state is None:
            slot.rec_states.append(None)
        else:
            h, c = slot.state
            slot.rec_states.append(
                (h.squeeze(0).numpy().copy(), c.squeeze(0).numpy().copy())
            )

    def _step_actor(self, slot: _ActorSlot) -> None:
        self.bundle.policy.eval()
        self._store_state(slot)
        action, new_state, _ = act(
            self.bundle.policy, slot.obs, slot.goal_tokens, slot.state,
            slot.prev_action, slot.prev_reward, slot.epsilon, self.act_rng,
        )
        if self.cfg.uses_refgame:
            # Stimulus and view of s_t, captured before the transition.
            self.d_rg.add_stimulus(
                StimulusRecord(
                    obs_u8=np.round(np.asarray(slot.obs) * 255).astype(np.uint8),
                    goal_tokens=slot.goal_tokens,
                    symbolic=slot.env.symbolic_view(),
                ),
                slot.goal_tokens,
                slot.episode_seed,
                len(slot.actions),
            )
        obs, reward, done, outcome = slot.env.step(action)
        slot.obs = obs
        slot.state = new_state
        slot.prev_action = action
        slot.prev_reward = float(reward)
        slot.observations.append(obs)
        slot.actions.append(action)
        slot.rewards.append(reward)
        slot.dones.append(done)
        self.total_steps += 1
        if done:
            try:
                self._finish_episode(slot, outcome)
            except Exception as exc:
                raise TrainingError(
                    f"episode {self.episode_count} (seed {slot.episode_seed}) failed: {exc}"
                ) from exc
            self._begin_episode(slot)

    def _finish_episode(self, slot: _ActorSlot, outcome: EpisodeOutcome) -> None:
        self.episode_count += 1
        traj = Trajectory(
            observations=slot.observations,
            actions=np.asarray(slot.actions, dtype=np.int64),
            rewards=np.asarray(slot.rewards, dtype=np.float32),
            dones=np.asarray(slot.dones, dtype=bool),
            goal_tokens=slot.goal_tokens,
            outcome=outcome,
            episode_seed=slot.episode_seed,
            recurrent_states=slot.rec_states,
        )
        self.buffer.store_episode(traj)

        if self.cfg.uses_refgame:
            self._refgame_episode_updates()

        if traj.successful:
            if self.cfg.uses_speaker:
                pair = harvest_supervised_pair(traj)
                self.d_sup.add_pair(pair[0], pair[1], traj.episode_seed)
                if self.cfg.variant == "higher_pp":
                    self.negatives.extend(
                        contrastive_negatives(traj, self.cfg.hindsight.n_contrastive)
                    )
                    del self.negatives[:-2048]
                self._speaker_supervised_update()
        else:
            self.gate_open = self._gate()
            if self.gate_open and self.cfg.uses_speaker:
                self._relabel_and_store(traj)

    def _gate(self) -> bool:
        hp = self.cfg.hindsight
        return gate_relabelling(
            self.cfg.gate_mode,
            sup_val_size=len(self.d_sup.val),
            speaker_val_accuracy=self.sup_val_accuracy,
            rg_val_size=len(self.d_rg.val),
            rg_val_accuracy=self.rg_val_accuracy,
            theta_sup=hp.theta_sup,
            n_min=hp.n_min,
            theta_rg=hp.theta_rg,
        )

    def _relabel_and_store(self, traj: Trajectory) -> None:
        mapping = speaker_mapping(self.bundle.speaker)
        if self.cfg.uses_refgame:
            predicate = listener_predicate(self.bundle.listener)
            strategy, k_her = self.cfg.hindsight.strategy, self.cfg.hindsight.k_her
            if strategy == "future_k" and k_her == 0:
                strategy = "final"
        else:
            predicate = derive_predicate(mapping)
            strategy, k_her = "final", 0  # the instruction-generator recipe
        duplicates = relabel(traj, mapping, predicate, strategy, k_her, self.relabel_rng)
        for dup in duplicates:
            self.buffer.store_episode(dup)
        self.relabelled_count += len(duplicates)

    # ------------------------------------------------------- game training

    def _refgame_episode_updates(self) -> None:
        if len(self.d_rg.train) < 2:
            return
        stimuli = _LazyStimuli(self.d_rg.train_records())
        extra = None
        if self.cfg.uses_grounding:
            extra = self._grounding_extra_loss()
        for _ in range(self.cfg.rg.updates_per_episode):
            batch = sample_stimulus_batch(
                stimuli, self.game_cfg.batch_size, self.game_cfg, self.rg_rng
            )
            play_game_step(
                self.bundle.speaker, self.bundle.listener, batch, self.game_cfg,
                self.bundle.rg_optimizer, self.bundle.channel, self.torch_gen,
                extra_loss=extra,
            )
        if len(self.d_rg.val) >= 2:
            val_batch = sample_stimulus_batch(
                _LazyStimuli(self.d_rg.val_records()),
                min(self.game_cfg.batch_size, 32),
                self.game_cfg,
                self.rg_rng,
            )
            self.rg_val_accuracy = evaluate_game(
                self.bundle.speaker, self.bundle.listener, val_batch
            )

    def _grounding_extra_loss(self):
        records = self.d_rg.train_records()

        def extra():
            size = min(len(records), 16)
            idx = self.rg_rng.choice(len(records), size=size, replace=False)
            obs = torch.stack([records[i].tensor() for i in idx])
            goals = [records[i].goal_tokens for i in idx]
            batch = GroundingBatch(obs, goals)
            loss = grounding_loss(
                batch,
                self.bundle.table,
                lambda o: pooled_visual_embedding(self.bundle.encoder(o)),
                noise_max=self.cfg.grounding.noise_max,
                generator=self.torch_gen,
            )
            return self.cfg.grounding.weight * loss

        return extra

    def _speaker_supervised_update(self) -> None:
        train = self.d_sup.train
        if not train:
            return
        size = min(len(train), 32)
        idx = self.rg_rng.choice(len(train), size=size, replace=False)
        items = [train[i] for i in idx]
        if self.negatives:
            n_neg = min(len(self.negatives), max(size // 2, 1))
            neg_idx = self.rg_rng.choice(len(self.negatives), size=n_neg, replace=False)
            items = items + [self.negatives[i] for i in neg_idx]
        stimuli = torch.stack(
            [torch.as_tensor(np.asarray(s), dtype=torch.float32) for s, _ in items]
        )
        goals = [g for _, g in items]
        self.bundle.speaker.train()
        loss = instruction_generator_loss(self.bundle.speaker, stimuli, goals)
        self.bundle.sup_optimizer.zero_grad()
        loss.backward()
        self.bundle.sup_optimizer.step()
        self._refresh_sup_val_accuracy()

    def _refresh_sup_val_accuracy(self) -> None:
        val = self.d_sup.val
        if not val:
            self.sup_val_accuracy = 0.0
            return
        size = min(len(val), 32)
        idx = self.rg_rng.choice(len(val), size=size, replace=False)
        stimuli = torch.stack(
            [torch.as_tensor(np.asarray(val[i][0]), dtype=torch.float32) for i in idx]
        )
        goals = [val[i][1] for i in idx]
        self.bundle.speaker.eval()
        self.sup_val_accuracy = instruction_exact_match(self.bundle.speaker, stimuli, goals)

    # --------------------------------------------------------- evaluation

    def greedy_policy(self):
        policy = self.bundle.policy
        policy.eval()

        def fn(env, obs, goal, carry):
            state, prev_action = carry if carry is not None else (None, -1)
            action, new_state, _ = act(
                policy, obs, goal.tokens, state, prev_action, 0.0, 0.0, self.act_rng
            )
            return action, (new_state, action)

        return fn

    def evaluate(self, step: int) -> dict:
        self.bundle.policy.eval()
        results = {}
        if self.cfg.n_eval_envs > 0 and self.cfg.env.render_pixels:
            sr = success_ratio(
                self.greedy_policy(),
                n_envs=self.cfg.n_eval_envs,
                seed=derive_seed(self.seed, f"eval{step}"),
                env_kwargs=self._env_kwargs(),
            )
            results["success_ratio"] = sr
        results["episodes"] = float(self.episode_count)
        results["relabelled_episodes"] = float(self.relabelled_count)
        results["gate_state"] = float(self.gate_open)
        results["d_sup_train_size"] = float(len(self.d_sup.train))
        results["d_sup_val_size"] = float(len(self.d_sup.val))
        results["d_rg_train_size"] = float(len(self.d_rg.train))
        results["d_rg_val_size"] = float(len(self.d_rg.val))
        if self.cfg.uses_refgame:
            results["rg_val_accuracy"] = self.rg_val_accuracy
            results.update(self._alignment_metrics())
        if self.cfg.uses_speaker:
            results["speaker_val_exact_match"] = self.sup_val_accuracy
        for name, value in results.items():
            self.sink(step, name, value)
        return results

    def _alignment_metrics(self, cap: int = 128) -> dict:
        records = [r for r in self.d_rg.train_records() if r.symbolic is not None]
        if len(records) < 4:
            return {}
        idx = self.rg_rng.choice(len(records), size=min(len(records), cap), replace=False)
        sample = [records[i] for i in idx]
        speaker = self.bundle.speaker
        speaker.eval()

        def speak(observations):
            stacked = torch.stack(list(observations))
            return speaker.describe(stacked)

        report = alignment_report(
            speak,
            [r.tensor() for r in sample],
            [r.symbolic for r in sample],
        )
        return {f"alignment_{mode}": report[mode] for mode in report.accuracies}

    # -------------------------------------------------------------- loop

    def run(self, checkpoint_fn=None) -> dict:
        cfg = self.cfg
        budget = cfg.trainer.observation_budget
        last_eval = -1
        while self.total_steps < budget:
            for slot in self.slots:
                if self.total_steps >= budget:
                    break
                self._step_actor(slot)
                if self.total_steps >= cfg.trainer.learn_start and len(self.buffer) > 0:
                    for _ in range(cfg.trainer.updates_per_step):
                        self.bundle.policy.train()
                        self.learner.update(self.replay_rng)
                        self.bundle.store.bump_version()
                if self.total_steps >= self._next_eval:
                    self.evaluate(self.total_steps)
                    last_eval = self.total_steps
                    if checkpoint_fn is not None:
                        checkpoint_fn(self.total_steps)
                    self._next_eval += cfg.eval_interval
        if last_eval != self.total_steps:
            final = self.evaluate(self.total_steps)
            if checkpoint_fn is not None:
                checkpoint_fn(self.total_steps)
        else:
            final = {}
        return {
            "total_steps": self.total_steps,
            "episodes": self.episode_count,
            "updates": self.learner.update_count,
            "final": final,
        }


def run_training(cfg: RunConfig, sink=None, checkpoint_fn=None) -> dict:
    """Train one variant for the configured observation budget."""
    run = TrainingRun(cfg, sink)
    return run.run(checkpoint_fn)
