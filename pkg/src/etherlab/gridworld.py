"""Single-room pickup environment with linguistic goals and pixel observations.

One room of colored/shaped objects, a "pick up ..." instruction, egocentric
7x7 partial observability rendered to 64x64 pixels with 4 stacked frames, and
a one-pickup-per-episode rule: picking up the described object succeeds,
picking up anything else fails, and episodes time out after 40 steps.

A scripted expert and a symbolic (non-pixel) view of the field of view are
provided for dataset harvesting and co-occurrence analysis.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import vocab
from .vocab import COLORS, SHAPES

TURN_LEFT, TURN_RIGHT, FORWARD, PICKUP = 0, 1, 2, 3
ACTIONS = (TURN_LEFT, TURN_RIGHT, FORWARD, PICKUP)
ACTION_NAMES = ("turn_left", "turn_right", "forward", "pickup")

# Facing directions as (row, col) deltas: east, south, west, north.
DIR_VECTORS = ((0, 1), (1, 0), (0, -1), (-1, 0))

VIEW_SIZE = 7
CANVAS = 64
FRAME_STACK = 4
CHANNELS = 3

# Flat-shaded palette; every value is an exact uint8 so float observations
# round-trip losslessly through a /255 quantisation.
COLOR_RGB = {
    "red": (200, 40, 40),
    "green": (40, 180, 40),
    "blue": (40, 80, 220),
    "purple": (150, 50, 190),
    "yellow": (220, 210, 40),
    "grey": (140, 140, 140),
}
FLOOR_RGB = (25, 25, 25)
OUTSIDE_RGB = (70, 70, 70)


class EnvUsageError(RuntimeError):
    """Raised when the environment API is driven out of contract."""


class EnvConfigError(ValueError):
    """Raised when an environment configuration cannot be instantiated."""


class NoPathError(RuntimeError):
    """Raised by the expert when the goal object is absent or unreachable."""


@dataclass(frozen=True)
class WorldObject:
    color: str
    shape: str
    position: tuple[int, int]


@dataclass(frozen=True)
class GoalInstruction:
    """A "pick up" instruction over the shared vocabulary.

    ``color`` is None for colorless goals ("pick up a key").
    """

    color: str | None
    shape: str
    article: str

    @property
    def words(self) -> tuple[str, ...]:
        middle = (self.color,) if self.color is not None else ()
        return ("pick", "up", self.article) + middle + (self.shape,)

    @property
    def tokens(self) -> tuple[int, ...]:
        return vocab.tokenize(self.words)

    @property
    def text(self) -> str:
        return " ".join(self.words)

    def matches(self, obj: WorldObject) -> bool:
        if self.color is not None and obj.color != self.color:
            return False
        return obj.shape == self.shape


@dataclass(frozen=True)
class EpisodeOutcome:
    status: str  # success | failure | timeout
    length: int


@dataclass
class SymbolicImage:
    """Per-cell (shape index, color index, presence) over the field of view."""

    shape_idx: np.ndarray
    color_idx: np.ndarray
    present: np.ndarray

    def visible_objects(self) -> list[tuple[str, str]]:
        out = []
        rows, cols = np.nonzero(self.present)
        for r, c in zip(rows.tolist(), cols.tolist()):
            out.append((COLORS[self.color_idx[r, c]], SHAPES[self.shape_idx[r, c]]))
        return out


def _cell_edges(n_cells: int, size: int) -> list[int]:
    return [int(round(i * size / n_cells)) for i in range(n_cells + 1)]


def _sprite_mask(shape: str, h: int, w: int) -> np.ndarray:
    yy = (np.arange(h)[:, None] + 0.5) / h
    xx = (np.arange(w)[None, :] + 0.5) / w
    if shape == "ball":
        return (yy - 0.5) ** 2 + (xx - 0.5) ** 2 <= 0.34**2
    if shape == "box":
        d = np.maximum(np.abs(yy - 0.5), np.abs(xx - 0.5))
        return (d <= 0.40) & (d >= 0.22)
    if shape == "key":
        stem = (np.abs(xx - 0.5) <= 0.10) & (yy >= 0.18) & (yy <= 0.85)
        head = (yy - 0.26) ** 2 + (xx - 0.5) ** 2 <= 0.17**2
        tooth = (yy >= 0.68) & (yy <= 0.85) & (xx >= 0.5) & (xx <= 0.78)
        return stem | head | tooth
    raise ValueError(f"unknown shape {shape!r}")


class PickupRoom:
    """The environment. One instance is single-threaded; run many in parallel."""

    def __init__(
        self,
        room_size: int = 8,
        n_distractors: int = 5,
        allow_colorless_goals: bool = True,
        max_steps: int = 40,
        render_pixels: bool = True,
        reward_free: bool = False,
        forced_goal: tuple[str | None, str] | None = None,
    ):
        if room_size < 2:
            raise EnvConfigError("room_size must be at least 2")
        needed = 1 + n_distractors + (0 if reward_free else 1)
        if needed > room_size * room_size:
            raise EnvConfigError(
                f"room {room_size}x{room_size} cannot hold agent plus {needed - 1} objects"
            )
        self.room_size = room_size
        self.n_distractors = n_distractors
        self.allow_colorless_goals = allow_colorless_goals
        self.max_steps = max_steps
        self.render_pixels = render_pixels
        self.reward_free = reward_free
        self.forced_goal = forced_goal

        self._edges = _cell_edges(VIEW_SIZE, CANVAS)
        self._rng: np.random.Generator | None = None
        self._done = True
        self.objects: list[WorldObject] = []
        self.goal: GoalInstruction | None = None
        self.agent_pos: tuple[int, int] = (0, 0)
        self.agent_dir: int = 0
        self.step_count = 0
        self._frames: deque[np.ndarray] = deque(maxlen=FRAME_STACK)

    # ------------------------------------------------------------------ setup

    def reset(self, seed: int) -> tuple[np.ndarray | None, GoalInstruction]:
        rng = np.random.default_rng(seed)
        self._rng = rng
        # Re-place until some goal-matching object is reachable, so the
        # scripted expert succeeds from any reset. Blocked layouts are rare
        # (a target fenced in by other objects) and the retry stays on the
        # seeded stream, preserving determinism.
        for _ in range(100):
            result = self._place(rng)
            if self.reward_free or self._goal_reachable():
                return result
        raise EnvConfigError("could not place a reachable goal object")

    def _place(self, rng) -> tuple[np.ndarray | None, GoalInstruction]:
        if self.forced_goal is not None:
            color, shape = self.forced_goal
        else:
            shape = SHAPES[rng.integers(len(SHAPES))]
            if self.allow_colorless_goals:
                pick = rng.integers(len(COLORS) + 1)
                color = None if pick == len(COLORS) else COLORS[pick]
            else:
                color = COLORS[rng.integers(len(COLORS))]

        def matches_desc(c: str, s: str) -> bool:
            return (color is None or c == color) and s == shape

        n_objects = self.n_distractors + (0 if self.reward_free else 1)
        cells = [(r, c) for r in range(self.room_size) for c in range(self.room_size)]
        chosen = rng.choice(len(cells), size=n_objects + 1, replace=False)
        positions = [cells[i] for i in chosen]
        self.agent_pos = positions[0]
        self.agent_dir = int(rng.integers(4))

        objects: list[WorldObject] = []
        pos_iter = iter(positions[1:])
        if not self.reward_free:
            target_color = color if color is not None else COLORS[rng.integers(len(COLORS))]
            objects.append(WorldObject(target_color, shape, next(pos_iter)))
        for _ in range(self.n_distractors):
            while True:
                c = COLORS[rng.integers(len(COLORS))]
                s = SHAPES[rng.integers(len(SHAPES))]
                if self.reward_free:
                    if not matches_desc(c, s):
                        break
                elif color is not None:
                    # Fully specified goal: keep the matching object unique.
                    if not (c == color and s == shape):
                        break
                else:
                    break
            objects.append(WorldObject(c, s, next(pos_iter)))
        self.objects = objects

        n_matching = sum(1 for o in objects if matches_desc(o.color, o.shape))
        article = "the" if n_matching == 1 else "a"
        self.goal = GoalInstruction(color=color, shape=shape, article=article)

        self.step_count = 0
        self._done = False
        self._frames.clear()
        obs = None
        if self.render_pixels:
            frame = self._render_frame()
            for _ in range(FRAME_STACK):
                self._frames.append(frame)
            obs = self._stacked_observation()
        return obs, self.goal

    def _goal_reachable(self) -> bool:
        blocked = {o.position for o in self.objects}
        for obj in self.objects:
            if not self.goal.matches(obj):
                continue
            targets = set()
            for dr, dc in DIR_VECTORS:
                adj = (obj.position[0] + dr, obj.position[1] + dc)
                if self._inside(adj) and adj not in blocked:
                    targets.add(adj)
            if targets and _bfs_path(self.room_size, blocked, self.agent_pos, targets):
                return True
        return False

    # ------------------------------------------------------------- transition

    def step(self, action: int):
        if self._done:
            raise EnvUsageError("step() called after the episode ended")
        if action not in ACTIONS:
            raise EnvUsageError(f"unknown action {action!r}")

        reward = 0.0
        outcome: EpisodeOutcome | None = None
        self.step_count += 1

        if action == TURN_LEFT:
            self.agent_dir = (self.agent_dir - 1) % 4
        elif action == TURN_RIGHT:
            self.agent_dir = (self.agent_dir + 1) % 4
        elif action == FORWARD:
            ahead = self._cell_ahead()
            if self._inside(ahead) and self._object_at(ahead) is None:
                self.agent_pos = ahead
        elif action == PICKUP:
            obj = self._object_at(self._cell_ahead())
            if obj is not None:
                self._done = True
                if self.goal.matches(obj):
                    reward = 1.0
                    outcome = EpisodeOutcome("success", self.step_count)
                else:
                    outcome = EpisodeOutcome("failure", self.step_count)

        if not self._done and self.step_count >= self.max_steps:
            self._done = True
            outcome = EpisodeOutcome("timeout", self.step_count)

        obs = None
        if self.render_pixels:
            self._frames.append(self._render_frame())
            obs = self._stacked_observation()
        return obs, reward, self._done, outcome

    @property
    def done(self) -> bool:
        return self._done

    # ------------------------------------------------------------------ query

    def _inside(self, cell: tuple[int, int]) -> bool:
        r, c = cell
        return 0 <= r < self.room_size and 0 <= c < self.room_size

    def _object_at(self, cell: tuple[int, int]) -> WorldObject | None:
        for obj in self.objects:
            if obj.position == cell:
                return obj
        return None

    def _cell_ahead(self) -> tuple[int, int]:
        dr, dc = DIR_VECTORS[self.agent_dir]
        return (self.agent_pos[0] + dr, self.agent_pos[1] + dc)

    def _view_to_world(self, vr: int, vc: int) -> tuple[int, int]:
        """View cell -> world cell. Agent sits at view (6, 3) facing view-up."""
        fwd = (VIEW_SIZE - 1) - vr
        lat = vc - VIEW_SIZE // 2
        fr, fc = DIR_VECTORS[self.agent_dir]
        rr, rc = DIR_VECTORS[(self.agent_dir + 1) % 4]
        return (
            self.agent_pos[0] + fwd * fr + lat * rr,
            self.agent_pos[1] + fwd * fc + lat * rc,
        )

    def symbolic_view(self) -> SymbolicImage:
        shape_idx = np.zeros((VIEW_SIZE, VIEW_SIZE), dtype=np.int8)
        color_idx = np.zeros((VIEW_SIZE, VIEW_SIZE), dtype=np.int8)
        present = np.zeros((VIEW_SIZE, VIEW_SIZE), dtype=bool)
        for vr in range(VIEW_SIZE):
            for vc in range(VIEW_SIZE):
                obj = self._object_at(self._view_to_world(vr, vc))
                if obj is not None:
                    present[vr, vc] = True
                    shape_idx[vr, vc] = SHAPES.index(obj.shape)
                    color_idx[vr, vc] = COLORS.index(obj.color)
        return SymbolicImage(shape_idx, color_idx, present)

    # ---------------------------------------------------------------- render

    def _render_frame(self) -> np.ndarray:
        frame = np.empty((CANVAS, CANVAS, 3), dtype=np.uint8)
        edges = self._edges
        for vr in range(VIEW_SIZE):
            for vc in range(VIEW_SIZE):
                r0, r1 = edges[vr], edges[vr + 1]
                c0, c1 = edges[vc], edges[vc + 1]
                world = self._view_to_world(vr, vc)
                if not self._inside(world):
                    frame[r0:r1, c0:c1] = OUTSIDE_RGB
                    continue
                frame[r0:r1, c0:c1] = FLOOR_RGB
                obj = self._object_at(world)
                if obj is not None:
                    mask = _sprite_mask(obj.shape, r1 - r0, c1 - c0)
                    block = frame[r0:r1, c0:c1]
                    block[mask] = COLOR_RGB[obj.color]
        return frame

    def _stacked_observation(self) -> np.ndarray:
        # Oldest frame first; shape (FRAME_STACK * 3, 64, 64), values in [0, 1].
        stacked = np.concatenate(
            [np.transpose(f, (2, 0, 1)) for f in self._frames], axis=0
        )
        return stacked.astype(np.float32) / 255.0


# ------------------------------------------------------------------- expert


def _bfs_path(
    room_size: int,
    blocked: set[tuple[int, int]],
    start: tuple[int, int],
    targets: set[tuple[int, int]],
) -> list[tuple[int, int]] | None:
    """Shortest 4-neighbour path from start to any target cell, else None."""
    if start in targets:
        return [start]
    parents: dict[tuple[int, int], tuple[int, int]] = {start: start}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        for dr, dc in DIR_VECTORS:
            nxt = (cell[0] + dr, cell[1] + dc)
            if not (0 <= nxt[0] < room_size and 0 <= nxt[1] < room_size):
                continue
            if nxt in parents or nxt in blocked:
                continue
            parents[nxt] = cell
            if nxt in targets:
                path = [nxt]
                while path[-1] != start:
                    path.append(parents[path[-1]])
                path.reverse()
                return path
            queue.append(nxt)
    return None


def _turn_toward(current_dir: int, desired_dir: int) -> int:
    delta = (desired_dir - current_dir) % 4
    return TURN_RIGHT if delta in (1, 2) else TURN_LEFT


def expert_action(env: PickupRoom, goal: GoalInstruction | None = None) -> int:
    """One step of the scripted expert for the (possibly partial) goal.

    Deterministic: nearest matching object by path length, ties broken by
    grid order. Raises NoPathError when no matching object is reachable.
    """
    goal = goal if goal is not None else env.goal
    matching = sorted(
        (o for o in env.objects if goal.matches(o)), key=lambda o: o.position
    )
    if not matching:
        raise NoPathError(f"no object matching {goal.text!r} in the room")

    blocked = {o.position for o in env.objects}
    best: tuple[int, WorldObject, list[tuple[int, int]]] | None = None
    for obj in matching:
        targets = set()
        for dr, dc in DIR_VECTORS:
            adj = (obj.position[0] + dr, obj.position[1] + dc)
            if 0 <= adj[0] < env.room_size and 0 <= adj[1] < env.room_size:
                if adj not in blocked:
                    targets.add(adj)
        if not targets:
            continue
        path = _bfs_path(env.room_size, blocked, env.agent_pos, targets)
        if path is None:
            continue
        if best is None or len(path) < len(best[2]):
            best = (len(path), obj, path)
    if best is None:
        raise NoPathError(f"no reachable cell adjacent to any {goal.text!r} object")

    _, obj, path = best
    if len(path) == 1:
        # Already adjacent: face the object, then pick it up.
        dr = obj.position[0] - env.agent_pos[0]
        dc = obj.position[1] - env.agent_pos[1]
        desired = DIR_VECTORS.index((dr, dc))
        if env.agent_dir == desired:
            return PICKUP
        return _turn_toward(env.agent_dir, desired)

    nxt = path[1]
    dr = nxt[0] - env.agent_pos[0]
    dc = nxt[1] - env.agent_pos[1]
    desired = DIR_VECTORS.index((dr, dc))
    if env.agent_dir == desired:
        return FORWARD
    return _turn_toward(env.agent_dir, desired)


# ------------------------------------------------------------ trajectories


@dataclass
class Trajectory:
    """A finished episode: arrays over its T transitions plus the state chain."""

    observations: list  # s_0 .. s_T  (None entries when pixels are disabled)
    actions: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    dones: np.ndarray  # (T,) bool, True exactly on the last transition
    goal_tokens: tuple[int, ...]
    outcome: EpisodeOutcome
    episode_seed: int
    recurrent_states: list = field(default_factory=list)  # per-step actor state

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def successful(self) -> bool:
        return self.outcome.status == "success"

    def final_state(self):
        return self.observations[-1]


def run_episode(
    env: PickupRoom,
    seed: int,
    policy,
    record_states: bool = False,
) -> Trajectory:
    """Roll one episode; ``policy(env, obs, goal, carry) -> (action, carry)``."""
    obs, goal = env.reset(seed)
    observations = [obs]
    actions, rewards, dones = [], [], []
    states = []
    carry = None
    outcome = None
    while not env.done:
        if record_states:
            states.append(carry)
        action, carry = policy(env, obs, goal, carry)
        obs, reward, done, outcome = env.step(action)
        observations.append(obs)
        actions.append(action)
        rewards.append(reward)
        dones.append(done)
    return Trajectory(
        observations=observations,
        actions=np.asarray(actions, dtype=np.int64),
        rewards=np.asarray(rewards, dtype=np.float32),
        dones=np.asarray(dones, dtype=bool),
        goal_tokens=goal.tokens,
        outcome=outcome,
        episode_seed=seed,
        recurrent_states=states,
    )


def expert_policy(env, obs, goal, carry):
    return expert_action(env, goal), carry


def random_policy_factory(seed: int):
    rng = np.random.default_rng(seed)

    def policy(env, obs, goal, carry):
        return int(rng.integers(len(ACTIONS))), carry

    return policy
