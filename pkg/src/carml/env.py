"""2D room with landmarks and turn-left / turn-right / forward locomotion.

The room is the square ``[0, room_size]^2``. The agent always spawns near
the top wall facing down into the room. Landmarks are discs that the agent
can see but not collide with. Two observation modes are available:

``pose``
    ``(x, y, cos(heading), sin(heading))`` rescaled to ``[-1, 1]``.
``rays``
    An egocentric fan of ``n_rays`` angular sectors covering ``fov``
    radians. Each sector reports the distance to the nearest thing it sees
    (a landmark inside the sector or the wall along its center line),
    rescaled to ``[-1, 1]``, followed by a one-hot of the landmark kind
    (all zeros for a wall).

Everything is written against arrays so a batch of rooms can be stepped in
one call; the single-agent functions ``reset`` / ``step`` wrap the batched
core. Randomness only enters through explicitly passed generators.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

LEFT, RIGHT, FORWARD = 0, 1, 2
ACTIONS = ("left", "right", "forward")
N_ACTIONS = 3

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class EnvConfig:
    """Room parameters. ``landmark_radius``, ``min_separation``, ``wall_margin``,
    ``success_radius`` and ``reward_eps`` are fractions of ``room_size``."""

    room_size: float = 1.0
    n_landmarks: int = 5
    layout_mode: str = "fixed"
    horizon: int = 32
    turn_angle: float = math.radians(30.0)
    step_size: float | None = None  # defaults to room_size / 20
    obs_mode: str = "rays"
    n_rays: int = 12
    fov: float = math.pi
    landmark_radius: float = 0.03
    min_separation: float = 0.15
    wall_margin: float = 0.1
    success_radius: float = 0.1
    reward_eps: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.room_size > 0:
            raise ValueError("room_size must be positive")
        if self.step_size is None:
            object.__setattr__(self, "step_size", self.room_size / 20.0)
        if self.n_landmarks < 1:
            raise ValueError("n_landmarks must be >= 1")
        if self.layout_mode not in ("fixed", "random"):
            raise ValueError(f"layout_mode must be 'fixed' or 'random', got {self.layout_mode!r}")
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        if not 0 < self.step_size < self.room_size:
            raise ValueError("step_size must lie in (0, room_size)")
        if not 0 < self.turn_angle < TWO_PI:
            raise ValueError("turn_angle must lie in (0, 2*pi)")
        if self.obs_mode not in ("pose", "rays"):
            raise ValueError(f"obs_mode must be 'pose' or 'rays', got {self.obs_mode!r}")
        if self.n_rays < 1:
            raise ValueError("n_rays must be >= 1")
        if not 0 < self.fov <= TWO_PI:
            raise ValueError("fov must lie in (0, 2*pi]")
        if self.success_radius <= 0 or self.reward_eps <= 0:
            raise ValueError("success_radius and reward_eps must be positive")

    @property
    def n_kinds(self) -> int:
        """Distinct landmark identities; random layouts hold out a second pool for testing."""
        return self.n_landmarks if self.layout_mode == "fixed" else 2 * self.n_landmarks

    @property
    def obs_dim(self) -> int:
        if self.obs_mode == "pose":
            return 4
        return self.n_rays * (1 + self.n_kinds)

    @property
    def spawn(self) -> tuple[float, float, float]:
        return (0.5 * self.room_size, 0.95 * self.room_size, 1.5 * math.pi)


@dataclass(frozen=True)
class Layout:
    positions: np.ndarray  # (n_landmarks, 2)
    kinds: np.ndarray  # (n_landmarks,) int

    def __eq__(self, other):
        return (isinstance(other, Layout)
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.kinds, other.kinds))

    def __hash__(self):
        return hash((self.positions.tobytes(), self.kinds.tobytes()))


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    heading: float
    t: int
    layout: Layout
    turns: int = 0  # net left-minus-right turns; heading is recomputed from it exactly

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class TestTask:
    target_landmark: int
    target_position: tuple[float, float]
    success_radius: float
    reward_eps: float
    layout: Layout
    kind: str = "inverse-distance"


@dataclass
class Trajectory:
    """One episode: states reached after each of the T actions."""

    obs: np.ndarray  # (T, obs_dim)
    poses: np.ndarray  # (T, 3) x, y, heading
    actions: np.ndarray  # (T,) int
    task_id: int = -1
    episode_id: int = -1
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.actions)


# layouts ---------------------------------------------------------------------

def _sample_positions(config: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    lo = config.wall_margin * config.room_size
    hi = config.room_size - lo
    sep = config.min_separation * config.room_size
    spawn = np.array(config.spawn[:2])
    for _ in range(10_000):
        pts: list[np.ndarray] = []
        for _ in range(100 * config.n_landmarks):
            p = rng.uniform(lo, hi, size=2)
            if np.linalg.norm(p - spawn) < sep:
                continue
            if all(np.linalg.norm(p - q) >= sep for q in pts):
                pts.append(p)
                if len(pts) == config.n_landmarks:
                    return np.array(pts)
    raise ValueError("could not place landmarks with the requested separation")


def fixed_layout(config: EnvConfig) -> Layout:
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0x1A70,)))
    return Layout(_sample_positions(config, rng), np.arange(config.n_landmarks))


def make_layout(config: EnvConfig, rng: np.random.Generator, split: str = "train") -> Layout:
    """The fixed layout, or a fresh random one drawn from the ``split`` kind pool."""
    if config.layout_mode == "fixed":
        return fixed_layout(config)
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    positions = _sample_positions(config, rng)
    offset = 0 if split == "train" else config.n_landmarks
    kinds = offset + rng.permutation(config.n_landmarks)
    return Layout(positions, kinds)


# batched core --------------------------------------------------------------------

def wrap_angle(a):
    return np.mod(a, TWO_PI)


def heading_from_turns(config: EnvConfig, turns):
    return wrap_angle(config.spawn[2] + np.asarray(turns) * config.turn_angle)


def move(config: EnvConfig, x, y, turns, actions):
    """Apply one action per agent. Returns new (x, y, turns)."""
    actions = np.asarray(actions)
    turns = np.asarray(turns) + (actions == LEFT).astype(np.int64) - (actions == RIGHT).astype(np.int64)
    heading = heading_from_turns(config, turns)
    fwd = actions == FORWARD
    x = np.clip(np.where(fwd, x + config.step_size * np.cos(heading), x), 0.0, config.room_size)
    y = np.clip(np.where(fwd, y + config.step_size * np.sin(heading), y), 0.0, config.room_size)
    return x, y, turns


def ray_offsets(config: EnvConfig) -> np.ndarray:
    width = config.fov / config.n_rays
    return -0.5 * config.fov + (np.arange(config.n_rays) + 0.5) * width


def observe(config: EnvConfig, x, y, heading, positions, kinds) -> np.ndarray:
    """Observations for a batch of agents.

    ``x, y, heading`` have shape (B,); ``positions`` (B, n, 2) and
    ``kinds`` (B, n) describe each agent's landmarks.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    heading = np.atleast_1d(np.asarray(heading, dtype=np.float64))
    R = config.room_size
    if config.obs_mode == "pose":
        return np.stack([2 * x / R - 1, 2 * y / R - 1, np.cos(heading), np.sin(heading)], axis=1)

    B = x.shape[0]
    angles = heading[:, None] + ray_offsets(config)[None, :]  # (B, n_rays)
    dx, dy = np.cos(angles), np.sin(angles)
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(dx > 1e-12, (R - x[:, None]) / dx, np.where(dx < -1e-12, -x[:, None] / dx, np.inf))
        ty = np.where(dy > 1e-12, (R - y[:, None]) / dy, np.where(dy < -1e-12, -y[:, None] / dy, np.inf))
    wall = np.minimum(tx, ty)

    rel = positions - np.stack([x, y], axis=1)[:, None, :]  # (B, n, 2)
    dist = np.linalg.norm(rel, axis=2)
    bearing = np.arctan2(rel[..., 1], rel[..., 0])
    radius = config.landmark_radius * R
    surface = np.maximum(dist - radius, 0.0)
    half = 0.5 * config.fov / config.n_rays + np.arctan2(radius, np.maximum(dist, 1e-12))
    diff = np.abs(np.mod(bearing[:, None, :] - angles[:, :, None] + math.pi, TWO_PI) - math.pi)
    seen = (diff <= half[:, None, :]) & (surface[:, None, :] < wall[:, :, None])
    cand = np.where(seen, surface[:, None, :], np.inf)  # (B, n_rays, n)
    nearest = cand.argmin(axis=2)
    hit = np.isfinite(cand.min(axis=2))
    d = np.where(hit, cand.min(axis=2), wall)
    dist_feat = np.clip(2.0 * d / (R * math.sqrt(2.0)) - 1.0, -1.0, 1.0)

    hit_kind = np.take_along_axis(np.asarray(kinds), nearest, axis=1)  # (B, n_rays)
    onehot = np.zeros((B, config.n_rays, config.n_kinds))
    bi, ri = np.nonzero(hit)
    onehot[bi, ri, hit_kind[bi, ri]] = 1.0
    return np.concatenate([dist_feat[:, :, None], onehot], axis=2).reshape(B, -1)


# single-agent API --------------------------------------------------------------------

def reset(config: EnvConfig, rng: np.random.Generator, layout: Layout | None = None,
          split: str = "train") -> tuple[AgentState, np.ndarray]:
    """Spawn the agent; draws a new layout in random mode unless one is given."""
    if layout is None:
        layout = make_layout(config, rng, split)
    x, y, h = config.spawn
    state = AgentState(x=x, y=y, heading=float(heading_from_turns(config, 0)), t=0, layout=layout)
    return state, observation(config, state)


def observation(config: EnvConfig, state: AgentState) -> np.ndarray:
    return observe(config, state.x, state.y, state.heading,
                   state.layout.positions[None], state.layout.kinds[None])[0]


def step(state: AgentState, action: int, config: EnvConfig) -> tuple[AgentState, np.ndarray, bool]:
    if state.t >= config.horizon:
        raise ValueError("episode already finished; call reset()")
    if action not in (LEFT, RIGHT, FORWARD):
        raise ValueError(f"invalid action {action!r}")
    x, y, turns = move(config, state.x, state.y, state.turns, action)
    new = replace(state, x=float(x), y=float(y), turns=int(turns),
                  heading=float(heading_from_turns(config, turns)), t=state.t + 1)
    return new, observation(config, new), new.t == config.horizon


# test tasks --------------------------------------------------------------------

def test_reward(state_or_xy, task: TestTask):
    """Inverse-distance reward ``1 / (eps + ||p - target||)``; accepts a state or (..., 2) array."""
    if isinstance(state_or_xy, AgentState):
        p = state_or_xy.position
    else:
        p = np.asarray(state_or_xy, dtype=np.float64)
    d = np.linalg.norm(p - np.asarray(task.target_position), axis=-1)
    return 1.0 / (task.reward_eps + d)


def make_test_tasks(config: EnvConfig, rng: np.random.Generator, n_tasks: int | None = None) -> list[TestTask]:
    """One task per landmark (fixed mode) or ``n_tasks`` held-out targets (random mode)."""
    eps = config.reward_eps * config.room_size
    radius = config.success_radius * config.room_size
    if config.layout_mode == "fixed":
        layout = fixed_layout(config)
        return [TestTask(i, tuple(layout.positions[i]), radius, eps, layout)
                for i in range(config.n_landmarks)]
    tasks = []
    for _ in range(config.n_landmarks if n_tasks is None else n_tasks):
        layout = make_layout(config, rng, split="test")
        i = int(rng.integers(config.n_landmarks))
        tasks.append(TestTask(i, tuple(layout.positions[i]), radius, eps, layout))
    return tasks


def random_rollout(config: EnvConfig, layout: Layout, rng: np.random.Generator) -> Trajectory:
    """Uniform-random-action episode in ``layout``."""
    actions = rng.integers(N_ACTIONS, size=config.horizon)
    x, y, h = config.spawn
    turns = 0
    obs, poses = [], []
    for a in actions:
        x, y, turns = move(config, x, y, turns, a)
        heading = float(heading_from_turns(config, turns))
        poses.append((float(x), float(y), heading))
        obs.append(observe(config, x, y, heading, layout.positions[None], layout.kinds[None])[0])
    return Trajectory(np.array(obs), np.array(poses), actions.astype(np.int64))
