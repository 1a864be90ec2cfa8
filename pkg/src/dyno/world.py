"""Procedurally generated multi-object 2D environment with ground-truth masks.

Each level seeds 2-5 flat-colored sprites (exactly one agent, one target,
optional hazards/neutrals) on a flat background.  The agent moves 3 px per
action step; everything else drifts at constant velocity with reflecting
walls.  Reaching the target ends the episode with reward +1, touching a
hazard with -1, and step 64 truncates with reward 0.  Sprite colors stay
fixed for the whole episode while positions change - that split is the
ground truth the probing suite leans on.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import derive_seed, read_blob, write_blob

ACTIONS = ("noop", "up", "down", "left", "right")
ACTION_ARITY = len(ACTIONS)
ACTION_DELTAS = {0: (0.0, 0.0), 1: (0.0, -3.0), 2: (0.0, 3.0), 3: (-3.0, 0.0), 4: (3.0, 0.0)}
AGENT_SPEED = 3.0
MAX_STEPS = 64
ROLES = ("agent", "target", "hazard", "neutral")
SHAPES = ("square", "disc", "triangle")

DATASET_VERSION = 1


@dataclass(frozen=True)
class Sprite:
    id: int
    role: str
    x: float
    y: float
    vx: float
    vy: float
    color: tuple
    shape: str
    radius: float


@dataclass(frozen=True)
class WorldState:
    sprites: tuple
    step_index: int
    level_seed: int
    size: int
    background: tuple


@dataclass(frozen=True)
class Transition:
    observation: np.ndarray  # H x W x 3 float32 in [0,1], frame after the step
    action: int
    reward: float
    done: bool
    gt_mask: np.ndarray  # H x W int labels, 0 = background


@dataclass
class Episode:
    obs: np.ndarray      # (L+1, H, W, 3) float32; obs[t] precedes actions[t]
    actions: np.ndarray  # (L,) int64
    rewards: np.ndarray  # (L,) float32
    dones: np.ndarray    # (L,) bool
    masks: np.ndarray    # (L+1, H, W) int64

    @property
    def length(self):
        return len(self.actions)


@dataclass
class Dataset:
    version: int
    episodes: list
    image_hw: int
    action_arity: int
    seed: int
    lengths: list = field(default_factory=list)

    @property
    def num_transitions(self):
        return int(sum(self.lengths))

    def manifest(self):
        return {
            "version": self.version,
            "episodes": len(self.episodes),
            "image_hw": self.image_hw,
            "action_arity": self.action_arity,
            "seed": self.seed,
            "lengths": list(map(int, self.lengths)),
        }


def _reflect(pos, lo, hi):
    """Mirror a coordinate into [lo, hi]; returns (pos, flipped)."""
    flipped = False
    while pos < lo or pos > hi:
        if pos < lo:
            pos = 2 * lo - pos
        else:
            pos = 2 * hi - pos
        flipped = not flipped
    return pos, flipped


def reset(level_seed, size=64):
    """Deterministic level layout from the seed; sprites spawn non-overlapping."""
    rng = np.random.default_rng(derive_seed(level_seed, "synthworld.reset"))
    n_sprites = int(rng.integers(2, 6))
    background = tuple(rng.uniform(0.02, 0.22, size=3).round(4))

    sprites = []
    for i in range(n_sprites):
        if i == 0:
            role = "agent"
        elif i == 1:
            role = "target"
        else:
            role = str(rng.choice(["hazard", "neutral"]))
        radius = float(rng.integers(3, 8))
        for _ in range(256):
            x = float(rng.uniform(radius + 1, size - radius - 2))
            y = float(rng.uniform(radius + 1, size - radius - 2))
            if all((x - s.x) ** 2 + (y - s.y) ** 2 > (radius + s.radius + 1.0) ** 2 for s in sprites):
                break
        else:
            raise RuntimeError(f"level {level_seed}: could not place sprite {i} without overlap")
        if role == "agent":
            vx = vy = 0.0
        else:
            vx, vy = (float(v) for v in rng.uniform(-2.0, 2.0, size=2))
        color = tuple(rng.uniform(0.3, 1.0, size=3).round(4))
        shape = str(rng.choice(SHAPES))
        sprites.append(Sprite(i + 1, role, x, y, vx, vy, color, shape, radius))
    return WorldState(tuple(sprites), 0, int(level_seed), size, background)


def _overlaps(a, b):
    return (a.x - b.x) ** 2 + (a.y - b.y) ** 2 <= (a.radius + b.radius) ** 2


def step(state, action):
    """Advance one tick; returns (next_state, Transition with the new frame)."""
    if not 0 <= int(action) < ACTION_ARITY:
        raise ValueError(f"action {action} outside 0..{ACTION_ARITY - 1}")
    action = int(action)
    size = state.size
    moved = []
    for s in state.sprites:
        if s.role == "agent":
            dx, dy = ACTION_DELTAS[action]
            x, _ = _reflect(s.x + dx, s.radius, size - 1 - s.radius)
            y, _ = _reflect(s.y + dy, s.radius, size - 1 - s.radius)
            moved.append(replace(s, x=x, y=y))
        else:
            x, fx = _reflect(s.x + s.vx, s.radius, size - 1 - s.radius)
            y, fy = _reflect(s.y + s.vy, s.radius, size - 1 - s.radius)
            moved.append(replace(s, x=x, y=y, vx=-s.vx if fx else s.vx, vy=-s.vy if fy else s.vy))

    agent = moved[0]
    reward, done = 0.0, False
    for s in moved[1:]:
        if s.role == "target" and _overlaps(agent, s):
            reward, done = 1.0, True
            break
        if s.role == "hazard" and _overlaps(agent, s):
            reward, done = -1.0, True
            break
    next_index = state.step_index + 1
    if not done and next_index >= MAX_STEPS:
        done = True  # truncation, reward stays 0
    next_state = WorldState(tuple(moved), next_index, state.level_seed, size, state.background)
    obs, mask = render(next_state)
    return next_state, Transition(obs, action, reward, done, mask)


def _coverage(sprite, size):
    yy, xx = np.mgrid[0:size, 0:size]
    dx = xx - sprite.x
    dy = yy - sprite.y
    r = sprite.radius
    if sprite.shape == "disc":
        return dx * dx + dy * dy <= r * r
    if sprite.shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    # triangle: apex at the top, base at the bottom of the bounding box
    top = sprite.y - r
    return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (yy - top) / 2.0)


def render(state):
    """Flat-shaded frame plus the id-labeled pixel partition.

    Sprites are painted back-to-front by id, so the mask always names the
    topmost sprite at each pixel.
    """
    size = state.size
    obs = np.empty((size, size, 3), dtype=np.float32)
    obs[:] = np.asarray(state.background, dtype=np.float32)
    mask = np.zeros((size, size), dtype=np.int64)
    for sprite in sorted(state.sprites, key=lambda s: s.id):
        cover = _coverage(sprite, size)
        obs[cover] = np.asarray(sprite.color, dtype=np.float32)
        mask[cover] = sprite.id
    return obs, mask


def scripted_action(state, rng, explore=0.2):
    """Chase policy: head for the target along the larger displacement axis,
    with an exploration coin flip."""
    if rng.uniform() < explore:
        return int(rng.integers(0, ACTION_ARITY))
    agent = state.sprites[0]
    target = next((s for s in state.sprites if s.role == "target"), None)
    if target is None:
        return 0
    dx = target.x - agent.x
    dy = target.y - agent.y
    if abs(dx) >= abs(dy):
        return 4 if dx > 0 else 3
    return 2 if dy > 0 else 1


def random_action(state, rng):
    return int(rng.integers(0, ACTION_ARITY))


POLICIES = {"scripted": scripted_action, "random": random_action}


def play_episode(level_seed, policy, policy_seed, size=64, max_steps=MAX_STEPS):
    state = reset(level_seed, size=size)
    rng = np.random.default_rng(derive_seed(policy_seed, "synthworld.policy"))
    obs0, mask0 = render(state)
    obs = [obs0]
    masks = [mask0]
    actions, rewards, dones = [], [], []
    for _ in range(max_steps):
        action = policy(state, rng)
        state, tr = step(state, action)
        obs.append(tr.observation)
        masks.append(tr.gt_mask)
        actions.append(tr.action)
        rewards.append(tr.reward)
        dones.append(tr.done)
        if tr.done:
            break
    return Episode(
        obs=np.stack(obs),
        actions=np.asarray(actions, dtype=np.int64),
        rewards=np.asarray(rewards, dtype=np.float32),
        dones=np.asarray(dones, dtype=bool),
        masks=np.stack(masks),
    )


def _worker_count():
    raw = os.environ.get("DYNO_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def collect(policy, episodes, seed, size=64, max_steps=MAX_STEPS):
    """Roll out ``episodes`` seed-isolated episodes; byte-reproducible from seed."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if isinstance(policy, str):
        policy = POLICIES[policy]

    def run(i):
        return play_episode(
            level_seed=derive_seed(seed, "synthworld.level", i),
            policy=policy,
            policy_seed=derive_seed(seed, "synthworld.policy", i),
            size=size,
            max_steps=max_steps,
        )

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            eps = list(pool.map(run, range(episodes)))
    else:
        eps = [run(i) for i in range(episodes)]
    return Dataset(
        version=DATASET_VERSION,
        episodes=eps,
        image_hw=size,
        action_arity=ACTION_ARITY,
        seed=int(seed),
        lengths=[ep.length for ep in eps],
    )


# -- disk layout: manifest.json + one blob per field per episode ----------------

_EP_FIELDS = ("obs", "actions", "rewards", "dones", "masks")


def save_dataset(dataset, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    manifest = dataset.manifest()
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for i, ep in enumerate(dataset.episodes):
        stem = os.path.join(out_dir, f"ep{i:05d}")
        write_blob(f"{stem}.obs.blob", ep.obs.astype(np.float32))
        write_blob(f"{stem}.actions.blob", ep.actions.astype(np.float32))
        write_blob(f"{stem}.rewards.blob", ep.rewards.astype(np.float32))
        write_blob(f"{stem}.dones.blob", ep.dones.astype(np.float32))
        write_blob(f"{stem}.masks.blob", ep.masks.astype(np.float32))


def load_dataset(in_dir):
    with open(os.path.join(in_dir, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest["version"] != DATASET_VERSION:
        raise ValueError(f"dataset version {manifest['version']} unsupported")
    episodes = []
    for i in range(manifest["episodes"]):
        stem = os.path.join(in_dir, f"ep{i:05d}")
        episodes.append(Episode(
            obs=read_blob(f"{stem}.obs.blob"),
            actions=read_blob(f"{stem}.actions.blob").astype(np.int64),
            rewards=read_blob(f"{stem}.rewards.blob"),
            dones=read_blob(f"{stem}.dones.blob").astype(bool),
            masks=read_blob(f"{stem}.masks.blob").astype(np.int64),
        ))
    ds = Dataset(
        version=manifest["version"],
        episodes=episodes,
        image_hw=manifest["image_hw"],
        action_arity=manifest["action_arity"],
        seed=manifest["seed"],
        lengths=manifest["lengths"],
    )
    if ds.num_transitions != sum(ep.length for ep in episodes):
        raise ValueError("manifest lengths disagree with stored episodes")
    return ds


def frame_index(dataset):
    """All (episode, t) pairs addressing frames, terminal frames included."""
    return [(e, t) for e, ep in enumerate(dataset.episodes) for t in range(ep.length + 1)]
