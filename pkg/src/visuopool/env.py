"""Token-world reaching task.

A frozen, seeded "encoder" writes an agent, a goal and a tabletop texture into
an H x W grid of D-dimensional patch tokens. The agent knows its own position
(proprioception); the goal is only visible through the tokens. Goals sit on
cell centres. Lighting and
texture perturbations shift the tokens the way scene changes shift frozen
visual features.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .pooling import grid_coords

N_TEXTURES = 30
N_DISTRACTORS = 16
MAX_DISTRACTOR_CELLS = 6
_NUISANCE_TAG = 0x5E45


@dataclass(frozen=True)
class EnvConfig:
    height: int = 8
    width: int = 8
    dim: int = 64
    horizon: int = 60
    max_horizon: int = 175
    success_radius: float = 0.05
    gain: float = 2.5
    step_scale: float = 0.05
    texture_scale: float = 0.5
    distractor_scale: float = 1.5
    pos_code_norm: float = 0.1
    position_gain: float = 2.0
    nuisance_scale: float = 0.005
    goal_on_cells: bool = True
    master_seed: int = 0

    def __post_init__(self):
        if not 0 < self.horizon <= self.max_horizon:
            raise ValueError(f"horizon {self.horizon} outside (0, {self.max_horizon}]")


@dataclass(frozen=True)
class WorldState:
    agent_pos: tuple[float, float]
    goal_pos: tuple[float, float]
    t: int = 0

    def __post_init__(self):
        object.__setattr__(self, "agent_pos", tuple(float(v) for v in np.clip(self.agent_pos, -1, 1)))
        object.__setattr__(self, "goal_pos", tuple(float(v) for v in np.clip(self.goal_pos, -1, 1)))

    @property
    def distance(self) -> float:
        return float(np.hypot(*(np.subtract(self.goal_pos, self.agent_pos))))


@dataclass(frozen=True)
class SceneConfig:
    texture_id: int = 0
    diffuse: tuple[float, float, float] = (1.0, 1.0, 1.0)
    specular: float = 0.0
    direction: tuple[float, float] = (0.0, 0.0)
    distractor_cells: tuple[tuple[int, int], ...] = ()  # (flat cell index, distractor id)
    seed: int = 0

    @property
    def in_domain(self) -> bool:
        return (self.texture_id == 0 and tuple(self.diffuse) == (1.0, 1.0, 1.0)
                and self.specular == 0 and tuple(self.direction) == (0.0, 0.0)
                and not self.distractor_cells)

    def to_dict(self) -> dict:
        return {"texture_id": self.texture_id, "diffuse": list(self.diffuse),
                "specular": self.specular, "direction": list(self.direction),
                "distractor_cells": [list(c) for c in self.distractor_cells], "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(int(d["texture_id"]), tuple(d["diffuse"]), float(d["specular"]),
                   tuple(d["direction"]), tuple(tuple(int(v) for v in c) for c in d["distractor_cells"]),
                   int(d["seed"]))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass
class SignatureBank:
    """Every fixed vector the frozen encoder uses, drawn once from ``master_seed``.

    The entity signatures (agent, goal, their x/y coordinate directions and the
    specular light direction) form an orthonormal set. Texture signatures are
    redrawn until every pair among agent, goal and textures has |cos| < 0.5.
    """

    agent_sig: np.ndarray
    goal_sig: np.ndarray
    agent_xy: np.ndarray  # (2, D)
    goal_xy: np.ndarray  # (2, D)
    light_dir_sig: np.ndarray
    texture_sigs: np.ndarray  # (30, D)
    distractor_sigs: np.ndarray  # (16, D)
    pos_codes: np.ndarray  # (H*W, D)

    @classmethod
    def create(cls, config: EnvConfig = EnvConfig()) -> "SignatureBank":
        d = config.dim
        rng = np.random.default_rng([config.master_seed, 0xBA2C])
        q, _ = np.linalg.qr(rng.normal(size=(d, 7)))
        entity = q.T  # 7 orthonormal rows
        agent, goal = entity[0], entity[1]
        textures = _unit(rng.normal(size=(N_TEXTURES, d)))
        for _ in range(1000):
            sigs = np.vstack([agent, goal, textures])
            cos = np.abs(sigs @ sigs.T)
            np.fill_diagonal(cos, 0.0)
            bad = np.flatnonzero((cos[2:] >= 0.5).any(axis=1))
            if bad.size == 0:
                break
            textures[bad[0]] = _unit(rng.normal(size=d))
        else:  # pragma: no cover - needs a pathological dimension
            raise RuntimeError("could not draw well-separated texture signatures")
        distractors = _unit(rng.normal(size=(N_DISTRACTORS, d)))
        pos = _unit(rng.normal(size=(config.height * config.width, d))) * config.pos_code_norm
        return cls(agent, goal, entity[2:4], entity[4:6], entity[6], textures, distractors, pos)


def bump_weights(pos, height: int, width: int) -> np.ndarray:
    """Bilinear occupancy of a continuous position over the 4 nearest cell centres.

    Cell centres sit at ``grid_coords``; the result is an (H, W) array that is
    nonnegative and sums to 1.
    """
    x, y = float(pos[0]), float(pos[1])
    out = np.zeros((height, width))
    u = (x + 1.0) * 0.5 * (width - 1)
    v = (y + 1.0) * 0.5 * (height - 1)
    j0 = min(int(np.floor(u)), width - 2)
    i0 = min(int(np.floor(v)), height - 2)
    fu, fv = u - j0, v - i0
    out[i0, j0] = (1 - fv) * (1 - fu)
    out[i0, j0 + 1] = (1 - fv) * fu
    out[i0 + 1, j0] = fv * (1 - fu)
    out[i0 + 1, j0 + 1] = fv * fu
    return out


def _channel_thirds(dim: int) -> list[np.ndarray]:
    return np.array_split(np.arange(dim), 3)


def specular_weights(direction, height: int, width: int) -> np.ndarray:
    """Highlight strength per cell: a ramp across the table along ``direction``, in [0, 1]."""
    xs, ys = grid_coords(width), grid_coords(height)
    ramp = direction[0] * xs[None, :] + direction[1] * ys[:, None]
    return np.clip(0.5 + 0.25 * ramp, 0.0, 1.0)


def render_tokens(state: WorldState, scene: SceneConfig, bank: SignatureBank,
                  config: EnvConfig = EnvConfig()) -> np.ndarray:
    """(H, W, D) token grid for one state under one scene.

    Each entity adds ``bump * (signature + position_gain * code . xy_dirs)`` to
    the cells it overlaps. The agent's code is its own position; the goal's is
    its offset from the agent, as an end-effector camera would see it. Bilinear
    bumps sum to 1, so the mean token is linear in both codes.

    Besides the scene terms every token carries i.i.d. Gaussian nuisance of
    std ``nuisance_scale``, drawn from a generator keyed on ``(scene.seed,
    state.t)``, so the grid is still a pure function of its arguments.
    """
    h, w, d = config.height, config.width, config.dim
    background = np.broadcast_to(config.texture_scale * bank.texture_sigs[scene.texture_id],
                                 (h * w, d)).copy()
    for cell, did in scene.distractor_cells:
        background[cell] = config.distractor_scale * bank.distractor_sigs[did]
    tokens = (background + bank.pos_codes).reshape(h, w, d)
    offset = np.subtract(state.goal_pos, state.agent_pos)
    for pos, code, sig, xy in ((state.agent_pos, state.agent_pos, bank.agent_sig, bank.agent_xy),
                               (state.goal_pos, offset, bank.goal_sig, bank.goal_xy)):
        bump = bump_weights(pos, h, w)[..., None]
        located = sig + config.position_gain * (code[0] * xy[0] + code[1] * xy[1])
        tokens = tokens + bump * located
    if config.nuisance_scale:
        noise = np.random.default_rng([_NUISANCE_TAG, scene.seed, state.t])
        tokens = tokens + config.nuisance_scale * noise.standard_normal((h, w, d))
    if tuple(scene.diffuse) != (1.0, 1.0, 1.0):
        gain = np.empty(d)
        for k, idx in enumerate(_channel_thirds(d)):
            gain[idx] = scene.diffuse[k]
        tokens = tokens * gain
    if scene.specular:
        spec = specular_weights(scene.direction, h, w)
        tokens = tokens + scene.specular * spec[..., None] * bank.light_dir_sig
    return tokens


def task_mask(state: WorldState, config: EnvConfig = EnvConfig()) -> np.ndarray:
    """Cells touched by the agent's or the goal's bilinear bump."""
    h, w = config.height, config.width
    return (bump_weights(state.agent_pos, h, w) > 0) | (bump_weights(state.goal_pos, h, w) > 0)


def expert_action(state: WorldState, config: EnvConfig = EnvConfig()) -> np.ndarray:
    delta = np.subtract(state.goal_pos, state.agent_pos)
    return np.clip(config.gain * delta, -1.0, 1.0)


def step(state: WorldState, action, config: EnvConfig = EnvConfig()) -> WorldState:
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    pos = np.clip(np.add(state.agent_pos, config.step_scale * a), -1.0, 1.0)
    return WorldState(tuple(pos), state.goal_pos, state.t + 1)


def is_success(state: WorldState, config: EnvConfig = EnvConfig()) -> bool:
    return state.distance <= config.success_radius


def sample_episode_start(rng: np.random.Generator, config: EnvConfig = EnvConfig()) -> WorldState:
    """Uniform start, goal at a uniformly chosen cell centre (or anywhere, if
    ``goal_on_cells`` is off); redrawn until the agent starts outside the success radius."""
    xs, ys = grid_coords(config.width), grid_coords(config.height)
    while True:
        agent = rng.uniform(-1.0, 1.0, 2)
        if config.goal_on_cells:
            goal = np.array([xs[rng.integers(config.width)], ys[rng.integers(config.height)]])
        else:
            goal = rng.uniform(-1.0, 1.0, 2)
        state = WorldState(tuple(agent), tuple(goal), 0)
        if not is_success(state, config):
            return state


@dataclass
class Demonstration:
    proprio: np.ndarray  # (T, 2)
    tokens: np.ndarray  # (T, H, W, D)
    actions: np.ndarray  # (T, 2)
    timesteps: np.ndarray  # (T,)
    seed: int
    scene: SceneConfig = field(default_factory=SceneConfig)
    goal: tuple[float, float] = (0.0, 0.0)
    final_agent: tuple[float, float] = (0.0, 0.0)

    def __len__(self) -> int:
        return len(self.timesteps)

    @property
    def final_distance(self) -> float:
        return float(np.hypot(*np.subtract(self.goal, self.final_agent)))


def rollout_expert(start: WorldState, scene: SceneConfig, bank: SignatureBank,
                   config: EnvConfig, seed: int) -> Demonstration:
    state = start
    proprio, tokens, actions, ts = [], [], [], []
    while state.t < config.horizon and not is_success(state, config):
        a = expert_action(state, config)
        proprio.append(state.agent_pos)
        tokens.append(render_tokens(state, scene, bank, config))
        actions.append(a)
        ts.append(state.t)
        state = step(state, a, config)
    return Demonstration(np.array(proprio).reshape(-1, 2),
                         np.array(tokens).reshape(-1, config.height, config.width, config.dim),
                         np.array(actions).reshape(-1, 2), np.array(ts, dtype=np.int64),
                         seed, scene, start.goal_pos, state.agent_pos)


def generate_demos(n: int, horizon: int | None = None, seed: int = 0,
                   config: EnvConfig = EnvConfig(), bank: SignatureBank | None = None
                   ) -> list[Demonstration]:
    """``n`` in-domain expert episodes; each ends on success or at the horizon."""
    if n < 1:
        raise ValueError("need at least one demonstration")
    if horizon is not None:
        config = replace(config, horizon=horizon)
    bank = bank or SignatureBank.create(config)
    demos = []
    for i in range(n):
        ep_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        start = sample_episode_start(np.random.default_rng(ep_seed), config)
        demos.append(rollout_expert(start, SceneConfig(seed=ep_seed), bank, config, ep_seed))
    return demos


def perturb_lighting(scene: SceneConfig, seed: int) -> SceneConfig:
    """Diffuse RGB in [0.3, 1.0], specular in [0.1, 0.5], light direction in [-1, 1]^2."""
    rng = np.random.default_rng([seed, 0x11647])
    diffuse = tuple(float(v) for v in rng.uniform(0.3, 1.0, 3))
    specular = float(rng.uniform(0.1, 0.5))
    direction = tuple(float(v) for v in rng.uniform(-1.0, 1.0, 2))
    return replace(scene, diffuse=diffuse, specular=specular, direction=direction, seed=seed)


def perturb_texture(scene: SceneConfig, seed: int, n_cells: int = 64) -> SceneConfig:
    """One of the 29 non-training textures plus 0-6 high-norm distractor cells."""
    rng = np.random.default_rng([seed, 0x7E47])
    texture_id = int(rng.integers(1, N_TEXTURES))
    count = int(rng.integers(0, MAX_DISTRACTOR_CELLS + 1))
    cells = rng.choice(n_cells, size=count, replace=False)
    ids = rng.integers(0, N_DISTRACTORS, size=count)
    distractors = tuple(sorted((int(c), int(k)) for c, k in zip(cells, ids)))
    return replace(scene, texture_id=texture_id, distractor_cells=distractors, seed=seed)
