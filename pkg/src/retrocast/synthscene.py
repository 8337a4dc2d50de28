"""Procedural multi-agent scenes rendered as temporal BEV feature grids.

Each agent follows an exactly-integrable kinematic model and plants a
Gaussian blob carrying its unit-norm signature vector into every past frame's
grid, at its true position in that frame's ego coordinates. Generation is a
pure function of (config, seed).

Frame convention: grids cover frames t = 0, -1, ..., 1-T_h (one per history
step, current frame included). Ground-truth past trajectories hold T_h
positions at those same frames, expressed in the current (t=0) ego frame, so
``gt_past[0]`` equals the box center. Futures hold T_f positions at
t = +1 .. +T_f, also in the current ego frame.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BoundingBox, SE2Transform, Trajectory, ValidationError

DATASET_MAGIC = "RCDS"
DATASET_VERSION = 1

CLASS_NAMES = ("car", "pedestrian", "static")
CLASS_TO_ID = {name: i for i, name in enumerate(CLASS_NAMES)}


class SceneGenerationError(RuntimeError):
    """Raised when an agent cannot be placed inside the BEV extent."""


class DatasetFormatError(ValueError):
    """Raised on corrupt or incompatible dataset files."""


@dataclass(frozen=True)
class SceneConfig:
    h_cells: int = 64
    w_cells: int = 64
    meters_per_cell: float = 1.0
    feature_dim: int = 64
    t_history: int = 8
    t_future: int = 12
    dt: float = 0.5
    n_agents: int = 6
    noise_std: float = 0.05
    # class mix: static / constant-velocity / constant-turn / stop-and-go
    p_static: float = 0.4
    p_constant_velocity: float = 0.4
    p_constant_turn: float = 0.1
    p_stop_and_go: float = 0.1
    car_speed_range: tuple[float, float] = (2.0, 7.0)
    ped_speed_range: tuple[float, float] = (0.5, 1.8)
    turn_rate_range: tuple[float, float] = (0.12, 0.5)
    ego_speed_max: float = 3.0
    ego_yaw_rate_max: float = 0.08
    spawn_margin: float = 4.0
    max_spawn_retries: int = 80

    def __post_init__(self):
        if self.t_history < 1 or self.t_future < 1:
            raise ValidationError("horizons must be >= 1")
        if self.dt <= 0:
            raise ValidationError("dt must be positive")
        if self.n_agents < 1:
            raise ValidationError("need at least one agent")
        if self.turn_rate_range[1] > 0.5:
            raise ValidationError("turn rate bounded by 0.5 rad/s")

    @property
    def origin(self) -> tuple[float, float]:
        """Ego-frame position of grid cell (0, 0)."""
        return (-(self.h_cells - 1) / 2.0 * self.meters_per_cell,
                -(self.w_cells - 1) / 2.0 * self.meters_per_cell)

    def to_cells(self, pts: np.ndarray) -> np.ndarray:
        """Meters in ego frame -> fractional cell coordinates."""
        return (np.asarray(pts) - np.asarray(self.origin)) / self.meters_per_cell

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class AgentSpec:
    class_id: str
    motion_model: str
    box: BoundingBox
    signature: np.ndarray
    motion_params: dict = field(default_factory=dict)

    def __post_init__(self):
        sig = np.asarray(self.signature, dtype=np.float64)
        norm = np.linalg.norm(sig)
        if not math.isclose(norm, 1.0, rel_tol=1e-9):
            raise ValidationError(f"signature must be unit-norm, got |s|={norm}")
        omega = self.motion_params.get("turn_rate", 0.0)
        if abs(omega) > 0.5:
            raise ValidationError(f"turn rate {omega} exceeds 0.5 rad/s")
        sig.setflags(write=False)
        object.__setattr__(self, "signature", sig)

    @property
    def is_dynamic(self) -> bool:
        return self.motion_model != "static"


@dataclass(frozen=True)
class BEVSequence:
    grids: np.ndarray  # (T_h, H, W, D), grids[j] is frame t = -j
    meters_per_cell: float
    origin: tuple[float, float]

    def __post_init__(self):
        g = np.asarray(self.grids, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise ValidationError("non-finite BEV features")
        object.__setattr__(self, "grids", g)

    @property
    def n_frames(self) -> int:
        return self.grids.shape[0]


@dataclass(frozen=True)
class SceneSample:
    agents: list[AgentSpec]
    ego_motion: list[SE2Transform]  # [i] maps frame -i coords to frame -(i+1)
    gt_past: list[Trajectory]       # T_h steps, frame 0 coords, [0] = center
    gt_future: list[Trajectory]     # T_f steps, frame 0 coords
    bev: BEVSequence | None
    seed: int
    config: SceneConfig

    def past_transforms(self) -> list[SE2Transform]:
        """Chained T_{0->-j} for j = 1 .. T_h-1 (current-frame to frame -j)."""
        out = []
        acc = SE2Transform.identity()
        for step in self.ego_motion:
            acc = step.compose(acc)
            out.append(acc)
        return out


# -- agent kinematics --------------------------------------------------

def _agent_position(params: dict, t: float) -> np.ndarray:
    """Exact position at time t (seconds, 0 = now) in world coordinates."""
    p0 = np.asarray(params["p0"])
    model = params["model"]
    if model == "static":
        return p0.copy()
    heading = params["heading"]
    speed = params["speed"]
    direction = np.array([math.cos(heading), math.sin(heading)])
    if model == "constant_velocity":
        return p0 + speed * t * direction
    if model == "constant_turn":
        omega = params["turn_rate"]
        r = speed / omega
        th = heading + omega * t
        return p0 + r * np.array([math.sin(th) - math.sin(heading),
                                  math.cos(heading) - math.cos(th)])
    if model == "stop_and_go":
        s0, s1 = params["stop_interval"]
        lo, hi = (0.0, t) if t >= 0 else (t, 0.0)
        stalled = max(0.0, min(hi, s1) - max(lo, s0))
        moving = (hi - lo) - stalled
        return p0 + math.copysign(moving, t) * speed * direction
    raise ValueError(f"unknown motion model: {model}")


def _agent_velocity(params: dict) -> np.ndarray:
    """Exact instantaneous velocity at t = 0."""
    model = params["model"]
    if model == "static":
        return np.zeros(2)
    heading, speed = params["heading"], params["speed"]
    direction = np.array([math.cos(heading), math.sin(heading)])
    if model == "stop_and_go":
        s0, s1 = params["stop_interval"]
        if s0 <= 0.0 <= s1:
            return np.zeros(2)
    return speed * direction


def _ego_pose(cfg: SceneConfig, ego: dict, t: float) -> SE2Transform:
    """Ego-frame -> world transform at time t; identity at t = 0."""
    params = {"model": "constant_turn" if abs(ego["yaw_rate"]) > 1e-9 else "constant_velocity",
              "p0": np.zeros(2), "heading": 0.0, "speed": ego["speed"],
              "turn_rate": ego["yaw_rate"]}
    pos = _agent_position(params, t)
    return SE2Transform(ego["yaw_rate"] * t, (pos[0], pos[1]))


# -- rendering ---------------------------------------------------------

def render_bev(states: list[tuple[np.ndarray, np.ndarray, float]],
               cfg: SceneConfig,
               noise_rng: np.random.Generator | None = None) -> np.ndarray:
    """Render one frame: isotropic noise plus one signature blob per agent.

    `states` holds (position in this frame's ego meters, signature, spatial
    std in meters) per agent. Superposition holds by construction.
    """
    H, W, D = cfg.h_cells, cfg.w_cells, cfg.feature_dim
    if noise_rng is not None and cfg.noise_std > 0:
        grid = noise_rng.normal(0.0, cfg.noise_std, (H, W, D))
    else:
        grid = np.zeros((H, W, D))
    for pos, signature, std_m in states:
        cx, cy = cfg.to_cells(pos)
        std_c = std_m / cfg.meters_per_cell
        rad = int(math.ceil(3.5 * std_c))
        i0, i1 = max(0, int(math.floor(cx)) - rad), min(H, int(math.ceil(cx)) + rad + 1)
        j0, j1 = max(0, int(math.floor(cy)) - rad), min(W, int(math.ceil(cy)) + rad + 1)
        if i0 >= i1 or j0 >= j1:
            continue
        ii = np.arange(i0, i1)[:, None]
        jj = np.arange(j0, j1)[None, :]
        w = np.exp(-((ii - cx) ** 2 + (jj - cy) ** 2) / (2.0 * std_c ** 2))
        grid[i0:i1, j0:j1] += w[:, :, None] * signature
    return grid


# -- scene generation --------------------------------------------------

def _sample_agent(cfg: SceneConfig, rng: np.random.Generator,
                  extent: float, times: np.ndarray) -> AgentSpec | None:
    """Draw one agent whose full trajectory fits the extent, or None.

    The trajectory is generated around the origin first and then translated
    into a feasible spawn window, so fast agents are not rejection-biased
    toward the static class.
    """
    u = rng.random()
    if u < cfg.p_static:
        model = "static"
    elif u < cfg.p_static + cfg.p_constant_velocity:
        model = "constant_velocity"
    elif u < cfg.p_static + cfg.p_constant_velocity + cfg.p_constant_turn:
        model = "constant_turn"
    else:
        model = "stop_and_go"

    if model == "static":
        class_id = "static"
    elif model == "constant_turn":
        class_id = "car"
    elif model == "stop_and_go":
        class_id = "pedestrian"
    else:
        class_id = "car" if rng.random() < 0.5 else "pedestrian"

    span_time = float(times.max() - times.min())
    if class_id == "pedestrian":
        size = (0.6 + 0.2 * rng.random(), 0.6 + 0.2 * rng.random(), 1.7)
        lo_v, hi_v = cfg.ped_speed_range
    else:
        size = (1.8 + 0.4 * rng.random(), 4.0 + 1.0 * rng.random(), 1.6)
        lo_v, hi_v = cfg.car_speed_range
    # cap speed so a straight run over the full window can still fit
    hi_v = min(hi_v, 1.8 * extent / max(span_time, 1e-9))
    speed = rng.uniform(lo_v, max(lo_v, hi_v)) if model != "static" else 0.0

    heading = rng.uniform(-math.pi, math.pi)
    params = {"model": model, "p0": np.zeros(2), "heading": heading, "speed": speed}
    if model == "constant_turn":
        omega = rng.uniform(*cfg.turn_rate_range) * (1 if rng.random() < 0.5 else -1)
        params["turn_rate"] = omega
    if model == "stop_and_go":
        past_span = (cfg.t_history - 1) * cfg.dt
        start = rng.uniform(-past_span, -cfg.dt)
        duration = rng.uniform(2 * cfg.dt, 5 * cfg.dt)
        params["stop_interval"] = (start, start + duration)

    rel = np.array([_agent_position(params, t) for t in times])
    lo, hi = rel.min(axis=0), rel.max(axis=0)
    low_bound = -extent - lo
    high_bound = extent - hi
    if np.any(high_bound < low_bound):
        return None
    p0 = rng.uniform(low_bound, high_bound)
    params["p0"] = p0

    vel = _agent_velocity(params)
    box = BoundingBox(center=(p0[0], p0[1], 0.0), size=size,
                      yaw=heading, velocity=(vel[0], vel[1]))
    sig = rng.normal(0.0, 1.0, cfg.feature_dim)
    sig /= np.linalg.norm(sig)
    return AgentSpec(class_id=class_id, motion_model=model, box=box,
                     signature=sig, motion_params=params)


def generate_scene(cfg: SceneConfig, seed: int, render: bool = True) -> SceneSample:
    """Deterministically build one scene from (cfg, seed)."""
    rng = np.random.default_rng([int(seed), 1])
    ego = {"speed": rng.uniform(0.0, cfg.ego_speed_max),
           "yaw_rate": rng.uniform(-cfg.ego_yaw_rate_max, cfg.ego_yaw_rate_max)}

    half = (min(cfg.h_cells, cfg.w_cells) - 1) / 2.0 * cfg.meters_per_cell
    extent = half - cfg.spawn_margin
    past_times = [-j * cfg.dt for j in range(cfg.t_history)]
    future_times = [k * cfg.dt for k in range(1, cfg.t_future + 1)]
    inv_poses = [_ego_pose(cfg, ego, t).invert() for t in past_times]

    all_times = np.array(past_times + future_times)
    agents, gt_past, gt_future = [], [], []
    for _ in range(cfg.n_agents):
        for attempt in range(cfg.max_spawn_retries + 1):
            agent = _sample_agent(cfg, rng, extent, all_times)
            if agent is None:
                continue
            world_past = np.array([_agent_position(agent.motion_params, t)
                                   for t in past_times])
            world_future = np.array([_agent_position(agent.motion_params, t)
                                     for t in future_times])
            in_frames = all(
                np.all(np.abs(inv.apply(p)) <= half)
                for inv, p in zip(inv_poses, world_past)
            )
            if in_frames and np.all(np.abs(world_future) <= half):
                break
        else:
            raise SceneGenerationError(
                f"could not place agent inside BEV extent after "
                f"{cfg.max_spawn_retries} retries (seed {seed})"
            )
        agents.append(agent)
        gt_past.append(Trajectory(world_past, cfg.dt))
        gt_future.append(Trajectory(world_future, cfg.dt))

    ego_motion = []
    for i in range(cfg.t_history - 1):
        step = inv_poses[i + 1].compose(_ego_pose(cfg, ego, past_times[i]))
        ego_motion.append(step)

    bev = None
    if render:
        grids = []
        for j, (t, inv) in enumerate(zip(past_times, inv_poses)):
            states = []
            for agent, past in zip(agents, gt_past):
                pos = inv.apply(past.positions[j])
                states.append((pos, agent.signature, agent.box.diagonal_xy / 2.0))
            noise_rng = np.random.default_rng([int(seed), 2, j])
            grids.append(render_bev(states, cfg, noise_rng))
        bev = BEVSequence(np.stack(grids), cfg.meters_per_cell, cfg.origin)

    return SceneSample(agents=agents, ego_motion=ego_motion, gt_past=gt_past,
                       gt_future=gt_future, bev=bev, seed=int(seed), config=cfg)


# -- dataset persistence ----------------------------------------------

def serialize_dataset(cfg: SceneConfig, seeds: list[int], path) -> None:
    """Persist (cfg, seed) pairs only; grids are regenerated on load."""
    header = {"magic": DATASET_MAGIC, "version": DATASET_VERSION,
              "cfg": asdict(cfg), "cfg_hash": cfg.hash(), "n_scenes": len(seeds)}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in seeds:
            fh.write(json.dumps({"seed": int(s)}) + "\n")


def read_dataset_header(path) -> tuple[SceneConfig, list[int]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: corrupt header") from exc
    if header.get("magic") != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {header.get('magic')!r}")
    if header.get("version") != DATASET_VERSION:
        raise DatasetFormatError(
            f"{path}: version {header.get('version')}, expected {DATASET_VERSION}"
        )
    cfg_dict = dict(header["cfg"])
    for key in ("car_speed_range", "ped_speed_range", "turn_rate_range"):
        cfg_dict[key] = tuple(cfg_dict[key])
    cfg = SceneConfig(**cfg_dict)
    if cfg.hash() != header.get("cfg_hash"):
        raise DatasetFormatError(f"{path}: cfg hash mismatch")
    seeds = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            seeds.append(int(json.loads(line)["seed"]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetFormatError(f"{path}: bad record on line {i}") from exc
    if len(seeds) != header["n_scenes"]:
        raise DatasetFormatError(
            f"{path}: header says {header['n_scenes']} scenes, found {len(seeds)}"
        )
    return cfg, seeds


def load_dataset(path, render: bool = True) -> list[SceneSample]:
    cfg, seeds = read_dataset_header(path)
    return [generate_scene(cfg, s, render=render) for s in seeds]
