"""Synthetic multi-view tabletop world with exact ground truth.

An agent moves on the square arena [-1, 1]^2, can close a gripper and drag an
object, while a distractor orbits the arena on its own.  Each trajectory is
filmed by several pinhole cameras; an observation is a seeded smooth lift of
the projected scene points, so ``O = g(S, V)`` holds exactly.

Datasets are written as three sibling files::

    <name>.manifest   key:value text
    <name>.obs        float32 LE, (records, views, 2, d_obs)
    <name>.hidden     float32 LE, one fixed-size row of labels per record

Training code only ever needs :func:`load_observations`, which never opens the
``.hidden`` file.
"""

from __future__ import annotations

import functools
import hashlib
import math
import os
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
ACTION_DIM = 7
GRIP_DIM = 6  # gripper command lives in the last of the seven slots
STATE_DIM = 6  # agent x, agent y, grip, object x, object y, distractor phase
POSE_DIM = 7  # position (3) + quaternion (w, x, y, z)
FORMAT_VERSION = "mvplam-dataset-1"

LIFT_SEED = 20240917
FOCAL = 1.6
GRASP_RADIUS = 0.15
DISTRACTOR_RADIUS = 0.75
DISTRACTOR_HEIGHT = 0.25
# rigid markers on the agent body, offsets from its base point
AGENT_MARKERS = np.array(
    [[0.2, 0.0, 0.1], [-0.2, 0.0, 0.1], [0.0, 0.2, 0.1], [0.0, -0.2, 0.1]]
)
GRIP_GAIN = 0.3  # weight of the direct gripper channel in the lift input
LANDMARKS = np.array(
    [[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [1.0, 1.0, 0.0], [-1.0, 1.0, 0.0], [0.0, 0.0, 0.6]]
)


def _f32(x) -> np.ndarray:
    """Round to the nearest float32, returned as float64."""
    return np.asarray(x, dtype=np.float64).astype(np.float32).astype(np.float64)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


# -- quaternions (w, x, y, z) ---------------------------------------------------


def quat_mul(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hamilton product ``p ⊗ q``."""
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return np.array([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ])


def quat_from_axis_angle(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    angle = float(np.linalg.norm(theta))
    if angle == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = theta / angle
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(r: np.ndarray) -> np.ndarray:
    # Shepperd's method, branch on the largest diagonal term
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q = q if q[0] >= 0 else -q
    return q / np.linalg.norm(q)


# -- domain types ---------------------------------------------------------------


@dataclass(frozen=True)
class WorldState:
    agent_pos: tuple[float, float]
    agent_grip: float
    object_pos: tuple[float, float]
    distractor_phase: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([*self.agent_pos, self.agent_grip, *self.object_pos, self.distractor_phase])

    @classmethod
    def from_array(cls, x) -> "WorldState":
        x = np.asarray(x, dtype=np.float64)
        return cls((float(x[0]), float(x[1])), float(x[2]), (float(x[3]), float(x[4])), float(x[5]))


@dataclass(frozen=True)
class ActionVec:
    """Per-step control padded to the 7-slot layout ``[dx, dy, 0, 0, 0, 0, grip]``."""

    delta: tuple[float, float]
    grip_cmd: float = 0.0

    def to_array(self) -> np.ndarray:
        a = np.zeros(ACTION_DIM)
        a[:2] = self.delta
        a[GRIP_DIM] = self.grip_cmd
        return a

    @classmethod
    def from_array(cls, a) -> "ActionVec":
        a = np.asarray(a, dtype=np.float64)
        return cls((float(a[0]), float(a[1])), float(a[GRIP_DIM]))


@dataclass(frozen=True)
class CameraPose:
    position: tuple[float, float, float]
    orientation: tuple[float, float, float, float]  # unit quaternion, camera-to-world

    def __post_init__(self):
        q = np.asarray(self.orientation, dtype=np.float64)
        norm = float(np.linalg.norm(q))
        if norm == 0.0:
            raise ValueError("zero quaternion")
        if abs(norm - 1.0) > 1e-9:
            object.__setattr__(self, "orientation", tuple(float(c) for c in q / norm))

    def to_array(self) -> np.ndarray:
        return np.array([*self.position, *self.orientation])

    @classmethod
    def from_array(cls, x) -> "CameraPose":
        x = np.asarray(x, dtype=np.float64)
        return cls(tuple(float(c) for c in x[:3]), tuple(float(c) for c in x[3:7]))

    @classmethod
    def look_at(cls, position, target=(0.0, 0.0, 0.0)) -> "CameraPose":
        position = np.asarray(position, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - position
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, [0.0, 0.0, 1.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd], axis=1)
        return cls(tuple(position), tuple(quat_from_matrix(rot)))


@dataclass(frozen=True)
class TransitionRecord:
    """One synchronized transition seen from every camera of its trajectory."""

    view_ids: tuple[int, ...]
    o_t: np.ndarray  # (views, d_obs)
    o_next: np.ndarray  # (views, d_obs)
    s_t: WorldState | None = None
    s_next: WorldState | None = None
    actions_raw: np.ndarray | None = None  # (H, 7) per-step raw actions
    poses: tuple[CameraPose, ...] | None = None  # camera of o_t, per view
    poses_next: tuple[CameraPose, ...] | None = None  # camera of o_next, per view
    stride: int = 1

    @property
    def views(self) -> list[tuple[int, np.ndarray, np.ndarray]]:
        return [(v, self.o_t[i], self.o_next[i]) for i, v in enumerate(self.view_ids)]

    @property
    def a_net_raw(self) -> np.ndarray | None:
        if self.actions_raw is None:
            return None
        net = self.actions_raw.sum(axis=0)
        net[GRIP_DIM] = self.actions_raw[-1, GRIP_DIM]
        return net


# -- dynamics and rendering -----------------------------------------------------


@dataclass(frozen=True)
class WorldParams:
    max_step: float = 0.2
    arena: float = 1.0
    distractor_speed: float = 0.35
    distractor_noise: float = 0.05
    d_obs: int = 64


def _step_array(s: np.ndarray, a: np.ndarray, noise: float, params: WorldParams) -> np.ndarray:
    delta = np.clip(a[:2], -params.max_step, params.max_step)
    grip = float(np.clip(a[GRIP_DIM], 0.0, 1.0))
    new = s.copy()
    new[:2] = np.clip(s[:2] + delta, -params.arena, params.arena)
    holding = grip >= 0.5 and s[2] >= 0.5 and np.max(np.abs(s[:2] - s[3:5])) <= GRASP_RADIUS
    if holding:
        new[3:5] = np.clip(s[3:5] + (new[:2] - s[:2]), -params.arena, params.arena)
    new[2] = grip
    new[5] = (s[5] + params.distractor_speed + noise) % TWO_PI
    return new


def step_world(
    state: WorldState,
    action: ActionVec,
    rng: np.random.Generator,
    params: WorldParams = WorldParams(),
) -> WorldState:
    """Clamped additive update; the distractor advances from ``rng`` alone."""
    noise = float(rng.normal(0.0, params.distractor_noise))
    return WorldState.from_array(_step_array(state.to_array(), action.to_array(), noise, params))


@functools.lru_cache(maxsize=8)
def _lift(d_obs: int, n_in: int) -> tuple[np.ndarray, np.ndarray]:
    rng = _rng(LIFT_SEED, d_obs, n_in)
    w = rng.normal(0.0, 1.2 / math.sqrt(n_in), size=(n_in, d_obs))
    b = rng.uniform(-0.5, 0.5, size=d_obs)
    w.setflags(write=False)
    b.setflags(write=False)
    return w, b


def _scene_points(states: np.ndarray) -> np.ndarray:
    """World points per state, shape (N, P, 3).

    Order: agent base, gripper tip, agent markers, object, distractor, landmarks.
    """
    n = states.shape[0]
    n_agent = 2 + len(AGENT_MARKERS)
    pts = np.empty((n, n_agent + 2 + len(LANDMARKS), 3))
    base = np.zeros((n, 3))
    base[:, :2] = states[:, :2]
    pts[:, 0] = base
    pts[:, 1, :2] = states[:, :2]
    pts[:, 1, 2] = 0.3 - 0.2 * states[:, 2]
    pts[:, 2:n_agent] = base[:, None, :] + AGENT_MARKERS
    pts[:, n_agent, :2] = states[:, 3:5]
    pts[:, n_agent, 2] = 0.0
    phase = states[:, 5]
    pts[:, n_agent + 1, 0] = DISTRACTOR_RADIUS * np.cos(phase)
    pts[:, n_agent + 1, 1] = DISTRACTOR_RADIUS * np.sin(phase)
    pts[:, n_agent + 1, 2] = DISTRACTOR_HEIGHT
    pts[:, n_agent + 2:] = LANDMARKS
    return pts


def render_batch(states: np.ndarray, pose: CameraPose | np.ndarray, d_obs: int = 64) -> np.ndarray:
    """Render (N, 6) state rows through one camera into (N, d_obs) features."""
    pose = pose if isinstance(pose, CameraPose) else CameraPose.from_array(pose)
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    rot = quat_to_matrix(np.asarray(pose.orientation))
    pts = _scene_points(states) - np.asarray(pose.position)
    cam = pts @ rot  # rows are R^T (X - p)
    depth = np.maximum(cam[..., 2], 1e-3)
    uv = FOCAL * cam[..., :2] / depth[..., None]
    raw = np.concatenate([uv.reshape(len(states), -1), GRIP_GAIN * (states[:, 2:3] - 0.5)], axis=1)
    w, b = _lift(d_obs, raw.shape[1])
    return np.tanh(raw @ w + b)


def render_view(state: WorldState | np.ndarray, pose: CameraPose, d_obs: int = 64) -> np.ndarray:
    s = state.to_array() if isinstance(state, WorldState) else np.asarray(state, dtype=np.float64)
    return render_batch(s[None], pose, d_obs)[0]


def perturb_pose(
    pose: CameraPose,
    sigma_theta: float = 0.075,
    sigma_p: float = 0.03,
    rng: np.random.Generator | None = None,
) -> CameraPose:
    """Left-multiply a Gaussian axis-angle rotation and add a Gaussian offset."""
    if sigma_theta < 0 or sigma_p < 0:
        raise ValueError("noise scales must be non-negative")
    if sigma_theta == 0 and sigma_p == 0:
        return pose
    if rng is None:
        raise ValueError("perturb_pose needs an explicit seeded generator")
    dtheta = rng.normal(0.0, sigma_theta, size=3)
    dp = rng.normal(0.0, sigma_p, size=3)
    q = quat_mul(quat_from_axis_angle(dtheta), np.asarray(pose.orientation))
    q /= np.linalg.norm(q)
    return CameraPose(tuple(np.asarray(pose.position) + dp), tuple(q))


# -- dataset generation ---------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    num_views: int = 2
    trajectories: int = 100
    length: int = 20
    stride: int = 1
    mixture: tuple[float, float] = (0.5, 0.5)  # (scripted expert, random play)
    seed: int = 0
    d_obs: int = 64
    camera_jitter: float = 0.15
    shake_theta: float = 0.01
    shake_p: float = 0.01
    world: WorldParams = field(default_factory=WorldParams)

    def validate(self) -> None:
        if self.num_views < 1:
            raise ValueError("num_views must be >= 1")
        if self.trajectories < 1 or self.length < 2:
            raise ValueError("need at least one trajectory of length >= 2")
        if self.stride < 1 or self.stride >= self.length:
            raise ValueError("stride must be in [1, length)")
        if len(self.mixture) != 2 or any(not 0.0 <= f <= 1.0 for f in self.mixture):
            raise ValueError("mixture fractions must lie in [0, 1]")
        if abs(sum(self.mixture) - 1.0) > 1e-9:
            raise ValueError("mixture fractions must sum to 1")
        if min(self.camera_jitter, self.shake_theta, self.shake_p) < 0:
            raise ValueError("camera noise scales must be non-negative")


@dataclass(frozen=True)
class DatasetManifest:
    record_count: int
    d_obs: int
    num_views: int
    stride: int
    seed: int
    mixture: tuple[float, float]
    trajectories: int = 0
    length: int = 0
    camera_jitter: float = 0.0
    shake_theta: float = 0.0
    shake_p: float = 0.0
    format_version: str = FORMAT_VERSION

    @property
    def hidden_width(self) -> int:
        return 2 * STATE_DIM + self.stride * ACTION_DIM + self.num_views * (2 * POSE_DIM + 1) + 3

    def hidden_fields(self) -> list[tuple[str, int, int]]:
        """(name, float offset, float count) per hidden field, in file order."""
        out, off = [], 0
        for name, n in [
            ("s_t", STATE_DIM),
            ("s_next", STATE_DIM),
            ("actions_raw", self.stride * ACTION_DIM),
            ("poses", self.num_views * POSE_DIM),
            ("poses_next", self.num_views * POSE_DIM),
            ("view_ids", self.num_views),
            ("trajectory", 1),
            ("time", 1),
            ("source", 1),
        ]:
            out.append((name, off, n))
            off += n
        return out

    def to_text(self) -> str:
        lines = [
            f"format_version: {self.format_version}",
            f"record_count: {self.record_count}",
            f"d_obs: {self.d_obs}",
            f"num_views: {self.num_views}",
            f"stride: {self.stride}",
            f"seed: {self.seed}",
            f"mixture: {self.mixture[0]!r}:{self.mixture[1]!r}",
            f"trajectories: {self.trajectories}",
            f"length: {self.length}",
            f"camera_jitter: {self.camera_jitter!r}",
            f"shake_theta: {self.shake_theta!r}",
            f"shake_p: {self.shake_p!r}",
            "obs_dtype: float32_le",
            f"obs_layout: record,view,[o_t|o_next],d_obs",
            f"obs_record_bytes: {self.num_views * 2 * self.d_obs * 4}",
            "hidden_dtype: float32_le",
            f"hidden_record_bytes: {self.hidden_width * 4}",
        ]
        for name, off, n in self.hidden_fields():
            lines.append(f"hidden_field.{name}: byte_offset={off * 4} floats={n}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                k, _, v = line.partition(": ")
                kv[k.strip()] = v.strip()
        if kv.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format {kv.get('format_version')!r}")
        expert, play = (float(x) for x in kv["mixture"].split(":"))
        return cls(
            record_count=int(kv["record_count"]),
            d_obs=int(kv["d_obs"]),
            num_views=int(kv["num_views"]),
            stride=int(kv["stride"]),
            seed=int(kv["seed"]),
            mixture=(expert, play),
            trajectories=int(kv.get("trajectories", 0)),
            length=int(kv.get("length", 0)),
            camera_jitter=float(kv.get("camera_jitter", 0.0)),
            shake_theta=float(kv.get("shake_theta", 0.0)),
            shake_p=float(kv.get("shake_p", 0.0)),
        )


SOURCE_EXPERT, SOURCE_PLAY = 0, 1


@dataclass
class Dataset:
    """Columnar view of a generated or loaded dataset.

    ``obs`` has shape (records, views, 2, d_obs).  ``hidden`` is ``None`` when
    only observations were loaded.
    """

    manifest: DatasetManifest
    obs: np.ndarray
    hidden: dict[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return self.manifest.record_count

    @property
    def num_views(self) -> int:
        return self.manifest.num_views

    def require_hidden(self) -> dict[str, np.ndarray]:
        if self.hidden is None:
            raise ValueError("dataset was loaded without hidden labels")
        return self.hidden

    def record(self, i: int) -> TransitionRecord:
        h = self.hidden
        views = tuple(range(self.num_views))
        if h is None:
            return TransitionRecord(views, self.obs[i, :, 0], self.obs[i, :, 1], stride=self.manifest.stride)
        return TransitionRecord(
            view_ids=tuple(int(v) for v in h["view_ids"][i]),
            o_t=self.obs[i, :, 0],
            o_next=self.obs[i, :, 1],
            s_t=WorldState.from_array(h["s_t"][i]),
            s_next=WorldState.from_array(h["s_next"][i]),
            actions_raw=h["actions_raw"][i].copy(),
            poses=tuple(CameraPose.from_array(p) for p in h["poses"][i]),
            poses_next=tuple(CameraPose.from_array(p) for p in h["poses_next"][i]),
            stride=self.manifest.stride,
        )

    def __iter__(self) -> Iterator[TransitionRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def subset(self, index: Sequence[int]) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        m = self.manifest
        manifest = DatasetManifest(
            len(index), m.d_obs, m.num_views, m.stride, m.seed, m.mixture,
            m.trajectories, m.length, m.camera_jitter, m.shake_theta, m.shake_p,
        )
        hidden = None if self.hidden is None else {k: v[index] for k, v in self.hidden.items()}
        return Dataset(manifest, self.obs[index], hidden)


def base_poses(num_views: int) -> list[CameraPose]:
    """Un-jittered camera ring: quarter-turn azimuth spacing, looking at the arena centre."""
    return [_ring_pose(math.pi / 4 + i * math.pi / 2, 0.75, 2.6) for i in range(num_views)]


def _ring_pose(azimuth: float, elevation: float, distance: float) -> CameraPose:
    pos = distance * np.array([
        math.cos(elevation) * math.cos(azimuth),
        math.cos(elevation) * math.sin(azimuth),
        math.sin(elevation),
    ])
    return CameraPose.look_at(pos)


def _canonical_pose(pose: CameraPose) -> CameraPose:
    # what survives a float32 round trip through the hidden file
    return CameraPose.from_array(_f32(pose.to_array()))


def _trajectory_poses(cfg: DatasetConfig, rng: np.random.Generator) -> list[CameraPose]:
    j = cfg.camera_jitter
    poses = []
    for i in range(cfg.num_views):
        az = math.pi / 4 + i * math.pi / 2 + rng.uniform(-j, j)
        el = 0.75 + rng.uniform(-j, j) / 3.0
        dist = 2.6 * (1.0 + rng.uniform(-j, j) / 4.0)
        poses.append(_canonical_pose(_ring_pose(az, el, dist)))
    return poses


def _canonical_state(s: np.ndarray) -> np.ndarray:
    s = _f32(s)
    if s[5] >= TWO_PI:
        s[5] = 0.0
    return s


def _expert_action(s: np.ndarray, goal: np.ndarray, rng: np.random.Generator, params: WorldParams) -> np.ndarray:
    a = np.zeros(ACTION_DIM)
    near = np.max(np.abs(s[:2] - s[3:5])) <= GRASP_RADIUS * 0.6
    holding = s[2] >= 0.5 and near
    target = goal if holding else s[3:5]
    if holding and np.max(np.abs(s[:2] - goal)) < 0.05:
        goal[:] = rng.uniform(-0.6, 0.6, size=2)  # drop here, next placement elsewhere
        a[GRIP_DIM] = 0.0
        return a
    d = target - s[:2]
    dist = float(np.linalg.norm(d))
    speed = min(params.max_step, dist)
    move = d / dist * speed if dist > 0 else np.zeros(2)
    move = move + rng.normal(0.0, 0.1 * params.max_step, size=2)
    a[:2] = np.clip(move, -params.max_step, params.max_step)
    a[GRIP_DIM] = 1.0 if (near or holding) else 0.0
    return a


def _play_action(s: np.ndarray, rng: np.random.Generator, params: WorldParams) -> np.ndarray:
    a = np.zeros(ACTION_DIM)
    a[:2] = rng.uniform(-params.max_step, params.max_step, size=2)
    flip = rng.uniform() < 0.25
    a[GRIP_DIM] = float((s[2] >= 0.5) != flip)
    return a


def _rollout(cfg: DatasetConfig, index: int, expert: bool):
    rng = _rng(cfg.seed, index)
    params = cfg.world
    poses = _trajectory_poses(cfg, rng)
    if expert:
        agent = rng.uniform(-0.8, 0.8, size=2)
        obj = rng.uniform(-0.6, 0.6, size=2)
        goal = rng.uniform(-0.6, 0.6, size=2)
    else:
        # randomized arena: anywhere, including the rim
        agent = rng.uniform(-1.0, 1.0, size=2)
        obj = rng.uniform(-1.0, 1.0, size=2)
        goal = obj.copy()
    phase = rng.uniform(0.0, TWO_PI)
    s = _canonical_state(np.array([agent[0], agent[1], 0.0, obj[0], obj[1], phase]))
    noise_rng = _rng(cfg.seed, index, 1)  # exogenous channel has its own stream
    states, actions = [s], []
    for _ in range(cfg.length - 1):
        a = _expert_action(s, goal, rng, params) if expert else _play_action(s, rng, params)
        a = _f32(a)
        s = _canonical_state(_step_array(s, a, float(noise_rng.normal(0.0, params.distractor_noise)), params))
        states.append(s)
        actions.append(a)
    shake_rng = _rng(cfg.seed, index, 2)
    frames = [
        [_canonical_pose(perturb_pose(p, cfg.shake_theta, cfg.shake_p, shake_rng)) for _ in range(cfg.length)]
        for p in poses
    ]
    return np.array(states), np.array(actions), frames


def is_expert(index: int, expert_fraction: float) -> bool:
    """Deterministic, evenly interleaved source assignment."""
    return math.floor((index + 1) * expert_fraction + 1e-9) > math.floor(index * expert_fraction + 1e-9)


def generate_dataset(cfg: DatasetConfig) -> Dataset:
    cfg.validate()
    h, nv, d = cfg.stride, cfg.num_views, cfg.d_obs
    per_traj = cfg.length - h
    n = cfg.trajectories * per_traj
    obs = np.empty((n, nv, 2, d))
    hid = {
        "s_t": np.empty((n, STATE_DIM)),
        "s_next": np.empty((n, STATE_DIM)),
        "actions_raw": np.empty((n, h, ACTION_DIM)),
        "poses": np.empty((n, nv, POSE_DIM)),
        "poses_next": np.empty((n, nv, POSE_DIM)),
        "view_ids": np.tile(np.arange(nv, dtype=np.float64), (n, 1)),
        "trajectory": np.repeat(np.arange(cfg.trajectories, dtype=np.float64), per_traj),
        "time": np.tile(np.arange(per_traj, dtype=np.float64), cfg.trajectories),
        "source": np.empty(n),
    }
    for t in range(cfg.trajectories):
        expert = is_expert(t, cfg.mixture[0])
        states, actions, frames = _rollout(cfg, t, expert)
        rows = slice(t * per_traj, (t + 1) * per_traj)
        for v, cams in enumerate(frames):
            feats = _f32(np.concatenate([render_batch(s[None], p, d) for s, p in zip(states, cams)]))
            pose_arr = np.array([p.to_array() for p in cams])
            obs[rows, v, 0] = feats[:per_traj]
            obs[rows, v, 1] = feats[h:]
            hid["poses"][rows, v] = pose_arr[:per_traj]
            hid["poses_next"][rows, v] = pose_arr[h:]
        hid["s_t"][rows] = states[:per_traj]
        hid["s_next"][rows] = states[h:]
        hid["actions_raw"][rows] = np.stack([actions[i:i + h] for i in range(per_traj)])
        hid["source"][rows] = SOURCE_EXPERT if expert else SOURCE_PLAY
    manifest = DatasetManifest(
        n, d, nv, h, cfg.seed, tuple(cfg.mixture), cfg.trajectories, cfg.length,
        cfg.camera_jitter, cfg.shake_theta, cfg.shake_p,
    )
    return Dataset(manifest, obs, hid)


# -- serialization --------------------------------------------------------------


def dataset_paths(directory: str, name: str) -> dict[str, str]:
    return {ext: os.path.join(directory, f"{name}.{ext}") for ext in ("manifest", "obs", "hidden")}


def write_dataset(ds: Dataset, directory: str, name: str = "world") -> dict[str, str]:
    ds.require_hidden()
    os.makedirs(directory, exist_ok=True)
    paths = dataset_paths(directory, name)
    m = ds.manifest
    with open(paths["obs"], "wb") as fh:
        fh.write(ds.obs.astype("<f4").tobytes())
    rows = np.concatenate(
        [ds.hidden[name_].reshape(len(ds), -1) for name_, _, _ in m.hidden_fields()], axis=1
    )
    with open(paths["hidden"], "wb") as fh:
        fh.write(rows.astype("<f4").tobytes())
    with open(paths["manifest"], "w") as fh:
        fh.write(m.to_text())
    return paths


def read_manifest(directory: str, name: str = "world") -> DatasetManifest:
    with open(dataset_paths(directory, name)["manifest"]) as fh:
        return DatasetManifest.from_text(fh.read())


def load_observations(directory: str, name: str = "world") -> Dataset:
    """Observations only; the ``.hidden`` sibling is never opened."""
    m = read_manifest(directory, name)
    raw = np.fromfile(dataset_paths(directory, name)["obs"], dtype="<f4")
    expected = m.record_count * m.num_views * 2 * m.d_obs
    if raw.size != expected:
        raise ValueError(f"obs payload has {raw.size} floats, manifest implies {expected}")
    return Dataset(m, raw.astype(np.float64).reshape(m.record_count, m.num_views, 2, m.d_obs))


def load_dataset(directory: str, name: str = "world") -> Dataset:
    ds = load_observations(directory, name)
    m = ds.manifest
    raw = np.fromfile(dataset_paths(directory, name)["hidden"], dtype="<f4").astype(np.float64)
    if raw.size != m.record_count * m.hidden_width:
        raise ValueError("hidden payload size does not match manifest")
    raw = raw.reshape(m.record_count, m.hidden_width)
    shapes = {
        "actions_raw": (m.stride, ACTION_DIM),
        "poses": (m.num_views, POSE_DIM),
        "poses_next": (m.num_views, POSE_DIM),
        "view_ids": (m.num_views,),
        "trajectory": (),
        "time": (),
        "source": (),
    }
    hidden = {}
    for name_, off, n in m.hidden_fields():
        block = raw[:, off:off + n]
        hidden[name_] = block.reshape((m.record_count, *shapes.get(name_, (n,))))
    ds.hidden = hidden
    return ds


def file_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# -- exhaustive discrete world --------------------------------------------------


@dataclass(frozen=True)
class DiscreteWorldSpec:
    """Small discrete world for exact information computations.

    ``dynamics`` is either an (S, A) integer table of next states or an
    (S, A, S) stochastic kernel.  ``view_kernel`` is (V, V), identity by
    default (static cameras).  Observations default to the injective code
    ``o = s * n_views + v``.
    """

    n_states: int
    n_actions: int
    n_views: int
    dynamics: np.ndarray
    policy: np.ndarray | None = None  # (S, A)
    state_prior: np.ndarray | None = None
    view_prior: np.ndarray | None = None
    view_kernel: np.ndarray | None = None
    observe: np.ndarray | None = None  # (S, V) integer observation codes

    MAX_ATOMS = 10_000


@dataclass(frozen=True)
class JointTable:
    """Exact joint over columns S, A, S2, V, V2, O, O2 (plus any added ones)."""

    columns: dict[str, np.ndarray]
    p: np.ndarray

    def __len__(self):
        return len(self.p)

    def with_column(self, name: str, values) -> "JointTable":
        cols = dict(self.columns)
        cols[name] = np.asarray(values)
        return JointTable(cols, self.p)


def _as_kernel(spec: DiscreteWorldSpec) -> np.ndarray:
    dyn = np.asarray(spec.dynamics)
    s, a = spec.n_states, spec.n_actions
    if dyn.shape == (s, a):
        kernel = np.zeros((s, a, s))
        kernel[np.arange(s)[:, None], np.arange(a)[None, :], dyn.astype(int)] = 1.0
        return kernel
    if dyn.shape == (s, a, s):
        return dyn.astype(np.float64)
    raise ValueError(f"dynamics must be (S, A) or (S, A, S), got {dyn.shape}")


def enumerate_discrete_world(spec: DiscreteWorldSpec) -> JointTable:
    ns, na, nv = spec.n_states, spec.n_actions, spec.n_views
    if min(ns, na, nv) < 1:
        raise ValueError("all cardinalities must be positive")
    if ns * na * nv > spec.MAX_ATOMS or ns * na * nv * ns * nv > 50 * spec.MAX_ATOMS:
        raise ValueError("world too large to enumerate")
    policy = np.full((ns, na), 1.0 / na) if spec.policy is None else np.asarray(spec.policy, float)
    ps = np.full(ns, 1.0 / ns) if spec.state_prior is None else np.asarray(spec.state_prior, float)
    pv = np.full(nv, 1.0 / nv) if spec.view_prior is None else np.asarray(spec.view_prior, float)
    vk = np.eye(nv) if spec.view_kernel is None else np.asarray(spec.view_kernel, float)
    obs = (np.arange(ns)[:, None] * nv + np.arange(nv)[None, :]) if spec.observe is None else np.asarray(spec.observe)
    kernel = _as_kernel(spec)
    joint = (
        ps[:, None, None, None, None]
        * policy[:, :, None, None, None]
        * kernel[:, :, :, None, None]
        * pv[None, None, None, :, None]
        * vk[None, None, None, :, :]
    )
    idx = np.nonzero(joint > 0)
    p = joint[idx]
    if abs(p.sum() - 1.0) > 1e-12:
        raise ValueError(f"joint sums to {p.sum()!r}; check priors and kernels")
    if len(p) > spec.MAX_ATOMS:
        raise ValueError("world too large to enumerate")
    s, a, s2, v, v2 = idx
    cols = {"S": s, "A": a, "S2": s2, "V": v, "V2": v2, "O": obs[s, v], "O2": obs[s2, v2]}
    return JointTable(cols, p)
