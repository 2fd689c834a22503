"""Synthetic token dynamics: a coloured block translated by the action on a background grid."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import PreconditionError

BACKGROUND = 0


@dataclass(frozen=True)
class ToyDynamicsConfig:
    rows: int = 8
    cols: int = 8
    m: int = 8
    T: int = 6
    min_size: int = 2
    max_size: int = 3
    max_speed: int = 1
    # probability that the commanded velocity is redrawn at a step
    action_change: float = 0.3

    def validate(self):
        if self.m < 2:
            raise PreconditionError("need a background code plus at least one colour (m >= 2)")
        if not 1 <= self.min_size <= self.max_size:
            raise PreconditionError("block size range is empty")
        if self.max_size >= min(self.rows, self.cols):
            raise PreconditionError(
                f"block of size {self.max_size} does not fit a {self.rows}x{self.cols} grid with room to move")
        if self.max_speed < 0 or self.T < 1:
            raise PreconditionError("max_speed must be >= 0 and T >= 1")
        return self

    @property
    def n_tokens(self) -> int:
        return self.rows * self.cols

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Trajectory:
    """``frames[t]`` is the flat token grid at time ``t``; ``actions[t]`` its 4x4 pose, flattened.

    The pose of frame ``t`` encodes the commanded velocity that produced it
    from frame ``t-1`` (identity for the first frame).
    """

    frames: np.ndarray  # (T, N) int64
    actions: np.ndarray  # (T, 16) float64
    shape: tuple
    m: int

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    def grid(self, t: int) -> np.ndarray:
        return self.frames[t].reshape(self.shape)


def pose_from_velocity(v_row: int, v_col: int) -> np.ndarray:
    pose = np.eye(4)
    pose[0, 3] = v_col
    pose[1, 3] = v_row
    return pose.reshape(16)


def velocity_from_pose(pose: np.ndarray) -> tuple[int, int]:
    p = np.asarray(pose).reshape(4, 4)
    return int(round(p[1, 3])), int(round(p[0, 3]))


def render_block(shape, top: int, left: int, size: int, colour: int) -> np.ndarray:
    grid = np.full(shape, BACKGROUND, dtype=np.int64)
    grid[top : top + size, left : left + size] = colour
    return grid


def reflect(pos: int, vel: int, size: int, extent: int) -> int:
    """Move ``pos`` by ``vel``; a move that would leave the grid is reversed instead."""
    nxt = pos + vel
    if nxt < 0 or nxt + size > extent:
        nxt = pos - vel
    return nxt


def step_block(top: int, left: int, size: int, v_row: int, v_col: int, shape) -> tuple[int, int]:
    return reflect(top, v_row, size, shape[0]), reflect(left, v_col, size, shape[1])


def generate_episode(config: ToyDynamicsConfig, rng: np.random.Generator,
                     velocities: np.ndarray | None = None) -> Trajectory:
    """Roll the simulator for ``config.T`` frames.

    ``velocities`` optionally fixes the commanded ``(v_row, v_col)`` for each
    transition (shape ``(T-1, 2)``); otherwise they are drawn from ``rng``.
    """
    config.validate()
    shape = (config.rows, config.cols)
    size = int(rng.integers(config.min_size, config.max_size + 1))
    colour = int(rng.integers(1, config.m))
    top = int(rng.integers(0, config.rows - size + 1))
    left = int(rng.integers(0, config.cols - size + 1))
    s = config.max_speed
    if velocities is None:
        vel = rng.integers(-s, s + 1, size=2)
        vs = []
        for _ in range(config.T - 1):
            if rng.random() < config.action_change:
                vel = rng.integers(-s, s + 1, size=2)
            vs.append(vel.copy())
        velocities = np.array(vs, dtype=np.int64).reshape(-1, 2)
    velocities = np.asarray(velocities, dtype=np.int64).reshape(-1, 2)
    if velocities.shape[0] != config.T - 1:
        raise PreconditionError(f"need {config.T - 1} velocities, got {velocities.shape[0]}")
    frames = [render_block(shape, top, left, size, colour).reshape(-1)]
    actions = [pose_from_velocity(0, 0)]
    for v_row, v_col in velocities:
        top, left = step_block(top, left, size, int(v_row), int(v_col), shape)
        frames.append(render_block(shape, top, left, size, colour).reshape(-1))
        actions.append(pose_from_velocity(int(v_row), int(v_col)))
    return Trajectory(np.stack(frames), np.stack(actions), shape, config.m)


def generate_batch(config: ToyDynamicsConfig, rng: np.random.Generator, n: int):
    eps = [generate_episode(config, rng) for _ in range(n)]
    return np.stack([e.frames for e in eps]), np.stack([e.actions for e in eps])
