"""Deterministic two-paddle cooperative pong.

Physics runs in float coordinates on the native arena; observations are
rasterized at native resolution, cropped to each agent's half of the screen
(pixel-disjoint by construction) and box-downscaled to a square grid in [0, 1].

Left agent (0) drives a block paddle on the left edge, right agent (1) a
wedge-shaped paddle whose face deflects the ball depending on where it hits.
Both agents earn 1/max_cycles per step while the ball stays in play and 0 on
the terminating step, so the undiscounted return is (episode_length - 1) /
max_cycles for every agent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

ACTIONS = (-1, 0, 1)


@dataclass(frozen=True)
class EnvConfig:
    arena_w: int = 960
    arena_h: int = 560
    paddle_w: float = 16.0
    paddle_h: float = 120.0
    ball_size: float = 12.0
    ball_speed: float = 10.0
    paddle_speed: float = 12.0
    max_cycles: int = 900
    obs_size: int = 64
    max_deflection: float = 0.7
    min_horizontal_frac: float = 0.25

    def __post_init__(self):
        if self.arena_w < 4 or self.arena_h < 4 or self.arena_w % 2 != 0:
            raise ValueError("arena must be at least 4x4 with an even width")
        if self.ball_speed <= 0 or self.paddle_speed <= 0:
            raise ValueError("speeds must be positive")
        if self.max_cycles < 1:
            raise ValueError("max_cycles must be >= 1")
        if self.obs_size < 1:
            raise ValueError("obs_size must be >= 1")
        if self.paddle_h >= self.arena_h or self.paddle_w >= self.arena_w / 2:
            raise ValueError("paddles must fit inside the arena")
        if self.ball_speed >= min(self.arena_w, self.arena_h) / 2:
            raise ValueError("ball_speed too large for the arena (tunneling)")
        if not 0.0 <= self.min_horizontal_frac < 1.0:
            raise ValueError("min_horizontal_frac must be in [0, 1)")

    @classmethod
    def desk(cls) -> "EnvConfig":
        """Small arena for test-scale runs: fast physics, 16x16 observations."""
        return cls(
            arena_w=16, arena_h=16, paddle_w=1.0, paddle_h=5.0, ball_size=1.0,
            ball_speed=1.0, paddle_speed=1.5, max_cycles=300, obs_size=16,
        )

    def to_dict(self) -> dict:
        return {
            "arena_w": self.arena_w, "arena_h": self.arena_h,
            "paddle_w": self.paddle_w, "paddle_h": self.paddle_h,
            "ball_size": self.ball_size, "ball_speed": self.ball_speed,
            "paddle_speed": self.paddle_speed, "max_cycles": self.max_cycles,
            "obs_size": self.obs_size, "max_deflection": self.max_deflection,
            "min_horizontal_frac": self.min_horizontal_frac,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        return cls(**d)


@dataclass
class EnvState:
    ball_pos: tuple[float, float]
    ball_vel: tuple[float, float]
    paddle_pos: list[float]  # vertical centers, [left, right]
    t: int = 0
    done: bool = False


@dataclass
class JointTransition:
    observations: tuple[np.ndarray, np.ndarray]
    actions: tuple[int, int]
    rewards: tuple[float, float]
    done: bool


@lru_cache(maxsize=None)
def _box_weights(src: int, dst: int) -> np.ndarray:
    """Row-stochastic area-average resampling matrix (works up or down)."""
    w = np.zeros((dst, src))
    ratio = src / dst
    for j in range(dst):
        lo, hi = j * ratio, (j + 1) * ratio
        for i in range(int(math.floor(lo)), min(int(math.ceil(hi)), src)):
            w[j, i] = min(hi, i + 1.0) - max(lo, i)
    return w / ratio


class CoopPong:
    """One environment instance per rollout worker; never share across tasks."""

    n_agents = 2

    def __init__(self, config: EnvConfig | None = None):
        self.config = config or EnvConfig()
        self.state: EnvState | None = None
        self._rng = np.random.default_rng()
        c = self.config
        self._row_w = _box_weights(c.arena_h, c.obs_size)
        self._col_w = _box_weights(c.arena_w // 2, c.obs_size)

    # -- lifecycle ---------------------------------------------------------

    def reset(self, seed: int | None = None) -> tuple[EnvState, tuple[np.ndarray, np.ndarray]]:
        """Ball at the center, direction within +-45 degrees of horizontal."""
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        c = self.config
        angle = self._rng.uniform(-np.pi / 4, np.pi / 4)
        side = -1.0 if self._rng.random() < 0.5 else 1.0
        self.state = EnvState(
            ball_pos=(c.arena_w / 2.0, c.arena_h / 2.0),
            ball_vel=(side * c.ball_speed * math.cos(angle), c.ball_speed * math.sin(angle)),
            paddle_pos=[c.arena_h / 2.0, c.arena_h / 2.0],
        )
        return self.state, self._observations()

    def step(self, actions: tuple[int, int]) -> JointTransition:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        if self.state.done:
            raise RuntimeError("episode is done; call reset()")
        for a in actions:
            if a not in ACTIONS:
                raise ValueError(f"actions must be in {ACTIONS}, got {actions}")
        c = self.config
        s = self.state
        r = c.ball_size / 2.0
        half_span = c.paddle_h / 2.0

        lo, hi = half_span, c.arena_h - half_span
        for i in (0, 1):
            s.paddle_pos[i] = min(max(s.paddle_pos[i] + actions[i] * c.paddle_speed, lo), hi)

        x, y = s.ball_pos
        vx, vy = s.ball_vel
        x += vx
        y += vy

        # specular wall bounce: flip the sign, keep the magnitude bit-exact
        if y < r:
            y = 2.0 * r - y
            vy = -vy
        elif y > c.arena_h - r:
            y = 2.0 * (c.arena_h - r) - y
            vy = -vy

        hit_window = half_span + r
        if vx < 0.0 and x - r <= c.paddle_w and abs(y - s.paddle_pos[0]) <= hit_window:
            x = 2.0 * (c.paddle_w + r) - x
            vx = -vx
        elif vx > 0.0 and x + r >= c.arena_w - c.paddle_w and abs(y - s.paddle_pos[1]) <= hit_window:
            x = 2.0 * (c.arena_w - c.paddle_w - r) - x
            vx, vy = self._deflect(-vx, vy, (y - s.paddle_pos[1]) / hit_window)

        s.ball_pos = (x, y)
        s.ball_vel = (vx, vy)
        s.t += 1
        # the ball can leave the arena only through the left or right edge
        s.done = x < 0.0 or x > c.arena_w or s.t >= c.max_cycles
        reward = 0.0 if s.done else 1.0 / c.max_cycles
        return JointTransition(
            observations=self._observations(),
            actions=(actions[0], actions[1]),
            rewards=(reward, reward),
            done=s.done,
        )

    def _deflect(self, vx: float, vy: float, offset: float) -> tuple[float, float]:
        """Wedge-face bounce: bend by the signed hit offset, keep the speed."""
        c = self.config
        speed = math.hypot(vx, vy)
        vy = vy + offset * c.max_deflection * speed
        scale = speed / math.hypot(vx, vy)
        vx *= scale
        vy *= scale
        min_vx = c.min_horizontal_frac * speed
        if abs(vx) < min_vx:
            vx = math.copysign(min_vx, vx)
            vy = math.copysign(math.sqrt(speed * speed - vx * vx), vy)
        return vx, vy

    # -- rendering ----------------------------------------------------------

    def _frame(self) -> np.ndarray:
        """Binary rasterization of the native arena (rows = y, cols = x)."""
        c = self.config
        s = self.state
        frame = np.zeros((c.arena_h, c.arena_w))
        half_span = c.paddle_h / 2.0

        self._fill_rect(frame, 0.0, c.paddle_w,
                        s.paddle_pos[0] - half_span, s.paddle_pos[0] + half_span)

        # wedge: apex pointing into the arena at the paddle's vertical center
        p1 = s.paddle_pos[1]
        r0 = max(0, math.ceil(p1 - half_span - 0.5))
        r1 = min(c.arena_h, math.ceil(p1 + half_span - 0.5))
        for row in range(r0, r1):
            yc = row + 0.5
            x_left = c.arena_w - c.paddle_w * (1.0 - abs(yc - p1) / half_span)
            c0 = max(0, math.ceil(x_left - 0.5))
            frame[row, c0:] = 1.0

        r = c.ball_size / 2.0
        bx, by = s.ball_pos
        self._fill_rect(frame, bx - r, bx + r, by - r, by + r)
        return frame

    @staticmethod
    def _fill_rect(frame: np.ndarray, x0: float, x1: float, y0: float, y1: float) -> None:
        h, w = frame.shape
        c0 = max(0, math.ceil(x0 - 0.5))
        c1 = min(w, math.ceil(x1 - 0.5))
        r0 = max(0, math.ceil(y0 - 0.5))
        r1 = min(h, math.ceil(y1 - 0.5))
        if c0 < c1 and r0 < r1:
            frame[r0:r1, c0:c1] = 1.0

    def _downscale(self, half_frame: np.ndarray) -> np.ndarray:
        return self._row_w @ half_frame @ self._col_w.T

    def _observations(self) -> tuple[np.ndarray, np.ndarray]:
        frame = self._frame()
        split = self.config.arena_w // 2
        return self._downscale(frame[:, :split]), self._downscale(frame[:, split:])

    def render_observation(self, agent_id: int) -> np.ndarray:
        """The agent's half of the screen, box-averaged to obs_size x obs_size."""
        if agent_id not in (0, 1):
            raise ValueError(f"agent_id must be 0 or 1, got {agent_id}")
        if self.state is None:
            raise RuntimeError("call reset() first")
        return self._observations()[agent_id]


class TrajectoryRecorder:
    """Optional per-episode CSV dump for debugging and replay."""

    HEADER = (
        "step,ball_x,ball_y,paddle_left,paddle_right,"
        "action_left,action_right,reward_left,reward_right"
    )

    def __init__(self):
        self.rows: list[str] = []

    def record(self, state: EnvState, actions: tuple[int, int], rewards: tuple[float, float]):
        x, y = state.ball_pos
        self.rows.append(
            f"{state.t},{x!r},{y!r},{state.paddle_pos[0]!r},{state.paddle_pos[1]!r},"
            f"{actions[0]},{actions[1]},{rewards[0]!r},{rewards[1]!r}"
        )

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.HEADER + "\n")
            fh.write("\n".join(self.rows) + ("\n" if self.rows else ""))
