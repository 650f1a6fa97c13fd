"""Deterministic seeded 2-D manipulation tasks with scripted experts.

Three tasks graded by difficulty: reach2d (free-space reaching), pickplace2d
(grasp-and-carry with a binary gripper channel), insert2d (a narrow slot with
walls that block motion and flag unsafe contact). The workspace is the unit
square; actions are per-step position deltas scaled by MAX_STEP, with an
optional trailing gripper channel read by sign.

Observations are two rendered views (full-workspace "side" and agent-centered
"wrist") plus a 4-dim proprio vector [x, y, gripper, holding]; unused
channels stay zero so every task shares one observation geometry.
"""

from __future__ import annotations

import numpy as np

from .types import Observation, clip_action

MAX_STEP = 0.05
PROPRIO_DIM = 4
ENV_NAMES = ("reach2d", "insert2d", "pickplace2d")


def _soft_disk(px, py, cx, cy, radius):
    d2 = (px - cx) ** 2 + (py - cy) ** 2
    return np.clip(1.0 - d2 / (radius * radius), 0.0, 1.0)


def _soft_rect(px, py, x0, x1, y0, y1, softness=0.02):
    sx = np.clip((np.minimum(px - x0, x1 - px) + softness) / softness, 0, 1)
    sy = np.clip((np.minimum(py - y0, y1 - py) + softness) / softness, 0, 1)
    return sx * sy


class SimEnv:
    """Base environment: stepping, rendering, and observation plumbing."""

    name = ""
    action_dim = 2

    def __init__(self, h: int = 60, randomization_range: float = 0.1,
                 render_size: int = 24):
        self.h = h
        self.randomization_range = randomization_range
        self.render_size = render_size
        self.control_rate = 10.0
        self.steps = 0
        self.done = True
        self.seed = None
        self.agent = np.zeros(2)
        self.gripper = -1.0
        self.holding = False

    # per-task hooks -------------------------------------------------------
    def _reset_state(self, rng):
        raise NotImplementedError

    def _move(self, delta):
        """Applies the position delta; returns blocked penetration depth."""
        self.agent = np.clip(self.agent + delta, 0.0, 1.0)
        return 0.0

    def _apply_gripper(self, command):
        pass

    def success(self) -> bool:
        raise NotImplementedError

    def unsafe_region(self, penetration: float) -> bool:
        return False

    def dist_to_goal(self) -> float:
        raise NotImplementedError

    def _scene(self):
        """Returns (disks, rects): disks as (cx, cy, radius, channel)."""
        raise NotImplementedError

    def oracle_target(self):
        """(target position, gripper command) for the scripted expert."""
        raise NotImplementedError

    # shared mechanics ------------------------------------------------------
    def reset(self, seed: int) -> Observation:
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.steps = 0
        self.done = False
        self.gripper = -1.0
        self.holding = False
        self._reset_state(rng)
        return self.observe()

    def _rand_offset(self, rng):
        r = self.randomization_range
        return rng.uniform(-r, r, size=2)

    def step(self, action):
        if self.done:
            raise RuntimeError("episode finished; call reset() first")
        a = clip_action(np.asarray(action, dtype=np.float64), self.action_dim)
        penetration = self._move(MAX_STEP * a[:2])
        if self.action_dim > 2:
            self._apply_gripper(1.0 if a[2] >= 0 else -1.0)
        self.steps += 1
        success = self.success()
        unsafe = self.unsafe_region(penetration)
        self.done = success or self.steps >= self.h
        info = {"success": success, "unsafe": unsafe, "steps": self.steps,
                "dist": self.dist_to_goal()}
        return self.observe(), self.done, info

    def proprio(self):
        return np.array([self.agent[0], self.agent[1], self.gripper,
                         1.0 if self.holding else 0.0], dtype=np.float32)

    def observe(self) -> Observation:
        side = self.render(view="side")
        wrist = self.render(view="wrist")
        return Observation(images=(side, wrist), proprio=self.proprio())

    def render(self, view: str = "side", size: int | None = None):
        size = size or self.render_size
        if view == "side":
            x0, y0, span = 0.0, 0.0, 1.0
        elif view == "wrist":
            half = 0.25
            x0, y0, span = self.agent[0] - half, self.agent[1] - half, 0.5
        else:
            raise ValueError(f"unknown view {view!r}")
        u = (np.arange(size) + 0.5) / size
        px = x0 + span * u[None, :]
        py = y0 + span * (1.0 - u)[:, None]
        img = np.zeros((size, size, 3), dtype=np.float32)
        disks, rects = self._scene()
        for rx0, rx1, ry0, ry1 in rects:
            mask = _soft_rect(px, py, rx0, rx1, ry0, ry1) * 0.35
            for c in range(3):
                img[:, :, c] = np.maximum(img[:, :, c], mask)
        for cx, cy, radius, channel in disks:
            mask = _soft_disk(px, py, cx, cy, radius)
            img[:, :, channel] = np.maximum(img[:, :, channel], mask)
        return img

    def oracle_action(self, noise_scale: float, rng: np.random.Generator):
        """Proportional controller toward the expert waypoint, plus noise."""
        target, grip = self.oracle_target()
        a = np.zeros(self.action_dim)
        a[:2] = (target - self.agent) / MAX_STEP
        if self.action_dim > 2:
            a[2] = grip
        if noise_scale > 0:
            a = a + noise_scale * rng.standard_normal(self.action_dim)
        return clip_action(a, self.action_dim)

    def sample_state(self, rng: np.random.Generator, success: bool):
        """Draws a random state labeled by the ground-truth predicate and
        returns its observation; used to build classifier training sets."""
        raise NotImplementedError


class Reach2D(SimEnv):
    """Move the agent within 0.05 of the goal."""

    name = "reach2d"
    action_dim = 2
    success_radius = 0.05

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        self.goal = np.zeros(2)

    def _reset_state(self, rng):
        self.agent = np.array([0.2, 0.2]) + self._rand_offset(rng)
        self.goal = np.array([0.75, 0.75]) + self._rand_offset(rng)

    def success(self):
        return float(np.linalg.norm(self.agent - self.goal)) <= self.success_radius

    def dist_to_goal(self):
        return float(np.linalg.norm(self.agent - self.goal))

    def _scene(self):
        return ([(self.goal[0], self.goal[1], 0.07, 1),
                 (self.agent[0], self.agent[1], 0.05, 0)], [])

    def oracle_target(self):
        return self.goal, -1.0

    def sample_state(self, rng, success):
        self.seed = -1
        self.steps = 0
        self.done = False
        self.gripper = -1.0
        self.holding = False
        self.goal = rng.uniform(0.15, 0.85, size=2)
        if success:
            angle = rng.uniform(0, 2 * np.pi)
            radius = rng.uniform(0, self.success_radius * 0.9)
            self.agent = self.goal + radius * np.array([np.cos(angle),
                                                        np.sin(angle)])
        else:
            while True:
                self.agent = rng.uniform(0.0, 1.0, size=2)
                if np.linalg.norm(self.agent - self.goal) > 1.4 * self.success_radius:
                    break
        return self.observe()


class Insert2D(SimEnv):
    """Enter a narrow downward-opening slot and reach its interior."""

    name = "insert2d"
    action_dim = 2
    success_radius = 0.04
    agent_radius = 0.02
    wall_y = (0.62, 0.88)
    wall_half_gap = 0.05
    wall_width = 0.10
    unsafe_penetration = 0.015

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        self.slot_x = 0.5

    def _reset_state(self, rng):
        self.agent = np.array([0.5, 0.15]) + self._rand_offset(rng)
        self.slot_x = 0.5 + float(rng.uniform(-self.randomization_range,
                                              self.randomization_range))

    @property
    def goal(self):
        return np.array([self.slot_x, 0.80])

    def _walls(self):
        y0, y1 = self.wall_y
        left = (self.slot_x - self.wall_half_gap - self.wall_width,
                self.slot_x - self.wall_half_gap, y0, y1)
        right = (self.slot_x + self.wall_half_gap,
                 self.slot_x + self.wall_half_gap + self.wall_width, y0, y1)
        return [left, right]

    def _collides(self, pos):
        r = self.agent_radius
        for x0, x1, y0, y1 in self._walls():
            if (x0 - r < pos[0] < x1 + r) and (y0 - r < pos[1] < y1 + r):
                return True
        return False

    def _move(self, delta):
        # axis-separated sliding: blocked axes stop at the wall face
        attempted = np.clip(self.agent + delta, 0.0, 1.0)
        pos = self.agent.copy()
        trial_x = np.array([attempted[0], pos[1]])
        if not self._collides(trial_x):
            pos[0] = attempted[0]
        trial_y = np.array([pos[0], attempted[1]])
        if not self._collides(trial_y):
            pos[1] = attempted[1]
        penetration = float(np.linalg.norm(attempted - pos))
        self.agent = pos
        return penetration

    def success(self):
        return float(np.linalg.norm(self.agent - self.goal)) <= self.success_radius

    def unsafe_region(self, penetration):
        return penetration > self.unsafe_penetration

    def dist_to_goal(self):
        return float(np.linalg.norm(self.agent - self.goal))

    def _scene(self):
        return ([(self.goal[0], self.goal[1], 0.06, 1),
                 (self.agent[0], self.agent[1], 0.05, 0)], self._walls())

    def oracle_target(self):
        aligned = abs(self.agent[0] - self.slot_x) <= 0.02
        below_mouth = self.agent[1] < 0.48
        if below_mouth or not aligned:
            return np.array([self.slot_x, 0.50]), -1.0
        return self.goal, -1.0

    def sample_state(self, rng, success):
        self.seed = -1
        self.steps = 0
        self.done = False
        self.gripper = -1.0
        self.holding = False
        self.slot_x = float(rng.uniform(0.4, 0.6))
        if success:
            while True:
                angle = rng.uniform(0, 2 * np.pi)
                radius = rng.uniform(0, self.success_radius * 0.9)
                self.agent = self.goal + radius * np.array([np.cos(angle),
                                                            np.sin(angle)])
                if not self._collides(self.agent):
                    break
        else:
            while True:
                self.agent = rng.uniform(0.0, 1.0, size=2)
                if self._collides(self.agent):
                    continue
                if np.linalg.norm(self.agent - self.goal) > 1.4 * self.success_radius:
                    break
        return self.observe()


class PickPlace2D(SimEnv):
    """Grasp the object with the gripper channel and carry it to the goal."""

    name = "pickplace2d"
    action_dim = 3
    success_radius = 0.05
    grasp_radius = 0.05

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        self.object = np.zeros(2)
        self.goal = np.zeros(2)

    def _reset_state(self, rng):
        self.agent = np.array([0.5, 0.2]) + self._rand_offset(rng)
        self.object = np.array([0.25, 0.6]) + self._rand_offset(rng)
        self.goal = np.array([0.75, 0.6]) + self._rand_offset(rng)

    def _move(self, delta):
        self.agent = np.clip(self.agent + delta, 0.0, 1.0)
        if self.holding:
            self.object = self.agent.copy()
        return 0.0

    def _apply_gripper(self, command):
        self.gripper = command
        if command > 0 and not self.holding and \
                np.linalg.norm(self.agent - self.object) <= self.grasp_radius:
            self.holding = True
            self.object = self.agent.copy()
        elif command < 0:
            self.holding = False

    def success(self):
        return float(np.linalg.norm(self.object - self.goal)) <= self.success_radius

    def dist_to_goal(self):
        carry = float(np.linalg.norm(self.object - self.goal))
        if self.holding:
            return carry
        return carry + float(np.linalg.norm(self.agent - self.object))

    def _scene(self):
        return ([(self.goal[0], self.goal[1], 0.07, 1),
                 (self.object[0], self.object[1], 0.05, 2),
                 (self.agent[0], self.agent[1], 0.05, 0)], [])

    def oracle_target(self):
        if self.holding:
            return self.goal, 1.0
        if np.linalg.norm(self.agent - self.object) <= 0.03:
            return self.object, 1.0
        return self.object, -1.0

    def sample_state(self, rng, success):
        self.seed = -1
        self.steps = 0
        self.done = False
        self.goal = rng.uniform(0.15, 0.85, size=2)
        if success:
            angle = rng.uniform(0, 2 * np.pi)
            radius = rng.uniform(0, self.success_radius * 0.9)
            self.object = self.goal + radius * np.array([np.cos(angle),
                                                         np.sin(angle)])
        else:
            while True:
                self.object = rng.uniform(0.0, 1.0, size=2)
                if np.linalg.norm(self.object - self.goal) > 1.4 * self.success_radius:
                    break
        self.holding = bool(rng.integers(0, 2))
        self.gripper = 1.0 if self.holding else -1.0
        self.agent = self.object.copy() if self.holding \
            else rng.uniform(0.0, 1.0, size=2)
        return self.observe()


_ENVS = {cls.name: cls for cls in (Reach2D, Insert2D, PickPlace2D)}


def make_env(name: str, **kwargs) -> SimEnv:
    if name not in _ENVS:
        raise ValueError(f"unknown environment {name!r}; "
                         f"choose from {sorted(_ENVS)}")
    return _ENVS[name](**kwargs)
