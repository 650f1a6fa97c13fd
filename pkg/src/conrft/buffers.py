"""Demo and replay transition stores, return annotation, symmetric sampling.

The demo buffer holds pre-collected demonstrations plus online intervention
steps; the replay buffer holds autonomous online transitions in a bounded
FIFO. Both support one concurrent writer and one reader: every mutation and
read happens under the buffer lock, so appends and samples are linearizable.

Each append may attach an opaque ``aux`` payload (the trainer caches frozen
encoder features there); aux items ride along with their transition and are
never serialized.
"""

from __future__ import annotations

import threading
from collections import deque

import numpy as np

from .types import (Trajectory, Transition, load_trajectories,
                    save_trajectories)


class RoutingError(ValueError):
    """A transition was appended to the wrong buffer for its intervened flag."""


class BufferGateError(RuntimeError):
    """Sampling was attempted before the buffers can serve it."""


class DemoBuffer:
    """Append-only store for demonstrations and intervention transitions."""

    def __init__(self):
        self._items = []
        self._aux = []
        self._lock = threading.Lock()

    def __len__(self):
        with self._lock:
            return len(self._items)

    def append(self, transition: Transition, aux=None, pending=False) -> int:
        """Appends and returns the index. ``pending=True`` admits an online
        intervention transition whose mc_return will be patched at episode
        end; otherwise mc_return must already be present."""
        if transition.mc_return is None and not pending:
            raise ValueError(
                "demo transitions must carry mc_return; annotate the "
                "trajectory first or append with pending=True")
        with self._lock:
            self._items.append(transition)
            self._aux.append(aux)
            return len(self._items) - 1

    def set_mc_return(self, index: int, value: float):
        with self._lock:
            self._items[index] = self._items[index].with_mc_return(value)

    def sample(self, n: int, rng: np.random.Generator):
        return self.sample_with_aux(n, rng)[0]

    def sample_with_aux(self, n: int, rng: np.random.Generator):
        with self._lock:
            if not self._items:
                raise BufferGateError("demo buffer is empty")
            idx = rng.integers(0, len(self._items), size=n)
            return ([self._items[i] for i in idx],
                    [self._aux[i] for i in idx])

    def transitions(self):
        with self._lock:
            return list(self._items)

    def extend_annotated(self, trajectory: Trajectory, aux_list=None):
        """Appends a fully annotated trajectory's transitions."""
        aux_list = aux_list or [None] * len(trajectory.transitions)
        for t, aux in zip(trajectory.transitions, aux_list):
            self.append(t, aux=aux)

    def snapshot(self, path):
        save_trajectories(path, _chunk_episodes(self.transitions()))

    def restore(self, path):
        for traj in load_trajectories(path):
            for t in traj.transitions:
                self.append(t)


class ReplayBuffer:
    """Bounded FIFO store for autonomous online transitions."""

    def __init__(self, capacity: int = 200_000):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items = deque()
        self._aux = deque()
        self._lock = threading.Lock()

    def __len__(self):
        with self._lock:
            return len(self._items)

    def append(self, transition: Transition, aux=None):
        if transition.intervened:
            raise RoutingError(
                "intervened transitions belong in the demo buffer, "
                "not the replay buffer")
        with self._lock:
            if len(self._items) == self.capacity:
                self._items.popleft()
                self._aux.popleft()
            self._items.append(transition)
            self._aux.append(aux)

    def sample(self, n: int, rng: np.random.Generator):
        return self.sample_with_aux(n, rng)[0]

    def sample_with_aux(self, n: int, rng: np.random.Generator):
        with self._lock:
            if not self._items:
                raise BufferGateError(
                    "replay buffer is empty; online learning must wait for "
                    "the >=100-transition gate before sampling")
            idx = rng.integers(0, len(self._items), size=n)
            return ([self._items[i] for i in idx],
                    [self._aux[i] for i in idx])

    def transitions(self):
        with self._lock:
            return list(self._items)

    def snapshot(self, path):
        save_trajectories(path, _chunk_episodes(self.transitions()))

    def restore(self, path):
        for traj in load_trajectories(path):
            for t in traj.transitions:
                self.append(t)


def route_append(demo: DemoBuffer, replay: ReplayBuffer,
                 transition: Transition, aux=None):
    """Routes by the intervened flag: interventions to D, the rest to R."""
    if transition.intervened:
        return ("demo", demo.append(transition, aux=aux, pending=True))
    replay.append(transition, aux=aux)
    return ("replay", None)


def returns_to_go(rewards, gamma: float):
    """Discounted return-to-go per step; truncated tails bootstrap with 0."""
    out = [0.0] * len(rewards)
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = float(rewards[i]) + gamma * acc
        out[i] = acc
    return out


def annotate_returns(trajectory: Trajectory, gamma: float) -> Trajectory:
    """Returns a copy whose transitions carry the discounted return-to-go."""
    if len(trajectory.transitions) == 0:
        raise ValueError("cannot annotate an empty trajectory")
    rtg = returns_to_go([t.r for t in trajectory.transitions], gamma)
    annotated = [t.with_mc_return(v)
                 for t, v in zip(trajectory.transitions, rtg)]
    return Trajectory(transitions=annotated, success=trajectory.success,
                      seed=trajectory.seed, env=trajectory.env)


def symmetric_sample(demo: DemoBuffer, replay: ReplayBuffer,
                     batch_size: int, rng: np.random.Generator):
    """Half the batch from each buffer, uniform with replacement; the first
    half comes from the demo buffer, the second from the replay buffer."""
    transitions, _, _ = symmetric_sample_with_aux(demo, replay, batch_size, rng)
    return transitions

def symmetric_sample_with_aux(demo: DemoBuffer, replay: ReplayBuffer,
                              batch_size: int, rng: np.random.Generator):
    if batch_size % 2 != 0:
        raise ValueError(f"batch size must be even, got {batch_size}")
    half = batch_size // 2
    d_items, d_aux = demo.sample_with_aux(half, rng)
    r_items, r_aux = replay.sample_with_aux(half, rng)
    sources = ["demo"] * half + ["replay"] * half
    return d_items + r_items, d_aux + r_aux, sources


def _chunk_episodes(transitions):
    """Splits a flat transition list at done flags into valid trajectories."""
    chunks = []
    current = []
    for t in transitions:
        current.append(t)
        if t.done:
            chunks.append(Trajectory(transitions=current))
            current = []
    if current:
        chunks.append(Trajectory(transitions=current))
    return chunks
