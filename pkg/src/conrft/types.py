"""Shared domain types, action clipping, and the trajectory record format.

Trajectories serialize to newline-delimited JSON: one header line followed by
one object per transition. Images travel as base64 raw little-endian float32
with an explicit shape so files are language-neutral and diff-friendly;
scalar floats rely on JSON shortest-repr round-tripping.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

TRAJ_FORMAT = "conrft-traj"
TRAJ_VERSION = 1


class DimensionError(ValueError):
    pass


class TrajectoryFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Observation:
    """One environment observation: rendered views plus proprioception."""

    images: tuple
    proprio: np.ndarray

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError("observation needs at least one image")
        object.__setattr__(self, "images", tuple(self.images))
        for img in self.images:
            if img.ndim != 3:
                raise ValueError(f"image must be HxWxC, got shape {img.shape}")
            lo, hi = float(img.min()), float(img.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"pixel values outside [0,1]: [{lo}, {hi}]")
        if self.proprio.ndim != 1:
            raise ValueError("proprio must be a flat vector")

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented
        return (len(self.images) == len(other.images)
                and all(np.array_equal(a, b)
                        for a, b in zip(self.images, other.images))
                and np.array_equal(self.proprio, other.proprio))


@dataclass(frozen=True, eq=False)
class Transition:
    """One (s, a, r, s', done, intervened) step; the unit of every buffer."""

    s: Observation
    a: np.ndarray
    r: float
    s_next: Observation
    done: bool
    intervened: bool
    mc_return: Optional[float] = None

    def __eq__(self, other):
        if not isinstance(other, Transition):
            return NotImplemented
        return (self.s == other.s
                and np.array_equal(self.a, other.a)
                and self.r == other.r
                and self.s_next == other.s_next
                and self.done == other.done
                and self.intervened == other.intervened
                and self.mc_return == other.mc_return)

    def with_mc_return(self, value: float) -> "Transition":
        return replace(self, mc_return=float(value))


@dataclass(eq=False)
class Trajectory:
    """An ordered episode of transitions plus its outcome and reset seed."""

    transitions: list = field(default_factory=list)
    success: bool = False
    seed: int = 0
    env: str = ""

    def __post_init__(self):
        for i, t in enumerate(self.transitions[:-1]):
            if t.done:
                raise ValueError(f"non-final transition {i} has done=true")

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.success == other.success and self.seed == other.seed
                and self.env == other.env
                and len(self.transitions) == len(other.transitions)
                and all(a == b for a, b in
                        zip(self.transitions, other.transitions)))

    def __len__(self):
        return len(self.transitions)


@dataclass
class TrainConfig:
    """Loss weights and optimization settings shared by both stages."""

    alpha: float = 0.01
    beta_offline: float = 1.0
    eta_offline: float = 0.1
    beta_online: float = 0.5
    eta_online: float = 1.0
    gamma: float = 0.99
    lr: float = 3e-4
    batch_size: int = 256
    polyak_tau: float = 0.005
    n_critics: int = 2
    utd_ratio: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0,1), got {self.gamma}")
        if self.batch_size % 2 != 0:
            raise ValueError(f"batch_size must be even, got {self.batch_size}")
        for name in ("alpha", "beta_offline", "eta_offline", "beta_online",
                     "eta_online"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_critics < 2:
            raise ValueError("n_critics must be at least 2")
        if self.utd_ratio < 1:
            raise ValueError("utd_ratio must be at least 1")

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def clip_action(a: np.ndarray, expected_dim: Optional[int] = None) -> np.ndarray:
    """Projects an action onto [-1,1] per component; idempotent."""
    a = np.asarray(a)
    if a.ndim != 1:
        raise DimensionError(f"action must be a flat vector, got shape {a.shape}")
    if expected_dim is not None and a.shape[0] != expected_dim:
        raise DimensionError(
            f"action dimension mismatch: expected {expected_dim}, got {a.shape[0]}")
    return np.clip(a, -1.0, 1.0)


def _encode_image(img: np.ndarray) -> dict:
    arr = np.ascontiguousarray(img, dtype="<f4")
    return {"shape": list(arr.shape),
            "b64": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode_image(obj: dict, line_no: int) -> np.ndarray:
    try:
        shape = tuple(obj["shape"])
        raw = base64.b64decode(obj["b64"])
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
    except (KeyError, ValueError, TypeError) as exc:
        raise TrajectoryFormatError(
            f"line {line_no}: bad image field ({exc})") from exc
    return arr.copy()


def _encode_obs(obs: Observation) -> dict:
    return {"images": [_encode_image(img) for img in obs.images],
            "proprio": [float(v) for v in obs.proprio]}


def _decode_obs(obj: dict, line_no: int, key: str) -> Observation:
    if not isinstance(obj, dict) or "images" not in obj or "proprio" not in obj:
        raise TrajectoryFormatError(f"line {line_no}: field '{key}' malformed")
    images = [_decode_image(im, line_no) for im in obj["images"]]
    proprio = np.asarray(obj["proprio"], dtype=np.float32)
    return Observation(images=tuple(images), proprio=proprio)


def _transition_to_json(t: Transition) -> str:
    rec = {
        "s": _encode_obs(t.s),
        "a": [float(v) for v in t.a],
        "r": float(t.r),
        "s_next": _encode_obs(t.s_next),
        "done": bool(t.done),
        "intervened": bool(t.intervened),
        "mc_return": None if t.mc_return is None else float(t.mc_return),
    }
    return json.dumps(rec, separators=(",", ":"))


def _transition_from_json(line: str, line_no: int) -> Transition:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TrajectoryFormatError(
            f"line {line_no}: invalid JSON ({exc.msg})") from exc
    for key in ("s", "a", "r", "s_next", "done", "intervened", "mc_return"):
        if key not in rec:
            raise TrajectoryFormatError(f"line {line_no}: missing field '{key}'")
    return Transition(
        s=_decode_obs(rec["s"], line_no, "s"),
        a=np.asarray(rec["a"], dtype=np.float32),
        r=float(rec["r"]),
        s_next=_decode_obs(rec["s_next"], line_no, "s_next"),
        done=bool(rec["done"]),
        intervened=bool(rec["intervened"]),
        mc_return=None if rec["mc_return"] is None else float(rec["mc_return"]),
    )


def serialize_trajectory(traj: Trajectory, label: Optional[str] = None) -> str:
    header = {"format": TRAJ_FORMAT, "version": TRAJ_VERSION,
              "env": traj.env, "seed": int(traj.seed),
              "success": bool(traj.success)}
    if label is not None:
        header["label"] = label
    lines = [json.dumps(header, separators=(",", ":"))]
    lines.extend(_transition_to_json(t) for t in traj.transitions)
    return "\n".join(lines) + "\n"


def parse_trajectory(text: str) -> Trajectory:
    traj, _ = parse_trajectory_with_label(text)
    return traj


def parse_trajectory_with_label(text: str):
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise TrajectoryFormatError("line 1: empty trajectory file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise TrajectoryFormatError(
            f"line 1: invalid JSON header ({exc.msg})") from exc
    if header.get("format") != TRAJ_FORMAT:
        raise TrajectoryFormatError("line 1: missing field 'format'")
    if header.get("version") != TRAJ_VERSION:
        raise TrajectoryFormatError(
            f"line 1: unsupported version {header.get('version')!r}")
    transitions = [_transition_from_json(ln, i + 2)
                   for i, ln in enumerate(lines[1:])]
    traj = Trajectory(transitions=transitions,
                      success=bool(header.get("success", False)),
                      seed=int(header.get("seed", 0)),
                      env=str(header.get("env", "")))
    return traj, header.get("label")


def save_trajectories(path, trajectories, label: Optional[str] = None):
    with open(path, "w", encoding="ascii") as fh:
        for traj in trajectories:
            fh.write(serialize_trajectory(traj, label=label))


def _split_chunks(text):
    chunks = []
    chunk = []
    for ln in text.split("\n"):
        if not ln.strip():
            continue
        if ln.startswith('{"format"') and chunk:
            chunks.append("\n".join(chunk))
            chunk = []
        chunk.append(ln)
    if chunk:
        chunks.append("\n".join(chunk))
    return chunks


def load_trajectories(path):
    """Reads a .jsonl file holding one or more concatenated trajectories."""
    return [t for t, _ in load_trajectories_with_labels(path)]


def load_trajectories_with_labels(path):
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    return [parse_trajectory_with_label(chunk) for chunk in _split_chunks(text)]
