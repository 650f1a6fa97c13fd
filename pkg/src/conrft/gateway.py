"""Intervention interface: scripted oracle takeover and a remote console.

Both implementations answer the same per-step question (is an operator
overriding, and with what action). The scripted intervener watches for unsafe
contact or stalled progress and hands control to the environment's clean
expert for a fixed horizon. The remote gateway serves one WebSocket console:
JSON text messages in both directions, frames streamed out without ever
blocking the environment step, stale or disconnected input treated as
hands-off.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

log = logging.getLogger("conrft.gateway")

STALE_ACTION_SECONDS = 0.5


@dataclass(frozen=True)
class InterventionDecision:
    active: bool
    action: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.active != (self.action is not None):
            raise ValueError("action must be present exactly when active")


HANDS_OFF = InterventionDecision(active=False)


@dataclass
class ScriptedIntervenerConfig:
    trigger_unsafe: bool = True
    stuck_window: int = 15
    stuck_epsilon: float = 0.01
    takeover_horizon: int = 10

    def __post_init__(self):
        if self.stuck_window <= 0 or self.takeover_horizon <= 0:
            raise ValueError("intervener horizons must be positive")


class ScriptedIntervener:
    """Deterministic stand-in for an operator: takes over on unsafe contact
    or when the best progress over the recent window stalls, then plays the
    clean expert for a fixed number of steps."""

    def __init__(self, env, config: ScriptedIntervenerConfig | None = None):
        self.env = env
        self.config = config or ScriptedIntervenerConfig()
        self._dists = deque(maxlen=self.config.stuck_window + 1)
        self._takeover_left = 0

    def begin_episode(self):
        self._dists.clear()
        self._takeover_left = 0

    def decide(self, info) -> InterventionDecision:
        cfg = self.config
        if self._takeover_left > 0:
            self._takeover_left -= 1
            return InterventionDecision(
                active=True, action=self.env.oracle_action(0.0, None))
        self._dists.append(float(info["dist"]))
        triggered = bool(cfg.trigger_unsafe and info.get("unsafe", False))
        if not triggered and len(self._dists) == self._dists.maxlen:
            best_progress = self._dists[0] - min(list(self._dists)[1:])
            triggered = best_progress < cfg.stuck_epsilon
        if triggered:
            self._takeover_left = cfg.takeover_horizon - 1
            self._dists.clear()
            return InterventionDecision(
                active=True, action=self.env.oracle_action(0.0, None))
        return HANDS_OFF


def scripted_decide(intervener: ScriptedIntervener, info):
    return intervener.decide(info)


def encode_frame_png(image) -> str:
    """float [0,1] HxWxC array -> base64 PNG string."""
    from PIL import Image

    arr = (np.clip(np.asarray(image), 0.0, 1.0) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class RemoteGateway:
    """Single-operator WebSocket gateway.

    The interaction loop publishes frames (latest-wins mailbox drained by a
    sender thread) and polls remote_decide() every step; console control
    state lives in a latest-only mailbox guarded by one lock.
    """

    def __init__(self, port: int, host: str = "127.0.0.1",
                 clock=time.monotonic):
        self.host = host
        self.clock = clock
        self._lock = threading.Lock()
        self._conn = None
        self._takeover = False
        self._action = None
        self._action_stamp = -np.inf
        self._frame_cond = threading.Condition()
        self._frame = None
        self._closed = False

        from websockets.sync.server import serve

        self._server = serve(self._handle, host, port)
        self.port = self._server.socket.getsockname()[1]
        self._accept_thread = threading.Thread(
            target=self._server.serve_forever, name="gateway-accept",
            daemon=True)
        self._accept_thread.start()

    # --- lifecycle ---------------------------------------------------------
    def close(self):
        self._closed = True
        with self._frame_cond:
            self._frame_cond.notify_all()
        self._server.shutdown()
        self._accept_thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # --- interaction-loop API ----------------------------------------------
    def connected(self) -> bool:
        with self._lock:
            return self._conn is not None

    def publish_frame(self, payload: dict):
        """Queues the latest frame; never blocks the caller."""
        with self._frame_cond:
            self._frame = json.dumps({"type": "frame", **payload})
            self._frame_cond.notify()

    def remote_decide(self) -> InterventionDecision:
        with self._lock:
            if self._conn is None or not self._takeover:
                return HANDS_OFF
            if self._action is None:
                return HANDS_OFF
            if self.clock() - self._action_stamp > STALE_ACTION_SECONDS:
                return HANDS_OFF
            return InterventionDecision(
                active=True, action=np.asarray(self._action, dtype=np.float64))

    # --- connection handling -------------------------------------------------
    def _handle(self, conn):
        with self._lock:
            if self._conn is not None:
                occupied = True
            else:
                self._conn = conn
                occupied = False
        if occupied:
            log.warning("rejecting second console connection")
            conn.send(json.dumps({"type": "error",
                                  "error": "operator console already connected"}))
            conn.close(1008, "single-operator gateway is busy")
            return
        sender = threading.Thread(target=self._send_frames, args=(conn,),
                                  name="gateway-send", daemon=True)
        sender.start()
        try:
            for message in conn:
                self._dispatch(conn, message)
        except Exception as exc:  # noqa: BLE001
            log.info("console connection ended: %r", exc)
        finally:
            with self._lock:
                if self._takeover:
                    log.warning("console disconnected mid-takeover; "
                                "reverting to policy control")
                self._conn = None
                self._takeover = False
                self._action = None
            with self._frame_cond:
                self._frame_cond.notify_all()

    def _dispatch(self, conn, message):
        try:
            msg = json.loads(message)
        except (json.JSONDecodeError, TypeError):
            log.warning("malformed JSON from console; closing with 1002")
            conn.close(1002, "malformed JSON")
            return
        mtype = msg.get("type")
        if mtype == "takeover":
            with self._lock:
                self._takeover = bool(msg.get("on", False))
                if not self._takeover:
                    self._action = None
        elif mtype == "action":
            a = msg.get("a")
            if not isinstance(a, list) or not all(
                    isinstance(v, (int, float)) for v in a):
                log.warning("ignoring action message with bad payload: %r", a)
                return
            with self._lock:
                self._action = [float(v) for v in a]
                self._action_stamp = self.clock()
        elif mtype == "ping":
            conn.send(json.dumps({"type": "pong"}))
        else:
            log.warning("ignoring unknown message type %r", mtype)

    def _send_frames(self, conn):
        last_sent = None
        while not self._closed:
            with self._frame_cond:
                if self._frame is last_sent:
                    self._frame_cond.wait(timeout=0.25)
                frame = self._frame
            with self._lock:
                if self._conn is not conn:
                    return
            if frame is None or frame is last_sent:
                continue
            try:
                conn.send(frame)
            except Exception:  # noqa: BLE001
                return
            last_sent = frame


def serve(port: int, host: str = "127.0.0.1", clock=time.monotonic):
    """Starts a gateway; raises on a busy port. Close via handle.close()."""
    return RemoteGateway(port, host=host, clock=clock)
