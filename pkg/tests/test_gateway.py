"""Scripted intervener triggers and the WebSocket gateway protocol."""

import json
import time

import numpy as np
import pytest
from websockets.sync.client import connect

from conrft.envs import make_env
from conrft.gateway import (InterventionDecision, RemoteGateway,
                            ScriptedIntervener, ScriptedIntervenerConfig,
                            encode_frame_png, serve)


class TestInterventionDecision:
    def test_action_iff_active(self):
        InterventionDecision(active=True, action=np.zeros(2))
        InterventionDecision(active=False)
        with pytest.raises(ValueError):
            InterventionDecision(active=True)
        with pytest.raises(ValueError):
            InterventionDecision(active=False, action=np.zeros(2))


class TestScriptedIntervener:
    def _intervener(self, env_name="insert2d", **cfg):
        env = make_env(env_name)
        env.reset(0)
        return env, ScriptedIntervener(env, ScriptedIntervenerConfig(**cfg))

    def test_unsafe_triggers_immediately_with_oracle_action(self):
        env, intervener = self._intervener()
        decision = intervener.decide({"dist": 0.5, "unsafe": True})
        assert decision.active
        np.testing.assert_array_equal(decision.action,
                                      env.oracle_action(0.0, None))

    def test_monotone_progress_never_activates(self):
        _, intervener = self._intervener()
        dist = 1.0
        for _ in range(200):
            decision = intervener.decide({"dist": dist, "unsafe": False})
            assert not decision.active
            dist -= 0.02

    def test_frozen_policy_activates_within_window_plus_one(self):
        env, intervener = self._intervener(stuck_window=15)
        env.reset(3)
        activated_at = None
        for step in range(40):
            info = {"dist": env.dist_to_goal(), "unsafe": False}
            decision = intervener.decide(info)
            if decision.active:
                activated_at = step
                break
            env.step(np.zeros(2))  # frozen policy
        assert activated_at is not None and activated_at <= 16

    def test_takeover_holds_for_horizon_then_releases(self):
        _, intervener = self._intervener(stuck_window=3, takeover_horizon=4)
        decisions = [intervener.decide({"dist": 0.5, "unsafe": False})
                     for _ in range(20)]
        pattern = [d.active for d in decisions]
        first_active = pattern.index(True)
        active_run = pattern[first_active:].index(False)
        assert active_run == 4

    def test_deterministic_for_same_history(self):
        _, a = self._intervener(stuck_window=4)
        _, b = self._intervener(stuck_window=4)
        history = [{"dist": d, "unsafe": u}
                   for d, u in zip([0.5, 0.5, 0.49, 0.49, 0.49, 0.48],
                                   [False] * 6)]
        for info in history:
            da = a.decide(info)
            db = b.decide(info)
            assert da.active == db.active

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            ScriptedIntervenerConfig(stuck_window=0)
        with pytest.raises(ValueError):
            ScriptedIntervenerConfig(takeover_horizon=0)


@pytest.fixture()
def gateway():
    gw = serve(port=0)
    yield gw
    gw.close()


def url(gw):
    return f"ws://127.0.0.1:{gw.port}"


class TestRemoteGateway:
    def test_no_client_means_inactive(self, gateway):
        assert not gateway.remote_decide().active

    def test_takeover_and_action_echoed(self, gateway):
        with connect(url(gateway)) as ws:
            ws.send(json.dumps({"type": "takeover", "on": True}))
            ws.send(json.dumps({"type": "action", "a": [0.3, 0.0]}))
            deadline = time.monotonic() + 2.0
            decision = gateway.remote_decide()
            while not decision.active and time.monotonic() < deadline:
                time.sleep(0.005)
                decision = gateway.remote_decide()
            assert decision.active
            np.testing.assert_allclose(decision.action, [0.3, 0.0])

    def test_stale_action_goes_inactive(self):
        now = [0.0]
        gw = serve(port=0, clock=lambda: now[0])
        try:
            with connect(url(gw)) as ws:
                ws.send(json.dumps({"type": "takeover", "on": True}))
                ws.send(json.dumps({"type": "action", "a": [0.1, 0.1]}))
                deadline = time.monotonic() + 2.0
                while not gw.remote_decide().active \
                        and time.monotonic() < deadline:
                    time.sleep(0.005)
                assert gw.remote_decide().active
                now[0] = 0.4
                assert gw.remote_decide().active
                now[0] = 0.6
                assert not gw.remote_decide().active
        finally:
            gw.close()

    def test_release_takeover_goes_inactive(self, gateway):
        with connect(url(gateway)) as ws:
            ws.send(json.dumps({"type": "takeover", "on": True}))
            ws.send(json.dumps({"type": "action", "a": [0.5]}))
            deadline = time.monotonic() + 2.0
            while not gateway.remote_decide().active \
                    and time.monotonic() < deadline:
                time.sleep(0.005)
            ws.send(json.dumps({"type": "takeover", "on": False}))
            deadline = time.monotonic() + 2.0
            while gateway.remote_decide().active \
                    and time.monotonic() < deadline:
                time.sleep(0.005)
            assert not gateway.remote_decide().active

    def test_disconnect_mid_takeover_reverts(self, gateway):
        ws = connect(url(gateway))
        ws.send(json.dumps({"type": "takeover", "on": True}))
        ws.send(json.dumps({"type": "action", "a": [0.2, 0.2]}))
        deadline = time.monotonic() + 2.0
        while not gateway.remote_decide().active \
                and time.monotonic() < deadline:
            time.sleep(0.005)
        ws.close()
        deadline = time.monotonic() + 2.0
        while gateway.connected() and time.monotonic() < deadline:
            time.sleep(0.005)
        assert not gateway.remote_decide().active

    def test_frame_loopback_latency(self, gateway):
        with connect(url(gateway)) as ws:
            start = time.monotonic()
            gateway.publish_frame({
                "episode": 1, "step": 2,
                "image": encode_frame_png(np.zeros((8, 8, 3))),
                "proprio": [0.0], "policy_action": [0.0],
                "intervening": False,
                "metrics": {"success_rate_20": 0.0,
                            "intervention_rate_20": 0.0}})
            raw = ws.recv(timeout=2.0)
            elapsed = time.monotonic() - start
            msg = json.loads(raw)
            assert msg["type"] == "frame" and msg["step"] == 2
            assert elapsed < 0.2

    def test_control_roundtrip_within_200ms(self, gateway):
        with connect(url(gateway)) as ws:
            start = time.monotonic()
            ws.send(json.dumps({"type": "takeover", "on": True}))
            ws.send(json.dumps({"type": "action", "a": [0.9, -0.9]}))
            while not gateway.remote_decide().active:
                assert time.monotonic() - start < 0.2
                time.sleep(0.002)

    def test_second_connection_rejected(self, gateway):
        with connect(url(gateway)) as first:
            second = connect(url(gateway))
            msg = json.loads(second.recv(timeout=2.0))
            assert msg["type"] == "error"
            with pytest.raises(Exception):
                for _ in range(10):
                    second.recv(timeout=2.0)
            # first connection still serves control messages
            first.send(json.dumps({"type": "ping"}))
            assert json.loads(first.recv(timeout=2.0))["type"] == "pong"

    def test_malformed_json_closes_1002(self, gateway):
        from websockets.exceptions import ConnectionClosed

        with connect(url(gateway)) as ws:
            ws.send("{not json")
            with pytest.raises(ConnectionClosed) as excinfo:
                ws.recv(timeout=2.0)
            assert excinfo.value.rcvd.code == 1002

    def test_unknown_type_ignored_connection_survives(self, gateway):
        with connect(url(gateway)) as ws:
            ws.send(json.dumps({"type": "mystery"}))
            ws.send(json.dumps({"type": "ping"}))
            assert json.loads(ws.recv(timeout=2.0))["type"] == "pong"

    def test_start_stop_without_client(self):
        gw = serve(port=0)
        gw.close()

    def test_busy_port_raises(self, gateway):
        with pytest.raises(OSError):
            serve(port=gateway.port)
