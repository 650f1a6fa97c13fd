"""Backbone pretraining, freezing, and encode determinism."""

import numpy as np
import pytest

from conrft.encoder import (EncoderBackbone, FrozenBackboneError,
                            pretrain_backbone)
from conrft.envs import make_env
from conrft.types import Trajectory, Transition


def collect_oracle_demos(env_name, n, seed0=0, noise=0.2, max_steps=25):
    env = make_env(env_name)
    demos = []
    for i in range(n):
        rng = np.random.default_rng(seed0 + 900 + i)
        obs = env.reset(seed0 + i)
        transitions = []
        done = False
        while not done and len(transitions) < max_steps:
            a = env.oracle_action(noise, rng)
            obs_next, done, info = env.step(a)
            transitions.append(Transition(
                s=obs, a=np.asarray(a, dtype=np.float32), r=-0.05,
                s_next=obs_next, done=done, intervened=False))
            obs = obs_next
        demos.append(Trajectory(transitions=transitions,
                                success=info["success"], seed=seed0 + i,
                                env=env_name))
    return demos


@pytest.fixture(scope="module")
def reach_demos():
    return collect_oracle_demos("reach2d", 6)


class TestPretrain:
    def test_random_frozen_is_deterministic(self, reach_demos):
        b1 = pretrain_backbone(reach_demos, epochs=0, seed=7,
                               random_frozen=True)
        b2 = pretrain_backbone(reach_demos, epochs=0, seed=7,
                               random_frozen=True)
        assert b1.fingerprint() == b2.fingerprint()
        b3 = pretrain_backbone(reach_demos, epochs=0, seed=8,
                               random_frozen=True)
        assert b3.fingerprint() != b1.fingerprint()

    def test_repeat_pretrain_identical_fingerprint(self, reach_demos):
        b1 = pretrain_backbone(reach_demos, epochs=2, seed=3)
        b2 = pretrain_backbone(reach_demos, epochs=2, seed=3)
        assert b1.fingerprint() == b2.fingerprint()

    def test_bc_loss_decreases(self, reach_demos):
        backbone = pretrain_backbone(reach_demos, epochs=8, seed=1)
        losses = backbone.pretrain_losses
        assert len(losses) == 8
        assert losses[-1] < losses[0]

    def test_empty_demo_set_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            pretrain_backbone([], epochs=1, seed=0)


class TestEncode:
    def test_deterministic(self, reach_demos):
        backbone = pretrain_backbone(reach_demos, epochs=0, seed=5,
                                     random_frozen=True)
        obs = reach_demos[0].transitions[0].s
        np.testing.assert_array_equal(backbone.encode(obs),
                                      backbone.encode(obs))

    def test_goal_location_changes_embedding(self, reach_demos):
        backbone = pretrain_backbone(reach_demos, epochs=0, seed=5,
                                     random_frozen=True)
        env = make_env("reach2d", randomization_range=0.0)
        rng = np.random.default_rng(2)
        distinct = 0
        for _ in range(100):
            env.reset(0)
            env.goal = rng.uniform(0.2, 0.8, size=2)
            e1 = backbone.encode(env.observe())
            env.goal = rng.uniform(0.2, 0.8, size=2)
            e2 = backbone.encode(env.observe())
            if not np.array_equal(e1, e2):
                distinct += 1
        assert distinct == 100

    def test_shape_mismatch_rejected(self, reach_demos):
        backbone = pretrain_backbone(reach_demos, epochs=0, seed=5,
                                     random_frozen=True)
        obs = reach_demos[0].transitions[0].s
        bad = type(obs)(images=(obs.images[0],), proprio=obs.proprio)
        with pytest.raises(ValueError, match="views"):
            backbone.encode(bad)

    def test_fingerprint_unchanged_by_unrelated_training(self, reach_demos):
        backbone = pretrain_backbone(reach_demos, epochs=1, seed=4)
        before = backbone.fingerprint()
        obs = reach_demos[0].transitions[0].s
        for _ in range(50):
            backbone.encode(obs)
        assert backbone.fingerprint() == before

    def test_frozen_backbone_refuses_training_passes(self, reach_demos):
        backbone = pretrain_backbone(reach_demos, epochs=1, seed=4)
        views = [np.asarray(img)[None]
                 for img in reach_demos[0].transitions[0].s.images]
        proprio = reach_demos[0].transitions[0].s.proprio[None]
        with pytest.raises(FrozenBackboneError):
            backbone.forward_cached(views, proprio)

    def test_multi_task_pretraining_spans_action_dims(self):
        demos = (collect_oracle_demos("reach2d", 2)
                 + collect_oracle_demos("pickplace2d", 2))
        backbone = pretrain_backbone(demos, epochs=2, seed=0)
        assert backbone.frozen
        assert len(backbone.pretrain_losses) == 2
