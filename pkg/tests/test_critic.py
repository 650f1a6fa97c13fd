"""Backup targets, calibrated conservative loss, online TD loss, Polyak."""

import numpy as np
import pytest

from conrft.critic import (CriticEnsemble, FeatureBatch, backup_target,
                           calql_critic_loss, calql_critic_loss_and_grad,
                           online_critic_loss, online_critic_loss_and_grad,
                           polyak_update)
from helpers import grad_check

EMBED, PROPRIO, ACTION = 3, 2, 2


def zero_critic(rng, value=0.0, zero_targets=True):
    critic = CriticEnsemble(EMBED, PROPRIO, ACTION, rng, hidden=4,
                            dtype=np.float64)
    nets = critic.members + (critic.targets if zero_targets else [])
    for member in nets:
        for w in member.weights:
            w[:] = 0
        for b in member.biases:
            b[:] = 0
        member.biases[-1][:] = value
    return critic


def random_critic(rng, hidden=3):
    return CriticEnsemble(EMBED, PROPRIO, ACTION, rng, hidden=hidden,
                          dtype=np.float64)


def batch_of(rng, n=5, reward=-0.05, done=0.0, mc=None):
    return FeatureBatch(
        emb=rng.standard_normal((n, EMBED)),
        proprio=rng.standard_normal((n, PROPRIO)),
        action=rng.random((n, ACTION)) * 2 - 1,
        reward=np.full(n, reward, dtype=np.float64),
        emb_next=rng.standard_normal((n, EMBED)),
        proprio_next=rng.standard_normal((n, PROPRIO)),
        done=np.full(n, done, dtype=np.float64),
        mc_return=(np.full(n, mc, dtype=np.float64)
                   if mc is not None else None),
    )


def fixed_sampler(emb):
    """Deterministic stateless policy stand-in for oracle comparisons."""
    return np.tanh(emb[:, :ACTION])


class TestQValues:
    def test_zero_final_layers_output_zero(self):
        rng = np.random.default_rng(0)
        critic = random_critic(rng)
        for m in critic.members:
            m.weights[-1][:] = 0
            m.biases[-1][:] = 0
        q = critic.q_values(np.zeros((4, EMBED)), np.zeros((4, PROPRIO)),
                            np.zeros((4, ACTION)))
        np.testing.assert_array_equal(q, np.zeros((4, 2)))

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        critic = random_critic(rng)
        args = (rng.standard_normal((3, EMBED)),
                rng.standard_normal((3, PROPRIO)),
                rng.standard_normal((3, ACTION)))
        np.testing.assert_array_equal(critic.q_values(*args),
                                      critic.q_values(*args))

    def test_member_permutation_permutes_outputs(self):
        rng = np.random.default_rng(2)
        critic = random_critic(rng)
        args = (rng.standard_normal((3, EMBED)),
                rng.standard_normal((3, PROPRIO)),
                rng.standard_normal((3, ACTION)))
        before = critic.q_values(*args)
        critic.members = critic.members[::-1]
        after = critic.q_values(*args)
        np.testing.assert_array_equal(before[:, ::-1], after)

    def test_min_aggregate_bounded_by_members(self):
        rng = np.random.default_rng(3)
        critic = random_critic(rng)
        args = (rng.standard_normal((6, EMBED)),
                rng.standard_normal((6, PROPRIO)),
                rng.standard_normal((6, ACTION)))
        q = critic.q_values(*args)
        q_min = critic.q_min(*args)
        assert np.all(q_min[:, None] <= q)


class TestBackupTarget:
    def test_terminal_ignores_target_network(self):
        rng = np.random.default_rng(4)
        critic = zero_critic(rng, value=123.0, zero_targets=False)
        batch = batch_of(rng, reward=10.0, done=1.0)
        targets = backup_target(batch, fixed_sampler, critic, gamma=0.99)
        np.testing.assert_array_equal(targets, np.full(len(batch), 10.0))

    def test_arithmetic_against_scalar_oracle(self):
        rng = np.random.default_rng(5)
        critic = zero_critic(rng)
        for t in critic.targets:
            t.biases[-1][:] = 2.0  # constant target Q = 2
        batch = batch_of(rng, reward=-0.05, done=0.0)
        targets = backup_target(batch, fixed_sampler, critic, gamma=0.99)
        np.testing.assert_allclose(targets, -0.05 + 0.99 * 2.0, rtol=1e-12)

    def test_gamma_zero_gives_reward(self):
        rng = np.random.default_rng(6)
        critic = random_critic(rng)
        batch = batch_of(rng, reward=-0.05)
        targets = backup_target(batch, fixed_sampler, critic, gamma=0.0)
        np.testing.assert_array_equal(targets, batch.reward)


class TestCalqlLoss:
    def test_alpha_zero_is_half_td(self):
        rng = np.random.default_rng(7)
        critic = random_critic(rng)
        batch = batch_of(rng, mc=1.0)
        loss = calql_critic_loss(batch, fixed_sampler, critic, alpha=0.0,
                                 n_policy_actions=4, gamma=0.99)
        targets = backup_target(batch, fixed_sampler, critic, 0.99)
        td = 0.0
        for j in range(critic.n_critics):
            q = critic.q_values(batch.emb, batch.proprio, batch.action)[:, j]
            td += 0.5 * np.mean((q - targets) ** 2)
        assert loss == pytest.approx(td, rel=1e-12)

    def test_degenerate_zero_q_high_reference(self):
        # frozen oracle value: zero critic, terminal zero-reward steps, so
        # targets are exactly 0 and the TD term vanishes; the conservative
        # term clips at the reference value 9.85 for every sample, minus a
        # zero data-action mean, summed over both members
        rng = np.random.default_rng(8)
        critic = zero_critic(rng)
        batch = batch_of(rng, reward=0.0, done=1.0, mc=9.85)
        alpha = 0.01
        loss = calql_critic_loss(batch, fixed_sampler, critic, alpha=alpha,
                                 n_policy_actions=4, gamma=0.99)
        assert loss == pytest.approx(critic.n_critics * alpha * 9.85,
                                     rel=1e-12)

    def test_very_low_reference_matches_uncalibrated_variant(self):
        rng = np.random.default_rng(9)
        critic = random_critic(rng)
        batch = batch_of(rng, mc=-1e9)
        alpha = 0.37
        loss = calql_critic_loss(batch, fixed_sampler, critic, alpha=alpha,
                                 n_policy_actions=3, gamma=0.99)

        # independently coded uncalibrated conservative loss (no max clip)
        targets = backup_target(batch, fixed_sampler, critic, 0.99)
        emb_t = np.repeat(batch.emb, 3, axis=0)
        pro_t = np.repeat(batch.proprio, 3, axis=0)
        a_pol = fixed_sampler(emb_t)
        expected = 0.0
        for j in range(critic.n_critics):
            q_pol = critic.q_values(emb_t, pro_t, a_pol)[:, j]
            q_dat = critic.q_values(batch.emb, batch.proprio, batch.action)[:, j]
            expected += alpha * (np.mean(q_pol) - np.mean(q_dat))
            expected += 0.5 * np.mean((q_dat - targets) ** 2)
        assert loss == pytest.approx(expected, abs=1e-6)

    def test_alpha_linearity(self):
        rng = np.random.default_rng(10)
        critic = random_critic(rng)
        batch = batch_of(rng, mc=0.5)

        def value(alpha):
            return calql_critic_loss(batch, fixed_sampler, critic, alpha,
                                     n_policy_actions=4, gamma=0.99)

        base = value(0.0)
        slopes = [(value(a) - base) / a for a in (0.005, 0.01, 0.02)]
        assert slopes[0] == pytest.approx(slopes[1], abs=1e-9)
        assert slopes[1] == pytest.approx(slopes[2], abs=1e-9)

    def test_calibration_floor_dominates_unclipped(self):
        rng = np.random.default_rng(11)
        critic = random_critic(rng)
        batch = batch_of(rng, mc=0.2)
        clipped = calql_critic_loss(batch, fixed_sampler, critic, 1.0, 4, 0.99)
        unclipped = calql_critic_loss(batch_of(np.random.default_rng(11), mc=-1e9),
                                      fixed_sampler, critic, 1.0, 4, 0.99)
        assert clipped >= unclipped - 1e-9

    def test_missing_mc_return_rejected(self):
        rng = np.random.default_rng(12)
        critic = random_critic(rng)
        batch = batch_of(rng, mc=None)
        with pytest.raises(ValueError, match="mc_return"):
            calql_critic_loss(batch, fixed_sampler, critic, 0.01, 4, 0.99)

    def test_gradient_matches_finite_differences(self):
        for seed in range(5):
            rng = np.random.default_rng(300 + seed)
            critic = random_critic(rng)
            batch = batch_of(rng, n=4, mc=0.3)

            def loss_fn():
                return calql_critic_loss_and_grad(
                    batch, fixed_sampler, critic, alpha=0.05,
                    n_policy_actions=2, gamma=0.99)

            err, _, _ = grad_check(loss_fn, critic.params())
            assert err < 1e-3, f"seed {seed}: rel error {err}"


class TestOnlineLoss:
    def test_zero_when_q_equals_targets(self):
        rng = np.random.default_rng(13)
        critic = zero_critic(rng)
        batch = batch_of(rng, reward=0.0, done=1.0)
        assert online_critic_loss(batch, fixed_sampler, critic, 0.99) == 0.0

    def test_constant_offset_closed_form(self):
        rng = np.random.default_rng(14)
        critic = zero_critic(rng)
        delta = 0.7
        for m in critic.members:
            m.biases[-1][:] = delta  # online Q = delta, targets stay 0
        batch = batch_of(rng, reward=0.0, done=0.0)
        loss = online_critic_loss(batch, fixed_sampler, critic, 0.99)
        assert loss == pytest.approx(critic.n_critics * delta ** 2, rel=1e-12)

    def test_equals_calql_alpha_zero_up_to_half(self):
        rng = np.random.default_rng(15)
        critic = random_critic(rng)
        batch = batch_of(rng, mc=1.0)
        online = online_critic_loss(batch, fixed_sampler, critic, 0.99)
        calql = calql_critic_loss(batch, fixed_sampler, critic, 0.0, 4, 0.99)
        assert online == pytest.approx(2.0 * calql, rel=1e-12)

    def test_empty_batch_rejected(self):
        rng = np.random.default_rng(16)
        critic = random_critic(rng)
        batch = batch_of(rng, n=0)
        with pytest.raises(ValueError, match="non-empty"):
            online_critic_loss(batch, fixed_sampler, critic, 0.99)

    def test_gradient_matches_finite_differences(self):
        for seed in range(5):
            rng = np.random.default_rng(400 + seed)
            critic = random_critic(rng)
            batch = batch_of(rng, n=4)

            def loss_fn():
                return online_critic_loss_and_grad(batch, fixed_sampler,
                                                   critic, gamma=0.99)

            err, _, _ = grad_check(loss_fn, critic.params())
            assert err < 1e-3, f"seed {seed}: rel error {err}"


class TestPolyak:
    def test_tau_one_copies(self):
        rng = np.random.default_rng(17)
        critic = random_critic(rng)
        critic.polyak_update(1.0)
        for m, t in zip(critic.members, critic.targets):
            for pm, pt in zip(m.params(), t.params()):
                np.testing.assert_array_equal(pm, pt)

    def test_tau_zero_keeps_targets(self):
        rng = np.random.default_rng(18)
        critic = random_critic(rng)
        before = [p.copy() for t in critic.targets for p in t.params()]
        # perturb online nets so a faulty update would show
        for m in critic.members:
            for p in m.params():
                p += 1.0
        critic.polyak_update(0.0)
        after = [p for t in critic.targets for p in t.params()]
        for b, a in zip(before, after):
            np.testing.assert_array_equal(b, a)

    def test_small_tau_matches_scalar_oracle(self):
        target = [np.array([1.0, -2.0])]
        online = [np.array([3.0, 4.0])]
        polyak_update(target, online, 0.005)
        np.testing.assert_allclose(
            target[0],
            [0.995 * 1.0 + 0.005 * 3.0, 0.995 * -2.0 + 0.005 * 4.0],
            rtol=1e-12)

    def test_targets_start_equal_to_members(self):
        rng = np.random.default_rng(19)
        critic = random_critic(rng)
        for m, t in zip(critic.members, critic.targets):
            for pm, pt in zip(m.params(), t.params()):
                np.testing.assert_array_equal(pm, pt)
