"""Q-function ensemble with delayed targets and both stage losses.

The offline loss adds a calibrated conservative term: policy-action Q-values
are penalized only where they exceed the stored Monte-Carlo return of the
behavior data, and the penalty is compensated on dataset actions. The online
loss is the plain squared TD error. Both are summed over ensemble members,
and the actor-facing aggregate is the ensemble minimum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .nn import MLP


@dataclass
class FeatureBatch:
    """Training batch in feature space (frozen-encoder embeddings)."""

    emb: np.ndarray
    proprio: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    emb_next: np.ndarray
    proprio_next: np.ndarray
    done: np.ndarray
    mc_return: Optional[np.ndarray] = None

    def __len__(self):
        return self.emb.shape[0]


class CriticEnsemble:
    """Independent Q networks plus Polyak-averaged target copies."""

    def __init__(self, embed_dim: int, proprio_dim: int, action_dim: int,
                 rng: np.random.Generator, n_critics: int = 2,
                 hidden: int = 256, dtype=np.float32):
        if n_critics < 2:
            raise ValueError("ensemble needs at least 2 members")
        in_dim = embed_dim + proprio_dim + action_dim
        self.embed_dim = embed_dim
        self.proprio_dim = proprio_dim
        self.action_dim = action_dim
        self.members = [MLP([in_dim, hidden, hidden, 1], rng, dtype=dtype)
                        for _ in range(n_critics)]
        self.targets = [m.copy() for m in self.members]

    @property
    def n_critics(self):
        return len(self.members)

    @property
    def dtype(self):
        return self.members[0].dtype

    def params(self):
        out = []
        for m in self.members:
            out.extend(m.params())
        return out

    def named_params(self, prefix="critic."):
        out = []
        for i, m in enumerate(self.members):
            out.extend(m.named_params(f"{prefix}q{i}."))
        for i, m in enumerate(self.targets):
            out.extend(m.named_params(f"{prefix}target_q{i}."))
        return out

    def _join(self, emb, proprio, action):
        return np.concatenate([np.asarray(emb, dtype=self.dtype),
                               np.asarray(proprio, dtype=self.dtype),
                               np.asarray(action, dtype=self.dtype)], axis=1)

    def q_values(self, emb, proprio, action):
        """Per-member Q values, shape (N, n_critics)."""
        x = self._join(np.atleast_2d(emb), np.atleast_2d(proprio),
                       np.atleast_2d(action))
        cols = [m.forward(x)[:, 0] for m in self.members]
        out = np.stack(cols, axis=1)
        return out[0] if np.asarray(emb).ndim == 1 else out

    def q_min(self, emb, proprio, action):
        return self.q_values(emb, proprio, action).min(axis=-1)

    def target_q_min(self, emb, proprio, action):
        x = self._join(emb, proprio, action)
        cols = [m.forward(x)[:, 0] for m in self.targets]
        return np.stack(cols, axis=1).min(axis=1)

    def q_min_and_action_grad(self, emb, proprio, action):
        """Ensemble-min Q and its gradient with respect to the action."""
        x = self._join(emb, proprio, action)
        outs = []
        caches = []
        for m in self.members:
            y, cache = m.forward_cached(x)
            outs.append(y[:, 0])
            caches.append(cache)
        q = np.stack(outs, axis=1)
        winner = np.argmin(q, axis=1)
        n = x.shape[0]
        grad_a = np.zeros((n, self.action_dim), dtype=self.dtype)
        gy = np.zeros((n, 1), dtype=self.dtype)
        for j, m in enumerate(self.members):
            mask = (winner == j)
            if not mask.any():
                continue
            gy[:, 0] = mask.astype(self.dtype)
            _, gx = m.backward(caches[j], gy)
            grad_a[mask] = gx[mask, -self.action_dim:]
        return q.min(axis=1), grad_a

    def polyak_update(self, tau: float):
        for online, target in zip(self.members, self.targets):
            polyak_update(target.params(), online.params(), tau)


def polyak_update(target_params, online_params, tau: float):
    """target <- (1 - tau) * target + tau * online, elementwise in place."""
    if len(target_params) != len(online_params):
        raise ValueError("parameter lists differ in length")
    for t, o in zip(target_params, online_params):
        kernels.polyak(t, o, tau)


def backup_target(batch: FeatureBatch, policy_sampler,
                  ensemble: CriticEnsemble, gamma: float) -> np.ndarray:
    """r + gamma * (1 - done) * min-target-Q(s', a'), a' ~ current policy.

    One next action per element; no gradient flows anywhere.
    """
    a_next = policy_sampler(batch.emb_next)
    q_next = ensemble.target_q_min(batch.emb_next, batch.proprio_next, a_next)
    reward = np.asarray(batch.reward, dtype=np.float64)
    done = np.asarray(batch.done, dtype=np.float64)
    return reward + gamma * (1.0 - done) * q_next.astype(np.float64)


def calql_critic_loss_and_grad(batch: FeatureBatch, policy_sampler,
                               ensemble: CriticEnsemble, alpha: float,
                               n_policy_actions: int, gamma: float):
    """Calibrated conservative loss, summed over ensemble members.

    Per member: alpha * (mean over policy actions of max(Q, mc_return)
    - mean over data actions of Q) + 0.5 * mean squared TD error.
    """
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    if batch.mc_return is None:
        raise ValueError("calibrated loss needs mc_return on every element")
    if n_policy_actions < 1:
        raise ValueError("n_policy_actions must be >= 1")
    n = len(batch)
    targets = backup_target(batch, policy_sampler, ensemble, gamma)
    ref_value = np.asarray(batch.mc_return, dtype=np.float64)

    emb_tiled = np.repeat(batch.emb, n_policy_actions, axis=0)
    proprio_tiled = np.repeat(batch.proprio, n_policy_actions, axis=0)
    ref_tiled = np.repeat(ref_value, n_policy_actions)
    a_pol = policy_sampler(emb_tiled)

    x_data = ensemble._join(batch.emb, batch.proprio, batch.action)
    x_pol = ensemble._join(emb_tiled, proprio_tiled, a_pol)
    n_pol = x_pol.shape[0]
    x_all = np.concatenate([x_data, x_pol], axis=0)

    total = 0.0
    grads = []
    for m in ensemble.members:
        q_all, cache = m.forward_cached(x_all)
        qd = q_all[:n, 0].astype(np.float64)
        qp = q_all[n:, 0].astype(np.float64)

        clipped = np.maximum(qp, ref_tiled)
        conservative = float(np.mean(clipped) - np.mean(qd))
        td_err = qd - targets
        td = 0.5 * float(np.mean(td_err ** 2))
        total += alpha * conservative + td

        g_all = np.empty((n + n_pol, 1), dtype=np.float64)
        g_all[:n, 0] = (-alpha / n) + td_err / n
        g_all[n:, 0] = alpha * (qp > ref_tiled).astype(np.float64) / n_pol
        member_grads, _ = m.backward(cache, g_all.astype(ensemble.dtype))
        grads.extend(member_grads)
    return total, grads


def calql_critic_loss(batch, policy_sampler, ensemble, alpha,
                      n_policy_actions, gamma):
    return calql_critic_loss_and_grad(batch, policy_sampler, ensemble, alpha,
                                      n_policy_actions, gamma)[0]


def online_critic_loss_and_grad(batch: FeatureBatch, policy_sampler,
                                ensemble: CriticEnsemble, gamma: float):
    """Plain squared TD error, summed over ensemble members."""
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    n = len(batch)
    targets = backup_target(batch, policy_sampler, ensemble, gamma)
    x_data = ensemble._join(batch.emb, batch.proprio, batch.action)
    total = 0.0
    grads = []
    for m in ensemble.members:
        q_data, cache = m.forward_cached(x_data)
        td_err = q_data[:, 0].astype(np.float64) - targets
        total += float(np.mean(td_err ** 2))
        gy = (2.0 * td_err / n)[:, None].astype(ensemble.dtype)
        member_grads, _ = m.backward(cache, gy)
        grads.extend(member_grads)
    return total, grads


def online_critic_loss(batch, policy_sampler, ensemble, gamma):
    return online_critic_loss_and_grad(batch, policy_sampler, ensemble,
                                       gamma)[0]
