"""Consistency-policy action head: noise schedule, one-step sampler, losses.

The head maps a noised action and its noise level directly to a clean action.
Skip/output scalings enforce the identity at the minimal noise level by
construction, and the noisy-action input is normalized so the largest noise
level does not saturate the first layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import MLP

SIGMA_DATA = 0.5


@dataclass(frozen=True)
class DiffusionSchedule:
    """Discretized noise horizon with boundaries k_1..k_M."""

    eps: float
    k_max: float
    num_boundaries: int
    rho: float
    boundaries: np.ndarray


def make_schedule(eps: float = 0.002, k_max: float = 80.0,
                  num_boundaries: int = 40, rho: float = 7.0) -> DiffusionSchedule:
    if num_boundaries < 2:
        raise ValueError(f"need at least 2 boundaries, got {num_boundaries}")
    if not 0.0 < eps < k_max:
        raise ValueError(f"need 0 < eps < k_max, got eps={eps}, k_max={k_max}")
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    m = num_boundaries
    i = np.arange(1, m + 1, dtype=np.float64)
    lo = eps ** (1.0 / rho)
    hi = k_max ** (1.0 / rho)
    boundaries = (lo + (i - 1.0) / (m - 1.0) * (hi - lo)) ** rho
    boundaries[0] = eps
    boundaries[-1] = k_max
    if not np.all(np.diff(boundaries) > 0):
        raise ValueError("schedule boundaries must be strictly increasing")
    return DiffusionSchedule(eps=eps, k_max=k_max, num_boundaries=m, rho=rho,
                             boundaries=boundaries)


def c_skip(k, eps, sigma_data=SIGMA_DATA):
    return sigma_data ** 2 / ((k - eps) ** 2 + sigma_data ** 2)


def c_out(k, eps, sigma_data=SIGMA_DATA):
    return sigma_data * (k - eps) / np.sqrt(k ** 2 + sigma_data ** 2)


def c_in(k, sigma_data=SIGMA_DATA):
    return 1.0 / np.sqrt(k ** 2 + sigma_data ** 2)


class ConsistencyHead:
    """Denoising action head: two hidden Mish layers of the given width."""

    def __init__(self, action_dim: int, embed_dim: int,
                 schedule: DiffusionSchedule, rng: np.random.Generator,
                 hidden: int = 256, dtype=np.float32,
                 sigma_data: float = SIGMA_DATA):
        self.action_dim = action_dim
        self.embed_dim = embed_dim
        self.eps = schedule.eps
        self.k_max = schedule.k_max
        self.sigma_data = sigma_data
        in_dim = action_dim + 2 + embed_dim
        self.net = MLP([in_dim, hidden, hidden, action_dim], rng, dtype=dtype)

    @property
    def dtype(self):
        return self.net.dtype

    def params(self):
        return self.net.params()

    def named_params(self, prefix="head."):
        return self.net.named_params(prefix)

    def copy(self):
        dup = object.__new__(ConsistencyHead)
        dup.action_dim = self.action_dim
        dup.embed_dim = self.embed_dim
        dup.eps = self.eps
        dup.k_max = self.k_max
        dup.sigma_data = self.sigma_data
        dup.net = self.net.copy()
        return dup

    def _features(self, a_noisy, k):
        scale = c_in(k, self.sigma_data)[:, None].astype(self.dtype)
        k_feat = np.stack([np.log(k), k / self.k_max], axis=1).astype(self.dtype)
        return scale * a_noisy.astype(self.dtype), k_feat

    def forward_batch(self, a_noisy, k, embedding):
        """f(a_noisy, k | embedding) for (N,A) actions and (N,) noise levels."""
        out, _ = self.forward_batch_cached(a_noisy, k, embedding)
        return out

    def forward_batch_cached(self, a_noisy, k, embedding):
        k = np.asarray(k, dtype=np.float64)
        scaled, k_feat = self._features(a_noisy, k)
        x = np.concatenate([scaled, k_feat, embedding.astype(self.dtype)], axis=1)
        raw, net_cache = self.net.forward_cached(x)
        skip = c_skip(k, self.eps, self.sigma_data)[:, None]
        outw = c_out(k, self.eps, self.sigma_data)[:, None]
        out = (skip * a_noisy.astype(np.float64)
               + outw * raw.astype(np.float64)).astype(self.dtype)
        return out, (net_cache, outw)

    def backward_batch(self, cache, g_out):
        """Head-parameter gradients given d loss / d f-output."""
        net_cache, outw = cache
        g_raw = (g_out * outw).astype(self.dtype)
        grads, _ = self.net.backward(net_cache, g_raw)
        return grads


def consistency_function(head: ConsistencyHead, a_noisy, k: float, embedding):
    """Single-vector evaluation of the boundary-respecting consistency map."""
    if not head.eps <= k <= head.k_max:
        raise ValueError(
            f"noise level {k} outside [{head.eps}, {head.k_max}]")
    a = np.atleast_2d(np.asarray(a_noisy))
    e = np.atleast_2d(np.asarray(embedding))
    out = head.forward_batch(a, np.full(a.shape[0], k), e)
    return out[0] if np.asarray(a_noisy).ndim == 1 else out


def sample_action_batch_cached(head: ConsistencyHead,
                               schedule: DiffusionSchedule,
                               embeddings, rng: np.random.Generator):
    """One-step generation with the reparameterized noise held in the cache.

    Returns (clipped actions, cache); the cache supports backward_batch with
    the clip mask applied, so gradients flow into the head parameters.
    """
    n = embeddings.shape[0]
    z = rng.standard_normal((n, head.action_dim))
    a_k = (schedule.k_max * z).astype(head.dtype)
    k = np.full(n, schedule.k_max)
    raw_out, cache = head.forward_batch_cached(a_k, k, embeddings)
    clipped = np.clip(raw_out, -1.0, 1.0)
    clip_mask = (np.abs(raw_out) < 1.0).astype(head.dtype)
    return clipped, (cache, clip_mask)


def sample_action_backward(head: ConsistencyHead, sample_cache, g_action):
    cache, clip_mask = sample_cache
    return head.backward_batch(cache, g_action * clip_mask)


def sample_action(head: ConsistencyHead, schedule: DiffusionSchedule,
                  embedding, rng: np.random.Generator):
    """Draws one action for a single state embedding."""
    out, _ = sample_action_batch_cached(
        head, schedule, np.atleast_2d(np.asarray(embedding)), rng)
    return out[0]


def make_policy_sampler(head: ConsistencyHead, schedule: DiffusionSchedule,
                        rng: np.random.Generator):
    """Closure sampling actions for batches of embeddings (no gradients)."""
    def sampler(embeddings):
        out, _ = sample_action_batch_cached(head, schedule, embeddings, rng)
        return out
    return sampler


def _draw_bc_noise(head, schedule, n, rng):
    """Per-element boundary index m ~ U[1, M-1] and unit noise."""
    m = rng.integers(1, schedule.num_boundaries, size=n)
    k = schedule.boundaries[m - 1]
    z = rng.standard_normal((n, head.action_dim))
    return k, z


def bc_consistency_with_noise(head: ConsistencyHead, embeddings, actions,
                              k, z):
    """BC term under explicit per-element noise levels k and unit noise z."""
    n = embeddings.shape[0]
    if n == 0:
        raise ValueError("batch must be non-empty")
    a = np.asarray(actions, dtype=head.dtype)
    a_noisy = (a + np.asarray(k)[:, None] * z).astype(head.dtype)
    f, cache = head.forward_batch_cached(a_noisy, k, embeddings)
    diff = (f - a).astype(np.float64)
    norms = np.sqrt(np.sum(diff * diff, axis=1))
    loss = float(np.mean(norms))
    safe = np.maximum(norms, 1e-12)
    g_out = (diff / safe[:, None]) / n
    grads = head.backward_batch(cache, g_out.astype(head.dtype))
    return loss, grads


def bc_consistency_term_and_grad(head: ConsistencyHead,
                                 schedule: DiffusionSchedule,
                                 embeddings, actions,
                                 rng: np.random.Generator):
    """Mean Euclidean distance between denoised perturbed actions and the
    clean actions, with gradients for the head parameters."""
    k, z = _draw_bc_noise(head, schedule, embeddings.shape[0], rng)
    return bc_consistency_with_noise(head, embeddings, actions, k, z)


def bc_consistency_term(head, schedule, embeddings, actions, rng):
    return bc_consistency_term_and_grad(head, schedule, embeddings, actions,
                                        rng)[0]


def actor_loss_and_grad(head: ConsistencyHead, schedule: DiffusionSchedule,
                        critic, batch, eta: float, beta: float,
                        rng: np.random.Generator):
    """-eta * E[min-ensemble Q(s, a_pi)] + beta * consistency BC term.

    Noise for both terms is always drawn, in a fixed order, so the loss is
    linear in (eta, beta) under a re-seeded generator.
    """
    if eta < 0 or beta < 0:
        raise ValueError(f"eta and beta must be >= 0, got ({eta}, {beta})")
    emb, proprio, actions = batch.emb, batch.proprio, batch.action
    n = emb.shape[0]

    if eta == 0.0:
        # keep the generator stream aligned without touching the critic
        rng.standard_normal((n, head.action_dim))
        q_term = 0.0
        q_grads = [np.zeros_like(p) for p in head.params()]
    else:
        a_pi, sample_cache = sample_action_batch_cached(head, schedule, emb,
                                                        rng)
        q_min, q_grad_a = critic.q_min_and_action_grad(emb, proprio, a_pi)
        q_term = float(np.mean(q_min, dtype=np.float64))
        g_action = (-eta / n) * q_grad_a
        q_grads = sample_action_backward(head, sample_cache,
                                         g_action.astype(head.dtype))

    if beta == 0.0:
        _draw_bc_noise(head, schedule, n, rng)
        bc_loss = 0.0
        bc_grads = None
    else:
        bc_loss, bc_grads = bc_consistency_term_and_grad(head, schedule, emb,
                                                         actions, rng)

    loss = -eta * q_term + beta * bc_loss
    if bc_grads is None:
        return loss, q_grads
    return loss, [qg + beta * bg for qg, bg in zip(q_grads, bc_grads)]


def actor_loss(head, schedule, critic, batch, eta, beta, rng):
    return actor_loss_and_grad(head, schedule, critic, batch, eta, beta,
                               rng)[0]
