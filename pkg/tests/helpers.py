"""Shared test utilities: finite differences and small fixtures."""

import numpy as np

from conrft.nn import assign_flat, flatten_params
from conrft.types import Observation, Trajectory, Transition


def finite_diff(f, flat, h=1e-6):
    """Central finite differences of a scalar function of a flat vector."""
    g = np.zeros_like(flat)
    for i in range(flat.size):
        up = flat.copy()
        up[i] += h
        down = flat.copy()
        down[i] -= h
        g[i] = (f(up) - f(down)) / (2.0 * h)
    return g


def rel_error(a, b):
    denom = max(float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / denom


def grad_check(loss_fn, params, h=1e-6):
    """Compares loss_fn's returned analytic gradient with finite differences.

    loss_fn(flat) must return (loss, grads-aligned-with-params).
    """
    flat0 = flatten_params(params)

    def value_only(flat):
        assign_flat(params, flat)
        return loss_fn()[0]

    assign_flat(params, flat0)
    _, grads = loss_fn()
    analytic = flatten_params(grads)
    numeric = finite_diff(value_only, flat0, h=h)
    assign_flat(params, flat0)
    return rel_error(analytic, numeric), analytic, numeric


def make_obs(rng, image_shapes=((3, 3, 2),), proprio_dim=2):
    images = tuple(rng.random(s, dtype=np.float32) for s in image_shapes)
    return Observation(images=images,
                       proprio=rng.random(proprio_dim, dtype=np.float32))


def make_transition(rng, done=False, intervened=False, r=-0.05,
                    mc_return=None, action_dim=2):
    return Transition(
        s=make_obs(rng),
        a=(rng.random(action_dim, dtype=np.float32) * 2 - 1),
        r=r,
        s_next=make_obs(rng),
        done=done,
        intervened=intervened,
        mc_return=mc_return,
    )


def make_trajectory(rng, n_steps=5, success=True, seed=0, env="reach2d"):
    transitions = [make_transition(rng, done=(i == n_steps - 1),
                                   r=(10.0 if (i == n_steps - 1 and success)
                                      else -0.05))
                   for i in range(n_steps)]
    return Trajectory(transitions=transitions, success=success, seed=seed,
                      env=env)
