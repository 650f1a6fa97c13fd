"""Pure-numpy implementations of the training hot-loop kernels.

Signature-compatible with the compiled conrft._speedups module; all
functions operate on 1-D contiguous arrays, in place where documented.
"""

import numpy as np


# mish(x) = x * tanh(softplus(x)) from a single exp in the array's own
# precision: with u = e^x and w = u(u+2), tanh(softplus(x)) = w/(w+2) and
# sigmoid(x) = u/(u+1); beyond the cap every factor saturates to 1.
_MISH_CAP = 20.0


def mish(x, out):
    two = x.dtype.type(2.0)
    u = np.exp(np.minimum(x, x.dtype.type(_MISH_CAP)))
    w = u * (u + two)
    y = x * (w / (w + two))
    np.copyto(out, np.where(x > _MISH_CAP, x, y), casting="unsafe")


def mish_vjp(x, gy, gx):
    one = x.dtype.type(1.0)
    two = x.dtype.type(2.0)
    u = np.exp(np.minimum(x, x.dtype.type(_MISH_CAP)))
    w = u * (u + two)
    t = w / (w + two)
    sig = u / (u + one)
    g = t + x * (one - t * t) * sig
    np.multiply(gy, np.where(x > _MISH_CAP, one, g), out=gx,
                casting="unsafe")


def adam_step(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    gd = np.asarray(g, dtype=np.float64)
    md = beta1 * np.asarray(m, dtype=np.float64) + (1.0 - beta1) * gd
    vd = beta2 * np.asarray(v, dtype=np.float64) + (1.0 - beta2) * gd * gd
    m[:] = md
    v[:] = vd
    pd = np.asarray(p, dtype=np.float64)
    p[:] = pd - lr * (md / bc1) / (np.sqrt(vd / bc2) + eps)


def polyak(target, online, tau):
    td = (1.0 - tau) * np.asarray(target, dtype=np.float64) \
        + tau * np.asarray(online, dtype=np.float64)
    target[:] = td
