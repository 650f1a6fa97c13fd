"""Minimal dense/conv network substrate with hand-written backward passes.

Everything trains through explicit vector-Jacobian products so gradients can
be validated against finite differences, and parameters are plain numpy
arrays so checkpoints and fingerprints stay byte-stable. Hidden activations
are Mish throughout.
"""

from __future__ import annotations

import numpy as np

from . import kernels


def he_normal(rng: np.random.Generator, fan_in: int, shape, dtype):
    scale = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape, dtype=np.float64) * scale).astype(dtype)


class MLP:
    """Fully-connected stack, Mish on hidden layers, linear output."""

    def __init__(self, dims, rng: np.random.Generator, dtype=np.float32):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        self.dims = tuple(int(d) for d in dims)
        self.dtype = np.dtype(dtype)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            self.weights.append(he_normal(rng, fan_in, (fan_in, fan_out), dtype))
            self.biases.append(np.zeros(fan_out, dtype=dtype))

    @property
    def n_layers(self):
        return len(self.weights)

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def named_params(self, prefix=""):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{prefix}w{i}", w))
            out.append((f"{prefix}b{i}", b))
        return out

    def forward(self, x):
        h = x
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = kernels.mish(h)
        return h

    def forward_cached(self, x):
        inputs = []
        preacts = []
        h = x
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            if i < last:
                preacts.append(z)
                h = kernels.mish(z)
            else:
                h = z
        return h, (inputs, preacts)

    def backward(self, cache, gy):
        """Returns (grads aligned with params(), grad wrt the input)."""
        inputs, preacts = cache
        gws = [None] * self.n_layers
        gbs = [None] * self.n_layers
        g = gy
        for i in range(self.n_layers - 1, -1, -1):
            if i < self.n_layers - 1:
                g = kernels.mish_vjp(preacts[i], g)
            gws[i] = inputs[i].T @ g
            gbs[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        grads = []
        for gw, gb in zip(gws, gbs):
            grads.extend((gw, gb))
        return grads, g

    def copy(self):
        dup = object.__new__(MLP)
        dup.dims = self.dims
        dup.dtype = self.dtype
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        return dup


class Conv2d:
    """3x3 strided convolution on NHWC arrays, via im2col."""

    def __init__(self, in_ch, out_ch, rng, dtype=np.float32, ksize=3, stride=2):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.ksize = ksize
        self.stride = stride
        self.pad = ksize // 2
        fan_in = ksize * ksize * in_ch
        self.w = he_normal(rng, fan_in, (fan_in, out_ch), dtype)
        self.b = np.zeros(out_ch, dtype=dtype)

    def out_hw(self, h, w):
        k, s, p = self.ksize, self.stride, self.pad
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def _im2col(self, x):
        n, h, w, c = x.shape
        k, s, p = self.ksize, self.stride, self.pad
        ho, wo = self.out_hw(h, w)
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        cols = np.empty((n, ho, wo, k * k * c), dtype=x.dtype)
        for ki in range(k):
            for kj in range(k):
                patch = xp[:, ki:ki + ho * s:s, kj:kj + wo * s:s, :]
                cols[..., (ki * k + kj) * c:(ki * k + kj + 1) * c] = patch
        return cols

    def forward_cached(self, x):
        n, h, w, _ = x.shape
        ho, wo = self.out_hw(h, w)
        cols = self._im2col(x)
        flat = cols.reshape(-1, cols.shape[-1])
        y = (flat @ self.w + self.b).reshape(n, ho, wo, self.out_ch)
        return y, (x.shape, flat)

    def backward(self, cache, gy):
        x_shape, flat = cache
        n, h, w, c = x_shape
        k, s, p = self.ksize, self.stride, self.pad
        ho, wo = self.out_hw(h, w)
        gy_flat = gy.reshape(-1, self.out_ch)
        gw = flat.T @ gy_flat
        gb = gy_flat.sum(axis=0)
        gcols = (gy_flat @ self.w.T).reshape(n, ho, wo, k * k * c)
        gxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=gy.dtype)
        for ki in range(k):
            for kj in range(k):
                gxp[:, ki:ki + ho * s:s, kj:kj + wo * s:s, :] += \
                    gcols[..., (ki * k + kj) * c:(ki * k + kj + 1) * c]
        gx = gxp[:, p:p + h, p:p + w, :]
        return [gw, gb], gx


class ConvStack:
    """Conv2d blocks with Mish between them, flattened at the end."""

    def __init__(self, in_shape, channels, rng, dtype=np.float32):
        self.in_shape = tuple(in_shape)  # (H, W, C)
        h, w, c = in_shape
        self.convs = []
        for out_ch in channels:
            conv = Conv2d(c, out_ch, rng, dtype=dtype)
            self.convs.append(conv)
            h, w = conv.out_hw(h, w)
            c = out_ch
        self.out_dim = h * w * c

    def params(self):
        out = []
        for conv in self.convs:
            out.extend((conv.w, conv.b))
        return out

    def named_params(self, prefix=""):
        out = []
        for i, conv in enumerate(self.convs):
            out.append((f"{prefix}conv{i}_w", conv.w))
            out.append((f"{prefix}conv{i}_b", conv.b))
        return out

    def forward_cached(self, x):
        caches = []
        preacts = []
        h = x
        for conv in self.convs:
            z, cache = conv.forward_cached(h)
            caches.append(cache)
            preacts.append(z)
            h = kernels.mish(z)
        return h.reshape(h.shape[0], -1), (caches, preacts, h.shape)

    def forward(self, x):
        return self.forward_cached(x)[0]

    def backward(self, cache, gflat):
        caches, preacts, out_shape = cache
        g = gflat.reshape(out_shape)
        grads = []
        for conv, conv_cache, z in zip(reversed(self.convs), reversed(caches),
                                       reversed(preacts)):
            g = kernels.mish_vjp(z, g)
            layer_grads, g = conv.backward(conv_cache, g)
            grads = layer_grads + grads
        return grads, g


class Adam:
    """Adam over a list of parameter arrays, updated in place."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        self.t += 1
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = np.ascontiguousarray(g, dtype=p.dtype)
            kernels.adam_step(p, g, m, v, self.lr, self.beta1, self.beta2,
                              self.eps, self.t)


def clip_grad_norm(grads, max_norm):
    """Scales grads in place so their global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads:
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def flatten_params(params):
    return np.concatenate([np.asarray(p, dtype=np.float64).ravel()
                           for p in params])


def assign_flat(params, flat):
    offset = 0
    for p in params:
        n = p.size
        p[:] = flat[offset:offset + n].reshape(p.shape).astype(p.dtype)
        offset += n
    if offset != flat.size:
        raise ValueError("flat vector size does not match parameters")
