# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Fused elementwise kernels for the training hot loop.

Each function mirrors a numpy implementation in conrft._kernels_py; the
dispatch in conrft.kernels picks whichever is available. Intermediates are
computed in double precision for both float32 and float64 arrays.
"""

from libc.math cimport exp, sqrt
from libc.stdint cimport int32_t

ctypedef fused floating:
    float
    double

# mish(x) = x * tanh(softplus(x)) computed from a single exp in the array's
# own precision: with u = e^x and w = u(u+2), tanh(softplus(x)) = w/(w+2)
# and sigmoid(x) = u/(u+1); beyond x=20 every factor saturates to 1.
DEF MISH_CAP = 20.0


cdef inline float _expf_poly(float v) nogil:
    # branch-free polynomial e^v for v <= MISH_CAP (so overflow is out of
    # reach): split v = k*ln2 + r with |r| <= ln2/2, degree-5 polynomial on
    # r (Cephes coefficients, ~1 ulp), scale by 2^k through the exponent
    # bits. Keeping everything arithmetic lets the compiler vectorize.
    cdef float t, n, r, p
    cdef int32_t k, bits
    if v < -87.0:
        return 0.0
    t = v * 1.442695040888963f
    n = (t + 12582912.0f) - 12582912.0f  # round-to-nearest via 1.5*2^23
    k = <int32_t> n
    r = v - n * 0.693359375f
    r = r - n * (-2.12194440e-4f)
    p = 1.9875691500e-4f
    p = p * r + 1.3981999507e-3f
    p = p * r + 8.3334519073e-3f
    p = p * r + 4.1665795894e-2f
    p = p * r + 1.6666665459e-1f
    p = p * r + 5.0000001201e-1f
    p = p * r * r + r + 1.0f
    bits = (k + 127) << 23
    return p * (<float*> &bits)[0]


def mish(floating[::1] x, floating[::1] out):
    """out[i] = x[i] * tanh(softplus(x[i]))"""
    cdef Py_ssize_t i, n = x.shape[0]
    cdef floating v, u, w
    with nogil:
        for i in range(n):
            v = x[i]
            if v > MISH_CAP:
                out[i] = v
            else:
                if floating is float:
                    u = _expf_poly(v)
                else:
                    u = exp(v)
                w = u * (u + 2.0)
                out[i] = v * (w / (w + 2.0))


def mish_vjp(floating[::1] x, floating[::1] gy, floating[::1] gx):
    """gx[i] = gy[i] * d mish/dx evaluated at x[i]"""
    cdef Py_ssize_t i, n = x.shape[0]
    cdef floating v, u, w, t, sig
    with nogil:
        for i in range(n):
            v = x[i]
            if v > MISH_CAP:
                gx[i] = gy[i]
            else:
                if floating is float:
                    u = _expf_poly(v)
                else:
                    u = exp(v)
                w = u * (u + 2.0)
                t = w / (w + 2.0)
                sig = u / (u + 1.0)
                gx[i] = gy[i] * (t + v * (1.0 - t * t) * sig)


def adam_step(floating[::1] p, floating[::1] g, floating[::1] m,
              floating[::1] v, double lr, double beta1, double beta2,
              double eps, double bc1, double bc2):
    """One Adam update, in place; bc1/bc2 are the bias corrections 1-beta^t."""
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double mi, vi, gi
    with nogil:
        for i in range(n):
            gi = <double> g[i]
            mi = beta1 * <double> m[i] + (1.0 - beta1) * gi
            vi = beta2 * <double> v[i] + (1.0 - beta2) * gi * gi
            m[i] = <floating> mi
            v[i] = <floating> vi
            p[i] = <floating> (<double> p[i]
                               - lr * (mi / bc1) / (sqrt(vi / bc2) + eps))


def polyak(floating[::1] target, floating[::1] online, double tau):
    """target = (1 - tau) * target + tau * online, in place."""
    cdef Py_ssize_t i, n = target.shape[0]
    with nogil:
        for i in range(n):
            target[i] = <floating> ((1.0 - tau) * <double> target[i]
                                    + tau * <double> online[i])
