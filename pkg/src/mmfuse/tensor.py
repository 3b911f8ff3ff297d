"""Dense linear algebra helpers, deterministic RNG, and stable activations.

All numeric data is carried as 2-D float64 numpy arrays (row-major).
Column vectors are (n, 1) arrays; batches put items in columns.
"""

import math

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF


class ShapeError(ValueError):
    pass


def as_matrix(x):
    """Coerce to a 2-D float64 array; 1-D input becomes a column vector."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise ShapeError(f"expected 2-D data, got shape {a.shape}")
    return a


def matmul(a, b):
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


# ---------------------------------------------------------------------------
# activations

def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    # softplus(x) = x + log1p(exp(-x)) for x > 0, log1p(exp(x)) otherwise
    out = np.empty_like(x)
    pos = x > 0
    out[pos] = x[pos] + np.log1p(np.exp(-x[pos]))
    out[~pos] = np.log1p(np.exp(x[~pos]))
    return out


_ACTIVATIONS = {
    "relu": relu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "tanh": np.tanh,
}


def activation(kind, x):
    """Elementwise activation by name: relu, softplus, sigmoid or tanh."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(np.asarray(x, dtype=np.float64))


def activation_deriv(kind, pre):
    """Derivative of the activation, evaluated at the pre-activation."""
    pre = np.asarray(pre, dtype=np.float64)
    if kind == "relu":
        return (pre > 0).astype(np.float64)
    if kind == "softplus":
        return sigmoid(pre)
    if kind == "sigmoid":
        s = sigmoid(pre)
        return s * (1.0 - s)
    if kind == "tanh":
        t = np.tanh(pre)
        return 1.0 - t * t
    raise ValueError(f"unknown activation {kind!r}")


def softmax_stable(logits, axis=0):
    """Max-subtracted softmax along `axis` (default: down columns)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# deterministic RNG: splitmix64 seeding, xorshift64* core, Box-Muller normals


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed, *words):
    """Mix extra integer words into a seed for an independent substream."""
    s = splitmix64(seed & MASK64)
    for w in words:
        s = splitmix64((s ^ (w & MASK64)) & MASK64)
    return s


class RngState:
    """Seeded xorshift64* generator with Box-Muller Gaussian sampling.

    Identical seed gives an identical sample stream on every platform.
    Single-owner mutable: never share one instance across threads.
    """

    def __init__(self, seed):
        self.seed = seed & MASK64
        self.state = splitmix64(self.seed)
        if self.state == 0:
            self.state = 0x9E3779B97F4A7C15

    # -- serialization ------------------------------------------------------

    def get_state(self):
        return (self.seed, self.state)

    @classmethod
    def from_state(cls, state_tuple):
        seed, state = state_tuple
        rng = cls.__new__(cls)
        rng.seed = seed
        rng.state = state
        return rng

    # -- core stream --------------------------------------------------------

    def _next_u64(self):
        s = self.state
        s ^= (s >> 12)
        s ^= (s << 25) & MASK64
        s ^= (s >> 27)
        self.state = s
        return (s * 0x2545F4914F6CDD1D) & MASK64

    def uniforms(self, n):
        """n doubles uniform in [0, 1)."""
        out = [0.0] * n
        s = self.state
        for i in range(n):
            s ^= (s >> 12)
            s ^= (s << 25) & MASK64
            s ^= (s >> 27)
            out[i] = (((s * 0x2545F4914F6CDD1D) & MASK64) >> 11) * 1.1102230246251565e-16
        self.state = s
        return np.array(out, dtype=np.float64)

    def uniform(self, rows, cols, low=0.0, high=1.0):
        u = self.uniforms(rows * cols).reshape(rows, cols)
        return low + u * (high - low)

    def gaussians(self, n):
        """n i.i.d. standard normals via Box-Muller on the uniform stream."""
        pairs = (n + 1) // 2
        u = self.uniforms(2 * pairs)
        u1 = u[0::2]
        u2 = u[1::2]
        # shift u1 into (0, 1] so log is finite
        r = np.sqrt(-2.0 * np.log(1.0 - u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]

    def gaussian(self, rows, cols):
        return self.gaussians(rows * cols).reshape(rows, cols)

    def randint(self, n):
        """Integer uniform in [0, n)."""
        return int(self.uniforms(1)[0] * n)

    def shuffle(self, items):
        """Deterministic in-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = int(self.uniforms(1)[0] * (i + 1))
            items[i], items[j] = items[j], items[i]
        return items
