"""Dense layers with explicit backward passes, Adam, cross-entropy,
finite-difference gradient checking, and binary parameter checkpoints.
"""

import math
import struct

import numpy as np

from .tensor import ShapeError, activation, activation_deriv

CHECKPOINT_MAGIC = b"FVW1"
CHECKPOINT_VERSION = 1


class StateError(RuntimeError):
    pass


class ParamStore:
    """Named (parameter, gradient) pairs spanning one model."""

    def __init__(self):
        self.params = {}
        self.grads = {}

    def add(self, name, value):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def names(self):
        return list(self.params)

    def zero_grads(self):
        for g in self.grads.values():
            g[:] = 0.0

    def num_elements(self):
        return sum(p.size for p in self.params.values())


def glorot_uniform(rng, out_dim, in_dim):
    limit = math.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(out_dim, in_dim, -limit, limit)


class DenseLayer:
    """Affine map with optional activation; W is out x in, b is out x 1.

    Inputs are (in_dim, batch); forward caches what backward needs.
    """

    def __init__(self, store, name, in_dim, out_dim, act=None, rng=None):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.act = act
        if rng is None:
            w0 = np.zeros((out_dim, in_dim))
        else:
            w0 = glorot_uniform(rng, out_dim, in_dim)
        self.W = store.add(name + ".W", w0)
        self.b = store.add(name + ".b", np.zeros((out_dim, 1)))
        self.dW = store.grads[name + ".W"]
        self.db = store.grads[name + ".b"]
        self._x = None
        self._pre = None

    def forward(self, x):
        if x.shape[0] != self.in_dim:
            raise ShapeError(
                f"{self.name}: expected input rows {self.in_dim}, got {x.shape}")
        self._x = x
        self._pre = self.W @ x + self.b
        if self.act is None:
            return self._pre
        return activation(self.act, self._pre)

    def backward(self, grad_out):
        if self._x is None:
            raise StateError(f"{self.name}: backward called before forward")
        if grad_out.shape != self._pre.shape:
            raise ShapeError(
                f"{self.name}: grad shape {grad_out.shape} != {self._pre.shape}")
        if self.act is None:
            grad_pre = grad_out
        else:
            grad_pre = grad_out * activation_deriv(self.act, self._pre)
        self.dW += grad_pre @ self._x.T
        self.db += grad_pre.sum(axis=1, keepdims=True)
        return self.W.T @ grad_pre


class AdamState:
    """Adam with bias correction; zeroes gradients after each step."""

    def __init__(self, store, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8,
                 clip_norm=None):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {n: np.zeros_like(p) for n, p in store.params.items()}
        self.v = {n: np.zeros_like(p) for n, p in store.params.items()}

    def step(self):
        self.t += 1
        if self.clip_norm is not None:
            total = math.sqrt(sum(float((g * g).sum())
                                  for g in self.store.grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                for g in self.store.grads.values():
                    g *= scale
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.store.params.items():
            g = self.store.grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        self.store.zero_grads()


def cross_entropy(probs, targets):
    """Mean negative log-likelihood and the gradient wrt pre-softmax logits.

    probs columns must already sum to 1 (output of softmax_stable);
    the fused gradient is (P - onehot(y)) / N.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n_classes, n = probs.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} != ({n},)")
    if targets.min() < 0 or targets.max() >= n_classes:
        raise ValueError(f"target out of range [0, {n_classes})")
    picked = probs[targets, np.arange(n)]
    loss = -np.log(np.maximum(picked, 1e-12)).mean()
    grad_logits = probs.copy()
    grad_logits[targets, np.arange(n)] -= 1.0
    grad_logits /= n
    return loss, grad_logits


def gradient_check(loss_fn, store, h=1e-5, max_coords_per_param=None, rng=None):
    """Max relative error between store.grads and central finite differences.

    `loss_fn` must be a deterministic forward-only closure; analytic
    gradients must already be populated in the store.  Optionally checks
    only a random subset of coordinates per parameter.
    """
    base = loss_fn()
    if not np.isfinite(base):
        raise ValueError(f"non-finite loss {base} in gradient check")
    worst = 0.0
    for name, p in store.params.items():
        g = store.grads[name]
        flat = p.reshape(-1)
        idx = range(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            if rng is None:
                raise ValueError("subset sampling needs an rng")
            idx = sorted({rng.randint(flat.size)
                          for _ in range(max_coords_per_param)})
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise ValueError(f"non-finite loss perturbing {name}[{i}]")
            numeric = (lp - lm) / (2.0 * h)
            analytic = g.reshape(-1)[i]
            err = abs(numeric - analytic) / max(abs(numeric) + abs(analytic), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint format: magic "FVW1", u32 version, u32 count, then per parameter
# u16 name length, name bytes (utf-8), u32 rows, u32 cols, rows*cols f64 LE


class CheckpointError(IOError):
    pass


def save_checkpoint(store, path):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(store.params)))
        for name, p in store.params.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<II", p.shape[0], p.shape[1]))
            f.write(p.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back as an ordered {name: array} dict."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            rows, cols = struct.unpack("<II", f.read(8))
            raw = f.read(8 * rows * cols)
            if len(raw) != 8 * rows * cols:
                raise CheckpointError(f"truncated checkpoint at {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()
        return out


def restore_checkpoint(store, path):
    loaded = load_checkpoint(path)
    if set(loaded) != set(store.params):
        raise CheckpointError("checkpoint parameter names do not match model")
    for name, value in loaded.items():
        if value.shape != store.params[name].shape:
            raise CheckpointError(
                f"{name}: shape {value.shape} != {store.params[name].shape}")
        store.params[name][:] = value
