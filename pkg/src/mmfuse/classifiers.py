"""Classification heads: logistic regression over fused vectors and a
context-dependent bidirectional LSTM over per-video utterance sequences.
"""

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, sigmoid, softmax_stable
from .nn import DenseLayer, ParamStore, StateError, cross_entropy, glorot_uniform


@dataclass
class VideoSequence:
    """Ordered utterances of one video: fused vectors plus labels."""
    video_id: str
    features: np.ndarray  # (d_in, n), one column per utterance
    labels: np.ndarray    # (n,) int class indices

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[1] != len(self.labels):
            raise ShapeError(
                f"video {self.video_id}: features {self.features.shape} "
                f"vs {len(self.labels)} labels")
        if self.features.shape[1] < 1:
            raise ShapeError(f"video {self.video_id}: empty sequence")

    @property
    def n(self):
        return self.features.shape[1]


def argmax_predictions(probs):
    """Column-wise argmax; ties go to the lowest class index."""
    return probs.argmax(axis=0)


def dropout_mask(shape, rate, rng):
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0.0:
        return np.ones(shape)
    keep = (rng.uniform(*shape) >= rate).astype(np.float64)
    return keep / (1.0 - rate)


def dropout(x, rate, train_mode, rng=None):
    """Inverted dropout: identity at eval time, unbiased at train time."""
    if not train_mode or rate == 0.0:
        if not (0.0 <= rate < 1.0):
            raise ValueError(f"dropout rate {rate} outside [0, 1)")
        return x
    return x * dropout_mask(x.shape, rate, rng)


class LrHead:
    """Softmax classifier: P = softmax(W z + b)."""

    def __init__(self, d_in, n_classes, rng, store=None):
        if n_classes < 2:
            raise ValueError("need at least 2 classes")
        self.n_classes = n_classes
        self.store = store if store is not None else ParamStore()
        self.layer = DenseLayer(self.store, "cls", d_in, n_classes, None, rng)

    def predict(self, z):
        probs = softmax_stable(self.layer.forward(z))
        return probs, argmax_predictions(probs)

    def train_step_loss(self, z, targets):
        """Forward + backward for one batch; returns the CE loss."""
        loss, _ = self.loss_and_input_grad(z, targets)
        return loss

    def loss_and_input_grad(self, z, targets):
        """CE loss plus the gradient wrt the fused input (for joint training);
        head gradients are accumulated as a side effect."""
        probs = softmax_stable(self.layer.forward(z))
        loss, grad_logits = cross_entropy(probs, targets)
        return loss, self.layer.backward(grad_logits)


class LstmCell:
    """Standard LSTM cell (input/forget/output gates + tanh candidate).

    Per-gate weights act on the concatenation [x; h_prev].  Forget-gate
    bias starts at 1.0 to ease early carry; other biases start at 0.
    """

    GATES = ("i", "f", "o", "g")

    def __init__(self, store, name, d_in, d_hidden, rng):
        self.name = name
        self.d_in = d_in
        self.d_hidden = d_hidden
        self.W = {}
        self.b = {}
        self.dW = {}
        self.db = {}
        for gate in self.GATES:
            w0 = glorot_uniform(rng, d_hidden, d_in + d_hidden)
            b0 = np.zeros((d_hidden, 1))
            if gate == "f":
                b0 += 1.0
            self.W[gate] = store.add(f"{name}.W{gate}", w0)
            self.b[gate] = store.add(f"{name}.b{gate}", b0)
            self.dW[gate] = store.grads[f"{name}.W{gate}"]
            self.db[gate] = store.grads[f"{name}.b{gate}"]

    def step(self, x, h_prev, c_prev):
        """One time step; returns (h, c, cache) for BPTT."""
        if x.shape[0] != self.d_in:
            raise ShapeError(f"{self.name}: input rows {x.shape[0]} != {self.d_in}")
        zc = np.vstack([x, h_prev])
        i = sigmoid(self.W["i"] @ zc + self.b["i"])
        f = sigmoid(self.W["f"] @ zc + self.b["f"])
        o = sigmoid(self.W["o"] @ zc + self.b["o"])
        g = np.tanh(self.W["g"] @ zc + self.b["g"])
        c = f * c_prev + i * g
        h = o * np.tanh(c)
        cache = (zc, i, f, o, g, c, c_prev)
        return h, c, cache

    def backward_step(self, dh, dc_next, cache):
        """Gradients for one step; returns (dx, dh_prev, dc_prev)."""
        zc, i, f, o, g, c, c_prev = cache
        tc = np.tanh(c)
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        di = dc * g
        df = dc * c_prev
        dg = dc * i
        da = {
            "i": di * i * (1.0 - i),
            "f": df * f * (1.0 - f),
            "o": do * o * (1.0 - o),
            "g": dg * (1.0 - g * g),
        }
        dzc = np.zeros_like(zc)
        for gate in self.GATES:
            self.dW[gate] += da[gate] @ zc.T
            self.db[gate] += da[gate].sum(axis=1, keepdims=True)
            dzc += self.W[gate].T @ da[gate]
        return dzc[:self.d_in], dzc[self.d_in:], dc * f


@dataclass
class _BiLstmCache:
    x_cols: list = field(default_factory=list)
    fwd: list = field(default_factory=list)
    bwd: list = field(default_factory=list)
    h_cat: np.ndarray = None
    in_mask: np.ndarray = None
    out_mask: np.ndarray = None
    probs: np.ndarray = None


class BiLstmClassifier:
    """Bidirectional LSTM over one video's utterance sequence with a
    softmax head shared across time steps and directions."""

    def __init__(self, d_in, d_hidden, n_classes, rng,
                 input_dropout=0.2, output_dropout=0.2):
        self.d_in = d_in
        self.d_hidden = d_hidden
        self.n_classes = n_classes
        self.input_dropout = input_dropout
        self.output_dropout = output_dropout
        self.store = ParamStore()
        self.fwd_cell = LstmCell(self.store, "lstm.fwd", d_in, d_hidden, rng)
        self.bwd_cell = LstmCell(self.store, "lstm.bwd", d_in, d_hidden, rng)
        self.head = DenseLayer(self.store, "cls", 2 * d_hidden, n_classes,
                               None, rng)
        self._cache = None

    def forward(self, seq, train_mode=False, rng=None):
        """Per-utterance class probabilities and argmax predictions."""
        x = seq.features if isinstance(seq, VideoSequence) else np.asarray(seq)
        if x.shape[0] != self.d_in:
            raise ShapeError(f"sequence rows {x.shape[0]} != {self.d_in}")
        n = x.shape[1]
        if n < 1:
            raise ShapeError("empty sequence")
        cache = _BiLstmCache()
        if train_mode and self.input_dropout > 0:
            cache.in_mask = dropout_mask(x.shape, self.input_dropout, rng)
            x = x * cache.in_mask
        cache.x_cols = [x[:, j:j + 1] for j in range(n)]

        h = np.zeros((self.d_hidden, 1))
        c = np.zeros((self.d_hidden, 1))
        h_fwd = []
        for j in range(n):
            h, c, step = self.fwd_cell.step(cache.x_cols[j], h, c)
            cache.fwd.append(step)
            h_fwd.append(h)

        h = np.zeros((self.d_hidden, 1))
        c = np.zeros((self.d_hidden, 1))
        h_bwd = [None] * n
        for j in range(n - 1, -1, -1):
            h, c, step = self.bwd_cell.step(cache.x_cols[j], h, c)
            cache.bwd.append(step)  # stored in right-to-left visit order
            h_bwd[j] = h

        h_cat = np.hstack([np.vstack([h_fwd[j], h_bwd[j]]) for j in range(n)])
        if train_mode and self.output_dropout > 0:
            cache.out_mask = dropout_mask(h_cat.shape, self.output_dropout, rng)
            h_cat = h_cat * cache.out_mask
        cache.h_cat = h_cat
        probs = softmax_stable(self.head.forward(h_cat))
        cache.probs = probs
        self._cache = cache
        return probs, argmax_predictions(probs)

    def backward(self, targets, loss_scale=1.0):
        """Backpropagation through time; returns the sequence CE loss.

        `loss_scale` rescales gradients when accumulating over a batch
        of videos before one optimizer step.
        """
        cache = self._cache
        if cache is None:
            raise StateError("backward called before forward")
        self._cache = None
        loss, grad_logits = cross_entropy(cache.probs, targets)
        d_hcat = self.head.backward(grad_logits * loss_scale)
        if cache.out_mask is not None:
            d_hcat = d_hcat * cache.out_mask
        n = d_hcat.shape[1]
        d = self.d_hidden
        dx = [np.zeros_like(col) for col in cache.x_cols]

        dh = np.zeros((d, 1))
        dc = np.zeros((d, 1))
        for j in range(n - 1, -1, -1):
            dxj, dh, dc = self.fwd_cell.backward_step(
                d_hcat[:d, j:j + 1] + dh, dc, cache.fwd[j])
            dx[j] += dxj
        # backward direction visited j = n-1..0 in forward(); unwind in the
        # opposite order (j = 0..n-1), consuming caches from the end
        dh = np.zeros((d, 1))
        dc = np.zeros((d, 1))
        for j in range(n):
            step = cache.bwd[n - 1 - j]
            dxj, dh, dc = self.bwd_cell.backward_step(
                d_hcat[d:, j:j + 1] + dh, dc, step)
            dx[j] += dxj

        if cache.in_mask is not None:
            for j in range(n):
                dx[j] *= cache.in_mask[:, j:j + 1]
        return loss

    def forward_loss(self, seq, targets):
        """Forward-only CE loss for gradient checking (eval mode)."""
        probs, _ = self.forward(seq, train_mode=False)
        self._cache = None
        targets = np.asarray(targets, dtype=np.int64)
        n = probs.shape[1]
        picked = probs[targets, np.arange(n)]
        return float(-np.log(np.maximum(picked, 1e-12)).mean())
