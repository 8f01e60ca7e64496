"""Dense feed-forward classifier with hand-written float64 gradients.

The output layer acts on the activated output of the last hidden layer
(the "embedding"); for a single linear layer the embedding is the input
itself. Forward and backward are pure functions of their arguments, so a
model instance can be shared freely across threads for reads.

Checkpoint format (save_model/load_model): one UTF-8 JSON header line
{"layer_sizes": [...], "activation": "<name>"} terminated by "\\n",
followed by the raw row-major little-endian float64 bytes of W then b
for each layer in order. Round-trips are bit-exact.
"""

import json
from dataclasses import dataclass

import numpy as np

SELU_ALPHA = 1.6732632423543772
SELU_LAMBDA = 1.0507009873554805


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z):
    return (z > 0.0).astype(np.float64)


def _tanh(z):
    return np.tanh(z)


def _tanh_grad(z):
    t = np.tanh(z)
    return 1.0 - t * t


def _elu(z):
    return np.where(z > 0.0, z, np.expm1(z))


def _elu_grad(z):
    return np.where(z > 0.0, 1.0, np.exp(z))


def _selu(z):
    return SELU_LAMBDA * np.where(z > 0.0, z, SELU_ALPHA * np.expm1(z))


def _selu_grad(z):
    return SELU_LAMBDA * np.where(z > 0.0, 1.0, SELU_ALPHA * np.exp(z))


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s


def _silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "tanh": (_tanh, _tanh_grad),
    "elu": (_elu, _elu_grad),
    "selu": (_selu, _selu_grad),
    "silu": (_silu, _silu_grad),
}


@dataclass
class ParamVec:
    """A list of (W, b) arrays shaped like a model's parameters.

    Used for gradients, update deltas, control variates and drift terms.
    """

    weights: list
    biases: list

    def copy(self) -> "ParamVec":
        return ParamVec([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def add_(self, other: "ParamVec", scale: float = 1.0) -> "ParamVec":
        """In-place self += scale * other."""
        for w, ow in zip(self.weights, other.weights):
            w += scale * ow
        for b, ob in zip(self.biases, other.biases):
            b += scale * ob
        return self

    def scaled(self, s: float) -> "ParamVec":
        return ParamVec([s * w for w in self.weights], [s * b for b in self.biases])

    def sub(self, other: "ParamVec") -> "ParamVec":
        return ParamVec(
            [w - ow for w, ow in zip(self.weights, other.weights)],
            [b - ob for b, ob in zip(self.biases, other.biases)],
        )

    def max_abs(self) -> float:
        m = 0.0
        for arr in self.weights + self.biases:
            if arr.size:
                m = max(m, float(np.abs(arr).max()))
        return m


@dataclass
class Model:
    """Stack of dense layers; `activation` applies after every layer but the last."""

    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty and aligned")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: W must be (out, in) and b (out,)")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: fan-in does not match previous fan-out")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def layer_sizes(self) -> list:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def copy(self) -> "Model":
        return Model([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def params(self) -> ParamVec:
        """Live view of the parameters (shared arrays, not copies)."""
        return ParamVec(list(self.weights), list(self.biases))


def zeros_like_params(model: Model) -> ParamVec:
    return ParamVec(
        [np.zeros_like(w) for w in model.weights],
        [np.zeros_like(b) for b in model.biases],
    )


def init_model(layer_sizes, activation: str = "relu", seed: int = 0) -> Model:
    """Uniform [-1/sqrt(fan_in), +1/sqrt(fan_in)] init, seeded."""
    if len(layer_sizes) < 2:
        raise ValueError("need at least input and output sizes")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return Model(weights, biases, activation)


def forward(model: Model, x: np.ndarray):
    """Forward pass for one feature vector. Returns (logits, embedding)."""
    q, e = forward_batch(model, np.asarray(x, dtype=np.float64)[None, :])
    return q[0], e[0]


def forward_batch(model: Model, features: np.ndarray):
    """Forward pass for a (B, d) batch. Returns (logits (B, N), embeddings (B, L))."""
    act, _ = ACTIVATIONS[model.activation]
    h = np.asarray(features, dtype=np.float64)
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        h = act(h @ w.T + b)
    logits = h @ model.weights[-1].T + model.biases[-1]
    return logits, h


def softmax(q: np.ndarray) -> np.ndarray:
    """Numerically stable softmax of a 1-D logit vector."""
    shifted = q - q.max()
    e = np.exp(shifted)
    return e / e.sum()


def _softmax_rows(q: np.ndarray) -> np.ndarray:
    shifted = q - q.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def output_layer_gradient(q: np.ndarray, y: int) -> np.ndarray:
    """Cross-entropy gradient w.r.t. the output bias for one sample.

    Equals softmax(q) minus the one-hot of the true label: the true-class
    entry is softmax_y - 1, every other entry is the softmax probability.
    The entries always sum to zero.
    """
    p = softmax(q)
    g = p.copy()
    g[y] -= 1.0
    return g


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy over a batch, via log-sum-exp."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    return float(np.mean(lse - shifted[rows, labels]))


def backward(model: Model, features: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy loss and its gradient over a batch.

    Returns (loss, ParamVec of gradients). Gradients are means over the
    batch, so duplicating a sample leaves them unchanged.
    """
    act, act_grad = ACTIVATIONS[model.activation]
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    batch = x.shape[0]
    if batch == 0:
        raise ValueError("empty batch")

    pre = []
    h = x
    hs = [h]
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = h @ w.T + b
        pre.append(z)
        h = act(z)
        hs.append(h)
    logits = h @ model.weights[-1].T + model.biases[-1]
    loss = cross_entropy(logits, y)

    delta = _softmax_rows(logits)
    delta[np.arange(batch), y] -= 1.0
    delta /= batch

    grad_w = [None] * len(model.weights)
    grad_b = [None] * len(model.biases)
    grad_w[-1] = delta.T @ hs[-1]
    grad_b[-1] = delta.sum(axis=0)
    up = delta
    for i in range(len(model.weights) - 2, -1, -1):
        up = (up @ model.weights[i + 1]) * act_grad(pre[i])
        grad_w[i] = up.T @ hs[i]
        grad_b[i] = up.sum(axis=0)
    return loss, ParamVec(grad_w, grad_b)


def accuracy(model: Model, features: np.ndarray, labels: np.ndarray) -> float:
    logits, _ = forward_batch(model, features)
    return float(np.mean(logits.argmax(axis=1) == labels))


def save_model(path, model: Model) -> None:
    header = json.dumps(
        {"layer_sizes": model.layer_sizes, "activation": model.activation},
        separators=(",", ":"),
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        for w, b in zip(model.weights, model.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        header = fh.readline()
        try:
            meta = json.loads(header.decode("utf-8"))
            sizes = [int(s) for s in meta["layer_sizes"]]
            activation = meta["activation"]
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            raise ValueError(f"corrupt checkpoint header in {path}") from exc
        blob = fh.read()
    weights, biases = [], []
    offset = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        wn = fan_out * fan_in * 8
        bn = fan_out * 8
        if offset + wn + bn > len(blob):
            raise ValueError(f"truncated checkpoint {path}")
        weights.append(
            np.frombuffer(blob, dtype="<f8", count=fan_out * fan_in, offset=offset)
            .reshape(fan_out, fan_in)
            .copy()
        )
        offset += wn
        biases.append(np.frombuffer(blob, dtype="<f8", count=fan_out, offset=offset).copy())
        offset += bn
    if offset != len(blob):
        raise ValueError(f"trailing bytes in checkpoint {path}")
    return Model(weights, biases, activation)
