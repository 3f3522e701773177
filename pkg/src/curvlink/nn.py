"""Dense multilayer perceptrons with hand-written backpropagation.

All arithmetic is float64.  The batched functions (``losses``,
``input_gradients``, ``per_sample_weight_grads`` ...) take a feature matrix
``X`` of shape ``(n, d)`` and integer labels ``y`` of shape ``(n,)`` and treat
every row as an independent example, so a single call can score thousands of
perturbed inputs at once.  The single-example helpers at the bottom
(``loss_eval``, ``grad_input`` ...) wrap them for the :class:`Example` type.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from curvlink import rng
from curvlink.errors import ConfigurationError, NumericError

ACTIVATIONS = ("tanh", "relu")
LOSSES = ("cross_entropy", "clamped_cross_entropy", "squared_error")
MAX_HESSIAN_DIM = 64

MAGIC = b"CRVL"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    layer_dims: tuple
    activation: str = "tanh"
    loss: str = "cross_entropy"
    loss_bound: Optional[float] = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ConfigurationError(f"layer_dims needs at least 2 entries, got {list(dims)}")
        if any(d < 1 for d in dims):
            raise ConfigurationError(f"layer_dims must be positive, got {list(dims)}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        if self.loss == "clamped_cross_entropy":
            if self.loss_bound is None or not self.loss_bound > 0:
                raise ConfigurationError("clamped_cross_entropy needs loss_bound > 0")
        elif self.loss_bound is not None:
            raise ConfigurationError(f"loss_bound only applies to clamped_cross_entropy, not {self.loss}")

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def n_classes(self):
        return self.layer_dims[-1]

    @property
    def n_params(self):
        return sum(a * b + b for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]))

    def with_loss(self, loss, loss_bound=None):
        return ModelSpec(self.layer_dims, self.activation, loss, loss_bound)

    def to_dict(self):
        return {
            "layer_dims": list(self.layer_dims),
            "activation": self.activation,
            "loss": self.loss,
            "loss_bound": self.loss_bound,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["layer_dims"]), d.get("activation", "tanh"),
                   d.get("loss", "cross_entropy"), d.get("loss_bound"))


@dataclass(frozen=True)
class Example:
    x: np.ndarray
    y: int
    sample_id: int = 0
    subpop_id: int = 0


@dataclass(frozen=True, eq=False)
class Model:
    """A trained (or freshly initialised) MLP.

    ``weights`` is a tuple of ``(W, b)`` pairs with ``W`` of shape
    ``(fan_in, fan_out)``.  Arrays are made read-only on construction.
    """

    spec: ModelSpec
    weights: tuple
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = self.spec.layer_dims
        if len(self.weights) != len(dims) - 1:
            raise ConfigurationError("number of weight blocks does not match layer_dims")
        frozen = []
        for (W, b), fan_in, fan_out in zip(self.weights, dims[:-1], dims[1:]):
            W = np.array(W, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if W.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ConfigurationError(
                    f"weight shapes {W.shape}/{b.shape} do not chain for ({fan_in}, {fan_out})")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise NumericError("model weights contain non-finite entries")
            W.flags.writeable = False
            b.flags.writeable = False
            frozen.append((W, b))
        object.__setattr__(self, "weights", tuple(frozen))

    def flat(self):
        return flatten(self.weights)

    @classmethod
    def from_flat(cls, spec, vec, provenance=None):
        return cls(spec, unflatten(spec, vec), dict(provenance or {}))


def flatten(weights):
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in weights])


def unflatten(spec, vec):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (spec.n_params,):
        raise ConfigurationError(f"expected {spec.n_params} parameters, got {vec.shape}")
    out, pos = [], 0
    for fan_in, fan_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        W = vec[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = vec[pos:pos + fan_out]
        pos += fan_out
        out.append((W.copy(), b.copy()))
    return tuple(out)


def init_scale(fan_in, fan_out):
    return np.sqrt(6.0 / (fan_in + fan_out))


def mlp_init(spec, seed):
    """Glorot-uniform weights, zero biases; a pure function of ``(spec, seed)``."""
    if not isinstance(spec, ModelSpec):
        spec = ModelSpec(**spec) if isinstance(spec, dict) else ModelSpec(tuple(spec))
    weights = []
    for layer, (fan_in, fan_out) in enumerate(zip(spec.layer_dims[:-1], spec.layer_dims[1:])):
        s = init_scale(fan_in, fan_out)
        W = rng.stream(seed, "mlp-init", layer).uniform(-s, s, size=(fan_in, fan_out))
        weights.append((W, np.zeros(fan_out)))
    return Model(spec, tuple(weights), {"seed": int(seed), "mask_id": None, "train_config_digest": ""})


# ----------------------------------------------------------------------------
# batched forward / backward on raw weight tuples


def _act(activation, z):
    if activation == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_grad(activation, z, a):
    if activation == "tanh":
        return 1.0 - a * a
    return (z > 0.0).astype(np.float64)


def _forward(weights, activation, X):
    """Returns the logits and the per-layer (pre, post) activations."""
    cache = []
    a = X
    last = len(weights) - 1
    for i, (W, b) in enumerate(weights):
        z = a @ W + b
        if i == last:
            cache.append((a, z, None))
            a = z
        else:
            h = _act(activation, z)
            cache.append((a, z, h))
            a = h
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite activations in forward pass")
    return a, cache


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _loss_and_dlogits(spec, logits, y, need_grad=True):
    n, k = logits.shape
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (n,):
        raise ConfigurationError(f"labels shape {y.shape} does not match {n} rows")
    if np.any(y < 0) or np.any(y >= k):
        raise ConfigurationError(f"labels must lie in [0, {k})")
    rows = np.arange(n)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    p = np.exp(shifted - lse[:, None])
    if spec.loss == "squared_error":
        r = p.copy()
        r[rows, y] -= 1.0
        loss = np.einsum("ij,ij->i", r, r)
        if not need_grad:
            return loss, None
        u = 2.0 * r
        g = p * (u - np.einsum("ij,ij->i", p, u)[:, None])
        return loss, g
    loss = lse - shifted[rows, y]
    # rounding can leave -1e-16 for a saturated correct class
    loss = np.maximum(loss, 0.0)
    g = None
    if need_grad:
        g = p.copy()
        g[rows, y] -= 1.0
    if spec.loss == "clamped_cross_entropy":
        clamped = loss >= spec.loss_bound
        loss = np.minimum(loss, spec.loss_bound)
        if need_grad:
            g[clamped] = 0.0
    return loss, g


def _backward(weights, activation, cache, g, want_input=True, want_weights=False):
    """Back-propagates the per-row logit gradient ``g``.

    Returns ``(dX, layer_grads)`` where ``layer_grads`` lists per-row
    ``(dW, db)`` with shapes ``(n, fan_in, fan_out)`` and ``(n, fan_out)``.
    """
    layer_grads = [None] * len(weights)
    delta = g
    dX = None
    for i in range(len(weights) - 1, -1, -1):
        a_in, _, _ = cache[i]
        W, _ = weights[i]
        if want_weights:
            layer_grads[i] = (a_in[:, :, None] * delta[:, None, :], delta)
        if i == 0:
            if want_input:
                dX = delta @ W.T
            break
        _, z_prev, h_prev = cache[i - 1]
        delta = (delta @ W.T) * _act_grad(activation, z_prev, h_prev)
    return dX, layer_grads


def _as_batch(spec, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ConfigurationError(f"inputs of shape {X.shape} do not match input dim {spec.input_dim}")
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite input features")
    return X


def logits(model, X):
    X = _as_batch(model.spec, X)
    out, _ = _forward(model.weights, model.spec.activation, X)
    return out


def predict(model, X):
    """Argmax class; ties resolve to the smallest class index."""
    return np.argmax(logits(model, X), axis=1)


def probabilities(model, X):
    return _softmax(logits(model, X))


def losses(model, X, y):
    X = _as_batch(model.spec, X)
    out, _ = _forward(model.weights, model.spec.activation, X)
    loss, _ = _loss_and_dlogits(model.spec, out, y, need_grad=False)
    return loss


def input_gradients(model, X, y):
    """Row ``i`` is the gradient of example ``i``'s loss w.r.t. its own input."""
    return _input_gradients(model.spec, model.weights, X, y)


def _input_gradients(spec, weights, X, y):
    X = _as_batch(spec, X)
    out, cache = _forward(weights, spec.activation, X)
    _, g = _loss_and_dlogits(spec, out, y)
    dX, _ = _backward(weights, spec.activation, cache, g)
    return dX


def per_sample_weight_grads(model, X, y):
    """One flattened weight gradient per row, shape ``(n, n_params)``."""
    X = _as_batch(model.spec, X)
    return _per_sample_grads(model.spec, model.weights, X, y)[1]


def _per_sample_grads(spec, weights, X, y):
    out, cache = _forward(weights, spec.activation, X)
    loss, g = _loss_and_dlogits(spec, out, y)
    _, layer_grads = _backward(weights, spec.activation, cache, g, want_input=False, want_weights=True)
    n = X.shape[0]
    flat = np.concatenate(
        [np.concatenate([dW.reshape(n, -1), db], axis=1) for dW, db in layer_grads], axis=1)
    return loss, flat


def _batch_grads(spec, weights, X, y):
    """Mean loss and mean gradient as per-layer ``(dW, db)``; no per-row tensors."""
    out, cache = _forward(weights, spec.activation, X)
    loss, g = _loss_and_dlogits(spec, out, y)
    n = X.shape[0]
    grads = [None] * len(weights)
    delta = g / n
    for i in range(len(weights) - 1, -1, -1):
        a_in, _, _ = cache[i]
        W, _ = weights[i]
        grads[i] = (a_in.T @ delta, delta.sum(axis=0))
        if i > 0:
            _, z_prev, h_prev = cache[i - 1]
            delta = (delta @ W.T) * _act_grad(spec.activation, z_prev, h_prev)
    return loss, grads


def batch_gradient(model, X, y):
    """Gradient of the mean loss over the batch, flattened."""
    X = _as_batch(model.spec, X)
    _, grads = _batch_grads(model.spec, model.weights, X, y)
    return flatten(grads)


# ----------------------------------------------------------------------------
# single-example API


def loss_eval(model, z):
    return float(losses(model, z.x, [z.y])[0])


def grad_input(model, z):
    return input_gradients(model, z.x, [z.y])[0]


def grad_weights_per_sample(model, batch: Sequence[Example]):
    if len(batch) == 0:
        raise ConfigurationError("empty batch")
    X = np.stack([np.asarray(z.x, dtype=np.float64) for z in batch])
    y = np.array([z.y for z in batch])
    return list(per_sample_weight_grads(model, X, y))


def exact_input_hessian(model, z, step=1e-5, symmetrize=True):
    """Input Hessian by central differences of the analytic input gradient.

    Oracle only: refuses inputs wider than ``MAX_HESSIAN_DIM``.
    """
    d = model.spec.input_dim
    if d > MAX_HESSIAN_DIM:
        raise ConfigurationError(f"exact Hessian refused for d={d} > {MAX_HESSIAN_DIM}")
    x = np.asarray(z.x, dtype=np.float64)
    E = np.eye(d) * step
    X = np.concatenate([x + E, x - E])
    G = input_gradients(model, X, np.full(2 * d, z.y))
    # column j holds d(grad)/dx_j
    H = ((G[:d] - G[d:]) / (2.0 * step)).T
    if symmetrize:
        H = 0.5 * (H + H.T)
    return H


# ----------------------------------------------------------------------------
# serialization


def to_bytes(model):
    header = json.dumps({"spec": model.spec.to_dict(), "provenance": model.provenance},
                        sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    for W, b in model.weights:
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(blob):
    if blob[:4] != MAGIC:
        raise ConfigurationError("not a model file (bad magic)")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported model format version {version}")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    spec = ModelSpec.from_dict(header["spec"])
    vec = np.frombuffer(blob[12 + hlen:], dtype="<f8")
    return Model.from_flat(spec, vec, header["provenance"])


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


def load_model(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def to_json(model):
    """Human-readable debug dump."""
    return {
        "spec": model.spec.to_dict(),
        "provenance": model.provenance,
        "weights": [{"W": W.tolist(), "b": b.tolist()} for W, b in model.weights],
    }
