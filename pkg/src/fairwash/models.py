"""Classifiers and autoencoders: logistic regression, dense MLPs, and the
SGD/Adam training loops used everywhere else.

Models hold plain numpy parameter arrays and know nothing about tapes; the
``*_forward`` helpers record a forward pass on a caller-supplied tape so the
same parameter values can be used both for fast batched inference (plain
numpy) and for differentiation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tape as T
from .rng import RngState
from .tape import ContractError, Tape, Var, as_array

ACTIVATIONS = ("none", "relu", "softplus")


# ---------------------------------------------------------------------------
# model types
# ---------------------------------------------------------------------------


@dataclass
class Layer:
    W: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)
    activation: str = "none"
    beta: float = 10.0  # softplus sharpness; ignored by other activations

    def __post_init__(self):
        self.W = as_array(self.W)
        self.b = as_array(self.b)
        if self.W.ndim != 2:
            raise ContractError(f"layer weight must be a matrix, got shape {self.W.shape}")
        if self.b.shape != (self.W.shape[1],):
            raise ContractError(
                f"bias shape {self.b.shape} does not match weight {self.W.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.beta <= 0:
            raise ContractError("softplus beta must be positive")

    def copy(self) -> "Layer":
        return Layer(self.W.copy(), self.b.copy(), self.activation, self.beta)


@dataclass
class MlpModel:
    """Dense feed-forward classifier; the final layer always emits raw logits."""

    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ContractError("model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.W.shape[1] != nxt.W.shape[0]:
                raise ContractError(
                    f"layer dimensions do not chain: {prev.W.shape} then {nxt.W.shape}"
                )
        if self.layers[-1].activation != "none":
            raise ContractError("final layer must have activation 'none' (logits)")

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].W.shape[1]

    def copy(self) -> "MlpModel":
        return MlpModel([l.copy() for l in self.layers])

    def param_arrays(self) -> list:
        """The live parameter arrays, in a fixed order (W then b per layer)."""
        out = []
        for layer in self.layers:
            out.append(layer.W)
            out.append(layer.b)
        return out


@dataclass
class LogRegModel:
    """g(x) = sigmoid(w . x + c); predict() returns the pre-sigmoid score."""

    w: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        self.w = as_array(self.w)
        if self.w.ndim != 1 or self.w.size < 1:
            raise ContractError("logistic regression weight must be a non-empty vector")
        self.c = float(as_array(self.c))

    @property
    def in_dim(self) -> int:
        return self.w.size

    def copy(self) -> "LogRegModel":
        return LogRegModel(self.w.copy(), self.c)


@dataclass
class AutoencoderModel:
    encoder: MlpModel
    decoder: MlpModel

    def __post_init__(self):
        if self.encoder.out_dim != self.decoder.in_dim:
            raise ContractError(
                f"code dimensions disagree: encoder emits {self.encoder.out_dim}, "
                f"decoder expects {self.decoder.in_dim}"
            )

    @property
    def code_dim(self) -> int:
        return self.encoder.out_dim

    def copy(self) -> "AutoencoderModel":
        return AutoencoderModel(self.encoder.copy(), self.decoder.copy())


def init_mlp(dims, activation="relu", rng=None, seed=0, beta=10.0, tag="init") -> MlpModel:
    """Kaiming-uniform fan-in initialization, W ~ U(-sqrt(6/fan_in), +...), b = 0."""
    if rng is None:
        rng = RngState(seed)
    if len(dims) < 2:
        raise ContractError("need at least input and output dimensions")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        limit = np.sqrt(6.0 / fan_in)
        w = rng.stream(f"{tag}/W{i}").uniform(-limit, limit, size=(fan_in, fan_out))
        act = activation if i < len(dims) - 2 else "none"
        layers.append(Layer(w, np.zeros(fan_out), act, beta))
    return MlpModel(layers)


def logreg_as_mlp(model: LogRegModel, n_out: int = 1) -> MlpModel:
    """View a logistic regression as a one-layer MLP with a single logit."""
    if n_out != 1:
        raise ContractError("logistic regression maps to a single output")
    return MlpModel([Layer(model.w[:, None].copy(), np.array([model.c]), "none")])


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def _as_batch(x, dim, what="input"):
    arr = as_array(x)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ContractError(f"{what} shape {np.shape(x)} does not match dimension {dim}")
    return arr, squeeze


def predict(model, x) -> np.ndarray:
    """Pre-softmax logits (N, K) for MLPs; pre-sigmoid scores (N,) for
    logistic regression. A 1-d input gives a correspondingly squeezed output."""
    if isinstance(model, LogRegModel):
        arr, squeeze = _as_batch(x, model.in_dim)
        scores = arr @ model.w + model.c
        return scores[0] if squeeze else scores
    arr, squeeze = _as_batch(x, model.in_dim)
    h = arr
    for layer in model.layers:
        z = h @ layer.W + layer.b
        if layer.activation == "relu":
            h = np.maximum(z, 0.0)
        elif layer.activation == "softplus":
            t = layer.beta * z
            h = (np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))) / layer.beta
        else:
            h = z
    return h[0] if squeeze else h


def predicted_class(model, x) -> np.ndarray:
    """argmax class ids; ties break toward the lowest index. Logistic
    regression thresholds its score at 0 (i.e. sigmoid at one half)."""
    out = predict(model, np.atleast_2d(as_array(x)))
    if isinstance(model, LogRegModel):
        return (out > 0.0).astype(np.int64)
    return np.argmax(out, axis=1).astype(np.int64)


def softmax_probs(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    arr = as_array(logits)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    shifted = arr - arr.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs[0] if squeeze else probs


def stable_sigmoid(x) -> np.ndarray:
    x = as_array(x)
    pos = x >= 0
    e = np.exp(np.where(pos, -x, x))
    return np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))


def accuracy(model, x, y) -> float:
    y = np.asarray(y)
    return float((predicted_class(model, x) == y).mean())


# ---------------------------------------------------------------------------
# taped forward passes
# ---------------------------------------------------------------------------


def mlp_param_leaves(tp: Tape, model: MlpModel) -> list:
    """One (W, b) leaf pair per layer; biases become (1, n) rows for broadcast."""
    return [(tp.leaf(l.W, check_finite=False), tp.leaf(l.b[None, :], check_finite=False))
            for l in model.layers]


def mlp_forward(tp: Tape, model: MlpModel, x: Var, params=None) -> Var:
    """Record the forward pass; returns the logits Var with shape (m, K)."""
    if params is None:
        params = mlp_param_leaves(tp, model)
    if x.value.ndim != 2 or x.shape[1] != model.in_dim:
        raise ContractError(f"input shape {x.shape} does not match dimension {model.in_dim}")
    m = x.shape[0]
    h = x
    for layer, (wv, bv) in zip(model.layers, params):
        z = T.add(T.matmul(h, wv), T.expand_rows(bv, m))
        if layer.activation == "relu":
            h = T.relu(z)
        elif layer.activation == "softplus":
            h = T.softplus(z, layer.beta)
        else:
            h = z
    return h


def logreg_forward(tp: Tape, model: LogRegModel, x: Var, params=None) -> Var:
    """Pre-sigmoid scores as an (m, 1) column."""
    if params is None:
        params = (tp.leaf(model.w[:, None], check_finite=False),
                  tp.leaf(np.asarray(model.c), check_finite=False))
    wv, cv = params
    m = x.shape[0]
    return T.add(T.matmul(x, wv), T.expand_scalar(cv, (m, 1)))


def select_logits(tp: Tape, logits: Var, ks) -> Var:
    """Scalar sum of one selected logit per row.

    Rows are independent under every primitive used by the models, so the
    gradient of this scalar with respect to the input batch recovers each
    row's own selected-logit gradient in one reverse pass.
    """
    m, k_count = logits.shape
    ks = np.asarray(ks, dtype=np.int64)
    if ks.shape != (m,):
        raise ContractError(f"need one class index per row, got shape {ks.shape}")
    if ks.min() < 0 or ks.max() >= k_count:
        raise ContractError(f"class index out of range for {k_count} outputs")
    onehot = np.zeros((m, k_count))
    onehot[np.arange(m), ks] = 1.0
    return T.sum_all(T.mul(logits, tp.leaf(onehot, check_finite=False)))


def xent_loss(tp: Tape, logits: Var, labels, n_classes: int) -> Var:
    """Mean cross-entropy after softmax, recorded on the tape.

    The row max is subtracted as a detached constant; the gradient is exact
    because logsumexp(z) = m + logsumexp(z - m) for any constant m.
    """
    z = logits.value
    m = z.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    mx = tp.leaf(z.max(axis=1, keepdims=True), check_finite=False)
    e = T.exp(T.sub(logits, T.expand_cols(mx, n_classes)))
    lse = T.add(T.log(T.sum_rows(e)), mx)
    onehot = np.zeros_like(z)
    onehot[np.arange(m), labels] = 1.0
    zy = T.sum_rows(T.mul(logits, tp.leaf(onehot, check_finite=False)))
    return T.scale(T.sum_all(T.sub(lse, zy)), 1.0 / m)


def dataset_xent(model, x, y) -> float:
    """Full-dataset mean cross-entropy, evaluated without a tape."""
    logits = predict(model, x)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(len(z)), np.asarray(y, dtype=np.int64)]
    return float((lse - picked).mean())


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    optimizer: str = "sgd"  # sgd | adam
    learning_rate: float = 0.01
    momentum: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        # learning_rate = 0 is allowed and means "take no step"
        if self.learning_rate < 0:
            raise ContractError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch size must be >= 1 and epochs >= 0")


class SgdOptimizer:
    """SGD with classical momentum: v <- mu v + g; p <- p - lr v."""

    def __init__(self, params, lr, momentum=0.0):
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        for p, g, v in zip(params, grads, self.v):
            v *= self.momentum
            v += g
            p -= self.lr * v


class AdamOptimizer:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return AdamOptimizer(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return SgdOptimizer(params, cfg.learning_rate, cfg.momentum)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _batches(n, batch_size, order):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_classifier(model: MlpModel, x, y, cfg: TrainConfig):
    """Minibatch cross-entropy training; returns (trained model, history).

    History rows carry the running epoch-mean loss plus full-dataset loss
    before and after training, so callers can check that the final loss did
    not rise above the initial one.
    """
    x = as_array(x)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ContractError("empty dataset")
    if len(x) != len(y):
        raise ContractError("inputs and labels disagree in length")
    k = model.out_dim
    if y.min() < 0 or y.max() >= k:
        raise ContractError(f"label out of range for {k} classes")

    model = model.copy()
    params = model.param_arrays()
    opt = make_optimizer(params, cfg)
    rng = RngState(cfg.seed)
    history = [{"event": "init", "loss": dataset_xent(model, x, y)}]

    for epoch in range(cfg.epochs):
        order = rng.stream(f"shuffle/{epoch}").permutation(len(x))
        total, seen = 0.0, 0
        for idx in _batches(len(x), cfg.batch_size, order):
            tp = Tape()
            xv = tp.leaf(x[idx], check_finite=False)
            pvars = mlp_param_leaves(tp, model)
            logits = mlp_forward(tp, model, xv, pvars)
            loss = xent_loss(tp, logits, y[idx], k)
            flat = [v for pair in pvars for v in pair]
            grads = T.grad(loss, flat)
            gvals = []
            for layer_i in range(len(model.layers)):
                gvals.append(grads[2 * layer_i].value)
                gvals.append(grads[2 * layer_i + 1].value[0])  # bias row back to vector
            opt.step(params, gvals)
            total += float(loss.value) * len(idx)
            seen += len(idx)
        history.append({"event": "epoch", "epoch": epoch, "loss": total / seen})

    history.append({"event": "final", "loss": dataset_xent(model, x, y)})
    return model, history


def train_autoencoder(ae: AutoencoderModel, x, cfg: TrainConfig):
    """Minibatch reconstruction training with per-element squared error."""
    x = as_array(x)
    if len(x) == 0:
        raise ContractError("empty dataset")
    ae = ae.copy()
    layers = ae.encoder.layers + ae.decoder.layers
    params = []
    for layer in layers:
        params.append(layer.W)
        params.append(layer.b)
    opt = make_optimizer(params, cfg)
    rng = RngState(cfg.seed)

    def recon_mse():
        z = predict(ae.encoder, x)
        r = predict(ae.decoder, z)
        return float(((r - x) ** 2).mean())

    history = [{"event": "init", "loss": recon_mse()}]
    d = x.shape[1]
    for epoch in range(cfg.epochs):
        order = rng.stream(f"shuffle/{epoch}").permutation(len(x))
        total, seen = 0.0, 0
        for idx in _batches(len(x), cfg.batch_size, order):
            tp = Tape()
            xv = tp.leaf(x[idx], check_finite=False)
            enc_vars = mlp_param_leaves(tp, ae.encoder)
            dec_vars = mlp_param_leaves(tp, ae.decoder)
            code = mlp_forward(tp, ae.encoder, xv, enc_vars)
            recon = mlp_forward(tp, ae.decoder, code, dec_vars)
            diff = T.sub(recon, xv)
            loss = T.scale(T.sum_all(T.mul(diff, diff)), 1.0 / (len(idx) * d))
            flat = [v for pair in enc_vars + dec_vars for v in pair]
            grads = T.grad(loss, flat)
            gvals = []
            for layer_i in range(len(layers)):
                gvals.append(grads[2 * layer_i].value)
                gvals.append(grads[2 * layer_i + 1].value[0])
            opt.step(params, gvals)
            total += float(loss.value) * len(idx)
            seen += len(idx)
        history.append({"event": "epoch", "epoch": epoch, "loss": total / seen})

    history.append({"event": "final", "loss": recon_mse()})
    return ae, history


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

_MAGIC = b"FWMODEL1"
_KIND_MLP, _KIND_LOGREG, _KIND_AE = 1, 2, 3
_ACT_TAG = {"none": 0, "relu": 1, "softplus": 2}
_TAG_ACT = {v: k for k, v in _ACT_TAG.items()}


class ModelFormatError(ValueError):
    """Checkpoint bytes do not follow the FWMODEL1 layout."""


def _pack_mlp(model: MlpModel) -> bytes:
    parts = [struct.pack("<I", len(model.layers))]
    for layer in model.layers:
        parts.append(struct.pack("<IIBf", layer.W.shape[0], layer.W.shape[1],
                                 _ACT_TAG[layer.activation], layer.beta))
    for layer in model.layers:
        parts.append(layer.W.astype("<f4").tobytes())
        parts.append(layer.b.astype("<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError("checkpoint truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_mlp(r: _Reader) -> MlpModel:
    (n_layers,) = r.unpack("<I")
    if n_layers == 0 or n_layers > 1024:
        raise ModelFormatError(f"implausible layer count {n_layers}")
    headers = [r.unpack("<IIBf") for _ in range(n_layers)]
    layers = []
    for fan_in, fan_out, tag, beta in headers:
        if tag not in _TAG_ACT:
            raise ModelFormatError(f"unknown activation tag {tag}")
        w = np.frombuffer(r.take(4 * fan_in * fan_out), dtype="<f4")
        b = np.frombuffer(r.take(4 * fan_out), dtype="<f4")
        layers.append(Layer(w.astype(np.float64).reshape(fan_in, fan_out),
                            b.astype(np.float64), _TAG_ACT[tag], float(beta)))
    return MlpModel(layers)


def save_model(model, path):
    """Write an FWMODEL1 checkpoint (header + little-endian f32 blob)."""
    if isinstance(model, MlpModel):
        body = struct.pack("<B", _KIND_MLP) + _pack_mlp(model)
    elif isinstance(model, LogRegModel):
        body = (struct.pack("<BI", _KIND_LOGREG, model.w.size)
                + model.w.astype("<f4").tobytes()
                + struct.pack("<f", model.c))
    elif isinstance(model, AutoencoderModel):
        body = (struct.pack("<B", _KIND_AE)
                + _pack_mlp(model.encoder) + _pack_mlp(model.decoder))
    else:
        raise ContractError(f"cannot serialize {type(model).__name__}")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + body)


def load_model(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise ModelFormatError(f"bad magic in {path!s}")
    r = _Reader(data)
    r.pos = 8
    (kind,) = r.unpack("<B")
    if kind == _KIND_MLP:
        model = _read_mlp(r)
    elif kind == _KIND_LOGREG:
        (dim,) = r.unpack("<I")
        w = np.frombuffer(r.take(4 * dim), dtype="<f4").astype(np.float64)
        (c,) = r.unpack("<f")
        model = LogRegModel(w, float(c))
    elif kind == _KIND_AE:
        model = AutoencoderModel(_read_mlp(r), _read_mlp(r))
    else:
        raise ModelFormatError(f"unknown model kind {kind}")
    if r.pos != len(data):
        raise ModelFormatError("trailing bytes after checkpoint payload")
    return model
