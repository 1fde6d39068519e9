"""Bidirectional LSTM -> LSTM -> dense sigmoid classifier in plain numpy.

Cell, per step, on the concatenation ``[h_prev, x_t]``::

    f = sigmoid(W_f . [h, x] + b_f)      forget gate
    i = sigmoid(W_i . [h, x] + b_i)      input gate
    g = tanh(W_C . [h, x] + b_C)         candidate cell state
    o = sigmoid(W_o . [h, x] + b_o)      output gate
    c = f * c_prev + i * g
    h = o * tanh(c)

The four gate matrices of a cell are stored stacked as one ``(4H, H + D)``
array in the order f, i, C, o. Sequences are left-padded; a masked step
carries (h, c) through unchanged and emits a zero output, so padding never
influences outputs, loss or gradients. Everything is float64.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .cohort import SCHEMA_VERSION, FeatureRegistry, SequenceSet
from .errors import TrainingError, ValidationError

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-12
GATES = ("f", "i", "C", "o")


def sigmoid(z, out=None):
    """Logistic function via tanh (faster than expit on this workload, same values to ~1 ulp)."""
    out = np.multiply(z, 0.5, out=out)
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5
    return out


# ---------------------------------------------------------------------------
# Cell


@dataclass
class LstmCellParams:
    W: np.ndarray  # (4H, H + D), rows stacked f, i, C, o
    b: np.ndarray  # (4H,)

    def __post_init__(self):
        H4, HD = self.W.shape
        if H4 % 4 or self.b.shape != (H4,) or HD <= H4 // 4:
            raise ValidationError(f"inconsistent cell shapes W{self.W.shape} b{self.b.shape}")
        if not (np.isfinite(self.W).all() and np.isfinite(self.b).all()):
            raise ValidationError("cell parameters must be finite")

    @property
    def hidden_size(self) -> int:
        return self.W.shape[0] // 4

    @property
    def input_size(self) -> int:
        return self.W.shape[1] - self.hidden_size

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        k, H = GATES.index(name), self.hidden_size
        return self.W[k * H:(k + 1) * H], self.b[k * H:(k + 1) * H]

    @classmethod
    def from_gates(cls, W_f, W_i, W_C, W_o, b_f, b_i, b_C, b_o) -> "LstmCellParams":
        return cls(np.vstack([W_f, W_i, W_C, W_o]).astype(np.float64), np.concatenate([b_f, b_i, b_C, b_o]).astype(np.float64))


def lstm_cell_forward(x_t, h_prev, c_prev, params: LstmCellParams):
    """One step for a batch; returns ``(h_t, c_t, cache)``.

    ``x_t`` is (B, D) (or (D,)), ``h_prev``/``c_prev`` are (B, H).
    """
    x_t, h_prev, c_prev = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (x_t, h_prev, c_prev))
    H, D = params.hidden_size, params.input_size
    if x_t.shape[1] != D or h_prev.shape[1] != H or c_prev.shape != h_prev.shape or len(x_t) != len(h_prev):
        raise ValidationError(
            f"shape mismatch: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} for cell H={H}, D={D}"
        )
    z = np.concatenate([h_prev, x_t], axis=1) @ params.W.T + params.b
    f = sigmoid(z[:, :H])
    i = sigmoid(z[:, H:2 * H])
    g = np.tanh(z[:, 2 * H:3 * H])
    o = sigmoid(z[:, 3 * H:])
    c_t = f * c_prev + i * g
    tc = np.tanh(c_t)
    h_t = o * tc
    cache = {"f": f, "i": i, "g": g, "o": o, "tanh_c": tc, "h_prev": h_prev, "c_prev": c_prev}
    return h_t, c_t, cache


# ---------------------------------------------------------------------------
# Layer over a padded sequence


def _layer_forward(X, mask, W, b, reverse=False):
    """Run one cell over (B, T, D) inputs; returns outputs (B, T, H), final h, cache."""
    B, T, _ = X.shape
    H = b.size // 4
    Wh, Wx = W[:, :H], W[:, H:]
    xproj = X @ Wx.T + b
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    out = np.zeros((B, T, H))
    gates = np.empty((T, B, 4 * H))  # activated f, i, g, o
    tanh_c = np.empty((T, B, H))
    h_prev = np.empty((T, B, H))
    c_prev = np.empty((T, B, H))
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        z = xproj[:, t] + h @ Wh.T
        a = gates[t]
        sigmoid(z, out=a)
        np.tanh(z[:, 2 * H:3 * H], out=a[:, 2 * H:3 * H])
        c_new = a[:, :H] * c + a[:, H:2 * H] * a[:, 2 * H:3 * H]
        tc = np.tanh(c_new)
        h_new = a[:, 3 * H:] * tc
        h_prev[t], c_prev[t], tanh_c[t] = h, c, tc
        m = mask[:, t, None]
        h = np.where(m, h_new, h)
        c = np.where(m, c_new, c)
        out[:, t] = np.where(m, h_new, 0.0)
    cache = (X, mask, W, reverse, gates, tanh_c, h_prev, c_prev)
    return out, h, cache


def _layer_backward(d_out, d_h_final, cache):
    """Gradients for :func:`_layer_forward`; returns ``(dX, dW, db)``."""
    X, mask, W, reverse, gates, tanh_c, h_prev, c_prev = cache
    B, T, _ = X.shape
    H = W.shape[0] // 4
    Wh, Wx = W[:, :H], W[:, H:]
    dh = d_h_final.copy()
    dc = np.zeros((B, H))
    dz_all = np.zeros((T, B, 4 * H))
    dWh = np.zeros_like(Wh)
    steps = range(T) if reverse else range(T - 1, -1, -1)
    for t in steps:
        m = mask[:, t, None].astype(np.float64)
        a = gates[t]
        f, i, g, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
        tc = tanh_c[t]
        dh_new = m * (d_out[:, t] + dh)
        dc_new = m * dc + dh_new * o * (1.0 - tc * tc)
        dz = dz_all[t]
        dz[:, :H] = dc_new * c_prev[t] * f * (1.0 - f)
        dz[:, H:2 * H] = dc_new * g * i * (1.0 - i)
        dz[:, 2 * H:3 * H] = dc_new * i * (1.0 - g * g)
        dz[:, 3 * H:] = dh_new * tc * o * (1.0 - o)
        dWh += dz.T @ h_prev[t]
        keep = 1.0 - m
        dh = dz @ Wh + keep * dh
        dc = dc_new * f + keep * dc
    dz_flat = dz_all.transpose(1, 0, 2).reshape(B * T, -1)  # rows ordered (b, t)
    dWx = dz_flat.T @ X.reshape(B * T, -1)
    db = dz_flat.sum(axis=0)
    dX = (dz_flat @ Wx).reshape(B, T, -1)
    return dX, np.concatenate([dWh, dWx], axis=1), db


# ---------------------------------------------------------------------------
# Network

PARAM_NAMES = ("fw.W", "fw.b", "bw.W", "bw.b", "l2.W", "l2.b", "out.w", "out.b")


@dataclass
class LstmNetwork:
    """All trainable parameters of the BiLSTM -> LSTM -> dense stack."""

    params: dict
    input_size: int
    hidden1: int = 32
    hidden2: int = 32
    dropout: float = 0.4

    def __post_init__(self):
        D, H1, H2 = self.input_size, self.hidden1, self.hidden2
        expected = {
            "fw.W": (4 * H1, H1 + D), "fw.b": (4 * H1,),
            "bw.W": (4 * H1, H1 + D), "bw.b": (4 * H1,),
            "l2.W": (4 * H2, H2 + 2 * H1), "l2.b": (4 * H2,),
            "out.w": (H2,), "out.b": (1,),
        }
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValidationError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout rate must lie in [0, 1)")

    @classmethod
    def init(cls, input_size: int, hidden1: int = 32, hidden2: int = 32, dropout: float = 0.4, rng=None) -> "LstmNetwork":
        """Uniform(+-1/sqrt(H + D)) weights, zero biases except forget gate = 1."""
        rng = np.random.default_rng(rng)

        def cell(H, D):
            bound = 1.0 / np.sqrt(H + D)
            W = rng.uniform(-bound, bound, size=(4 * H, H + D))
            b = np.zeros(4 * H)
            b[:H] = 1.0
            return W, b

        p = {}
        p["fw.W"], p["fw.b"] = cell(hidden1, input_size)
        p["bw.W"], p["bw.b"] = cell(hidden1, input_size)
        p["l2.W"], p["l2.b"] = cell(hidden2, 2 * hidden1)
        bound = 1.0 / np.sqrt(hidden2)
        p["out.w"] = rng.uniform(-bound, bound, size=hidden2)
        p["out.b"] = np.zeros(1)
        return cls(p, input_size, hidden1, hidden2, dropout)

    def cell(self, prefix: str) -> LstmCellParams:
        return LstmCellParams(self.params[f"{prefix}.W"], self.params[f"{prefix}.b"])

    def copy(self) -> "LstmNetwork":
        return LstmNetwork({k: v.copy() for k, v in self.params.items()}, self.input_size, self.hidden1, self.hidden2, self.dropout)

    @property
    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def _check_batch(network, X, mask):
    X = np.asarray(X, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if X.ndim != 3 or X.shape[2] != network.input_size or mask.shape != X.shape[:2]:
        raise ValidationError(f"batch shape {X.shape} / mask {mask.shape} does not fit input size {network.input_size}")
    empty = ~mask.any(axis=1)
    if empty.any():
        raise ValidationError(f"sequences with no unmasked step at batch rows {np.flatnonzero(empty)[:10].tolist()}")
    return np.where(mask[..., None], X, 0.0), mask


def forward(network: LstmNetwork, X, mask, train_mode: bool = False, rng=None, return_cache: bool = False):
    """Readmission probabilities for a batch of left-padded sequences.

    In train mode inverted dropout is applied to the bidirectional layer's
    output sequence and to the second layer's final hidden state.
    """
    X, mask = _check_batch(network, X, mask)
    p = network.params
    h_fw, _, cache_fw = _layer_forward(X, mask, p["fw.W"], p["fw.b"], reverse=False)
    h_bw, _, cache_bw = _layer_forward(X, mask, p["bw.W"], p["bw.b"], reverse=True)
    layer1 = np.concatenate([h_fw, h_bw], axis=2)
    keep1 = keep2 = None
    rate = network.dropout
    if train_mode and rate > 0:
        rng = np.random.default_rng(rng)
        keep1 = (rng.random(layer1.shape) >= rate) / (1.0 - rate)
        layer1_in = layer1 * keep1
    else:
        layer1_in = layer1
    _, h_last, cache_l2 = _layer_forward(layer1_in, mask, p["l2.W"], p["l2.b"], reverse=False)
    if train_mode and rate > 0:
        keep2 = (rng.random(h_last.shape) >= rate) / (1.0 - rate)
        summary = h_last * keep2
    else:
        summary = h_last
    logits = summary @ p["out.w"] + p["out.b"][0]
    probs = sigmoid(logits)
    if not return_cache:
        return probs
    cache = {
        "fw": cache_fw, "bw": cache_bw, "l2": cache_l2,
        "layer1": layer1, "layer1_in": layer1_in, "keep1": keep1, "keep2": keep2,
        "summary": summary, "probs": probs,
    }
    return probs, cache


def predict(network: LstmNetwork, X, mask, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode probabilities, processed in chunks."""
    out = [forward(network, X[s:s + batch_size], mask[s:s + batch_size]) for s in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def bce_loss(labels, probabilities) -> float:
    """Mean binary cross-entropy with probabilities clamped to [1e-12, 1 - 1e-12]."""
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(np.asarray(probabilities, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    if y.size == 0:
        raise ValidationError("empty batch")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def backward(network: LstmNetwork, cache: dict, labels, clip_norm: float | None = None) -> dict:
    """Exact gradients of mean BCE with respect to every parameter (BPTT).

    ``cache`` comes from ``forward(..., return_cache=True)``. The gradient of
    the clamped loss is taken as that of the unclamped one.
    """
    if not cache or "probs" not in cache:
        raise TrainingError("backward called without a forward cache")
    p = network.params
    y = np.asarray(labels, dtype=np.float64)
    probs = cache["probs"]
    dlogit = (probs - y) / len(y)
    grads = {"out.w": cache["summary"].T @ dlogit, "out.b": np.array([dlogit.sum()])}
    d_summary = np.outer(dlogit, p["out.w"])
    if cache["keep2"] is not None:
        d_summary = d_summary * cache["keep2"]
    zeros2 = np.zeros(cache["layer1"].shape[:2] + (network.hidden2,))
    d_layer1_in, grads["l2.W"], grads["l2.b"] = _layer_backward(zeros2, d_summary, cache["l2"])
    d_layer1 = d_layer1_in * cache["keep1"] if cache["keep1"] is not None else d_layer1_in
    H1 = network.hidden1
    zero_h = np.zeros((len(y), H1))
    _, grads["fw.W"], grads["fw.b"] = _layer_backward(d_layer1[:, :, :H1], zero_h, cache["fw"])
    _, grads["bw.W"], grads["bw.b"] = _layer_backward(d_layer1[:, :, H1:], zero_h, cache["bw"])
    if clip_norm is not None:
        clip_gradients(grads, clip_norm)
    return grads


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Rescale ``grads`` in place to global L2 norm <= ``max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def loss_and_gradients(network, X, mask, y, train_mode=False, rng=None):
    probs, cache = forward(network, X, mask, train_mode=train_mode, rng=rng, return_cache=True)
    return bce_loss(y, probs), backward(network, cache, y)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict, **hyper) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()}, **hyper)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update of ``params`` and ``state``, in place."""
    bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
    if bad:
        raise TrainingError(f"non-finite gradient in {bad} at step {state.t + 1}; update aborted")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValidationError(f"gradient {k} has shape {g.shape}, parameter has {params[k].shape}")
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 100
    batch_size: int = 64
    patience: int = 5
    seed: int = 0
    validation_fraction: float = 0.15
    clip_norm: float | None = 5.0
    lr: float = 0.001
    hidden1: int = 32
    hidden2: int = 32
    dropout: float = 0.4

    def __post_init__(self):
        if min(self.max_epochs, self.batch_size, self.patience, self.hidden1, self.hidden2) < 1:
            raise ValidationError("max_epochs, batch_size, patience and hidden sizes must be positive")
        if self.patience > self.max_epochs:
            raise ValidationError("patience must not exceed max_epochs")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValidationError("validation_fraction must lie in (0, 1)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValidationError("clip_norm must be positive (or None)")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc: float | None


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs], "best_epoch": self.best_epoch, "stopped_early": self.stopped_early}


def split_by_patient(patient_ids, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Row indices (rest, held_out); ``fraction`` of patients are held out."""
    patients = np.unique(np.asarray(patient_ids, dtype=str))
    perm = rng.permutation(len(patients))
    n_out = min(max(1, int(round(fraction * len(patients)))), len(patients) - 1)
    held = np.isin(np.asarray(patient_ids, dtype=str), patients[perm[:n_out]])
    return np.flatnonzero(~held), np.flatnonzero(held)


def _trim(X, mask):
    """Drop leading time steps that are padding for every row of the batch."""
    first = int(np.argmax(mask.any(axis=0)))
    return X[:, first:], mask[:, first:]


def _bucketed_batches(lengths, batch_size: int, rng, pool: int = 20) -> list[np.ndarray]:
    """Shuffled mini-batches of similar sequence length.

    Rows are shuffled, cut into pools of ``pool`` batches, sorted by length
    inside each pool, batched, and the batch order is shuffled again.
    """
    order = rng.permutation(len(lengths))
    span = batch_size * pool
    batches = []
    for s in range(0, len(order), span):
        chunk = order[s:s + span]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[k:k + batch_size] for k in range(0, len(chunk), batch_size))
    return [batches[k] for k in rng.permutation(len(batches))]


def train(data: SequenceSet, config: TrainConfig = TrainConfig(), validation: SequenceSet | None = None):
    """Mini-batch Adam with early stopping on validation BCE.

    Returns ``(network, log)``; the network holds the best-validation-loss
    parameters. Without an explicit ``validation`` set, ``validation_fraction``
    of the patients is carved out of ``data``.
    """
    from .evaluation import auc_roc

    if len(data) == 0:
        raise TrainingError("empty training set")
    if np.unique(data.y).size < 2:
        raise TrainingError("training data contains a single class")
    rng = np.random.default_rng(config.seed)
    if validation is None:
        tr_idx, va_idx = split_by_patient(data.patient_ids, config.validation_fraction, rng)
        train_set, val_set = data.take(tr_idx), data.take(va_idx)
    else:
        train_set, val_set = data, validation
    net = LstmNetwork.init(data.X.shape[2], config.hidden1, config.hidden2, config.dropout, rng)
    state = AdamState.zeros_like(net.params, lr=config.lr)
    log_ = TrainingLog()
    best, best_loss, wait = net.copy(), np.inf, 0
    n = len(train_set)
    lengths = train_set.mask.sum(axis=1)
    for epoch in range(1, config.max_epochs + 1):
        total = 0.0
        for rows in _bucketed_batches(lengths, config.batch_size, rng):
            X, mask = _trim(train_set.X[rows], train_set.mask[rows])
            y = train_set.y[rows]
            probs, cache = forward(net, X, mask, train_mode=True, rng=rng, return_cache=True)
            total += bce_loss(y, probs) * len(rows)
            grads = backward(net, cache, y, clip_norm=config.clip_norm)
            adam_step(net.params, grads, state)
        val_probs = predict(net, val_set.X, val_set.mask)
        val_loss = bce_loss(val_set.y, val_probs)
        val_auc = auc_roc(val_probs, val_set.y) if np.unique(val_set.y).size == 2 else None
        log_.epochs.append(EpochRecord(epoch, total / n, val_loss, val_auc))
        log.debug("epoch %d train %.5f val %.5f auc %s", epoch, total / n, val_loss, val_auc)
        if val_loss < best_loss:
            best, best_loss, wait = net.copy(), val_loss, 0
            log_.best_epoch = epoch
        else:
            wait += 1
            if wait >= config.patience:
                log_.stopped_early = True
                break
    return best, log_


# ---------------------------------------------------------------------------
# Checkpoints


def checkpoint_dict(network: LstmNetwork, registry: FeatureRegistry | None = None, extra: dict | None = None) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "model_type": "lstm",
        "architecture": {
            "input_size": network.input_size,
            "hidden1": network.hidden1,
            "hidden2": network.hidden2,
            "dropout": network.dropout,
        },
        "registry": registry.to_dict() if registry is not None else None,
        "registry_hash": registry.hash() if registry is not None else None,
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in network.params.items()},
    }
    if extra:
        doc.update(extra)
    return doc


def save_checkpoint(path, network: LstmNetwork, registry: FeatureRegistry | None = None, extra: dict | None = None) -> None:
    # float reprs in JSON round-trip float64 exactly
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(network, registry, extra), fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[LstmNetwork, FeatureRegistry | None, dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("model_type") != "lstm":
        raise ValidationError(f"{path}: not an LSTM checkpoint (model_type={doc.get('model_type')!r})")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(f"{path}: unsupported schema_version {doc.get('schema_version')}")
    arch = doc["architecture"]
    params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
    net = LstmNetwork(params, arch["input_size"], arch["hidden1"], arch["hidden2"], arch["dropout"])
    registry = FeatureRegistry.from_dict(doc["registry"]) if doc.get("registry") else None
    if registry is not None and registry.hash() != doc.get("registry_hash"):
        raise ValidationError(f"{path}: registry hash mismatch")
    return net, registry, doc
