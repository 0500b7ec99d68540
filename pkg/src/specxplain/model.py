"""The cough-classification CNN: build, train, evaluate, checkpoint.

Architecture (channel-last, fixed):

    conv 16@3x3 + relu + 2x2 maxpool + dropout
    conv 32@3x3 + relu + 2x2 maxpool + dropout
    conv 64@3x3 + relu + 2x2 maxpool + dropout
    flatten
    dense 64 + relu + dropout
    dense 2 + softmax

At the canonical 128 x 820 x 3 input this gives exactly 6,708,450 trainable
parameters.  Training uses Adam with sparse cross-entropy, seeded shuffling,
and early stopping on validation accuracy with best-weight restoration.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from specxplain.tensor import (
    Rng,
    Tensor,
    conv2d,
    dense,
    dropout,
    flatten,
    maxpool2d,
    no_grad,
    relu,
    softmax,
    sparse_cross_entropy,
)

CONV_FILTERS = (16, 32, 64)
KERNEL_SIZE = 3
DENSE_HIDDEN = 64
N_CLASSES = 2
LABELS = ("covid", "non_covid")

CHECKPOINT_MAGIC = b"CNNX"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Raised for unreadable, truncated, or incompatible checkpoint files."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 0.001
    early_stop_patience: int = 5
    dropout_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.early_stop_patience) <= 0:
            raise ValueError("epochs, batch_size and patience must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.early_stop_patience > self.epochs:
            raise ValueError("patience cannot exceed the epoch budget")


def glorot_limits(fan_in: int, fan_out: int) -> float:
    """Glorot-uniform bound sqrt(6 / (fan_in + fan_out))."""
    if fan_in + fan_out <= 0 or fan_in < 0 or fan_out < 0:
        raise ValueError(f"invalid fans ({fan_in}, {fan_out})")
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _glorot(shape: tuple[int, ...], fan_in: int, fan_out: int, rng: Rng) -> np.ndarray:
    lim = glorot_limits(fan_in, fan_out)
    return rng.uniform(-lim, lim, shape)


@dataclass
class ForwardResult:
    """One forward pass with the handles the explanation methods need."""

    probs: Tensor
    logits: Tensor
    input: Tensor
    conv_prepool: list[Tensor] = field(default_factory=list)
    conv_pooled: list[Tensor] = field(default_factory=list)

    @property
    def last_conv_prepool(self) -> Tensor:
        return self.conv_prepool[-1]

    @property
    def last_conv_pooled(self) -> Tensor:
        return self.conv_pooled[-1]


class CnnModel:
    """Parameter container plus the forward pass."""

    def __init__(self, conv_params, dense_params, dropout_rate: float,
                 input_shape: tuple[int, int], metadata: dict | None = None):
        self.conv_params = conv_params      # [(kernels FxkxkxC, bias F)] * 3
        self.dense_params = dense_params    # [(weights MxN, bias M)] * 2
        self.dropout_rate = dropout_rate
        self.input_shape = tuple(input_shape)
        self.metadata = dict(metadata or {})

    # -- structure -----------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        out = []
        for k, b in self.conv_params:
            out += [k, b]
        for w, b in self.dense_params:
            out += [w, b]
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def pooled_shape(self) -> tuple[int, int]:
        h, w = self.input_shape
        for _ in CONV_FILTERS:
            h, w = h // 2, w // 2
        return h, w

    @property
    def flat_features(self) -> int:
        h, w = self.pooled_shape
        return h * w * CONV_FILTERS[-1]

    # -- forward --------------------------------------------------------------
    def forward(self, x, training: bool = False, rng: Rng | None = None) -> ForwardResult:
        """Class probabilities for one image (HxWx3) or a batch (NxHxWx3).

        ``training=True`` activates dropout and needs an rng; inference is a
        pure function of the input.
        """
        xt = x if isinstance(x, Tensor) else Tensor(x)
        spatial = xt.shape[1:3] if xt.ndim == 4 else xt.shape[:2]
        channels = xt.shape[-1]
        if tuple(spatial) != self.input_shape or channels != 3:
            raise ValueError(f"expected input {self.input_shape + (3,)}, got {xt.shape}")

        h = xt
        prepool, pooled = [], []
        for kern, bias in self.conv_params:
            prepool.append(relu(conv2d(h, kern, bias)))
            pooled.append(maxpool2d(prepool[-1]))
            h = dropout(pooled[-1], self.dropout_rate, training, rng)
        h = flatten(h)
        w1, b1 = self.dense_params[0]
        h = dropout(relu(dense(h, w1, b1)), self.dropout_rate, training, rng)
        w2, b2 = self.dense_params[1]
        logits = dense(h, w2, b2)
        return ForwardResult(
            probs=softmax(logits),
            logits=logits,
            input=xt,
            conv_prepool=prepool,
            conv_pooled=pooled,
        )

    def describe(self) -> dict:
        """JSON-ready architecture descriptor (used by checkpoints)."""
        layers = []
        for i, (k, b) in enumerate(self.conv_params):
            layers.append({"type": "conv", "name": f"conv{i + 1}",
                           "kernels": list(k.shape), "bias": list(b.shape)})
        for i, (w, b) in enumerate(self.dense_params):
            layers.append({"type": "dense", "name": f"dense{i + 1}",
                           "weights": list(w.shape), "bias": list(b.shape)})
        return {
            "input_shape": [*self.input_shape, 3],
            "dropout_rate": self.dropout_rate,
            "layers": layers,
            "parameter_count": self.parameter_count(),
            "metadata": self.metadata,
        }


def build_cnn(config: TrainConfig, rng: Rng,
              input_height: int = 128, input_width: int = 820) -> CnnModel:
    """Glorot-initialized model; biases start at zero.

    Convolution fans count the receptive field: fan_in = k*k*C_in and
    fan_out = k*k*F.
    """
    k = KERNEL_SIZE
    conv_params = []
    c_in = 3
    for f in CONV_FILTERS:
        kernels = _glorot((f, k, k, c_in), k * k * c_in, k * k * f, rng)
        conv_params.append((Tensor(kernels, True), Tensor(np.zeros(f), True)))
        c_in = f

    h, w = input_height, input_width
    for _ in CONV_FILTERS:
        h, w = h // 2, w // 2
    flat = h * w * CONV_FILTERS[-1]

    dense_params = []
    for n_in, n_out in ((flat, DENSE_HIDDEN), (DENSE_HIDDEN, N_CLASSES)):
        weights = _glorot((n_out, n_in), n_in, n_out, rng)
        dense_params.append((Tensor(weights, True), Tensor(np.zeros(n_out), True)))

    return CnnModel(conv_params, dense_params, config.dropout_rate,
                    (input_height, input_width))


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

class AdamState:
    """Adam with bias correction: eta=0.001, beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params: list[Tensor], learning_rate: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(state: AdamState, params: list[Tensor], grads: list[np.ndarray]) -> list[Tensor]:
    """One in-place Adam update; returns the updated parameter list."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("parameter/gradient count mismatch with optimizer state")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# training / evaluation
# ---------------------------------------------------------------------------

def _check_dataset(dataset) -> tuple[np.ndarray, np.ndarray]:
    x, y = dataset
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 4 or x.shape[0] == 0 or x.shape[0] != y.shape[0]:
        raise ValueError("dataset must be non-empty (N,H,W,3) images with N labels")
    return x, y


def evaluate(model: CnnModel, dataset, chunk_size: int = 32) -> dict:
    """Mean loss, accuracy, and a 2x2 confusion matrix (rows = true class)."""
    x, y = _check_dataset(dataset)
    n = x.shape[0]
    loss_sum = 0.0
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    with no_grad():
        for lo in range(0, n, chunk_size):
            xb, yb = x[lo : lo + chunk_size], y[lo : lo + chunk_size]
            probs = model.forward(xb).probs
            loss_sum += sparse_cross_entropy(probs, yb).item() * len(yb)
            preds = probs.data.argmax(axis=1)
            np.add.at(confusion, (yb, preds), 1)
    correct = np.trace(confusion)
    return {"loss": loss_sum / n, "accuracy": correct / n, "confusion": confusion}


def _chunk_pass(model: CnnModel, xb: np.ndarray, yb: np.ndarray, rng: Rng) -> tuple[list[np.ndarray], float]:
    """Forward/backward over one chunk; grads stay in a private store."""
    result = model.forward(xb, training=True, rng=rng)
    loss = sparse_cross_entropy(result.probs, yb)
    store = loss.backward(write_grad=False)
    grads = []
    for p in model.parameters():
        g = store.get(p)
        grads.append(np.zeros_like(p.data) if g is None else g)
    return grads, loss.item()


def fit(model: CnnModel, train_set, val_set, config: TrainConfig,
        jobs: int = 1, chunk_size: int = 16) -> list[dict]:
    """Train with shuffled mini-batches and early stopping on validation accuracy.

    Batches are processed in chunks of ``chunk_size`` images whose gradients
    are reduced in index order, so results are identical for any ``jobs``.
    Stops when validation accuracy has not improved for
    ``config.early_stop_patience`` consecutive epochs, then restores the
    best-epoch parameters.
    """
    x_train, y_train = _check_dataset(train_set)
    x_val, y_val = _check_dataset(val_set)
    params = model.parameters()
    adam = AdamState(params, learning_rate=config.learning_rate)
    master = Rng(config.seed)
    chunk_counter = 0

    best_acc = -1.0
    best_snapshot = None
    stale = 0
    history: list[dict] = []
    n = x_train.shape[0]

    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for epoch in range(1, config.epochs + 1):
            perm = master.derive(1_000_000 + epoch).permutation(n)
            batch_losses = []
            for lo in range(0, n, config.batch_size):
                idx = perm[lo : lo + config.batch_size]
                xb, yb = x_train[idx], y_train[idx]
                chunks = []
                for clo in range(0, len(idx), chunk_size):
                    chunk_counter += 1
                    chunks.append((xb[clo : clo + chunk_size], yb[clo : clo + chunk_size],
                                   master.derive(chunk_counter)))
                if pool is not None:
                    results = list(pool.map(lambda c: _chunk_pass(model, *c), chunks))
                else:
                    results = [_chunk_pass(model, *c) for c in chunks]

                total = len(idx)
                grads = [np.zeros_like(p.data) for p in params]
                loss_sum = 0.0
                for (chunk_grads, chunk_loss), (cx, _, _) in zip(results, chunks):
                    scale = len(cx) / total
                    for acc, g in zip(grads, chunk_grads):
                        acc += g * scale
                    loss_sum += chunk_loss * len(cx)
                adam_step(adam, params, grads)
                batch_losses.append(loss_sum / total)

            train_eval = evaluate(model, (x_train, y_train))
            val_eval = evaluate(model, (x_val, y_val))
            history.append({
                "epoch": epoch,
                "train_loss": float(np.mean(batch_losses)),
                "train_acc": float(train_eval["accuracy"]),
                "val_loss": float(val_eval["loss"]),
                "val_acc": float(val_eval["accuracy"]),
            })

            if val_eval["accuracy"] > best_acc:
                best_acc = val_eval["accuracy"]
                best_snapshot = [p.data.copy() for p in params]
                stale = 0
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    break
    finally:
        if pool is not None:
            pool.shutdown()

    if best_snapshot is not None:
        for p, snap in zip(params, best_snapshot):
            p.data[...] = snap
    return history


def history_to_csv(history: list[dict], path) -> None:
    """epoch,train_loss,train_acc,val_loss,val_acc with full float precision."""
    lines = ["epoch,train_loss,train_acc,val_loss,val_acc"]
    for row in history:
        values = [repr(float(row[k])) for k in
                  ("train_loss", "train_acc", "val_loss", "val_acc")]
        lines.append(",".join([str(row["epoch"]), *values]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: CnnModel, path) -> None:
    """Binary layout: magic 'CNNX', u32 version, u32 JSON length, JSON
    architecture descriptor, then float64 little-endian arrays in layer order."""
    desc = json.dumps(model.describe()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(desc)))
        fh.write(desc)
        for p in model.parameters():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> CnnModel:
    """Rebuild a model from :func:`save_checkpoint` output, verifying layout."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a CNNX checkpoint")
    version, desc_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < 12 + desc_len:
        raise CheckpointError(f"{path}: corrupt checkpoint (truncated descriptor)")
    try:
        desc = json.loads(blob[12 : 12 + desc_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint descriptor") from exc

    try:
        h, w, _ = desc["input_shape"]
        layers = desc["layers"]
        rate = desc["dropout_rate"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: incomplete checkpoint descriptor") from exc

    conv_params, dense_params = [], []
    shapes: list[tuple[int, ...]] = []
    for layer in layers:
        if layer["type"] == "conv":
            shapes += [tuple(layer["kernels"]), tuple(layer["bias"])]
        elif layer["type"] == "dense":
            shapes += [tuple(layer["weights"]), tuple(layer["bias"])]
        else:
            raise CheckpointError(f"{path}: unknown layer type {layer['type']!r}")

    expected = sum(int(np.prod(s)) for s in shapes)
    payload = blob[12 + desc_len :]
    if len(payload) != expected * 8:
        raise CheckpointError(
            f"{path}: corrupt checkpoint (expected {expected * 8} payload bytes, "
            f"got {len(payload)})")

    values = np.frombuffer(payload, dtype="<f8")
    offset = 0
    tensors = []
    for s in shapes:
        n = int(np.prod(s))
        tensors.append(Tensor(values[offset : offset + n].reshape(s).copy(), True))
        offset += n

    it = iter(tensors)
    for layer in layers:
        pair = (next(it), next(it))
        (conv_params if layer["type"] == "conv" else dense_params).append(pair)

    model = CnnModel(conv_params, dense_params, rate, (h, w), desc.get("metadata"))
    if model.parameter_count() != desc.get("parameter_count", model.parameter_count()):
        raise CheckpointError(f"{path}: architecture mismatch in parameter count")
    return model
