"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation the CNN and the explanation methods need is implemented
here as a differentiable function over :class:`Tensor`.  The recording
"tape" is the implicit graph of parent links and backward closures that
each operation attaches to its output; ``Tensor.backward`` replays it in
reverse topological order and returns a :class:`GradientStore`.

Layout conventions: row-major, channel-last.  Image operations accept a
single ``H x W x C`` array or a batch ``N x H x W x C`` (the batch form is
what the training loop uses; the semantics per item are identical).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "GradientStore",
    "Rng",
    "no_grad",
    "conv2d",
    "maxpool2d",
    "relu",
    "dense",
    "softmax",
    "dropout",
    "flatten",
    "sparse_cross_entropy",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference-only forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Rng:
    """Deterministic random source: PCG64 behind a tiny facade.

    Identical seed gives an identical stream on every platform.  Derived
    streams (per file, per sample, per batch chunk) use ``seed + index``
    so parallel work stays reproducible regardless of worker count.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, index: int) -> "Rng":
        """Independent stream for sub-task ``index`` of this seed."""
        return Rng((self.seed + int(index)) & 0xFFFFFFFFFFFFFFFF)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"


class GradientStore:
    """Gradients produced by one backward pass, keyed by tensor identity."""

    def __init__(self):
        self._grads: dict[int, tuple["Tensor", np.ndarray]] = {}

    def add(self, t: "Tensor", g: np.ndarray) -> None:
        entry = self._grads.get(id(t))
        if entry is None:
            self._grads[id(t)] = (t, np.array(g, dtype=np.float64, copy=True))
        else:
            acc = entry[1]
            acc += g

    def get(self, t: "Tensor") -> Optional[np.ndarray]:
        entry = self._grads.get(id(t))
        return None if entry is None else entry[1]

    def __contains__(self, t: "Tensor") -> bool:
        return id(t) in self._grads

    def tensors(self) -> list["Tensor"]:
        return [t for t, _ in self._grads.values()]


class Tensor:
    """A dense n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray, GradientStore], None]] = None

    # -- convenience -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{req})"

    # -- autodiff core -----------------------------------------------------
    def backward(self, write_grad: bool = True) -> GradientStore:
        """Reverse sweep from this scalar; returns the gradient store.

        ``write_grad=True`` (the default, single-threaded contract) also
        copies each gradient into the tensors' ``.grad`` slot.  Concurrent
        backward passes over shared parameters must pass ``False`` and read
        the returned store instead.
        """
        if self.size != 1:
            raise ValueError(f"backward() needs a scalar seed, got shape {self.shape}")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        store = GradientStore()
        store.add(self, np.ones_like(self.data))
        for node in reversed(topo):
            g = store.get(node)
            if g is None or node._backward is None:
                continue
            node._backward(g, store)

        if write_grad:
            for t in store.tensors():
                if t.requires_grad:
                    t.grad = store.get(t)
        return store

    # -- arithmetic (enough for objectives and tests) -----------------------
    def __add__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        if other.shape not in ((), self.shape):
            raise ValueError(f"add shape mismatch: {self.shape} vs {other.shape}")
        out = _result(np.add(self.data, other.data), (self, other))
        if out.requires_grad:
            def bw(g, store):
                if self.requires_grad:
                    store.add(self, g)
                if other.requires_grad:
                    store.add(other, g if other.shape == g.shape else g.sum())
            out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = _result(-self.data, (self,))
        if out.requires_grad:
            out._backward = lambda g, store: store.add(self, -g)
        return out

    def __sub__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other) -> "Tensor":
        return (-self) + other

    def __mul__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        if other.shape not in ((), self.shape):
            raise ValueError(f"mul shape mismatch: {self.shape} vs {other.shape}")
        out = _result(np.multiply(self.data, other.data), (self, other))
        if out.requires_grad:
            def bw(g, store):
                if self.requires_grad:
                    store.add(self, g * other.data)
                if other.requires_grad:
                    go = g * self.data
                    store.add(other, go if other.shape == go.shape else go.sum())
            out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, scalar) -> "Tensor":
        return self * (1.0 / float(scalar))

    def __getitem__(self, idx) -> "Tensor":
        out = _result(self.data[idx], (self,))
        if out.requires_grad:
            def bw(g, store):
                gx = np.zeros_like(self.data)
                np.add.at(gx, idx, g)
                store.add(self, gx)
            out._backward = bw
        return out

    def sum(self) -> "Tensor":
        out = _result(self.data.sum(), (self,))
        if out.requires_grad:
            out._backward = lambda g, store: store.add(self, np.full_like(self.data, float(g)))
        return out

    def mean(self) -> "Tensor":
        out = _result(self.data.mean(), (self,))
        if out.requires_grad:
            inv = 1.0 / self.size
            out._backward = lambda g, store: store.add(self, np.full_like(self.data, float(g) * inv))
        return out


def _result(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    """Output tensor wired to its parents when grad recording is active."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    return out


def _as_batch(x: np.ndarray, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise ValueError(f"{op} expects HxWxC or NxHxWxC input, got shape {x.shape}")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Patch matrix of a padded NHWC batch: (N*H*W, k*k*C), row-major taps."""
    n, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k, c), axis=(1, 2, 3))[:, :, :, 0]
    return win.reshape(n * h * w, k * k * c)


# -- image ops ---------------------------------------------------------------

def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Stride-1, zero same-padded 2-D convolution (channel-last).

    ``kernels`` is ``F x k x k x C`` with odd ``k``; output keeps the input's
    spatial size and has ``F`` channels.  Differentiable in all arguments.
    """
    xb, batched = _as_batch(x.data, "conv2d")
    if kernels.ndim != 4 or kernels.shape[1] != kernels.shape[2]:
        raise ValueError(f"kernels must be FxkxkxC, got {kernels.shape}")
    f, k, _, c = kernels.shape
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if c != xb.shape[3]:
        raise ValueError(f"channel mismatch: input has {xb.shape[3]}, kernels expect {c}")
    if bias.shape != (f,):
        raise ValueError(f"bias must have shape ({f},), got {bias.shape}")

    n, h, w, _ = xb.shape
    cols = _im2col(xb, k)
    km = kernels.data.transpose(1, 2, 3, 0).reshape(k * k * c, f)
    out_mat = cols @ km
    out_mat += bias.data
    out = out_mat.reshape(n, h, w, f)
    res = _result(out if batched else out[0], (x, kernels, bias))
    if res.requires_grad:
        def bw(g, store):
            gb = g if batched else g[None]
            gm = gb.reshape(n * h * w, f)
            if kernels.requires_grad:
                store.add(kernels, (cols.T @ gm).reshape(k, k, c, f).transpose(3, 0, 1, 2))
            if bias.requires_grad:
                store.add(bias, gm.sum(axis=0))
            if x.requires_grad:
                # correlate grad with spatially flipped, channel-transposed kernels
                kt = kernels.data[:, ::-1, ::-1, :].transpose(1, 2, 0, 3).reshape(k * k * f, c)
                gx = (_im2col(gb, k) @ kt).reshape(n, h, w, c)
                store.add(x, gx if batched else gx[0])
        res._backward = bw
    return res


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling; a trailing odd row/column is dropped.

    Backward routes each gradient only to the window argmax; ties go to the
    first position in row-major window order.
    """
    xb, batched = _as_batch(x.data, "maxpool2d")
    n, h, w, c = xb.shape
    if h < 2 or w < 2:
        raise ValueError(f"maxpool2d needs spatial dims >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = xb[:, : 2 * h2, : 2 * w2, :].reshape(n, h2, 2, w2, 2, c)
    win = win.transpose(0, 1, 3, 2, 4, 5).reshape(n, h2, w2, 4, c)
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    res = _result(out if batched else out[0], (x,))
    if res.requires_grad:
        def bw(g, store):
            gb = g if batched else g[None]
            scat = np.zeros((n, h2, w2, 4, c))
            np.put_along_axis(scat, idx[:, :, :, None, :], gb[:, :, :, None, :], axis=3)
            gx = np.zeros_like(xb)
            gx[:, : 2 * h2, : 2 * w2, :] = (
                scat.reshape(n, h2, w2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h2, 2 * w2, c)
            )
            store.add(x, gx if batched else gx[0])
        res._backward = bw
    return res


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); gradient is 1 where x > 0, else 0."""
    out = _result(np.maximum(x.data, 0.0), (x,))
    if out.requires_grad:
        mask = x.data > 0
        out._backward = lambda g, store: store.add(x, g * mask)
    return out


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Fully connected layer: W @ x + b for a vector, row-wise for a batch."""
    if weights.ndim != 2:
        raise ValueError(f"weights must be MxN, got {weights.shape}")
    m, nin = weights.shape
    if x.ndim not in (1, 2) or x.shape[-1] != nin:
        raise ValueError(f"dense input of shape {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (m,):
        raise ValueError(f"bias must have shape ({m},), got {bias.shape}")
    out = _result(x.data @ weights.data.T + bias.data, (x, weights, bias))
    if out.requires_grad:
        batched = x.ndim == 2
        def bw(g, store):
            if weights.requires_grad:
                store.add(weights, g.T @ x.data if batched else np.outer(g, x.data))
            if bias.requires_grad:
                store.add(bias, g.sum(axis=0) if batched else g)
            if x.requires_grad:
                store.add(x, g @ weights.data)
        out._backward = bw
    return out


def softmax(logits: Tensor) -> Tensor:
    """Stable softmax over the last axis; outputs sum to 1."""
    z = logits.data
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _result(y, (logits,))
    if out.requires_grad:
        def bw(g, store):
            store.add(logits, (g - (g * y).sum(axis=-1, keepdims=True)) * y)
        out._backward = bw
    return out


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[Rng]) -> Tensor:
    """Inverted dropout: zero a ``rate`` fraction, scale survivors by 1/(1-rate).

    Identity at inference or rate 0, so no rescaling is ever needed downstream.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.uniform(size=x.shape) >= rate) / (1.0 - rate)
    out = _result(x.data * keep, (x,))
    if out.requires_grad:
        out._backward = lambda g, store: store.add(x, g * keep)
    return out


def flatten(x: Tensor) -> Tensor:
    """Row-major flattening: HxWxC to a vector, NxHxWxC to N vectors."""
    if x.ndim == 4:
        n = x.shape[0]
        out = _result(x.data.reshape(n, -1), (x,))
    else:
        out = _result(x.data.reshape(-1), (x,))
    if out.requires_grad:
        out._backward = lambda g, store: store.add(x, g.reshape(x.shape))
    return out


LOG_CLAMP = 1e-12


def sparse_cross_entropy(probs: Tensor, label) -> Tensor:
    """-log p[label] with a 1e-12 floor; batched form returns the mean.

    ``probs`` is a softmax output of shape ``(K,)`` with an integer label, or
    ``(B, K)`` with a length-B label vector.
    """
    p = probs.data
    if p.ndim == 1:
        labels = np.array([int(label)])
        pm = p[None]
    elif p.ndim == 2:
        labels = np.asarray(label, dtype=np.int64)
        if labels.shape != (p.shape[0],):
            raise ValueError(f"need {p.shape[0]} labels, got shape {labels.shape}")
        pm = p
    else:
        raise ValueError(f"probs must be (K,) or (B,K), got {p.shape}")
    k = pm.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    rows = np.arange(pm.shape[0])
    picked = pm[rows, labels]
    loss = -np.log(np.maximum(picked, LOG_CLAMP)).mean()
    out = _result(np.float64(loss), (probs,))
    if out.requires_grad:
        def bw(g, store):
            gp = np.zeros_like(pm)
            live = picked >= LOG_CLAMP
            gp[rows[live], labels[live]] = -float(g) / (picked[live] * pm.shape[0])
            store.add(probs, gp if p.ndim == 2 else gp[0])
        out._backward = bw
    return out
