"""Minimal dense tensor library with reverse-mode gradients.

Just enough machinery for relational graph convolutions, residual
quantization losses, and a small decoder-only transformer: numpy arrays
wrapped in a `Tensor` that records an operation graph, plus an Adam
optimizer and a flat checkpoint format.

Parameters are float32 by convention; reductions accumulate in float64.
The ops are dtype-generic so gradient checks can run in float64.
"""

from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

_GRAD_ENABLED = True
_DEBUG_CHECKS = False


class ShapeError(ValueError):
    """Raised on incompatible operand shapes; message carries both shapes."""


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf assertions on every op output (slow; for tests)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation.

    `data` is never mutated by ops; optimizer steps update it in place.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from a scalar; each recorded op runs exactly once."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)
                node._backward_fn = None
                node._parents = ()

    # operator sugar for the common arithmetic
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return take(self, key)


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative DFS; returns nodes so parents precede children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result; `backward_fn(grad)` must accumulate into parents.

    Graph edges are only recorded while gradients are enabled and some
    parent requires them, so inference builds no graph.
    """
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values in op output")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, grad: np.ndarray, owned: bool = False) -> None:
    """Add `grad` into t.grad; `owned` marks a fresh buffer safe to adopt.

    Only backward closures that just allocated `grad` (and hold no other
    reference to it) may pass owned=True; pass-through gradients must be
    copied so sibling tensors never alias one buffer.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        if owned and grad.dtype == t.data.dtype and grad.shape == t.data.shape:
            t.grad = grad
        else:
            t.grad = np.array(grad, dtype=t.data.dtype, copy=True)
    else:
        t.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# core ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}") from None

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(grad, b.shape))

    return make_node(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}") from None

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(-grad, b.shape))

    return make_node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}") from None

    def backward(grad):
        _accumulate(a, _unbroadcast(grad * b.data, a.shape), owned=True)
        _accumulate(b, _unbroadcast(grad * a.data, b.shape), owned=True)

    return make_node(data, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    data = a.data * np.asarray(s, dtype=a.dtype)

    def backward(grad):
        _accumulate(a, grad * np.asarray(s, dtype=a.dtype), owned=True)

    return make_node(data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul shape mismatch: {a.shape} vs {b.shape}") from None

    def backward(grad):
        if a.requires_grad:
            ga = np.matmul(grad, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.shape), owned=True)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), grad)
            _accumulate(b, _unbroadcast(gb, b.shape), owned=True)

    return make_node(data, (a, b), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0)

    def backward(grad):
        _accumulate(a, grad * (data > 0), owned=True)

    return make_node(data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # piecewise form avoids overflow in exp for large |x|
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(a.dtype)

    def backward(grad):
        _accumulate(a, grad * data * (1.0 - data), owned=True)

    return make_node(data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    denom = np.sum(e, axis=axis, keepdims=True, dtype=np.float64)
    data = (e / denom).astype(a.dtype)

    def backward(grad):
        inner = np.sum(grad * data, axis=axis, keepdims=True)
        _accumulate(a, data * (grad - inner), owned=True)

    return make_node(data, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias shape mismatch: {gain.shape}/{bias.shape} vs ({d},)")
    mean_ = np.mean(x.data, axis=-1, keepdims=True, dtype=np.float64)
    var = np.mean((x.data - mean_) ** 2, axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = ((x.data - mean_) * inv).astype(x.dtype)
    data = xhat * gain.data + bias.data

    def backward(grad):
        if gain.requires_grad:
            _accumulate(gain, (grad * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, grad.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = grad * gain.data
            m1 = np.mean(gx, axis=-1, keepdims=True)
            m2 = np.mean(gx * xhat, axis=-1, keepdims=True)
            _accumulate(x, inv * (gx - m1 - xhat * m2), owned=True)

    return make_node(data, (x, gain, bias), backward)


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of `table` by an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding ids must be integers, got dtype {ids.dtype}")
    data = table.data[ids]

    def backward(grad):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids.reshape(-1), grad.reshape(ids.size, *table.shape[1:]))

    return make_node(data, (table,), backward)


def take(a, key) -> Tensor:
    """Basic/advanced indexing with gradient scatter-add on the way back."""
    a = as_tensor(a)
    data = a.data[key]
    parts = key if isinstance(key, tuple) else (key,)
    fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def backward(grad):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            if fancy:  # duplicate indices need buffered accumulation
                np.add.at(a.grad, key, grad)
            else:
                a.grad[key] += grad

    return make_node(data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(grad):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * grad.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, grad[tuple(idx)])

    return make_node(data, tuple(tensors), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(grad):
        _accumulate(a, grad.reshape(a.shape))

    return make_node(data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(grad):
        _accumulate(a, np.transpose(grad, inverse))

    return make_node(data, (a,), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def backward(grad):
        g = grad
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g, dtype=a.dtype))

    return make_node(np.asarray(data), (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def squared_distance(a, b) -> Tensor:
    """Row-wise squared euclidean distance over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"squared_distance shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    data = np.sum(diff * diff, axis=-1, dtype=np.float64).astype(a.dtype)

    def backward(grad):
        g = np.expand_dims(grad, -1) * 2.0 * diff
        _accumulate(a, g)
        _accumulate(b, -g, owned=True)

    return make_node(data, (a, b), backward)


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer `targets` under `logits`.

    `logits` has shape (..., V); `targets` the leading shape. When `mask`
    is given, positions with mask 0 contribute nothing and the mean runs
    over the masked-in positions only.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy target shape mismatch: {targets.shape} vs {logits.shape}")
    m = np.max(logits.data, axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    denom = np.sum(e, axis=-1, keepdims=True, dtype=np.float64)
    logprobs = (logits.data - m) - np.log(denom).astype(logits.dtype)
    nll = -np.take_along_axis(logprobs, targets[..., None], axis=-1)[..., 0]
    if mask is None:
        weights = np.ones(targets.shape, dtype=np.float64)
    else:
        weights = np.asarray(mask, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise ShapeError("cross_entropy mask selects no positions")
    data = np.asarray(float((nll.astype(np.float64) * weights).sum() / total), dtype=logits.dtype)

    def backward(grad):
        if logits.requires_grad:
            probs = (e / denom).astype(logits.dtype)
            onehot = np.zeros_like(probs)
            np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
            w = (weights / total).astype(logits.dtype)
            _accumulate(logits, float(grad) * (probs - onehot) * w[..., None])

    return make_node(data, (logits,), backward)


def logistic_loss(scores, labels) -> Tensor:
    """Mean binary cross-entropy of sigmoid(scores) against 0/1 labels.

    Computed from raw scores for stability; equals
    -mean(y*log(f) + (1-y)*log(1-f)) with f = sigmoid(score).
    """
    scores = as_tensor(scores)
    y = np.asarray(labels, dtype=scores.dtype)
    if y.shape != scores.shape:
        raise ShapeError(f"logistic_loss shape mismatch: {scores.shape} vs {y.shape}")
    s = scores.data
    softplus = np.maximum(s, 0) - s * y + np.log1p(np.exp(-np.abs(s)))
    data = np.asarray(np.mean(softplus, dtype=np.float64), dtype=scores.dtype)

    def backward(grad):
        if scores.requires_grad:
            f = np.where(s >= 0, 1.0 / (1.0 + np.exp(-np.abs(s))), np.exp(-np.abs(s)) / (1.0 + np.exp(-np.abs(s))))
            _accumulate(scores, float(grad) * (f.astype(scores.dtype) - y) / s.size)

    return make_node(data, (scores,), backward)


def stop_gradient(a) -> Tensor:
    """Identity forward; blocks all gradient flow into `a`."""
    a = as_tensor(a)
    return Tensor(a.data)


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; no-op when rate is 0."""
    a = as_tensor(a)
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    data = a.data * keep

    def backward(grad):
        _accumulate(a, grad * keep, owned=True)

    return make_node(data, (a,), backward)


# ---------------------------------------------------------------------------
# parameters and optimization


def init_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) parameter init."""
    bound = 1.0 / np.sqrt(float(max(fan_in, 1)))
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


class Adam:
    """Adam with bias correction; skips (and counts) non-finite steps.

    `grad_clip`, when set, rescales the global gradient norm to that bound
    before the update.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, grad_clip: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        self.skipped = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> bool:
        """Apply one update from the accumulated grads; False if skipped."""
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if any(not np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            logger.warning("adam: non-finite gradient, skipping step (skipped=%d)", self.skipped)
            return False
        if self.grad_clip is not None:
            total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
            if total > self.grad_clip:
                scale_by = self.grad_clip / total
                grads = [g * scale_by for g in grads]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return True

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + one raw little-endian float32 blob per tensor

CHECKPOINT_FORMAT = "struid-checkpoint-v1"


def _blob_name(name: str) -> str:
    return name.replace("/", "__") + ".f32"


def save_checkpoint(path, tensors: dict[str, Tensor], seed: int, step: int, extra: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(tensors):
        arr = tensors[name].data if isinstance(tensors[name], Tensor) else np.asarray(tensors[name])
        blob = arr.astype("<f4").tobytes()
        (path / _blob_name(name)).write_bytes(blob)
        entries.append({"name": name, "shape": list(arr.shape), "file": _blob_name(name)})
    manifest = {"format": CHECKPOINT_FORMAT, "seed": seed, "step": step, "tensors": entries}
    if extra:
        manifest["extra"] = extra
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint: {path}")
    tensors = {}
    for entry in manifest["tensors"]:
        raw = (path / entry["file"]).read_bytes()
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if len(raw) != 4 * n:
            raise ValueError(f"blob size mismatch for {entry['name']}: {len(raw)} bytes for shape {entry['shape']}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        tensors[entry["name"]] = arr
    meta = {k: v for k, v in manifest.items() if k != "tensors"}
    return tensors, meta
