"""Small reverse-mode autodiff engine over numpy arrays.

Only the operations the hierarchical GCN needs are provided. Tensors may
carry leading batch axes; ``matmul`` broadcasts like :func:`numpy.matmul`
and gradients are summed back over broadcast axes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64
# node-averaged GCN readouts vary across subjects with variance near 1e-7,
# so the usual 1e-5 would swamp the batch variance
BN_EPS = 1e-10
BN_MOMENTUM = 0.1


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or inf."""


class GraphConsumedError(RuntimeError):
    """Raised when backward is run twice over the same graph."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a sum is non-finite whenever any term is (overflow aside), and is far cheaper
    if not np.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # never mutated in place, so aliasing the incoming buffer is safe
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementary ops ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out_data, (a, b), backward, "matmul")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError as exc:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}") from exc

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward, "add")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        _accumulate(a, g * c)

    return _make(a.data * c, (a,), backward, "scale")


def multiply_const(a, mask: np.ndarray) -> Tensor:
    """Elementwise product with a constant array (no gradient to the array)."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=DTYPE)

    def backward(g):
        _accumulate(a, _unbroadcast(g * mask, a.shape))

    return _make(a.data * mask, (a,), backward, "multiply_const")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        _accumulate(a, g * (a.data > 0))

    return _make(out_data, (a,), backward, "relu")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(index)])

    return _make(out_data, tensors, backward, "concat")


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=-2)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=-1)


def mean_rows(a) -> Tensor:
    """Mean over the row axis (axis -2): ``(..., n, d) -> (..., d)``."""
    a = as_tensor(a)
    n = a.shape[-2]

    def backward(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g, -2) / n, a.shape))

    return _make(a.data.mean(axis=-2), (a,), backward, "mean_rows")


def take_rows(a, index: np.ndarray) -> Tensor:
    """Select entries along axis 0."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accumulate(a, full)

    return _make(a.data[index], (a,), backward, "take_rows")


def total(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum()), (a,), backward, "sum")


def add_all(tensors: Iterable[Tensor]) -> Tensor:
    tensors = list(tensors)
    out = tensors[0]
    for t in tensors[1:]:
        out = add(out, t)
    return out


# -- layers -----------------------------------------------------------------

def batchnorm(x, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, train: bool, update_stats: bool = True) -> Tensor:
    """Batch normalisation over axis 0 of a ``(batch, features)`` tensor.

    In train mode the running statistics are updated in place (unless
    ``update_stats`` is False) with momentum 0.1, using the unbiased batch
    variance as torch does.
    """
    x = as_tensor(x)
    if train:
        n = x.shape[0]
        if n < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        if update_stats:
            running_mean *= 1.0 - BN_MOMENTUM
            running_mean += BN_MOMENTUM * mu
            running_var *= 1.0 - BN_MOMENTUM
            running_var += BN_MOMENTUM * var * n / (n - 1)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mu) * inv_std
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        _accumulate(gamma, (g * xhat).sum(axis=0))
        _accumulate(beta, g.sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            if train:
                gx = inv_std * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
            else:
                gx = gx * inv_std
            _accumulate(x, gx)

    return _make(out_data, (x, gamma, beta), backward, "batchnorm")


def dropout(x, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(x.shape, dtype=np.float32) >= rate) * (1.0 / (1.0 - rate))
    return multiply_const(x, mask)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_crossentropy(logits, labels, class_weights=None) -> tuple[Tensor, np.ndarray]:
    """Weighted cross-entropy, mean over samples.

    Per-sample loss is ``-w[label] * log p[label]``; returns the scalar loss
    tensor and the softmax probabilities.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    _check_finite(logits.data, "softmax_crossentropy input")
    k = logits.shape[1]
    w = np.ones(k) if class_weights is None else np.asarray(class_weights, dtype=DTYPE)
    if np.any(w <= 0):
        raise ValueError("class weights must be positive")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    probs = np.exp(log_p)
    n = labels.shape[0]
    rows = np.arange(n)
    sample_w = w[labels]
    loss = -(sample_w * log_p[rows, labels]).sum() / n

    def backward(g):
        onehot = np.zeros_like(probs)
        onehot[rows, labels] = 1.0
        _accumulate(logits, g * sample_w[:, None] * (probs - onehot) / n)

    return _make(np.asarray(loss), (logits,), backward, "softmax_crossentropy"), probs


# -- backward ---------------------------------------------------------------

def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are
    overwritten. A graph can be traversed once; run the forward pass again
    before a second call.
    """
    if loss._consumed:
        raise GraphConsumedError("backward already ran on this graph; run forward again")
    if grad is None:
        if loss.data.size != 1:
            raise ValueError("backward needs a scalar loss or an explicit seed gradient")
        grad = np.ones_like(loss.data)
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    # intermediates start fresh; leaves keep accumulating
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.asarray(grad, dtype=DTYPE)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._backward is not None:
            node._consumed = True


# -- gradient oracle ----------------------------------------------------------

def finite_diff_check(f: Callable[[], float], x: Tensor, analytic: np.ndarray,
                      step: float = 1e-5, coords: np.ndarray | None = None) -> float:
    """Max relative error of ``analytic`` against central differences.

    ``f`` is evaluated with ``x.data`` perturbed in place; it must be
    deterministic. Coordinates where ``|analytic| + |numeric| <= 1e-8`` are
    skipped. ``coords`` restricts the check to a subset of flat indices.
    """
    flat = x.data.reshape(-1)
    analytic = np.asarray(analytic).reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        f_plus = f()
        flat[i] = orig - step
        f_minus = f()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        denom = abs(analytic[i]) + abs(numeric)
        if denom > 1e-8:
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst


def gradient_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                   step: float = 1e-5, max_coords: int | None = None,
                   rng: np.random.Generator | None = None) -> dict[str, float]:
    """Finite-difference check of every tensor in ``params``.

    ``loss_fn`` builds a fresh graph and returns the scalar loss. Returns the
    max relative error per parameter name.
    """
    for p in params.values():
        p.zero_grad()
    backward(loss_fn())
    errors = {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        coords = None
        if max_coords is not None and p.data.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(p.data.size, size=max_coords, replace=False)
        errors[name] = finite_diff_check(lambda: float(loss_fn().data), p, analytic, step, coords)
    return errors


# -- checkpoints -------------------------------------------------------------

_MAGIC = b"BDSCKPT1"


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Write named float64 arrays to a deterministic binary file.

    Layout: magic, u64 header length, UTF-8 JSON header (names, shapes,
    offsets, meta), then the raw little-endian payload.
    """
    entries = []
    payload = bytearray()
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload += arr.tobytes()
    header = json.dumps({"tensors": entries, "meta": dict(meta or {})}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    body = raw[16 + hlen:]
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(DTYPE)
    return arrays, header["meta"]
