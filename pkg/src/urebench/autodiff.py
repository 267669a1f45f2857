"""Minimal reverse-mode automatic differentiation over dense float32 arrays.

Only the primitives the residual classifier and the attribution methods need
are provided: convolution, dense layers, relu, global average pooling,
softmax cross-entropy and a few elementwise helpers.  Every forward op checks
its output for NaN/Inf.
"""

from __future__ import annotations

import contextlib
import hashlib
import os
import struct
from pathlib import Path

import numpy as np

DTYPE = np.float32

CKPT_MAGIC = b"CKPT"


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the working float type (used by gradient oracles)."""
    global DTYPE
    saved, DTYPE = DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = saved


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


class CheckpointError(ValueError):
    pass


def _checked(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return data


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Array node in a computation graph.

    ``grad`` is populated by :func:`backward` for every tensor with
    ``requires_grad`` set, including intermediate activations.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __getitem__(self, index):
        return take(self, index)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mul(tsum(self), 1.0 / self.size)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    tracked = tuple(p for p in parents if p.requires_grad)
    out = Tensor(_checked(data, op), requires_grad=bool(tracked))
    if tracked:
        out._parents = tracked
        out._backward = backward_fn
    return out


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # grads are never mutated in place, so sharing arrays between nodes is safe
    g = g.astype(DTYPE, copy=False)
    t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), _bw, "add")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def _bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), _bw, "mul")


def square(x: Tensor) -> Tensor:
    return mul(x, x)


def tsum(x: Tensor) -> Tensor:
    def _bw(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum(), dtype=DTYPE), (x,), _bw, "sum")


def reshape(x: Tensor, shape) -> Tensor:
    def _bw(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), _bw, "reshape")


def take(x: Tensor, index) -> Tensor:
    def _bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        _accumulate(x, full)

    return _make(np.array(x.data[index], dtype=DTYPE), (x,), _bw, "take")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def _bw(g):
        _accumulate(x, g * mask)

    return _make(np.where(mask, x.data, 0).astype(DTYPE), (x,), _bw, "relu")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape

    def _bw(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape))

    return _make(x.data.mean(axis=(2, 3)), (x,), _bw, "global_avg_pool")


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"dense shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")

    def _bw(g):
        _accumulate(x, g @ w.data.T)
        _accumulate(w, x.data.T @ g)
        _accumulate(b, g.sum(axis=0))

    return _make(x.data @ w.data + b.data, (x, w, b), _bw, "dense")


def _conv_geometry(x: Tensor, kernel: Tensor, bias: Tensor, padding: str):
    if x.data.ndim != 4 or kernel.data.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ValueError(f"conv2d shape mismatch: x {x.shape}, kernel {kernel.shape}")
    f, c, kh, kw = kernel.shape
    if bias.shape != (f,):
        raise ValueError(f"conv2d shape mismatch: bias {bias.shape}, kernel {kernel.shape}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"same padding needs odd kernel dims, got kernel {kernel.shape}")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    if x.shape[2] + 2 * ph < kh or x.shape[3] + 2 * pw < kw:
        raise ValueError(f"conv2d shape mismatch: x {x.shape}, kernel {kernel.shape}")
    return ph, pw


class NumpyConvKernels:
    """Reference kernels: channels-last, one matmul per kernel tap."""

    name = "numpy"

    def forward(self, x, k, ph, pw):
        n, c, h, w = x.shape
        f, _, kh, kw = k.shape
        xh = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        ho, wo = xh.shape[1] - kh + 1, xh.shape[2] - kw + 1
        taps = np.ascontiguousarray(k.transpose(2, 3, 1, 0))  # [kh, kw, C, F]
        out = np.zeros((n, ho, wo, f), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                out += xh[:, i:i + ho, j:j + wo, :] @ taps[i, j]
        return out.transpose(0, 3, 1, 2), (xh, taps)

    def grad_kernel(self, saved, g, kshape):
        xh, _ = saved
        f, c, kh, kw = kshape
        n, _, ho, wo = g.shape
        g_rows = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, f)
        dtaps = np.empty((kh, kw, c, f), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dtaps[i, j] = xh[:, i:i + ho, j:j + wo, :].reshape(-1, c).T @ g_rows
        return dtaps.transpose(3, 2, 0, 1)

    def grad_input(self, saved, g, xshape, ph, pw):
        xh, taps = saved
        kh, kw = taps.shape[:2]
        n, _, ho, wo = g.shape
        h, w = xshape[2:]
        gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        dxh = np.zeros(xh.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxh[:, i:i + ho, j:j + wo, :] += gh @ np.ascontiguousarray(taps[i, j].T)
        return dxh[:, ph:ph + h, pw:pw + w, :].transpose(0, 3, 1, 2)


class TorchConvKernels:
    """Same contract as :class:`NumpyConvKernels`, computed by torch's CPU kernels."""

    name = "torch"

    def __init__(self):
        import torch
        import torch.nn.functional as F

        self.torch, self.F = torch, F

    def forward(self, x, k, ph, pw):
        tx, tk = self.torch.from_numpy(x), self.torch.from_numpy(np.ascontiguousarray(k))
        return self.F.conv2d(tx, tk, padding=(ph, pw)).numpy(), (tx, tk, (ph, pw))

    def grad_kernel(self, saved, g, kshape):
        tx, _, pad = saved
        tg = self.torch.from_numpy(np.ascontiguousarray(g))
        return self.torch.nn.grad.conv2d_weight(tx, kshape, tg, padding=pad).numpy()

    def grad_input(self, saved, g, xshape, ph, pw):
        _, tk, pad = saved
        tg = self.torch.from_numpy(np.ascontiguousarray(g))
        return self.torch.nn.grad.conv2d_input(xshape, tk, tg, padding=pad).numpy()


def _default_kernels():
    if os.environ.get("UREBENCH_CONV", "").lower() == "numpy":
        return NumpyConvKernels()
    try:
        kernels = TorchConvKernels()
    except ImportError:
        return NumpyConvKernels()
    kernels.torch.set_num_threads(1)
    return kernels


conv_kernels = _default_kernels()


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """2-D cross-correlation, stride 1, over ``[N,C,H,W]`` inputs."""
    ph, pw = _conv_geometry(x, kernel, bias, padding)
    kern = conv_kernels
    out, saved = kern.forward(x.data, kernel.data, ph, pw)
    out = out + bias.data[None, :, None, None]

    def _bw(g):
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if kernel.requires_grad:
            _accumulate(kernel, kern.grad_kernel(saved, g, kernel.shape))
        if x.requires_grad:
            _accumulate(x, kern.grad_input(saved, g, x.shape, ph, pw))

    return _make(np.ascontiguousarray(out), (x, kernel, bias), _bw, "conv2d")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or labels.shape[0] != logits.shape[0]:
        raise ValueError(f"logits {logits.shape} do not match labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    n = labels.shape[0]
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(n), labels]
    probs = np.exp(z - logsum[:, None])

    def _bw(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        _accumulate(logits, (g * d / n).astype(DTYPE))

    return _make(np.asarray(nll.mean(), dtype=DTYPE), (logits,), _bw, "softmax_cross_entropy")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tracked tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; interior gradients are reset so
    each call reports the gradient of this loss only.  Every node is visited
    once, in reverse topological order.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    _accumulate(loss, np.ones(loss.shape, dtype=DTYPE))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# parameters and Adam
# ---------------------------------------------------------------------------

class Parameter:
    """Trainable tensor plus Adam moment accumulators."""

    def __init__(self, data, name: str = ""):
        self.tensor = Tensor(data, requires_grad=True)
        self.adam_m = np.zeros_like(self.tensor.data)
        self.adam_v = np.zeros_like(self.tensor.data)
        self.step_count = 0
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; clears gradients afterwards."""
    params = list(params)
    for p in params:
        if p.tensor.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient")
    for p in params:
        g = p.tensor.grad.astype(np.float64)
        p.step_count += 1
        t = p.step_count
        m = beta1 * p.adam_m.astype(np.float64) + (1 - beta1) * g
        v = beta2 * p.adam_v.astype(np.float64) + (1 - beta2) * g * g
        p.adam_m = m.astype(DTYPE)
        p.adam_v = v.astype(DTYPE)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        p.tensor.data = (p.tensor.data - update).astype(DTYPE)
        p.tensor.grad = None


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: dict, config_digest: str) -> None:
    """Write ``{name: array}`` as a CKPT file.

    Layout: magic, 32-byte config digest, u32 parameter count, then per
    parameter: u16 name length, utf-8 name, u8 ndim, u32 dims, float32 payload.
    All integers little-endian.
    """
    digest = bytes.fromhex(config_digest)
    if len(digest) != 32:
        raise CheckpointError("config digest must be 32 bytes of hex")
    chunks = [CKPT_MAGIC, digest, struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[str, dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    digest = blob[4:36].hex()
    (count,) = struct.unpack_from("<I", blob, 36)
    pos = 40
    params = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            params[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(DTYPE)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return digest, params


def digest_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()
