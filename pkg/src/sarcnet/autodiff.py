"""Dense-tensor numeric core with reverse-mode automatic differentiation.

The operation set is intentionally minimal: exactly what a ResNet-style
image branch, a small MLP branch, and an MSE objective need. Each forward
call records a fresh tape (dynamic graph, no reuse); ``Tensor.backward``
walks it once in reverse topological order. Gradients accumulate into
``.grad``, so calling ``backward`` twice without ``zero_grad`` sums the
two passes.

Tensors are value-semantic numpy wrappers and safe to hand between
threads; a single tape, however, belongs to the thread that recorded it.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateInputError, DimensionError

DEFAULT_DTYPE = np.float32


class Tensor:
    """N-dimensional float array with optional gradient tracking.

    ``grad`` is allocated (zero-filled) as soon as ``requires_grad`` is
    set, so parameters that never appear on a tape report a zero
    gradient rather than a missing one.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def backward(self):
        """Reverse-accumulate gradients from this scalar into the tape.

        Interior (op-produced) nodes carry only the current walk's flow;
        leaves accumulate across walks, so a repeated backward without a
        reset doubles leaf gradients.
        """
        if self.size != 1:
            raise DimensionError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise DimensionError("backward on a tensor without requires_grad")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        for node in topo:
            if node._backward_fn is not None:
                node.grad[...] = 0.0
        self.grad += np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _result(data, parents, backward_fn) -> Tensor:
    """Wrap an op result, recording the tape edge only when needed."""
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Free-function alias for ``loss.backward()``."""
    loss.backward()


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def _bw(g):
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad += g

    return _result(out_data, (a, b), _bw)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0.0).astype(x.dtype, copy=False)

    def _bw(g):
        if x.requires_grad:
            x.grad += g * mask

    return _result(out_data, (x,), _bw)


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def _bw(g):
        if x.requires_grad:
            x.grad += g.reshape(x.shape)

    return _result(out_data, (x,), _bw)


def concat(tensors, axis: int = 1) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        pieces = np.split(g, offsets, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t.grad += piece

    return _result(out_data, tuple(tensors), _bw)


def tensor_sum(x: Tensor) -> Tensor:
    out_data = x.data.sum()

    def _bw(g):
        if x.requires_grad:
            x.grad += g * np.ones_like(x.data)

    return _result(out_data, (x,), _bw)


def tensor_mean(x: Tensor) -> Tensor:
    n = x.size
    out_data = x.data.mean()

    def _bw(g):
        if x.requires_grad:
            x.grad += (g / n) * np.ones_like(x.data)

    return _result(out_data, (x,), _bw)


# ---------------------------------------------------------------------------
# linear algebra ops


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x:[B,F], weight:[O,F]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear shape mismatch: input {x.shape} vs weight {weight.shape}"
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"linear bias shape {bias.shape} mismatches weight {weight.shape}"
        )
    out_data = x.data @ weight.data.T + bias.data

    def _bw(g):
        if x.requires_grad:
            x.grad += g @ weight.data
        if weight.requires_grad:
            weight.grad += g.T @ x.data
        if bias.requires_grad:
            bias.grad += g.sum(axis=0)

    return _result(out_data, (x, weight, bias), _bw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation of x:[B,C,H,W] with weight:[K,C,kh,kw].

    Implemented as im2col + matmul; the column matrix is kept for the
    backward pass (dW as a matmul, dX via scatter-add over kernel taps).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-d input/weight, got {x.shape} and {weight.shape}"
        )
    B, C, H, W = x.shape
    K, Cw, kh, kw = weight.shape
    if C != Cw:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}"
        )
    if bias.shape != (K,):
        raise DimensionError(f"conv2d bias shape {bias.shape}, expected ({K},)")
    if stride < 1:
        raise DimensionError(f"conv2d stride must be >= 1, got {stride}")
    ho = (H + 2 * padding - kh) // stride + 1
    wo = (W + 2 * padding - kw) // stride + 1
    if kh > H + 2 * padding or kw > W + 2 * padding or ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d kernel {weight.shape} does not fit input {x.shape} "
            f"with padding {padding}"
        )

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(B * ho * wo, C * kh * kw)
    wmat = weight.data.reshape(K, C * kh * kw)
    out = cols @ wmat.T + bias.data
    out_data = out.reshape(B, ho, wo, K).transpose(0, 3, 1, 2)

    def _bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * ho * wo, K)
        if weight.requires_grad:
            weight.grad += (gmat.T @ cols).reshape(weight.shape)
        if bias.requires_grad:
            bias.grad += gmat.sum(axis=0)
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(B, ho, wo, C, kh, kw)
            gcols = gcols.transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride,
                        j:j + stride * wo:stride] += gcols[:, :, :, :, i, j]
            if padding:
                x.grad += gxp[:, :, padding:padding + H, padding:padding + W]
            else:
                x.grad += gxp

    return _result(out_data, (x, weight, bias), _bw)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                mode: str = "train", momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over [B,C,H,W].

    Train mode normalizes with the batch statistics (biased variance) and
    updates ``running_mean``/``running_var`` in place by exponential
    moving average. Eval mode uses the running statistics and is a plain
    affine map, hence deterministic and batch-composable.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(
            f"batchnorm2d gamma/beta shapes {gamma.shape}/{beta.shape}, "
            f"expected ({C},)"
        )
    if mode not in ("train", "eval"):
        raise DimensionError(f"batchnorm2d mode must be train|eval, got {mode!r}")

    if mode == "train":
        n = B * H * W
        if n < 2:
            raise DegenerateInputError(
                f"batchnorm2d train mode needs B*H*W >= 2, got {n}"
            )
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
        out_data = gamma.data[None, :, None, None] * xhat \
            + beta.data[None, :, None, None]

        def _bw(g):
            if beta.requires_grad:
                beta.grad += g.sum(axis=(0, 2, 3))
            if gamma.requires_grad:
                gamma.grad += (g * xhat).sum(axis=(0, 2, 3))
            if x.requires_grad:
                gsum = g.sum(axis=(0, 2, 3))
                gx_sum = (g * xhat).sum(axis=(0, 2, 3))
                coeff = (gamma.data * inv / n)[None, :, None, None]
                x.grad += coeff * (n * g - gsum[None, :, None, None]
                                   - xhat * gx_sum[None, :, None, None])

        return _result(out_data, (x, gamma, beta), _bw)

    inv = 1.0 / np.sqrt(running_var + eps)
    scale = gamma.data * inv
    xhat = (x.data - running_mean[None, :, None, None]) * inv[None, :, None, None]
    out_data = scale[None, :, None, None] * x.data \
        + (beta.data - scale * running_mean)[None, :, None, None]

    def _bw_eval(g):
        if beta.requires_grad:
            beta.grad += g.sum(axis=(0, 2, 3))
        if gamma.requires_grad:
            gamma.grad += (g * xhat).sum(axis=(0, 2, 3))
        if x.requires_grad:
            x.grad += g * scale[None, :, None, None]

    return _result(out_data, (x, gamma, beta), _bw_eval)


# ---------------------------------------------------------------------------
# pooling


def max_pool2d(x: Tensor, window: int, stride: int, padding: int = 0) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if window > H + 2 * padding or window > W + 2 * padding:
        raise DimensionError(
            f"pool window {window} exceeds input {x.shape} with padding {padding}"
        )
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    ho = (H + 2 * padding - window) // stride + 1
    wo = (W + 2 * padding - window) // stride + 1
    win = sliding_window_view(xp, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(B, C, ho, wo, window * window)
    idx = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out_data = np.ascontiguousarray(out_data)

    def _bw(g):
        if x.requires_grad:
            gxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=x.dtype)
            rows = (np.arange(ho) * stride)[None, None, :, None] + idx // window
            cols = (np.arange(wo) * stride)[None, None, None, :] + idx % window
            bi = np.arange(B)[:, None, None, None]
            ci = np.arange(C)[None, :, None, None]
            np.add.at(gxp, (bi, ci, rows, cols), g)
            if padding:
                x.grad += gxp[:, :, padding:padding + H, padding:padding + W]
            else:
                x.grad += gxp

    return _result(out_data, (x,), _bw)


def global_avg_pool2d(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool2d expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    out_data = x.data.mean(axis=(2, 3), keepdims=True)

    def _bw(g):
        if x.requires_grad:
            x.grad += g / (H * W)

    return _result(out_data, (x,), _bw)


def pool2d(x: Tensor, kind: str, window: int | None = None,
           stride: int | None = None, padding: int = 0) -> Tensor:
    """Pooling dispatcher: kind is ``max`` (windowed) or ``global_avg``."""
    if kind == "max":
        if window is None or stride is None:
            raise DimensionError("max pooling requires window and stride")
        return max_pool2d(x, window, stride, padding)
    if kind == "global_avg":
        return global_avg_pool2d(x)
    raise DimensionError(f"unknown pooling kind {kind!r}")


# ---------------------------------------------------------------------------
# loss


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements; gradient w.r.t. pred is
    2(pred-target)/N."""
    if pred.shape != target.shape:
        raise DimensionError(
            f"mse_loss shape mismatch: {pred.shape} vs {target.shape}"
        )
    n = pred.size
    if n == 0:
        raise DegenerateInputError("mse_loss on an empty batch")
    diff = pred.data - target.data
    out_data = np.asarray((diff * diff).mean(), dtype=pred.dtype)

    def _bw(g):
        scaled = (2.0 / n) * diff * g
        if pred.requires_grad:
            pred.grad += scaled
        if target.requires_grad:
            target.grad -= scaled

    return _result(out_data, (pred, target), _bw)
