"""
A minimal dense tensor with reverse-mode autodiff, and the primitive operations used by the network layers

Each operation returns a new `Tensor` whose `_backward` closure routes the incoming gradient to its parents. The
    graph is recorded only when at least one input requires a gradient, so inference passes carry no closures.
"""
import typing as ty

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import exceptions
from .const import GN_EPS


DEFAULT_DTYPE = np.float32


class Tensor:
    """Dense n-dimensional float array with an optional gradient slot"""
    __slots__ = ('data', 'grad', 'requires_grad', 'name', '_parents', '_backward')

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = None):
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif not np.issubdtype(array.dtype, np.floating):
            array = array.astype(DEFAULT_DTYPE)
        self.data = array  # type: np.ndarray
        self.grad = None  # type: ty.Optional[np.ndarray]
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()  # type: tuple
        self._backward = None  # type: ty.Optional[ty.Callable[[np.ndarray], None]]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def accumulate(self, grad: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self, grad: np.ndarray = None):
        """Propagate gradients from this node to every leaf that requires them"""
        if grad is None:
            if self.data.size != 1:
                raise exceptions.ShapeException('A seed gradient is required for non-scalar outputs', layer=self.name)
            grad = np.ones_like(self.data)

        # Iterative topological sort; graphs are shallow but recursion would still be fragile on long chains
        order = []  # type: ty.List[Tensor]
        seen = set()
        stack = [(self, False)]
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

        self.accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return 'Tensor(shape={}, dtype={}{})'.format(self.shape, self.dtype,
                                                     ', requires_grad=True' if self.requires_grad else '')


def _result(data: np.ndarray, parents: ty.Sequence[ty.Optional[Tensor]], backward) -> Tensor:
    parents = tuple(p for p in parents if p is not None)
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _wants(t: ty.Optional[Tensor]) -> bool:
    return t is not None and t.requires_grad


def linear(x: Tensor, weight: Tensor, bias: Tensor = None) -> Tensor:
    """Fully connected layer; weight has shape (out_features, in_features)"""
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        if _wants(weight):
            weight.accumulate(g.T @ x.data)
        if _wants(bias):
            bias.accumulate(g.sum(axis=0))
        if _wants(x):
            x.accumulate(g @ weight.data)
    return _result(out, (x, weight, bias), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation over NCHW input with an (out, in, kh, kw) kernel"""
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise exceptions.ShapeException('Convolution expects {} input channels but received {}'.format(ci, c))

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]

    # (n, ho, wo, o) -> (n, o, ho, wo)
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        if _wants(weight):
            weight.accumulate(np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])))
        if _wants(bias):
            bias.accumulate(g.sum(axis=(0, 2, 3)))
        if _wants(x):
            cols = np.tensordot(g, weight.data, axes=([1], [0]))  # (n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            x.accumulate(gxp)
    return _result(out, (x, weight, bias), backward)


def group_norm(x: Tensor, scale_aux: Tensor, bias: Tensor, groups: int, eps: float = GN_EPS) -> Tensor:
    """
    Group normalization with the re-parameterized scale alpha = 1 + scale_aux.

    Groups with zero variance normalize to zero, so the output there is the bias.
    """
    n, c = x.shape[:2]
    if c % groups:
        raise exceptions.ShapeException('{} channels cannot be split into {} groups'.format(c, groups))

    grouped = x.data.reshape(n, groups, -1)
    mean = grouped.mean(axis=2, keepdims=True)
    var = grouped.var(axis=2, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (grouped - mean) * rstd
    xhat_full = xhat.reshape(x.shape)

    bshape = (1, c) + (1,) * (x.data.ndim - 2)
    alpha = (1.0 + scale_aux.data).reshape(bshape)
    out = xhat_full * alpha + bias.data.reshape(bshape)

    def backward(g):
        axes = (0,) + tuple(range(2, x.data.ndim))
        if _wants(scale_aux):
            scale_aux.accumulate((g * xhat_full).sum(axis=axes))
        if _wants(bias):
            bias.accumulate(g.sum(axis=axes))
        if _wants(x):
            dxhat = (g * alpha).reshape(n, groups, -1)
            gx = rstd * (dxhat
                         - dxhat.mean(axis=2, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=2, keepdims=True))
            x.accumulate(gx.reshape(x.shape))
    return _result(out.astype(x.dtype, copy=False), (x, scale_aux, bias), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        x.accumulate(g * mask)
    return _result(out, (x,), backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride equals size); trailing rows/columns that do not fill a window are dropped"""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if not ho or not wo:
        raise exceptions.ShapeException('Input of {}x{} is too small to pool with size {}'.format(h, w, size))
    cropped = x.data[:, :, :ho * size, :wo * size]
    flat = cropped.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    idx = flat.argmax(axis=-1)[..., None]
    out = np.take_along_axis(flat, idx, axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros_like(flat)
        np.put_along_axis(routed, idx, g[..., None], axis=-1)
        routed = routed.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size,
                                                                                              wo * size)
        gx = np.zeros_like(x.data)
        gx[:, :, :ho * size, :wo * size] = routed
        x.accumulate(gx)
    return _result(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over all spatial positions: (n, c, h, w) -> (n, c)"""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        x.accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.shape))
    return _result(out, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def backward(g):
        x.accumulate(g.reshape(shape))
    return _result(out, (x,), backward)


def straight_through(x: Tensor, func: ty.Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Apply `func` in the forward pass and treat it as the identity in the backward pass"""
    out = np.asarray(func(x.data), dtype=x.dtype)

    def backward(g):
        x.accumulate(g)
    return _result(out, (x,), backward)


def smoothed_targets(labels: np.ndarray, num_classes: int, smoothing: float = 0.0, dtype=np.float64) -> np.ndarray:
    """One-hot targets; with smoothing s the true class gets 1 - s and the others share s equally"""
    labels = np.asarray(labels)
    if smoothing:
        targets = np.full((labels.shape[0], num_classes), smoothing / (num_classes - 1), dtype=dtype)
        targets[np.arange(labels.shape[0]), labels] = 1.0 - smoothing
    else:
        targets = np.zeros((labels.shape[0], num_classes), dtype=dtype)
        targets[np.arange(labels.shape[0]), labels] = 1.0
    return targets


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy over the batch, with optional label smoothing"""
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise exceptions.ShapeException('Expected {} labels, received shape {}'.format(n, labels.shape), layer='loss')
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise exceptions.RangeException('Labels must lie in [0, {}]'.format(k - 1))

    targets = smoothed_targets(labels, k, smoothing, dtype=logits.dtype)
    logp = log_softmax(logits.data)
    loss = -(targets * logp).sum() / n

    def backward(g):
        logits.accumulate(g * (np.exp(logp) - targets) / n)
    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
