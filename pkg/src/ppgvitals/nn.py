"""Minimal 1-D network layers with hand-written backward passes.

Activations are float64 arrays shaped ``(batch, channels, length)``. Each
layer caches what its backward pass needs during ``forward`` (the tape) and
writes parameter gradients into ``self.grads`` during ``backward``.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, StateError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self._cache = None

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def _tape(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called before forward")
        return self._cache

    def clear_tape(self):
        self._cache = None

    def param_arrays(self):
        """(name, array) pairs in serialisation order."""
        return list(self.params.items())

    def grad_arrays(self):
        return [self.grads[name] for name, _ in self.param_arrays()]

    def buffer_arrays(self):
        return list(self.buffers.items())

    def shape_params(self):
        """Integers describing the layer's shape, stored in model files."""
        return ()

    def output_shape(self, shape):
        return shape

    def kink_state(self):
        return b""


class Conv1d(Layer):
    kind = "conv1d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding="same"):
        super().__init__()
        if padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {padding!r}")
        if padding == "same" and kernel_size % 2 == 0:
            raise ValueError("'same' padding needs an odd kernel")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.params["weight"] = np.zeros((out_channels, in_channels, kernel_size))
        self.params["bias"] = np.zeros(out_channels)

    @property
    def pad(self):
        return (self.kernel_size - 1) // 2 if self.padding == "same" else 0

    def shape_params(self):
        return (self.in_channels, self.out_channels, self.kernel_size, self.stride,
                1 if self.padding == "same" else 0)

    def output_shape(self, shape):
        c, length = shape
        if c != self.in_channels:
            raise ShapeError(f"conv1d expects {self.in_channels} channels, got {c}")
        lout = (length + 2 * self.pad - self.kernel_size) // self.stride + 1
        if lout < 1:
            raise ShapeError(f"conv1d input length {length} too short for kernel {self.kernel_size}")
        return (self.out_channels, lout)

    def forward(self, x, train=False):
        b, c, length = x.shape
        _, lout = self.output_shape((c, length))
        p, k = self.pad, self.kernel_size
        xp = np.pad(x, ((0, 0), (0, 0), (p, p))) if p else x
        win = sliding_window_view(xp, k, axis=2)[:, :, : (lout - 1) * self.stride + 1 : self.stride, :]
        cols = win.transpose(0, 2, 1, 3).reshape(b * lout, c * k)
        wmat = self.params["weight"].reshape(self.out_channels, c * k)
        out = cols @ wmat.T + self.params["bias"]
        self._cache = (cols, x.shape, lout)
        return out.reshape(b, lout, self.out_channels).transpose(0, 2, 1)

    def backward(self, dy):
        cols, (b, c, length), lout = self._tape()
        k, s, p = self.kernel_size, self.stride, self.pad
        dy2 = dy.transpose(0, 2, 1).reshape(b * lout, self.out_channels)
        wmat = self.params["weight"].reshape(self.out_channels, c * k)
        self.grads["weight"] = (dy2.T @ cols).reshape(self.params["weight"].shape)
        self.grads["bias"] = dy.sum(axis=(0, 2))
        if s == 1:
            # input grad = full correlation of dy with the flipped, transposed kernel
            q = k - 1 - p
            dyp = np.pad(dy, ((0, 0), (0, 0), (q, q))) if q else dy
            win = sliding_window_view(dyp, k, axis=2)[:, :, :length, :]
            dcols = win.transpose(0, 2, 1, 3).reshape(b * length, self.out_channels * k)
            wflip = self.params["weight"][:, :, ::-1].transpose(1, 0, 2).reshape(c, self.out_channels * k)
            return (dcols @ wflip.T).reshape(b, length, c).transpose(0, 2, 1)
        dcols = (dy2 @ wmat).reshape(b, lout, c, k)
        dxp = np.zeros((b, c, length + 2 * p))
        span = (lout - 1) * s + 1
        for tau in range(k):
            dxp[:, :, tau : tau + span : s] += dcols[:, :, :, tau].transpose(0, 2, 1)
        return dxp[:, :, p : p + length]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, dy):
        return np.where(self._tape(), dy, 0.0)

    def kink_state(self):
        return b"" if self._cache is None else np.packbits(self._cache).tobytes()


class MaxPool1d(Layer):
    """Max over windows; the earliest index wins ties, trailing samples are dropped."""

    kind = "maxpool"

    def __init__(self, width=2, stride=2):
        super().__init__()
        self.width = width
        self.stride = stride

    def shape_params(self):
        return (self.width, self.stride)

    def output_shape(self, shape):
        c, length = shape
        lout = (length - self.width) // self.stride + 1
        if lout < 1:
            raise ShapeError(f"maxpool input length {length} shorter than width {self.width}")
        return (c, lout)

    def forward(self, x, train=False):
        _, lout = self.output_shape(x.shape[1:])
        win = sliding_window_view(x, self.width, axis=2)[:, :, : (lout - 1) * self.stride + 1 : self.stride, :]
        arg = win.argmax(axis=-1)
        self._cache = (arg, x.shape)
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        arg, shape = self._tape()
        dx = np.zeros(shape)
        span = (arg.shape[-1] - 1) * self.stride + 1
        for j in range(self.width):
            dx[:, :, j : j + span : self.stride] += np.where(arg == j, dy, 0.0)
        return dx

    def kink_state(self):
        return b"" if self._cache is None else self._cache[0].astype(np.int8).tobytes()


class BatchNorm1d(Layer):
    """Per-channel normalisation over batch and time."""

    kind = "batchnorm"

    def __init__(self, channels, eps=BN_EPS, momentum=BN_MOMENTUM):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def shape_params(self):
        return (self.channels,)

    def output_shape(self, shape):
        if shape[0] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got {shape[0]}")
        return shape

    def forward(self, x, train=False):
        if x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got {x.shape[1]}")
        axes = (0, 2)
        if train:
            mu = x.mean(axis=axes)
            centered = x - mu[None, :, None]
            var = (centered * centered).mean(axis=axes)
            m = self.momentum
            self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mu
            self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        else:
            mu = self.buffers["running_mean"]
            var = self.buffers["running_var"]
            centered = x - mu[None, :, None]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = centered * inv_std[None, :, None]
        self._cache = (xhat, inv_std, train)
        return self.params["gamma"][None, :, None] * xhat + self.params["beta"][None, :, None]

    def backward(self, dy):
        xhat, inv_std, train = self._tape()
        axes = (0, 2)
        self.grads["gamma"] = (dy * xhat).sum(axis=axes)
        self.grads["beta"] = dy.sum(axis=axes)
        dxhat = dy * self.params["gamma"][None, :, None]
        if not train:
            return dxhat * inv_std[None, :, None]
        m = dy.shape[0] * dy.shape[2]
        s1 = dxhat.sum(axis=axes)[None, :, None]
        s2 = (dxhat * xhat).sum(axis=axes)[None, :, None]
        return inv_std[None, :, None] / m * (m * dxhat - s1 - xhat * s2)


class Dense(Layer):
    """Fully connected layer; any trailing input dims are flattened channel-major."""

    kind = "dense"

    def __init__(self, in_features, out_features):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.params["weight"] = np.zeros((out_features, in_features))
        self.params["bias"] = np.zeros(out_features)

    def shape_params(self):
        return (self.in_features, self.out_features)

    def output_shape(self, shape):
        n = int(np.prod(shape))
        if n != self.in_features:
            raise ShapeError(f"dense expects {self.in_features} inputs, got {n}")
        return (self.out_features,)

    def forward(self, x, train=False):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise ShapeError(f"dense expects {self.in_features} inputs, got {flat.shape[1]}")
        self._cache = (flat, x.shape)
        return flat @ self.params["weight"].T + self.params["bias"]

    def backward(self, dy):
        flat, shape = self._tape()
        self.grads["weight"] = dy.T @ flat
        self.grads["bias"] = dy.sum(axis=0)
        return (dy @ self.params["weight"]).reshape(shape)


class GlobalAvgPool(Layer):
    kind = "gap"

    def output_shape(self, shape):
        return (shape[0],)

    def forward(self, x, train=False):
        self._cache = x.shape
        return x.mean(axis=2)

    def backward(self, dy):
        shape = self._tape()
        return np.broadcast_to(dy[:, :, None] / shape[2], shape).copy()


class ResidualBlock(Layer):
    """conv -> relu -> conv, identity skip added, relu after the sum."""

    kind = "residual"

    def __init__(self, channels, kernel_size=3):
        super().__init__()
        self.channels = channels
        self.kernel_size = kernel_size
        self.conv1 = Conv1d(channels, channels, kernel_size)
        self.relu1 = ReLU()
        self.conv2 = Conv1d(channels, channels, kernel_size)
        self.relu2 = ReLU()

    @property
    def children(self):
        return (self.conv1, self.relu1, self.conv2, self.relu2)

    def shape_params(self):
        return (self.channels, self.kernel_size)

    def output_shape(self, shape):
        return self.conv2.output_shape(self.conv1.output_shape(shape))

    def param_arrays(self):
        return [(f"conv1.{n}", a) for n, a in self.conv1.param_arrays()] + [
            (f"conv2.{n}", a) for n, a in self.conv2.param_arrays()
        ]

    def grad_arrays(self):
        return self.conv1.grad_arrays() + self.conv2.grad_arrays()

    def forward(self, x, train=False):
        h = self.relu1.forward(self.conv1.forward(x, train), train)
        self._cache = True
        return self.relu2.forward(self.conv2.forward(h, train) + x, train)

    def backward(self, dy):
        self._tape()
        dz = self.relu2.backward(dy)
        dh = self.conv1.backward(self.relu1.backward(self.conv2.backward(dz)))
        return dh + dz

    def clear_tape(self):
        self._cache = None
        for child in self.children:
            child.clear_tape()

    def kink_state(self):
        return self.relu1.kink_state() + self.relu2.kink_state()


LAYER_KINDS = {
    cls.kind: cls for cls in (Conv1d, ReLU, MaxPool1d, BatchNorm1d, Dense, GlobalAvgPool, ResidualBlock)
}


def layer_from_shape(kind, shape):
    """Rebuild an empty layer from its kind and :meth:`Layer.shape_params`."""
    if kind == "conv1d":
        cin, cout, k, stride, same = shape
        return Conv1d(cin, cout, k, stride, "same" if same else "valid")
    if kind == "residual":
        return ResidualBlock(*shape)
    if kind == "batchnorm":
        return BatchNorm1d(*shape)
    return LAYER_KINDS[kind](*shape)


def forward_stack(layers, x, train=False):
    for layer in layers:
        x = layer.forward(x, train)
    return x


def backward_stack(layers, dy):
    for layer in reversed(layers):
        dy = layer.backward(dy)
    return dy


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int = 0
    worst: tuple = field(default=())

    def passed(self, tol):
        return self.checked > 0 and self.max_rel_error <= tol


def relative_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(loss_fn, arrays, analytic, h=1e-5, kink_state=None, max_per_array=None, seed=0):
    """Compare analytic gradients with central differences.

    ``loss_fn()`` evaluates the scalar loss from the current contents of
    ``arrays`` (which are perturbed in place and restored). ``analytic``
    holds the matching gradient arrays. If ``kink_state`` is given, it is
    called after each evaluation; elements whose perturbation changes it
    (a ReLU or max-pool decision flipped) are skipped. ``max_per_array``
    caps how many elements of each array are probed, chosen by a seeded
    permutation.
    """
    rng = np.random.default_rng(seed)
    worst_err, worst, checked, skipped = 0.0, (), 0, 0
    base_state = None
    if kink_state is not None:
        loss_fn()
        base_state = kink_state()
    for ai, (arr, grad) in enumerate(zip(arrays, analytic)):
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        idx = np.arange(flat.size)
        if max_per_array is not None and flat.size > max_per_array:
            idx = np.sort(rng.permutation(flat.size)[:max_per_array])
        for i in idx:
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            up = loss_fn()
            kink_up = kink_state() if kink_state else None
            flat[i] = orig - step
            down = loss_fn()
            kink_down = kink_state() if kink_state else None
            flat[i] = orig
            if kink_state is not None and not (kink_up == base_state == kink_down):
                skipped += 1
                continue
            numeric = (up - down) / (2 * step)
            err = relative_error(float(gflat[i]), numeric)
            checked += 1
            if err > worst_err or not worst:
                worst_err = max(worst_err, err)
                worst = (ai, int(i), float(gflat[i]), numeric)
    return GradCheckReport(worst_err, checked, skipped, worst)
