"""The four estimator architectures, prediction, parameter counting and the MTVL file format.

Every model standardises each input channel itself, so callers pass raw
windows. The ``dct`` architecture additionally moves to the DCT domain and
keeps only the heart-rate band before its convolutions.
"""

import math
import struct
from pathlib import Path

import numpy as np

from . import nn
from .errors import FormatError, InvalidInputError, ShapeError
from .rng import SplitMix64
from .signals import dct_band, make_band_mask, standardize_channels

ARCHITECTURES = ("base", "fcn", "residual_fcn", "dct")
TASKS = ("hr", "spo2")
TASK_CHANNELS = {"hr": 1, "spo2": 3}

MODEL_FS = 30.0
DCT_BAND_HZ = (0.7, 4.0)

MAGIC = b"MTVL"
VERSION = 1
_KIND_CODES = {"conv1d": 1, "relu": 2, "maxpool": 3, "batchnorm": 4, "dense": 5, "gap": 6, "residual": 7}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


class Model:
    def __init__(self, arch, task, input_len, layers, band=None):
        self.arch = arch
        self.task = task
        self.input_len = input_len
        self.layers = layers
        self.band = band

    @property
    def in_channels(self):
        return TASK_CHANNELS[self.task]

    @property
    def conv_input_len(self):
        return self.band.size if self.band is not None else self.input_len

    def preprocess(self, x):
        x = standardize_channels(x)
        if self.band is not None:
            x = dct_band(x, self.band)
        return x

    def forward(self, x, train=False):
        """Batch forward on raw windows ``(batch, channels, input_len)`` -> ``(batch,)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1:] != (self.in_channels, self.input_len):
            raise ShapeError(
                f"expected windows of shape (B, {self.in_channels}, {self.input_len}), got {x.shape}"
            )
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("window contains non-finite values")
        return nn.forward_stack(self.layers, self.preprocess(x), train)[:, 0]

    def backward(self, dpred):
        """Back-propagate d(loss)/d(prediction) of the last forward; fills layer grads."""
        return nn.backward_stack(self.layers, np.asarray(dpred, dtype=np.float64)[:, None])

    def predict(self, window):
        window = np.asarray(window, dtype=np.float64)
        if window.ndim == 1:
            window = window[None, :]
        return float(self.forward(window[None])[0])

    def predict_batch(self, windows, batch_size=256):
        windows = np.asarray(windows, dtype=np.float64)
        out = [self.forward(windows[i : i + batch_size]) for i in range(0, len(windows), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)

    def parameters(self):
        return [a for layer in self.layers for _, a in layer.param_arrays()]

    def gradients(self):
        return [g for layer in self.layers for g in layer.grad_arrays()]

    def buffers(self):
        return [a for layer in self.layers for _, a in layer.buffer_arrays()]

    def flat_parameters(self):
        return np.concatenate([p.reshape(-1) for p in self.parameters()])

    def kink_state(self):
        return b"".join(layer.kink_state() for layer in self.layers)

    def clear_tape(self):
        for layer in self.layers:
            layer.clear_tape()


def _architecture(arch, cin, conv_len):
    if arch == "base":
        flat_len = conv_len // 2 // 2 // 2
        return [
            nn.Conv1d(cin, 16, 7), nn.BatchNorm1d(16), nn.ReLU(), nn.MaxPool1d(),
            nn.Conv1d(16, 32, 5), nn.BatchNorm1d(32), nn.ReLU(), nn.MaxPool1d(),
            nn.Conv1d(32, 32, 3), nn.BatchNorm1d(32), nn.ReLU(), nn.MaxPool1d(),
            nn.Dense(32 * flat_len, 64), nn.ReLU(),
            nn.Dense(64, 1),
        ]
    if arch == "fcn":
        return [
            nn.Conv1d(cin, 16, 7), nn.ReLU(), nn.MaxPool1d(),
            nn.Conv1d(16, 32, 5), nn.ReLU(), nn.MaxPool1d(),
            nn.Conv1d(32, 32, 5), nn.ReLU(), nn.MaxPool1d(),
            nn.Conv1d(32, 64, 3), nn.ReLU(),
            nn.Conv1d(64, 1, 1),
            nn.GlobalAvgPool(),
        ]
    if arch == "residual_fcn":
        return [
            nn.Conv1d(cin, 32, 7), nn.ReLU(),
            nn.ResidualBlock(32, 3), nn.MaxPool1d(),
            nn.ResidualBlock(32, 3), nn.MaxPool1d(),
            nn.ResidualBlock(32, 3),
            nn.Conv1d(32, 1, 1),
            nn.GlobalAvgPool(),
        ]
    if arch == "dct":
        return [
            nn.Conv1d(cin, 16, 5), nn.ReLU(),
            nn.Conv1d(16, 32, 3), nn.ReLU(),
            nn.Conv1d(32, 1, 1),
            nn.GlobalAvgPool(),
        ]
    raise InvalidInputError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


def check_shape_chain(layers, shape):
    """Propagate ``(channels, length)`` through the layers; the result must be one scalar."""
    for layer in layers:
        shape = layer.output_shape(shape)
    if tuple(shape) != (1,):
        raise ShapeError(f"layer stack ends in shape {shape}, expected a single scalar")
    return shape


def _conv_layers(layers):
    for layer in layers:
        if isinstance(layer, nn.ResidualBlock):
            yield layer.conv1
            yield layer.conv2
        elif isinstance(layer, (nn.Conv1d, nn.Dense)):
            yield layer


def init_weights(layers, seed):
    """He-uniform weights, bound sqrt(6 / fan_in), drawn in layer order; biases stay zero."""
    rng = SplitMix64(seed)
    for layer in _conv_layers(layers):
        w = layer.params["weight"]
        fan_in = w.size // w.shape[0]
        bound = math.sqrt(6.0 / fan_in)
        u = np.array(rng.floats(w.size))
        w[...] = ((2.0 * u - 1.0) * bound).reshape(w.shape)


def build_model(arch, task, input_len=300, init_seed=0, _init=True):
    if task not in TASKS:
        raise InvalidInputError(f"unknown task {task!r}; expected one of {TASKS}")
    if arch not in ARCHITECTURES:
        raise InvalidInputError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    band = make_band_mask(input_len, MODEL_FS, *DCT_BAND_HZ) if arch == "dct" else None
    cin = TASK_CHANNELS[task]
    conv_len = band.size if band is not None else input_len
    layers = _architecture(arch, cin, conv_len)
    check_shape_chain(layers, (cin, conv_len))
    if _init:
        init_weights(layers, init_seed)
    return Model(arch, task, input_len, layers, band)


def param_count(model):
    """Trainable element count: weights, biases, batch-norm gamma/beta."""
    return sum(p.size for p in model.parameters())


def save_model(model, path):
    """Write the MTVL format.

    Layout (little-endian): magic ``MTVL``; u32 version; u32 arch index;
    u32 task index; u32 input length; u32 band k_lo, u32 band k_hi (both 0
    without a band); u32 layer count; per layer u32 kind code, u32 n, n x u32
    shape integers; u64 value count; that many float64 values holding each
    layer's parameters then its buffers, in layer order.
    """
    parts = [MAGIC, struct.pack("<4I", VERSION, ARCHITECTURES.index(model.arch),
                                TASKS.index(model.task), model.input_len)]
    k_lo, k_hi = (model.band.k_lo, model.band.k_hi) if model.band is not None else (0, 0)
    parts.append(struct.pack("<3I", k_lo, k_hi, len(model.layers)))
    values = []
    for layer in model.layers:
        shape = layer.shape_params()
        parts.append(struct.pack(f"<2I{len(shape)}I", _KIND_CODES[layer.kind], len(shape), *shape))
        values.extend(a.reshape(-1) for _, a in layer.param_arrays())
        values.extend(a.reshape(-1) for _, a in layer.buffer_arrays())
    flat = np.concatenate(values) if values else np.zeros(0)
    parts.append(struct.pack("<Q", flat.size))
    parts.append(flat.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_model(path):
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}", 4)
    at = r.pos
    arch_i, task_i, input_len = r.u32("arch"), r.u32("task"), r.u32("input length")
    if arch_i >= len(ARCHITECTURES) or task_i >= len(TASKS):
        raise FormatError(f"unknown architecture/task code {arch_i}/{task_i}", at)
    k_lo, k_hi = r.u32("band"), r.u32("band")
    at = r.pos
    try:
        model = build_model(ARCHITECTURES[arch_i], TASKS[task_i], input_len, _init=False)
    except (InvalidInputError, ShapeError) as exc:
        raise FormatError(f"header does not describe a valid model: {exc}", at) from None
    expect_band = (model.band.k_lo, model.band.k_hi) if model.band is not None else (0, 0)
    if (k_lo, k_hi) != expect_band:
        raise FormatError(f"band {k_lo}-{k_hi} does not match architecture band {expect_band}", at)
    at = r.pos
    n_layers = r.u32("layer count")
    if n_layers != len(model.layers):
        raise FormatError(f"layer count {n_layers}, architecture has {len(model.layers)}", at)
    for layer in model.layers:
        at = r.pos
        code = r.u32("layer kind")
        n = r.u32("layer shape size")
        if n > 16:
            raise FormatError(f"implausible layer shape length {n}", at)
        shape = struct.unpack(f"<{n}I", r.take(4 * n, "layer shape"))
        if _CODE_KINDS.get(code) != layer.kind or tuple(shape) != tuple(layer.shape_params()):
            raise FormatError(
                f"layer table entry {_CODE_KINDS.get(code, code)}{shape} does not match "
                f"expected {layer.kind}{layer.shape_params()}", at)
    at = r.pos
    count = struct.unpack("<Q", r.take(8, "value count"))[0]
    targets = [a for layer in model.layers for _, a in layer.param_arrays() + layer.buffer_arrays()]
    expected = sum(a.size for a in targets)
    if count != expected:
        raise FormatError(f"value count {count}, model needs {expected}", at)
    flat = np.frombuffer(r.take(8 * count, "parameter values"), dtype="<f8").astype(np.float64)
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes", r.pos)
    offset = 0
    for a in targets:
        a[...] = flat[offset : offset + a.size].reshape(a.shape)
        offset += a.size
    return model
