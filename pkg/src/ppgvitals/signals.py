"""PPG extraction, standardisation, windowing, resampling and the DCT band filter.

All arithmetic is float64. Signals are stored channel-major as a
``(channels, length)`` array.
"""

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, ParseError

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Signal:
    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2:
            raise InvalidInputError("samples must be (channels, length)")
        if self.sample_rate_hz <= 0:
            raise InvalidInputError("sample_rate_hz must be positive")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("signal contains non-finite values")
        object.__setattr__(self, "samples", x)

    @property
    def channels(self):
        return self.samples.shape[0]

    def __len__(self):
        return self.samples.shape[1]

    @property
    def duration_s(self):
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class Frame:
    """An 8-bit RGB image; ``pixels`` has shape (height, width, 3)."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.shape != (self.height, self.width, 3):
            raise InvalidInputError(
                f"pixel array shape {px.shape} does not match {self.height}x{self.width}x3"
            )
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class BandMask:
    low_hz: float
    high_hz: float
    k_lo: int
    k_hi: int
    keep_dc: bool = False

    @property
    def size(self):
        return self.k_hi - self.k_lo + 1


def mean_rgb(frame):
    """Per-plane mean intensity of a frame as ``(r, g, b)`` floats."""
    n = frame.width * frame.height
    if n == 0:
        raise InvalidInputError("empty frame")
    # integer sums are exact; a single division keeps the mean correctly rounded
    sums = frame.pixels.reshape(-1, 3).astype(np.int64).sum(axis=0)
    return tuple(int(s) / n for s in sums)


def read_ppm(path):
    """Parse a binary P6 PPM with maxval 255."""
    path = Path(path)
    data = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InvalidInputError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise InvalidInputError(f"{path}: not a binary P6 PPM")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise InvalidInputError(f"{path}: bad PPM header") from None
    if maxval != 255:
        raise InvalidInputError(f"{path}: maxval must be 255, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    body = data[pos : pos + need]
    if len(body) != need:
        raise InvalidInputError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    return Frame(width, height, pixels)


def write_ppm(path, frame):
    header = f"P6\n{frame.width} {frame.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(frame.pixels, dtype=np.uint8).tobytes())


def standardize(x):
    """Zero-mean, unit population-std copy of ``x``; all zeros if ``x`` is flat."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise InvalidInputError("standardize needs a 1-D sequence of length >= 2")
    mu = x.mean()
    centered = x - mu
    sd = math.sqrt(float(np.mean(centered * centered)))
    if sd < STD_FLOOR:
        return np.zeros_like(x)
    return centered / sd


def standardize_channels(x):
    """Row-wise :func:`standardize` on a ``(..., length)`` array."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    sd = np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True))
    flat = sd < STD_FLOOR
    out = centered / np.where(flat, 1.0, sd)
    return np.where(flat, 0.0, out)


def _as_sample_count(seconds, fs, what):
    n = seconds * fs
    k = round(n)
    if abs(n - k) > 1e-9 or k <= 0:
        raise InvalidInputError(f"{what} of {seconds}s at {fs} Hz is not a positive whole number of samples")
    return int(k)


def make_windows(s, window_s, hop_s):
    """Slice ``s`` into fixed-length windows.

    Returns a list of ``(start_time_s, block)`` where ``block`` is a
    ``(channels, N)`` array view. A signal shorter than one window yields
    an empty list.
    """
    fs = s.sample_rate_hz
    n = _as_sample_count(window_s, fs, "window")
    h = _as_sample_count(hop_s, fs, "hop")
    length = len(s)
    if length < n:
        return []
    count = (length - n) // h + 1
    return [(i * hop_s, s.samples[:, i * h : i * h + n]) for i in range(count)]


def window_count(length, n, h):
    return 0 if length < n else (length - n) // h + 1


def resample_linear(s, target_hz):
    """Linear interpolation onto a ``target_hz`` grid spanning the same time range."""
    if target_hz <= 0:
        raise InvalidInputError("target_hz must be positive")
    fs = s.sample_rate_hz
    length = len(s)
    if length == 0:
        return Signal(np.zeros((s.channels, 0)), target_hz)
    span = (length - 1) / fs
    new_len = int(math.floor(span * target_hz + 1e-9)) + 1
    t_new = np.arange(new_len) / target_hz
    t_old = np.arange(length) / fs
    out = np.stack([np.interp(t_new, t_old, ch) for ch in s.samples])
    return Signal(out, target_hz)


@lru_cache(maxsize=32)
def dct_matrix(n):
    """Orthonormal DCT-II basis, row k holds coefficient k's cosine weights."""
    if n < 1:
        raise InvalidInputError("DCT length must be >= 1")
    k = np.arange(n)[:, None]
    t = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * t + 1) * k / (2 * n))
    c[0] *= math.sqrt(1.0 / n)
    c[1:] *= math.sqrt(2.0 / n)
    c.setflags(write=False)
    return c


def dct2_forward(x):
    """Orthonormal DCT-II along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    return x @ dct_matrix(x.shape[-1]).T


def dct2_inverse(coeffs):
    """Orthonormal DCT-III, the exact inverse of :func:`dct2_forward`."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    return coeffs @ dct_matrix(coeffs.shape[-1])


def band_mask_indices(n, fs, low_hz, high_hz, keep_dc=False):
    """Inclusive DCT coefficient range whose frequencies lie inside the band.

    Coefficient ``k`` sits at ``k * fs / (2n)`` Hz. Bounds are computed in
    exact rational arithmetic on the given floats, so band edges that land
    on a coefficient are kept.
    """
    if not (0 <= low_hz < high_hz <= fs / 2):
        raise InvalidInputError(f"band {low_hz}-{high_hz} Hz outside [0, {fs / 2}] Hz")
    if n < 2:
        raise InvalidInputError("DCT length must be >= 2")
    scale = Fraction(2 * n) / Fraction(fs)
    k_lo = math.ceil(Fraction(low_hz) * scale)
    k_hi = math.floor(Fraction(high_hz) * scale)
    if not keep_dc:
        k_lo = max(k_lo, 1)
    k_hi = min(k_hi, n - 1)
    if k_lo > k_hi:
        raise InvalidInputError(f"band {low_hz}-{high_hz} Hz contains no DCT coefficient for n={n}, fs={fs}")
    return k_lo, k_hi


def make_band_mask(n, fs, low_hz, high_hz, keep_dc=False):
    k_lo, k_hi = band_mask_indices(n, fs, low_hz, high_hz, keep_dc)
    return BandMask(low_hz, high_hz, k_lo, k_hi, keep_dc)


def dct_band(x, mask):
    """DCT-II of each row of ``x`` cropped to the band's coefficient range."""
    return dct2_forward(x)[..., mask.k_lo : mask.k_hi + 1]


def read_signal_csv(path, sample_rate_hz=30.0):
    """Read an ``idx,r,g,b`` or ``idx,v`` file into a :class:`Signal`."""
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip()
        cols = [c.strip() for c in header.split(",")]
        if cols == ["idx", "r", "g", "b"]:
            nch = 3
        elif cols == ["idx", "v"]:
            nch = 1
        else:
            raise ParseError(path, 1, f"unexpected header {header!r}")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != nch + 1:
                raise ParseError(path, lineno, f"expected {nch + 1} fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts[1:]]
            except ValueError:
                raise ParseError(path, lineno, f"non-numeric value in {line!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError(path, lineno, "non-finite value")
            rows.append(vals)
    samples = np.array(rows, dtype=np.float64).reshape(-1, nch).T
    return Signal(samples, sample_rate_hz)


def write_signal_csv(path, samples):
    """Write ``samples`` (channels, length) with the matching header."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[None, :]
    header = "idx,r,g,b" if samples.shape[0] == 3 else "idx,v"
    lines = [header]
    for i, col in enumerate(samples.T):
        lines.append(",".join([str(i)] + [repr(float(v)) for v in col]))
    Path(path).write_text("\n".join(lines) + "\n")
