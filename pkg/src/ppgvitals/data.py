"""Dataset loading, window/label pairing, subject-level splits and synthetic PPG.

On-disk layouts
---------------
MTHS (converted to CSV): one pair of files per subject in a directory,
``<id>_signal.csv`` with header ``idx,r,g,b`` sampled at 30 Hz and
``<id>_labels.csv`` with header ``sec,hr,spo2`` (blank cell = missing).

BIDMC (the public CSV release): ``bidmc_<nn>_Signals.csv`` with a
``Time [s]`` column and a ``PLETH`` column, and ``bidmc_<nn>_Numerics.csv``
with ``Time [s]``, ``HR`` and ``SpO2`` columns at 1 Hz. Other columns are
ignored. The PPG is resampled to 30 Hz.
"""

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, InvalidInputError, ParseError
from .rng import SplitMix64, shuffle
from .signals import Signal, make_windows, read_signal_csv, resample_linear

TARGET_FS = 30.0
HR_RANGE = (30.0, 240.0)
SPO2_RANGE = (70.0, 100.0)
TASK_RANGES = {"hr": HR_RANGE, "spo2": SPO2_RANGE}


@dataclass
class SubjectRecord:
    subject_id: str
    ppg: Signal
    hr: np.ndarray  # one value per second, NaN = missing
    spo2: np.ndarray

    def labels(self, task):
        return self.hr if task == "hr" else self.spo2


@dataclass
class LabeledExample:
    window: np.ndarray  # (channels, N)
    target: float
    subject_id: str
    start_s: float


@dataclass
class SplitManifest:
    seed: int
    fractions: tuple
    train: list
    val: list
    test: list

    def split_of(self, subject_id):
        for name in ("train", "val", "test"):
            if subject_id in getattr(self, name):
                return name
        return None

    def ids(self, split):
        return list(getattr(self, split))


@dataclass
class ExampleSet:
    examples: list = field(default_factory=list)
    candidates: int = 0
    dropped: int = 0


def _in_range(value, bounds):
    return bounds[0] <= value <= bounds[1]


def _parse_label(text, bounds):
    text = text.strip()
    if not text or text.lower() == "nan":
        return math.nan
    v = float(text)
    return v if math.isfinite(v) and _in_range(v, bounds) else math.nan


def _read_labels_csv(path):
    path = Path(path)
    secs, hrs, spo2s = [], [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [c.strip() for c in next(reader, [])]
        if header != ["sec", "hr", "spo2"]:
            raise ParseError(path, 1, f"expected header sec,hr,spo2, got {','.join(header)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(path, lineno, f"expected 3 fields, got {len(row)}")
            try:
                sec = int(row[0])
                hr = _parse_label(row[1], HR_RANGE)
                spo2 = _parse_label(row[2], SPO2_RANGE)
            except ValueError:
                raise ParseError(path, lineno, f"malformed row {','.join(row)!r}") from None
            if sec < 0:
                raise ParseError(path, lineno, "negative second index")
            secs.append(sec)
            hrs.append(hr)
            spo2s.append(spo2)
    n = max(secs) + 1 if secs else 0
    hr_arr = np.full(n, np.nan)
    spo2_arr = np.full(n, np.nan)
    hr_arr[secs] = hrs
    spo2_arr[secs] = spo2s
    return hr_arr, spo2_arr


def load_mths(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"{directory} is not a directory")
    records = []
    for sig_path in sorted(directory.glob("*_signal.csv")):
        sid = sig_path.name[: -len("_signal.csv")]
        label_path = directory / f"{sid}_labels.csv"
        if not label_path.exists():
            raise DatasetError(f"subject {sid}: missing label file {label_path.name}")
        ppg = read_signal_csv(sig_path, TARGET_FS)
        hr, spo2 = _read_labels_csv(label_path)
        records.append(SubjectRecord(sid, ppg, hr, spo2))
    if not records:
        raise DatasetError(f"no *_signal.csv files in {directory}")
    return records


def _read_columns(path, wanted):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [c.strip() for c in next(reader, [])]
        missing = [w for w in wanted if w not in header]
        if missing:
            raise ParseError(path, 1, f"missing column(s) {missing}")
        idx = [header.index(w) for w in wanted]
        cols = [[] for _ in wanted]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                for out, i in zip(cols, idx):
                    cell = row[i].strip()
                    out.append(float(cell) if cell else math.nan)
            except (ValueError, IndexError):
                raise ParseError(path, lineno, "malformed row") from None
    return [np.array(c) for c in cols]


def load_bidmc(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"{directory} is not a directory")
    records = []
    for sig_path in sorted(directory.glob("bidmc_*_Signals.csv")):
        m = re.match(r"(bidmc_\d+)_Signals\.csv$", sig_path.name)
        if not m:
            continue
        sid = m.group(1)
        num_path = directory / f"{sid}_Numerics.csv"
        if not num_path.exists():
            raise DatasetError(f"subject {sid}: missing numerics file {num_path.name}")
        t, pleth = _read_columns(sig_path, ["Time [s]", "PLETH"])
        if len(t) < 2 or not np.all(np.isfinite(pleth)):
            raise DatasetError(f"{sig_path.name}: PPG too short or contains gaps")
        fs = round((len(t) - 1) / (t[-1] - t[0]), 6)
        ppg = resample_linear(Signal(pleth, fs), TARGET_FS)
        n_sec = int(len(ppg) // TARGET_FS)
        nt, hr_raw, spo2_raw = _read_columns(num_path, ["Time [s]", "HR", "SpO2"])
        hr = np.full(n_sec, np.nan)
        spo2 = np.full(n_sec, np.nan)
        for sec, h, s in zip(nt, hr_raw, spo2_raw):
            if not math.isfinite(sec):
                continue
            i = int(round(sec))
            if 0 <= i < n_sec:
                hr[i] = h if math.isfinite(h) and _in_range(h, HR_RANGE) else math.nan
                spo2[i] = s if math.isfinite(s) and _in_range(s, SPO2_RANGE) else math.nan
        records.append(SubjectRecord(sid, ppg, hr, spo2))
    if not records:
        raise DatasetError(f"no bidmc_*_Signals.csv files in {directory}")
    return records


def split_sizes(n, fractions):
    """(train, val, test) counts; val and test round half away from zero."""
    _, f_val, f_test = fractions
    n_test = math.floor(f_test * n + 0.5)
    n_val = math.floor(f_val * n + 0.5)
    return n - n_test - n_val, n_val, n_test


def split_subjects(ids, fractions, seed):
    """Deterministic subject-level split.

    The ids are sorted, Fisher-Yates shuffled with SplitMix64(seed), and
    the shuffled list is cut into test, val, then train.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidInputError(f"split fractions {fractions} must be three non-negatives summing to 1")
    ids = sorted(set(ids))
    if not ids:
        raise InvalidInputError("cannot split an empty id list")
    order = shuffle(list(ids), SplitMix64(seed))
    n_train, n_val, n_test = split_sizes(len(ids), fractions)
    if n_train < 0:
        raise InvalidInputError(f"fractions {fractions} leave no room for training on {len(ids)} subjects")
    test = order[:n_test]
    val = order[n_test : n_test + n_val]
    train = order[n_test + n_val :]
    return SplitManifest(int(seed), fractions, train, val, test)


def write_manifest(manifest, path):
    lines = [f"seed={manifest.seed} fractions={','.join(repr(f) for f in manifest.fractions)}"]
    for sid in sorted(manifest.train + manifest.val + manifest.test):
        lines.append(f"{sid},{manifest.split_of(sid)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ParseError(path, 1, "empty manifest")
    m = re.fullmatch(r"seed=(-?\d+) fractions=([^,\s]+),([^,\s]+),([^,\s]+)", lines[0].strip())
    if not m:
        raise ParseError(path, 1, f"bad manifest header {lines[0]!r}")
    seed = int(m.group(1))
    fractions = tuple(float(m.group(i)) for i in (2, 3, 4))
    splits = {"train": [], "val": [], "test": []}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        sid, _, which = line.strip().rpartition(",")
        if not sid or which not in splits:
            raise ParseError(path, lineno, f"bad manifest line {line!r}")
        splits[which].append(sid)
    return SplitManifest(seed, fractions, splits["train"], splits["val"], splits["test"])


def task_channels(samples, task):
    """Red only for HR, RGB for SpO2; a single-channel PPG is replicated for SpO2."""
    if task == "hr":
        return samples[:1]
    if task == "spo2":
        return samples if samples.shape[0] == 3 else np.repeat(samples[:1], 3, axis=0)
    raise InvalidInputError(f"unknown task {task!r}")


def make_examples(records, task, window_s=10, hop_s=1):
    """Pair windows with the mean of their 1 Hz labels.

    Windows whose seconds include a missing or out-of-range label, or run
    past the end of the labels, are dropped and counted.
    """
    bounds = TASK_RANGES[task]
    out = ExampleSet()
    n_lab = int(round(window_s))
    for rec in records:
        labels = rec.labels(task)
        sig = Signal(task_channels(rec.ppg.samples, task), rec.ppg.sample_rate_hz)
        for start, block in make_windows(sig, window_s, hop_s):
            out.candidates += 1
            s0 = int(math.floor(start + 1e-9))
            seg = labels[s0 : s0 + n_lab]
            if len(seg) < n_lab or not np.all(np.isfinite(seg)):
                out.dropped += 1
                continue
            target = float(np.mean(seg))
            if not _in_range(target, bounds):
                out.dropped += 1
                continue
            out.examples.append(LabeledExample(np.array(block), target, rec.subject_id, start))
    return out


def synth_dataset(n, seed, hr_range=(48.0, 180.0), noise=0.1, fs=TARGET_FS, length=300):
    """Noisy sinusoid windows whose target is the sinusoid's rate in bpm.

    Per example: one uniform draw for the rate, then ``length`` Box-Muller
    normals, all from one SplitMix64(seed) stream. Every example is its own
    subject (``syn00000``, ...), so subject splits work unchanged.
    """
    rng = SplitMix64(seed)
    t = np.arange(length) / fs
    examples = []
    for i in range(n):
        hr = rng.uniform(*hr_range)
        eps = rng.normals(length)
        x = np.sin(2.0 * np.pi * (hr / 60.0) * t) + noise * eps
        examples.append(LabeledExample(x[None, :], hr, f"syn{i:05d}", 0.0))
    return examples


def select(examples, subject_ids):
    keep = set(subject_ids)
    return [e for e in examples if e.subject_id in keep]


def stack(examples):
    if not examples:
        return np.zeros((0, 1, 0)), np.zeros(0)
    return np.stack([e.window for e in examples]), np.array([e.target for e in examples])
