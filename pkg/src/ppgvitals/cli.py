"""Command-line entry point: extract, train, evaluate, infer, gradcheck, report.

Exit codes: 0 success, 1 runtime or data error, 2 usage or config error.
"""

import argparse
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import data as ds
from .errors import ConfigError, DatasetError, FormatError, InvalidInputError, ParseError, TrainingError
from .gradcheck import run_suite
from .models import ARCHITECTURES, MODEL_FS, TASKS, load_model, save_model
from .signals import Signal, make_windows, mean_rgb, read_ppm, read_signal_csv, resample_linear
from .train import LOSSES, TrainingConfig, evaluate, train

RUNTIME_ERRORS = (DatasetError, ParseError, TrainingError, InvalidInputError, FormatError, OSError)
DATASETS = ("synthetic", "mths", "bidmc")
INFER_WINDOW_S = 10.0


def warn(msg):
    print(f"warning: {msg}", file=sys.stderr)


@dataclass
class RunConfig:
    train: TrainingConfig
    dataset_dir: Path = None
    synth_n: int = 2000
    synth_seed: int = 7
    model_out: Path = None
    history_out: Path = None
    manifest_out: Path = None


_REQUIRED = ("dataset", "task", "arch", "loss", "epochs", "seed", "fractions", "model_out")
_TRAIN_FIELDS = {f.name: f for f in fields(TrainingConfig)}
_RUN_KEYS = {"dataset_dir": Path, "synth_n": int, "synth_seed": int,
             "model_out": Path, "history_out": Path, "manifest_out": Path}


def _convert(key, raw):
    if key == "fractions":
        parts = [p.strip() for p in raw.split(",")]
        if len(parts) != 3:
            raise ValueError("expected three comma-separated values")
        return tuple(float(p) for p in parts)
    if key in _RUN_KEYS:
        return _RUN_KEYS[key](raw)
    default = getattr(TrainingConfig, key)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text, base_dir=Path(".")):
    """Parse flat ``key=value`` text. Blank lines and ``#`` comments are ignored."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value")
        if key not in _TRAIN_FIELDS and key not in _RUN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    missing = [k for k in _REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}")
    if values["dataset"] not in DATASETS:
        raise ConfigError(f"dataset must be one of {DATASETS}")
    if values["task"] not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}")
    if values["arch"] not in ARCHITECTURES:
        raise ConfigError(f"arch must be one of {ARCHITECTURES}")
    if values["loss"] not in LOSSES:
        raise ConfigError(f"loss must be one of {LOSSES}")
    if values["dataset"] != "synthetic" and "dataset_dir" not in values:
        raise ConfigError("missing required key: dataset_dir")
    if values["dataset"] == "synthetic" and values["task"] != "hr":
        raise ConfigError("the synthetic dataset only provides hr targets")
    tc = TrainingConfig(**{k: v for k, v in values.items() if k in _TRAIN_FIELDS})
    try:
        tc.validate()
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from None
    run = {k: v for k, v in values.items() if k in _RUN_KEYS}
    for key in ("dataset_dir", "model_out", "history_out", "manifest_out"):
        if key in run and not run[key].is_absolute():
            run[key] = base_dir / run[key]
    cfg = RunConfig(tc, **run)
    stem = cfg.model_out.with_suffix("")
    if cfg.history_out is None:
        cfg.history_out = stem.with_name(stem.name + ".history.csv")
    if cfg.manifest_out is None:
        cfg.manifest_out = stem.with_name(stem.name + ".split.txt")
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, path.parent)


def load_examples(cfg):
    """(examples, all subject ids) for the configured dataset and task."""
    tc = cfg.train
    if tc.dataset == "synthetic":
        examples = ds.synth_dataset(cfg.synth_n, cfg.synth_seed)
        return examples, [e.subject_id for e in examples]
    loader = ds.load_mths if tc.dataset == "mths" else ds.load_bidmc
    records = loader(cfg.dataset_dir)
    made = ds.make_examples(records, tc.task, tc.window_s, tc.hop_s)
    if made.dropped:
        print(f"dropped {made.dropped} of {made.candidates} windows with missing labels", file=sys.stderr)
    return made.examples, [r.subject_id for r in records]


def split_examples(examples, manifest):
    return {name: ds.select(examples, manifest.ids(name)) for name in ("train", "val", "test")}


def cmd_extract(args):
    frames_dir = Path(args.frames_dir)
    if not frames_dir.is_dir():
        raise DatasetError(f"{frames_dir} is not a directory")
    paths = sorted(p for p in frames_dir.iterdir() if p.suffix.lower() == ".ppm")
    if not paths:
        warn(f"no .ppm frames in {frames_dir}")
    lines = ["idx,r,g,b"]
    for i, p in enumerate(paths):
        r, g, b = mean_rgb(read_ppm(p))
        lines.append(f"{i},{r!r},{g!r},{b!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    examples, ids = load_examples(cfg)
    manifest = ds.split_subjects(ids, cfg.train.fractions, cfg.train.seed)
    parts = split_examples(examples, manifest)
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    model, hist = train(cfg.train, parts["train"], parts["val"], parts["test"], log=log)
    for p in (cfg.model_out, cfg.history_out, cfg.manifest_out):
        p.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, cfg.model_out)
    hist.save(cfg.history_out)
    ds.write_manifest(manifest, cfg.manifest_out)
    print(f"trained {cfg.train.arch}/{cfg.train.loss} on {len(parts['train'])} examples; "
          f"test MAE {hist.test_mae:.4f}", file=sys.stderr)
    return 0


def cmd_evaluate(args):
    cfg = load_config(args.config)
    if args.dataset:
        cfg.dataset_dir = Path(args.dataset)
    model_path = Path(args.model) if args.model else cfg.model_out
    if not cfg.manifest_out.exists():
        raise DatasetError(f"split manifest {cfg.manifest_out} not found; run train first")
    manifest = ds.read_manifest(cfg.manifest_out)
    tc = cfg.train
    if manifest.seed != tc.seed or any(abs(a - b) > 1e-12 for a, b in zip(manifest.fractions, tc.fractions)):
        raise DatasetError("manifest seed/fractions do not match the config")
    model = load_model(model_path)
    if (model.arch, model.task) != (tc.arch, tc.task):
        raise DatasetError(f"model is {model.arch}/{model.task}, config says {tc.arch}/{tc.task}")
    examples, ids = load_examples(cfg)
    rebuilt = ds.split_subjects(ids, manifest.fractions, manifest.seed)
    if any(sorted(rebuilt.ids(s)) != sorted(manifest.ids(s)) for s in ("train", "val", "test")):
        raise DatasetError("dataset subjects do not reproduce the stored split manifest")
    subset = ds.select(examples, manifest.ids(args.split))
    mae = evaluate(model, subset)
    report = {"dataset": tc.dataset, "task": tc.task, "arch": tc.arch, "loss": tc.loss,
              "split": args.split, "mae": mae, "n_examples": len(subset)}
    text = json.dumps(report, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    print(f"{args.split} MAE: {mae:.4f}", file=sys.stderr)
    return 0


def infer_lines(model, sig):
    if sig.sample_rate_hz != MODEL_FS:
        sig = resample_linear(sig, MODEL_FS)
    samples = ds.task_channels(sig.samples, model.task)
    windows = make_windows(Signal(samples, sig.sample_rate_hz), INFER_WINDOW_S, INFER_WINDOW_S)
    out = []
    for start, block in windows:
        est = model.predict(block)
        out.append(json.dumps({"t_start_s": float(start), "estimate": est}))
    return out


def cmd_infer(args):
    model = load_model(args.model)
    sig = read_signal_csv(args.signal, args.fs)
    lines = infer_lines(model, sig)
    if not lines:
        warn(f"signal is {sig.duration_s:.2f}s long, shorter than one {INFER_WINDOW_S:g}s window")
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args):
    results = run_suite(fault=args.inject_fault)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<22} max_rel_err={r.max_rel_error:.3e} tol={r.tol:.0e} "
              f"checked={r.checked} skipped={r.skipped}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} passed")
    return 1 if failed else 0


def _report_cell(job):
    tc, parts = job
    try:
        _, hist = train(tc, parts["train"], parts["val"], parts["test"])
        return hist.test_mae, None
    except (TrainingError, InvalidInputError, FloatingPointError) as exc:
        return math.nan, str(exc)


def run_grid(base_cfg, parts, jobs=1):
    """Test MAE for every (architecture, loss) pair on one shared split."""
    cells = [(a, l) for a in ARCHITECTURES for l in LOSSES]
    work = [(replace(base_cfg, arch=a, loss=l), parts) for a, l in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_report_cell, work))
    else:
        results = [_report_cell(w) for w in work]
    grid = {}
    for (a, l), (mae, err) in zip(cells, results):
        if err is not None:
            warn(f"cell {a}/{l} failed: {err}")
        grid[(a, l)] = mae
    return grid


def format_report(grid, dataset, task, seed):
    lines = [f"# dataset={dataset} task={task} seed={seed}", "model," + ",".join(LOSSES)]
    for a in ARCHITECTURES:
        lines.append(a + "," + ",".join(repr(float(grid[(a, l)])) for l in LOSSES))
    finite = {k: v for k, v in grid.items() if not math.isnan(v)}
    if finite:
        (a, l), v = min(finite.items(), key=lambda kv: kv[1])
        lines.append(f"best={a},{l},{v!r}")
    else:
        lines.append("best=none")
    return "\n".join(lines) + "\n"


def parse_report(text):
    lines = [ln for ln in text.strip().splitlines()]
    meta = dict(kv.split("=", 1) for kv in lines[0].lstrip("# ").split())
    header = lines[1].split(",")
    grid = {}
    best = None
    for line in lines[2:]:
        if line.startswith("best="):
            parts = line[5:].split(",")
            best = None if parts == ["none"] else (parts[0], parts[1], float(parts[2]))
            continue
        cells = line.split(",")
        for loss, v in zip(header[1:], cells[1:]):
            grid[(cells[0], loss)] = float(v)
    return meta, grid, best


def _json_num(v):
    return None if math.isnan(v) else v


def cmd_report(args):
    cfg = load_config(args.config)
    if args.dataset:
        cfg.dataset_dir = Path(args.dataset)
    if args.task:
        if cfg.train.dataset == "synthetic" and args.task != "hr":
            raise ConfigError("the synthetic dataset only provides hr targets")
        cfg.train = replace(cfg.train, task=args.task)
    examples, ids = load_examples(cfg)
    manifest = ds.split_subjects(ids, cfg.train.fractions, cfg.train.seed)
    parts = split_examples(examples, manifest)
    grid = run_grid(cfg.train, parts, jobs=args.jobs)
    text = format_report(grid, cfg.train.dataset, cfg.train.task, cfg.train.seed)
    payload = {"dataset": cfg.train.dataset, "task": cfg.train.task, "seed": cfg.train.seed,
               "grid": {a: {l: _json_num(grid[(a, l)]) for l in LOSSES} for a in ARCHITECTURES}}
    if args.out:
        out = Path(args.out)
        out.write_text(text)
        out.with_suffix(".json").write_text(json.dumps(payload, sort_keys=True) + "\n")
    sys.stdout.write(text)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ppgvitals", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("extract", help="mean RGB signal from a directory of PPM frames")
    s.add_argument("frames_dir")
    s.add_argument("--out")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="train one model from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="MAE of a trained model on one split")
    s.add_argument("--config", required=True)
    s.add_argument("--model")
    s.add_argument("--dataset")
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("infer", help="per-window estimates for a signal CSV")
    s.add_argument("--model", required=True)
    s.add_argument("signal")
    s.add_argument("--fs", type=float, default=MODEL_FS, help="signal sample rate in Hz")
    s.add_argument("--out")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss")
    s.add_argument("--inject-fault", type=float, default=0.0, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", help="architecture x loss test-MAE grid")
    s.add_argument("--config", required=True)
    s.add_argument("--dataset")
    s.add_argument("--task", choices=TASKS)
    s.add_argument("--out")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
