"""Command-line entry point, configuration, and report emission.

Configuration merges three layers with rising precedence: dataclass
defaults, an optional ``key = value`` config file (``#`` comments), then
command-line flags.  Every field is validated before any command runs, so a
rejected config never writes a file or starts a computation.

Reports are tables of named columns written atomically (temp file + rename)
in either ``csv`` (header row then records) or ``structured`` format (one
``key=value`` group per row, groups separated by blank lines).  Floats are
formatted with ``repr`` so files round-trip exactly and identical configs
produce byte-identical reports.

Model checkpoints use a small self-describing binary format: magic ``ESPM``,
a version byte, a sorted-key JSON header naming every tensor, then raw
little-endian float64 tensor payloads in header order.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import struct
import sys
import tempfile
from dataclasses import dataclass, fields

import numpy as np

from .attention import PE_MODES
from .costmodel import (
    ProjectorDescriptor,
    build_projector,
    measure_runtime,
    projector_tokens,
    scaling_report,
)
from .kernels import active_backend, available_backends, set_backend
from .prng import Prng
from .projectors import (
    KINDS,
    EspressoConfig,
    FeatureVideo,
    save_feature_video,
)
from .synthbench import (
    AXIS_SEGMENTS,
    SEGMENT_SWEEP_DEFAULT,
    SEGMENT_SWEEP_NEEDLE,
    SPATIAL_SWEEP_ONE_SEGMENT,
    SWEEP_AXES,
    TEMPORAL_SWEEP_128_FRAMES,
    compression_sweep,
    make_needle_dataset,
)
from .tensor import DenseTensor, zeros
from .training import (
    GRAD_TOL,
    NeedleModel,
    ProbeParams,
    TrainReport,
    evaluate_accuracy,
    gradient_suite,
    max_rel_err,
    model_parameters,
    train_needle,
)

COMMANDS = ("gradcheck", "scaling", "bench", "needle-gen", "train", "eval", "stats")
FORMATS = ("csv", "structured")

# Canned accuracy sweeps usable as `stats --table` arguments: name -> (axis, table).
BUILTIN_TABLES = {
    "segments-default": ("segments", SEGMENT_SWEEP_DEFAULT),
    "segments-needle": ("segments", SEGMENT_SWEEP_NEEDLE),
    "spatial-1seg": ("spatial", SPATIAL_SWEEP_ONE_SEGMENT),
    "temporal-128f": ("temporal", TEMPORAL_SWEEP_128_FRAMES),
}

CHECKPOINT_MAGIC = b"ESPM"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sBI")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class RunConfig:
    """Merged, validated settings for one command invocation."""

    command: str = ""
    # projector
    kind: str = "espresso"
    D_v: int = 16
    D_llm: int = 32
    p: int = 4
    t: int = 4
    n: int = 1
    L: int = 8
    heads: int = 4
    blocks: int = 2
    ffn_mult: int = 4
    pe_mode: str = "sinusoidal"
    # task
    T: int = 32
    P: int = 16
    T_scene: int = 8
    M: int = 4
    a: float = 2.0
    sigma: float = 1.0
    steps: int = 2000
    batch: int = 32
    # seeds and dataset sizes
    seed: int = 0
    data_seed: int = 0
    eval_seed: int = 1000000
    count: int = 4096
    eval_count: int = 512
    # outputs
    output: str = ""
    format: str = "csv"
    outdir: str = "needle_data"
    checkpoint: str = ""
    # stats inputs
    table: str = ""
    axis: str = ""


_INT_KEYS = frozenset({
    "D_v", "D_llm", "p", "t", "n", "L", "heads", "blocks", "ffn_mult",
    "T", "P", "T_scene", "M", "steps", "batch",
    "seed", "data_seed", "eval_seed", "count", "eval_count",
})
_FLOAT_KEYS = frozenset({"a", "sigma"})
_STR_KEYS = frozenset({
    "kind", "pe_mode", "output", "format", "outdir", "checkpoint", "table", "axis",
})
CONFIG_KEYS = _INT_KEYS | _FLOAT_KEYS | _STR_KEYS


def _cast(key: str, value: str):
    if key in _INT_KEYS:
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {value!r}") from None
    if key in _FLOAT_KEYS:
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {value!r}") from None
    return value


def parse_config_file(path: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    pairs = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        pairs[key] = _cast(key, value.strip())
    return pairs


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="espresso",
        description="Fixed-length video projector toolkit: cost model, "
                    "synthetic needle benchmark, training, and reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    help_by_command = {
        "gradcheck": "finite-difference check of every operation",
        "scaling": "token/FLOP/parameter sweep over the frame grid",
        "bench": "runtime measurement per kernel backend",
        "needle-gen": "write a needle dataset (features + manifest)",
        "train": "train projector + probe on the needle task",
        "eval": "evaluate a saved checkpoint",
        "stats": "compression-rate correlation over an accuracy table",
    }
    for command in COMMANDS:
        cmd = sub.add_parser(command, help=help_by_command[command])
        cmd.add_argument("--config", default=None, metavar="FILE",
                         help="key = value config file (flags take precedence)")
        for key in sorted(_INT_KEYS):
            cmd.add_argument(f"--{key}", type=int, default=None)
        for key in sorted(_FLOAT_KEYS):
            cmd.add_argument(f"--{key}", type=float, default=None)
        for key in sorted(_STR_KEYS):
            cmd.add_argument(f"--{key}", type=str, default=None)
    return parser


def _require_positive(cfg: RunConfig, key: str, minimum: int = 1) -> None:
    value = getattr(cfg, key)
    if value < minimum:
        raise ConfigError(f"{key} must be >= {minimum}, got {value}")


def validate_config(cfg: RunConfig) -> None:
    """Every constraint checked up front; messages name the offending key."""
    if cfg.kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {cfg.kind!r}")
    if cfg.pe_mode not in PE_MODES:
        raise ConfigError(f"pe_mode must be one of {PE_MODES}, got {cfg.pe_mode!r}")
    if cfg.format not in FORMATS:
        raise ConfigError(f"format must be one of {FORMATS}, got {cfg.format!r}")
    for key in ("p", "t", "n", "L", "heads", "blocks", "ffn_mult",
                "D_v", "D_llm", "T", "P", "T_scene", "steps", "batch",
                "count", "eval_count"):
        _require_positive(cfg, key)
    for key in ("seed", "data_seed", "eval_seed"):
        _require_positive(cfg, key, minimum=0)
    if cfg.T < cfg.n:
        raise ConfigError(f"T must be >= n, got T={cfg.T} with n={cfg.n}")
    if cfg.D_v % 2 or cfg.D_v % cfg.heads:
        raise ConfigError(
            f"D_v must be even and divisible by heads, got D_v={cfg.D_v} heads={cfg.heads}"
        )
    if cfg.D_llm % 2 or cfg.D_llm % cfg.heads:
        raise ConfigError(
            f"D_llm must be even and divisible by heads, got D_llm={cfg.D_llm} heads={cfg.heads}"
        )
    if cfg.M < 4:
        raise ConfigError(f"M must be >= 4 (four distinct scene motifs), got {cfg.M}")
    if cfg.M > cfg.D_v:
        raise ConfigError(f"M must be <= D_v, got M={cfg.M} with D_v={cfg.D_v}")
    if cfg.a < 0:
        raise ConfigError(f"a must be >= 0, got {cfg.a}")
    if cfg.sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {cfg.sigma}")
    if cfg.axis and cfg.axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {SWEEP_AXES}, got {cfg.axis!r}")
    if cfg.command == "stats" and not cfg.table:
        raise ConfigError(
            f"table is required for stats (builtin names: {', '.join(sorted(BUILTIN_TABLES))})"
        )
    if cfg.command == "eval" and not cfg.checkpoint:
        raise ConfigError("checkpoint is required for eval")


def parse_config(argv: list[str]) -> RunConfig:
    """argv -> validated RunConfig (defaults < config file < flags)."""
    args = _build_parser().parse_args(argv)
    merged = {f.name: f.default for f in fields(RunConfig)}
    merged["command"] = args.command
    if args.config is not None:
        merged.update(parse_config_file(args.config))
    for key in CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    cfg = RunConfig(**merged)
    validate_config(cfg)
    return cfg


# --------------------------------------------------------------------------
# report emission

def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report(rows: list[dict], fmt: str, path: str, columns=None) -> None:
    """Write a table atomically; ``columns`` fixes the order (and the header
    of an empty csv)."""
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}, got {fmt!r}")
    if columns is None:
        if not rows:
            raise ValueError("cannot infer columns from an empty row list")
        columns = list(rows[0].keys())
    columns = list(columns)
    for row in rows:
        if list(row.keys()) != columns:
            raise ValueError(f"report rows have mixed columns: {list(row.keys())} vs {columns}")

    buf = io.StringIO()
    if fmt == "csv":
        buf.write(",".join(columns) + "\n")
        for row in rows:
            buf.write(",".join(_format_value(row[c]) for c in columns) + "\n")
    else:
        for i, row in enumerate(rows):
            if i:
                buf.write("\n")
            for c in columns:
                buf.write(f"{c}={_format_value(row[c])}\n")

    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".report-")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(buf.getvalue())
            os.replace(tmp_path, path)
        except BaseException:
            os.unlink(tmp_path)
            raise
    except OSError as exc:
        raise OSError(f"failed writing report {path}: {exc}") from None


def read_report(path: str, fmt: str) -> list[dict]:
    """Parse a report back into rows of strings (inverse of write_report)."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if fmt == "csv":
        reader = csv.reader(io.StringIO(text))
        table = list(reader)
        if not table:
            return []
        header = table[0]
        return [dict(zip(header, record)) for record in table[1:]]
    rows = []
    for group in text.split("\n\n"):
        group = group.strip("\n")
        if not group:
            continue
        row = {}
        for line in group.splitlines():
            key, _, value = line.partition("=")
            row[key] = value
        rows.append(row)
    return rows


def read_table(path: str) -> list[tuple[float, float]]:
    """CSV with a ``value,metric`` header -> list of (value, metric)."""
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            records = list(csv.reader(fh))
    except OSError as exc:
        raise ValueError(f"cannot read table {path}: {exc}") from None
    if not records or records[0] != ["value", "metric"]:
        raise ValueError(f"table {path} must start with a 'value,metric' header")
    return [(float(value), float(metric)) for value, metric in records[1:]]


# --------------------------------------------------------------------------
# checkpoints

def save_model(model: NeedleModel, path: str) -> None:
    """Serialize descriptor and all tensors; identical models give identical bytes."""
    named = model_parameters(model)
    header = {
        "kind": model.descriptor.kind,
        "pr_queries": model.descriptor.pr_queries,
        "config": {f.name: getattr(model.descriptor.config, f.name)
                   for f in fields(model.descriptor.config)},
        "tensors": [[name, list(tensor.shape)] for name, tensor in named],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = bytearray()
    blob += _CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes))
    blob += header_bytes
    for _, tensor in named:
        blob += tensor.nd.astype("<f8").tobytes()

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes(blob))
        os.replace(tmp_path, path)
    except BaseException:
        os.unlink(tmp_path)
        raise


def load_model(path: str) -> NeedleModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _CKPT_HEADER.size:
        raise ValueError(f"checkpoint {path} is truncated")
    magic, version, header_len = _CKPT_HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"checkpoint {path} has bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint {path} has unsupported version {version}")
    offset = _CKPT_HEADER.size
    header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    offset += header_len

    config = EspressoConfig(**header["config"])
    descriptor = ProjectorDescriptor(kind=header["kind"], config=config,
                                     pr_queries=header["pr_queries"])
    stored = {}
    for name, shape in header["tensors"]:
        shape = tuple(shape)
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = size * 8
        if offset + nbytes > len(blob):
            raise ValueError(f"checkpoint {path} is truncated in tensor {name}")
        stored[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise ValueError(f"checkpoint {path} has {len(blob) - offset} trailing bytes")

    projector = build_projector(descriptor)
    probe_w = stored.get("probe.weight")
    probe_b = stored.get("probe.bias")
    if probe_w is None or probe_b is None:
        raise ValueError(f"checkpoint {path} is missing probe tensors")
    probe = ProbeParams(weight=zeros(probe_w.shape), bias=zeros(probe_b.shape))
    model = NeedleModel(descriptor=descriptor, projector=projector, probe=probe)

    expected = dict(model_parameters(model))
    if set(expected) != set(stored):
        missing = sorted(set(expected) ^ set(stored))
        raise ValueError(f"checkpoint {path} tensor names do not match the model: {missing}")
    for name, tensor in expected.items():
        if stored[name].shape != tensor.shape:
            raise ValueError(
                f"checkpoint {path} tensor {name} has shape {stored[name].shape}, "
                f"expected {tensor.shape}"
            )
        tensor.data[:] = stored[name].reshape(-1)
    return model


# --------------------------------------------------------------------------
# commands

def _descriptor(cfg: RunConfig) -> ProjectorDescriptor:
    config = EspressoConfig(
        feat_dim=cfg.D_v, llm_dim=cfg.D_llm,
        spatial_queries=cfg.p, temporal_queries=cfg.t, segments=cfg.n,
        heads=cfg.heads, blocks=cfg.blocks, ffn_mult=cfg.ffn_mult,
        pe_mode=cfg.pe_mode, seed=cfg.seed,
    )
    return ProjectorDescriptor(kind=cfg.kind, config=config, pr_queries=cfg.L)


def _dataset(cfg: RunConfig, count: int, base_seed: int, split: str):
    return make_needle_dataset(
        count, base_seed, split=split, scene_frames=cfg.T_scene, patches=cfg.P,
        feat_dim=cfg.D_v, num_classes=cfg.M, amplitude=cfg.a, noise_sigma=cfg.sigma,
    )


def _maybe_write(cfg: RunConfig, rows: list[dict], columns=None) -> None:
    if cfg.output:
        write_report(rows, cfg.format, cfg.output, columns)


def _cmd_gradcheck(cfg: RunConfig) -> int:
    results = gradient_suite()
    rows = [{"op": r.name, "rel_err": r.rel_err} for r in results]
    for r in results:
        print(f"gradcheck {r.name}: {r.rel_err:.3e}")
    worst = max_rel_err(results)
    print(f"gradcheck max relative error: {worst:.3e} (tolerance {GRAD_TOL:.0e})")
    _maybe_write(cfg, rows)
    if worst > GRAD_TOL:
        print(f"error: gradient check failed: {worst:.3e} > {GRAD_TOL:.0e}",
              file=sys.stderr)
        return 1
    return 0


def _cmd_scaling(cfg: RunConfig) -> int:
    descriptor = _descriptor(cfg)
    rows = []
    for row in scaling_report([descriptor], patches=cfg.P):
        rows.append({
            "kind": row.kind, "frames": row.frames, "patches": row.patches,
            "tokens": row.tokens, "flops": row.flops, "params": row.params,
        })
        print(f"{row.kind} frames={row.frames} patches={row.patches} "
              f"tokens={row.tokens} flops={row.flops} params={row.params}")
    _maybe_write(cfg, rows)
    return 0


def _cmd_bench(cfg: RunConfig) -> int:
    descriptor = _descriptor(cfg)
    params = build_projector(descriptor)
    feats = DenseTensor(
        Prng(cfg.seed + 1).normals(cfg.T * cfg.P * cfg.D_v)
        .reshape(cfg.T, cfg.P, cfg.D_v)
    )
    rows = []
    previous = active_backend()
    try:
        for backend in available_backends():
            set_backend(backend)
            report = measure_runtime(lambda: projector_tokens(descriptor, params, feats))
            rows.append({
                "kind": cfg.kind, "backend": backend,
                "frames": cfg.T, "patches": cfg.P,
                "warmups": report.warmups, "runs": report.runs,
                "mean_s": report.mean, "min_s": report.min, "max_s": report.max,
            })
            print(f"{cfg.kind} backend={backend} frames={cfg.T} patches={cfg.P} "
                  f"mean={report.mean:.6f}s min={report.min:.6f}s max={report.max:.6f}s")
    finally:
        set_backend(previous)
    _maybe_write(cfg, rows)
    return 0


def _cmd_needle_gen(cfg: RunConfig) -> int:
    dataset = _dataset(cfg, cfg.count, cfg.data_seed, "train")
    os.makedirs(cfg.outdir, exist_ok=True)
    rows = []
    for i, example in enumerate(dataset.examples):
        filename = f"example_{i:05d}.bin"
        save_feature_video(FeatureVideo(example.composite.features),
                           os.path.join(cfg.outdir, filename))
        composite = example.composite
        rows.append({
            "index": i,
            "seed": cfg.data_seed + i,
            "order": "-".join(str(s) for s in composite.scene_order),
            "target": composite.target_scene,
            "labels": "-".join(str(c) for c in composite.motif_labels),
            "file": filename,
        })
    manifest = os.path.join(cfg.outdir, "manifest." + ("csv" if cfg.format == "csv" else "txt"))
    columns = ["index", "seed", "order", "target", "labels", "file"]
    write_report(rows, cfg.format, manifest, columns)
    print(f"wrote {len(rows)} examples and {manifest}")
    return 0


def _train_row(report: TrainReport) -> dict:
    return {
        "kind": report.kind,
        "steps": report.steps,
        "batch": report.batch_size,
        "seed": report.seed,
        "final_loss": report.final_loss,
        "first_window_mean": report.first_window_mean,
        "last_window_mean": report.last_window_mean,
        "window": report.window,
        "eval_accuracy": "" if report.eval_accuracy is None else report.eval_accuracy,
        "loss_history": " ".join(repr(x) for x in report.loss_history),
    }


def _cmd_train(cfg: RunConfig) -> int:
    descriptor = _descriptor(cfg)
    train_ds = _dataset(cfg, cfg.count, cfg.data_seed, "train")
    eval_ds = _dataset(cfg, cfg.eval_count, cfg.eval_seed, "eval")
    report, model = train_needle(descriptor, train_ds, steps=cfg.steps,
                                 batch_size=cfg.batch, seed=cfg.seed,
                                 eval_dataset=eval_ds)
    print(f"{report.kind}: final loss {report.final_loss:.4f}, "
          f"first-{report.window} mean {report.first_window_mean:.4f}, "
          f"last-{report.window} mean {report.last_window_mean:.4f}, "
          f"eval accuracy {report.eval_accuracy:.4f}")
    if cfg.checkpoint:
        save_model(model, cfg.checkpoint)
        print(f"saved checkpoint {cfg.checkpoint}")
    _maybe_write(cfg, [_train_row(report)])
    return 0


def _cmd_eval(cfg: RunConfig) -> int:
    model = load_model(cfg.checkpoint)
    eval_ds = _dataset(cfg, cfg.eval_count, cfg.eval_seed, "eval")
    accuracy = evaluate_accuracy(model, eval_ds)
    print(f"{model.descriptor.kind}: eval accuracy {accuracy:.4f} "
          f"on {len(eval_ds)} examples")
    _maybe_write(cfg, [{
        "kind": model.descriptor.kind,
        "eval_count": cfg.eval_count,
        "eval_seed": cfg.eval_seed,
        "accuracy": accuracy,
    }])
    return 0


def _cmd_stats(cfg: RunConfig) -> int:
    if cfg.table in BUILTIN_TABLES:
        axis, table = BUILTIN_TABLES[cfg.table]
        if cfg.axis:
            axis = cfg.axis
    else:
        # file tables default to the segment-count axis, the one sweep whose
        # rate is the raw swept value
        axis = cfg.axis or AXIS_SEGMENTS
        table = read_table(cfg.table)
    metric_by_value = {float(value): float(metric) for value, metric in table}
    result = compression_sweep(axis, list(metric_by_value),
                               lambda v: metric_by_value[float(v)])
    rows = [{"value": row.value, "rate": row.rate, "metric": row.metric}
            for row in result.rows]
    for row in result.rows:
        print(f"value={_format_value(row.value)} rate={_format_value(row.rate)} "
              f"metric={_format_value(row.metric)}")
    print(f"axis={result.axis} r={result.r!r}")
    _maybe_write(cfg, rows)
    return 0


_HANDLERS = {
    "gradcheck": _cmd_gradcheck,
    "scaling": _cmd_scaling,
    "bench": _cmd_bench,
    "needle-gen": _cmd_needle_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "stats": _cmd_stats,
}


def dispatch(cfg: RunConfig) -> int:
    return _HANDLERS[cfg.command](cfg)


def main(argv=None) -> int:
    try:
        cfg = parse_config(sys.argv[1:] if argv is None else argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return dispatch(cfg)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
