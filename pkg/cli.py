"""Command line for GSE format comparisons, tensor quantization, quantized LoRA training, sweeps and memory reports."""

import argparse
import json
import logging
import os
import sys
from dataclasses import MISSING, asdict, dataclass, field, fields

import numpy as np
import pandas as pd

from analysis import (
    DEFAULT_LOCALITY_THRESHOLD,
    format_comparison,
    grad_check,
    group_size_ablation,
    group_size_table,
    locality_stats,
    locality_tensor,
    memory_estimate,
    pareto_sweep,
    rank_gain_by_bits,
    seed_summary,
)
from errors import ConfigError, GsqError, ShapeError
from formats import FP_FORMATS, GseSpec, bit_layout
from fq_autograd import UNQUANTIZED_BITS, LoraLinear, QuantConfig, save_layer
from gse_kernels import GroupAxis, dequantize_matrix, quantize_matrix
from reporting import (
    plot_format_sqnr,
    plot_memory_breakdown,
    plot_pareto,
    plot_training_curve,
    write_csv,
    write_json,
    write_series,
    write_workbook,
)
from tensor_io import load_gse, load_tensor, save_gse, save_tensor
from trainer import DEFAULT_LOSS_SCALE, make_task, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

WORKERS_ENV = "GSQ_WORKERS"


# --------------------------------------------------------------------------
# Command configs
# --------------------------------------------------------------------------

def _default_tensors():
    return [
        {"name": "gaussian", "kind": "gaussian", "shape": [64, 256], "seed": 0},
        {"name": "locality", "kind": "locality", "shape": [64, 256], "seed": 1},
    ]


@dataclass(frozen=True)
class FormatsCompareConfig:
    tensors: list = field(default_factory=_default_tensors)
    gse_bits: list = field(default_factory=lambda: [5, 6, 7, 8])
    group_size: int = 32
    fp_formats: list = field(default_factory=lambda: list(FP_FORMATS))
    fp_scaling: str = "tensor"
    group_sizes: list = field(default_factory=lambda: [8, 16, 32, 64, 128])
    ablation_bits: int = 6
    locality_threshold: float = DEFAULT_LOCALITY_THRESHOLD
    out_dir: str = "results/formats"
    excel: bool = False


@dataclass(frozen=True)
class QuantizeConfig:
    input: str = None
    output: str = None
    bits: int = 8
    group_size: int = 32
    exponent_bias: int = 15
    axis: str = "along_rows"
    stats_path: str = None

    def __post_init__(self):
        if not self.input or not self.output:
            raise ConfigError("quantize needs an input and an output path")
        if not 5 <= self.bits <= 8:
            raise ConfigError(f"bits must be in [5, 8], got {self.bits}")
        if self.axis not in {a.value for a in GroupAxis}:
            raise ConfigError(f"axis must be along_rows or along_cols, got '{self.axis}'")


@dataclass(frozen=True)
class DequantizeConfig:
    input: str = None
    output: str = None
    dtype: str = "fp64"

    def __post_init__(self):
        if not self.input or not self.output:
            raise ConfigError("dequantize needs an input and an output path")
        if self.dtype not in ("fp32", "fp64"):
            raise ConfigError(f"dtype must be fp32 or fp64, got '{self.dtype}'")


@dataclass(frozen=True)
class TrainConfig:
    kind: str = "lowrank_regression"
    dims: list = field(default_factory=lambda: [16, 16, 1])
    task_seed: int = 0
    noise_std: float = 0.0
    teacher_rank: int = 2
    n_train: int = 512
    n_eval: int = 256
    notation: str = "4-8-8"
    adapter_bits: int = None
    group_size: int = 8
    rank: int = 4
    identity: bool = False
    lr: float = 1e-2
    steps: int = 500
    batch: int = 32
    seed: int = 0
    weight_decay: float = 0.0
    warmup_steps: int = 0
    loss_scale: float = DEFAULT_LOSS_SCALE
    checkpoint: bool = False
    out_dir: str = "results/train"
    excel: bool = False


@dataclass(frozen=True)
class SweepConfig:
    kind: str = "lowrank_regression"
    dims: list = field(default_factory=lambda: [16, 16, 1])
    task_seed: int = 0
    noise_std: float = 0.0
    teacher_rank: int = 2
    bits: list = field(default_factory=lambda: [5, 6, 8])
    ranks: list = field(default_factory=lambda: [2, 4, 8, 16])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    group_sizes: list = field(default_factory=lambda: [8])
    lr: float = 1e-2
    steps: int = 300
    batch: int = 32
    workers: int = None
    out_dir: str = "results/sweep"
    excel: bool = False


@dataclass(frozen=True)
class GradcheckConfig:
    in_features: int = 8
    out_features: int = 8
    rank: int = 4
    batch: int = 4
    notation: str = "4-8-8"
    group_size: int = 8
    mode: str = "identity"
    eps: float = 1e-4
    seed: int = 0
    b_std: float = 0.1
    tolerance: float = None
    out_dir: str = "results/gradcheck"


@dataclass(frozen=True)
class MemConfig:
    model: object = "llama2-7b"
    configs: list = field(default_factory=lambda: ["4-16-16", "4-8-8", "4-6-6", "4-5-5"])
    baseline: str = "4-16-16"
    rank: int = 64
    group_size: int = 32
    batch: int = 2
    seq_tokens: int = 2048
    out_dir: str = "results/mem"
    excel: bool = False


def _type_ok(expected, value):
    if expected is bool:
        return isinstance(value, bool)
    if expected is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if expected is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, expected)


def check_config_types(cls, data):
    """
    Check every value against its config field type.

    None is accepted only where the default is None. List entries must match the type of
    the default's first entry.

    Raises:
        ConfigError: On the first value of the wrong type
    """
    for f in fields(cls):
        if f.name not in data or f.type is object:
            continue
        value = data[f.name]
        default = f.default if f.default is not MISSING else f.default_factory()
        if value is None:
            if default is not None:
                raise ConfigError(f"'{f.name}' must not be null")
            continue
        if not _type_ok(f.type, value):
            raise ConfigError(f"'{f.name}' must be {f.type.__name__}, got {type(value).__name__} {value!r}")
        if f.type is list and default:
            entry_type = float if isinstance(default[0], float) else type(default[0])
            bad = [v for v in value if not _type_ok(entry_type, v)]
            if bad:
                raise ConfigError(f"'{f.name}' entries must be {entry_type.__name__}, got {bad[0]!r}")


def load_config(cls, path=None, sets=(), flags=None):
    """
    Build a command config: JSON file first, then --set key=value pairs, then dedicated flags.

    Raises:
        ConfigError: On unreadable files, malformed pairs, unknown keys or bad values
    """
    data = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as handle:
                data = json.load(handle)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    for item in sets:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got '{item}'")
        try:
            data[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            data[key.strip()] = raw
    data.update(flags or {})
    unknown = sorted(set(data) - {f.name for f in fields(cls)})
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; known: {[f.name for f in fields(cls)]}")
    check_config_types(cls, data)
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def resolve_workers(configured):
    """Worker count from the config, else the GSQ_WORKERS environment variable, else 1."""
    if configured is None:
        raw = os.environ.get(WORKERS_ENV, "1")
        try:
            configured = int(raw)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got '{raw}'") from None
    if configured < 1:
        raise ConfigError(f"workers must be >= 1, got {configured}")
    return configured


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

_TENSOR_KEYS = {"name", "kind", "shape", "seed", "std", "local_std", "spread_bits", "path"}


def build_tensor(source, group_size):
    """Materialize one tensor entry of a formats-compare config."""
    unknown = set(source) - _TENSOR_KEYS
    if unknown:
        raise ConfigError(f"unknown tensor keys {sorted(unknown)}")
    kind = source.get("kind", "gaussian")
    if kind == "file":
        if not isinstance(source.get("path"), str):
            raise ConfigError("a file tensor needs a 'path'")
        return load_tensor(source["path"])
    shape = tuple(int(d) for d in source.get("shape", [64, 256]))
    rng = np.random.default_rng(source.get("seed", 0))
    if kind == "gaussian":
        return rng.normal(0.0, source.get("std", 1.0), size=shape)
    if kind == "locality":
        return locality_tensor(shape, group_size, rng, source.get("local_std", 0.05), source.get("spread_bits", 6.0))
    if kind == "zeros":
        return np.zeros(shape)
    raise ConfigError(f"tensor kind must be gaussian, locality, zeros or file, got '{kind}'")


def _layout_summary(layout):
    fields_ = layout["fields"]
    if len(fields_) > 4:
        fields_ = fields_[:3] + [("...", None)]
    return {**layout, "fields": [list(f) for f in fields_]}


def cmd_formats_compare(cfg):
    tensors = {}
    for index, source in enumerate(cfg.tensors):
        tensors[source.get("name", f"tensor{index}")] = build_tensor(source, cfg.group_size)
    table = format_comparison(tensors, cfg.gse_bits, cfg.group_size, cfg.fp_formats, cfg.fp_scaling)

    ablations = [
        group_size_ablation(t, cfg.group_sizes, cfg.ablation_bits).assign(tensor=name)
        for name, t in tensors.items() if np.any(t)
    ]
    ablation = pd.concat(ablations, ignore_index=True) if ablations else pd.DataFrame(
        columns=["group_size", "bits", "bits_per_element", "sqnr_db", "tensor"])
    locality = {name: locality_stats(t, cfg.group_size, cfg.locality_threshold).to_dict()
                for name, t in tensors.items() if t.size >= 2}
    layouts = [_layout_summary(bit_layout(GseSpec(b, cfg.group_size))) for b in cfg.gse_bits]
    layouts += [_layout_summary(bit_layout(FP_FORMATS[name])) for name in cfg.fp_formats]

    out = cfg.out_dir
    write_csv(os.path.join(out, "formats.csv"), table)
    write_csv(os.path.join(out, "group_ablation.csv"), ablation)
    write_series(os.path.join(out, "plot_sqnr.csv"), table["format"], table["sqnr_db"], table["tensor"])
    write_json(os.path.join(out, "formats.json"), {
        "config": asdict(cfg),
        "rows": table.to_dict(orient="records"),
        "group_ablation": ablation.to_dict(orient="records"),
        "locality": locality,
        "layouts": layouts,
        "degenerate_tensors": sorted(set(table.loc[table["degenerate"], "tensor"])),
    })
    if cfg.excel:
        write_workbook(os.path.join(out, "formats.xlsx"),
                       {"Formats": table, "Group Ablation": ablation},
                       lambda image: plot_format_sqnr(table, image),
                       {"sqnr_db": "0.00", "max_abs_error": "0.000E+00", "mean_abs_error": "0.000E+00"})

    for name in tensors:
        rows = table[table["tensor"] == name]
        best = rows.loc[rows["sqnr_db"].idxmax()] if rows["sqnr_db"].notna().any() else rows.iloc[0]
        print(f"{name}: best format {best['format']} ({best['sqnr_db']:.2f} dB)")
    print(f"Results saved to {out}")
    return EXIT_OK


def _half_ulp_bound(t):
    """Per-element half step 2^(e-1) of each element's group, in matrix layout."""
    bound = np.repeat(np.ldexp(1.0, t.exponents.astype(np.int32) - 1), t.spec.group_size, axis=1)
    bound = bound[:, :t.reduction_dim]
    return bound if t.group_axis == GroupAxis.ALONG_ROWS else bound.T


def cmd_quantize(cfg):
    x = load_tensor(cfg.input)
    if x.ndim != 2:
        raise ShapeError(f"quantize needs a 2-D tensor to pick a reduction axis, got {x.ndim}-D")
    spec = GseSpec(cfg.bits, cfg.group_size, cfg.exponent_bias)
    t = quantize_matrix(x, cfg.axis, spec)
    save_gse(cfg.output, t)

    error = np.abs(dequantize_matrix(t) - x)
    stats = {
        "config": asdict(cfg),
        "rows": t.rows,
        "cols": t.cols,
        "pad_len": t.pad_len,
        "groups": int(t.exponents.size),
        "saturated_groups": int(t.saturated.sum()),
        "max_abs_error": float(error.max()) if error.size else 0.0,
        "mean_abs_error": float(error.mean()) if error.size else 0.0,
        "half_ulp_violations": int(np.sum(error > _half_ulp_bound(t))),
        "bits_per_element": spec.group_bits / spec.group_size,
    }
    write_json(cfg.stats_path or cfg.output + ".stats.json", stats)
    print(f"Quantized {x.shape[0]}x{x.shape[1]} to {spec.name} (N={spec.group_size}, pad {t.pad_len}): "
          f"max error {stats['max_abs_error']:.3g}, mean error {stats['mean_abs_error']:.3g}")
    print(f"Results saved to {cfg.output}")
    return EXIT_OK


def cmd_dequantize(cfg):
    t = load_gse(cfg.input)
    save_tensor(cfg.output, dequantize_matrix(t), dtype_tag=0 if cfg.dtype == "fp32" else 1)
    print(f"Dequantized {t.spec.name} {t.rows}x{t.cols} tensor to {cfg.output}")
    return EXIT_OK


def _quant_config(notation, group_size, rank, adapter_bits=None, identity=False):
    return QuantConfig.from_notation(notation, group_size, rank, adapter_bits, True if identity else None)


def cmd_train(cfg):
    qcfg = _quant_config(cfg.notation, cfg.group_size, cfg.rank, cfg.adapter_bits, cfg.identity)
    task = make_task(cfg.kind, cfg.dims, cfg.task_seed, cfg.noise_std, cfg.teacher_rank, cfg.n_train, cfg.n_eval)
    run = train(task, qcfg, cfg.lr, cfg.steps, cfg.seed, batch=cfg.batch, weight_decay=cfg.weight_decay,
                warmup_steps=cfg.warmup_steps, loss_scale=cfg.loss_scale)

    out = cfg.out_dir
    metrics = pd.DataFrame({
        "step": range(len(run.metrics)),
        "loss": [m.loss for m in run.metrics],
        "grad_norm": [m.grad_norm for m in run.metrics],
    })
    write_csv(os.path.join(out, "metrics.csv"), metrics)
    write_series(os.path.join(out, "plot_loss.csv"), metrics["step"], metrics["loss"], [qcfg.notation] * len(metrics))
    write_json(os.path.join(out, "run.json"), {"config": asdict(cfg), "run": run.to_dict()})
    if cfg.checkpoint and not run.failed:
        for index, layer in enumerate(run.layers):
            save_layer(os.path.join(out, f"layer{index}.gsql"), layer, qcfg)
    if cfg.excel and len(metrics):
        write_workbook(os.path.join(out, "train.xlsx"), {"Metrics": metrics},
                       lambda image: plot_training_curve(metrics, image, f"Training Loss ({qcfg.notation})"))

    if run.failed:
        print(f"Run failed: {run.failure_reason}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"{qcfg.notation} r={qcfg.rank}: eval loss {run.initial_eval:.6g} -> {run.final_eval:.6g}")
    print(f"Results saved to {out}")
    return EXIT_OK


def cmd_sweep(cfg):
    workers = resolve_workers(cfg.workers)
    task = make_task(cfg.kind, cfg.dims, cfg.task_seed, cfg.noise_std, cfg.teacher_rank)
    grid = [(b, r, g) for b in cfg.bits for r in cfg.ranks for g in cfg.group_sizes]
    result = pareto_sweep(grid, task, cfg.seeds, cfg.lr, cfg.steps, cfg.batch, workers=workers)

    out = cfg.out_dir
    points = pd.DataFrame([asdict(p) for p in result.points],
                          columns=["bits", "rank", "metric", "memory_bytes", "dominated",
                                   "group_size", "n_seeds", "metric_sem"])
    gains = rank_gain_by_bits(result.runs)
    write_csv(os.path.join(out, "sweep.csv"), result.runs)
    write_series(os.path.join(out, "plot_pareto.csv"), points["memory_bytes"], points["metric"],
                 [f"bits={b}" for b in points["bits"]])
    write_json(os.path.join(out, "pareto.json"), {
        "config": asdict(cfg),
        "metric": "final eval loss (lower is better)",
        "points": points.to_dict(orient="records"),
        "excluded": result.excluded,
        "seed_summary": seed_summary(result.runs).to_dict(orient="records") if len(result.runs) else [],
        "rank_gain_by_bits": gains.to_dict(orient="records"),
        "group_sizes": group_size_table(result.runs).to_dict(orient="records") if len(result.runs) else [],
    })
    if cfg.excel and len(points):
        write_workbook(os.path.join(out, "sweep.xlsx"),
                       {"Runs": result.runs, "Points": points, "Rank Gain": gains},
                       lambda image: plot_pareto(points, image), {"memory_bytes": "#,##0"})

    for reason in result.excluded:
        print(f"Excluded bits={reason['bits']} rank={reason['rank']} group={reason['group']} "
              f"seed={reason['seed']}: {reason['reason']}")
    if result.runs.empty:
        print("Every run failed", file=sys.stderr)
        return EXIT_RUNTIME
    frontier = [f"(b={p.bits}, r={p.rank}, N={p.group_size})" for p in result.points if not p.dominated]
    print(f"{len(result.runs)} runs, Pareto frontier: {', '.join(frontier)}")
    print(f"Results saved to {out}")
    return EXIT_OK


def cmd_gradcheck(cfg):
    qcfg = _quant_config(cfg.notation, cfg.group_size, cfg.rank)
    rng = np.random.default_rng(cfg.seed)
    w = rng.normal(0.0, 1.0 / np.sqrt(cfg.in_features), size=(cfg.out_features, cfg.in_features))
    layer = LoraLinear.from_dense(w, cfg.rank, rng, name="gradcheck")
    layer.b = rng.normal(0.0, cfg.b_std, size=layer.b.shape)
    x = rng.normal(size=(cfg.batch, cfg.in_features))
    target = rng.normal(size=(cfg.batch, cfg.out_features))
    report = grad_check(layer, x, target, qcfg, cfg.mode, cfg.eps)

    tolerance = cfg.tolerance if cfg.tolerance is not None else (1e-5 if cfg.mode == "identity" else None)
    passed = tolerance is None or report.max_rel_error <= tolerance
    write_json(os.path.join(cfg.out_dir, "gradcheck.json"),
               {"config": asdict(cfg), "report": report.to_dict(), "tolerance": tolerance, "passed": passed})
    print(f"{cfg.mode} gradient check: max rel error {report.max_rel_error:.3g}, "
          f"mean {report.mean_rel_error:.3g} over {report.n_checked} entries")
    if not passed:
        print(f"Max relative error exceeds tolerance {tolerance}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _element_ratio(cfg):
    if cfg.act_bits == UNQUANTIZED_BITS:
        return 1.0
    spec = GseSpec(cfg.act_bits, cfg.group_size)
    return UNQUANTIZED_BITS * spec.group_size / spec.group_bits


def cmd_mem(cfg):
    notations = list(cfg.configs)
    if cfg.baseline not in notations:
        notations.insert(0, cfg.baseline)
    rows, formulas = [], {}
    for notation in notations:
        qcfg = _quant_config(notation, cfg.group_size, cfg.rank)
        estimate = memory_estimate(cfg.model, qcfg, cfg.batch, cfg.seq_tokens)
        formulas = estimate.formulas
        row = {"notation": notation, "rank": cfg.rank, "group_size": cfg.group_size}
        row.update({k: v for k, v in estimate.to_dict().items() if k != "formulas"})
        row["total_gib"] = estimate.total_bytes / 2 ** 30
        row["activation_ratio_vs_16bit"] = _element_ratio(qcfg)
        rows.append(row)
    table = pd.DataFrame(rows)
    baseline_total = table.loc[table["notation"] == cfg.baseline, "total_bytes"].iloc[0]
    table["saving_vs_baseline"] = baseline_total / table["total_bytes"]

    out = cfg.out_dir
    parts = ["frozen_weights_bytes", "adapter_bytes", "activation_bytes", "gradient_bytes", "optimizer_bytes"]
    long = table.melt(id_vars="notation", value_vars=parts)
    write_csv(os.path.join(out, "memory.csv"), table)
    write_series(os.path.join(out, "plot_memory.csv"), long["notation"], long["value"], long["variable"])
    write_json(os.path.join(out, "memory.json"),
               {"config": asdict(cfg), "rows": table.to_dict(orient="records"), "formulas": formulas})
    if cfg.excel:
        write_workbook(os.path.join(out, "memory.xlsx"), {"Memory": table},
                       lambda image: plot_memory_breakdown(table, image),
                       {p: "#,##0" for p in parts + ["total_bytes"]})

    for row in table.itertuples():
        print(f"{row.notation}: {row.total_gib:.2f} GiB ({row.saving_vs_baseline:.2f}x smaller than {cfg.baseline})")
    for name, formula in formulas.items():
        print(f"  {name} = {formula}")
    print(f"Results saved to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


COMMANDS = {
    "formats-compare": (FormatsCompareConfig, cmd_formats_compare, "Compare GSE-INT and low-bit float formats"),
    "quantize": (QuantizeConfig, cmd_quantize, "Quantize a GSQT tensor file to a packed GSEB file"),
    "dequantize": (DequantizeConfig, cmd_dequantize, "Dequantize a GSEB file back to a GSQT tensor"),
    "train": (TrainConfig, cmd_train, "Train LoRA adapters on a synthetic task"),
    "sweep": (SweepConfig, cmd_sweep, "Sweep bits x rank x group size and build the memory/loss Pareto set"),
    "gradcheck": (GradcheckConfig, cmd_gradcheck, "Finite-difference check of the quantized backward"),
    "mem": (MemConfig, cmd_mem, "Fine-tuning memory report for W-A-G configs"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one config key (value parsed as JSON)")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")

    parser = _Parser(prog="gsq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, _, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name in ("quantize", "dequantize"):
            p.add_argument("input", nargs="?", help="Input file")
            p.add_argument("output", nargs="?", help="Output file")
        else:
            p.add_argument("--out", dest="out_dir", help="Output directory")
        if name == "quantize":
            p.add_argument("--bits", type=int, help="GSE total bits (5-8)")
            p.add_argument("--group-size", dest="group_size", type=int, help="Group size N")
            p.add_argument("--axis", choices=[a.value for a in GroupAxis], help="Grouping axis")
        if name == "dequantize":
            p.add_argument("--dtype", choices=["fp32", "fp64"], help="Output element type")
        if name in ("formats-compare", "train", "sweep", "mem"):
            p.add_argument("--excel", action="store_true", default=None, help="Also write an Excel workbook with a chart")
    return parser


_FLAG_KEYS = ("input", "output", "out_dir", "bits", "group_size", "axis", "dtype", "excel")


def configure_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None):
    """
    Run one subcommand.

    Returns:
        Exit code: 0 success, 1 usage or config error, 2 runtime failure
    """
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    config_cls, handler, _ = COMMANDS[args.command]
    flags = {key: getattr(args, key) for key in _FLAG_KEYS if getattr(args, key, None) is not None}
    try:
        cfg = load_config(config_cls, args.config, args.set, flags)
        return handler(cfg)
    except ConfigError as exc:
        logger.error("%s", exc)
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GsqError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
