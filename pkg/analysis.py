"""Quantization error analysis, memory model, bits x rank Pareto sweeps and gradient checks."""

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd

from errors import ConfigError, FormatError, ShapeError
from formats import (
    DQ_CHUNK_BLOCKS,
    FP_FORMATS,
    GSE_EXPONENT_BITS,
    NF4_BLOCK_SIZE,
    GseSpec,
    fp_quantize_tensor,
)
from fq_autograd import UNQUANTIZED_BITS, QuantConfig, backward, forward, identity_quantizer_mode
from gse_kernels import GroupAxis, dequantize_matrix, quantize_matrix
from trainer import loss_and_grad, train

logger = logging.getLogger(__name__)

# Sample-std threshold on weight locality: 2^-2
DEFAULT_LOCALITY_THRESHOLD = 0.25

# LLaMA2-7B linear layers per decoder block (out, in), repeated over 32 blocks
_LLAMA2_7B_BLOCK = [(4096, 4096)] * 4 + [(11008, 4096)] * 2 + [(4096, 11008)]
MODEL_PRESETS = {
    "llama2-7b": _LLAMA2_7B_BLOCK * 32,
    "toy": [(16, 16)],
}

SWEEP_COLUMNS = ["bits", "rank", "group", "seed", "final_loss", "memory_bytes", "dominated", "wall_ms"]


# --------------------------------------------------------------------------
# Error statistics
# --------------------------------------------------------------------------

def sqnr(original, reconstructed):
    """
    Signal-to-quantization-noise ratio in dB: 10 log10(sum x^2 / sum (x - x_hat)^2).

    Returns:
        SQNR in dB, or math.inf when the reconstruction is exact

    Raises:
        ShapeError: On different shapes
        FormatError: If the original is all zero
    """
    x = np.asarray(original, dtype=np.float64)
    x_hat = np.asarray(reconstructed, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"shapes differ: {x.shape} vs {x_hat.shape}")
    signal = float(np.sum(x * x))
    if signal == 0.0:
        raise FormatError("SQNR is undefined for an all-zero original")
    noise = float(np.sum((x - x_hat) ** 2))
    if noise == 0.0:
        return math.inf
    return 10.0 * math.log10(signal / noise)


def gse_roundtrip(tensor, spec):
    """Quantize-dequantize a tensor through GSE, grouping along its last axis."""
    x = np.asarray(tensor, dtype=np.float64)
    lines = x.reshape(1, -1) if x.ndim < 2 else x.reshape(-1, x.shape[-1])
    return dequantize_matrix(quantize_matrix(lines, GroupAxis.ALONG_ROWS, spec)).reshape(x.shape)


@dataclass
class LocalityReport:
    per_group_std: np.ndarray
    fraction_below_threshold: float
    threshold: float

    def to_dict(self):
        return {
            "groups": int(len(self.per_group_std)),
            "fraction_below_threshold": self.fraction_below_threshold,
            "threshold": self.threshold,
            "max_std": float(self.per_group_std.max()) if len(self.per_group_std) else 0.0,
            "mean_std": float(self.per_group_std.mean()) if len(self.per_group_std) else 0.0,
        }


def locality_stats(tensor, group, threshold=DEFAULT_LOCALITY_THRESHOLD):
    """
    Sample standard deviation of every contiguous length-N slice of a tensor.

    The tensor is read in row-major order; a trailing partial slice counts when it has at
    least two elements.

    Args:
        tensor: Real array
        group: Slice length N (>= 2)
        threshold: Std threshold for the "local" fraction

    Returns:
        LocalityReport

    Raises:
        FormatError: If group < 2
    """
    if group < 2:
        raise FormatError(f"group must be >= 2, got {group}")
    flat = np.asarray(tensor, dtype=np.float64).ravel()
    n_full = flat.size // group
    stds = list(flat[:n_full * group].reshape(n_full, group).std(axis=1, ddof=1)) if n_full else []
    tail = flat[n_full * group:]
    if tail.size >= 2:
        stds.append(float(tail.std(ddof=1)))
    stds = np.array(stds)
    fraction = float(np.mean(stds < threshold)) if stds.size else 0.0
    return LocalityReport(stds, fraction, threshold)


def locality_tensor(shape, group_size, rng, local_std=0.05, spread_bits=6.0):
    """
    Synthetic tensor with low variance inside each group and wide range across groups.

    Every contiguous group of group_size elements shares a magnitude 2^u, u uniform in
    [-spread_bits, 0], with relative jitter local_std and random signs.
    """
    n = int(np.prod(shape))
    n_groups = -(-n // group_size)
    magnitudes = np.repeat(2.0 ** rng.uniform(-spread_bits, 0.0, size=n_groups), group_size)[:n]
    signs = rng.choice([-1.0, 1.0], size=n)
    values = signs * magnitudes * (1.0 + local_std * rng.normal(size=n))
    return values.reshape(shape)


def _error_row(name, fmt_name, bits_per_element, original, reconstructed):
    error = np.abs(np.asarray(original) - reconstructed)
    exact = bool(np.all(error == 0.0))
    try:
        value = sqnr(original, reconstructed)
        degenerate = False
    except FormatError:
        value, degenerate = (math.inf if exact else math.nan), True
    return {
        "tensor": name,
        "format": fmt_name,
        "bits_per_element": bits_per_element,
        "sqnr_db": value,
        "max_abs_error": float(error.max()) if error.size else 0.0,
        "mean_abs_error": float(error.mean()) if error.size else 0.0,
        "exact": exact,
        "degenerate": degenerate,
    }


def format_comparison(tensors, gse_bits=(5, 6, 7, 8), group_size=32, fp_formats=None, fp_scaling="tensor"):
    """
    SQNR and error table of GSE-INT{b} against low-bit float formats.

    Args:
        tensors: Dict of name -> real array
        gse_bits: GSE total bit widths to include
        group_size: GSE group size N
        fp_formats: Names from formats.FP_FORMATS (default: all)
        fp_scaling: "tensor" (per-tensor power-of-two scale) or "none"

    Returns:
        DataFrame with one row per (tensor, format)
    """
    fp_names = list(FP_FORMATS) if fp_formats is None else list(fp_formats)
    unknown = [name for name in fp_names if name not in FP_FORMATS]
    if unknown:
        raise ConfigError(f"unknown float formats {unknown}; known: {list(FP_FORMATS)}")
    rows = []
    for name, tensor in tensors.items():
        tensor = np.asarray(tensor, dtype=np.float64)
        for bits in gse_bits:
            spec = GseSpec(bits, group_size)
            rows.append(_error_row(name, spec.name, spec.group_bits / spec.group_size,
                                   tensor, gse_roundtrip(tensor, spec)))
        for fp_name in fp_names:
            fmt = FP_FORMATS[fp_name]
            rows.append(_error_row(name, fp_name, float(fmt.total_bits), tensor,
                                   fp_quantize_tensor(tensor, fmt, fp_scaling)))
    return pd.DataFrame(rows)


def group_size_ablation(tensor, group_sizes, bits=6):
    """SQNR of GSE-INT{bits} on one tensor for each group size."""
    rows = []
    for n in group_sizes:
        spec = GseSpec(bits, n)
        reconstructed = gse_roundtrip(tensor, spec)
        rows.append({
            "group_size": n,
            "bits": bits,
            "bits_per_element": spec.group_bits / n,
            "sqnr_db": sqnr(tensor, reconstructed),
        })
    return pd.DataFrame(rows)


# --------------------------------------------------------------------------
# Memory model
# --------------------------------------------------------------------------

@dataclass
class MemoryEstimate:
    frozen_weights_bytes: int
    adapter_bytes: int
    activation_bytes: int
    optimizer_bytes: int
    gradient_bytes: int
    total_bytes: int
    formulas: dict = field(default_factory=dict)
    adapter_payload_bits: int = 0
    adapter_copy_bits: int = 0

    def to_dict(self):
        return asdict(self)


def _lines_bytes(n_lines, line_len, bits, group_size):
    """Storage of n_lines vectors of line_len elements, grouped along each vector."""
    if bits == UNQUANTIZED_BITS:
        return n_lines * line_len * 2
    spec = GseSpec(bits, group_size)
    return n_lines * -(-line_len // group_size) * spec.group_bytes


def _lines_bits(n_lines, line_len, bits, group_size):
    """Bit-exact size of the same lines: payload bits and shared-exponent bits."""
    if bits == UNQUANTIZED_BITS:
        return n_lines * line_len * bits, 0
    groups = n_lines * -(-line_len // group_size)
    return groups * group_size * bits, groups * GSE_EXPONENT_BITS


def resolve_shapes(model):
    """Layer shapes from a preset name or an explicit list of (out, in) pairs."""
    if isinstance(model, str):
        if model not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset '{model}'; known: {list(MODEL_PRESETS)}")
        return MODEL_PRESETS[model]
    shapes = [tuple(int(d) for d in shape) for shape in model]
    if not shapes or any(len(s) != 2 or min(s) < 1 for s in shapes):
        raise ConfigError(f"model layers must be positive (out, in) pairs, got {model}")
    return shapes


def memory_estimate(dims, cfg, batch, seq_tokens):
    """
    Fine-tuning memory of a LoRA model under a quantization config.

    Accounting per linear layer (oc x ic, rank r, group size N, GSE group bytes G(b)):
    frozen NF4 weights at 4 bits plus an 8-bit block scale per 64 weights and an fp32
    scale per 256 blocks; adapters as fp32 masters plus a GSE copy grouped along each row
    of A and column of B; saved layer inputs for every token at act_bits; adapter
    gradients at grad_bits; AdamW moments as two fp32 values per adapter parameter.
    A width of 16 bits is counted as plain 16-bit floats.

    The GSE adapter copy is also reported bit-exact, with no byte rounding, as a payload
    of b bits per stored element (proportional to b*r) plus the 5-bit shared exponents.

    Args:
        dims: Model preset name or list of (out, in) layer shapes
        cfg: QuantConfig (rank, group size and bit widths)
        batch: Sequences per step
        seq_tokens: Tokens per sequence

    Returns:
        MemoryEstimate with the formula used for each part
    """
    if batch < 1 or seq_tokens < 1:
        raise ConfigError("batch and seq_tokens must be positive")
    shapes = resolve_shapes(dims)
    r, n = cfg.rank, cfg.group_size
    tokens = batch * seq_tokens

    frozen = adapter = activation = gradient = optimizer = 0
    payload_bits = exponent_bits = 0
    for oc, ic in shapes:
        weights = oc * ic
        blocks = -(-weights // NF4_BLOCK_SIZE)
        frozen += -(-weights // 2) + blocks + 4 * -(-blocks // DQ_CHUNK_BLOCKS)
        params = r * (ic + oc)
        adapter += 4 * params + _lines_bytes(r, ic, cfg.adapter_bits, n) + _lines_bytes(r, oc, cfg.adapter_bits, n)
        for line_len in (ic, oc):
            payload, exponents = _lines_bits(r, line_len, cfg.adapter_bits, n)
            payload_bits += payload
            exponent_bits += exponents
        activation += _lines_bytes(tokens, ic, cfg.act_bits, n)
        gradient += _lines_bytes(r, ic, cfg.grad_bits, n) + _lines_bytes(r, oc, cfg.grad_bits, n)
        optimizer += 8 * params

    formulas = {
        "frozen_weights_bytes": "sum ceil(oc*ic/2) + ceil(oc*ic/64) + 4*ceil(blocks/256)",
        "adapter_bytes": "sum 4*r*(ic+oc) + r*(ceil(ic/N)+ceil(oc/N))*ceil((N*b_adapter+5)/8)",
        "activation_bytes": "sum batch*seq*ceil(ic/N)*ceil((N*b_act+5)/8)",
        "gradient_bytes": "sum r*(ceil(ic/N)+ceil(oc/N))*ceil((N*b_grad+5)/8)",
        "optimizer_bytes": "sum 2*4*r*(ic+oc)",
        "total_bytes": "frozen + adapter + activation + gradient + optimizer",
        "sixteen_bit_lines": "2 bytes per element when the width is 16",
        "adapter_payload_bits": "sum r*(ceil(ic/N)+ceil(oc/N))*N*b_adapter",
        "adapter_copy_bits": "adapter_payload_bits + sum r*(ceil(ic/N)+ceil(oc/N))*5",
    }
    total = frozen + adapter + activation + gradient + optimizer
    return MemoryEstimate(frozen, adapter, activation, optimizer, gradient, total, formulas,
                          payload_bits, payload_bits + exponent_bits)


# --------------------------------------------------------------------------
# Pareto sweeps
# --------------------------------------------------------------------------

@dataclass
class ParetoPoint:
    bits: int
    rank: int
    metric: float
    memory_bytes: int
    dominated: bool = False
    group_size: int = 32
    n_seeds: int = 0
    metric_sem: float = 0.0


def mark_dominated(points):
    """
    Flag every point beaten by another on (memory, metric): both <= with one strict.

    Returns:
        New list of points with dominated set
    """
    flagged = []
    for p in points:
        dominated = any(
            q.memory_bytes <= p.memory_bytes and q.metric <= p.metric
            and (q.memory_bytes < p.memory_bytes or q.metric < p.metric)
            for q in points if q is not p
        )
        flagged.append(replace(p, dominated=dominated))
    return flagged


@dataclass
class SweepResult:
    points: list
    runs: pd.DataFrame
    excluded: list


def _sweep_job(job):
    task, cfg, lr, steps, batch, seed = job
    run = train(task, cfg, lr, steps, seed, batch=batch)
    return cfg.act_bits, cfg.rank, cfg.group_size, seed, run.final_eval, run.failure_reason, run.wall_time_s


def _grid_points(grid, group_size):
    points = []
    for entry in grid:
        entry = tuple(int(v) for v in entry)
        if len(entry) == 2:
            entry += (int(group_size),)
        if len(entry) != 3:
            raise ConfigError(f"grid entries must be (bits, rank) or (bits, rank, group), got {entry}")
        points.append(entry)
    return points


def pareto_sweep(grid, task, seeds, lr=1e-2, steps=300, batch=32, group_size=8, workers=1):
    """
    Train one run per (bits, rank, group, seed) and build the memory/metric Pareto set.

    Bits b sets activations, gradients and adapters to GSE-INT{b}. The metric is the
    seed-mean final eval loss (lower is better); memory comes from memory_estimate over
    the task's layer shapes for one step's batch.

    Args:
        grid: Iterable of (bits, rank) or (bits, rank, group)
        task: ToyTask
        seeds: Iterable of run seeds
        lr, steps, batch: Training hyperparameters
        group_size: GSE group size N for grid entries without their own
        workers: Parallel processes (results do not depend on this)

    Returns:
        SweepResult with dominance-flagged points, the per-run table and excluded runs
    """
    grid = _grid_points(grid, group_size)
    seeds = [int(s) for s in seeds]
    if not grid or not seeds:
        raise ConfigError("pareto_sweep needs a non-empty grid and at least one seed")
    shapes = [w.shape for w in task.base_weights]
    jobs = []
    for bits, rank, group in grid:
        cfg = QuantConfig(bits, bits, bits, group, rank)
        jobs.extend((task, cfg, lr, steps, batch, seed) for seed in seeds)

    started = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(job) for job in jobs]
    logger.info("sweep of %d runs finished in %.1fs", len(jobs), time.perf_counter() - started)

    records, excluded = [], []
    for bits, rank, group, seed, final, reason, wall in results:
        if final is None:
            logger.warning("excluding bits=%d rank=%d group=%d seed=%d: %s", bits, rank, group, seed, reason)
            excluded.append({"bits": bits, "rank": rank, "group": group, "seed": seed, "reason": reason})
            continue
        memory = memory_estimate(shapes, QuantConfig(bits, bits, bits, group, rank), batch, 1).total_bytes
        records.append({"bits": bits, "rank": rank, "group": group, "seed": seed,
                        "final_loss": final, "memory_bytes": memory, "wall_ms": wall * 1000.0})

    runs = pd.DataFrame(records, columns=[c for c in SWEEP_COLUMNS if c != "dominated"])
    points = []
    for (bits, rank, group), frame in runs.groupby(["bits", "rank", "group"], sort=True):
        sem = float(frame["final_loss"].sem()) if len(frame) > 1 else 0.0
        points.append(ParetoPoint(int(bits), int(rank), float(frame["final_loss"].mean()),
                                  int(frame["memory_bytes"].iloc[0]), False, int(group), len(frame), sem))
    points = mark_dominated(points)

    flags = {(p.bits, p.rank, p.group_size): p.dominated for p in points}
    runs["dominated"] = [flags[key] for key in zip(runs["bits"], runs["rank"], runs["group"])]
    runs = runs[SWEEP_COLUMNS].sort_values(["bits", "rank", "group", "seed"]).reset_index(drop=True)
    return SweepResult(points, runs, excluded)


def _config_keys(runs):
    return ["bits", "rank", "group"] if "group" in runs else ["bits", "rank"]


def seed_summary(runs):
    """Seed mean, standard error and count of final loss per (bits, rank[, group])."""
    summary = runs.groupby(_config_keys(runs))["final_loss"].agg(["mean", "sem", "count"]).reset_index()
    summary["sem"] = summary["sem"].fillna(0.0)
    return summary


def rank_gain_by_bits(runs):
    """
    Paired gain from the smallest to the largest rank, per bit width (and group size).

    For every seed the gain is loss(r_min) - loss(r_max) at the same bits; the table gives
    the mean and standard error over seeds. Smaller gains at high bits mean extra rank
    matters less once quantization error is small.
    """
    keys = [k for k in _config_keys(runs) if k != "rank"]
    rows = []
    for key, frame in runs.groupby(keys, sort=True):
        key = key if isinstance(key, tuple) else (key,)
        ranks = sorted(frame["rank"].unique())
        if len(ranks) < 2:
            continue
        low = frame[frame["rank"] == ranks[0]].set_index("seed")["final_loss"]
        high = frame[frame["rank"] == ranks[-1]].set_index("seed")["final_loss"]
        gains = (low - high).dropna()
        row = {k: int(v) for k, v in zip(keys, key)}
        row.update({
            "rank_low": int(ranks[0]),
            "rank_high": int(ranks[-1]),
            "mean_gain": float(gains.mean()),
            "sem_gain": float(gains.sem()) if len(gains) > 1 else 0.0,
            "n_seeds": int(len(gains)),
        })
        rows.append(row)
    return pd.DataFrame(rows, columns=keys + ["rank_low", "rank_high", "mean_gain", "sem_gain", "n_seeds"])


def group_size_table(runs):
    """
    Seed-mean final loss per group size at each (bits, rank), smallest group first.

    The training-level counterpart of group_size_ablation: with fewer elements sharing
    an exponent the loss should not rise.
    """
    table = seed_summary(runs)
    if "group" not in table:
        return pd.DataFrame(columns=["bits", "rank", "group", "mean", "sem", "count"])
    return table.sort_values(["bits", "rank", "group"]).reset_index(drop=True)


# --------------------------------------------------------------------------
# Gradient check
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    mode: str
    eps: float
    max_rel_error: float
    mean_rel_error: float
    max_rel_error_a: float
    max_rel_error_b: float
    n_checked: int

    def to_dict(self):
        return asdict(self)


def _relative_errors(analytic, numeric):
    floor = 1e-3 * max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))))
    if floor == 0.0:
        return np.zeros(analytic.size)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return (np.abs(analytic - numeric) / denom).ravel()


def grad_check(layer, x, target, cfg, mode="identity", eps=1e-4):
    """
    Compare backward() against central finite differences of the MSE loss.

    The finite differences always use the full-precision forward, so in quantized mode the
    report measures how far the quantized gradients are from the true ones.

    Args:
        layer: LoraLinear (left untouched; a clone is perturbed)
        x: Batch of inputs (b x ic)
        target: Regression targets (b x oc)
        cfg: QuantConfig supplying bit widths
        mode: "identity" or "quantized"
        eps: Finite-difference step in [1e-6, 1e-3]

    Returns:
        GradCheckReport

    Raises:
        ConfigError: On an unknown mode or eps outside its range
        FormatError: If a perturbed loss is not finite
    """
    if mode not in ("identity", "quantized"):
        raise ConfigError(f"mode must be 'identity' or 'quantized', got '{mode}'")
    if not 1e-6 <= eps <= 1e-3:
        raise ConfigError(f"eps must be in [1e-6, 1e-3], got {eps}")
    exact_cfg = identity_quantizer_mode(cfg)
    run_cfg = exact_cfg if mode == "identity" else cfg
    probe = layer.clone()
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)

    outputs = forward(x, probe, run_cfg)
    _, d_y = loss_and_grad(outputs, target, "lowrank_regression")
    bundle = backward(d_y, probe, run_cfg)

    def loss_at():
        value, _ = loss_and_grad(forward(x, probe, exact_cfg), target, "lowrank_regression")
        if not math.isfinite(value):
            raise FormatError("non-finite loss under finite-difference perturbation")
        return value

    numeric = {}
    for name in ("a", "b"):
        param = getattr(probe, name)
        grad = np.zeros_like(param)
        for index in np.ndindex(param.shape):
            saved = param[index]
            param[index] = saved + eps
            plus = loss_at()
            param[index] = saved - eps
            minus = loss_at()
            param[index] = saved
            grad[index] = (plus - minus) / (2.0 * eps)
        numeric[name] = grad

    errors_a = _relative_errors(bundle.d_a, numeric["a"])
    errors_b = _relative_errors(bundle.d_b, numeric["b"])
    errors = np.concatenate([errors_a, errors_b])
    report = GradCheckReport(mode, eps, float(errors.max()), float(errors.mean()),
                             float(errors_a.max()), float(errors_b.max()), int(errors.size))
    logger.info("grad check (%s): max rel error %.3g over %d entries", mode, report.max_rel_error, report.n_checked)
    return report
