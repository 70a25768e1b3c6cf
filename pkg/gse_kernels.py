"""GSE group transform, dequantization, integer dot product and grouped integer GEMM."""

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from errors import CorruptDataError, FormatError, ShapeError
from formats import GSE_EXPONENT_BITS

logger = logging.getLogger(__name__)

# Width of the integer register used for within-group sums
ACCUMULATOR_BITS = 64


class GroupAxis(str, Enum):
    """Which way a matrix is cut into groups."""

    ALONG_ROWS = "along_rows"  # each row is grouped; the reduction dim is the column index
    ALONG_COLS = "along_cols"  # each column is grouped; the reduction dim is the row index


@dataclass(frozen=True, eq=False)
class GseGroup:
    """
    One GSE group. Element i represents mantissas[i] * 2**shared_exponent.

    shared_exponent is the unbiased exponent of the quantization step; the stored
    5-bit field is shared_exponent + spec.exponent_bias.
    """

    shared_exponent: int
    mantissas: np.ndarray
    spec: object
    saturated: bool = False
    clamped: np.ndarray = None


@dataclass(frozen=True, eq=False)
class GseTensor:
    """
    A matrix in GSE format, grouped along its reduction dimension.

    exponents has shape (outer, n_groups) and mantissas (outer, n_groups, N), where
    outer is rows for ALONG_ROWS and cols for ALONG_COLS. The last pad_len slots of
    every reduction line are zero padding.
    """

    rows: int
    cols: int
    group_axis: GroupAxis
    spec: object
    exponents: np.ndarray
    mantissas: np.ndarray
    pad_len: int
    saturated: np.ndarray

    @property
    def reduction_dim(self):
        return self.cols if self.group_axis == GroupAxis.ALONG_ROWS else self.rows

    @property
    def outer_dim(self):
        return self.rows if self.group_axis == GroupAxis.ALONG_ROWS else self.cols

    @property
    def n_groups(self):
        return self.exponents.shape[1]

    def group(self, line, index):
        """Return group `index` of reduction line `line` as a GseGroup."""
        return GseGroup(
            int(self.exponents[line, index]),
            self.mantissas[line, index].copy(),
            self.spec,
            bool(self.saturated[line, index]),
        )

    def line_groups(self, line):
        """All groups of one row (ALONG_ROWS) or column (ALONG_COLS), in reduction order."""
        return [self.group(line, g) for g in range(self.n_groups)]


def minimum_accumulator_bits(spec_a, spec_b):
    """Bits that hold any within-group sum: N (2^Ma - 1)(2^Mb - 1) plus a sign bit."""
    if spec_a.group_size != spec_b.group_size:
        raise FormatError(
            f"spec mismatch: group sizes {spec_a.group_size} and {spec_b.group_size}"
        )
    n_bits = math.ceil(math.log2(spec_a.group_size)) if spec_a.group_size > 1 else 0
    return spec_a.mantissa_bits + spec_b.mantissa_bits + n_bits + 1


def _quantize_lines(values, spec):
    """Vectorized FP -> GSE transform over the last axis (length N)."""
    amax = np.abs(values).max(axis=-1)
    _, k = np.frexp(amax)
    # Put the largest element in [2^(M-1), 2^M): step = 2^(e_max - (M - 1))
    e_shift = (k.astype(np.int64) - 1) - (spec.mantissa_bits - 1)
    e_shift = np.where(amax > 0.0, e_shift, spec.min_exponent)
    saturated = e_shift > spec.max_exponent
    e_shift = np.clip(e_shift, spec.min_exponent, spec.max_exponent).astype(np.int64)
    rounded = np.round(np.ldexp(values, -e_shift[..., None].astype(np.int32)))
    limit = spec.max_mantissa
    clamped = np.abs(rounded) > limit
    mantissas = np.clip(rounded, -limit, limit).astype(np.int64)
    return e_shift, mantissas, saturated, clamped


def _dequantize_lines(exponents, mantissas):
    return np.ldexp(mantissas.astype(np.float64), exponents[..., None].astype(np.int32))


def gse_quantize_group(values, spec):
    """
    Transform N reals into one GSE group.

    The group's largest magnitude fixes the shared exponent so that its mantissa lands in
    the top binade of the M-bit range; every element is then rounded half-to-even onto
    that step. A rounding carry to 2^M is clamped to 2^M - 1.

    Args:
        values: N finite reals
        spec: GseSpec

    Returns:
        GseGroup; saturated is set when the exponent would exceed the 5-bit range

    Raises:
        ShapeError: If len(values) != N
        FormatError: On non-finite input
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (spec.group_size,):
        raise ShapeError(f"group needs {spec.group_size} values, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise FormatError("GSE input must be finite")
    e_shift, mantissas, saturated, clamped = _quantize_lines(values[None, :], spec)
    if saturated[0]:
        logger.warning("GSE exponent saturated (group max %.6g)", np.abs(values).max())
    return GseGroup(int(e_shift[0]), mantissas[0], spec, bool(saturated[0]), clamped[0])


def gse_dequantize_group(group):
    """Return the exact real values of a group: mantissas * 2**shared_exponent."""
    return np.ldexp(np.asarray(group.mantissas, dtype=np.float64), group.shared_exponent)


class Accumulator:
    """
    Exact integer multiply-accumulate inside each group, FP64 sum across groups.

    Groups must be added in ascending index order; the real-valued total then matches
    gse_gemm bit for bit.
    """

    def __init__(self, spec_a, spec_b):
        self.width = minimum_accumulator_bits(spec_a, spec_b)
        if self.width > ACCUMULATOR_BITS:
            raise FormatError(f"group too large: needs a {self.width}-bit accumulator")
        self.partial_sums = []
        self.total = 0.0

    def add_group(self, group_a, group_b):
        partial = int(np.dot(group_a.mantissas.astype(np.int64), group_b.mantissas.astype(np.int64)))
        self.partial_sums.append(partial)
        self.total += math.ldexp(float(partial), group_a.shared_exponent + group_b.shared_exponent)
        return partial


def gse_dot(a, b):
    """
    Dot product of two GSE vectors given as aligned group sequences.

    Args:
        a: Sequence of GseGroup
        b: Sequence of GseGroup with the same count and group size

    Returns:
        Sum over groups of 2^(e_a + e_b) * sum_i m_a,i * m_b,i

    Raises:
        ShapeError: If the group counts differ
        FormatError: If the group sizes differ
    """
    a, b = list(a), list(b)
    if len(a) != len(b):
        raise ShapeError(f"group count mismatch: {len(a)} vs {len(b)}")
    if not a:
        return 0.0
    acc = Accumulator(a[0].spec, b[0].spec)
    for group_a, group_b in zip(a, b):
        if group_a.spec.group_size != group_b.spec.group_size:
            raise FormatError("spec mismatch between paired groups")
        acc.add_group(group_a, group_b)
    return acc.total


def quantize_matrix(m, axis, spec):
    """
    Quantize a matrix to GSE, grouping along the reduction axis and zero-padding it to N.

    Args:
        m: 2-D finite real matrix
        axis: GroupAxis (or its string value)
        spec: GseSpec

    Returns:
        GseTensor

    Raises:
        ShapeError: If m is not 2-D
        FormatError: On non-finite input
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"quantize_matrix needs a 2-D matrix, got {m.ndim}-D")
    if not np.all(np.isfinite(m)):
        raise FormatError("GSE input must be finite")
    axis = GroupAxis(axis)
    lines = m if axis == GroupAxis.ALONG_ROWS else m.T
    outer, k = lines.shape
    n = spec.group_size
    pad_len = (-k) % n
    padded = np.zeros((outer, k + pad_len))
    padded[:, :k] = lines
    exponents, mantissas, saturated, _ = _quantize_lines(padded.reshape(outer, -1, n), spec)
    if saturated.any():
        logger.warning("%d GSE group(s) saturated the 5-bit exponent", int(saturated.sum()))
    return GseTensor(m.shape[0], m.shape[1], axis, spec, exponents, mantissas, pad_len, saturated)


def dequantize_matrix(t):
    """Return the real matrix a GseTensor represents (padding removed)."""
    values = _dequantize_lines(t.exponents, t.mantissas).reshape(t.outer_dim, -1)
    values = values[:, :t.reduction_dim]
    return values if t.group_axis == GroupAxis.ALONG_ROWS else values.T


def gse_gemm(x, wt):
    """
    Grouped integer GEMM: X [B x K] grouped along rows times Wt [K x O] grouped along columns.

    Per output element the integer partial sums of every group pair are scaled by
    2^(e_x + e_w) and added in ascending group order, so results do not depend on how
    the output is tiled.

    Args:
        x: GseTensor with group_axis ALONG_ROWS
        wt: GseTensor with group_axis ALONG_COLS

    Returns:
        Real matrix [B x O]

    Raises:
        ShapeError: On wrong grouping or mismatched reduction dims
        FormatError: On mismatched group sizes
    """
    if x.group_axis != GroupAxis.ALONG_ROWS or wt.group_axis != GroupAxis.ALONG_COLS:
        raise ShapeError("gse_gemm needs X grouped along rows and Wt grouped along columns")
    if x.cols != wt.rows:
        raise ShapeError(f"reduction dims differ: X is {x.rows}x{x.cols}, Wt is {wt.rows}x{wt.cols}")
    width = minimum_accumulator_bits(x.spec, wt.spec)
    if width > ACCUMULATOR_BITS:
        raise FormatError(f"group too large: needs a {width}-bit accumulator")

    out = np.zeros((x.rows, wt.cols))
    for g in range(x.n_groups):
        partial = x.mantissas[:, g, :] @ wt.mantissas[:, g, :].T
        exps = x.exponents[:, g, None] + wt.exponents[None, :, g]
        out += np.ldexp(partial.astype(np.float64), exps.astype(np.int32))
    return out


def reference_gemm(x, wt):
    """FP64 product of the dequantized operands; the oracle for gse_gemm."""
    return dequantize_matrix(x) @ dequantize_matrix(wt)


# --------------------------------------------------------------------------
# Packed wire encoding: per group a 5-bit biased exponent, then N sign-magnitude
# mantissas (sign bit, then M magnitude bits), LSB-first; each group starts on a byte.
# --------------------------------------------------------------------------

def _to_bits(values, width):
    shifts = np.arange(width, dtype=np.int64)
    return ((values[..., None].astype(np.int64) >> shifts) & 1).astype(np.uint8)


def _from_bits(bits):
    weights = 1 << np.arange(bits.shape[-1], dtype=np.int64)
    return (bits.astype(np.int64) * weights).sum(axis=-1)


def group_bit_image(exponents, mantissas, spec):
    """
    Bit images of groups before byte alignment.

    Args:
        exponents: Unbiased shared exponents, shape (...)
        mantissas: Signed mantissas, shape (..., N)
        spec: GseSpec

    Returns:
        uint8 array of 0/1, shape (..., N(M+1) + 5)
    """
    exponents = np.asarray(exponents)
    mantissas = np.asarray(mantissas)
    exp_bits = _to_bits(exponents + spec.exponent_bias, GSE_EXPONENT_BITS)
    signs = (mantissas < 0).astype(np.uint8)[..., None]
    magnitudes = _to_bits(np.abs(mantissas), spec.mantissa_bits)
    elements = np.concatenate([signs, magnitudes], axis=-1)
    elements = elements.reshape(mantissas.shape[:-1] + (-1,))
    return np.concatenate([exp_bits, elements], axis=-1)


def pack_groups(exponents, mantissas, spec):
    """Pack groups into bytes, each group padded to a whole number of bytes."""
    bits = group_bit_image(exponents, mantissas, spec).reshape(-1, spec.group_bits)
    aligned = np.zeros((bits.shape[0], spec.group_bytes * 8), dtype=np.uint8)
    aligned[:, :spec.group_bits] = bits
    return np.packbits(aligned, axis=-1, bitorder="little").tobytes()


def pack_gse_tensor(t):
    """Packed payload of every group of a tensor, line by line."""
    return pack_groups(t.exponents, t.mantissas, t.spec)


def unpack_gse_tensor(payload, rows, cols, axis, spec, pad_len):
    """
    Rebuild a GseTensor from its packed payload.

    Raises:
        CorruptDataError: On a payload of the wrong length or non-zero padding mantissas
    """
    axis = GroupAxis(axis)
    outer, k = (rows, cols) if axis == GroupAxis.ALONG_ROWS else (cols, rows)
    n_groups = (k + pad_len) // spec.group_size
    if (k + pad_len) % spec.group_size or pad_len >= spec.group_size:
        raise CorruptDataError(f"pad_len {pad_len} inconsistent with K={k}, N={spec.group_size}")
    expected = outer * n_groups * spec.group_bytes
    if len(payload) != expected:
        raise CorruptDataError(f"packed payload has {len(payload)} bytes, expected {expected}")

    raw = np.frombuffer(payload, dtype=np.uint8).reshape(outer * n_groups, spec.group_bytes)
    bits = np.unpackbits(raw, axis=-1, bitorder="little")[:, :spec.group_bits]
    exponents = _from_bits(bits[:, :GSE_EXPONENT_BITS]) - spec.exponent_bias
    elements = bits[:, GSE_EXPONENT_BITS:].reshape(-1, spec.group_size, spec.mantissa_bits + 1)
    magnitudes = _from_bits(elements[..., 1:])
    mantissas = np.where(elements[..., 0] == 1, -magnitudes, magnitudes)

    exponents = exponents.reshape(outer, n_groups)
    mantissas = mantissas.reshape(outer, n_groups, spec.group_size)
    if pad_len and np.any(mantissas[:, -1, spec.group_size - pad_len:]):
        raise CorruptDataError("padding mantissas must be zero")
    saturated = np.zeros((outer, n_groups), dtype=bool)
    return GseTensor(rows, cols, axis, spec, exponents, mantissas, pad_len, saturated)
