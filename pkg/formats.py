"""Numeric formats: uniform integer quantization, low-bit floats, NF4 and the GSE descriptor."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from errors import CorruptDataError, FormatError

logger = logging.getLogger(__name__)

# The shared exponent of a GSE group always occupies five bits
GSE_EXPONENT_BITS = 5

# 4-bit NormalFloat codebook, produced by generate_nf4_codebook.py
NF4_CODEBOOK = np.array([
    -1.0,
    -0.6961928009986877,
    -0.5250730514526367,
    -0.39491748809814453,
    -0.28444138169288635,
    -0.18477343022823334,
    -0.09105003625154495,
    0.0,
    0.07958029955625534,
    0.16093020141124725,
    0.24611230194568634,
    0.33791524171829224,
    0.44070982933044434,
    0.5626170039176941,
    0.7229568362236023,
    1.0,
])
NF4_CODEBOOK.setflags(write=False)
NF4_ZERO_INDEX = 7
NF4_BLOCK_SIZE = 64

# Double quantization: block scales are 8-bit log codes relative to one scale per chunk
DQ_CHUNK_BLOCKS = 256
SCALE_CODE_LEVELS = 2.0 ** ((np.arange(256) - 255) / 16.0)
SCALE_CODE_LEVELS.setflags(write=False)

FP_SPECIALS = ("ieee", "nan_only", "none")


def _as_finite_array(x, what):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{what} must be finite")
    return arr


# --------------------------------------------------------------------------
# Low-bit floating point
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FpFormat:
    """
    Emulated low-bit floating point format with 1 sign, E exponent and M mantissa bits.

    specials selects how the all-ones exponent field is used:
    "ieee" reserves it for inf/NaN (E5M2), "nan_only" keeps it finite except the
    all-ones mantissa (E4M3), "none" has no special values at all (FP6/FP7).
    """

    exponent_bits: int
    mantissa_bits: int
    bias: int = None
    saturating: bool = True
    specials: str = "ieee"
    name: str = ""

    def __post_init__(self):
        if self.exponent_bits < 2:
            raise FormatError(f"exponent_bits must be >= 2, got {self.exponent_bits}")
        if self.mantissa_bits < 1:
            raise FormatError(f"mantissa_bits must be >= 1, got {self.mantissa_bits}")
        if self.total_bits < 4:
            raise FormatError(f"formats below 4 bits are not supported, got {self.total_bits}")
        if self.specials not in FP_SPECIALS:
            raise FormatError(f"specials must be one of {FP_SPECIALS}, got '{self.specials}'")
        if self.bias is None:
            object.__setattr__(self, "bias", 2 ** (self.exponent_bits - 1) - 1)
        if not self.name:
            object.__setattr__(self, "name", f"E{self.exponent_bits}M{self.mantissa_bits}")

    @property
    def total_bits(self):
        return 1 + self.exponent_bits + self.mantissa_bits

    @property
    def max_finite(self):
        top_field = 2 ** self.exponent_bits - 1
        m = self.mantissa_bits
        if self.specials == "ieee":
            return math.ldexp(2.0 - 2.0 ** -m, top_field - 1 - self.bias)
        if self.specials == "nan_only":
            return math.ldexp(1.0 + (2 ** m - 2) / 2 ** m, top_field - self.bias)
        return math.ldexp(2.0 - 2.0 ** -m, top_field - self.bias)

    @property
    def min_normal(self):
        return math.ldexp(1.0, 1 - self.bias)

    @property
    def min_subnormal(self):
        return math.ldexp(1.0, 1 - self.bias - self.mantissa_bits)


FP8_E4M3 = FpFormat(4, 3, specials="nan_only", name="FP8-E4M3")
FP8_E5M2 = FpFormat(5, 2, specials="ieee", name="FP8-E5M2")
FP7_E3M3 = FpFormat(3, 3, specials="none", name="FP7-E3M3")
FP6_E3M2 = FpFormat(3, 2, specials="none", name="FP6-E3M2")

FP_FORMATS = {fmt.name: fmt for fmt in (FP8_E4M3, FP8_E5M2, FP7_E3M3, FP6_E3M2)}


def fp_grid(fmt):
    """
    Enumerate every finite value of a low-bit float format.

    Args:
        fmt: FpFormat to enumerate

    Returns:
        Sorted 1-D array of unique representable values (both signs, single zero)
    """
    top_field = 2 ** fmt.exponent_bits - 1
    m_count = 2 ** fmt.mantissa_bits
    values = []
    for exp_field in range(top_field + 1):
        for mant in range(m_count):
            if fmt.specials == "ieee" and exp_field == top_field:
                continue
            if fmt.specials == "nan_only" and exp_field == top_field and mant == m_count - 1:
                continue
            if exp_field == 0:
                values.append(math.ldexp(mant, 1 - fmt.bias - fmt.mantissa_bits))
            else:
                values.append(math.ldexp(m_count + mant, exp_field - fmt.bias - fmt.mantissa_bits))
    magnitudes = np.array(values)
    return np.unique(np.concatenate([-magnitudes, magnitudes]))


def fp_encode(v, fmt):
    """
    Snap values to the nearest point of a low-bit float grid (round-half-to-even).

    Args:
        v: Scalar or array of reals
        fmt: Target FpFormat

    Returns:
        Snapped value(s), same shape as the input; a float for scalar input

    Raises:
        FormatError: On NaN input, or on overflow when the format is not saturating
    """
    x = np.asarray(v, dtype=np.float64)
    if np.isnan(x).any():
        raise FormatError(f"cannot encode NaN in {fmt.name}")
    mag = np.abs(x)
    finite = np.isfinite(mag)
    _, k = np.frexp(np.where(finite, mag, 0.0))
    # Subnormals share the step of the smallest normal binade
    step_exp = np.maximum(k - 1, 1 - fmt.bias) - fmt.mantissa_bits
    snapped = np.ldexp(np.round(np.ldexp(np.where(finite, mag, 0.0), -step_exp)), step_exp)
    snapped = np.where(finite, snapped, np.inf)

    overflow = snapped > fmt.max_finite
    if overflow.any():
        if not fmt.saturating:
            worst = float(x.ravel()[np.argmax(np.abs(x).ravel())])
            raise FormatError(f"value {worst} overflows {fmt.name} (max {fmt.max_finite})")
        snapped = np.minimum(snapped, fmt.max_finite)
    result = np.copysign(snapped, x)
    if result.ndim == 0:
        return float(result)
    return result


def fp_quantize_tensor(x, fmt, scaling="none"):
    """
    Round-trip a tensor through a low-bit float format.

    Args:
        x: Real array
        fmt: FpFormat
        scaling: "none", or "tensor" to apply a power-of-two per-tensor scale so that
            the absolute maximum lands inside the format's finite range

    Returns:
        Array of reconstructed values
    """
    x = _as_finite_array(x, "tensor")
    if scaling == "none":
        return fp_encode(x, fmt)
    if scaling != "tensor":
        raise FormatError(f"unknown scaling '{scaling}'")
    amax = float(np.max(np.abs(x))) if x.size else 0.0
    if amax == 0.0:
        return fp_encode(x, fmt)
    shift = math.floor(math.log2(fmt.max_finite / amax))
    return np.ldexp(fp_encode(np.ldexp(x, shift), fmt), -shift)


def fp_storage_bits(n_elements, fmt):
    """Bits needed to store n values in a plain float format: N(E+M+1)."""
    return n_elements * fmt.total_bits


# --------------------------------------------------------------------------
# Uniform integer quantization
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class UniformQuantParams:
    scale: float
    zero_point: int
    bits: int
    q_min: int
    q_max: int


def uniform_quantize(x, bits, zero_point=None):
    """
    Uniformly quantize a tensor to b-bit codes.

    codes = clamp(round(x / s) + z, 0, 2^b - 1) with s = max|x| / (2^(b-1) - 1).
    The default zero point 2^(b-1) centres the symmetric range inside the code domain.

    Args:
        x: Non-empty real array
        bits: Code width in [2, 8]
        zero_point: Optional explicit zero point

    Returns:
        Tuple of (integer codes, UniformQuantParams)

    Raises:
        FormatError: On empty or non-finite input, or bits out of range
    """
    x = _as_finite_array(x, "uniform_quantize input")
    if x.size == 0:
        raise FormatError("uniform_quantize needs a non-empty tensor")
    if not 2 <= bits <= 8:
        raise FormatError(f"bits must be in [2, 8], got {bits}")
    q_min, q_max = 0, 2 ** bits - 1
    z = 2 ** (bits - 1) if zero_point is None else int(zero_point)
    amax = float(np.max(np.abs(x)))
    if amax == 0.0:
        # Degenerate: every code sits on the zero point
        params = UniformQuantParams(1.0, z, bits, q_min, q_max)
        return np.full(x.shape, z, dtype=np.int64), params
    scale = amax / (2 ** (bits - 1) - 1)
    codes = np.clip(np.round(x / scale) + z, q_min, q_max).astype(np.int64)
    return codes, UniformQuantParams(scale, z, bits, q_min, q_max)


def uniform_dequantize(codes, params):
    """Map integer codes back to reals: (codes - z) * s."""
    return (np.asarray(codes, dtype=np.float64) - params.zero_point) * params.scale


# --------------------------------------------------------------------------
# NF4 with double quantization
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Nf4Block:
    """One block of 4-bit NormalFloat codes with its double-quantized scale."""

    codes: np.ndarray
    absmax_code: int
    scale_of_scales: float

    @property
    def scale(self):
        return self.scale_of_scales * SCALE_CODE_LEVELS[self.absmax_code]


@dataclass(frozen=True, eq=False)
class Nf4Tensor:
    """A frozen weight tensor stored as NF4 blocks; padding zeros are appended at the end."""

    blocks: tuple
    shape: tuple
    block_size: int = NF4_BLOCK_SIZE
    pad_len: int = 0

    @property
    def n_elements(self):
        return int(np.prod(self.shape, dtype=np.int64))

    def to_bytes(self):
        """Canonical byte image of the stored codes and scales."""
        parts = []
        for block in self.blocks:
            parts.append(np.asarray(block.codes, dtype=np.uint8).tobytes())
            parts.append(bytes([block.absmax_code]))
            parts.append(np.float64(block.scale_of_scales).tobytes())
        return b"".join(parts)


def _nearest_codebook_index(normalized):
    return np.abs(normalized[..., None] - NF4_CODEBOOK).argmin(axis=-1).astype(np.uint8)


def nf4_quantize(w, block=NF4_BLOCK_SIZE):
    """
    Quantize a weight tensor to NF4 blocks with double-quantized scales.

    Each block's absmax is coded on an 8-bit log grid relative to the largest absmax of its
    chunk of 256 blocks, rounding upward so no element exceeds the reconstructed scale.
    Elements then map to the nearest codebook entry of x / scale.

    Args:
        w: Real array of any shape
        block: Block length (default 64)

    Returns:
        Nf4Tensor holding the blocks, the original shape and the padding length

    Raises:
        FormatError: On non-finite input or a non-positive block size
    """
    w = _as_finite_array(w, "NF4 input")
    if block < 1:
        raise FormatError(f"block must be positive, got {block}")
    flat = w.ravel()
    pad_len = (-flat.size) % block
    flat = np.concatenate([flat, np.zeros(pad_len)])
    rows = flat.reshape(-1, block)
    absmax = np.abs(rows).max(axis=1) if rows.size else np.zeros(0)

    absmax_codes = np.zeros(len(rows), dtype=np.int64)
    scale_of_scales = np.ones(len(rows))
    for start in range(0, len(rows), DQ_CHUNK_BLOCKS):
        chunk = absmax[start:start + DQ_CHUNK_BLOCKS]
        top = float(chunk.max())
        chunk_scale = top if top > 0.0 else 1.0
        recon = chunk_scale * SCALE_CODE_LEVELS
        idx = np.minimum(np.searchsorted(recon, chunk, side="left"), 255)
        idx[chunk == 0.0] = 0
        absmax_codes[start:start + DQ_CHUNK_BLOCKS] = idx
        scale_of_scales[start:start + DQ_CHUNK_BLOCKS] = chunk_scale

    scales = scale_of_scales * SCALE_CODE_LEVELS[absmax_codes]
    normalized = rows / np.where(absmax > 0.0, scales, 1.0)[:, None]
    codes = _nearest_codebook_index(normalized)

    blocks = []
    for i in range(len(rows)):
        block_codes = codes[i].copy()
        block_codes.setflags(write=False)
        blocks.append(Nf4Block(block_codes, int(absmax_codes[i]), float(scale_of_scales[i])))
    logger.debug("NF4-quantized %d elements into %d blocks (pad %d)", w.size, len(blocks), pad_len)
    return Nf4Tensor(tuple(blocks), tuple(w.shape), block, pad_len)


def nf4_dequantize(blocks):
    """
    Reconstruct real values from NF4 blocks.

    Args:
        blocks: Nf4Tensor, or a plain sequence of Nf4Block

    Returns:
        Array in the tensor's original shape (1-D for a plain block sequence)

    Raises:
        CorruptDataError: If a code index is outside the 16-entry codebook
    """
    if isinstance(blocks, Nf4Tensor):
        block_list, shape, pad_len = blocks.blocks, blocks.shape, blocks.pad_len
    else:
        block_list, shape, pad_len = tuple(blocks), None, 0
    if not block_list:
        return np.zeros(shape if shape is not None else (0,))

    codes = np.stack([np.asarray(b.codes, dtype=np.int64) for b in block_list])
    if codes.min() < 0 or codes.max() >= len(NF4_CODEBOOK):
        raise CorruptDataError(f"NF4 code index out of range [0, 15]: {int(codes.max())}")
    absmax_codes = np.array([b.absmax_code for b in block_list])
    if absmax_codes.min() < 0 or absmax_codes.max() > 255:
        raise CorruptDataError("NF4 absmax code outside the 8-bit range")
    scales = np.array([b.scale_of_scales for b in block_list]) * SCALE_CODE_LEVELS[absmax_codes]
    flat = (NF4_CODEBOOK[codes] * scales[:, None]).ravel()
    if pad_len:
        flat = flat[:-pad_len]
    return flat.reshape(shape) if shape is not None else flat


# --------------------------------------------------------------------------
# GSE format descriptor
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GseSpec:
    """
    Group-Shared Exponents integer format: N signed M-bit mantissas sharing one 5-bit exponent.

    total_bits counts sign plus mantissa, so M = total_bits - 1.
    """

    total_bits: int
    group_size: int = 32
    exponent_bias: int = 15
    exponent_bits: int = field(default=GSE_EXPONENT_BITS, init=False)

    def __post_init__(self):
        if not 5 <= self.total_bits <= 8:
            raise FormatError(f"GSE total_bits must be in [5, 8], got {self.total_bits}")
        if self.group_size < 1:
            raise FormatError(f"group_size must be >= 1, got {self.group_size}")

    @property
    def mantissa_bits(self):
        return self.total_bits - 1

    @property
    def max_mantissa(self):
        return 2 ** self.mantissa_bits - 1

    @property
    def min_exponent(self):
        return -self.exponent_bias

    @property
    def max_exponent(self):
        return 2 ** GSE_EXPONENT_BITS - 1 - self.exponent_bias

    @property
    def group_bits(self):
        """Per-group storage: N(M+1) + 5."""
        return self.group_size * (self.mantissa_bits + 1) + GSE_EXPONENT_BITS

    @property
    def group_bytes(self):
        return (self.group_bits + 7) // 8

    @property
    def name(self):
        return f"GSE-INT{self.total_bits}"


def gse_storage_bits(n_elements, spec):
    """Bits needed for n values in GSE: ceil(n/N) * (N(M+1) + 5)."""
    return -(-n_elements // spec.group_size) * spec.group_bits


def bit_layout(fmt):
    """
    Describe the bit fields of one stored unit of a format.

    Args:
        fmt: FpFormat (unit = one value) or GseSpec (unit = one group)

    Returns:
        Dict with the unit name, ordered (field, bits) pairs and average bits per element
    """
    if isinstance(fmt, GseSpec):
        fields = [("shared_exponent", GSE_EXPONENT_BITS)]
        fields += [("sign", 1), ("mantissa", fmt.mantissa_bits)] * fmt.group_size
        return {
            "format": fmt.name,
            "unit": f"group of {fmt.group_size}",
            "fields": fields,
            "bits_per_unit": fmt.group_bits,
            "bits_per_element": fmt.group_bits / fmt.group_size,
        }
    return {
        "format": fmt.name,
        "unit": "value",
        "fields": [("sign", 1), ("exponent", fmt.exponent_bits), ("mantissa", fmt.mantissa_bits)],
        "bits_per_unit": fmt.total_bits,
        "bits_per_element": float(fmt.total_bits),
    }
