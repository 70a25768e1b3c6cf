"""Binary file formats: GSQT real tensors, GSEB packed GSE tensors, NF4 block images."""

import logging
import os
import struct
import tempfile

import numpy as np

from errors import CorruptDataError, TensorFileError
from formats import GseSpec, Nf4Block, Nf4Tensor
from gse_kernels import GroupAxis, pack_gse_tensor, unpack_gse_tensor

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"GSQT"
GSE_MAGIC = b"GSEB"
FORMAT_VERSION = 1

DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
AXIS_TAGS = {0: GroupAxis.ALONG_ROWS, 1: GroupAxis.ALONG_COLS}

_TENSOR_HEAD = struct.Struct("<4sBBB")
_GSE_HEAD = struct.Struct("<4sBBHhBQQI")


def write_bytes_atomic(path, data):
    """Write bytes next to the destination, then rename over it."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def write_text_atomic(path, text):
    write_bytes_atomic(path, text.encode("utf-8"))


# --------------------------------------------------------------------------
# GSQT: magic, u8 version, u8 dtype tag, u8 rank, u64 dims[rank], LE row-major payload
# --------------------------------------------------------------------------

def encode_tensor(array, dtype_tag=1):
    """Serialize a real array to GSQT bytes (dtype_tag 0 = fp32, 1 = fp64)."""
    if dtype_tag not in DTYPE_TAGS:
        raise ValueError(f"unknown dtype tag {dtype_tag}")
    array = np.ascontiguousarray(array, dtype=DTYPE_TAGS[dtype_tag])
    head = _TENSOR_HEAD.pack(TENSOR_MAGIC, FORMAT_VERSION, dtype_tag, array.ndim)
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    return head + dims + array.tobytes()


def decode_tensor(data):
    """
    Parse GSQT bytes.

    Returns:
        float64 numpy array

    Raises:
        TensorFileError: With the byte offset of the first inconsistency
    """
    if len(data) < _TENSOR_HEAD.size:
        raise TensorFileError("truncated header", len(data))
    magic, version, dtype_tag, rank = _TENSOR_HEAD.unpack_from(data, 0)
    if magic != TENSOR_MAGIC:
        raise TensorFileError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise TensorFileError(f"unsupported version {version}", 4)
    if dtype_tag not in DTYPE_TAGS:
        raise TensorFileError(f"unknown dtype tag {dtype_tag}", 5)
    offset = _TENSOR_HEAD.size
    if len(data) < offset + 8 * rank:
        raise TensorFileError("truncated dimensions", len(data))
    dims = struct.unpack_from(f"<{rank}Q", data, offset)
    offset += 8 * rank
    dtype = DTYPE_TAGS[dtype_tag]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) - offset != expected:
        raise TensorFileError(
            f"payload is {len(data) - offset} bytes, expected {expected}",
            offset + min(len(data) - offset, expected),
        )
    values = np.frombuffer(data, dtype=dtype, count=expected // dtype.itemsize, offset=offset)
    return values.astype(np.float64).reshape(dims)


def save_tensor(path, array, dtype_tag=1):
    write_bytes_atomic(path, encode_tensor(array, dtype_tag))
    logger.debug("wrote tensor %s to %s", np.shape(array), path)


def load_tensor(path):
    with open(path, "rb") as handle:
        return decode_tensor(handle.read())


# --------------------------------------------------------------------------
# GSEB: magic, u8 version, u8 b, u16 N, i16 bias, u8 axis, u64 rows, u64 cols,
# u32 pad_len, then packed groups
# --------------------------------------------------------------------------

def encode_gse(t):
    axis_tag = 0 if t.group_axis == GroupAxis.ALONG_ROWS else 1
    head = _GSE_HEAD.pack(
        GSE_MAGIC, FORMAT_VERSION, t.spec.total_bits, t.spec.group_size,
        t.spec.exponent_bias, axis_tag, t.rows, t.cols, t.pad_len,
    )
    return head + pack_gse_tensor(t)


def decode_gse(data):
    """
    Parse GSEB bytes into a GseTensor.

    Raises:
        TensorFileError: On a malformed header or payload
    """
    if len(data) < _GSE_HEAD.size:
        raise TensorFileError("truncated GSEB header", len(data))
    magic, version, bits, group, bias, axis_tag, rows, cols, pad_len = _GSE_HEAD.unpack_from(data, 0)
    if magic != GSE_MAGIC:
        raise TensorFileError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise TensorFileError(f"unsupported version {version}", 4)
    if axis_tag not in AXIS_TAGS:
        raise TensorFileError(f"unknown group axis tag {axis_tag}", 10)
    try:
        spec = GseSpec(bits, group, bias)
        return unpack_gse_tensor(data[_GSE_HEAD.size:], rows, cols, AXIS_TAGS[axis_tag], spec, pad_len)
    except (CorruptDataError, ValueError) as exc:
        raise TensorFileError(str(exc), _GSE_HEAD.size) from exc


def save_gse(path, t):
    write_bytes_atomic(path, encode_gse(t))


def load_gse(path):
    with open(path, "rb") as handle:
        return decode_gse(handle.read())


# --------------------------------------------------------------------------
# NF4 blocks, verbatim: f64 scale_of_scales, u8 absmax_code, codes two per byte (low nibble first)
# --------------------------------------------------------------------------

def encode_nf4_blocks(t):
    parts = []
    for block in t.blocks:
        codes = np.asarray(block.codes, dtype=np.uint8)
        if len(codes) % 2:
            codes = np.concatenate([codes, np.zeros(1, dtype=np.uint8)])
        nibbles = codes[0::2] | (codes[1::2] << 4)
        parts.append(struct.pack("<dB", block.scale_of_scales, block.absmax_code))
        parts.append(nibbles.astype(np.uint8).tobytes())
    return b"".join(parts)


def decode_nf4_blocks(data, offset, n_blocks, block_size, shape, pad_len):
    """
    Read n_blocks NF4 blocks starting at offset.

    Returns:
        Tuple of (Nf4Tensor, offset just past the blocks)
    """
    code_bytes = (block_size + 1) // 2
    blocks = []
    for _ in range(n_blocks):
        if len(data) < offset + 9 + code_bytes:
            raise TensorFileError("truncated NF4 block", len(data))
        scale_of_scales, absmax_code = struct.unpack_from("<dB", data, offset)
        offset += 9
        packed = np.frombuffer(data, dtype=np.uint8, count=code_bytes, offset=offset)
        offset += code_bytes
        codes = np.empty(code_bytes * 2, dtype=np.uint8)
        codes[0::2] = packed & 0x0F
        codes[1::2] = packed >> 4
        codes = codes[:block_size]
        codes.setflags(write=False)
        blocks.append(Nf4Block(codes, absmax_code, scale_of_scales))
    return Nf4Tensor(tuple(blocks), tuple(shape), block_size, pad_len), offset
