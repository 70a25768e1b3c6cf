"""Fully quantized LoRA linear layer: QCD forward pass and the three quantized backward products."""

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from errors import ConfigError, FormatError, ForwardNotCalledError, ShapeError, TensorFileError
from formats import NF4_BLOCK_SIZE, GseSpec, nf4_dequantize, nf4_quantize
from gse_kernels import GroupAxis, GseTensor, dequantize_matrix, gse_gemm, quantize_matrix
from tensor_io import decode_nf4_blocks, encode_nf4_blocks, write_bytes_atomic

logger = logging.getLogger(__name__)

# Bit width that stands for "not quantized" (16-bit float baseline) in W-A-G notation
UNQUANTIZED_BITS = 16
GSE_BITS_RANGE = (5, 8)

ROWS = GroupAxis.ALONG_ROWS
COLS = GroupAxis.ALONG_COLS

CHECKPOINT_MAGIC = b"GSQL"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEAD = struct.Struct("<4sB6Id")


@dataclass(frozen=True)
class QuantConfig:
    """
    Bit assignment for every quantized matmul, in W-A-G terms.

    Weights are always NF4. A bit width of 16 means "kept in full precision" and is only
    valid together with identity=True (the QLoRA-style baseline).
    """

    act_bits: int = 8
    grad_bits: int = 8
    adapter_bits: int = None
    group_size: int = 32
    rank: int = 8
    identity: bool = False
    weight_bits: int = field(default=4, init=False)

    def __post_init__(self):
        if self.adapter_bits is None:
            object.__setattr__(self, "adapter_bits", self.act_bits)
        for name in ("act_bits", "grad_bits", "adapter_bits"):
            bits = getattr(self, name)
            in_range = GSE_BITS_RANGE[0] <= bits <= GSE_BITS_RANGE[1]
            if not in_range and not (self.identity and bits == UNQUANTIZED_BITS):
                raise ConfigError(f"{name} must be in [5, 8] (or 16 in identity mode), got {bits}")
        if self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")

    @property
    def notation(self):
        return f"{self.weight_bits}-{self.act_bits}-{self.grad_bits}"

    @classmethod
    def from_notation(cls, text, group_size=32, rank=8, adapter_bits=None, identity=None):
        """
        Parse W-A-G notation such as "4-8-8" or "4-16-16".

        Raises:
            ConfigError: On malformed text or a weight width other than 4
        """
        try:
            weight, act, grad = (int(part) for part in text.strip().split("-"))
        except ValueError:
            raise ConfigError(f"expected W-A-G notation like '4-8-8', got '{text}'") from None
        if weight != 4:
            raise ConfigError(f"weights are always NF4 (4 bits), got {weight}")
        if identity is None:
            identity = UNQUANTIZED_BITS in (act, grad)
        if adapter_bits is None and act == UNQUANTIZED_BITS:
            adapter_bits = UNQUANTIZED_BITS
        return cls(act, grad, adapter_bits, group_size, rank, identity)

    def _spec(self, bits):
        return None if self.identity else GseSpec(bits, self.group_size)

    @property
    def act_spec(self):
        return self._spec(self.act_bits)

    @property
    def grad_spec(self):
        return self._spec(self.grad_bits)

    @property
    def adapter_spec(self):
        return self._spec(self.adapter_bits)

    def to_dict(self):
        data = asdict(self)
        data.pop("weight_bits")
        data["notation"] = self.notation
        return data

    @classmethod
    def from_dict(cls, data):
        data = {k: v for k, v in data.items() if k not in ("notation", "weight_bits")}
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"invalid quantization config: {exc}") from None


def identity_quantizer_mode(cfg):
    """Config whose quantizers are exact identities (full-precision LoRA math)."""
    return replace(cfg, identity=True)


def quantized_mode(cfg):
    """Undo identity_quantizer_mode."""
    return replace(cfg, identity=False)


@dataclass
class GradBundle:
    d_a: np.ndarray
    d_b: np.ndarray
    d_x: np.ndarray


class LoraLinear:
    """
    Frozen NF4 weight W (oc x ic) plus trainable low-rank factors A (r x ic) and B (oc x r).

    The layer owns the activation cache of its last forward call, so one instance must not
    run concurrent forward passes.
    """

    def __init__(self, w_frozen, a, b, scale=1.0, name="lora"):
        a = np.array(a, dtype=np.float64)
        b = np.array(b, dtype=np.float64)
        if len(w_frozen.shape) != 2:
            raise ShapeError(f"frozen weight must be 2-D, got shape {w_frozen.shape}")
        oc, ic = w_frozen.shape
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != ic or b.shape[0] != oc or a.shape[0] != b.shape[1]:
            raise ShapeError(
                f"adapter shapes A{a.shape}, B{b.shape} do not fit W({oc}x{ic})"
            )
        self.w_frozen = w_frozen
        self.a = a
        self.b = b
        self.scale = float(scale)
        self.name = name
        self.cached_x_q = None
        self._dense_w = None
        self._weight_operands = {}

    @classmethod
    def from_dense(cls, w, rank, rng, block_size=NF4_BLOCK_SIZE, a_std=0.02, scale=1.0, name="lora"):
        """
        Freeze a dense weight as NF4 and attach fresh adapters (A Gaussian, B zero).

        Args:
            w: Dense weight (oc x ic)
            rank: Adapter rank r
            rng: numpy Generator for A's initialization
            block_size: NF4 block length
            a_std: Standard deviation of A's entries
            scale: LoRA output multiplier
            name: Layer name used in diagnostics
        """
        w = np.asarray(w, dtype=np.float64)
        oc, ic = w.shape
        a = rng.normal(0.0, a_std, size=(rank, ic))
        b = np.zeros((oc, rank))
        return cls(nf4_quantize(w, block_size), a, b, scale, name)

    @property
    def out_features(self):
        return self.w_frozen.shape[0]

    @property
    def in_features(self):
        return self.w_frozen.shape[1]

    @property
    def rank(self):
        return self.a.shape[0]

    def dense_weight(self):
        """DQ(W^NF4), computed once; the result is read-only."""
        if self._dense_w is None:
            self._dense_w = nf4_dequantize(self.w_frozen)
            self._dense_w.setflags(write=False)
        return self._dense_w

    def weight_operand(self, spec, transposed):
        """
        The frozen weight as a GEMM right operand, cached per spec.

        transposed=True gives W^T (ic x oc) for the forward pass; False gives W (oc x ic)
        for the input gradient. Identity mode (spec None) returns the dense matrix.
        """
        w = self.dense_weight()
        operand = w.T if transposed else w
        if spec is None:
            return operand
        key = (spec, transposed)
        if key not in self._weight_operands:
            self._weight_operands[key] = quantize_matrix(operand, COLS, spec)
        return self._weight_operands[key]

    def frozen_bytes(self):
        return self.w_frozen.to_bytes()

    def clone(self):
        """Independent copy sharing the immutable frozen weight."""
        twin = LoraLinear(self.w_frozen, self.a.copy(), self.b.copy(), self.scale, self.name)
        twin._dense_w = self._dense_w
        twin._weight_operands = dict(self._weight_operands)
        return twin


def _quantize(m, axis, spec):
    return m if spec is None else quantize_matrix(m, axis, spec)


def _matmul(left, right):
    if isinstance(left, GseTensor):
        return gse_gemm(left, right)
    return left @ right


def qcd_matmul(p, q, spec_p, spec_q):
    """
    Quantize-compute-dequantize product p @ q.

    Args:
        p: Left matrix (m x k), grouped along its rows
        q: Right matrix (k x n), grouped along its columns
        spec_p: GseSpec for p, or None for no quantization
        spec_q: GseSpec for q, or None for no quantization

    Returns:
        Real matrix (m x n)

    Raises:
        ShapeError: If the inner dimensions differ
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.ndim != 2 or q.ndim != 2 or p.shape[1] != q.shape[0]:
        raise ShapeError(f"cannot multiply {p.shape} by {q.shape}")
    if spec_p is None or spec_q is None:
        return p @ q
    return gse_gemm(quantize_matrix(p, ROWS, spec_p), quantize_matrix(q, COLS, spec_q))


def forward(x, layer, cfg):
    """
    Y = Q(X) Q(DQ(W))^T + (Q(Q(X) Q(A)^T)) Q(B)^T, every product an integer GSE GEMM.

    The adapter path forms the b x r intermediate first and never materializes B A.
    Q(X) is cached on the layer for backward.

    Args:
        x: Activations (b x ic)
        layer: LoraLinear
        cfg: QuantConfig

    Returns:
        Output (b x oc)

    Raises:
        ShapeError: If x does not match the layer
        FormatError: On non-finite activations
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise ShapeError(f"layer '{layer.name}' expects (b, {layer.in_features}) input, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise FormatError(f"non-finite activations entering layer '{layer.name}'")
    act, adapter = cfg.act_spec, cfg.adapter_spec

    x_q = _quantize(x, ROWS, act)
    base = _matmul(x_q, layer.weight_operand(act, transposed=True))
    h = _matmul(x_q, _quantize(layer.a.T, COLS, adapter))
    lora = _matmul(_quantize(h, ROWS, adapter), _quantize(layer.b.T, COLS, adapter))
    layer.cached_x_q = x_q
    return base + layer.scale * lora


def backward(d_y, layer, cfg):
    """
    Quantized gradients of a LoRA layer (straight-through quantizers).

    d_a = (Q(B)^T Q(dY)^T) Q(X)
    d_b = Q(dY)^T (Q(X) Q(A)^T)
    d_x = Q(dY) Q(W) + (Q(dY) Q(B)) Q(A)

    Each intermediate is re-quantized before its next GEMM; operands reduced over the
    batch axis are regrouped along it.

    Args:
        d_y: Upstream gradient (b x oc)
        layer: LoraLinear on which forward was called
        cfg: QuantConfig used by that forward call

    Returns:
        GradBundle

    Raises:
        ForwardNotCalledError: If the layer has no cached activation
        ShapeError: If d_y does not match the cached batch and output width
    """
    if layer.cached_x_q is None:
        raise ForwardNotCalledError(layer.name)
    x_q = layer.cached_x_q
    batch = x_q.rows if isinstance(x_q, GseTensor) else x_q.shape[0]
    d_y = np.asarray(d_y, dtype=np.float64)
    if d_y.shape != (batch, layer.out_features):
        raise ShapeError(f"layer '{layer.name}' expects d_y of shape {(batch, layer.out_features)}, got {d_y.shape}")
    if not np.all(np.isfinite(d_y)):
        raise FormatError(f"non-finite gradient reaching layer '{layer.name}'")
    act, grad, adapter = cfg.act_spec, cfg.grad_spec, cfg.adapter_spec
    x = dequantize_matrix(x_q) if isinstance(x_q, GseTensor) else x_q

    g_ra = _matmul(_quantize(layer.b.T, ROWS, adapter), _quantize(d_y.T, COLS, grad))
    d_a = _matmul(_quantize(g_ra, ROWS, grad), _quantize(x, COLS, act))

    h = _matmul(x_q, _quantize(layer.a.T, COLS, adapter))
    d_b = _matmul(_quantize(d_y.T, ROWS, grad), _quantize(h, COLS, adapter))

    dy_q = _quantize(d_y, ROWS, grad)
    g_br = _matmul(dy_q, _quantize(layer.b, COLS, adapter))
    d_x_lora = _matmul(_quantize(g_br, ROWS, grad), _quantize(layer.a, COLS, adapter))
    d_x = _matmul(dy_q, layer.weight_operand(act, transposed=False)) + layer.scale * d_x_lora

    return GradBundle(layer.scale * d_a, layer.scale * d_b, d_x)


def save_layer(path, layer, cfg):
    """
    Write a layer checkpoint: header, config JSON, NF4 blocks verbatim, A and B as fp32.

    Byte layout is deterministic for a given layer and config.
    """
    name = layer.name.encode("utf-8")
    config = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    head = _CHECKPOINT_HEAD.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, layer.out_features, layer.in_features, layer.rank,
        layer.w_frozen.block_size, layer.w_frozen.pad_len, len(layer.w_frozen.blocks), layer.scale,
    )
    parts = [
        head,
        struct.pack("<I", len(name)), name,
        struct.pack("<I", len(config)), config,
        encode_nf4_blocks(layer.w_frozen),
        np.ascontiguousarray(layer.a, dtype="<f4").tobytes(),
        np.ascontiguousarray(layer.b, dtype="<f4").tobytes(),
    ]
    write_bytes_atomic(path, b"".join(parts))
    logger.info("saved layer '%s' (%dx%d, r=%d) to %s", layer.name, layer.out_features,
                layer.in_features, layer.rank, path)


def load_layer(path):
    """
    Read a checkpoint written by save_layer.

    Returns:
        Tuple of (LoraLinear, QuantConfig)

    Raises:
        TensorFileError: On a malformed file
    """
    with open(path, "rb") as handle:
        data = handle.read()
    if len(data) < _CHECKPOINT_HEAD.size:
        raise TensorFileError("truncated checkpoint header", len(data))
    magic, version, oc, ic, rank, block_size, pad_len, n_blocks, scale = _CHECKPOINT_HEAD.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise TensorFileError(f"bad magic {magic!r}", 0)
    if version != CHECKPOINT_VERSION:
        raise TensorFileError(f"unsupported version {version}", 4)
    offset = _CHECKPOINT_HEAD.size
    (name_len,) = struct.unpack_from("<I", data, offset)
    name = data[offset + 4:offset + 4 + name_len].decode("utf-8")
    offset += 4 + name_len
    (config_len,) = struct.unpack_from("<I", data, offset)
    cfg = QuantConfig.from_dict(json.loads(data[offset + 4:offset + 4 + config_len]))
    offset += 4 + config_len
    w_frozen, offset = decode_nf4_blocks(data, offset, n_blocks, block_size, (oc, ic), pad_len)
    expected = offset + 4 * (rank * ic + oc * rank)
    if len(data) != expected:
        raise TensorFileError(f"checkpoint is {len(data)} bytes, expected {expected}", min(len(data), expected))
    a = np.frombuffer(data, dtype="<f4", count=rank * ic, offset=offset).reshape(rank, ic)
    offset += 4 * rank * ic
    b = np.frombuffer(data, dtype="<f4", count=oc * rank, offset=offset).reshape(oc, rank)
    return LoraLinear(w_frozen, a, b, scale, name), cfg
