"""1-bit weights and activations.

Weights are binarized per output channel as ``alpha_c * sign(W_c)`` with
``alpha_c = mean(|W_c|)``; activations are binarized with a plain sign and no
scale. ``sign(0)`` is +1 throughout.

The packed path stores signs one bit per channel in 64-bit words and computes
each convolution tap as ``C - 2 * popcount(x XOR w)``, accumulating integers
and applying ``alpha`` once at the end. Zero padding is honoured by skipping
taps that fall outside the image, so the result equals the dense zero-padded
convolution of the +/-1 tensors exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import Module, _record, kaiming
from .tensor import ConvSpec, Parameter

WORD_BITS = 64
MAGIC = b"BCNV"
FORMAT_VERSION = 1


def sign(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = +1, in the dtype of ``x``."""
    dt = x.dtype if x.dtype.kind == "f" else np.dtype(T.get_dtype())
    return np.where(x >= 0, dt.type(1), dt.type(-1))


def ste_backward(grad_out: np.ndarray, pre_binarization_input: np.ndarray) -> np.ndarray:
    """Clipped straight-through estimator: pass the gradient where |x| <= 1."""
    if grad_out.shape != pre_binarization_input.shape:
        raise T.ShapeError("ste_backward", "shape", pre_binarization_input.shape, grad_out.shape)
    return np.where(np.abs(pre_binarization_input) <= 1, grad_out, grad_out.dtype.type(0))


# --------------------------------------------------------------------------
# bit packing
# --------------------------------------------------------------------------


def _pack_axis1(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean (N, C, ...) array along axis 1 into little-endian uint64 words."""
    n, c = bits.shape[:2]
    rest = bits.shape[2:]
    nwords = -(-c // WORD_BITS)
    by = np.packbits(bits, axis=1, bitorder="little")
    pad = nwords * 8 - by.shape[1]
    if pad:
        by = np.concatenate([by, np.zeros((n, pad) + rest, dtype=np.uint8)], axis=1)
    moved = np.ascontiguousarray(np.moveaxis(by, 1, -1))
    words = moved.view("<u8")
    return np.ascontiguousarray(np.moveaxis(words, -1, 1)).astype(np.uint64, copy=False)


def _unpack_axis1(words: np.ndarray, channels: int) -> np.ndarray:
    moved = np.ascontiguousarray(np.moveaxis(words.astype("<u8", copy=False), 1, -1))
    by = moved.view(np.uint8)
    bits = np.unpackbits(by, axis=-1, count=channels, bitorder="little")
    return np.moveaxis(bits, -1, 1).astype(bool)


@dataclass
class PackedTensor:
    """Sign bits of an NCHW tensor, packed along channels (bit = 1 means +1)."""

    shape: tuple[int, int, int, int]
    words: np.ndarray  # (N, ceil(C/64), H, W) uint64

    @classmethod
    def pack(cls, x: np.ndarray) -> "PackedTensor":
        if x.ndim != 4:
            raise T.ShapeError("pack", "input rank", 4, x.ndim)
        return cls(tuple(x.shape), _pack_axis1(x >= 0))

    def unpack(self, dtype=None) -> np.ndarray:
        bits = _unpack_axis1(self.words, self.shape[1])
        return np.where(bits, 1, -1).astype(dtype or T.get_dtype())

    def channel_slice(self, start: int, stop: int) -> "PackedTensor":
        n, _, h, w = self.shape
        if start % WORD_BITS == 0 and (stop % WORD_BITS == 0 or stop == self.shape[1]):
            words = self.words[:, start // WORD_BITS : -(-stop // WORD_BITS)]
            return PackedTensor((n, stop - start, h, w), words)
        bits = _unpack_axis1(self.words, self.shape[1])[:, start:stop]
        return PackedTensor((n, stop - start, h, w), _pack_axis1(bits))


def binarize_activations(x: np.ndarray) -> PackedTensor:
    return PackedTensor.pack(x)


def binarize_weights(latent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(packed, alpha)``.

    ``packed`` has shape (O, ceil(C_in/groups / 64), k, k): each filter's sign
    bits packed along its input-channel axis. ``alpha`` is the per-output-channel
    mean absolute weight, which is also the least-squares optimal scale for
    ``sign(W)``.
    """
    if latent.ndim != 4:
        raise T.ShapeError("binarize_weights", "filter rank", 4, latent.ndim)
    alpha = np.abs(latent).mean(axis=(1, 2, 3))
    return _pack_axis1(latent >= 0), alpha


def reconstruct(latent: np.ndarray, alpha: np.ndarray | None = None) -> np.ndarray:
    """Reconstructed binary filter ``alpha_c * sign(W_c)``."""
    if alpha is None:
        alpha = np.abs(latent).mean(axis=(1, 2, 3))
    return alpha[:, None, None, None] * sign(latent)


@dataclass
class BinConvParams:
    latent: Parameter
    spec: ConvSpec
    packed: np.ndarray = field(init=False)
    alpha: np.ndarray = field(init=False)
    frozen: bool = False

    def __post_init__(self):
        if self.latent.shape != self.spec.weight_shape:
            raise T.ShapeError("BinConvParams", "weight shape", self.spec.weight_shape, self.latent.shape)
        self.refresh(force=True)

    def refresh(self, force: bool = False) -> None:
        if self.frozen and not force:
            return
        self.packed, self.alpha = binarize_weights(self.latent.data)

    def sign_weights(self, dtype=None) -> np.ndarray:
        bits = _unpack_axis1(self.packed, self.spec.in_channels // self.spec.groups)
        return np.where(bits, 1, -1).astype(dtype or T.get_dtype())

    def reconstructed(self) -> np.ndarray:
        return self.alpha[:, None, None, None] * self.sign_weights(self.alpha.dtype)

    # export: header + row-major bit payload in little-endian 64-bit words
    def to_bytes(self) -> bytes:
        s = self.spec
        flat = self.sign_weights(np.float64).reshape(-1) > 0
        nwords = -(-flat.size // WORD_BITS)
        payload = _pack_axis1(flat.reshape(1, -1))[0]
        header = MAGIC + struct.pack(
            "<HH7III",
            FORMAT_VERSION,
            0,
            s.in_channels,
            s.out_channels,
            s.kernel_size,
            s.stride,
            s.dilation,
            s.groups,
            s.padding,
            WORD_BITS,
            nwords,
        )
        return header + self.alpha.astype("<f4").tobytes() + payload.astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "BinConvParams":
        """Rebuild frozen params; latent weights are set to the reconstruction."""
        if blob[:4] != MAGIC:
            raise ValueError("not a packed binary-conv blob (bad magic)")
        head = struct.Struct("<HH7III")
        version, _, cin, cout, k, stride, dil, groups, pad, word_bits, nwords = head.unpack_from(blob, 4)
        if version != FORMAT_VERSION or word_bits != WORD_BITS:
            raise ValueError(f"unsupported format version {version} / word width {word_bits}")
        spec = ConvSpec(cin, cout, k, stride, dil, groups, pad)
        off = 4 + head.size
        alpha = np.frombuffer(blob, "<f4", cout, off).astype(np.float32)
        off += 4 * cout
        payload = np.frombuffer(blob, "<u8", nwords, off)
        if off + 8 * nwords != len(blob):
            raise ValueError("packed blob has trailing or missing bytes")
        n = int(np.prod(spec.weight_shape))
        bits = _unpack_axis1(payload.reshape(1, nwords), n)[0].reshape(spec.weight_shape)
        latent = Parameter(alpha[:, None, None, None] * np.where(bits, 1.0, -1.0))
        params = cls(latent, spec)
        params.alpha = alpha
        params.frozen = True
        return params


# --------------------------------------------------------------------------
# XNOR-popcount convolution
# --------------------------------------------------------------------------


def _packed_conv_group(xw: np.ndarray, ww: np.ndarray, channels: int, spec: ConvSpec, h: int, w: int) -> np.ndarray:
    """Integer +/-1 correlation of one channel group; padded taps contribute 0."""
    k, p, s, d = spec.kernel_size, spec.padding, spec.stride, spec.dilation
    ho, wo = spec.output_size(h, w)
    n, o = xw.shape[0], ww.shape[0]
    xp = np.pad(xw, ((0, 0), (0, 0), (p, p), (p, p)))
    acc = np.zeros((n, o, ho, wo), dtype=np.int64)
    rows = np.arange(ho) * s - p
    cols = np.arange(wo) * s - p
    for i in range(k):
        vr = (rows + i * d >= 0) & (rows + i * d < h)
        for j in range(k):
            vc = (cols + j * d >= 0) & (cols + j * d < w)
            valid = vr[:, None] & vc[None, :]
            if not valid.any():
                continue
            xs = T._tap(xp, i, j, spec, ho, wo)  # (N, nw, Ho, Wo)
            mism = np.bitwise_count(xs[:, None] ^ ww[None, :, :, i, j, None, None]).sum(axis=2, dtype=np.int64)
            acc += np.where(valid, channels - 2 * mism, 0)
    return acc


def packed_conv2d(x: PackedTensor, params: BinConvParams) -> np.ndarray:
    """alpha-scaled XNOR-popcount cross-correlation of packed activations."""
    spec = params.spec
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise T.ShapeError("packed_conv2d", "input channels", spec.in_channels, c)
    cg, og = c // spec.groups, spec.out_channels // spec.groups
    if spec.groups == 1:
        acc = _packed_conv_group(x.words, params.packed, cg, spec, h, w)
    else:
        parts = [
            _packed_conv_group(
                x.channel_slice(g * cg, (g + 1) * cg).words, params.packed[g * og : (g + 1) * og], cg, spec, h, w
            )
            for g in range(spec.groups)
        ]
        acc = np.concatenate(parts, axis=1)
    alpha = params.alpha.astype(T.get_dtype(), copy=False)
    return acc.astype(alpha.dtype) * alpha[None, :, None, None]


class BinConv2d(Module):
    """Binarized convolution: sign(x) (*) alpha*sign(W), no ReLU, no bias.

    Training uses the dense +/-1 product (identical values to the packed
    kernel, faster under BLAS). Backward applies the clipped STE to both the
    activation sign and the weight sign; alpha is held constant.
    """

    def __init__(self, spec: ConvSpec, rng: np.random.Generator, use_packed: bool = False):
        self.spec = spec
        self.weight = Parameter(kaiming(rng, spec.weight_shape))
        self.params = BinConvParams(self.weight, spec)
        self.use_packed = use_packed
        self._cache = None

    def forward(self, x, training=True):
        T._check_conv(x, self.weight.data, self.spec)
        if training:
            self.params.refresh()
        alpha = self.params.alpha.astype(x.dtype, copy=False)
        sx = sign(x)
        if self.use_packed and not training:
            out = packed_conv2d(binarize_activations(x), self.params)
            cols, sw = None, None
        else:
            sw = self.params.sign_weights(x.dtype)
            raw, cols = T._conv_forward(sx, sw, self.spec)
            out = raw * alpha[None, :, None, None]
        self._cache = (x, sx, sw, cols, alpha)
        _record(self, x.shape, out.shape)
        return out

    def backward(self, grad):
        x, sx, sw, cols, alpha = self._cache
        if sw is None:
            sw = self.params.sign_weights(x.dtype)
        g_sx, g_sw = T.conv2d_backward(grad * alpha[None, :, None, None], sx, sw, self.spec, cols=cols)
        self.weight.grad += ste_backward(g_sw, self.weight.data)
        self._cache = None
        return ste_backward(g_sx, x)


def bin_conv_block(x: np.ndarray, params: BinConvParams, bn: T.BatchNormState, training: bool):
    """binarize -> packed conv -> batch norm. Returns ``(out, bn_cache)``."""
    if training:
        params.refresh()
    y = packed_conv2d(binarize_activations(x), params)
    return T.batch_norm(y, bn, training)
