"""Bitpacked binary tensors and the XNOR/popcount arithmetic substrate.

Conventions fixed here and relied on everywhere else:
  * Sign(0) = +1, i.e. bit k is 1 iff the source value is >= 0.
  * Row-major (C-order) flattening; the filter index is the leading axis.
  * Bits past the valid length of the final word are zero (canonical
    padding) and are masked out of every dot product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WORD_BITS = 64
_ONE = np.uint64(1)
_FULL = np.uint64(0xFFFFFFFFFFFFFFFF)


def _tail_mask(valid_len: int) -> np.uint64:
    """Mask selecting the valid bits of a final word holding `valid_len` bits."""
    if valid_len == WORD_BITS:
        return _FULL
    return np.uint64((1 << valid_len) - 1)


@dataclass(frozen=True)
class BitTensor:
    """A +/-1 tensor bitpacked 64 values per machine word.

    bit = 1 encodes +1, bit = 0 encodes -1.  `words` holds
    ceil(n / 64) uint64 words for the row-major flattening of `shape`;
    `valid_len` is the number of meaningful bits in the last word.
    """

    shape: tuple[int, ...]
    words: np.ndarray
    valid_len: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def __post_init__(self):
        n = self.size
        nwords = (n + WORD_BITS - 1) // WORD_BITS
        if self.words.shape != (nwords,) or self.words.dtype != np.uint64:
            raise ValueError("words must be a uint64 vector of length ceil(n/64)")
        expect_valid = n - (nwords - 1) * WORD_BITS
        if self.valid_len != expect_valid:
            raise ValueError(f"valid_len {self.valid_len} != expected {expect_valid}")
        if n and (self.words[-1] & ~_tail_mask(self.valid_len)):
            raise ValueError("padding bits beyond valid_len must be zero")


def pack_words(bits01: np.ndarray) -> np.ndarray:
    """Pack a 2-D 0/1 array of shape (rows, n) into (rows, ceil(n/64)) uint64 words.

    Bit k of a row lands in word k // 64 at position k % 64 (LSB first).
    Tail bits are zero.
    """
    rows, n = bits01.shape
    nwords = (n + WORD_BITS - 1) // WORD_BITS
    padded = np.zeros((rows, nwords * WORD_BITS), dtype=np.uint8)
    padded[:, :n] = bits01
    # np.packbits is MSB-first within a byte; bitorder="little" gives LSB-first.
    as_bytes = np.packbits(padded, axis=1, bitorder="little")
    return as_bytes.view("<u8").reshape(rows, nwords).astype(np.uint64)


def unpack_words(words: np.ndarray, n: int) -> np.ndarray:
    """Inverse of pack_words: (rows, nwords) words -> (rows, n) 0/1 uint8."""
    rows = words.shape[0]
    as_bytes = words.astype("<u8").view(np.uint8).reshape(rows, -1)
    bits = np.unpackbits(as_bytes, axis=1, bitorder="little")
    return bits[:, :n]


def pack_bits(x: np.ndarray) -> BitTensor:
    """Binarize a dense real tensor into a BitTensor (bit 1 iff value >= 0)."""
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("cannot pack an empty tensor")
    bits = (x.reshape(1, -1) >= 0).astype(np.uint8)
    words = pack_words(bits)[0]
    n = x.size
    valid = n - (len(words) - 1) * WORD_BITS
    return BitTensor(tuple(x.shape), words, valid)


def unpack_bits(t: BitTensor) -> np.ndarray:
    """Expand a BitTensor back to a dense +/-1 float array of its shape."""
    bits = unpack_words(t.words.reshape(1, -1), t.size)[0]
    return (bits.astype(np.float64) * 2.0 - 1.0).reshape(t.shape)


def popcount(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words)


def xnor_popcount_dot(a: BitTensor, b: BitTensor) -> int:
    """Dot product over +/-1 semantics: 2 * popcount(XNOR(a, b)) - n.

    The tail word is masked so padding bits never contribute.
    """
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} != {b.size}")
    agree = ~(a.words ^ b.words)
    agree[-1] &= _tail_mask(a.valid_len)
    matches = int(popcount(agree).sum())
    return 2 * matches - a.size


def xnor_popcount_matmul(a_words: np.ndarray, b_words: np.ndarray, n: int) -> np.ndarray:
    """All-pairs +/-1 dot products between packed row sets.

    a_words: (R, nwords), b_words: (C, nwords), each row packing n bits.
    Returns an (R, C) int64 matrix of exact +/-1 dot products.
    """
    nwords = a_words.shape[1]
    valid = n - (nwords - 1) * WORD_BITS
    mask = np.ones(nwords, dtype=np.uint64) * _FULL
    mask[-1] = _tail_mask(valid)
    agree = ~(a_words[:, None, :] ^ b_words[None, :, :]) & mask
    matches = popcount(agree).sum(axis=2, dtype=np.int64)
    return 2 * matches - n


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise ValueError(
            f"kernel {kernel} with pad {pad} does not fit input of size {size}"
        )
    return out


def im2col(
    x: np.ndarray, kernel: int, stride: int, pad: int, pad_value: float = 0.0
) -> tuple[np.ndarray, int, int]:
    """Lay out conv receptive fields as rows.

    x: (B, C, H, W).  Returns (cols, H_out, W_out) where cols has shape
    (B, H_out * W_out, C * kernel * kernel).  Window order is row-major over
    (h_out, w_out); within a window the order is (channel, kh, kw).
    """
    b, c, h, w = x.shape
    h_out = conv_output_size(h, kernel, stride, pad)
    w_out = conv_output_size(w, kernel, stride, pad)
    if pad:
        x = np.pad(
            x,
            ((0, 0), (0, 0), (pad, pad), (pad, pad)),
            constant_values=pad_value,
        )
    windows = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    # (B, C, H_out, W_out, k, k) -> (B, H_out*W_out, C*k*k)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, h_out * w_out, c * kernel * kernel)
    return np.ascontiguousarray(cols), h_out, w_out


def col2im(
    grad_cols: np.ndarray,
    x_shape: tuple[int, int, int, int],
    kernel: int,
    stride: int,
    pad: int,
) -> np.ndarray:
    """Scatter-add column gradients back to input layout (adjoint of im2col)."""
    b, c, h, w = x_shape
    h_out = conv_output_size(h, kernel, stride, pad)
    w_out = conv_output_size(w, kernel, stride, pad)
    grad_padded = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=grad_cols.dtype)
    g = grad_cols.reshape(b, h_out, w_out, c, kernel, kernel)
    for kh in range(kernel):
        for kw in range(kernel):
            grad_padded[
                :, :, kh : kh + h_out * stride : stride, kw : kw + w_out * stride : stride
            ] += g[:, :, :, :, kh, kw].transpose(0, 3, 1, 2)
    if pad:
        return grad_padded[:, :, pad:-pad, pad:-pad]
    return grad_padded
