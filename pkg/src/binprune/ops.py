"""Forward/backward primitives for binary and full-precision layers.

All functions are pure: they take arrays, return arrays plus whatever
context the matching backward needs.  The straight-through estimator is
used wherever a sign function sits on the gradient path, with the
inclusive boundary |x| <= 1.

Binary convolutions exist in two numerically identical flavours: a dense
+/-1 path used during training (plain matmul over im2col columns, exact
because every product is +/-1 and sums are small integers) and a
bitpacked XNOR/popcount path used for inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from binprune.bintensor import (
    BitTensor,
    col2im,
    im2col,
    pack_words,
    unpack_bits,
    xnor_popcount_matmul,
)

# Binary convs pad with +1, the Sign(0) = +1 value; the bitpacked and the
# dense path must agree on it.  Full-precision convs pad with zero.
BINARY_PAD_VALUE = 1.0


def sign_forward(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with Sign(0) = +1."""
    return np.where(x >= 0, 1.0, -1.0)


def ste_backward(grad_out: np.ndarray, x_preactivation: np.ndarray) -> np.ndarray:
    """Straight-through gradient of sign: pass where |x| <= 1, clip elsewhere."""
    if grad_out.shape != x_preactivation.shape:
        raise ValueError(
            f"shape mismatch: {grad_out.shape} vs {x_preactivation.shape}"
        )
    return grad_out * (np.abs(x_preactivation) <= 1.0)


def filter_scales(weights: np.ndarray) -> np.ndarray:
    """Per-filter scaling factor: mean |w| over each filter's elements."""
    return np.abs(weights).reshape(weights.shape[0], -1).mean(axis=1)


# ---------------------------------------------------------------------------
# Binary convolution, dense +/-1 training path
# ---------------------------------------------------------------------------


@dataclass
class BinConvCache:
    x_shape: tuple
    cols: np.ndarray
    weights: np.ndarray  # latent reals
    wb_flat: np.ndarray
    alpha: np.ndarray
    raw: np.ndarray  # conv result before alpha scaling, (B, L, F)
    kernel: int
    stride: int
    pad: int


def binary_conv2d_dense(
    x: np.ndarray, weights: np.ndarray, stride: int = 1, pad: int = 0
) -> tuple[np.ndarray, BinConvCache]:
    """Binary conv via the dense path: out[n] = alpha[n] * (sign(W_n) * x).

    x is a (B, C, H, W) tensor of +/-1 activations (zeros are tolerated for
    masked-out channels), weights are the latent reals (F, C, k, k).
    """
    f, c, k, _ = weights.shape
    if x.shape[1] != c:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, weights {c}")
    alpha = filter_scales(weights)
    wb_flat = sign_forward(weights).reshape(f, -1)
    cols, h_out, w_out = im2col(x, k, stride, pad, pad_value=BINARY_PAD_VALUE)
    raw = cols @ wb_flat.T  # (B, L, F), exact integers
    out = (raw * alpha).transpose(0, 2, 1).reshape(x.shape[0], f, h_out, w_out)
    cache = BinConvCache(x.shape, cols, weights, wb_flat, alpha, raw, k, stride, pad)
    return out, cache


def binary_conv2d_dense_backward(
    grad_out: np.ndarray, cache: BinConvCache, need_input_grad: bool = True
) -> tuple[np.ndarray | None, np.ndarray]:
    """Gradients of the dense binary conv wrt input and latent weights.

    The latent-weight gradient has two terms: the STE path through
    sign(W) (clipped at |W| > 1) and the smooth path through
    alpha = mean|W|.
    """
    b, f = grad_out.shape[0], grad_out.shape[1]
    g = grad_out.reshape(b, f, -1).transpose(0, 2, 1)  # (B, L, F)
    g_scaled = g * cache.alpha

    grad_x = None
    if need_input_grad:
        grad_cols = g_scaled @ cache.wb_flat
        grad_x = col2im(grad_cols, cache.x_shape, cache.kernel, cache.stride, cache.pad)

    w = cache.weights
    per_filter_count = w[0].size
    # d out / d sign(W) plus the smooth path through alpha_n = mean |W_n|;
    # the STE indicator clips the whole chain, so a latent weight outside
    # [-1, 1] receives no gradient at all.
    grad_wb = np.einsum("blf,blk->fk", g_scaled, cache.cols).reshape(w.shape)
    grad_alpha = np.einsum("blf,blf->f", g, cache.raw)
    grad_w = grad_wb + (grad_alpha / per_filter_count)[:, None, None, None] * sign_forward(w)
    grad_w *= np.abs(w) <= 1.0
    return grad_x, grad_w


def binary_conv2d_packed(
    x_bits: BitTensor,
    w_bits: BitTensor,
    alpha: np.ndarray,
    stride: int = 1,
    pad: int = 0,
) -> np.ndarray:
    """Binary conv on bitpacked operands via XNOR + popcount.

    x_bits packs a (B, C, H, W) activation tensor, w_bits a (F, C, k, k)
    weight tensor.  Every window/filter dot product is computed as
    2 * popcount(XNOR) - n with tail masking.  Returns dense
    (B, F, H_out, W_out) scaled by alpha.
    """
    if len(x_bits.shape) != 4 or len(w_bits.shape) != 4:
        raise ValueError("packed conv expects 4-d operand shapes")
    f, c, k, _ = w_bits.shape
    if x_bits.shape[1] != c:
        raise ValueError(f"channel mismatch: input {x_bits.shape[1]}, weights {c}")
    if len(alpha) != f:
        raise ValueError(f"alpha length {len(alpha)} != filter count {f}")
    x = unpack_bits(x_bits)
    w_flat01 = (unpack_bits(w_bits).reshape(f, -1) > 0).astype(np.uint8)
    w_words = pack_words(w_flat01)
    cols, h_out, w_out = im2col(x, k, stride, pad, pad_value=BINARY_PAD_VALUE)
    b, l, n = cols.shape
    col_words = pack_words((cols.reshape(b * l, n) > 0).astype(np.uint8))
    dots = xnor_popcount_matmul(col_words, w_words, n).reshape(b, l, f)
    out = (dots * alpha).transpose(0, 2, 1).reshape(b, f, h_out, w_out)
    return out


# ---------------------------------------------------------------------------
# Full-precision convolution
# ---------------------------------------------------------------------------


@dataclass
class ConvCache:
    x_shape: tuple
    cols: np.ndarray
    w_flat: np.ndarray
    kernel: int
    stride: int
    pad: int


def conv2d_forward(
    x: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    pad: int = 0,
) -> tuple[np.ndarray, ConvCache]:
    """Plain real-valued conv (cross-correlation) via im2col."""
    f, c, k, _ = weights.shape
    if x.shape[1] != c:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, weights {c}")
    w_flat = weights.reshape(f, -1)
    cols, h_out, w_out = im2col(x, k, stride, pad, pad_value=0.0)
    out = cols @ w_flat.T
    if bias is not None:
        out = out + bias
    out = out.transpose(0, 2, 1).reshape(x.shape[0], f, h_out, w_out)
    return out, ConvCache(x.shape, cols, w_flat, k, stride, pad)


def conv2d_backward(
    grad_out: np.ndarray,
    cache: ConvCache,
    has_bias: bool,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray | None]:
    b, f = grad_out.shape[0], grad_out.shape[1]
    g = grad_out.reshape(b, f, -1).transpose(0, 2, 1)
    grad_x = None
    if need_input_grad:
        grad_cols = g @ cache.w_flat
        grad_x = col2im(grad_cols, cache.x_shape, cache.kernel, cache.stride, cache.pad)
    grad_w_flat = np.einsum("blf,blk->fk", g, cache.cols)
    grad_b = g.sum(axis=(0, 1)) if has_bias else None
    return grad_x, grad_w_flat, grad_b


# ---------------------------------------------------------------------------
# Affine-free batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics of an affine-free batchnorm (no gamma/beta)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5):
        return cls(np.zeros(channels), np.ones(channels), momentum, epsilon)


@dataclass
class BatchNormCache:
    y: np.ndarray
    inv_std: np.ndarray
    batch_mode: bool


def batchnorm_forward(
    x: np.ndarray, state: BatchNormState, batch_mode: bool
) -> tuple[np.ndarray, BatchNormCache]:
    """Normalize per channel.  batch_mode uses (and folds into the running
    statistics) the batch moments; otherwise the running statistics are
    used and left untouched."""
    if x.shape[0] == 0:
        raise ValueError("batchnorm over an empty batch")
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    if batch_mode:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        state.running_mean += state.momentum * (mean - state.running_mean)
        state.running_var += state.momentum * (var - state.running_var)
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    y = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    return y, BatchNormCache(y, inv_std, batch_mode)


def batchnorm_backward(grad_out: np.ndarray, cache: BatchNormCache) -> np.ndarray:
    axes = (0, 2, 3) if grad_out.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if grad_out.ndim == 4 else (1, -1)
    inv_std = cache.inv_std.reshape(shape)
    if not cache.batch_mode:
        return grad_out * inv_std
    y = cache.y
    m = grad_out.size // grad_out.shape[1] if grad_out.ndim == 4 else grad_out.shape[0]
    mean_g = grad_out.mean(axis=axes).reshape(shape)
    mean_gy = (grad_out * y).mean(axis=axes).reshape(shape)
    return inv_std * (grad_out - mean_g - y * mean_gy)


# ---------------------------------------------------------------------------
# Pooling, linear, losses
# ---------------------------------------------------------------------------


def avgpool_forward(x: np.ndarray, size: int) -> np.ndarray:
    b, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"spatial dims {h}x{w} not divisible by pool size {size}")
    return x.reshape(b, c, h // size, size, w // size, size).mean(axis=(3, 5))


def avgpool_backward(grad_out: np.ndarray, size: int) -> np.ndarray:
    g = grad_out / (size * size)
    return np.repeat(np.repeat(g, size, axis=2), size, axis=3)


def linear_forward(
    x: np.ndarray, weights: np.ndarray, bias: np.ndarray
) -> np.ndarray:
    return x @ weights.T + bias


def linear_backward(
    grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return grad_out @ weights, grad_out.T @ x, grad_out.sum(axis=0)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient wrt logits."""
    b = logits.shape[0]
    if b == 0:
        raise ValueError("cross-entropy over an empty batch")
    logp = log_softmax(logits)
    loss = -logp[np.arange(b), labels].mean()
    grad = softmax(logits)
    grad[np.arange(b), labels] -= 1.0
    return float(loss), grad / b
