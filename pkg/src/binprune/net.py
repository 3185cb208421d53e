"""Static layer graph with reverse-mode gradients and freezable groups.

Every layer owns its parameters and gradient buffers and implements
forward/backward; a Network is an ordered list of layers (residual
blocks are composite layers, so the top level stays sequential).
Freezing is per layer: a frozen layer accumulates no gradients, its
batchnorm runs off the running statistics, and the optimizer skips it.

Channel masks plug in at two points: a conv multiplies its output
channels by the owning mask's gate, and a FeatureMask layer gates the
post-sign feature map.  While a mask is frozen in BIN mode, consumers
drop the dead channels outright (gather), which makes the masked forward
bit-identical to the physically shrunk model.
"""

from __future__ import annotations

import numpy as np

from binprune import ops
from binprune.bintensor import pack_bits
from binprune.masks import FilterMask, MaskMode


class Layer:
    """Base layer: parameters, gradients, trainable flag."""

    trainable: bool = True

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def param_items(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """(name, parameter, gradient) triples for the optimizer."""
        return []

    def state_items(self) -> list[tuple[str, np.ndarray]]:
        """All persistent arrays (parameters plus e.g. batchnorm stats)."""
        return [(n, p) for n, p, _ in self.param_items()]

    def zero_grads(self) -> None:
        for _, _, g in self.param_items():
            g[:] = 0.0

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag

    def shrunk_copy(self) -> "Layer | None":
        """Copy with masked channels physically removed; None drops the layer."""
        return self


def _keep(mask: FilterMask | None, n: int) -> np.ndarray:
    if mask is None:
        return np.ones(n, dtype=bool)
    return mask.keep_bool()


class Conv2d(Layer):
    """Convolution layer, full-precision or binary (XNOR semantics).

    Binary convs binarize the latent weights with per-filter alpha
    scaling and carry no bias.  `out_mask` gates output channels;
    `in_mask` is the mask of the upstream prunable conv and triggers
    channel gathering once that mask is frozen in BIN mode.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None, binary: bool,
                 stride: int = 1, pad: int = 0,
                 out_mask: FilterMask | None = None,
                 in_mask: FilterMask | None = None,
                 first_layer: bool = False):
        self.weight = weight
        self.bias = bias
        self.binary = binary
        self.stride = stride
        self.pad = pad
        self.out_mask = out_mask
        self.in_mask = in_mask
        self.first_layer = first_layer
        self.grad_weight = np.zeros_like(weight)
        self.grad_bias = np.zeros_like(bias) if bias is not None else None
        self._ctx = None

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x, training):
        keep_in = None
        w = self.weight
        if self.in_mask is not None and self.in_mask.gather_active():
            keep_in = self.in_mask.keep_bool()
            x = x[:, keep_in]
            w = w[:, keep_in]
        if self.binary:
            out, cache = ops.binary_conv2d_dense(x, w, self.stride, self.pad)
        else:
            out, cache = ops.conv2d_forward(x, w, self.bias, self.stride, self.pad)
        pre = None
        if self.out_mask is not None:
            gate = self.out_mask.gate()
            pre = out
            out = out * gate.reshape(1, -1, 1, 1)
        self._ctx = (cache, keep_in, pre)
        return out

    def forward_packed(self, x, keep_tail_channels=True):
        """Inference-only forward using the bitpacked XNOR/popcount kernel."""
        if not self.binary:
            raise ValueError("packed forward is only defined for binary convs")
        w = self.weight
        if self.in_mask is not None and self.in_mask.gather_active():
            keep_in = self.in_mask.keep_bool()
            x = x[:, keep_in]
            w = w[:, keep_in]
        alpha = ops.filter_scales(w)
        out = ops.binary_conv2d_packed(
            pack_bits(x), pack_bits(w), alpha, self.stride, self.pad
        )
        if self.out_mask is not None:
            out = out * self.out_mask.gate().reshape(1, -1, 1, 1)
        return out

    def backward(self, grad):
        if self._ctx is None:
            raise RuntimeError("backward before forward")
        cache, keep_in, pre = self._ctx
        if self.out_mask is not None:
            if self.out_mask.trainable:
                self.out_mask.grad_o += np.einsum("bchw,bchw->c", grad, pre)
            grad = grad * self.out_mask.gate().reshape(1, -1, 1, 1)
        need_input = not self.first_layer
        if self.binary:
            grad_x, grad_w = ops.binary_conv2d_dense_backward(grad, cache, need_input)
            grad_b = None
        else:
            grad_x, grad_w_flat, grad_b = ops.conv2d_backward(
                grad, cache, self.bias is not None, need_input
            )
            grad_w = grad_w_flat.reshape(self.weight.shape[0], -1)
        if self.trainable:
            if keep_in is None:
                self.grad_weight += grad_w.reshape(self.weight.shape)
            else:
                self.grad_weight[:, keep_in] += grad_w.reshape(
                    self.weight.shape[0], -1, *self.weight.shape[2:]
                )
            if grad_b is not None:
                self.grad_bias += grad_b
        if grad_x is None:
            return np.zeros(0)
        if keep_in is not None:
            full = np.zeros(
                (grad_x.shape[0], len(keep_in)) + grad_x.shape[2:], dtype=grad_x.dtype
            )
            full[:, keep_in] = grad_x
            return full
        return grad_x

    def param_items(self):
        items = [("weight", self.weight, self.grad_weight)]
        if self.bias is not None:
            items.append(("bias", self.bias, self.grad_bias))
        return items

    def shrunk_copy(self):
        keep_in = _keep(self.in_mask, self.weight.shape[1])
        keep_out = _keep(self.out_mask, self.weight.shape[0])
        w = self.weight[keep_out][:, keep_in].copy()
        b = self.bias[keep_out].copy() if self.bias is not None else None
        return Conv2d(w, b, self.binary, self.stride, self.pad,
                      out_mask=None, in_mask=None, first_layer=self.first_layer)


class BatchNorm(Layer):
    """Affine-free batchnorm; zero trainable parameters by construction.

    The trainable flag only controls batch-vs-running statistics, so a
    frozen network leaves the running moments bitwise untouched.
    """

    def __init__(self, channels: int, momentum: float = 0.1, epsilon: float = 1e-5,
                 channel_mask: FilterMask | None = None):
        self.state = ops.BatchNormState.create(channels, momentum, epsilon)
        self.channel_mask = channel_mask
        self._cache = None

    def forward(self, x, training):
        y, self._cache = ops.batchnorm_forward(
            x, self.state, batch_mode=training and self.trainable
        )
        return y

    def backward(self, grad):
        return ops.batchnorm_backward(grad, self._cache)

    def state_items(self):
        return [
            ("running_mean", self.state.running_mean),
            ("running_var", self.state.running_var),
        ]

    def shrunk_copy(self):
        keep = _keep(self.channel_mask, len(self.state.running_mean))
        out = BatchNorm(int(keep.sum()), self.state.momentum, self.state.epsilon)
        out.state.running_mean[:] = self.state.running_mean[keep]
        out.state.running_var[:] = self.state.running_var[keep]
        return out


class SignAct(Layer):
    """Sign activation with the straight-through estimator (|x| <= 1 window)."""

    def __init__(self):
        self._pre = None

    def forward(self, x, training):
        self._pre = x
        return ops.sign_forward(x)

    def backward(self, grad):
        return ops.ste_backward(grad, self._pre)


class FeatureMask(Layer):
    """Gates post-sign feature channels by the owning mask.

    This is the point where the mask wipes a pruned filter's feature map
    and where the scalars pick up gradient from downstream layers even
    for currently-dropped channels.
    """

    def __init__(self, mask: FilterMask):
        self.mask = mask
        self._x = None

    def forward(self, x, training):
        self._x = x
        return x * self.mask.gate().reshape(1, -1, 1, 1)

    def backward(self, grad):
        if self.mask.trainable:
            self.mask.grad_o += np.einsum("bchw,bchw->c", grad, self._x)
        return grad * self.mask.gate().reshape(1, -1, 1, 1)

    def shrunk_copy(self):
        return None


class AvgPool(Layer):
    def __init__(self, size: int):
        self.size = size

    def forward(self, x, training):
        return ops.avgpool_forward(x, self.size)

    def backward(self, grad):
        return ops.avgpool_backward(grad, self.size)

    def shrunk_copy(self):
        return AvgPool(self.size)


class GlobalAvgPool(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x, training):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        b, c, h, w = self._shape
        return np.broadcast_to(grad[:, :, None, None], self._shape) / (h * w)

    def shrunk_copy(self):
        return GlobalAvgPool()


class Flatten(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x, training):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)

    def shrunk_copy(self):
        return Flatten()


class Linear(Layer):
    """Fully connected layer; `in_mask` covers channel-major flattened input
    with `in_expand` positions per channel."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray,
                 in_mask: FilterMask | None = None, in_expand: int = 1):
        self.weight = weight
        self.bias = bias
        self.in_mask = in_mask
        self.in_expand = in_expand
        self.grad_weight = np.zeros_like(weight)
        self.grad_bias = np.zeros_like(bias)
        self._ctx = None

    def _keep_cols(self):
        keep = self.in_mask.keep_bool()
        return np.repeat(keep, self.in_expand)

    def forward(self, x, training):
        keep = None
        w = self.weight
        if self.in_mask is not None and self.in_mask.gather_active():
            keep = self._keep_cols()
            # contiguous copies so the matmul is bitwise identical to the
            # physically shrunk layer's
            x = np.ascontiguousarray(x[:, keep])
            w = np.ascontiguousarray(w[:, keep])
        self._ctx = (x, w, keep)
        return ops.linear_forward(x, w, self.bias)

    def backward(self, grad):
        x, w, keep = self._ctx
        grad_x, grad_w, grad_b = ops.linear_backward(grad, x, w)
        if self.trainable:
            if keep is None:
                self.grad_weight += grad_w
            else:
                self.grad_weight[:, keep] += grad_w
            self.grad_bias += grad_b
        if keep is not None:
            full = np.zeros((grad_x.shape[0], self.weight.shape[1]))
            full[:, keep] = grad_x
            return full
        return grad_x

    def param_items(self):
        return [("weight", self.weight, self.grad_weight),
                ("bias", self.bias, self.grad_bias)]

    def shrunk_copy(self):
        if self.in_mask is None:
            w = self.weight.copy()
        else:
            w = self.weight[:, self._keep_cols()].copy()
        return Linear(w, self.bias.copy(), in_mask=None, in_expand=self.in_expand)


class ResidualBlock(Layer):
    """Two binary convs with a shortcut joined on real pre-sign values.

    Only the first conv's filters are prunable (mask); the block output
    channels stay aligned with the shortcut.  A strided block uses a
    binary 1x1 conv + batchnorm on the shortcut.
    """

    def __init__(self, conv1: Conv2d, bn1: BatchNorm, fmask: FeatureMask,
                 conv2: Conv2d, bn2: BatchNorm,
                 shortcut_conv: Conv2d | None, shortcut_bn: BatchNorm | None):
        self.conv1, self.bn1, self.fmask = conv1, bn1, fmask
        self.sign1 = SignAct()
        self.conv2, self.bn2 = conv2, bn2
        self.shortcut_conv, self.shortcut_bn = shortcut_conv, shortcut_bn
        self.sign_out = SignAct()

    def _sublayers(self):
        subs = [self.conv1, self.bn1, self.sign1, self.fmask, self.conv2, self.bn2]
        if self.shortcut_conv is not None:
            subs += [self.shortcut_conv, self.shortcut_bn]
        return subs + [self.sign_out]

    def set_trainable(self, flag):
        self.trainable = flag
        for sub in self._sublayers():
            sub.set_trainable(flag)

    def forward(self, x, training):
        if self.shortcut_conv is not None:
            s = self.shortcut_bn.forward(self.shortcut_conv.forward(x, training), training)
        else:
            s = x
        y = self.conv1.forward(x, training)
        y = self.bn1.forward(y, training)
        y = self.sign1.forward(y, training)
        y = self.fmask.forward(y, training)
        y = self.conv2.forward(y, training)
        y = self.bn2.forward(y, training)
        return self.sign_out.forward(y + s, training)

    def backward(self, grad):
        g = self.sign_out.backward(grad)
        gs = g
        gy = self.bn2.backward(g)
        gy = self.conv2.backward(gy)
        gy = self.fmask.backward(gy)
        gy = self.sign1.backward(gy)
        gy = self.bn1.backward(gy)
        gx = self.conv1.backward(gy)
        if self.shortcut_conv is not None:
            gs = self.shortcut_bn.backward(gs)
            gs = self.shortcut_conv.backward(gs)
        return gx + gs

    def param_items(self):
        items = []
        for i, sub in enumerate(self._sublayers()):
            items += [(f"sub{i}.{n}", p, g) for n, p, g in sub.param_items()]
        return items

    def state_items(self):
        items = []
        for i, sub in enumerate(self._sublayers()):
            items += [(f"sub{i}.{n}", p) for n, p in sub.state_items()]
        return items

    def zero_grads(self):
        for sub in self._sublayers():
            sub.zero_grads()

    def shrunk_copy(self):
        out = ResidualBlock(
            self.conv1.shrunk_copy(), self.bn1.shrunk_copy(),
            FeatureMask(_all_keep_mask(self.fmask.mask)),
            self.conv2.shrunk_copy(), self.bn2.shrunk_copy(),
            self.shortcut_conv.shrunk_copy() if self.shortcut_conv else None,
            self.shortcut_bn.shrunk_copy() if self.shortcut_bn else None,
        )
        return out


def _all_keep_mask(old: FilterMask) -> FilterMask:
    n = int(old.keep_bool().sum())
    return FilterMask(np.full(n, 0.5), MaskMode.BYPASS, trainable=False, name=old.name)


class Network:
    """Ordered layer list plus the bottom-up list of prunable masks."""

    def __init__(self, layers: list[Layer], masks: list[FilterMask],
                 mask_positions: list[int], spec=None):
        self.layers = layers
        self.masks = masks
        self.mask_positions = mask_positions
        self.spec = spec
        self._forward_done = False

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, training)
        self._forward_done = True
        return x

    def backward(self, grad_logits: np.ndarray) -> None:
        if not self._forward_done:
            raise RuntimeError("backward before forward")
        g = grad_logits
        for layer in reversed(self.layers):
            g = layer.backward(g)

    def zero_grads(self) -> None:
        for layer in self.layers:
            layer.zero_grads()
        for mask in self.masks:
            mask.zero_grad()

    def set_all_trainable(self, flag: bool) -> None:
        for layer in self.layers:
            layer.set_trainable(flag)

    def state_items(self) -> list[tuple[str, np.ndarray]]:
        items = []
        for i, layer in enumerate(self.layers):
            items += [(f"layer{i}.{n}", a) for n, a in layer.state_items()]
        return items

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, training=False)

    def shrunk(self) -> "Network":
        layers = []
        for layer in self.layers:
            copy = layer.shrunk_copy()
            if copy is not None:
                layers.append(copy)
        return Network(layers, [], [], spec=self.spec)


class SGD:
    """Plain SGD with step-decay schedule and optional momentum.

    lr(epoch) = lr0 * decay ** floor(epoch / decay_every).  Updates touch
    only trainable layers; frozen parameters stay bitwise unchanged.
    """

    def __init__(self, lr: float, decay: float = 0.1, decay_every: int = 20,
                 momentum: float = 0.0):
        self.lr0 = lr
        self.decay = decay
        self.decay_every = decay_every
        self.momentum = momentum
        self._velocity: dict[tuple[int, str], np.ndarray] = {}

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.decay ** (epoch // self.decay_every)

    def step(self, net: Network, epoch: int) -> None:
        lr = self.lr_at(epoch)
        for li, layer in enumerate(net.layers):
            if not layer.trainable:
                continue
            for name, p, g in layer.param_items():
                if self.momentum > 0.0:
                    key = (li, name)
                    v = self._velocity.get(key)
                    if v is None:
                        v = self._velocity[key] = np.zeros_like(p)
                    v *= self.momentum
                    v += g
                    p -= lr * v
                else:
                    p -= lr * g
