"""Mini model zoo and checkpoint persistence.

Three desk-scale architectures: nin-mini (all-conv), vgg-mini (7 binary
convs + linear head), resnet-mini (residual blocks, one downsampling
shortcut).  Invariant across all of them: the first conv and the final
classifier are full-precision, every other conv binarizes weights and
activations and is followed by affine-free batchnorm and a sign
activation.

Checkpoints are a little-endian binary format:

    magic "BPCK" | u32 version | u32 header_len | header JSON |
    u32 n_arrays | per array: u16 name_len, name, u16 dtype_len, dtype,
    u8 ndim, u32 dims..., u64 byte_len, raw bytes | u32 CRC32

The CRC covers everything between the magic and the trailer.  The header
JSON carries the model spec, mask modes and caller metadata (RNG state,
epoch counters).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from binprune.masks import FilterMask, MaskMode
from binprune.net import (
    AvgPool,
    BatchNorm,
    Conv2d,
    FeatureMask,
    Flatten,
    GlobalAvgPool,
    Linear,
    Network,
    ResidualBlock,
    SignAct,
)

CHECKPOINT_MAGIC = b"BPCK"
CHECKPOINT_VERSION = 1

ARCHITECTURES = ("nin-mini", "vgg-mini", "resnet-mini")


class CheckpointError(Exception):
    pass


@dataclass
class ModelSpec:
    arch: str
    widths: list[int] = field(default_factory=list)
    input_shape: tuple[int, int, int] = (3, 32, 32)
    classes: int = 10

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; known: {ARCHITECTURES}")
        if not self.widths:
            self.widths = _default_widths(self.arch)
        if any(w <= 0 for w in self.widths):
            raise ValueError("widths must be positive")
        if self.classes < 2:
            raise ValueError("need at least two classes")
        self.input_shape = tuple(self.input_shape)

    def to_dict(self):
        return {
            "arch": self.arch,
            "widths": list(self.widths),
            "input_shape": list(self.input_shape),
            "classes": self.classes,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["arch"], list(d["widths"]), tuple(d["input_shape"]), d["classes"])


def _default_widths(arch: str) -> list[int]:
    # Roughly quarter-width versions of the published full-size models.
    if arch == "nin-mini":
        return [16, 16]
    if arch == "vgg-mini":
        return [16, 32, 64, 64]
    return [16, 32]  # resnet-mini


def _conv_init(rng, f, c, k):
    return rng.normal(0.0, np.sqrt(2.0 / (c * k * k)), size=(f, c, k, k))


def _placeholder_mask(n: int, name: str) -> FilterMask:
    # Real values come from mask_init at pipeline start.
    return FilterMask(np.full(n, 1e-6), MaskMode.BYPASS, trainable=False, name=name)


def build(spec: ModelSpec, seed: int = 0) -> Network:
    """Construct a model; the RNG stream is consumed in layer order."""
    rng = np.random.default_rng(seed)
    if spec.arch == "nin-mini":
        return _build_nin(spec, rng)
    if spec.arch == "vgg-mini":
        return _build_vgg(spec, rng)
    return _build_resnet(spec, rng)


def _binary_stage(layers, masks, positions, rng, c_in, c_out, k, pad,
                  in_mask, name):
    """BinConv -> BN -> Sign -> FeatureMask, returning the new mask."""
    mask = _placeholder_mask(c_out, name)
    conv = Conv2d(_conv_init(rng, c_out, c_in, k), None, binary=True, pad=pad,
                  out_mask=mask, in_mask=in_mask)
    positions.append(len(layers))
    masks.append(mask)
    layers += [conv, BatchNorm(c_out, channel_mask=mask), SignAct(), FeatureMask(mask)]
    return mask


def _build_nin(spec, rng):
    c, h, w = spec.input_shape
    layers, masks, positions = [], [], []
    w0 = spec.widths[0]
    layers += [
        Conv2d(_conv_init(rng, w0, c, 3), None, binary=False, pad=1, first_layer=True),
        BatchNorm(w0),
        SignAct(),
    ]
    prev, in_mask = w0, None
    for si, width in enumerate(spec.widths):
        in_mask = _binary_stage(layers, masks, positions, rng, prev, width, 3, 1,
                                in_mask, f"nin.s{si}.conv3")
        in_mask = _binary_stage(layers, masks, positions, rng, width, width, 1, 0,
                                in_mask, f"nin.s{si}.conv1")
        prev = width
        if si < len(spec.widths) - 1:
            layers.append(AvgPool(2))
    head = Conv2d(_conv_init(rng, spec.classes, prev, 1),
                  np.zeros(spec.classes), binary=False, in_mask=in_mask)
    layers += [head, GlobalAvgPool()]
    return Network(layers, masks, positions, spec=spec)


def _build_vgg(spec, rng):
    c, h, w = spec.input_shape
    if len(spec.widths) != 4:
        raise ValueError("vgg-mini takes 4 stage widths")
    w0, w1, w2, w3 = spec.widths
    layers, masks, positions = [], [], []
    layers += [
        Conv2d(_conv_init(rng, w0, c, 3), None, binary=False, pad=1, first_layer=True),
        BatchNorm(w0),
        SignAct(),
    ]
    plan = [  # (out_channels, pool_after) for the 7 binary convs
        (w1, True), (w2, False), (w2, True), (w3, False),
        (w3, True), (w3, False), (w3, False),
    ]
    prev, in_mask, spatial = w0, None, h
    for bi, (width, pool) in enumerate(plan):
        in_mask = _binary_stage(layers, masks, positions, rng, prev, width, 3, 1,
                                in_mask, f"vgg.conv{bi}")
        prev = width
        if pool:
            layers.append(AvgPool(2))
            spatial //= 2
    layers.append(Flatten())
    feat = prev * spatial * spatial
    head = Linear(rng.normal(0.0, np.sqrt(2.0 / feat), size=(spec.classes, feat)),
                  np.zeros(spec.classes), in_mask=in_mask,
                  in_expand=spatial * spatial)
    layers.append(head)
    return Network(layers, masks, positions, spec=spec)


def _residual_block(rng, masks, positions, pos, c_in, c_out, stride, in_mask, name):
    mask = _placeholder_mask(c_out, name)
    conv1 = Conv2d(_conv_init(rng, c_out, c_in, 3), None, binary=True, pad=1,
                   stride=stride, out_mask=mask, in_mask=in_mask)
    bn1 = BatchNorm(c_out, channel_mask=mask)
    fmask = FeatureMask(mask)
    conv2 = Conv2d(_conv_init(rng, c_out, c_out, 3), None, binary=True, pad=1,
                   in_mask=mask)
    bn2 = BatchNorm(c_out)
    if stride != 1 or c_in != c_out:
        sc = Conv2d(_conv_init(rng, c_out, c_in, 1), None, binary=True,
                    stride=stride, in_mask=in_mask)
        sbn = BatchNorm(c_out)
    else:
        sc, sbn = None, None
    masks.append(mask)
    positions.append(pos)
    return ResidualBlock(conv1, bn1, fmask, conv2, bn2, sc, sbn)


def _build_resnet(spec, rng):
    c, h, w = spec.input_shape
    if len(spec.widths) != 2:
        raise ValueError("resnet-mini takes 2 stage widths")
    w0, w1 = spec.widths
    layers, masks, positions = [], [], []
    layers += [
        Conv2d(_conv_init(rng, w0, c, 3), None, binary=False, pad=1, first_layer=True),
        BatchNorm(w0),
        SignAct(),
    ]
    # Block-output channels stay unpruned so shortcut adds keep their width;
    # only each block's first conv carries a mask, and no cross-block
    # in_mask wiring is needed.
    layers.append(_residual_block(rng, masks, positions, len(layers),
                                  w0, w0, 1, None, "resnet.b0.conv1"))
    layers.append(_residual_block(rng, masks, positions, len(layers),
                                  w0, w1, 2, None, "resnet.b1.conv1"))
    layers.append(GlobalAvgPool())
    head = Linear(rng.normal(0.0, np.sqrt(2.0 / w1), size=(spec.classes, w1)),
                  np.zeros(spec.classes))
    layers.append(head)
    return Network(layers, masks, positions, spec=spec)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _collect_arrays(net: Network) -> list[tuple[str, np.ndarray]]:
    items = list(net.state_items())
    for i, mask in enumerate(net.masks):
        items.append((f"mask{i}.m", mask.m))
    return items


def save_checkpoint(net: Network, path, extra: dict | None = None) -> None:
    """Serialize a built model bitwise (parameters, bn stats, masks)."""
    header = {
        "spec": net.spec.to_dict(),
        "mask_modes": [m.mode.value for m in net.masks],
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    arrays = _collect_arrays(net)
    body = bytearray()
    body += struct.pack("<I", CHECKPOINT_VERSION)
    body += struct.pack("<I", len(header_bytes)) + header_bytes
    body += struct.pack("<I", len(arrays))
    for name, arr in arrays:
        nb = name.encode()
        dt = arr.dtype.str.encode()  # e.g. b"<f8"
        raw = np.ascontiguousarray(arr).tobytes()
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<H", len(dt)) + dt
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += struct.pack("<Q", len(raw)) + raw
    crc = zlib.crc32(bytes(body))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + bytes(body) + struct.pack("<I", crc))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes at offset {self.off}, "
                f"file has {len(self.data)}"
            )
        chunk = self.data[self.off : self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[Network, dict]:
    """Rebuild a model from a checkpoint; forward outputs reproduce bitwise."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0")
    if len(data) < 8:
        raise CheckpointError("truncated checkpoint: missing CRC trailer")
    body = data[4:-4]
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != stored_crc:
        raise CheckpointError("CRC mismatch: checkpoint corrupt")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen))
    spec = ModelSpec.from_dict(header["spec"])
    net = build(spec, seed=0)
    targets = dict(_collect_arrays(net))
    (n_arrays,) = r.unpack("<I")
    for _ in range(n_arrays):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (dlen,) = r.unpack("<H")
        dtype = np.dtype(r.take(dlen).decode())
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        (blen,) = r.unpack("<Q")
        raw = r.take(blen)
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
        if name not in targets:
            raise CheckpointError(f"unknown array {name!r} in checkpoint")
        if targets[name].shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: {targets[name].shape} vs {arr.shape}"
            )
        targets[name][...] = arr
    for mask, mode in zip(net.masks, header["mask_modes"]):
        mask.mode = MaskMode(mode)
    return net, header["extra"]
