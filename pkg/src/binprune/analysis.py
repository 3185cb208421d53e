"""FLOPs, memory and PFR accounting.

Cost model: a multiply-accumulate counts as one op, binary-layer ops are
divided by 64 (XNOR + 64-wide bit-counting), so

    effective_flops = fp_macs + binary_macs / 64

Memory is 1 bit per binary weight, 32 bits per full-precision weight or
bias, and 32 bits per scaling factor and per batchnorm statistic.
Batchnorm, pooling and activation ops are excluded from FLOPs.  Speedup
and memory-saving ratios are taken against the all-full-precision
variant of the same layer stack.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from binprune.bintensor import conv_output_size
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

BINARY_PARALLELISM = 64
FP_BITS = 32


@dataclass
class CostItem:
    name: str
    kind: str  # conv | linear | bn
    binary: bool = False
    macs: int = 0
    weight_count: int = 0
    bias_count: int = 0
    scale_count: int = 0  # per-filter scaling factors (binary layers)
    stat_count: int = 0  # batchnorm running statistics


@dataclass
class FlopsReport:
    items: list[CostItem] = field(default_factory=list)
    fp_ops: int = 0
    binary_ops: int = 0
    effective_flops: float = 0.0
    memory_bits: int = 0
    ref_flops: int = 0  # all-full-precision variant of the same stack
    ref_memory_bits: int = 0
    speedup: float = 0.0
    memory_saving: float = 0.0


def _keep_count(mask, n):
    if mask is None:
        return n
    return int(mask.keep_bool().sum())


def _conv_item(name, conv: Conv2d, c_in_kept, h_out, w_out) -> CostItem:
    kept_out = _keep_count(conv.out_mask, conv.out_channels)
    k = conv.weight.shape[2]
    return CostItem(
        name=name,
        kind="conv",
        binary=conv.binary,
        macs=kept_out * c_in_kept * k * k * h_out * w_out,
        weight_count=kept_out * c_in_kept * k * k,
        bias_count=0 if conv.bias is None else kept_out,
        scale_count=kept_out if conv.binary else 0,
    )


def cost_items(net: Network) -> list[CostItem]:
    """Shape-trace a model into per-layer cost entries, masks applied."""
    c, h, w = net.spec.input_shape
    kept_c = c
    items = []
    for pos, layer in enumerate(net.layers):
        name = f"layer{pos}"
        if isinstance(layer, Conv2d):
            k, s, p = layer.weight.shape[2], layer.stride, layer.pad
            h = conv_output_size(h, k, s, p)
            w = conv_output_size(w, k, s, p)
            items.append(_conv_item(name, layer, kept_c, h, w))
            c = layer.out_channels
            kept_c = _keep_count(layer.out_mask, c)
        elif isinstance(layer, BatchNorm):
            kept = _keep_count(layer.channel_mask, len(layer.state.running_mean))
            items.append(CostItem(name=name, kind="bn", stat_count=2 * kept))
        elif isinstance(layer, AvgPool):
            h //= layer.size
            w //= layer.size
        elif isinstance(layer, ResidualBlock):
            items.extend(_block_items(name, layer, kept_c, h, w))
            h = conv_output_size(h, 3, layer.conv1.stride, 1)
            w = conv_output_size(w, 3, layer.conv1.stride, 1)
            c = kept_c = layer.conv2.out_channels
        elif isinstance(layer, (GlobalAvgPool, Flatten)):
            if isinstance(layer, Flatten):
                kept_c = kept_c * h * w
            h = w = 1
        elif isinstance(layer, Linear):
            out = layer.weight.shape[0]
            items.append(CostItem(
                name=name, kind="linear", macs=out * kept_c,
                weight_count=out * kept_c, bias_count=out,
            ))
            c = kept_c = out
        elif isinstance(layer, (SignAct, FeatureMask)):
            pass
        else:
            raise ValueError(f"unresolved layer kind at position {pos}: {layer!r}")
    return items


def _block_items(name, block: ResidualBlock, c_in, h, w):
    h_out = conv_output_size(h, 3, block.conv1.stride, 1)
    w_out = conv_output_size(w, 3, block.conv1.stride, 1)
    items = [_conv_item(f"{name}.conv1", block.conv1, c_in, h_out, w_out)]
    kept_mid = _keep_count(block.conv1.out_mask, block.conv1.out_channels)
    items.append(CostItem(name=f"{name}.bn1", kind="bn", stat_count=2 * kept_mid))
    items.append(_conv_item(f"{name}.conv2", block.conv2, kept_mid, h_out, w_out))
    items.append(CostItem(name=f"{name}.bn2", kind="bn",
                          stat_count=2 * block.conv2.out_channels))
    if block.shortcut_conv is not None:
        items.append(_conv_item(f"{name}.shortcut", block.shortcut_conv,
                                c_in, h_out, w_out))
        items.append(CostItem(name=f"{name}.shortcut_bn", kind="bn",
                              stat_count=2 * block.shortcut_conv.out_channels))
    return items


def count_flops(source) -> FlopsReport:
    """Build the full cost report for a model or a reference item list."""
    items = cost_items(source) if isinstance(source, Network) else list(source)
    report = FlopsReport(items=items)
    for it in items:
        if it.binary:
            report.binary_ops += it.macs
        else:
            report.fp_ops += it.macs
    report.effective_flops = report.fp_ops + report.binary_ops / BINARY_PARALLELISM
    report.memory_bits = _memory_bits(items)
    report.ref_flops = sum(it.macs for it in items)
    report.ref_memory_bits = _memory_bits(items, force_fp=True)
    report.speedup = report.ref_flops / report.effective_flops
    report.memory_saving = report.ref_memory_bits / report.memory_bits
    return report


def _memory_bits(items, force_fp: bool = False) -> int:
    total = 0
    for it in items:
        binary = it.binary and not force_fp
        total += it.weight_count * (1 if binary else FP_BITS)
        total += it.bias_count * FP_BITS
        if not force_fp:
            total += it.scale_count * FP_BITS
        total += it.stat_count * FP_BITS
    return total


def count_memory_bits(source) -> int:
    items = cost_items(source) if isinstance(source, Network) else list(source)
    return _memory_bits(items)


def pfr(report) -> float:
    """Pruned-filter ratio of a PruneReport: pruned / original binary filters."""
    total = sum(e["n_filters"] for e in report.layers)
    if total == 0:
        return 0.0
    return sum(len(e["pruned"]) for e in report.layers) / total


# ---------------------------------------------------------------------------
# Reference stacks for the published ResNet-18 cost figures
# ---------------------------------------------------------------------------


def resnet18_reference(variant: str = "fp") -> list[CostItem]:
    """ImageNet ResNet-18 (224x224, 1000 classes) as a cost-item list.

    variant "fp": everything full-precision.  variant "xnor": first conv,
    classifier and the 1x1 downsampling shortcuts stay full-precision,
    every other conv is binary.
    """
    if variant not in ("fp", "xnor"):
        raise ValueError(f"unknown variant {variant!r}")
    binary_ok = variant == "xnor"
    items = [
        CostItem("conv1", "conv", binary=False, macs=64 * 3 * 49 * 112 * 112,
                 weight_count=64 * 3 * 49),
        CostItem("bn1", "bn", stat_count=128),
    ]
    stages = [(64, 64, 56), (64, 128, 28), (128, 256, 14), (256, 512, 7)]
    for s, (c_in, c_out, size) in enumerate(stages):
        for b in range(2):
            cin = c_in if b == 0 else c_out
            for ci in (1, 2):
                cin_conv = cin if ci == 1 else c_out
                items.append(CostItem(
                    f"s{s}.b{b}.conv{ci}", "conv", binary=binary_ok,
                    macs=c_out * cin_conv * 9 * size * size,
                    weight_count=c_out * cin_conv * 9,
                    scale_count=c_out if binary_ok else 0,
                ))
                items.append(CostItem(f"s{s}.b{b}.bn{ci}", "bn", stat_count=2 * c_out))
            if b == 0 and s > 0:
                items.append(CostItem(
                    f"s{s}.b{b}.downsample", "conv", binary=False,
                    macs=c_out * cin * size * size, weight_count=c_out * cin,
                ))
                items.append(CostItem(f"s{s}.b{b}.ds_bn", "bn", stat_count=2 * c_out))
    items.append(CostItem("fc", "linear", macs=512 * 1000,
                          weight_count=512 * 1000, bias_count=1000))
    return items


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def emit_report(report: FlopsReport, txt_path, csv_path=None) -> None:
    lines = [
        f"{'layer':<24}{'kind':<8}{'binary':<8}{'macs':>14}{'weights':>12}",
    ]
    for it in report.items:
        lines.append(
            f"{it.name:<24}{it.kind:<8}{str(it.binary):<8}"
            f"{it.macs:>14}{it.weight_count:>12}"
        )
    lines += [
        "",
        f"fp ops:            {report.fp_ops}",
        f"binary ops:        {report.binary_ops}",
        f"effective FLOPs:   {report.effective_flops:.6g}",
        f"memory bits:       {report.memory_bits} ({report.memory_bits / 1e6:.2f} Mbit)",
        f"speedup vs fp:     {report.speedup:.2f}x",
        f"memory saving:     {report.memory_saving:.2f}x",
    ]
    with open(txt_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "kind", "binary", "macs", "weights",
                             "bias", "scales", "bn_stats"])
            for it in report.items:
                writer.writerow([it.name, it.kind, int(it.binary), it.macs,
                                 it.weight_count, it.bias_count,
                                 it.scale_count, it.stat_count])
