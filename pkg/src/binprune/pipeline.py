"""The three-stage main/subsidiary pruning pipeline and its baselines.

Stages, strictly bottom-up over the prunable binary layers:

  1. feature learning: masks bypassed and frozen, the whole main network
     trains from scratch; a teacher logit snapshot is taken afterwards.
  2. per layer i: selection trains only mask i (hard 0/1 gate, STE
     gradients) against cross-entropy + alpha * kept-count + beta *
     distillation-to-teacher, then polishes it with a bounded greedy
     descent over 1- and 2-filter sign flips of the same objective.
  3. after each selection the main layers from i upward retrain with all
     masks frozen.

Rule-based MSF baselines (prune by magnitude of each filter's scaling
factor), the L1 perturbation bound, and the exhaustive tiny-scale mask
search used as a test oracle live here too.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from binprune.masks import (
    FilterMask,
    MaskInitConfig,
    MaskMode,
    mask_grad,
    mask_init,
    pruned_indices,
    subsidiary_loss,
)
from binprune.net import Conv2d, Network, ResidualBlock, SGD
from binprune.ops import filter_scales, softmax_cross_entropy
from binprune.zoo import ModelSpec, build


class FreezeStateError(RuntimeError):
    """Raised when a pipeline stage runs under the wrong freeze state."""


@dataclass
class PruneSchedule:
    epochs_feature: int = 30
    epochs_select: int = 10
    epochs_retrain: int = 10
    batch_size: int = 64
    lr_main: float = 1e-4
    lr_decay: float = 0.1
    lr_decay_every: int = 20
    momentum: float = 0.0
    lr_mask: float = 1e-3
    alpha_reg: float = 1e-3
    beta_distill: float = 1.0
    temperature: float = 1.0
    sigma: float = 1e-6
    pnr: float = 0.5
    seed: int = 0
    # bounded local-descent polish on the selection objective after the
    # gradient epochs; 0 sweeps disables it
    refine_sweeps: int = 2
    refine_samples: int = 512  # objective-evaluation sample cap (0 = all)


@dataclass
class PruneReport:
    method: str
    layers: list[dict] = field(default_factory=list)
    global_pfr: float = 0.0
    error_before: float = float("nan")
    error_after: float = float("nan")
    traces: dict = field(default_factory=dict)

    def finalize(self) -> None:
        total = sum(e["n_filters"] for e in self.layers)
        pruned = sum(len(e["pruned"]) for e in self.layers)
        self.global_pfr = pruned / total if total else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PruneResult:
    model: Network  # physically shrunk
    masked: Network  # same weights with masks still attached
    report: PruneReport


# ---------------------------------------------------------------------------
# Freeze-state management
# ---------------------------------------------------------------------------


def prunable_convs(net: Network) -> list[Conv2d]:
    convs = []
    for pos in net.mask_positions:
        layer = net.layers[pos]
        convs.append(layer.conv1 if isinstance(layer, ResidualBlock) else layer)
    return convs


def apply_feature_learning_state(net: Network) -> None:
    net.set_all_trainable(True)
    for mask in net.masks:
        mask.mode = MaskMode.BYPASS
        mask.trainable = False


def apply_select_state(net: Network, i: int) -> None:
    net.set_all_trainable(False)
    for j, mask in enumerate(net.masks):
        mask.mode = MaskMode.BIN if j <= i else MaskMode.BYPASS
        mask.trainable = j == i


def apply_retrain_state(net: Network, i: int) -> None:
    boundary = net.mask_positions[i]
    for pos, layer in enumerate(net.layers):
        layer.set_trainable(pos >= boundary)
    for j, mask in enumerate(net.masks):
        mask.mode = MaskMode.BIN if j <= i else MaskMode.BYPASS
        mask.trainable = False


def _mask_state(net):
    return [(m.mode, m.trainable) for m in net.masks]


def _check_state(net: Network, expect_masks, expect_layers, stage: str) -> None:
    if _mask_state(net) != expect_masks:
        raise FreezeStateError(f"{stage}: mask modes/trainability are wrong")
    actual = [layer.trainable for layer in net.layers]
    if actual != expect_layers:
        raise FreezeStateError(f"{stage}: layer freeze flags are wrong")


def check_feature_learning_state(net: Network) -> None:
    _check_state(
        net,
        [(MaskMode.BYPASS, False)] * len(net.masks),
        [True] * len(net.layers),
        "feature_learning",
    )


def check_select_state(net: Network, i: int) -> None:
    expect = [
        (MaskMode.BIN if j <= i else MaskMode.BYPASS, j == i)
        for j in range(len(net.masks))
    ]
    _check_state(net, expect, [False] * len(net.layers), f"select_layer({i})")


def check_retrain_state(net: Network, i: int) -> None:
    boundary = net.mask_positions[i]
    expect_layers = [pos >= boundary for pos in range(len(net.layers))]
    expect = [(MaskMode.BIN if j <= i else MaskMode.BYPASS, False)
              for j in range(len(net.masks))]
    _check_state(net, expect, expect_layers, f"retrain_after({i})")


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------


def compute_logits(net: Network, dataset, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for every sample, in dataset index order."""
    chunks = []
    for start in range(0, dataset.n_samples, batch_size):
        chunks.append(net.forward(dataset.images[start : start + batch_size]))
    return np.concatenate(chunks, axis=0)


def evaluate_error(net: Network, dataset, batch_size: int = 256) -> float:
    logits = compute_logits(net, dataset, batch_size)
    return float(np.mean(logits.argmax(axis=1) != dataset.labels))


def evaluate_mask_objective(
    net: Network,
    i: int,
    dataset,
    teacher_logits: np.ndarray | None,
    alpha_reg: float,
    beta_distill: float,
    temperature: float = 1.0,
    batch_size: int = 256,
) -> float:
    """Selection objective of mask i over the whole dataset, eval mode."""
    mask = net.masks[i]
    total, n = 0.0, dataset.n_samples
    for start in range(0, n, batch_size):
        x = dataset.images[start : start + batch_size]
        y = dataset.labels[start : start + batch_size]
        t = teacher_logits[start : start + batch_size] if teacher_logits is not None else None
        logits = net.forward(x)
        loss, _, _ = subsidiary_loss(
            logits, y, np.zeros(0), t, 0.0, beta_distill, temperature
        )
        total += loss * len(y)
    return total / n + alpha_reg * float(mask.gate().sum())


# ---------------------------------------------------------------------------
# Training stages
# ---------------------------------------------------------------------------


def _train_main(net, dataset, schedule, epochs, log, stage, layer_idx):
    opt = SGD(schedule.lr_main, schedule.lr_decay, schedule.lr_decay_every,
              schedule.momentum)
    trace = []
    for epoch in range(epochs):
        losses, correct, seen = [], 0, 0
        for _, x, y in dataset.batches(schedule.batch_size, schedule.seed, epoch):
            net.zero_grads()
            logits = net.forward(x, training=True)
            loss, dlogits = softmax_cross_entropy(logits, y)
            net.backward(dlogits)
            opt.step(net, epoch)
            losses.append(loss)
            correct += int((logits.argmax(axis=1) == y).sum())
            seen += len(y)
        row = {"stage": stage, "layer": layer_idx, "epoch": epoch,
               "loss": float(np.mean(losses)), "accuracy": correct / seen}
        trace.append(row)
        if log is not None:
            log(row)
    return trace


def feature_learning(net: Network, dataset, schedule: PruneSchedule, log=None):
    """Stage 1: train the whole main network; masks bypassed and frozen."""
    if dataset.n_samples == 0:
        raise ValueError("empty dataset")
    check_feature_learning_state(net)
    return _train_main(net, dataset, schedule, schedule.epochs_feature,
                       log, "feature", -1)


def select_layer(net: Network, i: int, dataset, schedule: PruneSchedule,
                 teacher_logits: np.ndarray | None, log=None) -> dict:
    """Stage 2 for one layer: train mask i on the selection objective."""
    check_select_state(net, i)
    mask = net.masks[i]
    trace = []
    for epoch in range(schedule.epochs_select):
        losses, kept = [], int(mask.keep_bool().sum())
        for idx, x, y in dataset.batches(schedule.batch_size, schedule.seed + 1 + i, epoch):
            net.zero_grads()
            logits = net.forward(x, training=True)
            t = teacher_logits[idx] if teacher_logits is not None else None
            total, dlogits, do_reg = subsidiary_loss(
                logits, y, mask.gate(), t,
                schedule.alpha_reg, schedule.beta_distill, schedule.temperature,
            )
            net.backward(dlogits)
            dm = mask_grad(mask.grad_o + do_reg, mask)
            mask.m -= schedule.lr_mask * dm
            losses.append(total)
        kept = int(mask.keep_bool().sum())
        row = {"stage": "select", "layer": i, "epoch": epoch,
               "loss": float(np.mean(losses)), "kept": kept}
        trace.append(row)
        if log is not None:
            log(row)
    _refine_mask(net, i, dataset, schedule, teacher_logits)
    degenerate = False
    if not mask.keep_bool().any():
        # All filters pruned: layer-level pruning is out of scope, keep the
        # single filter the mask liked best.
        degenerate = True
        best = int(np.argmax(mask.m))
        mask.m[best] = abs(mask.m[best]) if mask.m[best] != 0 else schedule.sigma
    omega = pruned_indices(mask)
    return {
        "layer": i,
        "name": mask.name,
        "n_filters": mask.n_filters,
        "pruned": [int(v) for v in omega],
        "pfr": len(omega) / mask.n_filters,
        "degenerate": degenerate,
        "trace": trace,
    }


def _refine_mask(net: Network, i: int, dataset, schedule: PruneSchedule,
                 teacher_logits) -> None:
    """Greedy descent over single and paired sign flips of mask i.

    The gradient epochs get the mask near a good configuration; this
    polish walks downhill on the true selection objective until no 1- or
    2-flip move improves it (or the sweep budget runs out).  Objective
    evaluations use a fixed prefix of the dataset to bound the cost.
    """
    if schedule.refine_sweeps <= 0:
        return
    mask = net.masks[i]
    n = mask.n_filters
    ds = dataset
    teacher = teacher_logits
    if schedule.refine_samples and dataset.n_samples > schedule.refine_samples:
        ds = dataset.subset(schedule.refine_samples)
        teacher = None if teacher is None else teacher[: schedule.refine_samples]

    def objective():
        return evaluate_mask_objective(
            net, i, ds, teacher, schedule.alpha_reg,
            schedule.beta_distill, schedule.temperature,
        )

    best = objective()
    for _ in range(schedule.refine_sweeps):
        moves = [(f,) for f in range(n)]
        if n <= EXHAUSTIVE_FILTER_LIMIT:
            moves += [(a, b) for a in range(n) for b in range(a + 1, n)]
        else:
            # wide layers: keep the quadratic part to kept/dropped swaps
            keep = np.flatnonzero(mask.keep_bool())
            drop = np.flatnonzero(~mask.keep_bool())
            moves += [(int(a), int(b)) for a in keep for b in drop]
        improved = False
        for mv in moves:
            idx = list(mv)
            old = mask.m[idx].copy()
            mask.m[idx] = -old
            if mask.keep_bool().any():
                obj = objective()
                if obj < best - 1e-12:
                    best, improved = obj, True
                    continue
            mask.m[idx] = old
        if not improved:
            break


def retrain_after(net: Network, i: int, dataset, schedule: PruneSchedule, log=None):
    """Stage 3: fine-tune main layers from the pruned layer upward."""
    check_retrain_state(net, i)
    return _train_main(net, dataset, schedule, schedule.epochs_retrain,
                       log, "retrain", i)


def init_masks(net: Network, schedule: PruneSchedule) -> None:
    cfg = MaskInitConfig(schedule.sigma, schedule.pnr)
    for k, mask in enumerate(net.masks):
        fresh = mask_init(mask.n_filters, cfg, seed=(schedule.seed, 1000 + k))
        mask.m[:] = fresh.m
        mask.mode = MaskMode.BYPASS
        mask.trainable = False


def feature_learn_main(spec: ModelSpec, dataset, schedule: PruneSchedule,
                       eval_dataset=None, log=None):
    """Build, init masks and run the feature-learning stage.

    Returns (net, teacher_logits, feature_trace, error_before); the
    teacher snapshot is what distillation later trains against."""
    eval_dataset = eval_dataset or dataset
    net = build(spec, seed=schedule.seed)
    init_masks(net, schedule)
    apply_feature_learning_state(net)
    trace = feature_learning(net, dataset, schedule, log)
    error_before = evaluate_error(net, eval_dataset)
    teacher = compute_logits(net, dataset)
    return net, teacher, trace, error_before


def run_selection_stages(net: Network, dataset, schedule: PruneSchedule,
                         teacher: np.ndarray | None, eval_dataset=None,
                         log=None, report: PruneReport | None = None) -> PruneResult:
    """Stages 2+3 for every prunable layer, bottom-up, on a trained net."""
    eval_dataset = eval_dataset or dataset
    report = report or PruneReport(method="learned")
    for i in range(len(net.masks)):
        apply_select_state(net, i)
        entry = select_layer(net, i, dataset, schedule, teacher, log)
        report.layers.append(entry)
        apply_retrain_state(net, i)
        report.traces[f"retrain{i}"] = retrain_after(net, i, dataset, schedule, log)
    report.error_after = evaluate_error(net, eval_dataset)
    report.finalize()
    return PruneResult(model=net.shrunk(), masked=net, report=report)


def prune_pipeline(spec: ModelSpec, dataset, schedule: PruneSchedule,
                   eval_dataset=None, log=None) -> PruneResult:
    """Full pipeline: feature learning, then per-layer select + retrain,
    bottom-up; returns the physically shrunk model plus the report."""
    eval_dataset = eval_dataset or dataset
    net, teacher, trace, error_before = feature_learn_main(
        spec, dataset, schedule, eval_dataset, log
    )
    report = PruneReport(method="learned")
    report.traces["feature"] = trace
    report.error_before = error_before
    return run_selection_stages(net, dataset, schedule, teacher,
                                eval_dataset, log, report)


# ---------------------------------------------------------------------------
# Rule-based MSF baselines
# ---------------------------------------------------------------------------


def msf_rank(conv_or_alpha) -> np.ndarray:
    """Filter indices in ascending scaling-factor order, ties by index."""
    alpha = (filter_scales(conv_or_alpha.weight)
             if isinstance(conv_or_alpha, Conv2d) else np.asarray(conv_or_alpha))
    return np.argsort(alpha, kind="stable")


def _target_count(target, n: int) -> int:
    if isinstance(target, (int, np.integer)):
        k = int(target)
    else:
        if target >= 1.0:
            raise ValueError(f"per-layer PFR target must be < 1, got {target}")
        k = round(target * n)
    if k >= n:
        raise ValueError(f"cannot prune all {n} filters of a layer")
    return k


def _msf_set_mask(conv: Conv2d, mask: FilterMask, target) -> list[int]:
    k = _target_count(target, mask.n_filters)
    order = msf_rank(conv)
    pruned = order[:k]
    mask.m[:] = 0.5
    mask.m[pruned] = -0.5
    mask.mode = MaskMode.BIN
    mask.trainable = False
    return [int(v) for v in pruned]


def _baseline_report(method, net, entries, eval_dataset, error_before):
    report = PruneReport(method=method, layers=entries)
    report.error_before = error_before
    report.error_after = evaluate_error(net, eval_dataset)
    report.finalize()
    return report


def msf_prune_layerwise(net: Network, targets, dataset, schedule: PruneSchedule,
                        eval_dataset=None, log=None) -> PruneResult:
    """Prune the lowest-alpha filters of every layer at once, then retrain
    globally with the same total epoch budget the cascade gets."""
    eval_dataset = eval_dataset or dataset
    error_before = evaluate_error(net, eval_dataset)
    convs = prunable_convs(net)
    entries = []
    for i, (conv, mask, target) in enumerate(zip(convs, net.masks, targets)):
        pruned = _msf_set_mask(conv, mask, target)
        entries.append({"layer": i, "name": mask.name, "n_filters": mask.n_filters,
                        "pruned": pruned, "pfr": len(pruned) / mask.n_filters,
                        "degenerate": False, "trace": []})
    net.set_all_trainable(True)
    _train_main(net, dataset, schedule,
                schedule.epochs_retrain * len(net.masks), log, "msf-layerwise", -1)
    report = _baseline_report("msf-layerwise", net, entries, eval_dataset, error_before)
    return PruneResult(model=net.shrunk(), masked=net, report=report)


def msf_prune_cascade(net: Network, targets, dataset, schedule: PruneSchedule,
                      eval_dataset=None, log=None) -> PruneResult:
    """Bottom-up: prune one layer by current scaling factors, retrain the
    layers above it, move on."""
    eval_dataset = eval_dataset or dataset
    error_before = evaluate_error(net, eval_dataset)
    convs = prunable_convs(net)
    entries = []
    for i, (conv, mask, target) in enumerate(zip(convs, net.masks, targets)):
        pruned = _msf_set_mask(conv, mask, target)
        entries.append({"layer": i, "name": mask.name, "n_filters": mask.n_filters,
                        "pruned": pruned, "pfr": len(pruned) / mask.n_filters,
                        "degenerate": False, "trace": []})
        apply_retrain_state(net, i)
        retrain_after(net, i, dataset, schedule, log)
    report = _baseline_report("msf-cascade", net, entries, eval_dataset, error_before)
    return PruneResult(model=net.shrunk(), masked=net, report=report)


# ---------------------------------------------------------------------------
# Analysis oracles
# ---------------------------------------------------------------------------


def l1_perturbation_bound(weights: np.ndarray, pruned_rows, tau: float) -> float:
    """Upper bound on ||W x - W' x||_1 for ||x||_inf <= tau when the rows in
    `pruned_rows` are zeroed: tau * sum of their L1 norms."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    rows = np.asarray(weights).reshape(np.asarray(weights).shape[0], -1)
    pruned_rows = list(pruned_rows)
    if not pruned_rows:
        return 0.0
    return float(np.abs(rows[pruned_rows]).sum() * tau)


EXHAUSTIVE_FILTER_LIMIT = 12


def exhaustive_mask_search(
    net: Network,
    i: int,
    dataset,
    alpha_reg: float,
    beta_distill: float = 0.0,
    teacher_logits: np.ndarray | None = None,
    temperature: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the selection objective for every 0/1 mask of layer i.

    Only feasible at tiny scale (filter count capped); this is the oracle
    the learned selection is measured against.  Returns (best 0/1 mask,
    objective table indexed by the mask's big-endian bit pattern).
    """
    mask = net.masks[i]
    n = mask.n_filters
    if n > EXHAUSTIVE_FILTER_LIMIT:
        raise ValueError(
            f"layer has {n} filters; exhaustive search capped at "
            f"{EXHAUSTIVE_FILTER_LIMIT}"
        )
    saved = (mask.m.copy(), mask.mode, mask.trainable)
    mask.mode = MaskMode.BIN
    # stay on the gating (not channel-gathering) path so the all-pruned
    # pattern evaluates cleanly instead of gathering zero channels
    mask.trainable = True
    table = np.empty(2**n)
    try:
        for bits in range(2**n):
            pattern = np.array([(bits >> (n - 1 - b)) & 1 for b in range(n)], float)
            mask.m[:] = pattern - 0.5
            table[bits] = evaluate_mask_objective(
                net, i, dataset, teacher_logits, alpha_reg, beta_distill, temperature
            )
        best = int(np.argmin(table))
        best_mask = np.array([(best >> (n - 1 - b)) & 1 for b in range(n)], float)
    finally:
        mask.m[:], mask.mode, mask.trainable = saved
    return best_mask, table
