"""Learnable per-filter pruning masks (the subsidiary component).

A mask owns one real scalar per output filter of the conv layer it is
attached to; all positions of a filter are tied, so the scalar is stored
once.  Three modes:

  * IDEN   - mask output is the raw scalar (identity transform).
  * BIN    - mask output is (Sign(m) + 1) / 2, a hard keep/drop gate.
  * BYPASS - mask output is 1 for every filter; used while the main
             network trains so the near-zero scalars cannot zero the
             weights.

Gradients reach the scalars through the straight-through chain
dO/dm = 1/2 * [|m| <= 1].
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from binprune.ops import log_softmax, softmax, softmax_cross_entropy


class MaskMode(enum.Enum):
    IDEN = "iden"
    BIN = "bin"
    BYPASS = "bypass"


@dataclass
class MaskInitConfig:
    sigma: float = 1e-6  # magnitude scale, kept well under 1e-5
    pnr: float = 0.5  # target fraction of positive scalars


class FilterMask:
    """Per-filter mask scalars with mode, trainable flag and O-gradient buffer."""

    def __init__(self, m: np.ndarray, mode: MaskMode = MaskMode.BYPASS,
                 trainable: bool = False, name: str = ""):
        self.m = np.asarray(m, dtype=np.float64)
        self.mode = mode
        self.trainable = trainable
        self.name = name
        self.grad_o = np.zeros_like(self.m)

    @property
    def n_filters(self) -> int:
        return len(self.m)

    def transform(self) -> np.ndarray:
        """Mask output O per mode: Iden -> m, Bin -> (Sign(m)+1)/2, Bypass -> 1."""
        if self.mode is MaskMode.IDEN:
            return self.m.copy()
        if self.mode is MaskMode.BIN:
            return (np.where(self.m >= 0, 1.0, -1.0) + 1.0) / 2.0
        return np.ones_like(self.m)

    def gate(self) -> np.ndarray:
        """The channel gate the network applies: hard 0/1 in BIN, else all-ones."""
        if self.mode is MaskMode.BIN:
            return self.transform()
        return np.ones_like(self.m)

    def keep_bool(self) -> np.ndarray:
        return self.gate() > 0.5

    def gather_active(self) -> bool:
        """Frozen BIN masks are realized by dropping channels outright."""
        return self.mode is MaskMode.BIN and not self.trainable

    def zero_grad(self) -> None:
        self.grad_o[:] = 0.0


def mask_init(n_filters: int, cfg: MaskInitConfig, seed: int) -> FilterMask:
    """Draw mask scalars: magnitudes uniform in (0, sigma), signs assigned so
    that exactly round(pnr * n) scalars are positive, then shuffled."""
    if n_filters < 1:
        raise ValueError("need at least one filter")
    if cfg.sigma <= 0:
        raise ValueError(f"sigma must be positive, got {cfg.sigma}")
    if not 0.0 <= cfg.pnr <= 1.0:
        raise ValueError(f"pnr must lie in [0, 1], got {cfg.pnr}")
    rng = np.random.default_rng(seed)
    mags = rng.uniform(0.0, cfg.sigma, size=n_filters)
    mags = np.maximum(mags, cfg.sigma * 1e-12)  # open interval: exclude 0
    n_pos = round(cfg.pnr * n_filters)
    signs = np.where(np.arange(n_filters) < n_pos, 1.0, -1.0)
    rng.shuffle(signs)
    return FilterMask(mags * signs)


def apply_mask(weights: np.ndarray, o: np.ndarray) -> np.ndarray:
    """Screen latent filter weights: W_hat_n = O_n * W_n (broadcast per filter)."""
    if len(o) != weights.shape[0]:
        raise ValueError(
            f"mask length {len(o)} != filter count {weights.shape[0]}"
        )
    return weights * np.asarray(o).reshape(-1, *([1] * (weights.ndim - 1)))


def mask_grad(dl_do: np.ndarray, mask: FilterMask) -> np.ndarray:
    """Straight-through gradient to the mask scalars: dL/dm = dL/dO * 1/2 * [|m|<=1]."""
    if mask.mode is not MaskMode.BIN:
        raise ValueError(f"mask gradient only defined in BIN mode, not {mask.mode}")
    return dl_do * 0.5 * (np.abs(mask.m) <= 1.0)


def pruned_indices(mask: FilterMask) -> np.ndarray:
    """Indices of dropped filters (gate value 0)."""
    if mask.mode is not MaskMode.BIN:
        raise ValueError("pruned indices require BIN mode")
    return np.flatnonzero(mask.gate() == 0.0)


def distill_loss(
    student_logits: np.ndarray, teacher_logits: np.ndarray, temperature: float = 1.0
) -> tuple[float, np.ndarray]:
    """Cross-entropy of the softened student under the softened teacher.

    The teacher entropy term is a constant in the student and is dropped,
    so the value is H(p, q) with p = softmax(t/T), q = softmax(z/T).
    Returns the batch mean and its gradient wrt the student logits.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(
            f"class count mismatch: {student_logits.shape} vs {teacher_logits.shape}"
        )
    b = student_logits.shape[0]
    p = softmax(teacher_logits / temperature)
    logq = log_softmax(student_logits / temperature)
    loss = float(-(p * logq).sum(axis=1).mean())
    grad = (softmax(student_logits / temperature) - p) / (temperature * b)
    return loss, grad


def subsidiary_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    o: np.ndarray,
    teacher_logits: np.ndarray | None,
    alpha_reg: float,
    beta_distill: float,
    temperature: float = 1.0,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Selection objective: cross-entropy + alpha * ||O||_1 + beta * distill.

    With O in {0,1} the regularizer equals the kept-filter count.  Returns
    (total, dtotal/dlogits, dtotal/dO); the O-gradient covers only the
    regularizer term, the data/distill parts reach O through the network.
    """
    if alpha_reg < 0 or beta_distill < 0:
        raise ValueError("regularizer weights must be non-negative")
    loss, dlogits = softmax_cross_entropy(logits, labels)
    total = loss + alpha_reg * float(np.sum(o))
    if beta_distill > 0:
        if teacher_logits is None:
            raise ValueError("beta_distill > 0 requires teacher logits")
        dloss, dgrad = distill_loss(logits, teacher_logits, temperature)
        total += beta_distill * dloss
        dlogits = dlogits + beta_distill * dgrad
    do = np.full_like(np.asarray(o, dtype=np.float64), alpha_reg)
    return total, dlogits, do
