"""
This module contains the attention alignment objective: value-norm weighted
attention maps, the per-row ratio and negative losses over supervised rows,
the schedule of the alignment weight and the combined training loss.
"""

from dataclasses import dataclass, field
from enum import Enum
from functools import reduce
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .errors import ContractError, StalenessError
from .model import AttentionCapture, NoisedSequence, dlm_sft_loss
from .numerics import Tensor
from .supervision import MaskConvention, SupervisionMask


class ValueWeighting(str, Enum):
    KEY_INDEX = "key_index"
    QUERY_INDEX = "query_index"
    NONE = "none"


class GammaSchedule(str, Enum):
    TRIANGULAR = "triangular"
    CONSTANT = "constant"


@dataclass
class AlignConfig:
    """
    Settings of the alignment loss.

    Attributes:
        enabled: Add the alignment term to the training loss.
        alpha: Minimum ratio between mean encouraged and mean neutral
            attention of a row.
        lam: Strength of the penalty on discouraged attention.
        gamma_min: Weight at the start and the end of training.
        gamma_max: Weight at the end of the warm-up.
        t1: Last warm-up step; ``warmup_frac * t2`` when not given.
        t2: Total steps; the planned number of optimizer steps when not given.
        warmup_frac: Fraction of ``t2`` used as warm-up when ``t1`` is unset.
        supervised_layers: Layers carrying the loss; all layers when not given.
        v_weighting: ``key_index`` scales column j by the norm of value row j,
            ``query_index`` scales row i by the norm of value row i, ``none``
            uses raw attention.
        eps: Floor added to the neutral mean in the ratio test.
        convention: Orientation of the supervision masks.
        gamma_schedule: ``triangular``, or ``constant`` to hold ``gamma_max``.
    """

    enabled: bool = True
    alpha: float = 3.0
    lam: float = 100.0
    gamma_min: float = 0.0
    gamma_max: float = 1.0
    t1: Optional[int] = None
    t2: Optional[int] = None
    warmup_frac: float = 0.1
    supervised_layers: Optional[List[int]] = None
    v_weighting: str = ValueWeighting.KEY_INDEX.value
    eps: float = 1e-8
    convention: str = MaskConvention.FIGURE_ALIGNED.value
    gamma_schedule: str = GammaSchedule.TRIANGULAR.value

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ContractError("alpha must be positive")
        if self.lam < 0:
            raise ContractError("lam must be nonnegative")
        if self.gamma_min > self.gamma_max:
            raise ContractError("gamma_min must not exceed gamma_max")
        if self.t1 is not None and self.t1 < 0:
            raise ContractError("t1 must be nonnegative")
        if self.t1 is not None and self.t2 is not None and self.t1 > self.t2:
            raise ContractError("t1 must not exceed t2")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ContractError("warmup_frac must lie in [0, 1]")
        for name, kind in (
            ("v_weighting", ValueWeighting),
            ("convention", MaskConvention),
            ("gamma_schedule", GammaSchedule),
        ):
            try:
                kind(getattr(self, name))
            except ValueError:
                raise ContractError(f"unknown {name}: {getattr(self, name)!r}")


def weighted_attention(capture: AttentionCapture, layer: int, config: AlignConfig) -> Tensor:
    """
    Head-averaged attention of one layer, weighted by value-row norms.

    Raises:
        ContractError: If the layer was not captured.
    """
    if layer not in capture.maps:
        raise ContractError(f"layer {layer} was not captured")
    weighting = ValueWeighting(config.v_weighting)
    heads = []
    for a, v in zip(capture.maps[layer], capture.values[layer]):
        if weighting is ValueWeighting.NONE:
            heads.append(a)
            continue
        norms = nx.l2_norm_rows(v)
        n = norms.shape[0]
        shape = (1, n) if weighting is ValueWeighting.KEY_INDEX else (n, 1)
        heads.append(a * nx.reshape(norms, shape))
    return reduce(nx.add, heads) / float(len(heads))


@dataclass
class RowLossBreakdown:
    """
    Per-row statistics over the supervised rows of one map.

    Arrays are aligned with ``rows``. ``aggregate`` is the differentiable mean
    of ``l_row``.
    """

    rows: np.ndarray
    a1: np.ndarray
    a0: np.ndarray
    ratio: np.ndarray
    l_ratio: np.ndarray
    l_neg: np.ndarray
    l_row: np.ndarray
    aggregate: Tensor
    has_pairs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    satisfied: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def mean_ratio(self) -> float:
        """Mean ratio over rows with both encouraged and neutral columns."""
        return float(self.ratio[self.has_pairs].mean()) if self.has_pairs.any() else float("nan")

    @property
    def median_ratio(self) -> float:
        return float(np.median(self.ratio[self.has_pairs])) if self.has_pairs.any() else float("nan")

    @property
    def frac_rows_satisfied(self) -> float:
        return float(self.satisfied[self.has_pairs].mean()) if self.has_pairs.any() else float("nan")


def row_losses(weighted: Tensor, mask: SupervisionMask, config: AlignConfig) -> RowLossBreakdown:
    """
    Ratio and negative losses of every row with a nonzero mask entry.

    For a supervised row i, ``a1`` and ``a0`` are the mean weighted attention
    over the +1 and the 0 columns. The ratio loss ``-a1 / (a1 + a0)`` is
    active only when both column sets are nonempty and
    ``a1 / (a0 + eps) < alpha``. The negative loss is ``lam`` times the sum of
    squared weighted attention over the -1 columns.

    Raises:
        ContractError: If the map and the mask differ in size.
    """
    if weighted.shape != (mask.seq_len, mask.seq_len):
        raise ContractError(f"attention of shape {weighted.shape} does not match mask length {mask.seq_len}")
    rows = np.asarray(mask.valid_rows, dtype=np.int64)
    if rows.size == 0:
        empty = np.zeros(0)
        return RowLossBreakdown(rows, empty, empty, empty, empty, empty, empty, nx.tensor(0.0))

    labels = mask.to_dense()[rows]
    pos = (labels == 1).astype(np.float64)
    zero = (labels == 0).astype(np.float64)
    neg = (labels == -1).astype(np.float64)
    n1, n0 = pos.sum(axis=1), zero.sum(axis=1)

    w = nx.take_rows(weighted, rows)
    a1 = nx.sum(w * pos, axis=1) / np.maximum(n1, 1.0)
    a0 = nx.sum(w * zero, axis=1) / np.maximum(n0, 1.0)
    ratio = a1.data / (a0.data + config.eps)
    has_pairs = (n1 > 0) & (n0 > 0)
    total = a1.data + a0.data
    active = has_pairs & (ratio < config.alpha) & (total > 0)

    gate = active.astype(np.float64)
    l_ratio = -(a1 * gate) / (a1 + a0 + (1.0 - gate))
    l_neg = nx.sum(w * w * neg, axis=1) * config.lam
    l_row = l_ratio + l_neg
    return RowLossBreakdown(
        rows=rows,
        a1=np.array(a1.data),
        a0=np.array(a0.data),
        ratio=ratio,
        l_ratio=np.array(l_ratio.data),
        l_neg=np.array(l_neg.data),
        l_row=np.array(l_row.data),
        aggregate=nx.mean(l_row),
        has_pairs=has_pairs,
        satisfied=has_pairs & ~active,
    )


def schedule_bounds(config: AlignConfig, total_steps: Optional[int] = None) -> Tuple[float, float]:
    t2 = config.t2 if config.t2 is not None else total_steps
    if t2 is None:
        raise ContractError("the gamma schedule needs t2 or the total number of steps")
    t1 = config.t1 if config.t1 is not None else config.warmup_frac * t2
    return float(min(t1, t2)), float(t2)


def gamma_at(step: float, config: AlignConfig, total_steps: Optional[int] = None) -> float:
    """
    Weight of the alignment term at an optimizer step.

    Rises linearly from ``gamma_min`` at step 0 to ``gamma_max`` at ``t1`` and
    falls linearly back to ``gamma_min`` at ``t2``. Steps outside ``[0, t2]``
    are clamped. The constant schedule always returns ``gamma_max``.
    """
    if GammaSchedule(config.gamma_schedule) is GammaSchedule.CONSTANT:
        return config.gamma_max
    t1, t2 = schedule_bounds(config, total_steps)
    t = min(max(float(step), 0.0), t2)
    lo, hi = config.gamma_min, config.gamma_max
    if t1 > 0 and t <= t1:
        return lo + (hi - lo) * t / t1
    if t2 > t1:
        return hi - (hi - lo) * (t - t1) / (t2 - t1)
    return hi


def effective_gamma(step: float, config: AlignConfig, total_steps: Optional[int] = None) -> float:
    return gamma_at(step, config, total_steps) if config.enabled else 0.0


def alignment_loss(capture: AttentionCapture, mask: SupervisionMask, config: AlignConfig) -> Tuple[Tensor, List[RowLossBreakdown]]:
    """Row loss of one sample averaged over the supervised layers."""
    layers = config.supervised_layers if config.supervised_layers is not None else capture.layers
    if not layers:
        raise ContractError("no supervised layers")
    breakdowns = [row_losses(weighted_attention(capture, layer, config), mask, config) for layer in layers]
    loss = reduce(nx.add, [b.aggregate for b in breakdowns]) / float(len(breakdowns))
    return loss, breakdowns


@dataclass
class TotalLoss:
    """The training objective of one batch and its logged components."""

    total: Tensor
    loss_dlm: float
    loss_align: float
    gamma: float
    n_supervised: int
    breakdowns: List[RowLossBreakdown] = field(default_factory=list)

    @property
    def mean_ratio(self) -> float:
        values = [b.mean_ratio for b in self.breakdowns if b.has_pairs.any()]
        return float(np.mean(values)) if values else float("nan")

    @property
    def frac_rows_satisfied(self) -> float:
        flags = np.concatenate([b.satisfied[b.has_pairs] for b in self.breakdowns] or [np.zeros(0)])
        return float(flags.mean()) if flags.size else float("nan")


def total_loss(
    logits: Sequence[Tensor],
    noised: Sequence[NoisedSequence],
    captures: Sequence[Optional[AttentionCapture]],
    masks: Sequence[Optional[SupervisionMask]],
    step: int,
    config: AlignConfig,
    total_steps: Optional[int] = None,
    reweight_by_inv_t: bool = False,
    tokenizer_hash: Optional[str] = None,
) -> TotalLoss:
    """
    Diffusion loss of a batch plus the weighted alignment term.

    The diffusion loss is the batch mean of per-sequence losses. The alignment
    term is the mean row loss over the samples that have a nonempty mask and
    a capture; it enters the total only when alignment is enabled and the
    scheduled weight is nonzero, but is always reported.

    Raises:
        StalenessError: If a mask was built under another tokenizer or for a
            sequence of another length.
    """
    if not len(logits) == len(noised) == len(captures) == len(masks):
        raise ContractError("batch components differ in length")
    per_sample = [dlm_sft_loss(lg, ns, reweight_by_inv_t) for lg, ns in zip(logits, noised)]
    loss_dlm = reduce(nx.add, per_sample) / float(len(per_sample))

    align_terms: List[Tensor] = []
    breakdowns: List[RowLossBreakdown] = []
    for ns, capture, mask in zip(noised, captures, masks):
        if mask is None or capture is None or mask.is_empty:
            continue
        if tokenizer_hash is not None and mask.tokenizer_hash != tokenizer_hash:
            raise StalenessError(f"mask for {mask.sample_id} was built under another tokenizer")
        if mask.seq_len != len(ns.noised):
            raise StalenessError(
                f"mask for {mask.sample_id} covers {mask.seq_len} tokens, sequence has {len(ns.noised)}"
            )
        term, layer_breakdowns = alignment_loss(capture, mask, config)
        align_terms.append(term)
        breakdowns.extend(layer_breakdowns)

    gamma = effective_gamma(step, config, total_steps)
    total = loss_dlm
    loss_align = float("nan")
    if align_terms:
        align = reduce(nx.add, align_terms) / float(len(align_terms))
        loss_align = align.item()
        if gamma != 0.0:
            total = loss_dlm + align * gamma
    return TotalLoss(
        total=total,
        loss_dlm=loss_dlm.item(),
        loss_align=loss_align,
        gamma=gamma,
        n_supervised=len(align_terms),
        breakdowns=breakdowns,
    )
