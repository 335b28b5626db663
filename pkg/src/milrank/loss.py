"""Score-level ranking loss with smoothness/sparsity constraints.

All functions here are pure: they map instance scores (and hyper-parameters)
to loss values and exact subgradients. The margin of every hinge term is
fixed at 1. Scores are validated to lie in [0, 1]; anything outside signals
a caller bug and is rejected rather than clamped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scorer import ScorerGrads, ScorerParams

VARIANT_PROPOSED = "proposed"
VARIANT_BASELINE = "baseline"
SPARSITY_NEGATIVE = "negative-bag"
SPARSITY_POSITIVE = "positive-bag"


@dataclass(frozen=True)
class LossConfig:
    """Hyper-parameters of the composite loss.

    ``variant`` selects the full four-hinge loss ("proposed") or the single
    max-max hinge plus constraints ("baseline"). ``sparsity_target`` selects
    which bag the sparsity term sums over; the default is the negative bag.
    """

    mu1: float = 8e-5
    mu2: float = 8e-5
    mu3: float = 0.01
    variant: str = VARIANT_PROPOSED
    sparsity_target: str = SPARSITY_NEGATIVE

    def validate(self) -> None:
        if min(self.mu1, self.mu2, self.mu3) < 0:
            raise ValueError("mu1, mu2, mu3 must be non-negative")
        if self.variant not in (VARIANT_PROPOSED, VARIANT_BASELINE):
            raise ValueError(f"unknown loss variant {self.variant!r}")
        if self.sparsity_target not in (SPARSITY_NEGATIVE, SPARSITY_POSITIVE):
            raise ValueError(f"unknown sparsity target {self.sparsity_target!r}")


@dataclass
class LossBreakdown:
    """Per-term values of one bag-pair loss evaluation."""

    l1: float = 0.0
    l2: float = 0.0
    l3: float = 0.0
    l4: float = 0.0
    temporal: float = 0.0
    sparsity: float = 0.0
    regularizer: float = 0.0
    total: float = 0.0

    FIELDS = ("l1", "l2", "l3", "l4", "temporal", "sparsity", "regularizer", "total")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in self.FIELDS])

    @classmethod
    def from_array(cls, arr) -> "LossBreakdown":
        return cls(**{f: float(v) for f, v in zip(cls.FIELDS, arr)})


@dataclass
class SortedScores:
    """Descending order statistics with their source permutation.

    The sort is stable: tied values keep their original temporal order.
    """

    values: np.ndarray
    source_indices: np.ndarray


def _as_scores(values, name: str, check_range: bool = True) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] == 0:
        raise ValueError(f"{name} must be a nonempty 1-d score list")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")
    if check_range and ((arr < 0.0).any() or (arr > 1.0).any()):
        raise ValueError(f"{name} has scores outside [0, 1]")
    return arr


def order_desc(scores) -> SortedScores:
    """Stable descending sort of scores, with the permutation that produced it."""
    arr = _as_scores(scores, "scores", check_range=False)
    idx = np.argsort(-arr, kind="stable")
    return SortedScores(arr[idx], idx)


def _check_pair(pos, neg, require_equal_n: bool):
    pos = _as_scores(pos, "pos_scores")
    neg = _as_scores(neg, "neg_scores")
    if require_equal_n and pos.shape[0] != neg.shape[0]:
        raise ValueError(
            f"bags must hold the same number of instances "
            f"({pos.shape[0]} positive vs {neg.shape[0]} negative)"
        )
    return pos, neg


def hinge_components(pos_scores, neg_scores, require_equal_n: bool = True):
    """The four margin terms (l1, l2, l3, l4).

    l1 ranks max(pos) above max(neg); l2 spreads max(pos) above min(pos);
    l3 and l4 rank the second and third largest positive scores above
    max(neg). Needs at least 3 positive instances.
    """
    pos, neg = _check_pair(pos_scores, neg_scores, require_equal_n)
    if pos.shape[0] < 3:
        raise ValueError(f"need at least 3 positive instances, got {pos.shape[0]}")
    max_pos = float(pos.max())
    max_neg = float(neg.max())
    ordered = order_desc(pos).values
    l1 = max(0.0, 1.0 - max_pos + max_neg)
    l2 = max(0.0, 1.0 - max_pos + float(pos.min()))
    l3 = max(0.0, 1.0 - float(ordered[1]) + max_neg)
    l4 = max(0.0, 1.0 - float(ordered[2]) + max_neg)
    return l1, l2, l3, l4


def temporal_smoothness(pos_scores, mu1: float) -> float:
    """Quadratic penalty on adjacent-score differences, in temporal order."""
    pos = _as_scores(pos_scores, "pos_scores")
    return float(mu1 * np.sum(np.diff(pos) ** 2))


def sparsity(scores, mu2: float) -> float:
    """Penalty on the plain sum of the target bag's scores."""
    arr = _as_scores(scores, "scores")
    return float(mu2 * arr.sum())


def _sparsity_source(pos, neg, cfg: LossConfig):
    return neg if cfg.sparsity_target == SPARSITY_NEGATIVE else pos


def bag_pair_loss(pos_scores, neg_scores, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """Composite ranking loss of one positive/negative bag pair.

    The regularizer field is always 0 here; weight decay is added once per
    objective evaluation, not per pair.
    """
    cfg.validate()
    if cfg.variant == VARIANT_PROPOSED:
        pos, neg = _check_pair(pos_scores, neg_scores, require_equal_n=True)
        l1, l2, l3, l4 = hinge_components(pos, neg)
    else:
        pos, neg = _check_pair(pos_scores, neg_scores, require_equal_n=True)
        l1 = max(0.0, 1.0 - float(pos.max()) + float(neg.max()))
        l2 = l3 = l4 = 0.0
    temporal = temporal_smoothness(pos, cfg.mu1)
    sparse = sparsity(_sparsity_source(pos, neg, cfg), cfg.mu2)
    total = l1 + l2 + l3 + l4 + temporal + sparse
    return LossBreakdown(l1, l2, l3, l4, temporal, sparse, 0.0, total)


def _lowest_index_of(arr: np.ndarray, value: float) -> int:
    # subgradients at ties flow to the lowest original index holding the value
    return int(np.flatnonzero(arr == value)[0])


def loss_subgradient(pos_scores, neg_scores, cfg: LossConfig = LossConfig()):
    """Exact subgradient of bag_pair_loss w.r.t. each score.

    Inactive hinges (argument <= 0) contribute nothing; every max/min/order
    selection resolves ties to the lowest original index.
    """
    cfg.validate()
    pos, neg = _check_pair(pos_scores, neg_scores, require_equal_n=True)
    proposed = cfg.variant == VARIANT_PROPOSED
    if proposed and pos.shape[0] < 3:
        raise ValueError(f"need at least 3 positive instances, got {pos.shape[0]}")

    d_pos = np.zeros_like(pos)
    d_neg = np.zeros_like(neg)

    max_pos = pos.max()
    max_neg = neg.max()
    i_max = _lowest_index_of(pos, max_pos)
    j_max = _lowest_index_of(neg, max_neg)

    if 1.0 - max_pos + max_neg > 0.0:  # l1
        d_pos[i_max] -= 1.0
        d_neg[j_max] += 1.0
    if proposed:
        min_pos = pos.min()
        if 1.0 - max_pos + min_pos > 0.0:  # l2
            d_pos[i_max] -= 1.0
            d_pos[_lowest_index_of(pos, min_pos)] += 1.0
        ordered = order_desc(pos).values
        for rank in (1, 2):  # l3, l4
            if 1.0 - ordered[rank] + max_neg > 0.0:
                d_pos[_lowest_index_of(pos, ordered[rank])] -= 1.0
                d_neg[j_max] += 1.0

    diffs = pos[:-1] - pos[1:]
    d_pos[:-1] += 2.0 * cfg.mu1 * diffs
    d_pos[1:] -= 2.0 * cfg.mu1 * diffs

    if cfg.sparsity_target == SPARSITY_NEGATIVE:
        d_neg += cfg.mu2
    else:
        d_pos += cfg.mu2
    return d_pos, d_neg


def regularizer(params: ScorerParams, mu3: float) -> tuple[float, ScorerGrads]:
    """Squared-norm weight decay over the weight matrices (biases excluded)."""
    value = mu3 * sum(float(np.sum(w * w)) for w in params.weights)
    grads = ScorerGrads(
        [2.0 * mu3 * w for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
    )
    return value, grads
