"""Finite-difference verification of every hand-derived gradient.

Three suites, all on small deterministic configurations:

* scorer: d(score)/d(params) from backprop_instance vs central differences;
* loss: d(pair loss)/d(scores) from loss_subgradient vs central differences;
* objective: the full training objective (pair loss + weight decay) end to
  end through batch_objective vs central differences over all parameters.

Configurations are resampled until they are safely away from the
non-smooth points (rectifier kinks, score ties, hinge boundaries), where a
subgradient is not comparable against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .dataset import Bag, NEGATIVE, POSITIVE
from .loss import LossConfig, bag_pair_loss, loss_subgradient
from .scorer import (
    ScorerGrads,
    ScorerParams,
    backprop_instance,
    init_params,
    score_instance,
    score_matrix,
)
from .trainer import batch_objective

CHECK_DIMS = (8, 6, 4, 1)
CHECK_BAG_SIZE = 4
DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
ERROR_FLOOR = 1e-8
SAFETY_MARGIN = 1e-3


@dataclass
class GradcheckReport:
    scorer_max_rel: float
    loss_max_abs: float
    objective_max_rel: float
    tolerance: float = DEFAULT_TOLERANCE
    loss_tolerance: float = 1e-6

    @property
    def passed(self) -> bool:
        return (
            self.scorer_max_rel <= self.tolerance
            and self.loss_max_abs <= self.loss_tolerance
            and self.objective_max_rel <= self.tolerance
        )

    @property
    def max_relative_error(self) -> float:
        return max(self.scorer_max_rel, self.objective_max_rel)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ERROR_FLOOR) -> float:
    denom = np.maximum(floor, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def fd_param_gradient(objective, params: ScorerParams, h: float = DEFAULT_STEP) -> ScorerGrads:
    """Central differences of a scalar objective() over every parameter."""
    grads = ScorerGrads.zeros_like(params)
    for group, out_group in (
        (params.weights, grads.d_weights),
        (params.biases, grads.d_biases),
    ):
        for arr, out in zip(group, out_group):
            flat, out_flat = arr.ravel(), out.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = objective()
                flat[i] = orig - h
                f_minus = objective()
                flat[i] = orig
                out_flat[i] = (f_plus - f_minus) / (2.0 * h)
    return grads


def _grad_rel_error(analytic: ScorerGrads, numeric: ScorerGrads) -> float:
    worst = 0.0
    for a, f in zip(analytic.d_weights + analytic.d_biases, numeric.d_weights + numeric.d_biases):
        worst = max(worst, relative_error(a, f))
    return worst


def _kink_margin(params: ScorerParams, X: np.ndarray) -> float:
    """Smallest |pre-activation| over the rectifier layers, all instances."""
    W1, W2, _ = params.weights
    b1, b2, _ = params.biases
    Z1 = X @ W1.T + b1
    A1 = np.maximum(Z1, 0.0)
    Z2 = A1 @ W2.T + b2
    return float(min(np.abs(Z1).min(), np.abs(Z2).min()))


def _min_gap(values: np.ndarray) -> float:
    s = np.sort(values)
    return float(np.diff(s).min()) if s.size > 1 else np.inf


def _hinge_margin(pos: np.ndarray, neg: np.ndarray) -> float:
    ordered = np.sort(pos)[::-1]
    args = [1.0 - ordered[0] + neg.max(), 1.0 - ordered[0] + pos.min(),
            1.0 - ordered[1] + neg.max(), 1.0 - ordered[2] + neg.max()]
    return float(min(abs(a) for a in args))


def _sample_config(seed: int, index: int, dims, n: int):
    """Deterministically draws (params, pos bag, neg bag) clear of kinks/ties."""
    for attempt in range(100):
        gen = rng.stream(seed, rng.NS_GRADCHECK, c1=index, c2=attempt)
        params = init_params(int(gen.integers(1 << 62)), dims)
        # jitter biases so pre-activations are biased away from 0
        for b in params.biases[:2]:
            b += gen.uniform(-0.5, 0.5, size=b.shape)
        X_pos = gen.standard_normal((n, dims[0]))
        X_neg = gen.standard_normal((n, dims[0]))
        X = np.vstack([X_pos, X_neg])
        if _kink_margin(params, X) < SAFETY_MARGIN:
            continue
        scores = score_matrix(params, X)
        pos, neg = scores[:n], scores[n:]
        if _min_gap(pos) < SAFETY_MARGIN or _min_gap(neg) < SAFETY_MARGIN:
            continue
        if _hinge_margin(pos, neg) < SAFETY_MARGIN:
            continue
        return params, X_pos, X_neg
    raise RuntimeError(f"could not find a tie-free configuration for index {index}")


def check_scorer(seed: int, n_configs: int = 20, dims=CHECK_DIMS, h: float = DEFAULT_STEP) -> float:
    """Max relative error of backprop_instance over random eval-mode configs."""
    worst = 0.0
    for index in range(n_configs):
        params, X_pos, _ = _sample_config(seed, index, dims, CHECK_BAG_SIZE)
        x = X_pos[0]
        _, cache = score_instance(params, x)
        analytic, _ = backprop_instance(params, cache, 1.0)
        numeric = fd_param_gradient(lambda: score_instance(params, x)[0], params, h)
        worst = max(worst, _grad_rel_error(analytic, numeric))
    return worst


def check_loss(seed: int, n_configs: int = 20, n: int = 8, h: float = DEFAULT_STEP,
               cfg: LossConfig = LossConfig()) -> float:
    """Max absolute error of loss_subgradient at tie-free score vectors.

    Scores are drawn from a 0.01 grid inside (0, 1) without replacement, so
    every order statistic and hinge argument sits strictly away from its
    boundary and central differences are valid.
    """
    grid = np.round(np.linspace(0.05, 0.95, 91), 2)
    worst = 0.0
    for index in range(n_configs):
        gen = rng.stream(seed, rng.NS_GRADCHECK, c1=index, c3=1)
        pos = gen.choice(grid, size=n, replace=False)
        neg = gen.choice(grid, size=n, replace=False)
        d_pos, d_neg = loss_subgradient(pos, neg, cfg)
        for vec, grad in ((pos, d_pos), (neg, d_neg)):
            for i in range(n):
                orig = vec[i]
                vec[i] = orig + h
                f_plus = bag_pair_loss(pos, neg, cfg).total
                vec[i] = orig - h
                f_minus = bag_pair_loss(pos, neg, cfg).total
                vec[i] = orig
                worst = max(worst, abs((f_plus - f_minus) / (2.0 * h) - grad[i]))
    return worst


def check_objective(seed: int, n_configs: int = 20, dims=CHECK_DIMS, n: int = CHECK_BAG_SIZE,
                    h: float = DEFAULT_STEP, cfg: LossConfig = LossConfig()) -> float:
    """Max relative error of the full objective gradient, dropout disabled."""
    worst = 0.0
    for index in range(n_configs):
        params, X_pos, X_neg = _sample_config(seed, index, dims, n)
        pos_bags = [Bag(POSITIVE, X_pos, "p")]
        neg_bags = [Bag(NEGATIVE, X_neg, "n")]

        def objective() -> float:
            value, _, _ = batch_objective(params, pos_bags, neg_bags, cfg)
            return value

        _, analytic, _ = batch_objective(params, pos_bags, neg_bags, cfg)
        numeric = fd_param_gradient(objective, params, h)
        worst = max(worst, _grad_rel_error(analytic, numeric))
    return worst


def run_all(seed: int = 7, n_configs: int = 20) -> GradcheckReport:
    return GradcheckReport(
        scorer_max_rel=check_scorer(seed, n_configs),
        loss_max_abs=check_loss(seed, n_configs),
        objective_max_rel=check_objective(seed, n_configs),
    )
