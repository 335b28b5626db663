"""Abnormality scorer: a 3-layer fully-connected network S(x) in (0, 1).

The topology is fixed at three affine layers (default 512-128-32-1) with
rectifier activations on the hidden layers, a logistic sigmoid on the output,
and inverted dropout between the layers at train time. Gradients are
hand-derived for this topology; there is no autodiff here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backend, rng
from ._kernels_py import ACT_RELU, ACT_TANH
from .binio import FormatError, Reader, f32_bytes, u32_bytes

DEFAULT_LAYER_DIMS = (512, 128, 32, 1)
DEFAULT_ACTIVATIONS = ("relu", "relu", "sigmoid")
DEFAULT_DROPOUT_RATE = 0.6

_ACT_CODES = {"relu": ACT_RELU, "tanh": ACT_TANH}

MODEL_MAGIC = b"MILM"
MODEL_VERSION = 1


def sigmoid(z: float) -> float:
    """Stable scalar logistic function."""
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


@dataclass
class ScorerParams:
    """Weights and biases of the scorer. ``weights[k]`` is (out, in)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: tuple[str, str, str] = DEFAULT_ACTIVATIONS

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def validate(self) -> None:
        if len(self.weights) != 3 or len(self.biases) != 3:
            raise ValueError("scorer has exactly 3 layers")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {k+1}: weight/bias shapes inconsistent")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(
                    f"layer {k+1}: input dim {w.shape[1]} does not chain with "
                    f"layer {k} output {self.weights[k-1].shape[0]}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {k+1}: non-finite parameter entries")
        if self.weights[2].shape[0] != 1:
            raise ValueError("last layer must have a single output unit")
        if self.activations[2] != "sigmoid":
            raise ValueError("output activation must be sigmoid")
        for a in self.activations[:2]:
            if a not in _ACT_CODES:
                raise ValueError(f"unsupported hidden activation {a!r}")

    def copy(self) -> "ScorerParams":
        return ScorerParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activations,
        )

    def act_codes(self) -> tuple[int, int]:
        return _ACT_CODES[self.activations[0]], _ACT_CODES[self.activations[1]]


@dataclass
class ScorerGrads:
    """Gradient w.r.t. every parameter, same shapes as ScorerParams."""

    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: ScorerParams) -> "ScorerGrads":
        return cls(
            [np.zeros_like(w) for w in params.weights],
            [np.zeros_like(b) for b in params.biases],
        )

    def add_(self, other: "ScorerGrads", scale: float = 1.0) -> None:
        for mine, theirs in zip(self.d_weights, other.d_weights):
            mine += scale * theirs
        for mine, theirs in zip(self.d_biases, other.d_biases):
            mine += scale * theirs


@dataclass
class DropoutPlan:
    """How dropout behaves during a forward pass.

    In eval mode the pass is deterministic and rate-independent. In train
    mode each instance gets fresh masks from ``rng`` (or replays ``masks``),
    and kept activations are scaled by 1/(1-rate).
    """

    mode: str = "eval"
    rate: float = DEFAULT_DROPOUT_RATE
    rng: np.random.Generator | None = None
    masks: tuple[np.ndarray, np.ndarray] | None = None

    def validate(self) -> None:
        if self.mode not in ("train", "eval"):
            raise ValueError(f"dropout mode must be 'train' or 'eval', got {self.mode!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.mode == "train" and self.rate > 0.0 and self.rng is None and self.masks is None:
            raise ValueError("train-mode dropout needs an rng or explicit masks")


EVAL_PLAN = DropoutPlan()


@dataclass
class ForwardCache:
    """Everything backprop_instance needs to replay one forward pass."""

    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    z3: float
    score: float
    masks: tuple[np.ndarray, np.ndarray] | None
    rate: float


def init_params(
    seed: int,
    layer_dims: tuple[int, ...] = DEFAULT_LAYER_DIMS,
    activations: tuple[str, str, str] = DEFAULT_ACTIVATIONS,
) -> ScorerParams:
    """Deterministic initialization: uniform [-a, a] weights with
    a = sqrt(6 / (fan_in + fan_out)) per layer, zero biases."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) != 4:
        raise ValueError(f"layer_dims must chain 4 dims for 3 layers, got {dims}")
    if any(d <= 0 for d in dims):
        raise ValueError(f"layer_dims must be positive, got {dims}")
    if dims[-1] != 1:
        raise ValueError(f"final layer must have 1 unit, got {dims[-1]}")
    gen = rng.stream(seed, rng.NS_INIT)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(gen.uniform(-a, a, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    params = ScorerParams(weights, biases, activations)
    params.validate()
    return params


def _check_input(params: ScorerParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != params.in_dim:
        raise ValueError(
            f"input has shape {x.shape}, scorer expects ({params.in_dim},)"
        )
    if not np.isfinite(x).all():
        raise ValueError("non-finite entries in input feature")
    return x


def _draw_mask(plan: DropoutPlan, size: int, which: int) -> np.ndarray:
    if plan.masks is not None:
        mask = np.asarray(plan.masks[which], dtype=bool)
        if mask.shape != (size,):
            raise ValueError(f"replay mask {which+1} has shape {mask.shape}, expected ({size},)")
        return mask
    return plan.rng.random(size) >= plan.rate


def score_instance(
    params: ScorerParams, x: np.ndarray, plan: DropoutPlan = EVAL_PLAN
) -> tuple[float, ForwardCache]:
    """Scores one segment feature; returns the score and the forward cache."""
    x = _check_input(params, x)
    plan.validate()
    W1, W2, W3 = params.weights
    b1, b2, b3 = params.biases
    code1, code2 = params.act_codes()

    train = plan.mode == "train" and plan.rate > 0.0
    keep_scale = 1.0 / (1.0 - plan.rate) if train else 1.0

    z1 = W1 @ x + b1
    a1 = np.tanh(z1) if code1 == ACT_TANH else np.maximum(z1, 0.0)
    if train:
        m1 = _draw_mask(plan, a1.shape[0], 0)
        a1 = a1 * (m1 * keep_scale)
    z2 = W2 @ a1 + b2
    a2 = np.tanh(z2) if code2 == ACT_TANH else np.maximum(z2, 0.0)
    if train:
        m2 = _draw_mask(plan, a2.shape[0], 1)
        a2 = a2 * (m2 * keep_scale)
    z3 = float(W3[0] @ a2 + b3[0])
    score = sigmoid(z3)

    masks = (m1, m2) if train else None
    cache = ForwardCache(x, z1, a1, z2, a2, z3, score, masks, plan.rate if train else 0.0)
    return score, cache


def score_bag(
    params: ScorerParams, instances: np.ndarray, plan: DropoutPlan = EVAL_PLAN
) -> tuple[np.ndarray, list[ForwardCache]]:
    """Scores every instance of a bag in order.

    In train mode an independent mask is drawn per instance from plan.rng.
    """
    instances = np.asarray(instances, dtype=np.float64)
    if instances.ndim != 2 or instances.shape[0] == 0:
        raise ValueError("bag must be a nonempty (n, d) matrix")
    scores = np.empty(instances.shape[0])
    caches = []
    for i, x in enumerate(instances):
        scores[i], cache = score_instance(params, x, plan)
        caches.append(cache)
    return scores, caches


def _act_grad_vec(z: np.ndarray, code: int) -> np.ndarray:
    if code == ACT_TANH:
        t = np.tanh(z)
        return 1.0 - t * t
    return (z > 0.0).astype(np.float64)


def backprop_instance(
    params: ScorerParams, cache: ForwardCache, d_score: float
) -> tuple[ScorerGrads, np.ndarray]:
    """Exact chain rule through the cached forward pass.

    Returns d(d_score * score)/d(params) and the gradient w.r.t. the input.
    Honors the cached dropout masks; the rectifier subgradient at exactly 0
    is taken as 0.
    """
    W1, W2, W3 = params.weights
    code1, code2 = params.act_codes()
    if cache.x.shape[0] != params.in_dim or cache.a2.shape[0] != W3.shape[1]:
        raise ValueError("cache does not match these params")

    if cache.masks is not None:
        keep_scale = 1.0 / (1.0 - cache.rate)
        mult1 = cache.masks[0] * keep_scale
        mult2 = cache.masks[1] * keep_scale
    else:
        mult1 = mult2 = None

    s = cache.score
    dz3 = d_score * s * (1.0 - s)
    dW3 = dz3 * cache.a2[None, :]
    db3 = np.array([dz3])

    da2 = dz3 * W3[0]
    if mult2 is not None:
        da2 = da2 * mult2
    dz2 = da2 * _act_grad_vec(cache.z2, code2)
    dW2 = np.outer(dz2, cache.a1)
    db2 = dz2

    da1 = W2.T @ dz2
    if mult1 is not None:
        da1 = da1 * mult1
    dz1 = da1 * _act_grad_vec(cache.z1, code1)
    dW1 = np.outer(dz1, cache.x)
    db1 = dz1

    d_x = W1.T @ dz1
    return ScorerGrads([dW1, dW2, dW3], [db1, db2.copy(), db3]), d_x


def score_matrix(params: ScorerParams, X: np.ndarray, kernels=None) -> np.ndarray:
    """Eval-mode scores for a whole (N, d) matrix via the active backend."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.in_dim:
        raise ValueError(f"matrix has shape {X.shape}, scorer expects (*, {params.in_dim})")
    k = kernels if kernels is not None else backend.active
    code1, code2 = params.act_codes()
    W1, W2, W3 = (np.ascontiguousarray(w) for w in params.weights)
    b1, b2, b3 = (np.ascontiguousarray(b) for b in params.biases)
    scores, *_ = k.forward_batch(X, W1, b1, W2, b2, W3, b3, code1, code2)
    return scores


# --- MILM model file ---------------------------------------------------------
#
# Little-endian layout:
#   magic "MILM" | u32 version=1 | u32 n_layers=3
#   per layer: u32 out | u32 in | f32 weights row-major | f32 biases
#   u8 accumulator flag | if 1, the same per-layer layout again for the
#   Adagrad accumulators (weight block then bias block).

Accumulators = tuple[list[np.ndarray], list[np.ndarray]]


def save_model(path, params: ScorerParams, accumulators: Accumulators | None = None) -> None:
    params.validate()
    chunks = [MODEL_MAGIC, u32_bytes(MODEL_VERSION), u32_bytes(len(params.weights))]

    def emit(weights, biases):
        for w, b in zip(weights, biases):
            chunks.append(u32_bytes(w.shape[0]))
            chunks.append(u32_bytes(w.shape[1]))
            chunks.append(f32_bytes(w))
            chunks.append(f32_bytes(b))

    emit(params.weights, params.biases)
    if accumulators is None:
        chunks.append(bytes([0]))
    else:
        chunks.append(bytes([1]))
        emit(accumulators[0], accumulators[1])
    Path(path).write_bytes(b"".join(chunks))


def load_model(path) -> tuple[ScorerParams, Accumulators | None]:
    reader = Reader(Path(path).read_bytes(), f"model file {path}")
    reader.expect_magic(MODEL_MAGIC)
    version = reader.u32()
    if version != MODEL_VERSION:
        raise FormatError(f"model file {path}: unsupported version {version} at offset 4")
    n_layers = reader.u32()
    if n_layers != 3:
        raise FormatError(f"model file {path}: expected 3 layers, got {n_layers} at offset 8")

    def read_block(expect_dims=None):
        weights, biases = [], []
        for k in range(n_layers):
            at = reader.pos
            out, inn = reader.u32(), reader.u32()
            if out == 0 or inn == 0:
                raise FormatError(f"model file {path}: zero layer dimension at offset {at}")
            if expect_dims is not None and (out, inn) != expect_dims[k]:
                raise FormatError(
                    f"model file {path}: accumulator dims {(out, inn)} do not match "
                    f"layer dims {expect_dims[k]} at offset {at}"
                )
            weights.append(reader.f32_array(out * inn).reshape(out, inn))
            biases.append(reader.f32_array(out))
        return weights, biases

    weights, biases = read_block()
    params = ScorerParams(weights, biases)
    params.validate()
    accumulators = None
    if reader.u8():
        dims = [w.shape for w in weights]
        accumulators = read_block(expect_dims=dims)
    reader.expect_end()
    return params, accumulators
