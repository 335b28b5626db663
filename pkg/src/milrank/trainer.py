"""Mini-batch MIL training with Adagrad.

Each iteration samples positive and negative bags without replacement, pairs
them by sampled order, pushes the whole batch through the scorer in train
mode, applies the composite ranking loss per pair plus one weight-decay term,
and takes an Adagrad step. Runs are bit-reproducible for a given seed and
backend: batch sampling and dropout masks come from counter-based streams
addressed by iteration (and bag slot), so resuming mid-run replays the exact
remaining schedule.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backend, rng
from .dataset import Bag, POSITIVE
from .loss import LossBreakdown, LossConfig, bag_pair_loss, loss_subgradient, regularizer
from .scorer import ScorerGrads, ScorerParams, init_params, load_model, save_model


@dataclass
class TrainConfig:
    iterations: int = 25_000
    learning_rate: float = 0.001
    batch_pos: int = 30
    batch_neg: int = 30
    adagrad_epsilon: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    checkpoint_every: int = 0  # 0 disables checkpoints
    dropout: float = 0.6
    hidden_dims: tuple[int, int] = (128, 32)

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_pos < 1 or self.batch_neg < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.batch_pos != self.batch_neg:
            raise ValueError("positional pairing needs batch_pos == batch_neg")
        if self.adagrad_epsilon <= 0:
            raise ValueError("adagrad_epsilon must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        self.loss.validate()


@dataclass
class AdagradState:
    """Per-parameter sums of squared gradients."""

    g_weights: list[np.ndarray]
    g_biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: ScorerParams) -> "AdagradState":
        return cls(
            [np.zeros_like(w) for w in params.weights],
            [np.zeros_like(b) for b in params.biases],
        )


@dataclass
class TrainLog:
    breakdowns: list[LossBreakdown] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    start_iteration: int = 0

    def write_csv(self, path, append: bool = False) -> None:
        mode = "a" if append else "w"
        with open(path, mode) as fh:
            if not append:
                fh.write("iteration," + ",".join(LossBreakdown.FIELDS) + "\n")
            for i, row in enumerate(self.breakdowns):
                fields = ",".join(repr(getattr(row, f)) for f in LossBreakdown.FIELDS)
                fh.write(f"{self.start_iteration + i + 1},{fields}\n")


def sample_batch(
    train_bags: list[Bag], gen: np.random.Generator,
    batch_pos: int = 30, batch_neg: int = 30,
) -> tuple[list[Bag], list[Bag]]:
    """Uniformly samples bags of each polarity without replacement.

    Pairing is positional: the k-th sampled positive is paired with the k-th
    sampled negative.
    """
    positives = [b for b in train_bags if b.polarity == POSITIVE]
    negatives = [b for b in train_bags if b.polarity != POSITIVE]
    if len(positives) < batch_pos:
        raise ValueError(f"need {batch_pos} positive bags, have {len(positives)}")
    if len(negatives) < batch_neg:
        raise ValueError(f"need {batch_neg} negative bags, have {len(negatives)}")
    pos_idx = gen.choice(len(positives), size=batch_pos, replace=False)
    neg_idx = gen.choice(len(negatives), size=batch_neg, replace=False)
    return [positives[i] for i in pos_idx], [negatives[i] for i in neg_idx]


def _dropout_multipliers(seed, iteration, bag_slot, n, h1, h2, rate):
    """Multiplier matrices (0 dropped / 1/(1-rate) kept) for one bag.

    Row i of the draw is instance i's masks, so the masks are a pure function
    of (seed, iteration, bag slot, instance index).
    """
    gen = rng.stream(seed, rng.NS_DROPOUT, c2=bag_slot, c3=iteration)
    keep = gen.random((n, h1 + h2)) >= rate
    mult = keep / (1.0 - rate)
    return mult[:, :h1], mult[:, h1:]


def batch_objective(
    params: ScorerParams,
    pos_bags: list[Bag],
    neg_bags: list[Bag],
    loss_cfg: LossConfig,
    *,
    dropout_rate: float = 0.0,
    mask_seed: tuple[int, int] | None = None,
    kernels=None,
) -> tuple[float, ScorerGrads, LossBreakdown]:
    """Mean pair loss plus one regularizer term, with its exact gradient.

    ``mask_seed`` is (run seed, iteration) and is required whenever
    dropout_rate > 0; bag slots are numbered positives first.
    Returns (value, gradient, per-term breakdown averaged over pairs).
    """
    if len(pos_bags) != len(neg_bags):
        raise ValueError("need the same number of positive and negative bags")
    if dropout_rate > 0.0 and mask_seed is None:
        raise ValueError("dropout needs a (seed, iteration) mask seed")
    k = kernels if kernels is not None else backend.active
    n_pairs = len(pos_bags)
    bags = pos_bags + neg_bags

    d = params.in_dim
    h1, h2 = params.weights[0].shape[0], params.weights[1].shape[0]
    code1, code2 = params.act_codes()
    for bag in bags:
        if bag.dim != d:
            raise ValueError(f"bag {bag.video_id!r} has dim {bag.dim}, scorer expects {d}")

    X = np.ascontiguousarray(np.concatenate([bag.instances for bag in bags]))
    offsets = np.cumsum([0] + [bag.n for bag in bags])

    if dropout_rate > 0.0:
        drop1 = np.empty((X.shape[0], h1))
        drop2 = np.empty((X.shape[0], h2))
        seed, iteration = mask_seed
        for slot, bag in enumerate(bags):
            m1, m2 = _dropout_multipliers(seed, iteration, slot, bag.n, h1, h2, dropout_rate)
            drop1[offsets[slot] : offsets[slot + 1]] = m1
            drop2[offsets[slot] : offsets[slot + 1]] = m2
    else:
        drop1 = drop2 = None

    W1, W2, W3 = (np.ascontiguousarray(w) for w in params.weights)
    b1, b2, b3 = (np.ascontiguousarray(b) for b in params.biases)
    scores, Z1, A1, Z2, A2 = k.forward_batch(
        X, W1, b1, W2, b2, W3, b3, code1, code2, drop1, drop2
    )

    d_scores = np.zeros_like(scores)
    term_sums = np.zeros(len(LossBreakdown.FIELDS))
    for pair in range(n_pairs):
        pos = scores[offsets[pair] : offsets[pair + 1]]
        neg = scores[offsets[n_pairs + pair] : offsets[n_pairs + pair + 1]]
        breakdown = bag_pair_loss(pos, neg, loss_cfg)
        term_sums += breakdown.as_array()
        d_pos, d_neg = loss_subgradient(pos, neg, loss_cfg)
        d_scores[offsets[pair] : offsets[pair + 1]] = d_pos / n_pairs
        d_scores[offsets[n_pairs + pair] : offsets[n_pairs + pair + 1]] = d_neg / n_pairs

    dW1, db1, dW2, db2, dW3, db3 = k.backward_batch(
        X, W1, W2, W3, code1, code2, Z1, A1, Z2, A2, scores, d_scores, drop1, drop2
    )
    grads = ScorerGrads([dW1, dW2, dW3], [db1, db2, db3])

    reg_value, reg_grads = regularizer(params, loss_cfg.mu3)
    grads.add_(reg_grads)

    mean_terms = term_sums / n_pairs
    mean_terms[LossBreakdown.FIELDS.index("regularizer")] = reg_value
    mean_terms[-1] += reg_value
    breakdown = LossBreakdown.from_array(mean_terms)
    return breakdown.total, grads, breakdown


def adagrad_step(
    params: ScorerParams,
    state: AdagradState,
    grads: ScorerGrads,
    learning_rate: float,
    epsilon: float = 1e-8,
) -> tuple[ScorerParams, AdagradState]:
    """In-place Adagrad update: G += g^2; theta -= lr * g / (sqrt(G) + eps)."""
    pairs = list(zip(params.weights, state.g_weights, grads.d_weights)) + list(
        zip(params.biases, state.g_biases, grads.d_biases)
    )
    for theta, g_acc, g in pairs:
        if theta.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {theta.shape}")
        if not np.isfinite(g).all():
            raise ValueError("non-finite gradient entries")
    for theta, g_acc, g in pairs:
        g_acc += g * g
        theta -= learning_rate * g / (np.sqrt(g_acc) + epsilon)
    return params, state


def checkpoint_meta_path(ckpt_path: Path) -> Path:
    return ckpt_path.with_suffix(ckpt_path.suffix + ".meta.json")


def _write_checkpoint(out_dir: Path, iteration: int, params, state) -> Path:
    path = out_dir / f"ckpt_{iteration:06d}.milm"
    save_model(path, params, (state.g_weights, state.g_biases))
    checkpoint_meta_path(path).write_text(json.dumps({"iteration": iteration}) + "\n")
    return path


def load_checkpoint(path) -> tuple[ScorerParams, AdagradState, int]:
    params, accumulators = load_model(path)
    if accumulators is None:
        raise ValueError(f"checkpoint {path} has no Adagrad accumulators")
    meta = json.loads(checkpoint_meta_path(Path(path)).read_text())
    return params, AdagradState(*accumulators), int(meta["iteration"])


def train(
    train_bags: list[Bag],
    cfg: TrainConfig,
    out_dir=None,
    resume_from=None,
) -> tuple[ScorerParams, TrainLog]:
    """Runs the full training loop; deterministic given (bags, cfg, backend).

    Checkpoints (model + Adagrad accumulators) are written every
    ``cfg.checkpoint_every`` iterations when ``out_dir`` is given; pass one
    back as ``resume_from`` to continue an interrupted run.
    """
    cfg.validate()
    if not train_bags:
        raise ValueError("empty training set")
    dims = {bag.dim for bag in train_bags}
    if len(dims) > 1:
        raise ValueError(f"bags disagree on feature dim: {sorted(dims)}")
    sizes = {bag.n for bag in train_bags}
    if len(sizes) > 1:
        raise ValueError(f"bags disagree on instance count: {sorted(sizes)}")
    if cfg.checkpoint_every and out_dir is None:
        raise ValueError("checkpointing requires an output directory")

    if resume_from is not None:
        params, state, start_iteration = load_checkpoint(resume_from)
        if params.in_dim != next(iter(dims)):
            raise ValueError("checkpoint feature dim does not match the dataset")
    else:
        layer_dims = (next(iter(dims)), *cfg.hidden_dims, 1)
        params = init_params(cfg.seed, layer_dims)
        state = AdagradState.zeros_like(params)
        start_iteration = 0

    log = TrainLog(start_iteration=start_iteration)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    for iteration in range(start_iteration, cfg.iterations):
        t0 = time.perf_counter()
        gen = rng.stream(cfg.seed, rng.NS_BATCH, c3=iteration)
        pos_bags, neg_bags = sample_batch(train_bags, gen, cfg.batch_pos, cfg.batch_neg)
        _, grads, breakdown = batch_objective(
            params, pos_bags, neg_bags, cfg.loss,
            dropout_rate=cfg.dropout, mask_seed=(cfg.seed, iteration),
        )
        adagrad_step(params, state, grads, cfg.learning_rate, cfg.adagrad_epsilon)
        log.breakdowns.append(breakdown)
        log.wall_times.append(time.perf_counter() - t0)
        done = iteration + 1
        if cfg.checkpoint_every and (done % cfg.checkpoint_every == 0 or done == cfg.iterations):
            log.checkpoints.append(_write_checkpoint(out_dir, done, params, state))
    return params, log
