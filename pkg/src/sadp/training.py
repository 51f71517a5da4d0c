"""Outer training loop: schedule, probabilities, sampling, weighted SGD."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetHandle, MetricsRow
from .pruning import (DegenerateScoreError, ProbabilityAssignment, PruneConfig,
                      ScoreTable, loss_score, loss_weights, sample_mask,
                      schedule_ratio, smooth_probabilities, spike_aware_score)
from .snn import Array, NeuronConfig, Network, backward_bptt, forward

logger = logging.getLogger(__name__)


class NumericDivergenceError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    base_lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    schedule: str = "cosine"
    learning_rate: float = 0.0
    momentum_buffers: list[Array] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.base_lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0.0:
            raise ValueError("weight decay must be non-negative")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")
        if self.learning_rate == 0.0:
            self.learning_rate = self.base_lr


@dataclass
class TrainState:
    epochs: int
    batch_size: int
    seed_init: int = 0
    seed_sample: int = 1
    seed_shuffle: int = 2
    epoch: int = 0


def sgd_step(weights: list[Array], grads: list[Array], opt: OptimizerState) -> list[Array]:
    """In-place SGD with momentum and weight decay."""
    if not opt.momentum_buffers:
        opt.momentum_buffers = [np.zeros_like(w) for w in weights]
    for w, g, buf in zip(weights, grads, opt.momentum_buffers):
        if w.shape != g.shape:
            raise ValueError("gradient shape mismatch")
        if not np.all(np.isfinite(g)):
            raise NumericDivergenceError("non-finite gradient")
        buf *= opt.momentum
        buf += g + opt.weight_decay * w
        w -= opt.learning_rate * buf
    return weights


def cosine_lr(k: int, total_epochs: int, base_lr: float) -> float:
    """Half-cosine annealing from base_lr toward zero."""
    if not 1 <= k <= total_epochs:
        raise ValueError("epoch out of range")
    return base_lr * (1.0 + math.cos(math.pi * (k - 1) / total_epochs)) / 2.0


def evaluate(net: Network, handle: DatasetHandle, cfg: NeuronConfig,
             batch_size: int = 256) -> float:
    """Classification accuracy on a pre-encoded dataset."""
    correct = 0
    for start in range(0, handle.n, batch_size):
        stop = min(start + batch_size, handle.n)
        _, lo = forward(net, handle.data[start:stop], handle.labels[start:stop], cfg)
        correct += int((lo.logits.argmax(axis=1) == handle.labels[start:stop]).sum())
    return correct / handle.n


def _probabilities_for_epoch(scores: Array, target: int, beta: float,
                             score_kind: str) -> ProbabilityAssignment:
    n = scores.size
    if score_kind == "uniform":
        return ProbabilityAssignment(probabilities=np.full(n, target / n),
                                     expected_size=float(target))
    try:
        return smooth_probabilities(scores, target, beta)
    except DegenerateScoreError:
        logger.warning("all scores zero; falling back to uniform probabilities")
        return ProbabilityAssignment(probabilities=np.full(n, target / n),
                                     expected_size=float(target))


def run_training(net: Network, train: DatasetHandle, test: DatasetHandle | None,
                 ncfg: NeuronConfig, pcfg: PruneConfig | None,
                 opt: OptimizerState, state: TrainState,
                 score_layers: tuple[int, ...] | None = None,
                 score_kind: str = "spike_aware") -> list[MetricsRow]:
    """Train for state.epochs epochs, pruning per epoch when pcfg is given.

    Each epoch: schedule the pruning ratio, turn the (stale) score table into
    selection probabilities, Bernoulli-sample a subset, and run weighted
    mini-batch SGD over it, refreshing scores for every trained example from
    the traces already produced by the backward pass.
    """
    n = train.n
    if score_layers is None:
        score_layers = (len(net) - 1,)  # final layer only
    table = ScoreTable.uniform(n, score_layers)
    metrics: list[MetricsRow] = []
    pruning = pcfg is not None

    for k in range(1, state.epochs + 1):
        t0 = time.perf_counter()
        state.epoch = k
        opt.learning_rate = cosine_lr(k, state.epochs, opt.base_lr) \
            if opt.schedule == "cosine" else opt.base_lr

        if pruning:
            rk = schedule_ratio(k, pcfg)
            target = int(round((1.0 - rk) * n))
            if target <= 0:
                logger.warning("epoch %d: empty target subset (r_k=%.3f); skipped", k, rk)
                metrics.append(MetricsRow(k, rk, 0, math.nan, math.nan,
                                          time.perf_counter() - t0, 0.0, 0))
                continue
            if target == n:
                # S = N forces every probability to 1; skip the solver so a
                # zero-ratio run is indistinguishable from plain training.
                assignment = ProbabilityAssignment(probabilities=np.ones(n),
                                                   expected_size=float(n))
            else:
                assignment = _probabilities_for_epoch(table.scores, target,
                                                      pcfg.smoothing_constant,
                                                      score_kind)
            mask = sample_mask(assignment, [pcfg.seed, state.seed_sample, k])
        else:
            rk = 0.0
            target = n
            assignment = ProbabilityAssignment(probabilities=np.ones(n),
                                               expected_size=float(n))
            mask = np.ones(n, dtype=np.int64)

        selected = np.flatnonzero(mask)
        if selected.size == 0:
            logger.warning("epoch %d: Bernoulli draw selected no examples; skipped", k)
            metrics.append(MetricsRow(k, rk, 0, math.nan, math.nan,
                                      time.perf_counter() - t0, assignment.gamma,
                                      assignment.iterations))
            continue
        weights = loss_weights(assignment, mask, n, target)

        shuffle_rng = np.random.default_rng([state.seed_shuffle, k])
        order = shuffle_rng.permutation(selected.size)
        selected = selected[order]
        weights = weights[order]

        loss_sum = 0.0
        b = state.batch_size
        for start in range(0, selected.size, b):
            idx = selected[start:start + b]
            w_batch = weights[start:start + b]
            trace, lo = forward(net, train.data[idx], train.labels[idx], ncfg)
            if not np.all(np.isfinite(lo.per_example_loss)):
                raise NumericDivergenceError(f"non-finite loss in epoch {k}")
            btrace = backward_bptt(net, trace, lo, ncfg)
            grads = btrace.weight_grads(example_weights=w_batch)
            sgd_step(net.weights, grads, opt)
            if score_kind == "spike_aware":
                table.update(idx, spike_aware_score(btrace, trace, score_layers), k)
            elif score_kind == "loss":
                table.update(idx, loss_score(lo), k)
            loss_sum += float((w_batch * lo.per_example_loss).sum())

        test_acc = evaluate(net, test, ncfg) if test is not None else math.nan
        metrics.append(MetricsRow(
            epoch=k, ratio=rk, processed=int(selected.size),
            train_loss=loss_sum / selected.size, test_acc=test_acc,
            wall_s=time.perf_counter() - t0, gamma=assignment.gamma,
            solver_iters=assignment.iterations))
        logger.info("epoch %d: r=%.3f processed=%d loss=%.4f acc=%.4f",
                    k, rk, selected.size, metrics[-1].train_loss, test_acc)
    return metrics
