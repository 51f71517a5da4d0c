"""Selection machinery: importance scores, variance-minimizing probabilities,
smoothing, the dynamic pruning schedule, Bernoulli sampling, and loss weights."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .snn import Array, BackwardTrace, ForwardTrace, patch_count

logger = logging.getLogger(__name__)

# Probabilities within this distance of 1 are treated as clipped; avoids
# infinite redistribution loops from floating-point residue.
CLAMP_TOL = 1e-12


class ConfigError(ValueError):
    pass


class DegenerateScoreError(ValueError):
    """All scores are zero; the caller should fall back to uniform sampling."""


@dataclass
class ScoreTable:
    """Per-example importance scores with staleness metadata."""

    scores: Array
    last_updated_epoch: Array
    score_layers: tuple[int, ...]

    @classmethod
    def uniform(cls, n: int, score_layers: tuple[int, ...]) -> "ScoreTable":
        # Equal scores before the first backward pass: epoch 1 samples uniformly.
        return cls(scores=np.ones(n), last_updated_epoch=np.zeros(n, dtype=np.int64),
                   score_layers=tuple(score_layers))

    def update(self, indices: Array, values: Array, epoch: int) -> None:
        self.scores[indices] = values
        self.last_updated_epoch[indices] = epoch


@dataclass
class PruneConfig:
    ratio: float
    max_ratio: float
    epochs: int
    smoothing_constant: float = 0.0
    seed: int = 0
    exact_average: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"ratio must lie in [0, 1), got {self.ratio}")
        if not self.ratio <= self.max_ratio <= 1.0:
            raise ValueError(f"max_ratio must lie in [ratio, 1], got {self.max_ratio}")
        if not 0.0 <= self.smoothing_constant < 1.0:
            raise ValueError("smoothing constant must lie in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")


@dataclass
class ProbabilityAssignment:
    """Per-example selection probabilities plus solver diagnostics."""

    probabilities: Array
    expected_size: float
    gamma: float = 0.0
    alpha: float = 0.0
    clipped_count: int = 0
    iterations: int = 0


@dataclass
class EpochPlan:
    epoch: int
    ratio: float
    target_size: int
    mask: Array
    selected_indices: Array


def spike_aware_score(btrace: BackwardTrace, ftrace: ForwardTrace,
                      score_layers: tuple[int, ...],
                      apply_patch_factor: bool | None = None) -> Array:
    """Per-example sum over layers and time of ||error|| * ||input spikes||.

    This upper-bounds each example's weight-gradient norm restricted to
    score_layers.  For conv layers the bound carries a sqrt(patch count)
    factor; it cancels in normalized probabilities when all scored layers
    share the same factor, so by default it is applied only when the scored
    layers mix different patch counts.
    """
    score_layers = tuple(score_layers)
    if not score_layers:
        raise ConfigError("score_layers must not be empty")
    n_layers = len(btrace.specs)
    for l in score_layers:
        if not 0 <= l < n_layers:
            raise ConfigError(f"score layer {l} out of range")
    factors = {}
    for l in score_layers:
        spec = btrace.specs[l]
        factors[l] = np.sqrt(patch_count(spec)) if spec.kind == "conv2d" else 1.0
    if apply_patch_factor is None:
        apply_patch_factor = len(set(factors.values())) > 1

    batch, t_steps = ftrace.batch_size, ftrace.time_steps
    total = np.zeros(batch)
    for l in score_layers:
        delta = btrace.errors[l].reshape(batch, t_steps, -1)
        o_prev = ftrace.spikes[l].reshape(batch, t_steps, -1)
        dn = np.sqrt((delta ** 2).sum(axis=2))
        on = np.sqrt((o_prev ** 2).sum(axis=2))
        contrib = (dn * on).sum(axis=1)
        if apply_patch_factor:
            contrib = contrib * factors[l]
        total += contrib
    return total


def loss_score(loss) -> Array:
    """Baseline importance score: the per-example loss itself."""
    return np.array(loss.per_example_loss, copy=True)


def _validate_scores(scores: Array, target_size: float) -> Array:
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if np.any(scores < 0) or not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite and non-negative")
    if not 0 < target_size <= n:
        raise ValueError(f"target size {target_size} out of range for N={n}")
    if not np.any(scores > 0):
        raise DegenerateScoreError("all scores are zero")
    return scores


def solve_probabilities(scores: Array, target_size: float) -> ProbabilityAssignment:
    """Variance-minimizing probabilities by iterative redistribution.

    Repeatedly sets p_i proportional to score over the still-unclipped set,
    clamps any p >= 1 to exactly 1, and redistributes the freed mass until all
    probabilities are valid.  Terminates in at most N rounds and matches the
    sorting-based closed form.
    """
    scores = _validate_scores(scores, target_size)
    n = scores.size
    p = np.zeros(n)
    in_r = np.ones(n, dtype=bool)  # examples not yet clamped at 1
    iterations = 0
    alpha = np.inf
    while True:
        iterations += 1
        c = target_size - (n - int(in_r.sum()))
        nz = in_r & (scores > 0)
        if not np.any(nz):
            # Only zero-score examples remain but mass is still owed (can only
            # happen when target_size forces them in); spread it uniformly.
            if c > CLAMP_TOL and np.any(in_r):
                p[in_r] = c / int(in_r.sum())
            break
        ssum = scores[nz].sum()
        p[in_r] = 0.0
        p[nz] = scores[nz] * (c / ssum)
        alpha = ssum / c if c > 0 else np.inf
        over = nz & (p >= 1.0 - CLAMP_TOL)
        if not np.any(over):
            break
        p[over] = 1.0
        in_r &= ~over
    return ProbabilityAssignment(probabilities=p, expected_size=float(target_size),
                                 gamma=0.0, alpha=float(alpha),
                                 clipped_count=n - int(in_r.sum()),
                                 iterations=iterations)


def smooth_probabilities(scores: Array, target_size: float,
                         beta: float) -> ProbabilityAssignment:
    """Enforce a probability floor of beta via a uniform score offset.

    If the smallest nonzero-score probability already reaches beta (or beta
    is 0) this is the identity.  Otherwise an offset gamma is added to every
    score of the unclipped set so that the smallest nonzero-score probability
    lands exactly on beta; zero-score examples receive the offset too, so no
    example is permanently starved.  The sum constraint and score ordering
    are preserved.
    """
    if not 0.0 <= beta < 1.0:
        raise ConfigError("beta must lie in [0, 1)")
    base = solve_probabilities(scores, target_size)
    if beta == 0.0:
        return base
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    p = base.probabilities.copy()
    in_r = p < 1.0
    nz = in_r & (scores > 0)
    if not np.any(nz) or p[nz].min() >= beta - 1e-12:
        return base

    # Re-solving after the offset can clip new examples; loop until stable.
    gamma = 0.0
    for _ in range(n):
        r_count = int(in_r.sum())
        c = target_size - (n - r_count)
        g_min = scores[nz].min()
        g_sum = scores[nz].sum()
        denom = c - beta * r_count
        if denom <= 0:
            logger.warning("smoothing constant %.3g infeasible for |R|=%d, c=%.3g; "
                           "falling back to uniform probabilities", beta, r_count, c)
            p[in_r] = 0.0
            p[nz] = c / int(nz.sum())
            gamma = 0.0
            break
        gamma = (beta * g_sum - c * g_min) / denom
        if gamma < 0.0:
            gamma = 0.0
        shifted = np.where(in_r, scores + gamma, 0.0)
        p[in_r] = shifted[in_r] * (c / shifted[in_r].sum())
        over = in_r & (p >= 1.0 - CLAMP_TOL)
        if not np.any(over):
            break
        p[over] = 1.0
        in_r &= ~over
        nz = in_r & (scores > 0)
        if not np.any(nz):
            break
    return ProbabilityAssignment(probabilities=p, expected_size=float(target_size),
                                 gamma=float(gamma), alpha=base.alpha,
                                 clipped_count=n - int(in_r.sum()),
                                 iterations=base.iterations)


def schedule_ratio(k: int, cfg: PruneConfig) -> float:
    """Pruning ratio for epoch k: linear from 2r - r_max up to r_max."""
    if not 1 <= k <= cfg.epochs:
        raise ValueError(f"epoch {k} outside [1, {cfg.epochs}]")
    r, rmax, kk = cfg.ratio, cfg.max_ratio, cfg.epochs
    rk = 2.0 * r - rmax + k * (2.0 * rmax - 2.0 * r) / kk
    if cfg.exact_average:
        # Shift so the schedule mean is exactly r instead of r + (rmax-r)/K.
        rk -= (rmax - r) / kk
    clamped = min(max(rk, 0.0), np.nextafter(1.0, 0.0))
    if clamped != rk:
        logger.debug("schedule ratio %.4f at epoch %d clamped to %.4f", rk, k, clamped)
    return clamped


def sample_mask(assignment: ProbabilityAssignment, seed) -> Array:
    """Independent Bernoulli draw per example, deterministic given the seed."""
    p = assignment.probabilities
    rng = np.random.default_rng(seed)
    return (rng.random(p.size) < p).astype(np.int64)


def make_plan(epoch: int, ratio: float, target_size: int,
              assignment: ProbabilityAssignment, seed) -> EpochPlan:
    mask = sample_mask(assignment, seed)
    return EpochPlan(epoch=epoch, ratio=ratio, target_size=target_size,
                     mask=mask, selected_indices=np.flatnonzero(mask))


def loss_weights(assignment: ProbabilityAssignment, mask: Array, n: int,
                 target_size: float) -> Array:
    """Inverse-probability weights for the selected examples.

    w_i = S/(N*p_i); with batch loss (1/B) sum w_i * loss_i the expected batch
    gradient equals the full-data mean gradient.
    """
    selected = np.flatnonzero(mask)
    p_sel = assignment.probabilities[selected]
    if np.any(p_sel <= 0):
        raise RuntimeError("selected example has zero probability")
    return target_size / (n * p_sel)
