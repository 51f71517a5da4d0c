"""Independent brute-force verification of the pruning mathematics.

Everything here is deliberately written without reuse of the iterative solver
or the score bound: exact per-example gradient norms, the sorting-based
closed-form probability solution, Monte-Carlo estimator statistics, the
closed-form variance objective, Pearson correlation, and finite-difference
gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pruning import ProbabilityAssignment, spike_aware_score
from .snn import Array, NeuronConfig, Network, backward_bptt, forward

MASK_CHUNK = 2000


class InfiniteVarianceError(ValueError):
    pass


class UndefinedCorrelationError(ValueError):
    pass


@dataclass
class GradNormReport:
    full_norms: Array        # exact ||grad|| over all layers, per example
    restricted_norms: Array  # exact norm restricted to score_layers
    scores: Array            # spike-aware bound over score_layers
    ratios: Array            # scores / restricted_norms


@dataclass
class MCStats:
    draws: int
    mean_estimate: Array       # mean estimator gradient, flattened
    full_gradient: Array       # exact full-data mean gradient, flattened
    expected_sq_error: float   # Monte-Carlo E||ghat - g||^2
    standard_errors: Array     # per-component standard error of the mean


@dataclass
class CorrelationReport:
    score_vs_norm: float
    loss_vs_norm: float
    sample_size: int


def per_example_gradients(net: Network, data: Array, labels: Array,
                          cfg: NeuronConfig, smooth: bool = False
                          ) -> tuple[list[Array], "ForwardBackward"]:
    trace, loss = forward(net, data, labels, cfg, smooth=smooth)
    btrace = backward_bptt(net, trace, loss, cfg)
    return btrace.per_example_grads, _FB(trace, loss, btrace)


@dataclass
class _FB:
    trace: object
    loss: object
    btrace: object


# Alias used in the public signature above.
ForwardBackward = _FB


def exact_grad_norms(net: Network, data: Array, labels: Array, cfg: NeuronConfig,
                     score_layers: tuple[int, ...],
                     apply_patch_factor: bool | None = None) -> GradNormReport:
    """Exact per-example gradient norms plus the spike-aware bound."""
    grads, fb = per_example_gradients(net, data, labels, cfg)
    n = data.shape[0]
    sq_full = np.zeros(n)
    sq_restricted = np.zeros(n)
    for l, g in enumerate(grads):
        sq = (g.reshape(n, -1) ** 2).sum(axis=1)
        sq_full += sq
        if l in score_layers:
            sq_restricted += sq
    scores = spike_aware_score(fb.btrace, fb.trace, score_layers,
                               apply_patch_factor=apply_patch_factor)
    restricted = np.sqrt(sq_restricted)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(restricted > 0, scores / restricted, np.inf)
    return GradNormReport(full_norms=np.sqrt(sq_full), restricted_norms=restricted,
                          scores=scores, ratios=ratios)


def solve_probabilities_sorted(scores: Array, target_size: float
                               ) -> ProbabilityAssignment:
    """Closed-form optimum via sorting and the clipping-count search.

    Sorts the scores ascending, finds the clipped count M consistent with the
    threshold alpha = (sum of the N-M smallest)/(S-M), and returns
    p_i = min(g_i, alpha) * S / sum_j min(g_j, alpha).
    """
    g = np.asarray(scores, dtype=np.float64)
    n = g.size
    s = float(target_size)
    if np.any(g < 0) or not np.any(g > 0):
        raise ValueError("scores must be non-negative and not all zero")
    if not 0 < s <= n:
        raise ValueError("target size out of range")
    order = np.sort(g)
    csum = np.cumsum(order)
    alpha = None
    for m in range(n):
        if s - m <= 0:
            break
        a = csum[n - m - 1] / (s - m)
        upper_ok = order[n - m - 1] <= a * (1.0 + 1e-12)
        lower_ok = m == 0 or order[n - m] >= a * (1.0 - 1e-12)
        if upper_ok and lower_ok:
            alpha = a
            break
    if alpha is None:
        # All mass on the top S examples (possible only when the rest are 0).
        clipped = np.minimum(g, order[n - int(round(s))])
        alpha = order[n - int(round(s))]
    clipped = np.minimum(g, alpha)
    p = clipped * (s / clipped.sum())
    p = np.minimum(p, 1.0)
    return ProbabilityAssignment(probabilities=p, expected_size=s, alpha=float(alpha),
                                 clipped_count=int((g >= alpha).sum()))


def variance_formula(grad_norms: Array, p: Array, n: int) -> float:
    """Closed-form estimator variance: (1/N^2) sum (1-p_i) g_i^2 / p_i."""
    g = np.asarray(grad_norms, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0) & (g > 0)):
        raise InfiniteVarianceError("zero probability with nonzero gradient norm")
    safe_p = np.where(p > 0, p, 1.0)
    return float(((1.0 - p) * g ** 2 / safe_p).sum() / n ** 2)


def estimator_stats(net: Network, data: Array, labels: Array, cfg: NeuronConfig,
                    p: Array, draws: int, seed: int = 0) -> MCStats:
    """Monte-Carlo statistics of the inverse-probability gradient estimator.

    Draws Bernoulli masks, forms ghat = (1/N) sum m_i grad_i / p_i, and
    reports its mean, the scalar E||ghat - g||^2, and per-component standard
    errors of the mean.
    """
    if draws < 1:
        raise ValueError("draws must be >= 1")
    grads, _ = per_example_gradients(net, data, labels, cfg)
    n = data.shape[0]
    flat = np.concatenate([g.reshape(n, -1) for g in grads], axis=1)
    g_full = flat.mean(axis=0)
    p = np.asarray(p, dtype=np.float64)
    rng = np.random.default_rng(seed)

    sum_est = np.zeros_like(g_full)
    sum_sq = np.zeros_like(g_full)
    sum_err2 = 0.0
    done = 0
    while done < draws:
        chunk = min(MASK_CHUNK, draws - done)
        masks = rng.random((chunk, n)) < p
        weights = masks / p  # p=0 entries never selected, mask is 0 there
        est = weights @ flat / n  # (chunk, P)
        sum_est += est.sum(axis=0)
        sum_sq += (est ** 2).sum(axis=0)
        sum_err2 += ((est - g_full) ** 2).sum()
        done += chunk
    mean_est = sum_est / draws
    var_comp = np.maximum(sum_sq / draws - mean_est ** 2, 0.0)
    stderr = np.sqrt(var_comp / draws)
    return MCStats(draws=draws, mean_estimate=mean_est, full_gradient=g_full,
                   expected_sq_error=float(sum_err2 / draws),
                   standard_errors=stderr)


def pearson(x: Array, y: Array) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("inputs must be equal-length with at least 2 points")
    xd = x - x.mean()
    yd = y - y.mean()
    denom = np.sqrt((xd ** 2).sum() * (yd ** 2).sum())
    if denom == 0.0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    return float((xd * yd).sum() / denom)


def fd_gradient_check(net: Network, data: Array, labels: Array, cfg: NeuronConfig,
                      epsilon: float = 1e-5, trials: int = 100,
                      seed: int = 0) -> float:
    """Max relative error of smooth-mode BPTT vs central finite differences.

    Probes `trials` randomly chosen parameters.  The forward pass runs in
    smooth mode so the surrogate backward is the exact gradient and finite
    differences are meaningful.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon outside [1e-7, 1e-3]")
    rng = np.random.default_rng(seed)
    trace, loss = forward(net, data, labels, cfg, smooth=True)
    btrace = backward_bptt(net, trace, loss, cfg)
    analytic = btrace.weight_grads()

    def mean_loss(candidate: Network) -> float:
        _, lo = forward(candidate, data, labels, cfg, smooth=True)
        return float(lo.per_example_loss.mean())

    worst = 0.0
    sizes = [w.size for w in net.weights]
    total = sum(sizes)
    for _ in range(trials):
        flat_idx = int(rng.integers(total))
        layer = 0
        while flat_idx >= sizes[layer]:
            flat_idx -= sizes[layer]
            layer += 1
        idx = np.unravel_index(flat_idx, net.weights[layer].shape)
        perturbed = net.copy()
        perturbed.layers[layer][1][idx] += epsilon
        up = mean_loss(perturbed)
        perturbed.layers[layer][1][idx] -= 2.0 * epsilon
        down = mean_loss(perturbed)
        fd = (up - down) / (2.0 * epsilon)
        an = analytic[layer][idx]
        scale = max(abs(fd), abs(an))
        if scale < 1e-10:
            continue
        worst = max(worst, abs(fd - an) / scale)
    return worst


def project_to_capped_simplex(v: Array, total: float, iters: int = 100) -> Array:
    """Project onto {p : sum p = total, 0 <= p <= 1} by bisection on a shift."""
    v = np.asarray(v, dtype=np.float64)
    lo = v.min() - 1.0 - total
    hi = v.max() + 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        s = np.clip(v - mid, 0.0, 1.0).sum()
        if s > total:
            lo = mid
        else:
            hi = mid
    return np.clip(v - 0.5 * (lo + hi), 0.0, 1.0)


def measure_correlations(net: Network, data: Array, labels: Array,
                         cfg: NeuronConfig, score_layers: tuple[int, ...] | None = None
                         ) -> CorrelationReport:
    """Pearson correlation of spike-aware scores and losses vs exact norms."""
    if score_layers is None:
        score_layers = tuple(range(len(net)))
    grads, fb = per_example_gradients(net, data, labels, cfg)
    n = data.shape[0]
    norms = np.sqrt(sum((g.reshape(n, -1) ** 2).sum(axis=1) for g in grads))
    scores = spike_aware_score(fb.btrace, fb.trace, score_layers)
    losses = np.asarray(fb.loss.per_example_loss)
    return CorrelationReport(score_vs_norm=pearson(scores, norms),
                             loss_vs_norm=pearson(losses, norms),
                             sample_size=n)
