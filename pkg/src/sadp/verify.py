"""Self-contained verification suite run by the `verify` CLI subcommand.

Each check pits an implementation path against an independent oracle (sorted
closed form, Monte-Carlo, finite differences, brute-force feasible vectors)
and reports one PASS/FAIL line.
"""

from __future__ import annotations

import numpy as np

from . import oracle
from .data import gen_synthetic_split
from .pruning import PruneConfig, schedule_ratio, smooth_probabilities, \
    solve_probabilities
from .snn import NeuronConfig, Network, backward_bptt, forward
from .training import OptimizerState, TrainState, run_training


def random_score_instance(rng: np.random.Generator, n: int) -> np.ndarray:
    """Half-normal scores with occasional heavy-tail outliers to force clipping."""
    g = np.abs(rng.normal(size=n))
    heavy = rng.random(n) < 0.1
    g[heavy] *= rng.uniform(5.0, 50.0, size=int(heavy.sum()))
    return g


def _check_cross_solver(rng, lines) -> bool:
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(4, 129))
        g = random_score_instance(rng, n)
        s = int(rng.integers(1, n + 1))
        it = solve_probabilities(g, s).probabilities
        so = oracle.solve_probabilities_sorted(g, s).probabilities
        worst = max(worst, float(np.abs(it - so).max()),
                    abs(float(it.sum()) - s))
    ok = worst <= 1e-9
    lines.append(f"{'PASS' if ok else 'FAIL'} solver-cross-check: "
                 f"max deviation {worst:.2e} (limit 1e-09)")
    return ok


def _check_optimality(rng, lines) -> bool:
    ok = True
    for _ in range(10):
        g = random_score_instance(rng, 16)
        s = int(rng.integers(2, 15))
        p_opt = solve_probabilities(g, s).probabilities
        best = oracle.variance_formula(g, np.maximum(p_opt, 1e-300), 16)
        for _ in range(200):
            cand = oracle.project_to_capped_simplex(rng.random(16) * 2, s)
            cand = np.clip(cand, 1e-12, 1.0)
            if oracle.variance_formula(g, cand, 16) < best - 1e-9:
                ok = False
    lines.append(f"{'PASS' if ok else 'FAIL'} solver-optimality: solver beats "
                 "random feasible probability vectors")
    return ok


def _check_smoothing(rng, lines) -> bool:
    worst_min, worst_sum = 0.0, 0.0
    for _ in range(100):
        n = int(rng.integers(8, 65))
        g = random_score_instance(rng, n) + 1e-6
        s = int(rng.integers(2, max(3, n // 2)))
        beta = float(rng.uniform(0.01, max(0.02, 0.8 * s / n)))
        a = smooth_probabilities(g, s, beta)
        p = a.probabilities
        nz = (p < 1.0) & (g > 0)
        if a.gamma > 0 and np.any(nz):
            worst_min = max(worst_min, abs(float(p[nz].min()) - beta))
        worst_sum = max(worst_sum, abs(float(p.sum()) - s))
    ok = worst_min <= 1e-9 and worst_sum <= 1e-9
    lines.append(f"{'PASS' if ok else 'FAIL'} smoothing: floor error "
                 f"{worst_min:.2e}, sum error {worst_sum:.2e} (limit 1e-09)")
    return ok


def _check_schedule(lines) -> bool:
    cfg = PruneConfig(ratio=0.5, max_ratio=0.7, epochs=100)
    ok = abs(schedule_ratio(100, cfg) - 0.7) < 1e-12
    mean = np.mean([schedule_ratio(k, cfg) for k in range(1, 101)])
    ok &= abs(mean - (0.5 + 0.2 / 100)) < 1e-12
    lines.append(f"{'PASS' if ok else 'FAIL'} schedule: endpoint and mean exact")
    return bool(ok)


def _tiny_net(seed=0, arch="dense:16,dense:4", dim=24):
    return Network.from_arch(arch, (dim,), seed=seed)


def _check_fd(rng, lines) -> bool:
    cfg = NeuronConfig(decay=0.5, threshold=1.0, surrogate_width=1.0,
                       reset_detached=False, time_steps=4)
    net = _tiny_net(seed=3)
    data = (rng.random((6, 4, 24)) < 0.5).astype(float)
    labels = rng.integers(0, 4, size=6)
    err = oracle.fd_gradient_check(net, data, labels, cfg, trials=50, seed=11)
    ok = err <= 1e-4
    lines.append(f"{'PASS' if ok else 'FAIL'} finite-difference: max relative "
                 f"error {err:.2e} (limit 1e-04)")
    return ok


def _check_zero_spike_grad(lines) -> bool:
    cfg = NeuronConfig(decay=0.5, time_steps=3)
    net = _tiny_net(seed=1)
    data = np.zeros((4, 3, 24))
    labels = np.zeros(4, dtype=int)
    trace, lo = forward(net, data, labels, cfg)
    bt = backward_bptt(net, trace, lo, cfg)
    ok = all(float(np.abs(g).max()) == 0.0 for g in bt.per_example_grads)
    lines.append(f"{'PASS' if ok else 'FAIL'} zero-spike-grad: silent layers "
                 "yield exactly zero weight gradients")
    return ok


def _mc_setup(rng):
    cfg = NeuronConfig(decay=0.5, time_steps=4)
    net = _tiny_net(seed=7)
    data = (rng.random((64, 4, 24)) < 0.4).astype(float)
    labels = rng.integers(0, 4, size=64)
    rep = oracle.exact_grad_norms(net, data, labels, cfg, (0, 1))
    p = solve_probabilities(rep.full_norms + 1e-9, 32).probabilities
    p = np.clip(p, 1e-6, 1.0)
    return cfg, net, data, labels, rep, p


def _check_unbiased_and_variance(rng, lines) -> bool:
    cfg, net, data, labels, rep, p = _mc_setup(rng)
    stats = oracle.estimator_stats(net, data, labels, cfg, p, draws=20000, seed=5)
    dev = np.abs(stats.mean_estimate - stats.full_gradient)
    band = 4.0 * np.maximum(stats.standard_errors, 1e-300)
    active = stats.standard_errors > 0
    unbiased = bool(np.all(dev[active] <= band[active]))
    lines.append(f"{'PASS' if unbiased else 'FAIL'} unbiasedness: mean estimator "
                 "within 4 standard errors componentwise")
    formula = oracle.variance_formula(rep.full_norms, p, 64)
    rel = abs(stats.expected_sq_error - formula) / formula
    var_ok = rel <= 0.05
    lines.append(f"{'PASS' if var_ok else 'FAIL'} variance-formula: Monte-Carlo vs "
                 f"closed form relative error {rel:.3f} (limit 0.05)")
    return unbiased and var_ok


def _check_bound(rng, lines) -> bool:
    cfg = NeuronConfig(decay=0.5, time_steps=4)
    net = _tiny_net(seed=9, arch="dense:16,dense:8,dense:4", dim=24)
    data = (rng.random((128, 4, 24)) < 0.4).astype(float)
    labels = rng.integers(0, 4, size=128)
    rep = oracle.exact_grad_norms(net, data, labels, cfg, (0, 1, 2))
    dense_ok = bool(np.all(rep.scores >= rep.restricted_norms - 1e-9))

    conv_cfg = NeuronConfig(decay=0.5, time_steps=3)
    conv_net = Network.from_arch("conv:4x3x3,dense:4", (1, 8, 8), seed=2,
                                 init_scale=2.0)
    cdata = (rng.random((16, 3, 1, 8, 8)) < 0.5).astype(float)
    clabels = rng.integers(0, 4, size=16)
    crep = oracle.exact_grad_norms(conv_net, cdata, clabels, conv_cfg, (0, 1),
                                   apply_patch_factor=True)
    conv_ok = bool(np.all(crep.scores >= crep.restricted_norms - 1e-9))
    ok = dense_ok and conv_ok
    lines.append(f"{'PASS' if ok else 'FAIL'} gradient-norm-bound: dense "
                 f"{'ok' if dense_ok else 'violated'}, conv with patch factor "
                 f"{'ok' if conv_ok else 'violated'}")
    return ok


def warmup_correlations(seeds=(0, 1, 2), warmup_epochs=5):
    """Train briefly per seed, then measure score/loss correlations vs norms."""
    reports = []
    for seed in seeds:
        train, _ = gen_synthetic_split(4, 256, 8, 8, 24, noise=0.15, seed=seed)
        net = Network.from_arch("dense:16,dense:4", (24,), seed=seed)
        cfg = NeuronConfig(decay=0.5, time_steps=8)
        opt = OptimizerState(base_lr=0.05, momentum=0.9, schedule="constant")
        state = TrainState(epochs=warmup_epochs, batch_size=32, seed_init=seed,
                           seed_sample=seed + 100, seed_shuffle=seed + 200)
        run_training(net, train, None, cfg, None, opt, state)
        reports.append((seed, oracle.measure_correlations(
            net, train.data, train.labels, cfg)))
    return reports


def _check_correlation_ordering(lines, corr_rows) -> bool:
    reports = warmup_correlations()
    wins = 0
    for seed, rep in reports:
        corr_rows.append(f"{seed},{rep.score_vs_norm:.6f},{rep.loss_vs_norm:.6f}")
        if rep.score_vs_norm > rep.loss_vs_norm:
            wins += 1
    ok = wins == len(reports)
    lines.append(f"{'PASS' if ok else 'FAIL'} correlation-ordering: spike-aware "
                 f"score beats loss in {wins}/{len(reports)} seeds")
    return ok


def _check_pearson(lines) -> bool:
    val = oracle.pearson(np.array([1.0, 2.0, 3.0]), np.array([2.0, 4.0, 7.0]))
    # By hand: covariance sum 5, variance sums 2 and 114/9, so r = 15/sqrt(228).
    ok = abs(val - 15.0 / np.sqrt(228.0)) < 1e-12
    lines.append(f"{'PASS' if ok else 'FAIL'} pearson: hand-checked value "
                 f"{val:.6f}")
    return ok


def run_suite(seed: int = 0) -> tuple[bool, list[str], list[str]]:
    """Run every check; returns (all_passed, report_lines, correlation_csv_rows)."""
    rng = np.random.default_rng(seed)
    lines: list[str] = []
    corr_rows = ["seed,score_vs_norm,loss_vs_norm"]
    results = [
        _check_cross_solver(rng, lines),
        _check_optimality(rng, lines),
        _check_smoothing(rng, lines),
        _check_schedule(lines),
        _check_fd(rng, lines),
        _check_zero_spike_grad(lines),
        _check_unbiased_and_variance(rng, lines),
        _check_bound(rng, lines),
        _check_correlation_ordering(lines, corr_rows),
        _check_pearson(lines),
    ]
    passed = all(results)
    lines.append(f"{'ALL CHECKS PASSED' if passed else 'SOME CHECKS FAILED'} "
                 f"({sum(results)}/{len(results)})")
    return passed, lines, corr_rows
