"""Command-line entry point: train / verify / analyze / gen-data."""

from __future__ import annotations

import argparse
import io
import logging
import os
import sys
import tempfile

import numpy as np

from . import oracle, verify
from .config import RunConfig, UsageError, parse_config, parse_score_layers
from .data import (DatasetHandle, atomic_write_bytes, encode,
                   gen_synthetic_split, load_idx, read_spike_file,
                   write_metrics, write_spike_file)
from .pruning import PruneConfig, smooth_probabilities
from .snn import NeuronConfig, Network
from .training import (NumericDivergenceError, OptimizerState, TrainState,
                       run_training)

logger = logging.getLogger("sadp")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("SADP_LOG", "error"), logging.ERROR)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def neuron_config(cfg: RunConfig, time_steps: int) -> NeuronConfig:
    return NeuronConfig(decay=cfg["neuron.lambda"],
                        threshold=cfg["neuron.threshold"],
                        surrogate_width=cfg["neuron.surrogate_width"],
                        reset_detached=cfg["neuron.reset_detached"],
                        time_steps=time_steps)


def load_dataset(cfg: RunConfig) -> tuple[DatasetHandle, DatasetHandle]:
    """Resolve the configured dataset into pre-encoded train/test handles.

    dataset.path may be an SPKT file or "images.idx:labels.idx" (static IDX
    data, encoded per encode.mode with dataset.synthetic.t time steps).  With
    no path, a synthetic spike dataset of dataset.synthetic.n train examples
    (plus a held-out 25% test set) is generated.
    """
    path = cfg["dataset.path"]
    t = cfg["dataset.synthetic.t"]
    if path:
        if ":" in path:
            images, labels = path.split(":", 1)
            handle = load_idx(images, labels)
            spikes = encode(handle.data, cfg["encode.mode"], t, seed=cfg["seed.init"])
            handle = DatasetHandle(spikes, handle.labels, time_steps=t)
        else:
            handle = read_spike_file(path)
        n_test = max(handle.n // 5, 1)
        n_train = handle.n - n_test
        train = DatasetHandle(handle.data[:n_train], handle.labels[:n_train],
                              time_steps=handle.time_steps)
        test = DatasetHandle(handle.data[n_train:], handle.labels[n_train:],
                             time_steps=handle.time_steps)
        return train, test
    if cfg["dataset.synthetic.n"] <= 0:
        raise UsageError("missing required config key: dataset.path "
                         "(or set dataset.synthetic.n for synthetic data)")
    n = cfg["dataset.synthetic.n"]
    return gen_synthetic_split(cfg["dataset.synthetic.classes"], n,
                               max(n // 4, cfg["dataset.synthetic.classes"]),
                               t, cfg["dataset.synthetic.dim"],
                               cfg["dataset.synthetic.noise"],
                               seed=cfg["seed.init"])


def build_network(cfg: RunConfig, train: DatasetHandle) -> Network:
    arch = cfg["net.arch"]
    shape = train.input_shape
    if arch.lstrip().startswith("conv") and len(shape) == 2:
        shape = (1,) + shape  # implicit single channel for image-like input
    return Network.from_arch(arch, shape, seed=cfg["seed.init"])


def save_weights(net: Network, arch: str, input_shape, path: str) -> None:
    buf = io.BytesIO()
    arrays = {f"w{i}": w for i, w in enumerate(net.weights)}
    np.savez(buf, arch=np.array(arch), input_shape=np.array(input_shape),
             **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_weights(path: str) -> Network:
    with np.load(path) as z:
        arch = str(z["arch"])
        shape = tuple(int(v) for v in z["input_shape"])
        net = Network.from_arch(arch, shape)
        net.set_weights([z[f"w{i}"] for i in range(len(net))])
    return net


def _prune_config(cfg: RunConfig) -> PruneConfig | None:
    if not cfg["prune.enabled"]:
        return None
    return PruneConfig(ratio=cfg["prune.ratio"], max_ratio=cfg["prune.max_ratio"],
                       epochs=cfg["train.epochs"],
                       smoothing_constant=cfg["prune.beta"],
                       seed=cfg["seed.sample"],
                       exact_average=cfg["prune.exact_average"])


def cmd_train(cfg: RunConfig) -> int:
    train, test = load_dataset(cfg)
    t = train.time_steps
    if t is None:
        raise UsageError("training requires pre-encoded spike data")
    net = build_network(cfg, train)
    ncfg = neuron_config(cfg, t)
    opt = OptimizerState(base_lr=cfg["train.lr"], momentum=cfg["train.momentum"],
                         weight_decay=cfg["train.weight_decay"],
                         schedule=cfg["train.lr_schedule"])
    state = TrainState(epochs=cfg["train.epochs"], batch_size=cfg["train.batch"],
                       seed_init=cfg["seed.init"], seed_sample=cfg["seed.sample"],
                       seed_shuffle=cfg["seed.shuffle"])
    metrics = run_training(net, train, test, ncfg, _prune_config(cfg), opt, state,
                           score_layers=parse_score_layers(cfg["score.layers"],
                                                           len(net)),
                           score_kind=cfg["prune.score"])
    write_metrics(metrics, cfg["out.metrics"])
    save_weights(net, cfg["net.arch"], net.specs[0].input_shape,
                 cfg["out.weights"])
    print(f"trained {state.epochs} epochs; metrics -> {cfg['out.metrics']}, "
          f"weights -> {cfg['out.weights']}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    passed, lines, corr_rows = verify.run_suite(seed=cfg["seed.init"])
    report = "\n".join(lines) + "\n"
    sys.stdout.write(report)
    atomic_write_bytes(cfg["out.report"], report.encode())
    atomic_write_bytes(cfg["out.metrics"], ("\n".join(corr_rows) + "\n").encode())
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def cmd_analyze(cfg: RunConfig) -> int:
    train, _ = load_dataset(cfg)
    net = load_weights(cfg["out.weights"])
    ncfg = neuron_config(cfg, train.time_steps)
    layers = parse_score_layers(cfg["score.layers"], len(net))
    rep = oracle.exact_grad_norms(net, train.data, train.labels, ncfg, layers)
    corr = oracle.measure_correlations(net, train.data, train.labels, ncfg)
    n = train.n
    target = int(round((1.0 - cfg["prune.ratio"]) * n))
    beta = cfg["prune.beta"]
    rows = ["method,variance"]
    for name, scores in (("spike_aware", rep.scores),
                         ("loss", None),
                         ("uniform", None)):
        if name == "uniform":
            p = np.full(n, target / n)
        else:
            if name == "loss":
                _, fb = oracle.per_example_gradients(net, train.data, train.labels,
                                                     ncfg)
                scores = np.asarray(fb.loss.per_example_loss)
            p = smooth_probabilities(scores + 1e-12, target, beta).probabilities
        p = np.clip(p, 1e-9, 1.0)
        rows.append(f"{name},{oracle.variance_formula(rep.full_norms, p, n):.10g}")
    summary = (f"examples: {n}\n"
               f"pearson(spike_aware_score, grad_norm) = {corr.score_vs_norm:.6f}\n"
               f"pearson(loss, grad_norm) = {corr.loss_vs_norm:.6f}\n"
               + "\n".join(rows) + "\n")
    sys.stdout.write(summary)
    atomic_write_bytes(cfg["out.report"], summary.encode())
    atomic_write_bytes(cfg["out.metrics"], ("\n".join(rows) + "\n").encode())
    return EXIT_OK


def cmd_gen_data(cfg: RunConfig) -> int:
    cfg.require("dataset.path")
    if cfg["dataset.synthetic.n"] <= 0:
        raise UsageError("missing required config key: dataset.synthetic.n")
    from .data import gen_synthetic
    handle = gen_synthetic(cfg["dataset.synthetic.classes"],
                           cfg["dataset.synthetic.n"],
                           cfg["dataset.synthetic.t"],
                           cfg["dataset.synthetic.dim"],
                           cfg["dataset.synthetic.noise"],
                           seed=cfg["seed.init"])
    write_spike_file(handle, cfg["dataset.path"])
    print(f"wrote {handle.n} examples to {cfg['dataset.path']}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "verify": cmd_verify, "analyze": cmd_analyze,
            "gen-data": cmd_gen_data}


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(
        prog="sadp",
        description="Spiking-network training lab with variance-minimizing "
                    "data pruning")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("-c", "--config", help="key=value config file")
    parser.add_argument("-o", "--set", dest="overrides", action="append",
                        default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericDivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
