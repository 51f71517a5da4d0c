"""Leaky integrate-and-fire network engine with full trace recording.

Implements dense and 2-D convolutional spiking layers, a forward pass that
records every membrane potential and spike, and a manual backprop-through-time
backward pass with a triangular surrogate gradient.  Everything is float64
numpy; there is no autodiff framework underneath.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Tensor dimensions do not match the layer/network contract."""


class StateError(RuntimeError):
    """Operation invoked without the state it requires (e.g. missing trace)."""


class UnsupportedLayerError(ValueError):
    """Operation not defined for this layer kind."""


@dataclass
class NeuronConfig:
    """Shared LIF parameters: decay, threshold, surrogate width, reset mode."""

    decay: float
    threshold: float = 1.0
    surrogate_width: float = 1.0
    reset_detached: bool = True
    time_steps: int = 1

    def __post_init__(self) -> None:
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must lie in (0, 1], got {self.decay}")
        if self.threshold <= 0.0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")
        if self.surrogate_width <= 0.0:
            raise ValueError(f"surrogate_width must be positive, got {self.surrogate_width}")
        if self.time_steps < 1:
            raise ValueError(f"time_steps must be >= 1, got {self.time_steps}")


@dataclass
class LayerSpec:
    """Static description of one trainable layer."""

    kind: str  # "dense" or "conv2d"
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        self.input_shape = tuple(self.input_shape)
        self.output_shape = tuple(self.output_shape)
        if self.kind not in ("dense", "conv2d"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if len(self.input_shape) != 3 or len(self.output_shape) != 3:
                raise ShapeError("conv2d layers need (C, H, W) input and output shapes")
            if self.kernel_size < 1 or self.stride < 1 or self.padding < 0:
                raise ValueError("invalid conv geometry")
            expect = conv_output_hw(self.input_shape[1:], self.kernel_size,
                                    self.stride, self.padding)
            if expect != self.output_shape[1:]:
                raise ShapeError(
                    f"conv output shape {self.output_shape[1:]} inconsistent with "
                    f"geometry (expected {expect})")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (int(np.prod(self.output_shape)), int(np.prod(self.input_shape)))
        k = self.kernel_size
        return (self.output_shape[0], self.input_shape[0], k, k)

    @property
    def fan_in(self) -> int:
        if self.kind == "dense":
            return int(np.prod(self.input_shape))
        return self.input_shape[0] * self.kernel_size * self.kernel_size


def conv_output_hw(hw: tuple[int, int], kernel: int, stride: int,
                   padding: int) -> tuple[int, int]:
    h = (hw[0] + 2 * padding - kernel) // stride + 1
    w = (hw[1] + 2 * padding - kernel) // stride + 1
    if h < 1 or w < 1:
        raise ShapeError("conv kernel does not fit the padded input")
    return (h, w)


def patch_count(spec: LayerSpec) -> int:
    """Number of sliding-window positions of a conv layer."""
    if spec.kind != "conv2d":
        raise UnsupportedLayerError("patch_count is only defined for conv2d layers")
    h, w = spec.output_shape[1:]
    return h * w


class Network:
    """Ordered stack of (LayerSpec, weight) pairs; adjacent shapes must compose."""

    def __init__(self, layers: list[tuple[LayerSpec, Array]]):
        if not layers:
            raise ValueError("network needs at least one layer")
        for i in range(1, len(layers)):
            prev, cur = layers[i - 1][0], layers[i][0]
            if int(np.prod(prev.output_shape)) != int(np.prod(cur.input_shape)) \
                    and prev.output_shape != cur.input_shape:
                raise ShapeError(
                    f"layer {i} input {cur.input_shape} does not compose with "
                    f"layer {i - 1} output {prev.output_shape}")
        for spec, w in layers:
            if tuple(w.shape) != spec.weight_shape:
                raise ShapeError(f"weight shape {w.shape} != expected {spec.weight_shape}")
            if not np.all(np.isfinite(w)):
                raise ValueError("non-finite weights")
        self.layers = [(spec, np.asarray(w, dtype=np.float64)) for spec, w in layers]

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def specs(self) -> list[LayerSpec]:
        return [spec for spec, _ in self.layers]

    @property
    def weights(self) -> list[Array]:
        return [w for _, w in self.layers]

    def set_weights(self, weights: list[Array]) -> None:
        for (spec, old), new in zip(self.layers, weights):
            if new.shape != old.shape:
                raise ShapeError("weight shape mismatch in set_weights")
        self.layers = [(spec, np.asarray(w, dtype=np.float64))
                       for (spec, _), w in zip(self.layers, weights)]

    def copy(self) -> "Network":
        return Network([(spec, w.copy()) for spec, w in self.layers])

    @classmethod
    def from_arch(cls, arch: str, input_shape: tuple[int, ...], seed: int = 0,
                  init_scale: float = 1.0) -> "Network":
        """Build a network from an arch string like "dense:64,dense:10" or
        "conv:8x3x3,dense:10".  Conv entries accept optional sN / pM suffixes
        for stride and padding, e.g. "conv:8x3x3s2p1"."""
        rng = np.random.default_rng(seed)
        shape = tuple(input_shape)
        layers: list[tuple[LayerSpec, Array]] = []
        for token in arch.split(","):
            token = token.strip()
            if token.startswith("dense:"):
                out = int(token.split(":", 1)[1])
                spec = LayerSpec("dense", shape, (out,))
            elif token.startswith("conv:"):
                body = token.split(":", 1)[1]
                stride, padding = 1, 0
                if "p" in body:
                    body, p = body.rsplit("p", 1)
                    padding = int(p)
                if "s" in body:
                    body, s = body.rsplit("s", 1)
                    stride = int(s)
                oc, kh, kw = (int(v) for v in body.split("x"))
                if kh != kw:
                    raise ValueError("only square kernels are supported")
                if len(shape) != 3:
                    raise ShapeError(f"conv layer needs a (C, H, W) input, got {shape}")
                hw = conv_output_hw(shape[1:], kh, stride, padding)
                spec = LayerSpec("conv2d", shape, (oc,) + hw,
                                 kernel_size=kh, stride=stride, padding=padding)
            else:
                raise ValueError(f"cannot parse layer token {token!r}")
            bound = init_scale * math.sqrt(3.0 / spec.fan_in)
            w = rng.uniform(-bound, bound, size=spec.weight_shape)
            layers.append((spec, w))
            shape = spec.output_shape
        return cls(layers)


@dataclass
class ForwardTrace:
    """Everything recorded during a forward pass.

    spikes[0] is the encoded input; spikes[l] / membranes[l-1] for l >= 1 are
    layer outputs, each with shape (batch, T, *layer_shape).  Membranes are the
    post-reset potentials; the pre-reset value is membranes + threshold*spikes.
    """

    spikes: list[Array]
    membranes: list[Array]
    specs: list[LayerSpec]
    smooth: bool = False

    @property
    def time_steps(self) -> int:
        return self.spikes[0].shape[1]

    @property
    def batch_size(self) -> int:
        return self.spikes[0].shape[0]


@dataclass
class BackwardTrace:
    """Per-layer, per-time errors and per-example weight gradients."""

    errors: list[Array]             # errors[l] has shape (batch, T, *layer_shape)
    per_example_grads: list[Array]  # grads[l] has shape (batch, *weight_shape)
    specs: list[LayerSpec]

    def weight_grads(self, example_weights: Array | None = None) -> list[Array]:
        """Batch gradient per layer: mean over examples, optionally reweighted."""
        out = []
        for g in self.per_example_grads:
            if example_weights is None:
                out.append(g.mean(axis=0))
            else:
                out.append(np.tensordot(example_weights, g, axes=(0, 0)) / g.shape[0])
        return out


@dataclass
class LossOutput:
    """Per-example cross-entropy loss on spike-count logits."""

    per_example_loss: Array  # (batch,)
    logits: Array            # (batch, classes)
    probs: Array             # softmax of logits
    labels: Array            # (batch,) int


def lif_step(u_prev: Array, input_current: Array,
             cfg: NeuronConfig) -> tuple[Array, Array]:
    """One LIF update: decay + integrate, threshold at >= theta, subtract reset."""
    u_prev = np.asarray(u_prev, dtype=np.float64)
    input_current = np.asarray(input_current, dtype=np.float64)
    if u_prev.shape != input_current.shape:
        raise ShapeError(f"membrane {u_prev.shape} vs current {input_current.shape}")
    u_pre = cfg.decay * u_prev + input_current
    spikes = (u_pre >= cfg.threshold).astype(np.float64)
    return u_pre - cfg.threshold * spikes, spikes


def surrogate_grad(u: Array | float, cfg: NeuronConfig) -> Array | float:
    """Triangular surrogate: max(0, 1 - |u - theta|/a)/a."""
    a, th = cfg.surrogate_width, cfg.threshold
    return np.maximum(0.0, 1.0 - np.abs(np.asarray(u, dtype=np.float64) - th) / a) / a


def soft_spike(u: Array, cfg: NeuronConfig) -> Array:
    """Piecewise-quadratic antiderivative of the triangular surrogate.

    Used by smooth mode: its derivative is exactly surrogate_grad, so BPTT is
    the exact gradient of the smooth forward pass.
    """
    a, th = cfg.surrogate_width, cfg.threshold
    z = np.asarray(u, dtype=np.float64) - th
    out = np.zeros_like(z)
    left = (z > -a) & (z <= 0.0)
    right = (z > 0.0) & (z < a)
    out[left] = (z[left] + a) ** 2 / (2.0 * a * a)
    out[right] = 1.0 - (a - z[right]) ** 2 / (2.0 * a * a)
    out[z >= a] = 1.0
    return out


def im2col(x: Array, kernel: int, stride: int, padding: int) -> Array:
    """(B, C, H, W) -> (B, C*k*k, P) sliding-window columns."""
    b, c, _, _ = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, k, k)
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kernel * kernel, ho * wo)


def col2im(cols: Array, x_shape: tuple[int, ...], kernel: int, stride: int,
           padding: int) -> Array:
    """Adjoint of im2col: scatter-add columns back onto the input grid."""
    b, c, h, w = x_shape
    ho, wo = conv_output_hw((h, w), kernel, stride, padding)
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    cols6 = cols.reshape(b, c, kernel, kernel, ho, wo)
    for i in range(kernel):
        for j in range(kernel):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols6[:, :, i, j]
    return xp[:, :, padding:padding + h, padding:padding + w]


def _apply_layer(spec: LayerSpec, w: Array, x: Array) -> Array:
    """Synaptic current of one layer for a batch input at a single time step."""
    b = x.shape[0]
    if spec.kind == "dense":
        return x.reshape(b, -1) @ w.T
    cols = im2col(x.reshape((b,) + spec.input_shape), spec.kernel_size,
                  spec.stride, spec.padding)
    wf = w.reshape(w.shape[0], -1)
    out = np.einsum("oc,bcp->bop", wf, cols)
    return out.reshape((b,) + spec.output_shape)


def _backproject(spec: LayerSpec, w: Array, delta: Array) -> Array:
    """Map an error at a layer's output back to its input spikes."""
    b = delta.shape[0]
    if spec.kind == "dense":
        return (delta.reshape(b, -1) @ w).reshape((b,) + spec.input_shape)
    wf = w.reshape(w.shape[0], -1)
    dflat = delta.reshape(b, w.shape[0], -1)
    cols = np.einsum("oc,bop->bcp", wf, dflat)
    return col2im(cols, (b,) + spec.input_shape, spec.kernel_size,
                  spec.stride, spec.padding)


def forward(net: Network, encoded_input: Array, labels: Array, cfg: NeuronConfig,
            smooth: bool = False) -> tuple[ForwardTrace, LossOutput]:
    """Run the network over T time steps, recording all state.

    encoded_input has shape (batch, T, *input_shape); spikes or currents at
    layer 0.  The readout is the per-class mean output spike count over T,
    scored with softmax cross-entropy.  With smooth=True the hard threshold is
    replaced by its soft counterpart (for gradient checking).
    """
    x = np.asarray(encoded_input, dtype=np.float64)
    if x.ndim < 3 or x.shape[1] != cfg.time_steps:
        raise ShapeError(f"input must be (batch, T={cfg.time_steps}, ...), got {x.shape}")
    if tuple(x.shape[2:]) != net.specs[0].input_shape \
            and int(np.prod(x.shape[2:])) != int(np.prod(net.specs[0].input_shape)):
        raise ShapeError(f"input shape {x.shape[2:]} does not match layer 0 "
                         f"input {net.specs[0].input_shape}")
    batch, t_steps = x.shape[0], x.shape[1]
    labels = np.asarray(labels, dtype=np.int64)

    spikes: list[Array] = [x]
    membranes: list[Array] = []
    for spec, w in net.layers:
        u = np.zeros((batch,) + spec.output_shape)
        o_rec = np.empty((batch, t_steps) + spec.output_shape)
        u_rec = np.empty((batch, t_steps) + spec.output_shape)
        prev = spikes[-1]
        for t in range(t_steps):
            cur = _apply_layer(spec, w, prev[:, t]).reshape((batch,) + spec.output_shape)
            u_pre = cfg.decay * u + cur
            o = soft_spike(u_pre, cfg) if smooth else \
                (u_pre >= cfg.threshold).astype(np.float64)
            u = u_pre - cfg.threshold * o
            o_rec[:, t] = o
            u_rec[:, t] = u
        spikes.append(o_rec)
        membranes.append(u_rec)

    logits = spikes[-1].reshape(batch, t_steps, -1).mean(axis=1)
    shifted = logits - logits.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=1, keepdims=True)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("labels out of range for the output layer")
    nll = -np.log(probs[np.arange(batch), labels])
    trace = ForwardTrace(spikes=spikes, membranes=membranes, specs=net.specs,
                         smooth=smooth)
    loss = LossOutput(per_example_loss=nll, logits=logits, probs=probs, labels=labels)
    return trace, loss


def backward_bptt(net: Network, trace: ForwardTrace, loss: LossOutput,
                  cfg: NeuronConfig) -> BackwardTrace:
    """Backprop through time over the recorded trace.

    Errors are d(per-example loss)/d(pre-reset membrane); the hard spike
    derivative is replaced by the triangular surrogate.  Per-example weight
    gradients are kept so that scoring and unbiasedness checks can reweight
    them after the fact.
    """
    if trace is None or not trace.spikes:
        raise StateError("backward_bptt needs a forward trace")
    batch, t_steps = trace.batch_size, trace.time_steps
    n_layers = len(net)
    onehot = np.zeros_like(loss.probs)
    onehot[np.arange(batch), loss.labels] = 1.0
    dlogits = loss.probs - onehot  # d(nll_i)/d(logits_i)

    errors: list[Array] = [None] * n_layers  # type: ignore[list-item]
    grads: list[Array] = [None] * n_layers   # type: ignore[list-item]
    for l in range(n_layers - 1, -1, -1):
        spec, w = net.layers[l]
        o = trace.spikes[l + 1]
        u_pre = trace.membranes[l] + cfg.threshold * o
        sg = surrogate_grad(u_pre, cfg)
        reset_fac = np.ones_like(sg) if cfg.reset_detached \
            else 1.0 - cfg.threshold * sg
        delta = np.zeros((batch, t_steps) + spec.output_shape)
        upper_spec = None if l == n_layers - 1 else net.layers[l + 1][0]
        for t in range(t_steps - 1, -1, -1):
            if l == n_layers - 1:
                do = (dlogits / t_steps).reshape((batch,) + spec.output_shape)
            else:
                do = _backproject(upper_spec, net.layers[l + 1][1],
                                  errors[l + 1][:, t])
                do = do.reshape((batch,) + spec.output_shape)
            d = sg[:, t] * do
            if t < t_steps - 1:
                d = d + cfg.decay * reset_fac[:, t] * delta[:, t + 1]
            delta[:, t] = d
        errors[l] = delta
        prev = trace.spikes[l]
        if spec.kind == "dense":
            grads[l] = np.einsum("bto,bti->boi",
                                 delta.reshape(batch, t_steps, -1),
                                 prev.reshape(batch, t_steps, -1))
        else:
            oc = spec.output_shape[0]
            acc = np.zeros((batch,) + spec.weight_shape)
            for t in range(t_steps):
                cols = im2col(prev[:, t].reshape((batch,) + spec.input_shape),
                              spec.kernel_size, spec.stride, spec.padding)
                dflat = delta[:, t].reshape(batch, oc, -1)
                acc += np.einsum("bop,bcp->boc", dflat, cols).reshape(
                    (batch,) + spec.weight_shape)
            grads[l] = acc
    return BackwardTrace(errors=errors, per_example_grads=grads, specs=net.specs)
