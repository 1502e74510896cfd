"""Small MLP encoders with hand-written forward/backward, the EMA-tracked
target copy, SGD with momentum, the cosine learning-rate schedule, and
checkpoint I/O.

The same forward/backward kernels are used by the trainer and by the
standalone reference trainers, so reduction equivalences can be checked
bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class ShapeMismatch(ValueError):
    pass


class CheckpointError(ValueError):
    pass


_MAGIC = b"CMCK"
_VERSION = 1


@dataclass
class Mlp:
    """Fully connected net; ReLU between layers, linear last layer.

    weights[i] has shape (d_in, d_out); forward is x @ W + b.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def params(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def num_params(self) -> int:
        return sum(p.size for p in self.params())


def mlp_init(sizes: list[int], rng: np.random.Generator) -> Mlp:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ShapeMismatch(f"need at least in/out sizes >= 1, got {sizes}")
    weights, biases = [], []
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(scale=np.sqrt(2.0 / d_in), size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    return Mlp(weights, biases)


def mlp_forward(net: Mlp, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Returns (output, tape). tape[0] is the input, tape[l] the activation
    entering layer l; backward needs exactly these plus the weights."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.weights[0].shape[0]:
        raise ShapeMismatch(f"input {X.shape} incompatible with first layer "
                            f"{net.weights[0].shape}")
    tape = [X]
    a = X
    last = len(net.weights) - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ W + b
        a = z if l == last else np.maximum(z, 0.0)
        if l != last:
            tape.append(a)
    return a, tape


def mlp_backward(net: Mlp, tape: list[np.ndarray], grad_out: np.ndarray
                 ) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Backprop through the net given the forward tape.

    Returns (weight grads, bias grads, grad wrt input). ReLU derivative uses
    activation > 0, i.e. the kink at exactly 0 takes the zero branch.
    """
    gW = [None] * len(net.weights)
    gb = [None] * len(net.biases)
    g = np.asarray(grad_out, dtype=np.float64)
    for l in range(len(net.weights) - 1, -1, -1):
        a_in = tape[l]
        gW[l] = a_in.T @ g
        gb[l] = g.sum(axis=0)
        g = g @ net.weights[l].T
        if l > 0:
            g = g * (tape[l] > 0.0)
    return gW, gb, g


def ema_update(target: Mlp, online: Mlp, momentum: float) -> None:
    """target <- momentum * target + (1 - momentum) * online, in place."""
    if not (0.0 <= momentum <= 1.0):
        raise ValueError(f"momentum {momentum} outside [0, 1]")
    for t, o in zip(target.params(), online.params()):
        if t.shape != o.shape:
            raise ShapeMismatch("target/online shapes differ")
        t *= momentum
        t += (1.0 - momentum) * o


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from base_lr at step 0 toward 0 at step total_steps."""
    if total_steps < 1 or not (0 <= step <= total_steps):
        raise ValueError(f"bad schedule position step={step} total={total_steps}")
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))


@dataclass
class SgdState:
    """Momentum buffers, one per parameter array of the tracked nets."""

    velocities: list[np.ndarray]

    @staticmethod
    def for_nets(*nets: Mlp) -> "SgdState":
        vels = [np.zeros_like(p) for net in nets for p in net.params()]
        return SgdState(vels)


def sgd_step(nets_params: list[np.ndarray], grads: list[np.ndarray], state: SgdState,
             lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
             decay_mask: list[bool] | None = None) -> None:
    """v <- momentum v + (g + wd p); p <- p - lr v.

    decay_mask[i] False exempts parameter i (biases) from weight decay.
    """
    if len(nets_params) != len(grads) or len(grads) != len(state.velocities):
        raise ShapeMismatch("params/grads/velocities lengths differ")
    for i, (p, g, v) in enumerate(zip(nets_params, grads, state.velocities)):
        eff = g
        if weight_decay != 0.0 and (decay_mask is None or decay_mask[i]):
            eff = g + weight_decay * p
        v *= momentum
        v += eff
        p -= lr * v


@dataclass
class EncoderPair:
    """Online encoder + predictor trained by gradient, target encoder by EMA."""

    online: Mlp
    predictor: Mlp
    target: Mlp
    ema_momentum: float = 0.99

    @staticmethod
    def create(enc_sizes: list[int], pred_sizes: list[int], rng: np.random.Generator,
               ema_momentum: float = 0.99) -> "EncoderPair":
        if pred_sizes[0] != enc_sizes[-1] or pred_sizes[-1] != enc_sizes[-1]:
            raise ShapeMismatch("predictor must map encoder output dim to itself")
        online = mlp_init(enc_sizes, rng)
        predictor = mlp_init(pred_sizes, rng)
        return EncoderPair(online, predictor, online.copy(), ema_momentum)

    def trainable_params(self) -> list[np.ndarray]:
        return self.online.params() + self.predictor.params()

    def decay_mask(self) -> list[bool]:
        mask = []
        for net in (self.online, self.predictor):
            mask += [True] * len(net.weights) + [False] * len(net.biases)
        return mask

    def step_ema(self) -> None:
        ema_update(self.target, self.online, self.ema_momentum)


# ---------------------------------------------------------------------------
# checkpoints

def _write_net(f, net: Mlp) -> None:
    f.write(struct.pack("<I", len(net.weights)))
    for W, b in zip(net.weights, net.biases):
        f.write(struct.pack("<II", W.shape[0], W.shape[1]))
        f.write(W.astype("<f8").tobytes())
        f.write(b.astype("<f8").tobytes())


def _read_exact(f, size: int, what: str) -> bytes:
    buf = f.read(size)
    if len(buf) != size:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def _read_net(f) -> Mlp:
    (n_layers,) = struct.unpack("<I", _read_exact(f, 4, "layer count"))
    if not (1 <= n_layers <= 64):
        raise CheckpointError(f"implausible layer count {n_layers}")
    weights, biases = [], []
    for _ in range(n_layers):
        d_in, d_out = struct.unpack("<II", _read_exact(f, 8, "layer dims"))
        W = np.frombuffer(_read_exact(f, 8 * d_in * d_out, "weights"), dtype="<f8")
        weights.append(W.reshape(d_in, d_out).copy())
        biases.append(np.frombuffer(_read_exact(f, 8 * d_out, "biases"), dtype="<f8").copy())
    return Mlp(weights, biases)


def save_checkpoint(path, pair: EncoderPair, step: int, epoch: int) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQId", _VERSION, step, epoch, pair.ema_momentum))
        _write_net(f, pair.online)
        _write_net(f, pair.predictor)
        _write_net(f, pair.target)


def load_checkpoint(path) -> tuple[EncoderPair, int, int]:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != _MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        version, step, epoch, m = struct.unpack("<IQId", _read_exact(f, struct.calcsize("<IQId"), "header"))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        online = _read_net(f)
        predictor = _read_net(f)
        target = _read_net(f)
        if f.read(1):
            raise CheckpointError("trailing bytes after checkpoint payload")
    return EncoderPair(online, predictor, target, m), step, epoch
