"""Fully connected logit classifiers and their training machinery.

The network maps a feature vector (parameters concatenated with an
observable) to a single unbounded logit; the sigmoid is applied downstream,
and all losses are computed in logit space. Everything runs in float64 on
one thread per training run, so identical (config, seed) pairs reproduce
bitwise-identical trajectories.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import Tape, Var

__all__ = [
    "ClassifierNet",
    "OptimizerState",
    "DivergenceError",
    "mlp_forward",
    "forward_on_tape",
    "adam_step",
    "lr_schedule_update",
    "finite_diff_check",
    "save_weights",
    "load_weights",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

PLATEAU_PATIENCE = 10
PLATEAU_FACTOR = 10.0

WEIGHTS_FORMAT = "bnre-weights"
WEIGHTS_VERSION = 1


class DivergenceError(RuntimeError):
    """Raised when a NaN/Inf gradient or parameter signals a diverged run."""


class ClassifierNet:
    """ReLU MLP with a single-logit head.

    Weights are stored as ``[out, in]`` matrices. Consecutive layer shapes
    must compose; construction rejects anything else.
    """

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray],
                 activation: str = "relu"):
        if activation != "relu":
            raise ValueError(f"unsupported activation: {activation!r}")
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias vector per weight matrix")
        for k, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {k}: weight {w.shape} and bias {b.shape} mismatch")
            if k > 0 and w.shape[1] != weights[k - 1].shape[0]:
                raise ValueError(
                    f"layer {k} input dim {w.shape[1]} != layer {k - 1} output dim "
                    f"{weights[k - 1].shape[0]}")
        if weights[-1].shape[0] != 1:
            raise ValueError("output layer must produce a single logit")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.activation = activation

    @classmethod
    def initialize(cls, input_dim: int, hidden_layers: int, hidden_units: int,
                   rng: np.random.Generator) -> "ClassifierNet":
        """He-style uniform fan-in init (bound sqrt(6/fan_in)), zero biases.

        The output layer starts at zero so the initial classifier is exactly
        the uninformative d = 0.5: the implied density ratio is 1 and the
        initial posterior coincides with the prior. Training then moves from
        the prior toward the data, which keeps early-stopped small-budget
        runs conservative instead of frozen at a random overconfident tilt.
        """
        sizes = [input_dim] + [hidden_units] * hidden_layers + [1]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = math.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        weights[-1][:] = 0.0
        return cls(weights, biases)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    def parameters(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def copy(self) -> "ClassifierNet":
        return ClassifierNet([w.copy() for w in self.weights],
                             [b.copy() for b in self.biases], self.activation)

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Batch forward: [n, input_dim] -> [n]."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected [n, {self.input_dim}] input, got {x.shape}")
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w.T + b, 0.0)
        return (h @ self.weights[-1].T + self.biases[-1]).reshape(-1)

    def logit(self, v: np.ndarray) -> float:
        """Single-input forward: [input_dim] -> scalar logit."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.input_dim,):
            raise ValueError(f"expected length-{self.input_dim} input, got {v.shape}")
        return float(self.logits(v[None, :])[0])


def forward_on_tape(x: np.ndarray, weight_vars: list[Var], bias_vars: list[Var]) -> Var:
    """Recorded batch forward; returns the logit vector as a Var."""
    h = autodiff.leaf(np.asarray(x, dtype=np.float64))
    for k, (w, b) in enumerate(zip(weight_vars, bias_vars)):
        h = autodiff.affine(h, w, b)
        if k < len(weight_vars) - 1:
            h = autodiff.relu(h)
    return autodiff.ravel(h)


def mlp_forward(net: ClassifierNet, x: np.ndarray, tape: Tape | None = None):
    """Forward pass for a single input vector.

    Without a tape this is a plain evaluation returning a float. With a tape
    it returns ``(logit_var, param_vars)`` where ``param_vars`` lists the
    weight and bias leaves whose ``.grad`` a subsequent backward fills.
    """
    if tape is None:
        return net.logit(x)
    params = [autodiff.leaf(p, tape=tape, requires_grad=True) for p in net.parameters()]
    nw = len(net.weights)
    logit = forward_on_tape(np.asarray(x, dtype=np.float64)[None, :], params[:nw], params[nw:])
    return logit, params


@dataclass
class OptimizerState:
    """Adam accumulators plus the validation-plateau learning-rate schedule."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step_count: int = 0
    lr: float = 1e-3
    plateau_count: int = 0
    best_val_loss: float = field(default=math.inf)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float) -> "OptimizerState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], lr=lr)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray],
              state: OptimizerState) -> None:
    """In-place Adam update (beta1=0.9, beta2=0.999, eps=1e-8).

    Raises :class:`DivergenceError` on non-finite gradients or parameters.
    """
    if len(params) != len(grads):
        raise ValueError("one gradient per parameter required")
    for p, g in zip(params, grads):
        if g is None or np.asarray(g).shape != p.shape:
            raise ValueError("gradient shape does not match parameter shape")
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient; run aborted")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if not np.all(np.isfinite(p)):
            raise DivergenceError("non-finite parameter after update; run aborted")


def lr_schedule_update(state: OptimizerState, val_loss: float) -> None:
    """Divide the learning rate by 10 after 10 epochs without improvement."""
    if val_loss < state.best_val_loss:
        state.best_val_loss = val_loss
        state.plateau_count = 0
    else:
        state.plateau_count += 1
        if state.plateau_count >= PLATEAU_PATIENCE:
            state.lr /= PLATEAU_FACTOR
            state.plateau_count = 0


def finite_diff_check(net: ClassifierNet, batches: list[np.ndarray], loss_fn,
                      eps: float = 1e-5) -> float:
    """Max relative error between backprop and central-difference gradients.

    ``loss_fn`` maps one logit Var per batch to a scalar Var built from
    :mod:`.autodiff` primitives, so the identical loss expression drives both
    the analytic and the numeric path. Relative error per parameter is
    |analytic - numeric| / max(1e-12, |numeric|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    batches = [np.asarray(b, dtype=np.float64) for b in batches]

    tape = Tape()
    params = [autodiff.leaf(p, tape=tape, requires_grad=True) for p in net.parameters()]
    nw = len(net.weights)
    logit_vars = [forward_on_tape(b, params[:nw], params[nw:]) for b in batches]
    loss = loss_fn(*logit_vars)
    autodiff.backward(tape, loss)
    analytic = [np.zeros_like(p.value) if p.grad is None else np.asarray(p.grad)
                for p in params]

    def loss_value() -> float:
        zs = [autodiff.leaf(net.logits(b)) for b in batches]
        return float(loss_fn(*zs).value)

    worst = 0.0
    for arr, grad in zip(net.parameters(), analytic):
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_value()
            flat[i] = orig - eps
            lo = loss_value()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(gflat[i] - numeric) / max(1e-12, abs(numeric))
            worst = max(worst, err)
    return worst


def save_weights(net: ClassifierNet, path) -> None:
    doc = {
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "layer_shapes": [[int(o), int(i)] for o, i in net.layer_shapes],
        "weights": [float(v) for w in net.weights for v in w.reshape(-1)],
        "biases": [float(v) for b in net.biases for v in b.reshape(-1)],
        "activation": net.activation,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_weights(path) -> ClassifierNet:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != WEIGHTS_FORMAT:
        raise ValueError(f"not a {WEIGHTS_FORMAT} file: {path}")
    if doc.get("version") != WEIGHTS_VERSION:
        raise ValueError(
            f"unsupported weights version {doc.get('version')!r}, expected {WEIGHTS_VERSION}")
    shapes = [tuple(s) for s in doc["layer_shapes"]]
    wflat = np.asarray(doc["weights"], dtype=np.float64)
    bflat = np.asarray(doc["biases"], dtype=np.float64)
    if (wflat.size != sum(o * i for o, i in shapes)
            or bflat.size != sum(o for o, _ in shapes)):
        raise ValueError("weight payload does not match declared layer shapes")
    weights, biases = [], []
    wpos = bpos = 0
    for out, inp in shapes:
        weights.append(wflat[wpos:wpos + out * inp].reshape(out, inp).copy())
        wpos += out * inp
        biases.append(bflat[bpos:bpos + out].copy())
        bpos += out
    return ClassifierNet(weights, biases, doc.get("activation", "relu"))
