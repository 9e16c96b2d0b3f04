"""Block-wise fine-tuning of the floating-point part with frozen integer codes.

The block is LayerNorm -> QuantLinear(d->h) -> activation -> QuantLinear(h->d)
acting on row vectors (``y = act(LN(x) @ W1) @ W2``). Only the layer scales
and zeros and the LayerNorm gain/bias train; gradients are derived by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .layerwise import QuantizedLayer

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715

PARAM_NAMES = ("ln_gain", "ln_bias", "fc1.scales", "fc1.zeros", "fc2.scales", "fc2.zeros")


def relu(a):
    return np.maximum(a, 0.0)


def relu_grad(a):
    return (a > 0).astype(np.float64)


def gelu(a):
    return 0.5 * a * (1.0 + np.tanh(_GELU_C * (a + _GELU_K * a**3)))


def gelu_grad(a):
    t = np.tanh(_GELU_C * (a + _GELU_K * a**3))
    return 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * a * a)


ACTIVATIONS = {"relu": (relu, relu_grad), "gelu": (gelu, gelu_grad)}


@dataclass(eq=False)
class BlockSpec:
    """Frozen structure of the block: dimensions, activation, integer codes."""

    fc1: QuantizedLayer
    fc2: QuantizedLayer
    activation: str = "gelu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}; use relu or gelu")
        if self.fc1.d_out != self.fc2.d_in or self.fc2.d_out != self.fc1.d_in:
            raise ValidationError(
                f"block dims disagree: fc1 {self.fc1.d_in}->{self.fc1.d_out}, "
                f"fc2 {self.fc2.d_in}->{self.fc2.d_out}"
            )

    @property
    def d(self) -> int:
        return self.fc1.d_in

    @property
    def h(self) -> int:
        return self.fc1.d_out


def initial_params(spec: BlockSpec, ln_gain=None, ln_bias=None) -> dict:
    d = spec.d
    return {
        "ln_gain": np.ones(d) if ln_gain is None else np.array(ln_gain, dtype=np.float64),
        "ln_bias": np.zeros(d) if ln_bias is None else np.array(ln_bias, dtype=np.float64),
        "fc1.scales": spec.fc1.scales.astype(np.float64),
        "fc1.zeros": spec.fc1.zeros.astype(np.float64),
        "fc2.scales": spec.fc2.scales.astype(np.float64),
        "fc2.zeros": spec.fc2.zeros.astype(np.float64),
    }


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + LN_EPS)
    return xhat * gain + bias, xhat


def _check_input(x, d):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != d:
        raise ValidationError(f"block input must be n x {d}, got {x.shape}")
    return x


def float_block_forward(x, ln_gain, ln_bias, w1, w2, activation="gelu"):
    """Full-precision reference block on dense weights."""
    x = _check_input(x, np.shape(w1)[0])
    u, _ = _layer_norm(x, ln_gain, ln_bias)
    return ACTIVATIONS[activation][0](u @ w1) @ w2


def _forward(spec, params, x):
    x = _check_input(x, spec.d)
    act = ACTIVATIONS[spec.activation][0]
    w1 = spec.fc1.dequantize(params["fc1.scales"], params["fc1.zeros"])
    w2 = spec.fc2.dequantize(params["fc2.scales"], params["fc2.zeros"])
    u, xhat = _layer_norm(x, params["ln_gain"], params["ln_bias"])
    a = u @ w1
    hid = act(a)
    return hid @ w2, (xhat, u, a, hid, w1, w2)


def block_forward(spec: BlockSpec, params: dict, x) -> np.ndarray:
    return _forward(spec, params, x)[0]


def block_loss(spec: BlockSpec, params: dict, x, y_ref) -> float:
    """Mean over rows of the squared L2 output mismatch."""
    y = block_forward(spec, params, x)
    y_ref = np.asarray(y_ref, dtype=np.float64)
    if y.shape != y_ref.shape:
        raise ValidationError(f"reference outputs have shape {y_ref.shape}, expected {y.shape}")
    return float(np.sum((y - y_ref) ** 2) / y.shape[0])


def _affine_grads(layer: QuantizedLayer, dw):
    # dW~[i, j] -> per (column j, group g) sums; d s picks up the integer code
    d_out, ng = layer.d_out, layer.group_count
    gs = layer.d_in // ng
    ds = (dw * layer.w).T.reshape(d_out, ng, gs).sum(axis=2)
    dz = dw.T.reshape(d_out, ng, gs).sum(axis=2)
    return ds, dz


def block_gradients(spec: BlockSpec, params: dict, x, y_ref) -> dict:
    y, (xhat, u, a, hid, w1, w2) = _forward(spec, params, x)
    n = y.shape[0]
    dy = 2.0 * (y - np.asarray(y_ref, dtype=np.float64)) / n
    dw2 = hid.T @ dy
    da = (dy @ w2.T) * ACTIVATIONS[spec.activation][1](a)
    dw1 = u.T @ da
    du = da @ w1.T
    g = {"ln_gain": np.sum(du * xhat, axis=0), "ln_bias": np.sum(du, axis=0)}
    g["fc1.scales"], g["fc1.zeros"] = _affine_grads(spec.fc1, dw1)
    g["fc2.scales"], g["fc2.zeros"] = _affine_grads(spec.fc2, dw2)
    return g


@dataclass
class AdamState:
    lr: float = 1e-5
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """Bias-corrected Adam with decoupled weight decay (theta -= lr * wd * theta).

    Returns new parameter arrays; moments in ``state`` are updated in place.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    out = {}
    for k, p in params.items():
        g = grads[k]
        if p.shape != g.shape:
            raise ValidationError(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[k], state.v[k] = m, v
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        out[k] = p - state.lr * state.weight_decay * p - step
    return out, state


@dataclass
class FinetuneReport:
    loss_curve: list[float]  # full-set loss before training, then after each epoch
    best_epoch: int
    steps: int = 0

    @property
    def initial_loss(self) -> float:
        return self.loss_curve[0]

    @property
    def final_loss(self) -> float:
        return self.loss_curve[self.best_epoch]

    def to_dict(self) -> dict:
        return {
            "loss_curve": self.loss_curve,
            "best_epoch": self.best_epoch,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "steps": self.steps,
        }


def finetune_block(
    spec: BlockSpec,
    params: dict,
    x,
    y_ref,
    epochs: int = 4,
    batch_size: int = 32,
    lr: float = 1e-5,
    weight_decay: float = 1e-6,
    seed: int = 0,
):
    """Minibatch Adam over the trainable floats; returns the best parameters by full-set loss."""
    if epochs < 0:
        raise ValidationError("epochs must be >= 0")
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    x = _check_input(x, spec.d)
    y_ref = np.asarray(y_ref, dtype=np.float64)
    rng = np.random.default_rng(seed)
    state = AdamState(lr=lr, weight_decay=weight_decay)
    current = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    best = {k: v.copy() for k, v in current.items()}
    curve = [block_loss(spec, current, x, y_ref)]
    best_epoch = 0
    n = x.shape[0]
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start : start + batch_size]
            grads = block_gradients(spec, current, x[rows], y_ref[rows])
            current, state = adam_step(current, grads, state)
        curve.append(block_loss(spec, current, x, y_ref))
        if curve[-1] < curve[best_epoch]:
            best_epoch = epoch
            best = {k: v.copy() for k, v in current.items()}
    return best, FinetuneReport(curve, best_epoch, state.t)


def updated_layers(spec: BlockSpec, params: dict) -> tuple[QuantizedLayer, QuantizedLayer]:
    return (
        spec.fc1.with_params(params["fc1.scales"], params["fc1.zeros"]),
        spec.fc2.with_params(params["fc2.scales"], params["fc2.zeros"]),
    )

