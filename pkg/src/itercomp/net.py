"""Dense tanh networks with hand-written reverse-mode gradients.

Small enough (<=3 hidden layers) that manual backprop stays auditable; both
the reward scorers and the diffusion denoiser run on this toolkit.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import NumericError

CHECKPOINT_FORMAT_VERSION = 1

__all__ = [
    "DenseNet",
    "AdamState",
    "init_net",
    "zero_net",
    "net_forward",
    "net_backward",
    "adam_init",
    "adam_step",
    "param_count",
    "flatten_params",
    "set_flat_params",
    "flatten_grads",
    "central_diff_grad",
    "finite_diff_check",
    "net_to_checkpoint",
    "net_from_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class DenseNet:
    """Fully-connected net: tanh on hidden layers, identity on the output."""

    layer_dims: tuple
    weights: list  # weights[l] has shape (layer_dims[l+1], layer_dims[l])
    biases: list   # biases[l] has shape (layer_dims[l+1],)
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ValueError(f"bad layer dims {dims}")
        self.layer_dims = dims
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[l + 1], dims[l]) or b.shape != (dims[l + 1],):
                raise ValueError(
                    f"layer {l}: shapes {w.shape}/{b.shape} inconsistent with dims {dims}"
                )


def init_net(rng: np.random.Generator, layer_dims, final_scale: float = 0.01) -> DenseNet:
    """Random net with 1/sqrt(fan_in) hidden weights and a small final layer.

    The small final layer keeps initial outputs near zero, which the loss
    contracts at initialization rely on (ln 2 for the pairwise loss, the
    input dimension for the denoising loss).
    """
    dims = tuple(int(d) for d in layer_dims)
    weights, biases = [], []
    for l in range(len(dims) - 1):
        scale = 1.0 / np.sqrt(dims[l])
        if l == len(dims) - 2:
            scale *= final_scale
        weights.append(rng.normal(0.0, scale, size=(dims[l + 1], dims[l])))
        biases.append(np.zeros(dims[l + 1]))
    return DenseNet(dims, weights, biases)


def zero_net(layer_dims) -> DenseNet:
    dims = tuple(int(d) for d in layer_dims)
    weights = [np.zeros((dims[l + 1], dims[l])) for l in range(len(dims) - 1)]
    biases = [np.zeros(dims[l + 1]) for l in range(len(dims) - 1)]
    return DenseNet(dims, weights, biases)


def _as_batch(x, dim, what):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ValueError(f"{what} has length {x.shape[0]}, expected {dim}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != dim:
            raise ValueError(f"{what} has width {x.shape[1]}, expected {dim}")
        return x, False
    raise ValueError(f"{what} must be 1-D or 2-D, got shape {x.shape}")


def _forward_cached(net: DenseNet, x):
    """Returns the list of layer activations a_0 .. a_L (a_0 = input)."""
    acts = [x]
    a = x
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        a = z if l == last else np.tanh(z)
        acts.append(a)
    return acts


def net_forward(net: DenseNet, x):
    """Evaluate the net on a vector (or batch of row vectors)."""
    xb, single = _as_batch(x, net.layer_dims[0], "input")
    out = _forward_cached(net, xb)[-1]
    return out[0] if single else out


def net_backward(net: DenseNet, x, upstream):
    """Gradients of sum(output * upstream) w.r.t. parameters and input.

    Returns ``(param_grads, input_grad)`` where param_grads is a list of
    (dW, db) pairs in layer order.  Batched inputs accumulate parameter
    gradients over the batch.
    """
    xb, single = _as_batch(x, net.layer_dims[0], "input")
    gb, gsingle = _as_batch(upstream, net.layer_dims[-1], "upstream grad")
    if single != gsingle or xb.shape[0] != gb.shape[0]:
        raise ValueError("input and upstream grad batch shapes differ")
    acts = _forward_cached(net, xb)
    grads = [None] * len(net.weights)
    delta = gb
    for l in range(len(net.weights) - 1, -1, -1):
        a_prev = acts[l]
        grads[l] = (delta.T @ a_prev, delta.sum(axis=0))
        if l > 0:
            da_prev = delta @ net.weights[l]
            delta = da_prev * (1.0 - acts[l] ** 2)  # tanh'
        else:
            delta = delta @ net.weights[l]
    input_grad = delta[0] if single else delta
    return grads, input_grad


def param_count(net: DenseNet) -> int:
    return sum(w.size + b.size for w, b in zip(net.weights, net.biases))


def flatten_params(net: DenseNet) -> np.ndarray:
    """Parameters as one flat vector, row-major within each layer, W then b."""
    parts = []
    for w, b in zip(net.weights, net.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def set_flat_params(net: DenseNet, flat: np.ndarray) -> None:
    flat = np.asarray(flat, dtype=float)
    if flat.shape != (param_count(net),):
        raise ValueError(f"expected {param_count(net)} params, got {flat.shape}")
    i = 0
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        net.weights[l] = flat[i : i + w.size].reshape(w.shape).copy()
        i += w.size
        net.biases[l] = flat[i : i + b.size].copy()
        i += b.size


def flatten_grads(param_grads) -> np.ndarray:
    parts = []
    for dw, db in param_grads:
        parts.append(np.asarray(dw).ravel())
        parts.append(np.asarray(db).ravel())
    return np.concatenate(parts)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(n_params: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(np.zeros(n_params), np.zeros(n_params), 0, beta1, beta2, eps)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float):
    """One Adam update with bias correction; returns (params', state')."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("param/grad/state shapes differ")
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradients in adam_step")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads**2
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


def central_diff_grad(loss_fn, params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar loss over a flat parameter vector."""
    if h <= 0:
        raise ValueError("h must be positive")
    params = np.asarray(params, dtype=float)
    grad = np.zeros_like(params)
    work = params.copy()
    for i in range(params.size):
        orig = work[i]
        work[i] = orig + h
        up = loss_fn(work)
        work[i] = orig - h
        down = loss_fn(work)
        work[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite loss while differencing parameter {i}")
        grad[i] = (up - down) / (2.0 * h)
    return grad


def finite_diff_check(loss_fn, params: np.ndarray, analytic_grad: np.ndarray, h: float = 1e-5) -> float:
    """Max over parameters of |analytic - central diff| / max(1, |central diff|)."""
    numeric = central_diff_grad(loss_fn, params, h)
    analytic = np.asarray(analytic_grad, dtype=float)
    if analytic.shape != numeric.shape:
        raise ValueError("analytic gradient shape mismatch")
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def net_to_checkpoint(net: DenseNet, seed=None, hyperparams=None, **extra) -> dict:
    ckpt = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "layer_dims": list(net.layer_dims),
        "activation": net.activation,
        "params": flatten_params(net).tolist(),
        "metadata": {"seed": seed, "hyperparams": hyperparams or {}},
    }
    ckpt.update(extra)
    return ckpt


def net_from_checkpoint(ckpt: dict) -> DenseNet:
    if ckpt.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {ckpt.get('format_version')!r}")
    net = zero_net(ckpt["layer_dims"])
    net.activation = ckpt.get("activation", "tanh")
    set_flat_params(net, np.asarray(ckpt["params"], dtype=float))
    return net


def save_checkpoint(ckpt: dict, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(ckpt, fh)
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
