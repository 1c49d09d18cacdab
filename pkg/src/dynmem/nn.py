"""Minimal differentiable-layer kernel: conv, batch norm, pooling, dense,
ReLU, stable binary cross entropy and Adam, all with exact analytic gradients.

Layers operate on (N, C, H, W) batches. Single precision is the training
default; pass float64 arrays/parameters for gradient-check fidelity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .validation import ShapeError, check_same_shape


def conv_output_size(size, kernel, stride, padding):
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(
            f"conv output size would be {out} for input {size}, "
            f"kernel {kernel}, stride {stride}, padding {padding}"
        )
    return out


def conv2d(x, kernels, bias, stride=1, padding=0):
    """Direct 2-D cross-correlation.

    x: (C_in, H, W) or (N, C_in, H, W); kernels: (C_out, C_in, k, k);
    bias: (C_out,). Returns the same batch arrangement as the input.
    """
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    kernels = np.asarray(kernels)
    bias = np.asarray(bias)
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/kernels, got {x.shape}, {kernels.shape}")
    if x.shape[1] != kernels.shape[1]:
        raise ShapeError(
            f"input channels {x.shape[1:]} do not match kernel channels {kernels.shape}"
        )
    k = kernels.shape[2]
    if k % 2 != 1 or kernels.shape[3] != k:
        raise ShapeError(f"kernel must be square with odd size, got {kernels.shape}")
    out = _conv_forward(x, kernels, stride, padding)
    out += bias[None, :, None, None]
    return out[0] if single else out


def _conv_forward(x, w, stride, padding):
    n, c_in, h, wid = x.shape
    c_out, _, k, _ = w.shape
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(wid, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, c_out, oh * ow), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            patch = xp[:, :, dy : dy + stride * oh : stride, dx : dx + stride * ow : stride]
            out += w[:, :, dy, dx] @ patch.reshape(n, c_in, oh * ow)
    return out.reshape(n, c_out, oh, ow)


def _conv_backward(x, w, grad_out, stride, padding):
    n, c_in, h, wid = x.shape
    c_out, _, k, _ = w.shape
    oh, ow = grad_out.shape[2], grad_out.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    g2 = grad_out.reshape(n, c_out, oh * ow)
    for dy in range(k):
        for dx in range(k):
            patch = xp[:, :, dy : dy + stride * oh : stride, dx : dx + stride * ow : stride]
            p2 = patch.reshape(n, c_in, oh * ow)
            dw[:, :, dy, dx] = np.matmul(g2, p2.transpose(0, 2, 1)).sum(axis=0)
            dxp[:, :, dy : dy + stride * oh : stride, dx : dx + stride * ow : stride] += (
                w[:, :, dy, dx].T @ g2
            ).reshape(n, c_in, oh, ow)
    db = grad_out.sum(axis=(0, 2, 3))
    if padding:
        dx_ = dxp[:, :, padding:-padding, padding:-padding]
    else:
        dx_ = dxp
    return dx_, dw, db


class Layer:
    """Base layer: named parameters plus matching gradient slots."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def zero_grads(self):
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def forward(self, x, mode):
        raise NotImplementedError

    def backward(self, grad_out, mode):
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1,
                 rng=None, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        rng = rng or np.random.default_rng()
        # He initialization for ReLU networks
        scale = np.sqrt(2.0 / (in_channels * kernel_size * kernel_size))
        self.params["weight"] = (
            rng.standard_normal((out_channels, in_channels, kernel_size, kernel_size)) * scale
        ).astype(dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        self.zero_grads()

    def forward(self, x, mode):
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"input channels {x.shape} do not match kernel channels "
                f"{self.params['weight'].shape}"
            )
        self._cache = x
        out = _conv_forward(x, self.params["weight"], self.stride, self.padding)
        return out + self.params["bias"][None, :, None, None]

    def backward(self, grad_out, mode):
        x = self._cache
        dx, dw, db = _conv_backward(x, self.params["weight"], grad_out, self.stride, self.padding)
        self.grads["weight"] += dw
        self.grads["bias"] += db
        return dx


class BatchNorm2d(Layer):
    """Per-channel batch normalization with train / eval / frozen modes.

    train: normalize by batch statistics, update running stats with momentum.
    eval: normalize by running statistics.
    frozen: as eval, and gradients to scale/shift are blocked.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params["scale"] = np.ones(channels, dtype=dtype)
        self.params["shift"] = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.zero_grads()

    def forward(self, x, mode):
        if mode == "train":
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean += self.momentum * (mean - self.running_mean)
            self.running_var += self.momentum * (var - self.running_var)
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std)
        return self.params["scale"][None, :, None, None] * xhat + self.params["shift"][None, :, None, None]

    def backward(self, grad_out, mode):
        xhat, inv_std = self._cache
        if mode != "frozen":
            self.grads["scale"] += (grad_out * xhat).sum(axis=(0, 2, 3))
            self.grads["shift"] += grad_out.sum(axis=(0, 2, 3))
        g = grad_out * self.params["scale"][None, :, None, None]
        if mode == "train":
            m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
            sum_g = g.sum(axis=(0, 2, 3), keepdims=True)
            sum_gx = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = inv_std[None, :, None, None] * (g - sum_g / m - xhat * sum_gx / m)
        else:
            dx = g * inv_std[None, :, None, None]
        return dx


class ReLU(Layer):
    def forward(self, x, mode):
        self._cache = x > 0
        return x * self._cache

    def backward(self, grad_out, mode):
        return grad_out * self._cache


class GlobalAvgPool(Layer):
    """(N, C, H, W) -> (N, C) mean over the spatial extent."""

    def forward(self, x, mode):
        self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad_out, mode):
        n, c, h, w = self._cache
        return np.broadcast_to(grad_out[:, :, None, None], (n, c, h, w)) / (h * w)


class Dense(Layer):
    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng()
        scale = np.sqrt(2.0 / in_features)
        self.params["weight"] = (rng.standard_normal((in_features, out_features)) * scale).astype(dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)
        self.zero_grads()

    def forward(self, x, mode):
        self._cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, grad_out, mode):
        x = self._cache
        self.grads["weight"] += x.T @ grad_out
        self.grads["bias"] += grad_out.sum(axis=0)
        return grad_out @ self.params["weight"].T


def bce_loss(logit, label):
    """Numerically stable binary cross entropy on logits.

    Returns (loss, dloss_dlogit), elementwise for array inputs. Stable for
    |logit| up to at least 1e4.
    """
    z = np.asarray(logit, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = expit(z) - y
    return loss, grad


@dataclass
class AdamState:
    """Adam moments and hyperparameters for one parameter array."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def like(cls, param, **hyper):
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(params, grads, state):
    """One Adam update with bias correction. Returns (new_params, state)."""
    check_same_shape(params, grads, "adam_step params/grads")
    check_same_shape(params, state.first_moment, "adam_step params/moments")
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    state.first_moment = b1 * state.first_moment + (1 - b1) * grads
    state.second_moment = b2 * state.second_moment + (1 - b2) * grads * grads
    m_hat = state.first_moment / (1 - b1 ** state.step_count)
    v_hat = state.second_moment / (1 - b2 ** state.step_count)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, state


class Adam:
    """Adam over a dict of named parameter arrays, updated in place."""

    def __init__(self, named_params, learning_rate=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self._params = named_params
        self.states = {
            name: AdamState.like(p, learning_rate=learning_rate, beta1=beta1,
                                 beta2=beta2, epsilon=epsilon)
            for name, p in named_params.items()
        }

    def step(self, named_grads):
        """Apply one update for every name present in named_grads."""
        for name, g in named_grads.items():
            p = self._params[name]
            new_p, self.states[name] = adam_step(p, g, self.states[name])
            p[...] = new_p


def finite_diff_check(loss_fn, params, analytic_grads, n_coords=50, h=1e-5, rng=None):
    """Central-difference gradient check over sampled parameter coordinates.

    loss_fn() must evaluate the scalar loss from the current (mutated in
    place) params. Returns the max over sampled coordinates of
    |a - n| / max(|a|, |n|, 1e-8). Use double-precision parameters.
    """
    rng = rng or np.random.default_rng(0)
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    coords = rng.choice(total, size=min(n_coords, total), replace=False)
    worst = 0.0
    for flat in coords:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[i]
        idx = np.unravel_index(flat - offsets[i], params[name].shape)
        orig = params[name][idx]
        params[name][idx] = orig + h
        lo_plus = loss_fn()
        params[name][idx] = orig - h
        lo_minus = loss_fn()
        params[name][idx] = orig
        numeric = (lo_plus - lo_minus) / (2 * h)
        analytic = analytic_grads[name][idx]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
