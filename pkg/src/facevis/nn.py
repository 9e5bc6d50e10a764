"""Minimal neural-network layers with explicit forward caches.

Just enough machinery for the alignment stack: same-padding convolution,
batch normalization, rectifier, 2x2 average pooling, dense layers,
inverted dropout and momentum SGD.  Every forward returns a cache that
the matching backward consumes; rectifier and dropout masks can be
re-injected so a forward can be replayed with frozen discrete choices for
finite-difference checks.
"""

import numpy as np


class Layer:
    """Base for layers with parameters; params and grads share keys."""

    def __init__(self):
        self.params = {}
        self.grads = {}

    def zero_grads(self):
        for key, value in self.params.items():
            self.grads[key] = np.zeros_like(value)


class Conv2d(Layer):
    """Stride-1 same-padding convolution over (B, C, H, W) arrays."""

    def __init__(self, in_channels, out_channels, kernel, rng):
        super().__init__()
        fan_in = in_channels * kernel * kernel
        self.kernel = kernel
        self.params["w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                      size=(out_channels, in_channels, kernel, kernel))
        self.params["b"] = np.zeros(out_channels)
        self.zero_grads()

    def forward(self, x):
        k = self.kernel
        pad = k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        b_, _, h, w = x.shape
        out = np.zeros((b_, self.params["w"].shape[0], h, w))
        for i in range(k):
            for j in range(k):
                out += np.einsum("fc,bchw->bfhw", self.params["w"][:, :, i, j],
                                 xp[:, :, i:i + h, j:j + w])
        out += self.params["b"][None, :, None, None]
        return out, (xp, x.shape)

    def backward(self, dy, cache):
        xp, x_shape = cache
        k = self.kernel
        pad = k // 2
        _, _, h, w = x_shape
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                self.grads["w"][:, :, i, j] += np.einsum(
                    "bfhw,bchw->fc", dy, xp[:, :, i:i + h, j:j + w])
                dxp[:, :, i:i + h, j:j + w] += np.einsum(
                    "fc,bfhw->bchw", self.params["w"][:, :, i, j], dy)
        self.grads["b"] += dy.sum(axis=(0, 2, 3))
        if pad:
            return dxp[:, :, pad:-pad, pad:-pad]
        return dxp


class BatchNorm2d(Layer):
    """Per-channel batch normalization with running statistics."""

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.zero_grads()

    def forward(self, x, train):
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean = ((1 - self.momentum) * self.running_mean
                                 + self.momentum * mean)
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * var)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = (self.params["gamma"][None, :, None, None] * xhat
             + self.params["beta"][None, :, None, None])
        return y, (xhat, inv_std, train)

    def backward(self, dy, cache):
        xhat, inv_std, train = cache
        gamma = self.params["gamma"]
        self.grads["gamma"] += np.sum(dy * xhat, axis=(0, 2, 3))
        self.grads["beta"] += dy.sum(axis=(0, 2, 3))
        dxhat = dy * gamma[None, :, None, None]
        if not train:
            return dxhat * inv_std[None, :, None, None]
        n = dy.shape[0] * dy.shape[2] * dy.shape[3]
        sum_d = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        sum_dx = np.sum(dxhat * xhat, axis=(0, 2, 3))[None, :, None, None]
        return (inv_std[None, :, None, None] / n) * (n * dxhat - sum_d - xhat * sum_dx)


class Dense(Layer):
    """Fully connected layer on (B, n) arrays."""

    def __init__(self, in_features, out_features, rng, zero_init=False):
        super().__init__()
        if zero_init:
            self.params["w"] = np.zeros((in_features, out_features))
        else:
            self.params["w"] = rng.normal(0.0, np.sqrt(2.0 / in_features),
                                          size=(in_features, out_features))
        self.params["b"] = np.zeros(out_features)
        self.zero_grads()

    def forward(self, x):
        return x @ self.params["w"] + self.params["b"], (x,)

    def backward(self, dy, cache):
        (x,) = cache
        self.grads["w"] += x.T @ dy
        self.grads["b"] += dy.sum(axis=0)
        return dy @ self.params["w"].T


def relu(x, mask=None):
    """Rectifier; pass a saved mask to replay frozen activation branches."""
    if mask is None:
        mask = x > 0.0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def dropout(x, rate, rng=None, mask=None):
    """Inverted dropout.  rate 0 (or no rng and no mask) is the identity."""
    if rate <= 0.0:
        return x, None
    if mask is None:
        if rng is None:
            return x, None
        mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dy, mask):
    if mask is None:
        return dy
    return dy * mask


def avgpool2(x):
    """2x2 average pooling with stride 2; spatial dims must be even."""
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2_backward(dy):
    return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) / 4.0


class SGD:
    """Momentum SGD with coupled weight decay (decay added to the gradient)."""

    def __init__(self, layers, lr, momentum=0.99, weight_decay=0.0):
        self.layers = list(layers)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def step(self):
        for li, layer in enumerate(self.layers):
            for key, value in layer.params.items():
                grad = layer.grads[key] + self.weight_decay * value
                vkey = (li, key)
                vel = self.velocity.get(vkey)
                if vel is None:
                    vel = np.zeros_like(value)
                vel = self.momentum * vel - self.lr * grad
                self.velocity[vkey] = vel
                value += vel
