"""Width-parameterized neural-network layers with explicit reverse-mode gradients.

Conventions:
  - dense activations are (N, F); conv activations are (N, C, H, W)
  - float64 everywhere; tests rely on double-precision gradient checks
  - each layer caches what its backward pass needs during forward; a model
    therefore supports one in-flight forward/backward pair at a time
"""

from dataclasses import dataclass

import numpy as np

from splitmix.errors import ShapeError

DTYPE = np.float64

BN_MODES = ("batch_average", "post_average", "tracked", "locally_tracked")


@dataclass(frozen=True)
class Context:
    """Per-call forward settings.

    training: batch statistics are used and tracked BN modes update their
        running estimates.
    bn_branch: routes dual batch-norm layers ("clean" / "adv"); None means
        mixed inference with weight `lam`.  Plain BatchNorm ignores both.
    accumulate_stats: collect aggregate statistics for post-average
        re-estimation (no EMA update, batch stats used for the output).
    """

    training: bool = False
    bn_branch: str | None = None
    lam: float = 0.0
    accumulate_stats: bool = False


TRAIN = Context(training=True)
EVAL = Context(training=False)


def kaiming_std(fan_in: int) -> float:
    """He-init standard deviation for ReLU networks, sqrt(2 / fan_in)."""
    return float(np.sqrt(2.0 / fan_in))


class Layer:
    """Base layer: stateless pass-through defaults."""

    def params(self) -> dict:
        return {}

    def grads(self) -> dict:
        return {}

    def buffers(self) -> dict:
        return {}

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def macs(self, in_shape) -> int:
        return 0


class Dense(Layer):
    """Affine layer y = x @ w + b with optional output scaling.

    `full_fan_in` is the fan-in this layer has in the full-width (x1)
    architecture; initialization uses it instead of the actual (possibly
    narrower) fan-in, which shrinks initial weights for width ratios < 1.
    """

    def __init__(self, in_features, out_features, *, full_fan_in=None,
                 rng=None, out_scale=1.0):
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.full_fan_in = int(full_fan_in) if full_fan_in else self.in_features
        self.out_scale = float(out_scale)
        std = kaiming_std(self.full_fan_in)
        if rng is None:
            self.w = np.zeros((self.in_features, self.out_features), dtype=DTYPE)
        else:
            self.w = rng.standard_normal((self.in_features, self.out_features)) * std
        self.b = np.zeros(self.out_features, dtype=DTYPE)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x, ctx):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(
                f"dense expects (N, {self.in_features}), got {x.shape}")
        self._x = x
        y = x @ self.w + self.b
        if self.out_scale != 1.0:
            y = y * self.out_scale
        return y

    def backward(self, dout):
        if self.out_scale != 1.0:
            dout = dout * self.out_scale
        self.gw = self._x.T @ dout
        self.gb = dout.sum(axis=0)
        return dout @ self.w.T

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.gw, "b": self.gb}

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise ShapeError(f"dense expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def macs(self, in_shape):
        return self.in_features * self.out_features


def _im2col(x, kh, kw, stride, pad):
    """(N,C,H,W) -> columns (N, C*kh*kw, Ho*Wo) plus output dims."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(dcols, x_shape, kh, kw, stride, pad):
    """Scatter-add column gradients back to (N,C,H,W)."""
    n, c, h, w = x_shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx


class Conv2d(Layer):
    """Direct convolution via im2col; weight layout (out, in, kh, kw)."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, pad=0, *,
                 full_fan_in=None, rng=None, out_scale=1.0):
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.pad = int(pad)
        self.full_fan_in = int(full_fan_in) if full_fan_in else self.in_channels * self.kernel ** 2
        self.out_scale = float(out_scale)
        shape = (self.out_channels, self.in_channels, self.kernel, self.kernel)
        if rng is None:
            self.w = np.zeros(shape, dtype=DTYPE)
        else:
            self.w = rng.standard_normal(shape) * kaiming_std(self.full_fan_in)
        self.b = np.zeros(self.out_channels, dtype=DTYPE)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._cache = None

    def forward(self, x, ctx):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"conv2d expects (N, {self.in_channels}, H, W), got {x.shape}")
        n = x.shape[0]
        cols, ho, wo = _im2col(x, self.kernel, self.kernel, self.stride, self.pad)
        wmat = self.w.reshape(self.out_channels, -1)
        y = np.einsum("of,nfl->nol", wmat, cols, optimize=True)
        y += self.b[None, :, None]
        y = y.reshape(n, self.out_channels, ho, wo)
        if self.out_scale != 1.0:
            y = y * self.out_scale
        self._cache = (x.shape, cols)
        return y

    def backward(self, dout):
        if self.out_scale != 1.0:
            dout = dout * self.out_scale
        x_shape, cols = self._cache
        n = dout.shape[0]
        dmat = dout.reshape(n, self.out_channels, -1)
        self.gw = np.einsum("nol,nfl->of", dmat, cols, optimize=True).reshape(self.w.shape)
        self.gb = dmat.sum(axis=(0, 2))
        wmat = self.w.reshape(self.out_channels, -1)
        dcols = np.einsum("of,nol->nfl", wmat, dmat, optimize=True)
        return _col2im(dcols, x_shape, self.kernel, self.kernel, self.stride, self.pad)

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.gw, "b": self.gb}

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(f"conv2d expects ({self.in_channels}, H, W), got {in_shape}")
        c, h, w = in_shape
        ho = (h + 2 * self.pad - self.kernel) // self.stride + 1
        wo = (w + 2 * self.pad - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d kernel {self.kernel} too large for input {in_shape}")
        return (self.out_channels, ho, wo)

    def macs(self, in_shape):
        _, ho, wo = self.out_shape(in_shape)
        return ho * wo * self.out_channels * self.kernel ** 2 * self.in_channels


class BatchNorm(Layer):
    """Batch normalization with four statistics regimes.

    batch_average   : current-minibatch statistics in both phases
    post_average    : batch statistics while training; aggregate statistics
                      (installed by re-estimation) at evaluation
    tracked         : EMA running statistics, shared with the server
    locally_tracked : EMA running statistics that never leave the client
    """

    def __init__(self, num_features, mode="batch_average", eps=1e-5, momentum=0.1):
        if mode not in BN_MODES:
            raise ValueError(f"unknown BN mode {mode!r}")
        self.num_features = int(num_features)
        self.mode = mode
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = np.ones(self.num_features, dtype=DTYPE)
        self.beta = np.zeros(self.num_features, dtype=DTYPE)
        self.running_mean = np.zeros(self.num_features, dtype=DTYPE)
        self.running_var = np.ones(self.num_features, dtype=DTYPE)
        self.stats_estimated = False
        self.g_gamma = np.zeros_like(self.gamma)
        self.g_beta = np.zeros_like(self.beta)
        self._cache = None
        self._accum = None  # (count, sum, sumsq) while re-estimating

    def _expand(self, v, ndim):
        return v[None, :] if ndim == 2 else v[None, :, None, None]

    def _uses_batch_stats(self, ctx):
        if ctx.training or ctx.accumulate_stats:
            return True
        if self.mode == "batch_average":
            return True
        if self.mode == "post_average" and not self.stats_estimated:
            return True
        return False

    def forward(self, x, ctx):
        if x.ndim not in (2, 4) or x.shape[1] != self.num_features:
            raise ShapeError(
                f"batchnorm expects {self.num_features} features, got {x.shape}")
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        if self._uses_batch_stats(ctx):
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if ctx.training and self.mode in ("tracked", "locally_tracked"):
                # in place: running arrays stay identity-stable for state views
                self.running_mean *= 1 - self.momentum
                self.running_mean += self.momentum * mean
                self.running_var *= 1 - self.momentum
                self.running_var += self.momentum * var
            if ctx.accumulate_stats:
                self._accumulate(x, axes)
            batch_path = True
        else:
            mean, var = self.running_mean, self.running_var
            batch_path = False
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._expand(mean, x.ndim)) * self._expand(inv_std, x.ndim)
        self._cache = (xhat, inv_std, axes, batch_path)
        return self._expand(self.gamma, x.ndim) * xhat + self._expand(self.beta, x.ndim)

    def backward(self, dout):
        xhat, inv_std, axes, batch_path = self._cache
        self.g_gamma = (dout * xhat).sum(axis=axes)
        self.g_beta = dout.sum(axis=axes)
        dxhat = dout * self._expand(self.gamma, dout.ndim)
        if not batch_path:
            return dxhat * self._expand(inv_std, dout.ndim)
        # batch statistics depend on x: full normalization backward
        m = dout.size // self.num_features
        s1 = self._expand(dxhat.sum(axis=axes), dout.ndim)
        s2 = self._expand((dxhat * xhat).sum(axis=axes), dout.ndim)
        return self._expand(inv_std, dout.ndim) / m * (m * dxhat - s1 - xhat * s2)

    def _accumulate(self, x, axes):
        m = x.size // self.num_features
        s = x.sum(axis=axes)
        ss = (x * x).sum(axis=axes)
        if self._accum is None:
            self._accum = [0, np.zeros_like(s), np.zeros_like(ss)]
        self._accum[0] += m
        self._accum[1] += s
        self._accum[2] += ss

    def begin_stats_estimation(self):
        self._accum = None

    def finish_stats_estimation(self):
        if self._accum is None:
            raise RuntimeError("no statistics accumulated")
        n, s, ss = self._accum
        mean = s / n
        self.running_mean[...] = mean
        self.running_var[...] = np.maximum(ss / n - mean * mean, 0.0)
        self.stats_estimated = True
        self._accum = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.g_gamma, "beta": self.g_beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def shared_buffers(self):
        # locally tracked statistics never leave the client; the other modes
        # either share them (tracked) or do not read them during training
        return ("running_mean", "running_var") if self.mode == "tracked" else ()


class ReLU(Layer):
    def forward(self, x, ctx):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class MaxPool2d(Layer):
    """Non-overlapping max pooling (kernel == stride, dims divisible)."""

    def __init__(self, kernel, stride=None):
        self.kernel = int(kernel)
        self.stride = int(stride) if stride is not None else self.kernel
        if self.stride != self.kernel:
            raise ValueError("only kernel == stride pooling is supported")

    def forward(self, x, ctx):
        n, c, h, w = x.shape
        k = self.kernel
        if h % k or w % k:
            raise ShapeError(f"pooling window {k} does not divide input {x.shape}")
        ho, wo = h // k, w // k
        windows = x.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
        windows = windows.reshape(n, c, ho, wo, k * k)
        self._idx = windows.argmax(axis=-1)
        self._in_shape = x.shape
        return windows.max(axis=-1)

    def backward(self, dout):
        n, c, h, w = self._in_shape
        k = self.kernel
        ho, wo = h // k, w // k
        dwin = np.zeros((n, c, ho, wo, k * k), dtype=dout.dtype)
        np.put_along_axis(dwin, self._idx[..., None], dout[..., None], axis=-1)
        dwin = dwin.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
        return dwin.reshape(n, c, h, w)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        k, s = self.kernel, self.stride
        return (c, (h - k) // s + 1, (w - k) // s + 1)


class Flatten(Layer):
    def forward(self, x, ctx):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._in_shape)

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)
