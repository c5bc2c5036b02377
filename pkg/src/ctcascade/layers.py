"""Layer primitives with hand-written backward passes.

The functional forms (``conv2d_forward`` ...) are pure; the layer classes
wrap them, keep the forward cache and accumulate into ``Parameter.grad``.
All functions work in the dtype of their inputs, so passing float64 arrays
gives the 64-bit evaluation used by the gradient checks.
"""
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError, ContractError, ParameterError, ShapeError
from .tensor import Parameter

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


# --------------------------------------------------------------------------
# convolution

def _check_conv(x, kernels_):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (N, C, H, W) input, got {x.shape}")
    if kernels_.ndim != 4:
        raise ShapeError(f"conv2d expects (out, in, kh, kw) kernels, got {kernels_.shape}")
    if x.shape[1] != kernels_.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels but kernels expect {kernels_.shape[1]}")
    kh, kw = kernels_.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")


def conv2d_forward(x, kernels_, bias=None, return_cols=False):
    """Stride-1 convolution with extent-preserving zero padding.

    With ``return_cols`` the unfolded input is returned as well so a caller
    can hand it to :func:`conv2d_backward` instead of unfolding twice.
    """
    _check_conv(x, kernels_)
    n, _, h, w = x.shape
    out_ch, _, kh, kw = kernels_.shape
    cols = kernels.im2col(x, kh, kw)
    y = np.matmul(kernels_.reshape(out_ch, -1), cols)
    if bias is not None:
        y += bias.reshape(1, out_ch, 1)
    y = y.reshape(n, out_ch, h, w)
    return (y, cols) if return_cols else y


def conv2d_backward(upstream, x, kernels_, cols=None):
    """Return (input_grad, kernel_grad, bias_grad) for :func:`conv2d_forward`."""
    _check_conv(x, kernels_)
    n, _, h, w = x.shape
    out_ch, _, kh, kw = kernels_.shape
    if upstream.shape != (n, out_ch, h, w):
        raise ShapeError(f"upstream gradient {upstream.shape} does not match output {(n, out_ch, h, w)}")
    if cols is None:
        cols = kernels.im2col(x, kh, kw)
    dy = upstream.reshape(n, out_ch, h * w)
    kernel_grad = np.matmul(dy, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernels_.shape)
    bias_grad = dy.sum(axis=(0, 2))
    dcols = np.matmul(kernels_.reshape(out_ch, -1).T, dy)
    input_grad = kernels.col2im(dcols, x.shape, kh, kw)
    return input_grad, kernel_grad, bias_grad


# --------------------------------------------------------------------------
# activations

def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(upstream, cached_input):
    # subgradient at exactly 0 is 0
    return np.where(cached_input > 0, upstream, 0).astype(upstream.dtype, copy=False)


def tanh_forward(x):
    return np.tanh(x)


def tanh_backward(upstream, cached_output):
    return upstream * (1 - cached_output * cached_output)


# --------------------------------------------------------------------------
# batch normalization

@dataclass
class BatchNormState:
    """Per-channel scale/shift parameters and running statistics.

    ``running_mean``/``running_var`` stay ``None`` until the first training
    step, which seeds them with that batch's statistics.
    """

    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    @classmethod
    def create(cls, channels, name="bn", dtype=np.float32):
        return cls(
            gamma=Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype)),
            beta=Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype)),
        )

    @property
    def channels(self):
        return self.gamma.value.shape[0]


@dataclass
class BatchNormCache:
    training: bool
    xhat: np.ndarray = field(repr=False)
    inv_std: np.ndarray = field(repr=False)


def batchnorm_forward(x, state, training):
    """Standardize per channel over (batch, height, width), then scale and shift.

    Training mode uses batch statistics and updates the running averages;
    inference mode uses the running averages. Returns (output, cache).
    """
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm over {state.channels} channels got input {x.shape}")
    gamma = state.gamma.value.reshape(1, -1, 1, 1)
    beta = state.beta.value.reshape(1, -1, 1, 1)
    if training:
        mean = x.mean(axis=(0, 2, 3))
        centered = x - mean.reshape(1, -1, 1, 1)
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + state.epsilon)
        xhat = centered * inv_std.reshape(1, -1, 1, 1)
        count = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * (count / max(count - 1, 1))
        if state.running_mean is None:
            state.running_mean = mean.copy()
            state.running_var = unbiased.copy()
        else:
            m = state.momentum
            state.running_mean = (m * state.running_mean + (1 - m) * mean).astype(x.dtype)
            state.running_var = (m * state.running_var + (1 - m) * unbiased).astype(x.dtype)
    else:
        if state.running_mean is None or state.running_var is None:
            raise ConfigurationError("batchnorm inference requested before any running statistics exist")
        inv_std = (1.0 / np.sqrt(state.running_var + state.epsilon)).astype(x.dtype)
        xhat = (x - state.running_mean.reshape(1, -1, 1, 1).astype(x.dtype)) * inv_std.reshape(1, -1, 1, 1)
    y = gamma * xhat + beta
    return y, BatchNormCache(training, xhat, inv_std)


def batchnorm_backward(upstream, cache, state):
    """Exact gradients of the training-mode map, batch statistics included."""
    if not cache.training:
        raise ContractError("batchnorm_backward needs a training-mode forward cache")
    if upstream.shape != cache.xhat.shape:
        raise ShapeError(f"upstream {upstream.shape} does not match cached {cache.xhat.shape}")
    count = upstream.shape[0] * upstream.shape[2] * upstream.shape[3]
    beta_grad = upstream.sum(axis=(0, 2, 3))
    gamma_grad = (upstream * cache.xhat).sum(axis=(0, 2, 3))
    scale = (state.gamma.value * cache.inv_std / count).reshape(1, -1, 1, 1)
    input_grad = scale * (
        count * upstream
        - beta_grad.reshape(1, -1, 1, 1)
        - cache.xhat * gamma_grad.reshape(1, -1, 1, 1)
    )
    return input_grad.astype(upstream.dtype, copy=False), gamma_grad, beta_grad


# --------------------------------------------------------------------------
# linear

def linear_forward(x, weights, bias=None):
    """Affine map per batch row; ``x`` is (batch, features)."""
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise ShapeError(f"linear with weights {weights.shape} cannot take input {x.shape}")
    y = x @ weights.T
    if bias is not None:
        y += bias
    return y


def linear_backward(upstream, x, weights):
    """Return (input_grad, weight_grad, bias_grad)."""
    if upstream.shape != (x.shape[0], weights.shape[0]):
        raise ShapeError(f"upstream {upstream.shape} does not match output {(x.shape[0], weights.shape[0])}")
    return upstream @ weights, upstream.T @ x, upstream.sum(axis=0)


# --------------------------------------------------------------------------
# loss and init

def l2_loss(prediction, target):
    """Return (sum((p - t)^2) / (2 * batch), (p - t) / batch)."""
    if prediction.shape != target.shape:
        raise ShapeError(f"prediction {prediction.shape} and target {target.shape} differ")
    batch = prediction.shape[0]
    diff = prediction.astype(np.float64) - target.astype(np.float64)
    loss = float(np.dot(diff.ravel(), diff.ravel())) / (2 * batch)
    return loss, (diff / batch).astype(prediction.dtype)


def fan_in(shape):
    return int(np.prod(shape[1:])) if len(shape) > 1 else 0


def xavier_init(shape, rng, dtype=np.float32):
    """Uniform on [-sqrt(3/fan_in), sqrt(3/fan_in)], i.e. variance 1/fan_in."""
    fi = fan_in(shape)
    if fi <= 0:
        raise ParameterError(f"cannot derive a positive fan-in from shape {shape}")
    bound = np.sqrt(3.0 / fi)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# --------------------------------------------------------------------------
# stateful layers

class Layer:
    kind = "layer"

    def __init__(self, name):
        self.name = name

    def parameters(self):
        return []

    def forward(self, x, training):
        raise NotImplementedError

    def backward(self, upstream):
        raise NotImplementedError

    def astype(self, dtype):
        return self


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, name, in_ch, out_ch, kernel=3, bias=True, rng=None, dtype=np.float32):
        super().__init__(name)
        shape = (out_ch, in_ch, kernel, kernel)
        value = xavier_init(shape, rng, dtype) if rng is not None else np.zeros(shape, dtype=dtype)
        self.weight = Parameter(f"{name}.weight", value, decay=True)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_ch, dtype=dtype)) if bias else None
        self._cache = None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x, training):
        bias = self.bias.value if self.bias is not None else None
        y, cols = conv2d_forward(x, self.weight.value, bias, return_cols=True)
        self._cache = (x, cols) if training else None
        return y

    def backward(self, upstream):
        x, cols = self._cache
        dx, dw, db = conv2d_backward(upstream, x, self.weight.value, cols)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db
        return dx

    def astype(self, dtype):
        out = Conv2d.__new__(Conv2d)
        Layer.__init__(out, self.name)
        out.weight = self.weight.astype(dtype)
        out.bias = self.bias.astype(dtype) if self.bias is not None else None
        out._cache = None
        return out


class BatchNorm2d(Layer):
    kind = "bn"

    def __init__(self, name, channels, dtype=np.float32):
        super().__init__(name)
        self.state = BatchNormState.create(channels, name, dtype)
        self._cache = None

    def parameters(self):
        return [self.state.gamma, self.state.beta]

    def forward(self, x, training):
        y, self._cache = batchnorm_forward(x, self.state, training)
        return y

    def backward(self, upstream):
        dx, dg, db = batchnorm_backward(upstream, self._cache, self.state)
        self.state.gamma.grad += dg
        self.state.beta.grad += db
        return dx

    def astype(self, dtype):
        out = BatchNorm2d.__new__(BatchNorm2d)
        Layer.__init__(out, self.name)
        s = self.state
        out.state = BatchNormState(
            s.gamma.astype(dtype), s.beta.astype(dtype),
            None if s.running_mean is None else s.running_mean.astype(dtype),
            None if s.running_var is None else s.running_var.astype(dtype),
            s.momentum, s.epsilon,
        )
        out._cache = None
        return out


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training):
        self._cache = x if training else None
        return relu_forward(x)

    def backward(self, upstream):
        return relu_backward(upstream, self._cache)


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x, training):
        y = tanh_forward(x)
        self._cache = y if training else None
        return y

    def backward(self, upstream):
        return tanh_backward(upstream, self._cache)


class Linear(Layer):
    kind = "linear"

    def __init__(self, name, in_features, out_features, rng=None, dtype=np.float32):
        super().__init__(name)
        shape = (out_features, in_features)
        value = xavier_init(shape, rng, dtype) if rng is not None else np.zeros(shape, dtype=dtype)
        self.weight = Parameter(f"{name}.weight", value, decay=True)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_features, dtype=dtype))
        self._cache = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, training):
        self._cache = x if training else None
        return linear_forward(x, self.weight.value, self.bias.value)

    def backward(self, upstream):
        dx, dw, db = linear_backward(upstream, self._cache, self.weight.value)
        self.weight.grad += dw
        self.bias.grad += db
        return dx

    def astype(self, dtype):
        out = Linear.__new__(Linear)
        Layer.__init__(out, self.name)
        out.weight = self.weight.astype(dtype)
        out.bias = self.bias.astype(dtype)
        out._cache = None
        return out
