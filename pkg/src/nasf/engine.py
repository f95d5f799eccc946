"""Dense numerical engine: layers with forward/backward passes and plain SGD.

Tensors are float64 numpy arrays in C order. Convolutions are stride 1 with
"same" zero padding; for even kernels the extra padding row/column goes to the
bottom/right.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sp_fft

DTYPE = np.float64


class ShapeError(ValueError):
    """Input shape does not match a layer's declared shape."""


class UsageError(RuntimeError):
    """Engine used out of order, e.g. backward before forward."""


@dataclass
class LayerState:
    weights: np.ndarray
    biases: np.ndarray
    weight_gradients: np.ndarray = field(default=None)  # type: ignore[assignment]
    bias_gradients: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=DTYPE)
        self.biases = np.ascontiguousarray(self.biases, dtype=DTYPE)
        if self.weight_gradients is None:
            self.weight_gradients = np.zeros_like(self.weights)
        if self.bias_gradients is None:
            self.bias_gradients = np.zeros_like(self.biases)
        if self.weight_gradients.shape != self.weights.shape:
            raise ShapeError("weight gradient shape must mirror weights")
        if self.bias_gradients.shape != self.biases.shape:
            raise ShapeError("bias gradient shape must mirror biases")

    @property
    def size(self) -> int:
        return self.weights.size + self.biases.size

    def zero_grad(self) -> None:
        self.weight_gradients.fill(0.0)
        self.bias_gradients.fill(0.0)

    def copy(self) -> "LayerState":
        return LayerState(self.weights.copy(), self.biases.copy(),
                          self.weight_gradients.copy(), self.bias_gradients.copy())


def same_padding(kernel: int) -> tuple[int, int]:
    """(before, after) zero padding that keeps a spatial axis the same length."""
    before = (kernel - 1) // 2
    return before, kernel - 1 - before


def init_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


# --------------------------------------------------------------------------
# convolution
#
# Two interchangeable kernels: a loop over kernel taps (cheap for small
# kernels) and FFT correlation (cost nearly independent of kernel size). Only
# taps that can ever overlap real pixels are visited, so kernels wider than
# the image cost no more than ones of width 2*size-1.
# --------------------------------------------------------------------------

FFT_MIN_TAPS = 49


def _live_taps(kernel: int, size: int) -> tuple[int, int]:
    """[lo, hi) range of taps along one axis that overlap unpadded pixels."""
    before, _ = same_padding(kernel)
    return max(0, before - size + 1), min(kernel, before + size)


def _overlap(offset: int, before: int, size: int) -> tuple[slice, slice]:
    shift = offset - before
    lo = max(0, -shift)
    hi = min(size, size - shift)
    return slice(lo, hi), slice(lo + shift, hi + shift)


def _use_fft(kernel: int, height: int, width: int) -> bool:
    ylo, yhi = _live_taps(kernel, height)
    xlo, xhi = _live_taps(kernel, width)
    return (yhi - ylo) * (xhi - xlo) >= FFT_MIN_TAPS


def _check_conv_input(x: np.ndarray, state: LayerState, kernel: int) -> None:
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [N,C,H,W] input, got shape {x.shape}")
    out_ch, in_ch, kh, kw = state.weights.shape
    if (kh, kw) != (kernel, kernel):
        raise ShapeError(f"conv2d kernel {kernel} does not match weights {state.weights.shape}")
    if x.shape[1] != in_ch:
        raise ShapeError(f"conv2d expects {in_ch} input channels, got {x.shape[1]}")


class _FFTPlan:
    """Geometry of an FFT convolution over frequency-major spectra.

    Spectra are laid out (Fy, Fx, batch, channels) so each frequency's
    channel mixing is one contiguous matrix product.
    """

    def __init__(self, kernel: int, height: int, width: int):
        self.before, _ = same_padding(kernel)
        self.ylo, self.yhi = _live_taps(kernel, height)
        self.xlo, self.xhi = _live_taps(kernel, width)
        self.ky, self.kx = self.yhi - self.ylo, self.xhi - self.xlo
        # large enough that neither the forward nor the transposed products wrap
        self.shape = (sp_fft.next_fast_len(max(height + self.ky - 1, 2 * height - 1), real=True),
                      sp_fft.next_fast_len(max(width + self.kx - 1, 2 * width - 1), real=True))
        self.height, self.width = height, width
        ly, lx = self.shape
        fy = np.arange(ly)[:, None]
        fx = np.arange(lx // 2 + 1)[None, :]
        self._fy, self._fx = fy, fx

    def phase(self, ny: int, nx: int) -> np.ndarray:
        """Spectrum factor turning conj(FFT(a)) into FFT(a flipped), a of size ny x nx."""
        ly, lx = self.shape
        angle = -2.0 * np.pi * (self._fy * (ny - 1) / ly + self._fx * (nx - 1) / lx)
        return np.exp(1j * angle)[:, :, None, None]

    def rfft(self, spatial_major: np.ndarray) -> np.ndarray:
        return sp_fft.rfft2(spatial_major, s=self.shape, axes=(0, 1))

    def irfft(self, spectrum: np.ndarray) -> np.ndarray:
        return sp_fft.irfft2(spectrum, s=self.shape, axes=(0, 1))


def _spatial_major(a: np.ndarray) -> np.ndarray:
    return a.transpose(2, 3, 0, 1)


def _batch_major(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(2, 3, 0, 1))


def _conv_forward_fft(x: np.ndarray, weights: np.ndarray, kernel: int):
    """Returns the output and the spectra reused by the backward pass."""
    _, _, h, w = x.shape
    plan = _FFTPlan(kernel, h, w)
    live = weights[:, :, plan.ylo:plan.yhi, plan.xlo:plan.xhi]
    x_hat = plan.rfft(_spatial_major(x))                          # (Fy, Fx, N, C)
    w_hat = plan.rfft(live.transpose(2, 3, 1, 0))                 # (Fy, Fx, C, O)
    flipped = plan.phase(plan.ky, plan.kx) * np.conj(w_hat)
    full = plan.irfft(np.matmul(x_hat, flipped))                  # (Ly, Lx, N, O)
    oy = plan.yhi - 1 - plan.before
    ox = plan.xhi - 1 - plan.before
    return _batch_major(full[oy:oy + h, ox:ox + w]), (plan, x_hat, w_hat)


def _conv_backward_fft(upstream: np.ndarray, spectra, weight_grad: np.ndarray) -> np.ndarray:
    plan, x_hat, w_hat = spectra
    h, w = plan.height, plan.width
    sy, sx = plan.ylo - plan.before, plan.xlo - plan.before
    g_hat = plan.rfft(_spatial_major(upstream))                   # (Fy, Fx, N, O)
    dx_full = plan.irfft(np.matmul(g_hat, np.swapaxes(w_hat, 2, 3)))
    dx = _batch_major(dx_full[-sy:-sy + h, -sx:-sx + w])
    corr_hat = np.matmul(np.swapaxes(np.conj(g_hat), 2, 3), x_hat)  # (Fy, Fx, O, C)
    corr = plan.irfft(plan.phase(h, w) * corr_hat)
    ty, tx = sy + h - 1, sx + w - 1
    weight_grad.fill(0.0)
    weight_grad[:, :, plan.ylo:plan.yhi, plan.xlo:plan.xhi] = \
        corr[ty:ty + plan.ky, tx:tx + plan.kx].transpose(2, 3, 0, 1)
    return dx


def _conv_forward_taps(x: np.ndarray, weights: np.ndarray, kernel: int) -> np.ndarray:
    n, _, h, w = x.shape
    out = np.zeros((n, weights.shape[0], h, w), dtype=DTYPE)
    before, _ = same_padding(kernel)
    for dy in range(*_live_taps(kernel, h)):
        oy, iy = _overlap(dy, before, h)
        for dx in range(*_live_taps(kernel, w)):
            ox, ix = _overlap(dx, before, w)
            part = np.tensordot(weights[:, :, dy, dx], x[:, :, iy, ix], axes=([1], [1]))
            out[:, :, oy, ox] += part.transpose(1, 0, 2, 3)
    return out


def _conv_backward_taps(upstream: np.ndarray, x: np.ndarray, weights: np.ndarray,
                        kernel: int, weight_grad: np.ndarray) -> np.ndarray:
    _, _, h, w = x.shape
    dx = np.zeros_like(x)
    weight_grad.fill(0.0)
    before, _ = same_padding(kernel)
    for ty in range(*_live_taps(kernel, h)):
        oy, iy = _overlap(ty, before, h)
        for tx in range(*_live_taps(kernel, w)):
            ox, ix = _overlap(tx, before, w)
            g = upstream[:, :, oy, ox]
            weight_grad[:, :, ty, tx] = np.tensordot(g, x[:, :, iy, ix], axes=([0, 2, 3], [0, 2, 3]))
            part = np.tensordot(g, weights[:, :, ty, tx], axes=([1], [0]))
            dx[:, :, iy, ix] += part.transpose(0, 3, 1, 2)
    return dx


def conv2d_forward(x: np.ndarray, state: LayerState, kernel: int) -> np.ndarray:
    """Stride-1 same-padded cross-correlation plus a per-channel bias."""
    _check_conv_input(x, state, kernel)
    _, _, h, w = x.shape
    if _use_fft(kernel, h, w):
        out, _ = _conv_forward_fft(x, state.weights, kernel)
    else:
        out = _conv_forward_taps(x, state.weights, kernel)
    out += state.biases[None, :, None, None]
    return out


def conv2d_backward(upstream: np.ndarray, cached_input: np.ndarray | None,
                    state: LayerState, spectra=None) -> np.ndarray:
    """Fill ``state`` gradients and return the gradient w.r.t. the input.

    ``spectra`` may carry the FFT state saved by a matching forward pass.
    """
    if cached_input is None:
        raise UsageError("conv2d backward called without a cached forward input")
    x = cached_input
    out_ch, _, kernel, _ = state.weights.shape
    n, _, h, w = x.shape
    if upstream.shape != (n, out_ch, h, w):
        raise ShapeError(f"upstream gradient shape {upstream.shape} != {(n, out_ch, h, w)}")
    state.bias_gradients[...] = upstream.sum(axis=(0, 2, 3))
    if _use_fft(kernel, h, w):
        if spectra is None:
            _, spectra = _conv_forward_fft(x, state.weights, kernel)
        return _conv_backward_fft(upstream, spectra, state.weight_gradients)
    return _conv_backward_taps(upstream, x, state.weights, kernel, state.weight_gradients)


# --------------------------------------------------------------------------
# dense, relu, flatten, loss
# --------------------------------------------------------------------------

def dense_forward(x: np.ndarray, state: LayerState) -> np.ndarray:
    if x.ndim != 2:
        raise ShapeError(f"dense expects [N,F] input, got shape {x.shape}")
    if x.shape[1] != state.weights.shape[1]:
        raise ShapeError(f"dense expects {state.weights.shape[1]} features, got {x.shape[1]}")
    return x @ state.weights.T + state.biases


def dense_backward(upstream: np.ndarray, cached_input: np.ndarray | None,
                   state: LayerState) -> np.ndarray:
    if cached_input is None:
        raise UsageError("dense backward called without a cached forward input")
    state.weight_gradients[...] = upstream.T @ cached_input
    state.bias_gradients[...] = upstream.sum(axis=0)
    return upstream @ state.weights


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(upstream: np.ndarray, cached_input: np.ndarray | None) -> np.ndarray:
    if cached_input is None:
        raise UsageError("relu backward called without a cached forward input")
    return upstream * (cached_input > 0.0)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [N,C], got shape {logits.shape}")
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


def sgd_step(states, learning_rate: float) -> None:
    for s in states:
        s.weights -= learning_rate * s.weight_gradients
        s.biases -= learning_rate * s.bias_gradients
        s.zero_grad()


# --------------------------------------------------------------------------
# layer objects (hold state and the forward cache)
# --------------------------------------------------------------------------

class Layer:
    state: LayerState | None = None

    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return input_shape


class Conv2d(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if min(in_channels, out_channels) < 1 or kernel < 1:
            raise ValueError("conv2d channels and kernel must be >= 1")
        self.in_channels, self.out_channels, self.kernel = in_channels, out_channels, kernel
        shape = (out_channels, in_channels, kernel, kernel)
        fan_in = in_channels * kernel * kernel
        weights = init_uniform(shape, fan_in, rng) if rng is not None else np.zeros(shape)
        self.state = LayerState(weights, np.zeros(out_channels))

    def forward(self, x):
        _check_conv_input(x, self.state, self.kernel)
        spectra = None
        if _use_fft(self.kernel, x.shape[2], x.shape[3]):
            out, spectra = _conv_forward_fft(x, self.state.weights, self.kernel)
            out += self.state.biases[None, :, None, None]
        else:
            out = conv2d_forward(x, self.state, self.kernel)
        self._cache = (x, spectra)
        return out

    def backward(self, upstream):
        x, spectra = self._cache if self._cache is not None else (None, None)
        return conv2d_backward(upstream, x, self.state, spectra)

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ShapeError(f"conv2d expects ({self.in_channels}, H, W), got {input_shape}")
        return (self.out_channels,) + tuple(input_shape[1:])


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if min(in_features, out_features) < 1:
            raise ValueError("dense features must be >= 1")
        self.in_features, self.out_features = in_features, out_features
        shape = (out_features, in_features)
        weights = init_uniform(shape, in_features, rng) if rng is not None else np.zeros(shape)
        self.state = LayerState(weights, np.zeros(out_features))

    def forward(self, x):
        out = dense_forward(x, self.state)
        self._cache = x
        return out

    def backward(self, upstream):
        return dense_backward(upstream, self._cache, self.state)

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_features,):
            raise ShapeError(f"dense expects ({self.in_features},), got {input_shape}")
        return (self.out_features,)


class ReLU(Layer):
    def forward(self, x):
        self._cache = x
        return relu_forward(x)

    def backward(self, upstream):
        return relu_backward(upstream, self._cache)


class Flatten(Layer):
    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, upstream):
        if self._cache is None:
            raise UsageError("flatten backward called before forward")
        return upstream.reshape(self._cache)

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)
