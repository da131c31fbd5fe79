"""Neural network operations and their parameter containers.

Every op takes rank-4 tensors, runs stride-1 / "same"-padding semantics where
a spatial filter is involved, and registers an exact hand-derived backward.

Determinism contract: channel contractions use np.einsum with optimize=False
(no BLAS, fixed reduction order), and the only threaded code path (depthwise
conv forward) splits work over disjoint channel chunks whose results never
interact, so outputs are bit-identical for any thread count.

The depthwise conv accumulates kernel taps in row-major tap order over a
zero-padded input; the test suite holds this loop bit-equal to a per-pixel
scalar reference, so the tap order here must not change.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.special import erf

from . import tensor as T
from .errors import ShapeError, UnsupportedKernelError
from .rng import Rng
from .tensor import Param, Tensor

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def _parallel_channel_ranges(channels: int):
    """Split [0, channels) into one contiguous range per worker thread."""
    workers = min(T.get_num_threads(), channels)
    bounds = np.linspace(0, channels, workers + 1, dtype=int)
    return [(int(bounds[i]), int(bounds[i + 1])) for i in range(workers)
            if bounds[i] < bounds[i + 1]]


def _run_ranges(ranges, fn) -> None:
    if len(ranges) <= 1:
        for c0, c1 in ranges:
            fn(c0, c1)
        return
    with ThreadPoolExecutor(max_workers=len(ranges)) as pool:
        list(pool.map(lambda r: fn(*r), ranges))


# ---------------------------------------------------------------------------
# depthwise convolution
# ---------------------------------------------------------------------------


class DepthwiseConv:
    """Per-channel 2-D correlation: one (kh, kw) filter plane per channel.

    Supported kernel geometries are odd axial strips (1, k) / (k, 1) and odd
    squares (k, k). `dilation` spaces the taps; padding is chosen so the
    output keeps the input's spatial dims.
    """

    def __init__(self, kernel, bias, dilation: int = 1):
        kernel = np.asarray(kernel)
        bias = np.asarray(bias)
        if kernel.ndim != 3:
            raise ShapeError(f"depthwise kernel must be (C, kh, kw), got rank {kernel.ndim}")
        _, kh, kw = kernel.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise UnsupportedKernelError(f"kernel dims must be odd, got ({kh}, {kw})")
        if not (kh == 1 or kw == 1 or kh == kw):
            raise UnsupportedKernelError(
                f"kernel must be 1xk, kx1 or kxk, got ({kh}, {kw})")
        if bias.shape != (kernel.shape[0],):
            raise ShapeError(f"bias dims {bias.shape} != ({kernel.shape[0]},)")
        if int(dilation) < 1:
            raise ValueError(f"dilation must be >= 1, got {dilation}")
        self.kernel = Param(kernel)
        self.bias = Param(bias)
        self.dilation = int(dilation)

    @classmethod
    def create(cls, channels: int, shape: tuple[int, int], rng: Rng,
               dilation: int = 1, dtype=np.float32) -> "DepthwiseConv":
        kh, kw = shape
        fan_in = kh * kw
        std = float(np.sqrt(2.0 / fan_in))
        kernel = rng.normal(channels * kh * kw, std=std).reshape(channels, kh, kw)
        return cls(kernel.astype(dtype), np.zeros(channels, dtype=dtype), dilation)

    def param_count(self) -> int:
        c, kh, kw = self.kernel.value.shape
        return c * kh * kw + c

    def named_params(self, prefix: str = ""):
        yield prefix + "kernel", self.kernel
        yield prefix + "bias", self.bias


def depthwise_conv(x: Tensor, p: DepthwiseConv) -> Tensor:
    n, c, h, w = x.data.shape
    kc, kh, kw = p.kernel.value.shape
    if c != kc:
        raise ShapeError(f"depthwise_conv: input has {c} channels, kernel has {kc}")
    d = p.dilation
    pad_h = d * (kh - 1) // 2
    pad_w = d * (kw - 1) // 2
    padded = np.zeros((n, c, h + 2 * pad_h, w + 2 * pad_w), dtype=x.data.dtype)
    padded[:, :, pad_h:pad_h + h, pad_w:pad_w + w] = x.data
    kern = p.kernel.value
    out = np.zeros((n, c, h, w), dtype=x.data.dtype)

    def accumulate_taps(c0: int, c1: int) -> None:
        # row-major tap order; bit-exactness contract with the naive oracle
        sub = out[:, c0:c1]
        for i in range(kh):
            for j in range(kw):
                sub += (padded[:, c0:c1, i * d:i * d + h, j * d:j * d + w]
                        * kern[c0:c1, i, j][None, :, None, None])

    _run_ranges(_parallel_channel_ranges(c), accumulate_taps)
    out += p.bias.value[None, :, None, None]

    def backward(g):
        p.bias.grad += g.sum(axis=(0, 2, 3))
        for i in range(kh):
            for j in range(kw):
                window = padded[:, :, i * d:i * d + h, j * d:j * d + w]
                p.kernel.grad[:, i, j] += (window * g).sum(axis=(0, 2, 3))
        if x.requires_grad:
            gpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, :, i * d:i * d + h, j * d:j * d + w] += (
                        g * kern[:, i, j][None, :, None, None])
            T.accumulate(x, gpad[:, :, pad_h:pad_h + h, pad_w:pad_w + w])

    return T.result(out, (x,), backward, "depthwise_conv")


# ---------------------------------------------------------------------------
# pointwise (1x1) convolution
# ---------------------------------------------------------------------------


class PointwiseConv:
    """1x1 convolution: a (c_out, c_in) channel-mixing matrix plus bias."""

    def __init__(self, weight, bias):
        weight = np.asarray(weight)
        bias = np.asarray(bias)
        if weight.ndim != 2:
            raise ShapeError(f"pointwise weight must be (c_out, c_in), got rank {weight.ndim}")
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias dims {bias.shape} != ({weight.shape[0]},)")
        self.weight = Param(weight)
        self.bias = Param(bias)

    @classmethod
    def create(cls, c_in: int, c_out: int, rng: Rng, dtype=np.float32) -> "PointwiseConv":
        std = float(np.sqrt(2.0 / c_in))
        weight = rng.normal(c_out * c_in, std=std).reshape(c_out, c_in)
        return cls(weight.astype(dtype), np.zeros(c_out, dtype=dtype))

    def param_count(self) -> int:
        c_out, c_in = self.weight.value.shape
        return c_out * c_in + c_out

    def named_params(self, prefix: str = ""):
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias


def pointwise_conv(x: Tensor, p: PointwiseConv) -> Tensor:
    c_out, c_in = p.weight.value.shape
    if x.data.shape[1] != c_in:
        raise ShapeError(f"pointwise_conv: input has {x.data.shape[1]} channels, "
                         f"weight expects {c_in}")
    out = np.einsum("oc,nchw->nohw", p.weight.value, x.data, optimize=False)
    out += p.bias.value[None, :, None, None]

    def backward(g):
        p.bias.grad += g.sum(axis=(0, 2, 3))
        p.weight.grad += np.einsum("nohw,nchw->oc", g, x.data, optimize=False)
        if x.requires_grad:
            T.accumulate(x, np.einsum("oc,nohw->nchw", p.weight.value, g, optimize=False))

    return T.result(out, (x,), backward, "pointwise_conv")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


class BatchNorm:
    """Per-channel normalization with affine transform and running statistics.

    Train mode normalizes with batch statistics over (N, H, W) using the
    population variance, and updates the running stats as
    (1 - momentum) * running + momentum * batch. Eval mode normalizes with
    the stored running stats, which start at mean 0, var 1 so a freshly
    created layer is usable in eval mode immediately. Backward is defined in
    both modes.
    """

    def __init__(self, gamma, beta, running_mean, running_var,
                 momentum: float = 0.1, eps: float = 1e-5):
        gamma = np.asarray(gamma)
        for name, arr in (("beta", beta), ("running_mean", running_mean),
                          ("running_var", running_var)):
            if np.asarray(arr).shape != gamma.shape:
                raise ShapeError(f"batch_norm {name} dims mismatch")
        self.gamma = Param(gamma)
        self.beta = Param(np.asarray(beta))
        self.running_mean = np.array(running_mean, copy=True)
        self.running_var = np.array(running_var, copy=True)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.mode = "train"

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNorm":
        return cls(np.ones(channels, dtype=dtype), np.zeros(channels, dtype=dtype),
                   np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    @property
    def mode(self) -> str:
        return self._mode

    @mode.setter
    def mode(self, value: str) -> None:
        if value not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {value!r}")
        self._mode = value

    def param_count(self) -> int:
        return 2 * self.gamma.value.shape[0]

    def named_params(self, prefix: str = ""):
        yield prefix + "gamma", self.gamma
        yield prefix + "beta", self.beta

    def named_buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var


def batch_norm(x: Tensor, p: BatchNorm) -> Tensor:
    if x.data.shape[1] != p.gamma.value.shape[0]:
        raise ShapeError(f"batch_norm: input has {x.data.shape[1]} channels, "
                         f"layer has {p.gamma.value.shape[0]}")
    ch = (None, slice(None), None, None)  # broadcast a (C,) array over NCHW

    if p.mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # population variance, ddof=0
        inv = 1.0 / np.sqrt(var + p.eps)
        xhat = (x.data - mean[ch]) * inv[ch]
        out = p.gamma.value[ch] * xhat + p.beta.value[ch]
        m = p.momentum
        p.running_mean[...] = (1.0 - m) * p.running_mean + m * mean
        p.running_var[...] = (1.0 - m) * p.running_var + m * var

        def backward(g):
            p.gamma.grad += (g * xhat).sum(axis=(0, 2, 3))
            p.beta.grad += g.sum(axis=(0, 2, 3))
            if x.requires_grad:
                g_mean = g.mean(axis=(0, 2, 3))
                gx_mean = (g * xhat).mean(axis=(0, 2, 3))
                T.accumulate(x, (p.gamma.value * inv)[ch]
                             * (g - g_mean[ch] - xhat * gx_mean[ch]))

        return T.result(out, (x,), backward, "batch_norm")

    inv = 1.0 / np.sqrt(p.running_var + p.eps)
    scale = p.gamma.value * inv
    shift = p.beta.value - p.running_mean * scale
    out = x.data * scale[ch] + shift[ch]

    def backward(g):
        xhat = (x.data - p.running_mean[ch]) * inv[ch]
        p.gamma.grad += (g * xhat).sum(axis=(0, 2, 3))
        p.beta.grad += g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            T.accumulate(x, g * scale[ch])

    return T.result(out, (x,), backward, "batch_norm")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    """Exact-erf form: x * Phi(x) with Phi the standard normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = (x.data * cdf).astype(x.data.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        T.accumulate(x, g * (cdf + x.data * pdf).astype(x.data.dtype, copy=False))

    return T.result(out, (x,), backward, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.data.dtype)

    def backward(g):
        T.accumulate(x, g * out * (1.0 - out))

    return T.result(out, (x,), backward, "sigmoid")


# ---------------------------------------------------------------------------
# resolution changes
# ---------------------------------------------------------------------------


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties go to the first element in row-major
    window order, and backward routes the gradient only to that element."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even H and W, got ({h}, {w})")
    windows = (x.data.reshape(n, c, h // 2, 2, w // 2, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, h // 2, w // 2, 4))
    winner = windows.argmax(axis=-1)  # argmax returns the first maximum
    out = np.take_along_axis(windows, winner[..., None], axis=-1)[..., 0]

    def backward(g):
        if not x.requires_grad:
            return
        hot = (winner[..., None] == np.arange(4)).astype(g.dtype)
        gwin = g[..., None] * hot
        T.accumulate(x, gwin.reshape(n, c, h // 2, w // 2, 2, 2)
                     .transpose(0, 1, 2, 4, 3, 5)
                     .reshape(n, c, h, w))

    return T.result(np.ascontiguousarray(out), (x,), backward, "max_pool2")


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling; each source pixel becomes a 2x2 block."""
    n, c, h, w = x.data.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        T.accumulate(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return T.result(out, (x,), backward, "upsample2")
