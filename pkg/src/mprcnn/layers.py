"""Dense NCHW layers with hand-written backward passes.

Every layer caches what it needs during ``forward`` and returns the input
gradient from ``backward``; parameter gradients land in ``layer.grads``.
Feature maps are plain numpy arrays of shape (batch, channels, height, width).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

L2_EPS = 1e-10


class ShapeError(ValueError):
    pass


def check_feature_map(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected 4-D (batch, channels, height, width), got ndim={x.ndim}")
    for axis, dim in zip(("batch", "channels", "height", "width"), x.shape):
        if dim < 1:
            raise ShapeError(f"{name}: dimension '{axis}' must be >= 1, got {dim}")


def gaussian_init(shape, std, rng, dtype=np.float32):
    return (rng.standard_normal(shape) * std).astype(dtype)


def conv_output_size(size, k, stride, pad, dilation):
    return (size + 2 * pad - (dilation * (k - 1) + 1)) // stride + 1


class Layer:
    def __init__(self):
        self.params = {}
        self.grads = {}

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        self.zero_grad()
        return self


class Conv2D(Layer):
    """2-D convolution with stride, zero padding and dilation ("atrous" when > 1)."""

    def __init__(self, in_ch, out_ch, k=3, stride=1, pad=0, dilation=1, std=0.01, rng=None,
                 dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.pad, self.dilation = stride, pad, dilation
        self.params["weight"] = gaussian_init((out_ch, in_ch, k, k), std, rng, dtype)
        self.params["bias"] = np.zeros(out_ch, dtype=dtype)
        self.zero_grad()
        self._cache = None

    @property
    def weight(self):
        return self.params["weight"]

    @property
    def bias(self):
        return self.params["bias"]

    def _check(self, x):
        check_feature_map(x)
        out_ch, in_ch, kh, kw = self.weight.shape
        if x.shape[1] != in_ch:
            raise ShapeError(f"conv2d: input channels={x.shape[1]} but weight expects in_ch={in_ch}")
        for axis, size, k in (("height", x.shape[2], kh), ("width", x.shape[3], kw)):
            extent = self.dilation * (k - 1) + 1
            if extent > size + 2 * self.pad:
                raise ShapeError(
                    f"conv2d: effective kernel {axis} {extent} exceeds padded input {axis} "
                    f"{size + 2 * self.pad}")

    def forward(self, x):
        self._check(x)
        w = self.weight
        out_ch, in_ch, kh, kw = w.shape
        s, p, d = self.stride, self.pad, self.dilation
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (d * (kh - 1) + 1, d * (kw - 1) + 1), axis=(2, 3))
        win = win[:, :, ::s, ::s, ::d, ::d]
        n, _, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, in_ch * kh * kw)
        out = cols @ w.reshape(out_ch, -1).T + self.bias
        self._cache = (x.shape, xp.shape, cols, ho, wo)
        return np.ascontiguousarray(out.reshape(n, ho, wo, out_ch).transpose(0, 3, 1, 2))

    def backward(self, dy):
        x_shape, xp_shape, cols, ho, wo = self._cache
        w = self.weight
        out_ch, in_ch, kh, kw = w.shape
        s, p, d = self.stride, self.pad, self.dilation
        n = x_shape[0]
        dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, out_ch)
        self.grads["weight"] += (dy2.T @ cols).reshape(w.shape)
        self.grads["bias"] += dy2.sum(axis=0, dtype=np.float64).astype(w.dtype)
        dcols = (dy2 @ w.reshape(out_ch, -1)).reshape(n, ho, wo, in_ch, kh, kw)
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for ky in range(kh):
            for kx in range(kw):
                y0, x0 = ky * d, kx * d
                dxp[:, :, y0:y0 + s * (ho - 1) + 1:s, x0:x0 + s * (wo - 1) + 1:s] += \
                    dcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class MaxPool2(Layer):
    """2x2 max pooling, stride 2. Odd trailing rows/columns are dropped."""

    def forward(self, x):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        xr = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
        xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
        self._arg = xr.argmax(axis=-1)
        self._shape = x.shape
        return np.take_along_axis(xr, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        n, c, h, w = self._shape
        h2, w2 = dy.shape[2:]
        onehot = np.zeros((n, c, h2, w2, 4), dtype=dy.dtype)
        np.put_along_axis(onehot, self._arg[..., None], dy[..., None], axis=-1)
        dx = np.zeros(self._shape, dtype=dy.dtype)
        dx[:, :, :2 * h2, :2 * w2] = (
            onehot.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2))
        return dx


def max_filter2(x):
    """Stride-1 2x2 max filter (bottom/right edge replicated); the dense twin of MaxPool2."""
    xp = np.pad(x, ((0, 0), (0, 0), (0, 1), (0, 1)), mode="edge")
    return np.maximum(np.maximum(xp[:, :, :-1, :-1], xp[:, :, 1:, :-1]),
                      np.maximum(xp[:, :, :-1, 1:], xp[:, :, 1:, 1:]))


def bilinear_kernel(size=4):
    f = (size + 1) // 2
    c = (2 * f - 1 - f % 2) / (2.0 * f)
    k1 = 1 - np.abs(np.arange(size) / f - c)
    return np.outer(k1, k1)


def _edge_pad_backward(dxp):
    # adjoint of np.pad(x, 1, mode="edge") on the two spatial axes
    rows = dxp[:, :, 1:-1].copy()
    rows[:, :, 0] += dxp[:, :, 0]
    rows[:, :, -1] += dxp[:, :, -1]
    dx = rows[:, :, :, 1:-1].copy()
    dx[:, :, :, 0] += rows[:, :, :, 0]
    dx[:, :, :, -1] += rows[:, :, :, -1]
    return dx


class Upsample2x(Layer):
    """Learnable per-channel 4x4 transposed convolution (stride 2, pad 1).

    Initialised to bilinear interpolation. The input is edge-replicated by one
    cell first so that constant maps stay constant at the border.
    """

    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        k = bilinear_kernel(4)
        self.params["weight"] = np.repeat(k[None], channels, axis=0).astype(dtype)
        self.zero_grad()

    def forward(self, x):
        check_feature_map(x)
        n, c, h, w = x.shape
        if c != self.params["weight"].shape[0]:
            raise ShapeError(f"upsample2x: channels={c} but layer has {self.params['weight'].shape[0]}")
        k = self.params["weight"]
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
        big = np.zeros((n, c, 2 * (h + 2) + 2, 2 * (w + 2) + 2), dtype=x.dtype)
        for ky in range(4):
            for kx in range(4):
                big[:, :, ky:ky + 2 * (h + 2):2, kx:kx + 2 * (w + 2):2] += xp * k[None, :, ky, kx, None, None]
        self._xp = xp
        self._hw = (h, w)
        return big[:, :, 3:3 + 2 * h, 3:3 + 2 * w].copy()

    def backward(self, dy):
        xp = self._xp
        h, w = self._hw
        n, c = dy.shape[:2]
        k = self.params["weight"]
        dbig = np.zeros((n, c, 2 * (h + 2) + 2, 2 * (w + 2) + 2), dtype=dy.dtype)
        dbig[:, :, 3:3 + 2 * h, 3:3 + 2 * w] = dy
        dxp = np.zeros_like(xp)
        gk = self.grads["weight"]
        for ky in range(4):
            for kx in range(4):
                sl = dbig[:, :, ky:ky + 2 * (h + 2):2, kx:kx + 2 * (w + 2):2]
                dxp += sl * k[None, :, ky, kx, None, None]
                gk[:, ky, kx] += (sl * xp).sum(axis=(0, 2, 3), dtype=np.float64).astype(gk.dtype)
        return _edge_pad_backward(dxp)


class L2Normalize(Layer):
    """Per-location channel L2 normalisation followed by a learnable per-channel scale."""

    def __init__(self, channels, init_scale=1.0, dtype=np.float32):
        super().__init__()
        self.params["scale"] = np.full(channels, init_scale, dtype=dtype)
        self.zero_grad()

    def forward(self, x):
        check_feature_map(x)
        sq = np.sum(np.square(x, dtype=np.float64), axis=1, keepdims=True)
        norm = np.sqrt(sq + L2_EPS).astype(x.dtype)
        u = x / norm
        self._u, self._norm = u, norm
        return u * self.params["scale"][None, :, None, None]

    def backward(self, dy):
        u, norm = self._u, self._norm
        scale = self.params["scale"]
        self.grads["scale"] += (dy * u).sum(axis=(0, 2, 3), dtype=np.float64).astype(scale.dtype)
        du = dy * scale[None, :, None, None]
        dot = np.sum(du * u, axis=1, keepdims=True, dtype=np.float64).astype(dy.dtype)
        return (du - u * dot) / norm


def l2_normalize_channels(x, scale):
    layer = L2Normalize(x.shape[1], dtype=x.dtype)
    layer.params["scale"] = np.asarray(scale, dtype=x.dtype)
    return layer.forward(x)


def concat_channels(a, b):
    check_feature_map(a, "a")
    check_feature_map(b, "b")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_channels: batch mismatch {a.shape[0]} vs {b.shape[0]}")
    if a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat_channels: spatial mismatch height/width {a.shape[2:]} vs {b.shape[2:]}; upsample first")
    return np.concatenate([a, b], axis=1)


def split_channels(dy, sizes):
    """Backward of channel concatenation: slices the gradient without mixing."""
    out, start = [], 0
    for s in sizes:
        out.append(dy[:, start:start + s])
        start += s
    return out


def softmax_pair(logits):
    """Softmax over the last axis of size 2, max-subtracted for stability."""
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
