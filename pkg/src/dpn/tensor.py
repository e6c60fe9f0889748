"""Dense NCHW tensor kernels: the forward numerics everything else builds on.

All kernels are pure functions on 4-D float arrays (batch, channel, height,
width), float32 in the production path and float64 in the gradient-check
shadow mode. The 3x3 convolution is the hot spot and is compiled with numba;
the remaining kernels are plain vectorized numpy.
"""

import numpy as np
from numba import njit, prange


class ShapeError(ValueError):
    """A kernel received tensors with inconsistent dimensions."""


# Below this many output pixels the parallel dispatch overhead outweighs the
# work (gradient checks run thousands of 8x8 forwards).
_PARALLEL_MIN_PIXELS = 64 * 64

# Bilinear tap weights of the fixed 4x4 stride-2 upsampling kernel.
_UP_NEAR = 0.75
_UP_FAR = 0.25


def _check4d(name, x):
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name}: expected a 4-D (N,C,H,W) array, got "
                         f"{getattr(x, 'shape', type(x))}")


# The inner loops keep all nine taps of one input channel in registers and
# sweep each output row once; rows are independent, so the parallel variant
# splits them over threads without changing any per-element summation order
# (bit-identical results at every thread count).

@njit(cache=True)
def _conv3x3_serial(xp, w, b, out, fuse_relu):
    n, cout, h, wd = out.shape
    cin = xp.shape[1]
    for img in range(n):
        for y in range(h):
            for o in range(cout):
                row = out[img, o, y]
                for x in range(wd):
                    row[x] = b[o]
                for i in range(cin):
                    x0 = xp[img, i, y]
                    x1 = xp[img, i, y + 1]
                    x2 = xp[img, i, y + 2]
                    w00 = w[o, i, 0, 0]; w01 = w[o, i, 0, 1]; w02 = w[o, i, 0, 2]
                    w10 = w[o, i, 1, 0]; w11 = w[o, i, 1, 1]; w12 = w[o, i, 1, 2]
                    w20 = w[o, i, 2, 0]; w21 = w[o, i, 2, 1]; w22 = w[o, i, 2, 2]
                    for x in range(wd):
                        row[x] += (w00 * x0[x] + w01 * x0[x + 1] + w02 * x0[x + 2]
                                   + w10 * x1[x] + w11 * x1[x + 1] + w12 * x1[x + 2]
                                   + w20 * x2[x] + w21 * x2[x + 1] + w22 * x2[x + 2])
                if fuse_relu:
                    for x in range(wd):
                        if row[x] < 0:
                            row[x] = 0


@njit(cache=True, parallel=True)
def _conv3x3_parallel(xp, w, b, out, fuse_relu):
    n, cout, h, wd = out.shape
    cin = xp.shape[1]
    for img in range(n):
        for y in prange(h):
            for o in range(cout):
                row = out[img, o, y]
                for x in range(wd):
                    row[x] = b[o]
                for i in range(cin):
                    x0 = xp[img, i, y]
                    x1 = xp[img, i, y + 1]
                    x2 = xp[img, i, y + 2]
                    w00 = w[o, i, 0, 0]; w01 = w[o, i, 0, 1]; w02 = w[o, i, 0, 2]
                    w10 = w[o, i, 1, 0]; w11 = w[o, i, 1, 1]; w12 = w[o, i, 1, 2]
                    w20 = w[o, i, 2, 0]; w21 = w[o, i, 2, 1]; w22 = w[o, i, 2, 2]
                    for x in range(wd):
                        row[x] += (w00 * x0[x] + w01 * x0[x + 1] + w02 * x0[x + 2]
                                   + w10 * x1[x] + w11 * x1[x + 1] + w12 * x1[x + 2]
                                   + w20 * x2[x] + w21 * x2[x + 1] + w22 * x2[x + 2])
                if fuse_relu:
                    for x in range(wd):
                        if row[x] < 0:
                            row[x] = 0


def pad1(x):
    """Zero-pad both spatial axes by one pixel (conv halo)."""
    n, c, h, w = x.shape
    xp = np.empty((n, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 0, :] = 0
    xp[:, :, -1, :] = 0
    xp[:, :, :, 0] = 0
    xp[:, :, :, -1] = 0
    xp[:, :, 1:h + 1, 1:w + 1] = x
    return xp


def conv2d_3x3(x, weight, bias, fuse_relu=False):
    """3x3 convolution, stride 1, zero padding 1 (resolution preserving).

    x: (N, Cin, H, W); weight: (Cout, Cin, 3, 3); bias: (Cout,).
    Returns (N, Cout, H, W). ``fuse_relu`` clamps negatives in place before
    the rows leave cache (bit-identical to a separate relu pass).
    """
    _check4d("conv2d_3x3 input", x)
    _check4d("conv2d_3x3 weight", weight)
    cout, cin, kh, kw = weight.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d_3x3: kernel must be 3x3, got {kh}x{kw}")
    if cin != x.shape[1]:
        raise ShapeError(f"conv2d_3x3: weight expects Cin={cin}, "
                         f"input has C={x.shape[1]}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d_3x3: bias must have shape ({cout},), "
                         f"got {bias.shape}")
    n, _, h, w = x.shape
    out = np.empty((n, cout, h, w), dtype=x.dtype)
    xp = pad1(x)
    if h * w >= _PARALLEL_MIN_PIXELS:
        _conv3x3_parallel(xp, weight, bias, out, fuse_relu)
    else:
        _conv3x3_serial(xp, weight, bias, out, fuse_relu)
    return out


def conv2d_1x1(x, weight, bias):
    """Pointwise convolution used by the prediction heads.

    weight: (Cout, Cin, 1, 1); bias: (Cout,).
    """
    _check4d("conv2d_1x1 input", x)
    cout, cin = weight.shape[0], weight.shape[1]
    if cin != x.shape[1]:
        raise ShapeError(f"conv2d_1x1: weight expects Cin={cin}, "
                         f"input has C={x.shape[1]}")
    n, _, h, w = x.shape
    w2 = weight.reshape(cout, cin)
    out = np.empty((n, cout, h, w), dtype=x.dtype)
    for img in range(n):
        out[img] = (w2 @ x[img].reshape(cin, h * w)).reshape(cout, h, w)
    out += bias[None, :, None, None]
    return out


@njit(cache=True)
def _maxpool_argmax(x, k, out, idx):
    n, c, oh, ow = out.shape
    for img in range(n):
        for ch in range(c):
            for y in range(oh):
                for xx in range(ow):
                    best = x[img, ch, y * k, xx * k]
                    bi = 0
                    for ky in range(k):
                        for kx in range(k):
                            v = x[img, ch, y * k + ky, xx * k + kx]
                            if v > best:
                                best = v
                                bi = ky * k + kx
                    out[img, ch, y, xx] = best
                    idx[img, ch, y, xx] = bi


def _pool2(x):
    a = np.maximum(x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2])
    b = np.maximum(x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2])
    return np.maximum(a, b)


def maxpool(x, k, with_argmax=False):
    """Non-overlapping k x k max pooling (window size equals stride).

    H and W must be divisible by k. With ``with_argmax`` also returns the
    row-major in-window argmax (first maximal element on ties), which the
    backward pass routes the adjoint through.
    """
    _check4d("maxpool input", x)
    if k not in (2, 4):
        raise ShapeError(f"maxpool: k must be 2 or 4, got {k}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool: H={h}, W={w} not divisible by k={k}")
    if not with_argmax:
        return _pool2(_pool2(x)) if k == 4 else _pool2(x)
    out = np.empty((n, c, h // k, w // k), dtype=x.dtype)
    idx = np.empty((n, c, h // k, w // k), dtype=np.uint8)
    _maxpool_argmax(x, k, out, idx)
    return out, idx


def maxpool_backward(g, idx, k):
    """Scatter the adjoint to each window's recorded argmax."""
    n, c, oh, ow = g.shape
    buf = np.zeros((n, c, oh, ow, k * k), dtype=g.dtype)
    np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
    buf = buf.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5)
    return buf.reshape(n, c, oh * k, ow * k).copy()


def upsample2x(x):
    """Fixed bilinear 2x upsampling: transposed conv, 4x4 kernel, stride 2,
    padding 1, per channel, taps (0.25, 0.75, 0.75, 0.25) per axis.

    Carries no learnable parameters. Interior constants are preserved exactly
    (the contributing taps sum to 1); the outermost rows/columns are
    attenuated by the implicit zero padding.
    """
    _check4d("upsample2x input", x)
    n, c, h, w = x.shape
    r = np.empty((n, c, 2 * h, w), dtype=x.dtype)
    r[:, :, 0::2, :] = _UP_NEAR * x
    r[:, :, 2::2, :] += _UP_FAR * x[:, :, :-1, :]
    r[:, :, 1::2, :] = _UP_NEAR * x
    r[:, :, 1:-1:2, :] += _UP_FAR * x[:, :, 1:, :]
    out = np.empty((n, c, 2 * h, 2 * w), dtype=x.dtype)
    out[:, :, :, 0::2] = _UP_NEAR * r
    out[:, :, :, 2::2] += _UP_FAR * r[:, :, :, :-1]
    out[:, :, :, 1::2] = _UP_NEAR * r
    out[:, :, :, 1:-1:2] += _UP_FAR * r[:, :, :, 1:]
    return out


def _upsample2x_adjoint_axis(g, axis):
    g = np.moveaxis(g, axis, -1)
    n2 = g.shape[-1]
    h = n2 // 2
    out = _UP_NEAR * (g[..., 0::2] + g[..., 1::2])
    out[..., :-1] += _UP_FAR * g[..., 2::2]
    out[..., 1:] += _UP_FAR * g[..., 1:-1:2]
    return np.moveaxis(out, -1, axis)


def upsample2x_backward(g):
    """Adjoint of upsample2x (its transpose; separable per axis)."""
    return _upsample2x_adjoint_axis(_upsample2x_adjoint_axis(g, 3), 2)


def concat_channels(a, b):
    """Concatenate along the channel axis: channels of a first, then b."""
    _check4d("concat_channels a", a)
    _check4d("concat_channels b", b)
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_channels: batch mismatch {a.shape[0]} vs "
                         f"{b.shape[0]}")
    if a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: spatial mismatch {a.shape[2:]} "
                         f"vs {b.shape[2:]}")
    return np.concatenate([a, b], axis=1)


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    """Numerically stable logistic function."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def pad_to_multiple(x, m):
    """Zero-pad right/bottom so H and W become multiples of m.

    Returns (padded, (H, W)) with the original spatial dims for cropping back.
    """
    _check4d("pad_to_multiple input", x)
    if m < 1:
        raise ShapeError(f"pad_to_multiple: m must be >= 1, got {m}")
    n, c, h, w = x.shape
    ph = (m - h % m) % m
    pw = (m - w % m) % m
    if ph == 0 and pw == 0:
        return x.copy(), (h, w)
    out = np.zeros((n, c, h + ph, w + pw), dtype=x.dtype)
    out[:, :, :h, :w] = x
    return out, (h, w)


def crop(x, h0, w0):
    """Keep the top-left h0 x w0 spatial window."""
    _check4d("crop input", x)
    if h0 > x.shape[2] or w0 > x.shape[3]:
        raise ShapeError(f"crop: target {h0}x{w0} exceeds input "
                         f"{x.shape[2]}x{x.shape[3]}")
    return x[:, :, :h0, :w0].copy()
