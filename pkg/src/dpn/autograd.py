"""Reverse-mode differentiation over the tensor kernels.

A Tape records operations in execution order (hence already topologically
sorted); backward() walks it once in reverse, summing adjoints for values
consumed by several consumers. grad_check() verifies analytic gradients
against central differences in a float64 shadow mode.
"""

import numpy as np
from numba import njit, prange

from . import tensor
from .tensor import ShapeError


class AutogradError(ValueError):
    """Backward pass invoked on an ill-formed graph."""


class Param:
    """A learnable tensor with its gradient and ADAM moment buffers."""

    def __init__(self, name, value):
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Param({self.name}, shape={self.value.shape})"


# fastmath here only licenses vectorizing the nine-way reduction; the
# compiled summation order is still fixed, so results stay deterministic
# run to run and across thread counts (each (o, i) pair is one thread's
# sequential pass).

@njit(cache=True, fastmath=True)
def _conv3x3_wgrad_serial(xp, g, gw):
    n, cout, h, wd = g.shape
    cin = xp.shape[1]
    for o in range(cout):
        for i in range(cin):
            s00 = s01 = s02 = s10 = s11 = s12 = s20 = s21 = s22 = 0.0
            for img in range(n):
                for y in range(h):
                    grow = g[img, o, y]
                    x0 = xp[img, i, y]
                    x1 = xp[img, i, y + 1]
                    x2 = xp[img, i, y + 2]
                    for x in range(wd):
                        gv = grow[x]
                        s00 += gv * x0[x]; s01 += gv * x0[x + 1]; s02 += gv * x0[x + 2]
                        s10 += gv * x1[x]; s11 += gv * x1[x + 1]; s12 += gv * x1[x + 2]
                        s20 += gv * x2[x]; s21 += gv * x2[x + 1]; s22 += gv * x2[x + 2]
            gw[o, i, 0, 0] = s00; gw[o, i, 0, 1] = s01; gw[o, i, 0, 2] = s02
            gw[o, i, 1, 0] = s10; gw[o, i, 1, 1] = s11; gw[o, i, 1, 2] = s12
            gw[o, i, 2, 0] = s20; gw[o, i, 2, 1] = s21; gw[o, i, 2, 2] = s22


@njit(cache=True, parallel=True, fastmath=True)
def _conv3x3_wgrad_parallel(xp, g, gw):
    n, cout, h, wd = g.shape
    cin = xp.shape[1]
    for o in prange(cout):
        for i in range(cin):
            s00 = s01 = s02 = s10 = s11 = s12 = s20 = s21 = s22 = 0.0
            for img in range(n):
                for y in range(h):
                    grow = g[img, o, y]
                    x0 = xp[img, i, y]
                    x1 = xp[img, i, y + 1]
                    x2 = xp[img, i, y + 2]
                    for x in range(wd):
                        gv = grow[x]
                        s00 += gv * x0[x]; s01 += gv * x0[x + 1]; s02 += gv * x0[x + 2]
                        s10 += gv * x1[x]; s11 += gv * x1[x + 1]; s12 += gv * x1[x + 2]
                        s20 += gv * x2[x]; s21 += gv * x2[x + 1]; s22 += gv * x2[x + 2]
            gw[o, i, 0, 0] = s00; gw[o, i, 0, 1] = s01; gw[o, i, 0, 2] = s02
            gw[o, i, 1, 0] = s10; gw[o, i, 1, 1] = s11; gw[o, i, 1, 2] = s12
            gw[o, i, 2, 0] = s20; gw[o, i, 2, 1] = s21; gw[o, i, 2, 2] = s22


def _conv3x3_grads(x, w, g):
    """Gradients of conv2d_3x3 w.r.t. input, weight and bias."""
    # input grad: convolve the adjoint with the spatially flipped,
    # channel-transposed kernel
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    zb = np.zeros(wt.shape[0], dtype=g.dtype)
    gx = tensor.conv2d_3x3(g, wt, zb)
    gw = np.empty_like(w)
    xp = tensor.pad1(x)
    if g.shape[2] * g.shape[3] >= tensor._PARALLEL_MIN_PIXELS:
        _conv3x3_wgrad_parallel(xp, g, gw)
    else:
        _conv3x3_wgrad_serial(xp, g, gw)
    gb = g.sum(axis=(0, 2, 3), dtype=g.dtype)
    return gx, gw, gb


def _conv1x1_grads(x, w, g):
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    w2 = w.reshape(cout, cin)
    gx = np.empty_like(x)
    gw2 = np.zeros((cout, cin), dtype=g.dtype)
    for img in range(n):
        gf = g[img].reshape(cout, h * wd)
        xf = x[img].reshape(cin, h * wd)
        gx[img] = (w2.T @ gf).reshape(cin, h, wd)
        gw2 += gf @ xf.T
    gb = g.sum(axis=(0, 2, 3), dtype=g.dtype)
    return gx, gw2.reshape(w.shape), gb


class Tape:
    """Linear record of a forward pass.

    Values are addressed by integer ids into ``vals``; every op method runs
    the forward kernel, appends a record and returns the output id. A tape is
    single-owner: record and run backward from one thread only.
    """

    def __init__(self):
        self.vals = []
        self.ops = []          # (kind, input ids, ctx, output id)
        self.params = {}       # value id -> Param
        self._param_ids = {}   # id(Param) -> value id
        self.tracked = set()   # leaf ids whose adjoint backward() returns

    def val(self, vid):
        return self.vals[vid]

    def _push(self, arr):
        self.vals.append(arr)
        return len(self.vals) - 1

    def _record(self, kind, inputs, ctx, arr):
        out = self._push(arr)
        self.ops.append((kind, inputs, ctx, out))
        return out

    # -- leaves ------------------------------------------------------------

    def leaf(self, arr, track_grad=False):
        vid = self._push(np.asarray(arr))
        if track_grad:
            self.tracked.add(vid)
        return vid

    def param(self, p):
        vid = self._param_ids.get(id(p))
        if vid is None:
            vid = self._push(p.value)
            self.params[vid] = p
            self._param_ids[id(p)] = vid
        return vid

    # -- ops ----------------------------------------------------------------

    def conv2d_3x3(self, x, w, b):
        out = tensor.conv2d_3x3(self.vals[x], self.vals[w], self.vals[b])
        return self._record("conv3x3", (x, w, b), None, out)

    def conv2d_3x3_relu(self, x, w, b):
        out = tensor.conv2d_3x3(self.vals[x], self.vals[w], self.vals[b],
                                fuse_relu=True)
        return self._record("conv3x3_relu", (x, w, b), None, out)

    def conv2d_1x1(self, x, w, b):
        out = tensor.conv2d_1x1(self.vals[x], self.vals[w], self.vals[b])
        return self._record("conv1x1", (x, w, b), None, out)

    def maxpool(self, x, k):
        out, idx = tensor.maxpool(self.vals[x], k, with_argmax=True)
        return self._record("maxpool", (x,), (k, idx), out)

    def upsample2x(self, x):
        return self._record("upsample", (x,), None,
                            tensor.upsample2x(self.vals[x]))

    def concat(self, a, b):
        out = tensor.concat_channels(self.vals[a], self.vals[b])
        return self._record("concat", (a, b), self.vals[a].shape[1], out)

    def relu(self, x):
        return self._record("relu", (x,), None, tensor.relu(self.vals[x]))

    def sigmoid(self, x):
        return self._record("sigmoid", (x,), None,
                            tensor.sigmoid(self.vals[x]))

    def add(self, a, b):
        va, vb = self.vals[a], self.vals[b]
        if va.shape != vb.shape:
            raise ShapeError(f"add: shape mismatch {va.shape} vs {vb.shape}")
        return self._record("add", (a, b), None, va + vb)

    def mul(self, a, b):
        va, vb = self.vals[a], self.vals[b]
        if va.shape != vb.shape:
            raise ShapeError(f"mul: shape mismatch {va.shape} vs {vb.shape}")
        return self._record("mul", (a, b), None, va * vb)

    def sum(self, x):
        v = self.vals[x]
        out = np.full((1, 1, 1, 1), v.sum(dtype=v.dtype), dtype=v.dtype)
        return self._record("sum", (x,), v.shape, out)

    def cbce(self, logits, y, beta):
        """Class-balanced BCE on logits, summed over pixels (see losses)."""
        z = self.vals[logits]
        if z.shape[:2] != (1, 1):
            raise ShapeError(f"cbce: expected a single-map logit tensor "
                             f"(1,1,H,W), got {z.shape}")
        if z.shape[2:] != y.shape:
            raise ShapeError(f"cbce: logits spatial {z.shape[2:]} vs label "
                             f"{y.shape}")
        ym = y.astype(bool)[None, None]
        # log p = -softplus(-z), log(1-p) = -softplus(z)
        pos = np.logaddexp(0.0, -z[ym]).sum()
        neg = np.logaddexp(0.0, z[~ym]).sum()
        val = beta * pos + (1.0 - beta) * neg
        out = np.full((1, 1, 1, 1), val, dtype=z.dtype)
        p = tensor.sigmoid(z)
        return self._record("cbce", (logits,), (ym, beta, p), out)


def _scalar(g):
    return g.reshape(-1)[0]


def backward(tape, loss_id):
    """Accumulate d(loss)/d(param) into every Param recorded on the tape.

    Returns a dict of adjoints for leaves created with track_grad=True.
    Values consumed by several operations receive the sum of their incoming
    adjoints.
    """
    if not 0 <= loss_id < len(tape.vals):
        raise AutogradError(f"backward: value id {loss_id} was never recorded")
    loss = tape.vals[loss_id]
    if loss.shape != (1, 1, 1, 1):
        raise AutogradError(f"backward: loss must be a 1x1x1x1 scalar, got "
                            f"shape {loss.shape}")

    adj = {loss_id: np.ones((1, 1, 1, 1), dtype=loss.dtype)}

    def accum(vid, arr):
        if vid in adj:
            adj[vid] += arr
        else:
            # own the buffer: later += must not leak into shared arrays
            adj[vid] = np.array(arr, copy=True)

    for kind, inputs, ctx, out in reversed(tape.ops):
        g = adj.pop(out, None)
        if g is None:
            continue  # not on a path to the loss
        if kind in ("conv3x3", "conv3x3_relu"):
            x, w, b = inputs
            if kind == "conv3x3_relu":
                g = g * (tape.vals[out] > 0)
            gx, gw, gb = _conv3x3_grads(tape.vals[x], tape.vals[w], g)
            accum(x, gx)
            accum(w, gw)
            accum(b, gb)
        elif kind == "conv1x1":
            x, w, b = inputs
            gx, gw, gb = _conv1x1_grads(tape.vals[x], tape.vals[w], g)
            accum(x, gx)
            accum(w, gw)
            accum(b, gb)
        elif kind == "maxpool":
            k, idx = ctx
            accum(inputs[0], tensor.maxpool_backward(g, idx, k))
        elif kind == "upsample":
            accum(inputs[0], tensor.upsample2x_backward(g))
        elif kind == "concat":
            ca = ctx
            accum(inputs[0], g[:, :ca])
            accum(inputs[1], g[:, ca:])
        elif kind == "relu":
            accum(inputs[0], g * (tape.vals[out] > 0))
        elif kind == "sigmoid":
            s = tape.vals[out]
            accum(inputs[0], g * s * (1.0 - s))
        elif kind == "add":
            accum(inputs[0], g)
            accum(inputs[1], g)
        elif kind == "mul":
            a, b = inputs
            accum(a, g * tape.vals[b])
            accum(b, g * tape.vals[a])
        elif kind == "sum":
            accum(inputs[0], np.full(ctx, _scalar(g), dtype=g.dtype))
        elif kind == "cbce":
            ym, beta, p = ctx
            wmap = np.where(ym, beta, 1.0 - beta)
            accum(inputs[0], _scalar(g) * wmap * (p - ym))
        else:  # pragma: no cover
            raise AutogradError(f"backward: unknown op kind {kind!r}")

    for vid, p in tape.params.items():
        if vid in adj:
            p.grad += adj[vid]

    return {vid: adj[vid] for vid in tape.tracked if vid in adj}


class GradCheckReport:
    """Per-parameter and overall analytic-vs-finite-difference errors."""

    def __init__(self):
        self.per_param = []   # (name, max abs err, max rel err)
        self.max_abs = 0.0
        self.max_rel = 0.0
        self.failed = False   # non-finite loss encountered

    def add(self, name, max_abs, max_rel):
        self.per_param.append((name, max_abs, max_rel))
        self.max_abs = max(self.max_abs, max_abs)
        self.max_rel = max(self.max_rel, max_rel)

    def __repr__(self):
        return (f"GradCheckReport(max_abs={self.max_abs:.3e}, "
                f"max_rel={self.max_rel:.3e}, failed={self.failed})")


def grad_check(builder, params, h=1e-5, seed=0, samples=50, refine=True):
    """Compare analytic gradients against central differences.

    ``builder`` reconstructs the loss graph from the params' current values
    and returns (tape, loss_id). Runs in float64 shadow mode: params are
    upcast for the check and restored afterwards. Per param at most
    ``samples`` coordinates are probed (all of them for small tensors).

    With ``refine`` a disagreeing probe is re-measured at h/8 and the closer
    estimate kept: a ReLU kink or pooling tie inside the probe interval is a
    step-size artifact that shrinks with h, while a genuine gradient error
    stays put.
    """
    saved = [(p, p.value, p.grad) for p in params]
    try:
        for p in params:
            p.value = p.value.astype(np.float64)
            p.grad = np.zeros_like(p.value)

        report = GradCheckReport()
        tape, loss_id = builder()
        if not np.isfinite(tape.val(loss_id)).all():
            report.failed = True
            return report
        backward(tape, loss_id)
        analytic = {id(p): p.grad.copy() for p in params}

        def central_diff(flat, c, step):
            orig = flat[c]
            flat[c] = orig + step
            t1, l1 = builder()
            flat[c] = orig - step
            t2, l2 = builder()
            flat[c] = orig
            fplus = float(t1.val(l1).reshape(-1)[0])
            fminus = float(t2.val(l2).reshape(-1)[0])
            if not (np.isfinite(fplus) and np.isfinite(fminus)):
                return None
            return (fplus - fminus) / (2.0 * step)

        rng = np.random.default_rng(seed)
        for p in params:
            flat = p.value.reshape(-1)
            k = min(samples, flat.size)
            coords = rng.choice(flat.size, size=k, replace=False)
            max_abs = max_rel = 0.0
            for c in coords:
                fd = central_diff(flat, c, h)
                if fd is None:
                    report.failed = True
                    return report
                ana = float(analytic[id(p)].reshape(-1)[c])
                abs_err = abs(ana - fd)
                if refine and abs_err > 1e-6:
                    fd2 = central_diff(flat, c, h / 8.0)
                    if fd2 is None:
                        report.failed = True
                        return report
                    if abs(ana - fd2) < abs_err:
                        fd, abs_err = fd2, abs(ana - fd2)
                rel_err = abs_err / max(abs(ana), abs(fd), 1e-8)
                max_abs = max(max_abs, abs_err)
                max_rel = max(max_rel, rel_err)
            report.add(p.name, max_abs, max_rel)
        return report
    finally:
        for p, value, grad in saved:
            p.value = value
            p.grad = grad
