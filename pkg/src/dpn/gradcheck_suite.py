"""Finite-difference verification cases for every differentiable path.

Each case builds a small loss graph from fresh parameters and runs
grad_check in float64 shadow mode. Kernel inputs are drawn with magnitudes
bounded away from zero so the ReLU kink and pooling ties cannot sit inside
the finite-difference step.
"""

import numpy as np

from .autograd import Param, Tape, grad_check
from .losses import balance_weight, total_objective
from .model import DpnConfig, DpnModel, dpn_record, init_xavier

KERNEL_TOL = 1e-4
MODEL_TOL = 1e-3


def _signed_uniform(rng, shape, lo=0.1, hi=1.0):
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return (sign * rng.uniform(lo, hi, size=shape)).astype(np.float32)


def kernel_cases(seed):
    """(name, builder, params) triples for every op kind."""
    rng = np.random.default_rng(seed)
    x = Param("x", _signed_uniform(rng, (1, 2, 8, 8)))
    w = Param("w", _signed_uniform(rng, (3, 2, 3, 3), lo=0.05, hi=0.5))
    b = Param("b", _signed_uniform(rng, (3,), lo=0.05, hi=0.5))
    w1 = Param("w1", _signed_uniform(rng, (3, 2, 1, 1), lo=0.05, hi=0.5))
    a2 = Param("a2", _signed_uniform(rng, (1, 2, 8, 8)))
    b3 = Param("b3", _signed_uniform(rng, (1, 3, 8, 8)))
    c5 = Param("c5", _signed_uniform(rng, (1, 5, 8, 8)))
    xl = Param("xl", _signed_uniform(rng, (1, 3, 8, 8)))
    wl = Param("wl", _signed_uniform(rng, (1, 3, 3, 3), lo=0.05, hi=0.5))
    bl = Param("bl", _signed_uniform(rng, (1,), lo=0.05, hi=0.5))
    y = rng.random((8, 8)) < 0.3
    if not y.any() or y.all():
        y[0, 0], y[-1, -1] = True, False
    beta = balance_weight(y)

    def conv():
        t = Tape()
        return t, t.sum(t.conv2d_3x3(t.param(x), t.param(w), t.param(b)))

    def conv1():
        t = Tape()
        return t, t.sum(t.conv2d_1x1(t.param(x), t.param(w1), t.param(b)))

    def pool2():
        t = Tape()
        return t, t.sum(t.maxpool(t.param(x), 2))

    def pool4():
        t = Tape()
        return t, t.sum(t.maxpool(t.param(x), 4))

    def upsample():
        t = Tape()
        return t, t.sum(t.upsample2x(t.param(x)))

    def concat():
        t = Tape()
        cat = t.concat(t.param(a2), t.param(b3))
        return t, t.sum(t.mul(cat, t.param(c5)))

    def relu():
        t = Tape()
        return t, t.sum(t.relu(t.param(x)))

    def sigmoid():
        t = Tape()
        return t, t.sum(t.sigmoid(t.param(x)))

    def add():
        t = Tape()
        return t, t.sum(t.sigmoid(t.add(t.param(x), t.param(a2))))

    def mul():
        t = Tape()
        return t, t.sum(t.mul(t.param(x), t.param(a2)))

    def spatial_sum():
        t = Tape()
        return t, t.sum(t.param(x))

    def cbce():
        t = Tape()
        logits = t.conv2d_3x3(t.param(xl), t.param(wl), t.param(bl))
        return t, t.cbce(logits, y, beta)

    return [
        ("conv2d_3x3", conv, [x, w, b]),
        ("conv2d_1x1", conv1, [x, w1, b]),
        ("maxpool k=2", pool2, [x]),
        ("maxpool k=4", pool4, [x]),
        ("upsample2x", upsample, [x]),
        ("concat", concat, [a2, b3, c5]),
        ("relu", relu, [x]),
        ("sigmoid", sigmoid, [x]),
        ("add", add, [x, a2]),
        ("mul", mul, [x, a2]),
        ("spatial sum", spatial_sum, [x]),
        ("class-balanced bce", cbce, [xl, wl, bl]),
    ]


def model_case(seed):
    """Full default network, all heads, on a 1x3x16x16 input.

    Biases are drawn nonzero: with the exact zeros of a fresh Xavier init,
    fully-clipped ReLU windows produce pre-activations exactly at the kink,
    where the subgradient convention and one-sided finite differences
    legitimately disagree by a step-independent amount.
    """
    rng = np.random.default_rng(100_000 + seed)
    model = DpnModel(DpnConfig())
    init_xavier(model, seed=seed)
    for name, p in model.named_params():
        if name.endswith(".bias"):
            p.value[...] = _signed_uniform(rng, p.value.shape,
                                           lo=0.05, hi=0.2)
    image = rng.uniform(0.0, 1.0, size=(1, 3, 16, 16))
    label = rng.random((16, 16)) < 0.3
    if not label.any() or label.all():
        label[0, 0], label[-1, -1] = True, False

    def builder():
        tape = Tape()
        _, heads = dpn_record(tape, image, model)
        loss_id, _ = total_objective(tape, heads, label, lam=0.0)
        return tape, loss_id

    return builder, model.params()


def check_kernels(seeds=20, tol=KERNEL_TOL):
    """Yields (name, worst max-abs error over seeds, passed)."""
    worst = {}
    for seed in range(seeds):
        for name, builder, params in kernel_cases(seed):
            rep = grad_check(builder, params, seed=seed)
            err = np.inf if rep.failed else rep.max_abs
            worst[name] = max(worst.get(name, 0.0), err)
    for name, err in worst.items():
        yield name, err, err <= tol


def check_model(seeds=1, tol=MODEL_TOL, samples=50, h=1e-7):
    """Deep composition check; h below the kernel default because kink
    crossings accumulate over 8 blocks of ReLUs under the sum-form loss."""
    worst = 0.0
    for seed in range(seeds):
        builder, params = model_case(seed)
        rep = grad_check(builder, params, seed=seed, samples=samples, h=h)
        worst = max(worst, np.inf if rep.failed else rep.max_abs)
    return worst, worst <= tol


def run_suite(kernel_seeds=20, model_seeds=1):
    """(printable line, passed) pairs for the CLI and acceptance gate."""
    for name, err, ok in check_kernels(seeds=kernel_seeds):
        status = "PASS" if ok else "FAIL"
        yield (f"{status}  {name:<22} max abs err {err:.3e} "
               f"(tol {KERNEL_TOL:.0e}, {kernel_seeds} seeds)", ok)
    if model_seeds > 0:
        err, ok = check_model(seeds=model_seeds)
        status = "PASS" if ok else "FAIL"
        yield (f"{status}  {'full network (4 heads)':<22} max abs err "
               f"{err:.3e} (tol {MODEL_TOL:.0e}, {model_seeds} seeds)", ok)
