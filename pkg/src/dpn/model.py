"""The detail-preserving block and the full-resolution network built from it.

A DP-Block fuses three branches (full, half and quarter resolution) by
cascaded upsample-and-concatenate and emits features at the input resolution:

    x1 = relu(k1 * X)
    x2 = relu(k2 * maxpool(X, 2))
    x3 = relu(k3 * maxpool(X, 4))
    x4 = relu(k4 * concat(x2, up2(x3)))
    x5 = relu(k5 * concat(x1, up2(x4)))
    Y  = relu(k6 * concat(x5, X))

The network is a 3x3 stem followed by num_blocks DP-Blocks with no
down-sampling in between, plus 1x1 prediction heads after the auxiliary
positions and the final block.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor
from .autograd import Param
from .tensor import ShapeError

VALID_BRANCHES = ("os1", "os2", "os4")


@dataclass
class DpnConfig:
    """Architecture knobs; defaults reproduce the reference configuration."""
    c0: int = 16
    c1: int = 8
    c2: int = 8
    stem_channels: int = 32
    num_blocks: int = 8
    branches: tuple = VALID_BRANCHES
    aux_losses: bool = True
    aux_positions: tuple = (2, 4, 6)

    def validate(self):
        br = tuple(self.branches)
        for b in br:
            if b not in VALID_BRANCHES:
                raise ValueError(f"unknown branch {b!r}; valid: os1,os2,os4")
        if "os1" not in br:
            raise ValueError("the full-resolution branch os1 is mandatory")
        if "os4" in br and "os2" not in br:
            raise ValueError("branch os4 requires os2 (cascaded fusion)")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.aux_losses:
            for p in self.aux_positions:
                if not 1 <= p < self.num_blocks:
                    raise ValueError(f"aux position {p} outside [1, "
                                     f"{self.num_blocks})")
        if min(self.c0, self.c1, self.c2, self.stem_channels) < 1:
            raise ValueError("filter widths must be positive")

    @property
    def head_positions(self):
        pos = list(self.aux_positions) if self.aux_losses else []
        return tuple(sorted(set(pos) | {self.num_blocks}))


class ConvParams:
    """Weight + bias pair of one convolution."""

    def __init__(self, name, cout, cin, ksize):
        self.weight = Param(f"{name}.weight",
                            np.zeros((cout, cin, ksize, ksize), np.float32))
        self.bias = Param(f"{name}.bias", np.zeros(cout, np.float32))

    @property
    def params(self):
        return [self.weight, self.bias]


class DpBlockParams:
    """The k1..k6 convolutions of one DP-Block.

    Branch ablation removes convolutions: without os4 there is no k3 and k4
    reads only x2; with os1 alone only k1 and k6 remain (x5 = x1).
    """

    def __init__(self, name, cin, cfg):
        os2 = "os2" in cfg.branches
        os4 = "os4" in cfg.branches
        self.k1 = ConvParams(f"{name}.k1", cfg.c0, cin, 3)
        self.k2 = ConvParams(f"{name}.k2", cfg.c1, cin, 3) if os2 else None
        self.k3 = ConvParams(f"{name}.k3", cfg.c2, cin, 3) if os4 else None
        if os2:
            k4_in = cfg.c1 + cfg.c2 if os4 else cfg.c1
            self.k4 = ConvParams(f"{name}.k4", cfg.c1, k4_in, 3)
            self.k5 = ConvParams(f"{name}.k5", cfg.c0, cfg.c0 + cfg.c1, 3)
        else:
            self.k4 = None
            self.k5 = None
        self.k6 = ConvParams(f"{name}.k6", cfg.c0, cfg.c0 + cin, 3)

    @property
    def convs(self):
        return [k for k in (self.k1, self.k2, self.k3, self.k4, self.k5,
                            self.k6) if k is not None]


class DpnModel:
    def __init__(self, config=None):
        cfg = config or DpnConfig()
        cfg.validate()
        self.config = cfg
        self.stem = ConvParams("stem", cfg.stem_channels, 3, 3)
        self.blocks = []
        cin = cfg.stem_channels
        for i in range(1, cfg.num_blocks + 1):
            self.blocks.append(DpBlockParams(f"block{i}", cin, cfg))
            cin = cfg.c0
        self.heads = {pos: ConvParams(f"head{pos}", 1, cfg.c0, 1)
                      for pos in cfg.head_positions}

    def named_params(self):
        out = []
        for conv in [self.stem] + [k for b in self.blocks for k in b.convs] \
                + [self.heads[p] for p in sorted(self.heads)]:
            out.extend((q.name, q) for q in conv.params)
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    def astype(self, dtype):
        """Cast all parameter state in place (float64 shadow mode)."""
        for p in self.params():
            p.value = p.value.astype(dtype)
            p.grad = p.grad.astype(dtype)
            p.m = p.m.astype(dtype)
            p.v = p.v.astype(dtype)
        return self


class EagerOps:
    """Forward evaluation without recording: arrays in, arrays out."""

    def input(self, arr):
        return arr

    def param(self, p):
        return p.value

    def conv3x3(self, x, w, b):
        return tensor.conv2d_3x3(x, w, b)

    def conv3x3_relu(self, x, w, b):
        return tensor.conv2d_3x3(x, w, b, fuse_relu=True)

    def conv1x1(self, x, w, b):
        return tensor.conv2d_1x1(x, w, b)

    def maxpool(self, x, k):
        return tensor.maxpool(x, k)

    def upsample2x(self, x):
        return tensor.upsample2x(x)

    def concat(self, a, b):
        return tensor.concat_channels(a, b)

    def relu(self, x):
        return tensor.relu(x)


class TapeOps:
    """Forward evaluation recorded on a tape for backward()."""

    def __init__(self, tape):
        self.tape = tape

    def input(self, arr, track_grad=False):
        return self.tape.leaf(arr, track_grad=track_grad)

    def param(self, p):
        return self.tape.param(p)

    def conv3x3(self, x, w, b):
        return self.tape.conv2d_3x3(x, w, b)

    def conv3x3_relu(self, x, w, b):
        return self.tape.conv2d_3x3_relu(x, w, b)

    def conv1x1(self, x, w, b):
        return self.tape.conv2d_1x1(x, w, b)

    def maxpool(self, x, k):
        return self.tape.maxpool(x, k)

    def upsample2x(self, x):
        return self.tape.upsample2x(x)

    def concat(self, a, b):
        return self.tape.concat(a, b)

    def relu(self, x):
        return self.tape.relu(x)


def _conv_relu(ops, x, cp):
    return ops.conv3x3_relu(x, ops.param(cp.weight), ops.param(cp.bias))


def dp_block_graph(ops, x, blk, branches):
    os2 = "os2" in branches
    os4 = "os4" in branches
    x1 = _conv_relu(ops, x, blk.k1)
    if os2:
        x2 = _conv_relu(ops, ops.maxpool(x, 2), blk.k2)
        if os4:
            x3 = _conv_relu(ops, ops.maxpool(x, 4), blk.k3)
            x4 = _conv_relu(ops, ops.concat(x2, ops.upsample2x(x3)), blk.k4)
        else:
            x4 = _conv_relu(ops, x2, blk.k4)
        x5 = _conv_relu(ops, ops.concat(x1, ops.upsample2x(x4)), blk.k5)
    else:
        x5 = x1
    return _conv_relu(ops, ops.concat(x5, x), blk.k6)


def dp_block_forward(x, blk, branches=VALID_BRANCHES):
    """Run one DP-Block eagerly on an (N, Cin, H, W) array.

    H and W must be divisible by 4 (the quarter-resolution branch).
    """
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise ShapeError(f"dp_block_forward: H={x.shape[2]}, W={x.shape[3]} "
                         f"must be divisible by 4")
    return dp_block_graph(EagerOps(), x, blk, branches)


def dpn_graph(ops, x, model):
    """Stem + blocks + heads; returns one logit map handle per head."""
    cfg = model.config
    h = _conv_relu(ops, x, model.stem)
    logits = []
    for i, blk in enumerate(model.blocks, start=1):
        h = dp_block_graph(ops, h, blk, cfg.branches)
        if i in model.heads:
            hp = model.heads[i]
            logits.append(ops.conv1x1(h, ops.param(hp.weight),
                                      ops.param(hp.bias)))
    return logits


def dpn_forward(image, model):
    """Eager whole-image forward pass.

    image: (1, 3, H, W) float in [0, 1] with H, W divisible by 4. Returns the
    list of head logit maps (each (1, 1, H, W)); the caller crops padding.
    """
    if image.shape[1] != model.stem.weight.value.shape[1]:
        raise ShapeError(f"dpn_forward: expected "
                         f"{model.stem.weight.value.shape[1]} input "
                         f"channels, got {image.shape[1]}")
    if image.shape[2] % 4 or image.shape[3] % 4:
        raise ShapeError(f"dpn_forward: spatial dims {image.shape[2:]} not "
                         f"divisible by 4 (use pad_to_multiple)")
    return dpn_graph(EagerOps(), image, model)


def dpn_record(tape, image, model, track_input_grad=False):
    """Forward pass recorded on ``tape`` for training / gradient probing."""
    ops = TapeOps(tape)
    x = ops.input(image, track_grad=track_input_grad)
    return x, dpn_graph(ops, x, model)


def count_parameters(model):
    """Per-layer parameter table with group subtotals.

    Returns (rows, groups, total): rows are (name, shape, count); groups map
    'stem' / 'block1'.. / 'heads' to their totals. The fixed bilinear
    upsampling contributes nothing.
    """
    rows = []
    groups = {}
    for name, p in model.named_params():
        rows.append((name, tuple(p.value.shape), p.size))
        group = name.split(".")[0]
        if group.startswith("head"):
            group = "heads"
        groups[group] = groups.get(group, 0) + p.size
    total = sum(c for _, _, c in rows)
    return rows, groups, total


def init_xavier(model, seed=0):
    """Uniform Xavier/Glorot init, fan counted as kernel_area * channels;
    biases zero. Deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    for name, p in model.named_params():
        if name.endswith(".bias"):
            p.value[...] = 0
            continue
        cout, cin, kh, kw = p.value.shape
        fan_in = kh * kw * cin
        fan_out = kh * kw * cout
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        p.value[...] = rng.uniform(-bound, bound,
                                   size=p.value.shape).astype(p.value.dtype)
    return model
