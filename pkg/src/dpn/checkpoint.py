"""Binary weight checkpoints.

Layout (little-endian):
    magic "DPNW" | version u32 (=1) | tensor count u32
    per tensor: name length u16 | name (UTF-8) | rank u8 | dims u32 x rank
                | payload f32 x prod(dims)
    optional:   tag "ADAM" | step counter u64 | m and v tensors for every
                parameter, in order, same per-tensor encoding, named
                "<param>.m" / "<param>.v"

The model architecture is reconstructed from the tensor names and shapes, so
a checkpoint is self-describing.
"""

import struct

import numpy as np

from .model import DpnConfig, DpnModel

MAGIC = b"DPNW"
ADAM_TAG = b"ADAM"
FORMAT_VERSION = 1
_MAX_RANK = 4
_MAX_ELEMS = 1 << 31


class CheckpointError(ValueError):
    pass


def _write_tensor(fh, name, arr):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated file: expected {n} more bytes "
                                  f"for {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def exhausted(self):
        return self.pos >= len(self.data)


def _read_tensor(r):
    (nlen,) = r.unpack("<H", "tensor name length")
    name = r.take(nlen, "tensor name").decode("utf-8")
    (rank,) = r.unpack("<B", f"rank of {name}")
    if rank == 0 or rank > _MAX_RANK:
        raise CheckpointError(f"dimension overflow: tensor {name} has rank "
                              f"{rank}")
    dims = r.unpack(f"<{rank}I", f"dims of {name}")
    total = int(np.prod(dims, dtype=np.int64))
    if total <= 0 or total > _MAX_ELEMS:
        raise CheckpointError(f"dimension overflow: tensor {name} claims "
                              f"{total} elements")
    raw = r.take(4 * total, f"payload of {name}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    return name, arr


def save_checkpoint(model, path, step=None):
    """Write all parameters; with ``step`` also the ADAM state."""
    named = model.named_params()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(named)))
        for name, p in named:
            _write_tensor(fh, name, p.value)
        if step is not None:
            fh.write(ADAM_TAG)
            fh.write(struct.pack("<Q", step))
            for name, p in named:
                _write_tensor(fh, f"{name}.m", p.m)
                _write_tensor(fh, f"{name}.v", p.v)


def _config_from_tensors(tensors):
    if "stem.weight" not in tensors:
        raise CheckpointError("checkpoint holds no stem.weight tensor")
    stem_channels = tensors["stem.weight"].shape[0]
    blocks = set()
    heads = set()
    for name in tensors:
        if name.startswith("block"):
            blocks.add(int(name.split(".")[0][len("block"):]))
        elif name.startswith("head"):
            heads.add(int(name.split(".")[0][len("head"):]))
    if not blocks or not heads:
        raise CheckpointError("checkpoint is missing block or head tensors")
    num_blocks = max(blocks)
    branches = ["os1"]
    c0 = tensors["block1.k1.weight"].shape[0]
    c1 = DpnConfig.c1
    c2 = DpnConfig.c2
    if "block1.k2.weight" in tensors:
        branches.append("os2")
        c1 = tensors["block1.k2.weight"].shape[0]
    if "block1.k3.weight" in tensors:
        branches.append("os4")
        c2 = tensors["block1.k3.weight"].shape[0]
    final = {num_blocks}
    return DpnConfig(c0=c0, c1=c1, c2=c2, stem_channels=stem_channels,
                     num_blocks=num_blocks, branches=tuple(branches),
                     aux_losses=len(heads) > 1,
                     aux_positions=tuple(sorted(heads - final)))


def load_checkpoint(path):
    """Rebuild the model from a checkpoint. Returns (model, step or None)."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a DPNW checkpoint")
    version, count = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version} "
                              f"(expected {FORMAT_VERSION})")
    tensors = dict(_read_tensor(r) for _ in range(count))

    step = None
    adam = {}
    if not r.exhausted:
        if r.take(4, "section tag") != ADAM_TAG:
            raise CheckpointError("unknown trailing section tag")
        (step,) = r.unpack("<Q", "ADAM step counter")
        adam = dict(_read_tensor(r) for _ in range(2 * count))

    model = DpnModel(_config_from_tensors(tensors))
    named = model.named_params()
    expect = {name for name, _ in named}
    if expect != set(tensors):
        missing = sorted(expect - set(tensors))[:3]
        extra = sorted(set(tensors) - expect)[:3]
        raise CheckpointError(f"checkpoint tensors do not match the inferred "
                              f"architecture (missing {missing}, "
                              f"unexpected {extra})")
    for name, p in named:
        arr = tensors[name]
        if arr.shape != p.value.shape:
            raise CheckpointError(f"tensor {name}: shape {arr.shape} does "
                                  f"not match model {p.value.shape}")
        p.value[...] = arr
        if adam:
            p.m[...] = adam[f"{name}.m"]
            p.v[...] = adam[f"{name}.v"]
    return model, step
