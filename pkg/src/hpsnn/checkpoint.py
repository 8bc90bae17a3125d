"""Self-describing binary network checkpoints.

Layout (all integers and floats little-endian):

    magic       4 bytes  b"HPSN"
    version     u32      currently 1
    constants   f64 x5   dt, k_u, v_th, tau_w, a
    T           u32
    no_decay    u8
    n_layers    u32
    per layer:
        pre, post   u32 x2
        flags       u8   bit0 in_is_analog, bit1 plastic, bit2 has gp_mask,
                         bit3 has stdp params
        rule        u8   0 hebbian, 1 stdp, 2 label_clamp
        rho         u8   0 heaviside, 1 sigmoid
        w           dim-prefixed f64 array (u32 ndim, u32 dims..., data)
        alpha       dim-prefixed f64 array
        eta         dim-prefixed f64 array
        beta        dim-prefixed f64 array
        [gp_mask]   dim-prefixed u8 array, present iff flags bit2
        [stdp]      f64 x3 tau_s, A_pre, A_post, present iff flags bit3
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import Layer, LayerParams, MetaParams, Network, Rho, Rule, SimConstants
from .errors import CheckpointError

__all__ = ["save_network", "load_network", "MAGIC", "VERSION"]

MAGIC = b"HPSN"
VERSION = 1

_RULES = [Rule.HEBBIAN, Rule.STDP, Rule.LABEL_CLAMP]
_RHOS = [Rho.HEAVISIDE, Rho.SIGMOID]


def _pack_array(arr: np.ndarray, dtype: str) -> bytes:
    arr = np.ascontiguousarray(arr)
    parts = [struct.pack("<I", arr.ndim)]
    for d in arr.shape:
        parts.append(struct.pack("<I", d))
    parts.append(arr.astype(dtype).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def array(self, dtype: str, itemsize: int) -> np.ndarray:
        ndim = self.u32()
        if ndim > 8:
            raise CheckpointError(f"implausible array rank {ndim}")
        shape = tuple(self.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(count * itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def save_network(net: Network, path):
    from .plasticity import StdpParams  # noqa: F401  (type documented above)

    parts = [MAGIC, struct.pack("<I", VERSION)]
    c = net.c
    parts.append(struct.pack("<5d", c.dt, c.k_u, c.v_th, c.tau_w, c.a))
    parts.append(struct.pack("<I", c.T))
    parts.append(struct.pack("<B", int(c.no_decay)))
    parts.append(struct.pack("<I", len(net.layers)))
    for layer in net.layers:
        p, m = layer.params, layer.meta
        flags = (int(p.in_is_analog) | (int(layer.plastic) << 1)
                 | (int(p.gp_mask is not None) << 2)
                 | (int(layer.stdp is not None) << 3))
        parts.append(struct.pack("<II", layer.pre, layer.post))
        parts.append(struct.pack("<BBB", flags, _RULES.index(m.rule),
                                 _RHOS.index(m.rho)))
        parts.append(_pack_array(p.w, "<f8"))
        parts.append(_pack_array(m.alpha, "<f8"))
        parts.append(_pack_array(m.eta, "<f8"))
        parts.append(_pack_array(m.beta, "<f8"))
        if p.gp_mask is not None:
            parts.append(_pack_array(p.gp_mask.astype(np.uint8), "<u1"))
        if layer.stdp is not None:
            parts.append(struct.pack("<3d", layer.stdp.tau_s, layer.stdp.A_pre,
                                     layer.stdp.A_post))
    Path(path).write_bytes(b"".join(parts))


def load_network(path) -> Network:
    from .plasticity import StdpParams

    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    dt, k_u, v_th, tau_w, a = (r.f64() for _ in range(5))
    T = r.u32()
    no_decay = bool(r.u8())
    c = SimConstants(dt=dt, T=T, k_u=k_u, v_th=v_th, tau_w=tau_w, a=a,
                     no_decay=no_decay)
    n_layers = r.u32()
    layers = []
    for _ in range(n_layers):
        pre = r.u32()
        post = r.u32()
        flags = r.u8()
        rule = _RULES[r.u8()]
        rho = _RHOS[r.u8()]
        w = r.array("<f8", 8)
        alpha = r.array("<f8", 8)
        eta = r.array("<f8", 8)
        beta = r.array("<f8", 8)
        if w.shape != (post, pre):
            raise CheckpointError(f"w shape {w.shape} != ({post}, {pre})")
        mask = None
        if flags & 4:
            mask = r.array("<u1", 1).astype(bool)
        stdp = None
        if flags & 8:
            tau_s, A_pre, A_post = struct.unpack("<3d", r.take(24))
            stdp = StdpParams(tau_s=tau_s, A_pre=A_pre, A_post=A_post)
        params = LayerParams(w=w, gp_mask=mask, in_is_analog=bool(flags & 1))
        meta = MetaParams(alpha=alpha, eta=eta, beta=beta, rule=rule, rho=rho)
        layers.append(Layer(params=params, meta=meta, stdp=stdp,
                            plastic=bool(flags & 2)))
    if r.off != len(buf):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Network(layers, c)
