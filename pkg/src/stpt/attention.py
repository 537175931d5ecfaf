"""Local windowed and global spatio-temporal attention.

Both paths project tokens to Q/K/V with per-map linear layers, reduce the K/V
maps with strided depth-wise convolutions, and run scaled dot-product attention
per head. The local path (LSTA) partitions the map into non-overlapping
(t, h, w) windows and lets each window attend to the matching window of the
reduced map; the global path (GSTA) lets every token attend to the whole
reduced map. With the window set to the full map extents the two are the same
computation, which the tests exploit as an oracle.

Padding rules keep that equivalence exact: the map is zero-padded up to the
window grid before reduction, window extents must be divisible by the
reduction ratios (so the full-resolution and reduced window grids align), and
reduced positions whose stride cell starts beyond the original extent are
masked out of the softmax. For in-range positions, reducing the padded map is
identical to reducing the original one because the conv's implicit zero
padding and the explicit grid padding coincide.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import ConfigError
from .tensor import ClipTensor, Conv3DWeights, LinearWeights, linear, softmax

Extents = tuple[int, int, int]


@dataclasses.dataclass(frozen=True)
class WindowSpec:
    """Window extents in tokens along (T, H, W)."""

    extents: Extents

    def __post_init__(self):
        if any(e < 1 for e in self.extents):
            raise ConfigError(f"window extents must be positive, got {self.extents}")


@dataclasses.dataclass(frozen=True)
class ReductionSpec:
    """Depth-wise strided reduction of the K and V maps.

    Two independent kernels (one for K, one for V), kernel 3 per axis, stride
    equal to the reduction ratios, padding 1, so the reduced extent is
    ceil(extent / ratio).
    """

    ratios: Extents
    conv_k: Conv3DWeights
    conv_v: Conv3DWeights

    def __post_init__(self):
        if any(r < 1 for r in self.ratios):
            raise ConfigError(f"reduction ratios must be positive, got {self.ratios}")
        for name, conv in (("conv_k", self.conv_k), ("conv_v", self.conv_v)):
            if conv.kernel != (3, 3, 3) or conv.padding != (1, 1, 1):
                raise ConfigError(f"{name} must have kernel 3 and padding 1 per axis")
            if conv.stride != self.ratios:
                raise ConfigError(f"{name} stride {conv.stride} must equal ratios {self.ratios}")
            if conv.groups != conv.in_channels or conv.out_channels != conv.in_channels:
                raise ConfigError(f"{name} must be depth-wise with equal in/out channels")


@dataclasses.dataclass(frozen=True)
class AttentionParams:
    channels: int
    heads: int
    wq: LinearWeights
    wk: LinearWeights
    wv: LinearWeights
    wo: LinearWeights
    kind: str  # "local" | "global"
    reduction: ReductionSpec
    window: WindowSpec | None = None

    def __post_init__(self):
        if self.kind not in ("local", "global"):
            raise ConfigError(f"attention kind must be local or global, got {self.kind!r}")
        if self.channels % self.heads != 0:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.kind == "local":
            if self.window is None:
                raise ConfigError("local attention requires a window")
            for e, r in zip(self.window.extents, self.reduction.ratios):
                if e % r != 0:
                    raise ConfigError(
                        f"window extent {e} must be a multiple of reduction ratio {r}"
                    )
        for name, w in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            if w.in_channels != self.channels or w.out_channels != self.channels:
                raise ConfigError(f"{name} must map {self.channels} -> {self.channels} channels")


@dataclasses.dataclass(frozen=True)
class PartitionRecord:
    """Geometry of a window partition, enough to invert it."""

    orig: Extents
    padded: Extents
    counts: Extents
    extents: Extents

    @property
    def num_windows(self) -> int:
        nt, nh, nw = self.counts
        return nt * nh * nw

    @property
    def window_tokens(self) -> int:
        t, h, w = self.extents
        return t * h * w


def partition_windows(x: np.ndarray, extents: Extents) -> tuple[np.ndarray, PartitionRecord]:
    """Split a (T, H, W, C) map into (num_windows, window_tokens, C).

    Windows tile the map in T-major order and tokens within a window are
    likewise T-major. Extents that do not divide the map are handled by zero
    padding at the high end of each axis; the record keeps both geometries so
    merge_windows can strip the padding again.
    """
    t, h, w, c = x.shape
    et, eh, ew = extents
    nt, nh, nw = math.ceil(t / et), math.ceil(h / eh), math.ceil(w / ew)
    pt, ph, pw = nt * et, nh * eh, nw * ew
    if (pt, ph, pw) != (t, h, w):
        padded = np.zeros((pt, ph, pw, c), dtype=x.dtype)
        padded[:t, :h, :w, :] = x
    else:
        padded = x
    win = padded.reshape(nt, et, nh, eh, nw, ew, c)
    win = win.transpose(0, 2, 4, 1, 3, 5, 6).reshape(nt * nh * nw, et * eh * ew, c)
    rec = PartitionRecord(orig=(t, h, w), padded=(pt, ph, pw), counts=(nt, nh, nw), extents=extents)
    return win, rec


def merge_windows(windows: np.ndarray, rec: PartitionRecord) -> np.ndarray:
    """Inverse of partition_windows; drops the zero padding."""
    nt, nh, nw = rec.counts
    et, eh, ew = rec.extents
    c = windows.shape[-1]
    x = windows.reshape(nt, nh, nw, et, eh, ew, c)
    x = x.transpose(0, 3, 1, 4, 2, 5, 6).reshape(rec.padded + (c,))
    t, h, w = rec.orig
    return x[:t, :h, :w, :]


def reduce_kv(kmap: ClipTensor, vmap: ClipTensor, spec: ReductionSpec) -> tuple[ClipTensor, ClipTensor]:
    """Reduce the K and V maps; output extents are ceil(extent / ratio)."""
    from .tensor import conv3d

    return conv3d(kmap, spec.conv_k), conv3d(vmap, spec.conv_v)


def _split_heads(tokens: np.ndarray, heads: int) -> np.ndarray:
    """(N, C) -> (heads, N, C // heads), channel axis split into contiguous blocks."""
    n, c = tokens.shape
    return tokens.reshape(n, heads, c // heads).transpose(1, 0, 2)


def _merge_heads(per_head: np.ndarray) -> np.ndarray:
    h, n, d = per_head.shape
    return per_head.transpose(1, 0, 2).reshape(n, h * d)


def _project_qkv(x: ClipTensor, p: AttentionParams):
    tokens = x.tokens()
    q = linear(tokens, p.wq)
    k = linear(tokens, p.wk)
    v = linear(tokens, p.wv)
    dims = x.dims
    shape = dims + (p.channels,)
    return q.reshape(shape), k.reshape(shape), v.reshape(shape)


def _reduced_valid_mask(orig: Extents, padded: Extents, ratios: Extents) -> np.ndarray:
    """Bool map over the reduced padded grid; True where the stride cell starts in range."""
    rt, rh, rw = ratios
    jt = np.arange(padded[0] // rt) * rt < orig[0]
    jh = np.arange(padded[1] // rh) * rh < orig[1]
    jw = np.arange(padded[2] // rw) * rw < orig[2]
    return (jt[:, None, None] & jh[None, :, None] & jw[None, None, :])


def lsta_forward(x: ClipTensor, p: AttentionParams) -> ClipTensor:
    """Windowed attention against the matching windows of the reduced K/V maps."""
    if p.kind != "local":
        raise ConfigError("lsta_forward requires local attention params")
    t, h, w = x.dims
    ext = p.window.extents
    ratios = p.reduction.ratios
    q, k, v = _project_qkv(x, p)

    qw, rec = partition_windows(q, ext)
    # Reduce the padded K/V maps so the reduced grid tiles into exactly one
    # reduced window per full-resolution window.
    pad_dims = rec.padded
    if pad_dims != (t, h, w):
        kp = np.zeros(pad_dims + (p.channels,), dtype=k.dtype)
        kp[:t, :h, :w] = k
        vp = np.zeros(pad_dims + (p.channels,), dtype=v.dtype)
        vp[:t, :h, :w] = v
    else:
        kp, vp = k, v
    kred, vred = reduce_kv(ClipTensor(kp), ClipTensor(vp), p.reduction)
    red_ext = tuple(e // r for e, r in zip(ext, ratios))
    kw, krec = partition_windows(kred.data, red_ext)
    vw, _ = partition_windows(vred.data, red_ext)
    if krec.counts != rec.counts:
        raise ConfigError(
            f"window grids misaligned: {rec.counts} full-resolution vs {krec.counts} reduced"
        )
    valid = _reduced_valid_mask((t, h, w), rec.padded, ratios)
    maskw, _ = partition_windows(valid[..., None], red_ext)
    keymask = maskw[..., 0]  # (num_windows, reduced_window_tokens)

    heads, dh = p.heads, p.channels // p.heads
    nwin = rec.num_windows
    qh = qw.reshape(nwin, rec.window_tokens, heads, dh).transpose(0, 2, 1, 3).astype(np.float64)
    kh = kw.reshape(nwin, krec.window_tokens, heads, dh).transpose(0, 2, 1, 3).astype(np.float64)
    vh = vw.reshape(nwin, krec.window_tokens, heads, dh).transpose(0, 2, 1, 3).astype(np.float64)
    scores = (qh * dh ** -0.5) @ kh.transpose(0, 1, 3, 2)
    attn = softmax(scores, mask=keymask[:, None, None, :])
    out = attn @ vh  # (nwin, heads, window_tokens, dh)
    out = out.transpose(0, 2, 1, 3).reshape(nwin, rec.window_tokens, p.channels)
    merged = merge_windows(out, rec).astype(x.data.dtype)
    y = linear(merged.reshape(-1, p.channels), p.wo)
    return ClipTensor(y.reshape(t, h, w, p.channels))


def gsta_forward(x: ClipTensor, p: AttentionParams) -> ClipTensor:
    """Every token attends to the globally reduced K/V maps."""
    if p.kind != "global":
        raise ConfigError("gsta_forward requires global attention params")
    t, h, w = x.dims
    q, k, v = _project_qkv(x, p)
    kred, vred = reduce_kv(ClipTensor(k), ClipTensor(v), p.reduction)

    heads, dh = p.heads, p.channels // p.heads
    qh = _split_heads(q.reshape(-1, p.channels), heads).astype(np.float64)
    kh = _split_heads(kred.tokens(), heads).astype(np.float64)
    vh = _split_heads(vred.tokens(), heads).astype(np.float64)
    scores = (qh * dh ** -0.5) @ kh.transpose(0, 2, 1)
    attn = softmax(scores)
    out = _merge_heads(attn @ vh).astype(x.data.dtype)
    y = linear(out, p.wo)
    return ClipTensor(y.reshape(t, h, w, p.channels))
