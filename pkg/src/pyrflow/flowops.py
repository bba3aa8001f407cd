"""Flow-specific differentiable primitives.

Covers the matching and resampling machinery of the estimator: windowed
feature correlation, cost-volume pyramid aggregation, bilinear warping,
2x flow upsampling (bicubic or bilinear) and per-channel energy
normalization.  Everything is differentiable; each forward op has a
``*_backward`` companion returning analytic input gradients.

Conventions: flows are 2-channel ``(n, 2, h, w)`` fields, channel 0 the
horizontal displacement u (positive rightward) and channel 1 the vertical
displacement v (positive downward), in pixels of their own grid.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import _corrkern
from .tensor import ShapeError, Tensor4, as_array4


class FlowField(Tensor4):
    """A Tensor4 with exactly two channels: (u, v) pixel displacements."""

    def __init__(self, data, dtype=None):
        super().__init__(data, dtype=dtype)
        if self.data.shape[1] != 2:
            raise ShapeError(
                f"FlowField requires 2 channels (u, v), got shape {self.data.shape}"
            )

    @property
    def u(self):
        return self.data[:, 0]

    @property
    def v(self):
        return self.data[:, 1]


def as_flow_array(x, name: str = "flow") -> np.ndarray:
    a = as_array4(x, name)
    if a.shape[1] != 2:
        raise ShapeError(f"{name} must have 2 channels (u, v), got shape {a.shape}")
    return a


@dataclass
class CostVolume:
    """A correlation volume plus the metadata needed to aggregate pyramids.

    ``values`` has one channel per search offset, row-major over
    ``[-radius, radius]^2``, followed (after pyramid mapping) by the reduced
    channels inherited from the finer level.
    """

    values: np.ndarray
    radius: int
    level: int = 1

    def __post_init__(self):
        self.values = as_array4(self.values, "cost volume")
        d = 2 * self.radius + 1
        if self.values.shape[1] < d * d:
            raise ShapeError(
                f"cost volume with radius {self.radius} needs at least {d * d} "
                f"channels, got shape {self.values.shape}"
            )

    @property
    def channels(self) -> int:
        return self.values.shape[1]


def box_sum(v: np.ndarray, r: int) -> np.ndarray:
    """Sliding (2r+1)^2 window sum with zero padding; self-adjoint."""
    if r == 0:
        return v
    vp = np.pad(v, ((0, 0), (0, 0), (r, r), (r, r)))
    h, w = v.shape[2], v.shape[3]
    out = np.zeros_like(v)
    for dy in range(2 * r + 1):
        for dx in range(2 * r + 1):
            out += vp[:, :, dy:dy + h, dx:dx + w]
    return out


def correlate(f1, f2, radius: int, patch_radius: int = 0,
              parallel: bool = False) -> np.ndarray:
    """Windowed feature correlation between two maps of identical shape.

    Output channel ``(oy+n)*(2n+1) + (ox+n)`` holds, per pixel x, the
    channel-averaged dot product of the patch at x in ``f1`` with the patch
    at ``x + (ox, oy)`` in ``f2``; out-of-bounds reads contribute zero.
    """
    f1 = as_array4(f1, "correlate f1")
    f2 = as_array4(f2, "correlate f2")
    if f1.shape != f2.shape:
        raise ShapeError(
            f"correlate: feature shapes differ: {f1.shape} vs {f2.shape}"
        )
    if radius < 0 or patch_radius < 0:
        raise ValueError("correlate: radii must be >= 0")
    f1 = np.ascontiguousarray(f1)
    f2 = np.ascontiguousarray(f2)
    kern = _corrkern.corr_fwd_parallel if parallel else _corrkern.corr_fwd_serial
    vol = kern(f1, f2, radius)
    if patch_radius:
        vol = box_sum(vol, patch_radius)
    vol *= vol.dtype.type(1.0 / f1.shape[1])
    return vol


def correlate_backward(f1, f2, radius: int, grad_out: np.ndarray,
                       patch_radius: int = 0, parallel: bool = False):
    """Gradients of :func:`correlate` with respect to both feature maps."""
    f1 = np.ascontiguousarray(as_array4(f1, "correlate f1"))
    f2 = np.ascontiguousarray(as_array4(f2, "correlate f2"))
    g = as_array4(grad_out, "correlate grad_out")
    d = 2 * radius + 1
    expected = (f1.shape[0], d * d, f1.shape[2], f1.shape[3])
    if g.shape != expected:
        raise ShapeError(
            f"correlate_backward: grad_out shape {g.shape} does not match "
            f"volume shape {expected}"
        )
    g = g * g.dtype.type(1.0 / f1.shape[1])
    if patch_radius:
        g = box_sum(g, patch_radius)
    g = np.ascontiguousarray(g)
    kern = _corrkern.corr_bwd_parallel if parallel else _corrkern.corr_bwd_serial
    return kern(f1, f2, g, radius)


def correlate_single(f1, f2, radius: int = 4, patch_radius: int = 0,
                     level: int = 1, parallel: bool = False) -> CostVolume:
    """Single-level cost volume; see :func:`correlate` for the arithmetic."""
    vol = correlate(f1, f2, radius, patch_radius, parallel)
    return CostVolume(vol, radius=radius, level=level)


def reduced_channels(channels: int) -> int:
    """Channel count after the halving step (odd trailing channel kept)."""
    return (channels + 1) // 2


def downsample_cost_values(v: np.ndarray) -> np.ndarray:
    """Halve a volume spatially (2x2 mean) and across channels (pair means)."""
    from .tensor import avg_pool2

    v = as_array4(v, "cost volume")
    c = v.shape[1]
    if c < 2:
        raise ShapeError(f"downsample_cost needs >= 2 channels, got shape {v.shape}")
    pooled = avg_pool2(v)
    pairs = c // 2
    out = np.empty((pooled.shape[0], reduced_channels(c), pooled.shape[2],
                    pooled.shape[3]), dtype=pooled.dtype)
    out[:, :pairs] = 0.5 * (pooled[:, 0:2 * pairs:2] + pooled[:, 1:2 * pairs:2])
    if c % 2:
        out[:, -1] = pooled[:, -1]
    return out


def downsample_cost_values_backward(v: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    from .tensor import avg_pool2_backward

    v = as_array4(v, "cost volume")
    grad_out = as_array4(grad_out, "downsample_cost grad_out")
    c = v.shape[1]
    pairs = c // 2
    gp_shape = (v.shape[0], c, grad_out.shape[2], grad_out.shape[3])
    gp = np.empty(gp_shape, dtype=grad_out.dtype)
    gp[:, 0:2 * pairs:2] = 0.5 * grad_out[:, :pairs]
    gp[:, 1:2 * pairs:2] = 0.5 * grad_out[:, :pairs]
    if c % 2:
        gp[:, -1] = grad_out[:, -1]
    return avg_pool2_backward(v, gp)


def downsample_cost(c: CostVolume) -> CostVolume:
    """Pyramid step: spatial 2x2 mean plus adjacent-channel-pair reduction."""
    return CostVolume(downsample_cost_values(c.values), radius=c.radius, level=c.level)


def pyramid_correlation_map(c_single_k: CostVolume,
                            c_mapped_prev: CostVolume | None) -> CostVolume:
    """Aggregate the finer level's mapped volume into this level's volume.

    Level 1 is the base case and passes through unchanged; deeper levels
    concatenate their own single-level volume with the downsampled,
    channel-reduced mapped volume of the level above (finer) them.
    """
    if c_mapped_prev is None:
        return c_single_k
    prev_down = downsample_cost_values(c_mapped_prev.values)
    if prev_down.shape[2:] != c_single_k.values.shape[2:]:
        raise ShapeError(
            f"pyramid_correlation_map: downsampled previous volume has extents "
            f"{prev_down.shape[2:]} but level-{c_single_k.level} volume has "
            f"{c_single_k.values.shape[2:]}; the pyramid is mis-built"
        )
    merged = np.concatenate([c_single_k.values, prev_down], axis=1)
    return CostVolume(merged, radius=c_single_k.radius, level=c_single_k.level)


def _warp_geometry(f: np.ndarray, flow: np.ndarray):
    """Shared corner indices/weights for the bilinear warp and its backward."""
    n, c, h, w = f.shape
    gy, gx = np.meshgrid(np.arange(h, dtype=f.dtype), np.arange(w, dtype=f.dtype),
                         indexing="ij")
    px = gx[None] + flow[:, 0]  # (n, h, w) sample x-coordinate
    py = gy[None] + flow[:, 1]
    x0 = np.floor(px)
    y0 = np.floor(py)
    wx = px - x0
    wy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    corners = []
    for dy, dx, wgt in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx),
                        (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
        xc = x0 + dx
        yc = y0 + dy
        valid = (xc >= 0) & (xc < w) & (yc >= 0) & (yc < h)
        idx = np.clip(yc, 0, h - 1) * w + np.clip(xc, 0, w - 1)
        corners.append((idx, np.where(valid, wgt, 0.0)))
    return corners, (wx, wy, x0, y0)


def warp_bilinear(f, flow) -> np.ndarray:
    """Sample ``f`` at ``x + flow(x)`` with bilinear interpolation.

    Corner taps falling outside the frame contribute zero, so samples fully
    outside produce zero.  Differentiable with respect to both inputs.
    """
    f = as_array4(f, "warp input")
    flow = as_flow_array(flow, "warp flow")
    n, c, h, w = f.shape
    if flow.shape[0] != n or flow.shape[2:] != (h, w):
        raise ShapeError(
            f"warp_bilinear: feature shape {f.shape} and flow shape {flow.shape} "
            f"must share batch and spatial extents"
        )
    if not np.any(flow):
        return f.copy()
    corners, _ = _warp_geometry(f, flow)
    flat = f.reshape(n, c, h * w)
    out = np.zeros_like(f)
    for idx, wgt in corners:
        gathered = np.take_along_axis(flat, idx.reshape(n, 1, h * w), axis=2)
        out += gathered.reshape(n, c, h, w) * wgt[:, None]
    return out


def warp_bilinear_backward(f, flow, grad_out: np.ndarray, need_f: bool = True,
                           need_flow: bool = True):
    """Gradients of :func:`warp_bilinear` w.r.t. the features and the flow."""
    f = as_array4(f, "warp input")
    flow = as_flow_array(flow, "warp flow")
    grad_out = as_array4(grad_out, "warp grad_out")
    n, c, h, w = f.shape
    if grad_out.shape != f.shape:
        raise ShapeError(
            f"warp_bilinear_backward: grad_out shape {grad_out.shape} does not "
            f"match output shape {f.shape}"
        )
    corners, (wx, wy, x0, y0) = _warp_geometry(f, flow)

    grad_f = None
    if need_f:
        # scatter-add weighted grad_out at each corner tap
        offsets = (np.arange(n)[:, None] * c + np.arange(c)[None, :]) * (h * w)
        offsets = offsets[:, :, None].astype(np.int64)  # (n, c, 1)
        idx_all = []
        w_all = []
        for idx, wgt in corners:
            idx_all.append((idx.reshape(n, 1, h * w) + offsets).ravel())
            w_all.append((grad_out * wgt[:, None]).reshape(n, c, h * w).ravel())
        grad_f = np.bincount(np.concatenate(idx_all),
                             weights=np.concatenate(w_all),
                             minlength=n * c * h * w).reshape(f.shape).astype(f.dtype)

    grad_flow = None
    if need_flow:
        # derivative of the interpolant at the sample position
        flat = f.reshape(n, c, h * w)

        def gather(yc, xc):
            valid = (xc >= 0) & (xc < w) & (yc >= 0) & (yc < h)
            idx = np.clip(yc, 0, h - 1) * w + np.clip(xc, 0, w - 1)
            vals = np.take_along_axis(flat, idx.reshape(n, 1, h * w), axis=2)
            return vals.reshape(n, c, h, w) * valid[:, None]

        f00 = gather(y0, x0)
        f01 = gather(y0, x0 + 1)
        f10 = gather(y0 + 1, x0)
        f11 = gather(y0 + 1, x0 + 1)
        dx = (1 - wy)[:, None] * (f01 - f00) + wy[:, None] * (f11 - f10)
        dy = (1 - wx)[:, None] * (f10 - f00) + wx[:, None] * (f11 - f01)
        grad_flow = np.stack(((grad_out * dx).sum(axis=1),
                              (grad_out * dy).sum(axis=1)), axis=1).astype(flow.dtype)
    return grad_f, grad_flow


def _cubic_weights(t: float):
    # Catmull-Rom (a = -0.5) taps at offsets -1, 0, 1, 2 around floor(p)
    return (
        (-1, -0.5 * t ** 3 + t ** 2 - 0.5 * t),
        (0, 1.5 * t ** 3 - 2.5 * t ** 2 + 1.0),
        (1, -1.5 * t ** 3 + 2.0 * t ** 2 + 0.5 * t),
        (2, 0.5 * t ** 3 - 0.5 * t ** 2),
    )


def _linear_weights(t: float):
    return ((0, 1.0 - t), (1, t))


@functools.lru_cache(maxsize=None)
def _upsample_matrix(n_in: int, mode: str, dtype_name: str) -> np.ndarray:
    """Dense 2x-upsampling operator for one axis.

    Output sample o reads the continuous position (o + 0.5)/2 - 0.5.  Border
    taps use linear extrapolation, which keeps linear ramps exact.
    """
    if mode not in ("bicubic", "bilinear"):
        raise ValueError(f"unknown upsampling mode: {mode!r}")
    weight_fn = _cubic_weights if mode == "bicubic" else _linear_weights
    a = np.zeros((2 * n_in, n_in), dtype=DTYPE_BY_NAME[dtype_name])

    def add(row, idx, wgt):
        if n_in == 1:
            a[row, 0] += wgt
        elif idx < 0:
            a[row, 0] += wgt * (1 - idx)
            a[row, 1] += wgt * idx
        elif idx >= n_in:
            k = idx - (n_in - 1)
            a[row, n_in - 1] += wgt * (1 + k)
            a[row, n_in - 2] += wgt * (-k)
        else:
            a[row, idx] += wgt

    for o in range(2 * n_in):
        p = (o + 0.5) / 2.0 - 0.5
        base = math.floor(p)
        t = p - base
        for off, wgt in weight_fn(t):
            add(o, base + off, wgt)
    return a


DTYPE_BY_NAME = {"float32": np.float32, "float64": np.float64}


def upsample_flow(flow, mode: str = "bicubic") -> np.ndarray:
    """Double a flow field's extents and its displacement values."""
    flow = as_flow_array(flow, "upsample_flow input")
    n, c, h, w = flow.shape
    ay = _upsample_matrix(h, mode, flow.dtype.name)
    ax = _upsample_matrix(w, mode, flow.dtype.name)
    out = np.einsum("ph,nchw,qw->ncpq", ay, flow, ax, optimize=True)
    return 2.0 * out


def upsample_flow_backward(flow, grad_out: np.ndarray, mode: str = "bicubic") -> np.ndarray:
    flow = as_flow_array(flow, "upsample_flow input")
    grad_out = as_array4(grad_out, "upsample_flow grad_out")
    n, c, h, w = flow.shape
    if grad_out.shape != (n, c, 2 * h, 2 * w):
        raise ShapeError(
            f"upsample_flow_backward: grad_out shape {grad_out.shape} does not "
            f"match output shape {(n, c, 2 * h, 2 * w)}"
        )
    ay = _upsample_matrix(h, mode, flow.dtype.name)
    ax = _upsample_matrix(w, mode, flow.dtype.name)
    g = np.einsum("ph,ncpq,qw->nchw", ay, grad_out, ax, optimize=True)
    return 2.0 * g.astype(flow.dtype)


def channel_normalize(v, alpha: float = 0.99, beta: float = 0.5,
                      eps: float = 0.01) -> np.ndarray:
    """Scale each channel by the inverse of its spatial energy.

    ``out(x, c) = v(x, c) / (alpha * sum_x v(x, c)^2 + eps)^beta`` with the
    sum over all spatial positions of channel c, per batch item.
    """
    v = as_array4(v, "channel_normalize input")
    energy = (v * v).sum(axis=(2, 3), keepdims=True)
    denom = (alpha * energy + eps) ** beta
    return v / denom


def channel_normalize_backward(v, grad_out: np.ndarray, alpha: float = 0.99,
                               beta: float = 0.5, eps: float = 0.01) -> np.ndarray:
    v = as_array4(v, "channel_normalize input")
    grad_out = as_array4(grad_out, "channel_normalize grad_out")
    energy = (v * v).sum(axis=(2, 3), keepdims=True)
    base = alpha * energy + eps
    denom = base ** beta
    # d out(y)/d v(x) = delta/denom - 2*alpha*beta*v(y)*v(x) / base^(beta+1)
    dot = (grad_out * v).sum(axis=(2, 3), keepdims=True)
    return grad_out / denom - (2.0 * alpha * beta) * v * dot / base ** (beta + 1.0)
