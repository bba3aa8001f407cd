"""Dense rank-4 tensors and the differentiable primitives built on them.

Every value flowing through the network is a dense ``(batch, channel,
height, width)`` float array in row-major order.  Each operation here comes
as a ``forward`` / ``*_backward`` pair where the backward function returns
the analytic gradients used by the reverse-mode graph in :mod:`pyrflow.graph`.

Two precisions are supported: float32 (training) and float64 (gradient
checking).  Ops preserve the dtype of their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPES = {"float32": np.float32, "float64": np.float64}


class ShapeError(ValueError):
    """Raised when an operation rejects inputs with incompatible shapes."""


def as_array4(x, name: str = "input") -> np.ndarray:
    """Coerce ``x`` (Tensor4 or ndarray) to a rank-4 float array."""
    if isinstance(x, Tensor4):
        return x.data
    a = np.asarray(x)
    if a.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (n, c, h, w), got shape {a.shape}")
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    return a


class Tensor4:
    """A validated ``(n, c, h, w)`` array of real scalars.

    Thin container used at module boundaries (samples, flows, checkpoints);
    the ops below work directly on the underlying ndarray.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        a = np.asarray(data, dtype=dtype)
        if a.ndim != 4:
            raise ShapeError(f"Tensor4 requires rank 4 (n, c, h, w), got shape {a.shape}")
        if any(s < 1 for s in a.shape):
            raise ShapeError(f"Tensor4 extents must all be >= 1, got shape {a.shape}")
        if a.dtype not in (np.float32, np.float64):
            a = a.astype(np.float64)
        self.data = a

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def batch(self):
        return self.data.shape[0]

    @property
    def channels(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[2]

    @property
    def width(self):
        return self.data.shape[3]

    def astype(self, dtype) -> "Tensor4":
        return Tensor4(self.data.astype(dtype))

    def copy(self) -> "Tensor4":
        return Tensor4(self.data.copy())

    def all_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __repr__(self):
        return f"Tensor4(shape={self.data.shape}, dtype={self.data.dtype})"


@dataclass
class GradPair:
    """A parameter value together with its accumulated loss gradient.

    ``grad`` always mirrors ``value``'s shape and is zero-filled before each
    backward pass.
    """

    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.asarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(
                f"grad shape {self.grad.shape} must equal value shape {self.value.shape}"
            )

    def zero_grad(self):
        self.grad[...] = 0


@dataclass
class ConvParams:
    """Convolution parameters.

    ``kernel`` is ``(out_c, in_c, kh, kw)`` for :func:`conv2d` and
    ``(in_c, out_c, kh, kw)`` for :func:`conv_transpose2d` (the adjoint
    orientation).  ``bias`` has one entry per output channel.
    """

    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel)
        self.bias = np.asarray(self.bias)
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be rank 4, got shape {self.kernel.shape}")
        if self.bias.ndim != 1:
            raise ShapeError(f"bias must be rank 1, got shape {self.bias.shape}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError(
                f"invalid conv geometry: stride={self.stride} "
                f"dilation={self.dilation} padding={self.padding}"
            )


def conv_output_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _gather_patches(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
                    oh: int, ow: int) -> np.ndarray:
    """im2col in GEMM-ready layout: (n, oh, ow, c, kh, kw) from padded input."""
    n, c = xp.shape[:2]
    patches = np.empty((n, oh, ow, c, kh, kw), dtype=xp.dtype)
    for ky in range(kh):
        y0 = ky * dilation
        for kx in range(kw):
            x0 = kx * dilation
            patches[:, :, :, :, ky, kx] = xp[:, :, y0:y0 + oh * stride:stride,
                                             x0:x0 + ow * stride:stride] \
                .transpose(0, 2, 3, 1)
    return patches


def conv2d_cached(x, p: ConvParams):
    """conv2d returning (output, im2col patches) for backward reuse."""
    x = as_array4(x, "conv2d input")
    oc, ic, kh, kw = p.kernel.shape
    n, c, h, w = x.shape
    if c != ic:
        raise ShapeError(
            f"conv2d: input has {c} channels (shape {x.shape}) but kernel expects "
            f"{ic} (shape {p.kernel.shape})"
        )
    oh = conv_output_size(h, kh, p.stride, p.dilation, p.padding)
    ow = conv_output_size(w, kw, p.stride, p.dilation, p.padding)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: non-positive output extents ({oh}, {ow}) for input {x.shape} "
            f"with kernel {p.kernel.shape}, stride {p.stride}, dilation {p.dilation}, "
            f"padding {p.padding}"
        )
    if p.padding:
        x = np.pad(x, ((0, 0), (0, 0), (p.padding, p.padding), (p.padding, p.padding)))
    patches = _gather_patches(x, kh, kw, p.stride, p.dilation, oh, ow)
    cols = patches.reshape(n * oh * ow, ic * kh * kw)
    kmat = p.kernel.reshape(oc, ic * kh * kw).astype(cols.dtype, copy=False)
    out = (cols @ kmat.T).reshape(n, oh, ow, oc)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += p.bias.astype(out.dtype)[None, :, None, None]
    return out, patches


def conv2d(x, p: ConvParams) -> np.ndarray:
    """Cross-correlation style 2-D convolution over (n, c, h, w).

    Output spatial size is ``floor((s + 2*pad - dil*(k-1) - 1)/stride) + 1``
    per dimension.
    """
    return conv2d_cached(x, p)[0]


def conv2d_backward(x, p: ConvParams, grad_out: np.ndarray, patches=None,
                    need_x: bool = True, need_kernel: bool = True):
    """Analytic gradients of :func:`conv2d`: (grad_x, grad_kernel, grad_bias).

    ``patches`` may pass the im2col buffer from :func:`conv2d_cached` to skip
    regathering; ``need_x`` / ``need_kernel`` skip gradients a frozen phase
    will discard (returned as None).
    """
    x = as_array4(x, "conv2d input")
    grad_out = as_array4(grad_out, "conv2d grad_out")
    oc, ic, kh, kw = p.kernel.shape
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, p.stride, p.dilation, p.padding)
    ow = conv_output_size(w, kw, p.stride, p.dilation, p.padding)
    if grad_out.shape != (n, oc, oh, ow):
        raise ShapeError(
            f"conv2d_backward: grad_out shape {grad_out.shape} does not match "
            f"output shape {(n, oc, oh, ow)}"
        )
    gmat = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)) \
        .reshape(n * oh * ow, oc)
    grad_bias = grad_out.sum(axis=(0, 2, 3))

    grad_kernel = None
    if need_kernel:
        if patches is None:
            xp = x
            if p.padding:
                xp = np.pad(x, ((0, 0), (0, 0), (p.padding, p.padding),
                                (p.padding, p.padding)))
            patches = _gather_patches(xp, kh, kw, p.stride, p.dilation, oh, ow)
        cols = patches.reshape(n * oh * ow, ic * kh * kw)
        grad_kernel = (gmat.T @ cols).reshape(oc, ic, kh, kw)

    gx = None
    if need_x:
        kmat = p.kernel.reshape(oc, ic * kh * kw).astype(grad_out.dtype, copy=False)
        gcols = (gmat @ kmat).reshape(n, oh, ow, ic, kh, kw)
        gxp = np.zeros((n, ic, h + 2 * p.padding, w + 2 * p.padding), dtype=x.dtype)
        for ky in range(kh):
            y0 = ky * p.dilation
            for kx in range(kw):
                x0 = kx * p.dilation
                gxp[:, :, y0:y0 + oh * p.stride:p.stride,
                    x0:x0 + ow * p.stride:p.stride] += \
                    gcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
        if p.padding:
            gx = gxp[:, :, p.padding:p.padding + h, p.padding:p.padding + w]
        else:
            gx = gxp
        gx = np.ascontiguousarray(gx)
    return gx, grad_kernel, grad_bias


def conv_transpose2d(x, p: ConvParams) -> np.ndarray:
    """Transposed convolution (upsampling); kernel layout (in_c, out_c, kh, kw).

    With stride 2, a 4x4 kernel and padding 1 the spatial extents double
    exactly.
    """
    x = as_array4(x, "conv_transpose2d input")
    ic, oc, kh, kw = p.kernel.shape
    n, c, h, w = x.shape
    if c != ic:
        raise ShapeError(
            f"conv_transpose2d: input has {c} channels (shape {x.shape}) but kernel "
            f"expects {ic} (shape {p.kernel.shape})"
        )
    s, d, pad = p.stride, p.dilation, p.padding
    hf = (h - 1) * s + d * (kh - 1) + 1
    wf = (w - 1) * s + d * (kw - 1) + 1
    oh, ow = hf - 2 * pad, wf - 2 * pad
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv_transpose2d: non-positive output extents ({oh}, {ow}) for input "
            f"{x.shape} with kernel {p.kernel.shape}, stride {s}, padding {pad}"
        )
    full = np.zeros((n, oc, hf, wf), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            # (n, ic, h, w) x (ic, oc) -> (n, oc, h, w), scattered at stride s
            tap = np.tensordot(x, p.kernel[:, :, ky, kx], axes=([1], [0]))
            full[:, :, ky * d:ky * d + h * s:s,
                 kx * d:kx * d + w * s:s] += tap.transpose(0, 3, 1, 2)
    out = full[:, :, pad:pad + oh, pad:pad + ow] if pad else full
    out = np.ascontiguousarray(out)
    out += p.bias.astype(out.dtype)[None, :, None, None]
    return out


def conv_transpose2d_backward(x, p: ConvParams, grad_out: np.ndarray,
                              need_x: bool = True, need_kernel: bool = True):
    """Analytic gradients of :func:`conv_transpose2d`."""
    x = as_array4(x, "conv_transpose2d input")
    grad_out = as_array4(grad_out, "conv_transpose2d grad_out")
    ic, oc, kh, kw = p.kernel.shape
    n, c, h, w = x.shape
    s, d, pad = p.stride, p.dilation, p.padding
    oh = (h - 1) * s + d * (kh - 1) + 1 - 2 * pad
    ow = (w - 1) * s + d * (kw - 1) + 1 - 2 * pad
    if grad_out.shape != (n, oc, oh, ow):
        raise ShapeError(
            f"conv_transpose2d_backward: grad_out shape {grad_out.shape} does not "
            f"match output shape {(n, oc, oh, ow)}"
        )
    gfull = grad_out
    if pad:
        gfull = np.pad(grad_out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_x = np.zeros_like(x) if need_x else None
    grad_kernel = np.zeros_like(p.kernel) if need_kernel else None
    for ky in range(kh):
        for kx in range(kw):
            gtap = gfull[:, :, ky * d:ky * d + h * s:s, kx * d:kx * d + w * s:s]
            if need_x:
                # grad wrt x accumulates kernel-weighted grad_out taps
                grad_x += np.tensordot(gtap, p.kernel[:, :, ky, kx],
                                       axes=([1], [1])).transpose(0, 3, 1, 2)
            if need_kernel:
                # (n, ic, h, w) x (n, oc, h, w) -> (ic, oc)
                grad_kernel[:, :, ky, kx] = np.tensordot(
                    x, gtap, axes=([0, 2, 3], [0, 2, 3]))
    return grad_x, grad_kernel, grad_bias


def _replicate_pad_to_even(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    return x


def avg_pool2(x) -> np.ndarray:
    """2x2 non-overlapping mean pool; odd extents are edge-replicated first."""
    x = as_array4(x, "avg_pool2 input")
    x = _replicate_pad_to_even(x)
    return 0.25 * (x[:, :, ::2, ::2] + x[:, :, 1::2, ::2]
                   + x[:, :, ::2, 1::2] + x[:, :, 1::2, 1::2])


def avg_pool2_backward(x, grad_out: np.ndarray) -> np.ndarray:
    """Each pooled gradient cell spreads g/4 back to its 4 source cells."""
    x = as_array4(x, "avg_pool2 input")
    grad_out = as_array4(grad_out, "avg_pool2 grad_out")
    n, c, h, w = x.shape
    hp, wp = h + h % 2, w + w % 2
    if grad_out.shape != (n, c, hp // 2, wp // 2):
        raise ShapeError(
            f"avg_pool2_backward: grad_out shape {grad_out.shape} does not match "
            f"pooled shape {(n, c, hp // 2, wp // 2)}"
        )
    g = 0.25 * grad_out
    gp = np.empty((n, c, hp, wp), dtype=grad_out.dtype)
    gp[:, :, ::2, ::2] = g
    gp[:, :, 1::2, ::2] = g
    gp[:, :, ::2, 1::2] = g
    gp[:, :, 1::2, 1::2] = g
    # fold replicated row/column back onto the true edge
    if hp != h:
        gp[:, :, h - 1, :] += gp[:, :, h, :]
    if wp != w:
        gp[:, :, :, w - 1] += gp[:, :, :, w]
    return np.ascontiguousarray(gp[:, :, :h, :w])


def leaky_relu(x, slope: float = 0.1) -> np.ndarray:
    """Elementwise max(x, slope * x) with slope in (0, 1)."""
    x = as_array4(x, "leaky_relu input")
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def leaky_relu_backward(x, grad_out: np.ndarray, slope: float = 0.1) -> np.ndarray:
    x = as_array4(x, "leaky_relu input")
    grad_out = as_array4(grad_out, "leaky_relu grad_out")
    return np.where(x >= 0, grad_out, grad_out * grad_out.dtype.type(slope))


def concat_channels(xs) -> np.ndarray:
    """Concatenate along the channel axis; inputs must agree on (n, h, w)."""
    arrs = [as_array4(x, f"concat input {i}") for i, x in enumerate(xs)]
    if not arrs:
        raise ShapeError("concat_channels: need at least one input")
    ref = arrs[0]
    for i, a in enumerate(arrs[1:], start=1):
        if (a.shape[0], a.shape[2], a.shape[3]) != (ref.shape[0], ref.shape[2], ref.shape[3]):
            raise ShapeError(
                f"concat_channels: input 0 has shape {ref.shape} but input {i} has "
                f"shape {a.shape} (batch/height/width must match)"
            )
    return np.concatenate(arrs, axis=1)


def concat_channels_backward(xs, grad_out: np.ndarray):
    """Split grad_out back at the recorded channel boundaries."""
    grad_out = as_array4(grad_out, "concat grad_out")
    grads = []
    c0 = 0
    for x in xs:
        c = as_array4(x).shape[1]
        grads.append(np.ascontiguousarray(grad_out[:, c0:c0 + c]))
        c0 += c
    if c0 != grad_out.shape[1]:
        raise ShapeError(
            f"concat_channels_backward: grad_out has {grad_out.shape[1]} channels, "
            f"inputs total {c0}"
        )
    return grads
