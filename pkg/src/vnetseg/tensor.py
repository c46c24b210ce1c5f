"""Dense 5-axis tensors, a reverse-mode tape, and the differentiable layers.

Tensors carry (batch, channel, depth, height, width) float64 arrays. Ops
optionally record a backward closure on a ``Tape``; calling ``backward`` on
a scalar output walks the tape in reverse and accumulates gradients into
``Parameter.grad`` (and into ``Tensor5.grad`` for requires-grad leaves).

Convolutions run a vectorized per-kernel-offset matmul path. A naive
triple-loop reference (``conv3d_reference``) pins the semantics; the fast
path must agree with it to 1e-10 relative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.fft as _fft


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class GraphError(RuntimeError):
    """Tape misuse: backward before forward, or a root foreign to the tape."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: output contains non-finite values")
    return arr


class Tensor5:
    """5-axis activation tensor with an optional gradient slot."""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 5:
            raise ShapeError(f"Tensor5 expects a 5-axis array, got ndim={arr.ndim}")
        _check_finite(arr, "Tensor5")
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self):
        return f"Tensor5(shape={self.values.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """Trainable array (any rank) with an accumulating gradient."""

    __slots__ = ("values", "grad", "name")

    def __init__(self, values, name: str = ""):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.values.shape})"


@dataclass
class ConvParams:
    """Convolution weights. ``kernel`` is (Cout, Cin, k, k, k) for forward
    and strided convolutions; the transposed convolution interprets it as
    (Cin, Cout, k, k, k). Kernels are cubic and stride is 1 or 2."""

    kernel: Parameter
    bias: Parameter
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        k = self.kernel.values
        if k.ndim != 5:
            raise ShapeError(f"kernel must be 5-axis, got ndim={k.ndim}")
        kd, kh, kw = k.shape[2:]
        if not (kd == kh == kw):
            raise ShapeError(f"kernel must be cubic, got {k.shape[2:]}")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")


@dataclass
class PReLUParams:
    """One learnable negative-side slope per channel."""

    slope: Parameter

    def __post_init__(self):
        if self.slope.values.ndim != 1:
            raise ShapeError("PReLU slope must be a per-channel vector")


class Tape:
    """Ordered record of op nodes; execution order is the topological order."""

    def __init__(self):
        self._nodes: list[Callable[[], None]] = []
        self._produced: list[Tensor5] = []
        self._produced_ids: set[int] = set()

    def _record(self, out: Tensor5, backward_fn: Callable[[], None]) -> None:
        self._nodes.append(backward_fn)
        self._produced.append(out)
        self._produced_ids.add(id(out))

    def __len__(self) -> int:
        return len(self._nodes)


def _wants_grad(t: Tensor5, tape: Tape) -> bool:
    return t.requires_grad or id(t) in tape._produced_ids


def _accum(t: Tensor5, g: np.ndarray, own: bool = False) -> None:
    # own=True donates a freshly allocated array, skipping the first copy
    if t.grad is None:
        t.grad = g if own else g.copy()
    else:
        t.grad += g


def backward(tape: Tape, root: Tensor5, seed: np.ndarray | None = None) -> None:
    """Reverse sweep from ``root``. Parameter gradients accumulate across
    calls; intermediate tensor gradients are reset each call.

    ``seed`` overrides the default all-ones seed and permits non-scalar
    roots (used internally to inject loss gradients mid-graph).
    """
    if tape is None or len(tape) == 0:
        raise GraphError("backward before forward: tape holds no operations")
    if id(root) not in tape._produced_ids:
        raise GraphError("backward root was not produced on this tape")
    if seed is None:
        if root.values.size != 1:
            raise GraphError(
                f"backward root must be scalar, got shape {root.values.shape}"
            )
        seed = np.ones_like(root.values)
    for t in tape._produced:
        t.grad = None
    root.grad = np.array(seed, dtype=np.float64).reshape(root.values.shape)
    for fn in reversed(tape._nodes):
        fn()


# ---------------------------------------------------------------------------
# convolution arithmetic


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _pad_spatial(xv: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return xv
    return np.pad(xv, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


# Stride-1 convolutions over volumes with at least this many padded voxels
# take the FFT route; below it, transform overhead beats the gather loop.
_FFT_MIN_VOXELS = 4096

# The FFT route materializes per-channel-pair kernel spectra; past this many
# complex elements the working set would thrash, so large convolutions fall
# back to the gather loop.
_FFT_MAX_SPECTRUM = 6_000_000


def _use_fft(stride: int, k: int, padded_shape, n: int, cin: int, cout: int) -> bool:
    if stride != 1 or k < 3:
        return False
    voxels = int(np.prod(padded_shape))
    if voxels < _FFT_MIN_VOXELS:
        return False
    half = voxels // padded_shape[-1] * (padded_shape[-1] // 2 + 1)
    return max(cout * cin, n * cin, n * cout) * half <= _FFT_MAX_SPECTRUM


def _mix_spectra(a, b):
    """Per-frequency channel contraction: out[n, f, j] = sum_i a[n, i, f] * b[j, i, f]."""
    n, ci, f = a.shape
    co = b.shape[0]
    lhs = np.moveaxis(a, 1, 2)[:, :, np.newaxis, :]        # (n, f, 1, ci)
    rhs = np.moveaxis(b, (0, 1), (2, 1))[np.newaxis]       # (1, f, ci, co)
    return np.matmul(lhs, rhs)[:, :, 0, :]                 # (n, f, co)


def _kernel_spectrum(kv, pshape):
    cout, cin, kd, kh, kw = kv.shape
    buf = np.zeros((cout, cin) + pshape)
    buf[:, :, :kd, :kh, :kw] = kv
    return _fft.rfftn(buf, axes=(2, 3, 4))


def _conv_forward_fft(xv, kv, bv, pad):
    """Same result as the gather path, via padded real FFTs.

    With padded extent P and kernel k, the circular cross-correlation equals
    the linear one on all P-k+1 output positions, so no extra padding is
    needed beyond the convolution's own.
    """
    n, cin, d, h, w = xv.shape
    cout, _, kd, kh, kw = kv.shape
    xp = _pad_spatial(xv, pad)
    pshape = xp.shape[2:]
    od, oh, ow = d + 2 * pad - kd + 1, h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    xf = _fft.rfftn(xp, axes=(2, 3, 4))
    kf = _kernel_spectrum(kv, pshape)
    fshape = xf.shape[2:]
    nf = int(np.prod(fshape))
    of = _mix_spectra(xf.reshape(n, cin, nf), kf.conj().reshape(cout, cin, nf))
    of = np.moveaxis(of, 1, 2).reshape((n, cout) + fshape)
    out = _fft.irfftn(of, s=pshape, axes=(2, 3, 4))[:, :, :od, :oh, :ow]
    out = np.ascontiguousarray(out)
    out += bv.reshape(1, cout, 1, 1, 1)
    return out, {"xf": xf, "kf": kf, "pshape": pshape}


def _conv_backward_fft(dout, xv, kv, pad, need_dx, cache):
    n, cin, d, h, w = xv.shape
    cout, _, kd, kh, kw = kv.shape
    pshape = cache["pshape"]
    xf, kf = cache["xf"], cache["kf"]
    fshape = xf.shape[2:]
    nf = int(np.prod(fshape))
    gf = _fft.rfftn(dout, s=pshape, axes=(2, 3, 4))
    gf2 = gf.reshape(n, cout, nf)

    # dK at lag k is the cross-correlation of the padded input with the
    # upstream gradient, summed over the batch; lags 0..k-1 are exactly the
    # alias-free ones.
    dkf = _mix_spectra(
        np.conj(np.moveaxis(gf2, 0, 1)),                  # (cout, n, f)
        np.moveaxis(xf.reshape(n, cin, nf), 0, 1),        # (cin, n, f)
    )                                                     # (cout, f, cin)
    dkf = np.moveaxis(dkf, 1, 2).reshape((cout, cin) + fshape)
    dk_full = _fft.irfftn(dkf, s=pshape, axes=(2, 3, 4))
    dk = np.ascontiguousarray(dk_full[:, :, :kd, :kh, :kw])

    dx_full = None
    if need_dx:
        dxf = _mix_spectra(gf2, np.moveaxis(kf.reshape(cout, cin, nf), 0, 1))
        dxf = np.moveaxis(dxf, 1, 2).reshape((n, cin) + fshape)
        dxp = _fft.irfftn(dxf, s=pshape, axes=(2, 3, 4))
        dx_full = np.ascontiguousarray(
            dxp[:, :, pad : pad + d, pad : pad + h, pad : pad + w]
        )
    return dx_full, dk, dout.sum(axis=(0, 2, 3, 4))


def _conv_forward(xv, kv, bv, stride, pad):
    n, cin, d, h, w = xv.shape
    cout, _, kd, kh, kw = kv.shape
    if _use_fft(stride, kd, (d + 2 * pad, h + 2 * pad, w + 2 * pad), n, cin, cout):
        return _conv_forward_fft(xv, kv, bv, pad)
    xp = _pad_spatial(xv, pad)
    od = conv_output_size(d, kd, stride, pad)
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    out = np.zeros((n, cout, od * oh * ow))
    patch_buf = np.empty((n, cin, od, oh, ow))
    gemm_buf = np.empty_like(out)
    for dz in range(kd):
        for dy in range(kh):
            for dx in range(kw):
                np.copyto(patch_buf, xp[
                    :, :,
                    dz : dz + stride * od : stride,
                    dy : dy + stride * oh : stride,
                    dx : dx + stride * ow : stride,
                ])
                w_off = kv[:, :, dz, dy, dx]  # (cout, cin)
                np.matmul(w_off, patch_buf.reshape(n, cin, -1), out=gemm_buf)
                out += gemm_buf
    out = out.reshape(n, cout, od, oh, ow)
    out += bv.reshape(1, cout, 1, 1, 1)
    return out, None


def _conv_backward(dout, xv, kv, stride, pad, need_dx, cache=None):
    n, cin, d, h, w = xv.shape
    cout, _, kd, kh, kw = kv.shape
    if cache is not None:
        return _conv_backward_fft(dout, xv, kv, pad, need_dx, cache)
    od, oh, ow = dout.shape[2:]
    dout2 = dout.reshape(n, cout, -1)
    xp = _pad_spatial(xv, pad)
    dxp = np.zeros_like(xp) if need_dx else None
    dk = np.zeros_like(kv)
    patch_buf = np.empty((n, cin, od, oh, ow))
    dx_buf = np.empty((n, cin, od * oh * ow)) if need_dx else None
    for dz in range(kd):
        for dy in range(kh):
            for dx in range(kw):
                sl = (
                    slice(None), slice(None),
                    slice(dz, dz + stride * od, stride),
                    slice(dy, dy + stride * oh, stride),
                    slice(dx, dx + stride * ow, stride),
                )
                np.copyto(patch_buf, xp[sl])
                patch2 = patch_buf.reshape(n, cin, -1)
                w_off = kv[:, :, dz, dy, dx]
                dk[:, :, dz, dy, dx] = np.tensordot(dout2, patch2, axes=([0, 2], [0, 2]))
                if need_dx:
                    np.matmul(w_off.T, dout2, out=dx_buf)
                    dxp[sl] += dx_buf.reshape(n, cin, od, oh, ow)
    dbias = dout.sum(axis=(0, 2, 3, 4))
    if need_dx and pad:
        dx_full = dxp[:, :, pad : pad + d, pad : pad + h, pad : pad + w]
    else:
        dx_full = dxp
    return dx_full, dk, dbias


def conv3d_reference(xv, kv, bv, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct triple-loop convolution; the semantic reference for conv3d.

    Slow by construction — intended for small tensors in tests only.
    """
    n, cin, d, h, w = xv.shape
    cout, _, kd, kh, kw = kv.shape
    od = conv_output_size(d, kd, stride, padding)
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    out = np.zeros((n, cout, od, oh, ow))
    for b in range(n):
        for co in range(cout):
            for oz in range(od):
                for oy in range(oh):
                    for ox in range(ow):
                        acc = 0.0
                        for ci in range(cin):
                            for dz in range(kd):
                                z = oz * stride + dz - padding
                                if z < 0 or z >= d:
                                    continue
                                for dy in range(kh):
                                    y = oy * stride + dy - padding
                                    if y < 0 or y >= h:
                                        continue
                                    for dx in range(kw):
                                        x = ox * stride + dx - padding
                                        if x < 0 or x >= w:
                                            continue
                                        acc += xv[b, ci, z, y, x] * kv[co, ci, dz, dy, dx]
                        out[b, co, oz, oy, ox] = acc + bv[co]
    return out


# ---------------------------------------------------------------------------
# differentiable ops


def conv3d(x: Tensor5, p: ConvParams, tape: Tape | None = None) -> Tensor5:
    """Volumetric convolution; output size floor((S + 2p - k)/s) + 1 per axis."""
    kv = p.kernel.values
    cout, cin, kd, _, _ = kv.shape
    if x.shape[1] != cin:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels, kernel expects {cin}")
    if min(x.shape[2:]) + 2 * p.padding < kd:
        raise ShapeError(
            f"conv3d: spatial dims {x.shape[2:]} too small for kernel {kd} at padding {p.padding}"
        )
    out_v, cache = _conv_forward(x.values, kv, p.bias.values, p.stride, p.padding)
    out = Tensor5(_check_finite(out_v, "conv3d"))
    if tape is not None:
        need_dx = _wants_grad(x, tape)

        def _bwd(x=x, p=p, out=out, stride=p.stride, pad=p.padding,
                 need_dx=need_dx, cache=cache):
            if out.grad is None:
                return
            dx, dk, db = _conv_backward(
                out.grad, x.values, p.kernel.values, stride, pad, need_dx, cache
            )
            p.kernel.accumulate(dk)
            p.bias.accumulate(db)
            if need_dx:
                _accum(x, dx, own=True)

        tape._record(out, _bwd)
    return out


def down_conv(x: Tensor5, p: ConvParams, tape: Tape | None = None) -> Tensor5:
    """Resolution-halving convolution: 2-wide kernel, stride 2, no padding."""
    kd = p.kernel.values.shape[2]
    if kd != 2 or p.stride != 2 or p.padding != 0:
        raise ShapeError("down_conv requires kernel 2, stride 2, padding 0")
    if any(s % 2 for s in x.shape[2:]):
        raise ShapeError(f"down_conv requires even spatial dims, got {x.shape[2:]}")
    return conv3d(x, p, tape)


def up_conv(x: Tensor5, p: ConvParams, tape: Tape | None = None) -> Tensor5:
    """Transposed convolution: each input voxel projects to a k-wide output
    region; with k=2, s=2 every spatial dim exactly doubles. The kernel is
    (Cin, Cout, k, k, k), making this the exact adjoint of ``down_conv``
    under a shared kernel (and zero bias)."""
    kv = p.kernel.values
    cin, cout, kd, kh, kw = kv.shape
    if x.shape[1] != cin:
        raise ShapeError(f"up_conv: input has {x.shape[1]} channels, kernel expects {cin}")
    s = p.stride
    n, _, d, h, w = x.shape
    od, oh, ow = ((d - 1) * s + kd, (h - 1) * s + kh, (w - 1) * s + kw)
    x2 = x.values.reshape(n, cin, -1)
    out_v = np.zeros((n, cout, od, oh, ow))
    for dz in range(kd):
        for dy in range(kh):
            for dx in range(kw):
                w_off = kv[:, :, dz, dy, dx]  # (cin, cout)
                contrib = (w_off.T @ x2).reshape(n, cout, d, h, w)
                out_v[:, :, dz : dz + s * d : s, dy : dy + s * h : s, dx : dx + s * w : s] += contrib
    out_v += p.bias.values.reshape(1, cout, 1, 1, 1)
    out = Tensor5(_check_finite(out_v, "up_conv"))
    if tape is not None:
        need_dx = _wants_grad(x, tape)

        def _bwd(x=x, p=p, out=out, s=s, need_dx=need_dx):
            if out.grad is None:
                return
            kv = p.kernel.values
            cin, cout, kd, kh, kw = kv.shape
            n, _, d, h, w = x.shape
            x2 = x.values.reshape(n, cin, -1)
            dk = np.zeros_like(kv)
            dx_acc = np.zeros_like(x.values) if need_dx else None
            for dz in range(kd):
                for dy in range(kh):
                    for dx_ in range(kw):
                        g_slice = out.grad[
                            :, :, dz : dz + s * d : s, dy : dy + s * h : s, dx_ : dx_ + s * w : s
                        ].reshape(n, cout, -1)
                        dk[:, :, dz, dy, dx_] = np.tensordot(x2, g_slice, axes=([0, 2], [0, 2]))
                        if need_dx:
                            w_off = kv[:, :, dz, dy, dx_]
                            dx_acc += (w_off @ g_slice).reshape(n, cin, d, h, w)
            p.kernel.accumulate(dk)
            p.bias.accumulate(out.grad.sum(axis=(0, 2, 3, 4)))
            if need_dx:
                _accum(x, dx_acc, own=True)

        tape._record(out, _bwd)
    return out


def prelu(x: Tensor5, p: PReLUParams, tape: Tape | None = None) -> Tensor5:
    """Per-channel parametric rectifier: y = x for x > 0, slope_c * x otherwise."""
    c = x.shape[1]
    if p.slope.values.shape[0] != c:
        raise ShapeError(f"prelu: {p.slope.values.shape[0]} slopes for {c} channels")
    s = p.slope.values.reshape(1, c, 1, 1, 1)
    pos = x.values > 0
    out = Tensor5(_check_finite(np.where(pos, x.values, s * x.values), "prelu"))
    if tape is not None:
        need_dx = _wants_grad(x, tape)

        def _bwd(x=x, p=p, out=out, pos=pos, need_dx=need_dx):
            if out.grad is None:
                return
            neg_x = np.where(pos, 0.0, x.values)
            p.slope.accumulate((out.grad * neg_x).sum(axis=(0, 2, 3, 4)))
            if need_dx:
                s = p.slope.values.reshape(1, -1, 1, 1, 1)
                _accum(x, np.where(pos, out.grad, out.grad * s), own=True)

        tape._record(out, _bwd)
    return out


def softmax_voxelwise(x: Tensor5, tape: Tape | None = None) -> Tensor5:
    """Two-channel voxelwise softmax, stabilized by max subtraction."""
    if x.shape[1] != 2:
        raise ShapeError(f"softmax_voxelwise requires 2 channels, got {x.shape[1]}")
    z = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    out = Tensor5(_check_finite(probs, "softmax_voxelwise"))
    if tape is not None:
        need_dx = _wants_grad(x, tape)

        def _bwd(x=x, out=out, need_dx=need_dx):
            if out.grad is None or not need_dx:
                return
            p = out.values
            inner = (out.grad * p).sum(axis=1, keepdims=True)
            _accum(x, p * (out.grad - inner), own=True)

        tape._record(out, _bwd)
    return out


def add(x: Tensor5, y: Tensor5, tape: Tape | None = None) -> Tensor5:
    """Elementwise sum; the residual connection."""
    if x.shape != y.shape:
        raise ShapeError(f"add: shape mismatch {x.shape} vs {y.shape}")
    out = Tensor5(_check_finite(x.values + y.values, "add"))
    if tape is not None:
        wants = [(t, _wants_grad(t, tape)) for t in (x, y)]

        def _bwd(out=out, wants=wants):
            if out.grad is None:
                return
            for t, w in wants:
                if w:
                    _accum(t, out.grad)

        tape._record(out, _bwd)
    return out


def concat_channels(x: Tensor5, y: Tensor5, tape: Tape | None = None) -> Tensor5:
    """Stack along the channel axis; the skip-connection join."""
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {x.shape} vs {y.shape}")
    out = Tensor5(np.concatenate([x.values, y.values], axis=1))
    if tape is not None:
        cx = x.shape[1]
        wants = [(t, _wants_grad(t, tape)) for t in (x, y)]

        def _bwd(out=out, wants=wants, cx=cx):
            if out.grad is None:
                return
            (x, wx), (y, wy) = wants
            if wx:
                _accum(x, out.grad[:, :cx])
            if wy:
                _accum(y, out.grad[:, cx:])

        tape._record(out, _bwd)
    return out


def tile_channels(x: Tensor5, repeats: int, tape: Tape | None = None) -> Tensor5:
    """Repeat each channel ``repeats`` times; widens a thin input so the
    residual add is shape-valid."""
    if repeats < 1:
        raise ShapeError(f"tile_channels: repeats must be >= 1, got {repeats}")
    out = Tensor5(np.repeat(x.values, repeats, axis=1))
    if tape is not None:
        need_dx = _wants_grad(x, tape)

        def _bwd(x=x, out=out, repeats=repeats, need_dx=need_dx):
            if out.grad is None or not need_dx:
                return
            n, c, d, h, w = x.shape
            _accum(x, out.grad.reshape(n, c, repeats, d, h, w).sum(axis=2), own=True)

        tape._record(out, _bwd)
    return out


def multiply(x: Tensor5, y: Tensor5, tape: Tape | None = None) -> Tensor5:
    if x.shape != y.shape:
        raise ShapeError(f"multiply: shape mismatch {x.shape} vs {y.shape}")
    out = Tensor5(_check_finite(x.values * y.values, "multiply"))
    if tape is not None:
        wants = [(t, _wants_grad(t, tape)) for t in (x, y)]

        def _bwd(out=out, wants=wants, x=x, y=y):
            if out.grad is None:
                return
            (x, wx), (y, wy) = wants
            if wx:
                _accum(x, out.grad * y.values, own=True)
            if wy:
                _accum(y, out.grad * x.values, own=True)

        tape._record(out, _bwd)
    return out


def sum_all(x: Tensor5, tape: Tape | None = None) -> Tensor5:
    """Reduce to a (1, 1, 1, 1, 1) scalar tensor."""
    out = Tensor5(np.full((1, 1, 1, 1, 1), x.values.sum()))
    if tape is not None:
        need_dx = _wants_grad(x, tape)

        def _bwd(x=x, out=out, need_dx=need_dx):
            if out.grad is None or not need_dx:
                return
            _accum(x, np.full_like(x.values, out.grad.ravel()[0]), own=True)

        tape._record(out, _bwd)
    return out


# ---------------------------------------------------------------------------
# initialization


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Zero-mean Gaussian with stddev sqrt(2 / fan_in)."""
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
