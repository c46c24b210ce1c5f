"""Training-time augmentation and resampling utilities.

Deformations come from a coarse control-point grid whose per-point
displacement vectors are drawn from a zero-mean Gaussian; the grid is
densified to a per-voxel field by order-1 (trilinear) B-spline interpolation
and applied by backward warping. Intensity augmentation matches a volume's
histogram to that of another randomly chosen scan. Everything is a pure
function of (input, rng), so a replayed seed reproduces an augmented stream
bit-exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .validation import check_positive_float_triple, check_same_dims
from .volume import LabelVolume, Volume


@dataclass
class ControlGrid:
    """Displacement vectors (dz, dy, dx in voxels) on an n>=2 cubic lattice
    of control points anchored at the volume corners."""

    displacements: np.ndarray  # (n, n, n, 3)

    def __post_init__(self):
        arr = np.asarray(self.displacements, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[3] != 3 or len(set(arr.shape[:3])) != 1:
            raise ValueError(f"displacements must be (n, n, n, 3), got {arr.shape}")
        if arr.shape[0] < 2:
            raise ValueError("control grid needs at least 2 points per axis")
        if not np.isfinite(arr).all():
            raise ValueError("displacements: contains non-finite values")
        self.displacements = arr

    @property
    def size(self) -> int:
        return self.displacements.shape[0]


@dataclass
class DeformationField:
    """Dense per-voxel displacement vectors (dz, dy, dx in voxels)."""

    vectors: np.ndarray  # (D, H, W, 3)

    def __post_init__(self):
        arr = np.asarray(self.vectors, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[3] != 3:
            raise ValueError(f"vectors must be (D, H, W, 3), got {arr.shape}")
        self.vectors = arr

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.vectors.shape[:3]


@dataclass
class AugmentPolicy:
    """What to apply each iteration. Both transforms run whenever enabled."""

    deform: bool = True
    deform_sigma: float = 15.0
    deform_grid: int = 2
    hist_match: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.deform_sigma < 0:
            raise ValueError("deform_sigma must be >= 0")
        if self.deform_grid < 2:
            raise ValueError("deform_grid must be >= 2")

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(deform=False, deform_sigma=0.0, hist_match=False)


def sample_control_grid(sigma: float, rng: np.random.Generator, size: int = 2) -> ControlGrid:
    """Draw i.i.d. Gaussian control displacements with stddev ``sigma`` voxels."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return ControlGrid(np.zeros((size, size, size, 3)))
    return ControlGrid(rng.normal(0.0, sigma, size=(size, size, size, 3)))


def _axis_interp(length: int, n_ctrl: int):
    """Per-axis lower control index and fractional weight for each voxel."""
    if length == 1:
        z = np.zeros(1, dtype=np.intp)
        return z, np.zeros(1)
    t = np.arange(length) * ((n_ctrl - 1) / (length - 1))
    i0 = np.minimum(t.astype(np.intp), n_ctrl - 2)
    return i0, t - i0


def densify(grid: ControlGrid, dims) -> DeformationField:
    """Trilinearly interpolate control displacements over the voxel lattice.

    Control points sit at the corners of the volume (and evenly between for
    grids larger than 2), so the field reproduces the control displacements
    exactly at corner voxels and reproduces constant fields everywhere.
    """
    d, h, w = (int(x) for x in dims)
    n = grid.size
    iz, fz = _axis_interp(d, n)
    iy, fy = _axis_interp(h, n)
    ix, fx = _axis_interp(w, n)
    ctrl = grid.displacements

    field = np.zeros((d, h, w, 3))
    for az in (0, 1):
        wz = (fz if az else 1.0 - fz)[:, None, None, None]
        for ay in (0, 1):
            wy = (fy if ay else 1.0 - fy)[None, :, None, None]
            for ax in (0, 1):
                wx = (fx if ax else 1.0 - fx)[None, None, :, None]
                corner = ctrl[
                    (iz + az)[:, None, None],
                    (iy + ay)[None, :, None],
                    (ix + ax)[None, None, :],
                ]
                field += wz * wy * wx * corner
    return DeformationField(field)


def _sample_trilinear(data: np.ndarray, zz, yy, xx) -> np.ndarray:
    """Gather with trilinear weights; coordinates clamp to the border."""
    d, h, w = data.shape
    zz = np.clip(zz, 0.0, d - 1.0)
    yy = np.clip(yy, 0.0, h - 1.0)
    xx = np.clip(xx, 0.0, w - 1.0)
    z0 = np.minimum(zz.astype(np.intp), d - 2) if d > 1 else np.zeros_like(zz, dtype=np.intp)
    y0 = np.minimum(yy.astype(np.intp), h - 2) if h > 1 else np.zeros_like(yy, dtype=np.intp)
    x0 = np.minimum(xx.astype(np.intp), w - 2) if w > 1 else np.zeros_like(xx, dtype=np.intp)
    fz, fy, fx = zz - z0, yy - y0, xx - x0
    z1 = np.minimum(z0 + 1, d - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)

    out = np.zeros(zz.shape)
    for az, zi, wz in ((0, z0, 1.0 - fz), (1, z1, fz)):
        for ay, yi, wy in ((0, y0, 1.0 - fy), (1, y1, fy)):
            for ax, xi, wx in ((0, x0, 1.0 - fx), (1, x1, fx)):
                out += wz * wy * wx * data[zi, yi, xi]
    return out


def _sample_nearest(data: np.ndarray, zz, yy, xx) -> np.ndarray:
    d, h, w = data.shape
    zi = np.clip(np.rint(zz), 0, d - 1).astype(np.intp)
    yi = np.clip(np.rint(yy), 0, h - 1).astype(np.intp)
    xi = np.clip(np.rint(xx), 0, w - 1).astype(np.intp)
    return data[zi, yi, xi]


def warp(v: Volume | LabelVolume, f: DeformationField):
    """Backward warping: output(x) = input(x + f(x)).

    Images interpolate trilinearly; label masks use nearest-neighbor so they
    stay binary. Out-of-bounds reads clamp to the border voxel.
    """
    check_same_dims(v.dims, f.dims, "warp")
    d, h, w = v.dims
    z, y, x = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    zz = z + f.vectors[..., 0]
    yy = y + f.vectors[..., 1]
    xx = x + f.vectors[..., 2]
    if isinstance(v, LabelVolume):
        return LabelVolume(_sample_nearest(v.data, zz, yy, xx), v.spacing)
    data = _sample_trilinear(v.data.astype(np.float64), zz, yy, xx)
    return Volume(data.astype(np.float32), v.spacing)


def histogram_match(src: Volume, ref: Volume, bins: int = 256) -> Volume:
    """Monotone intensity remap so the source's binned CDF tracks the
    reference's. A constant reference maps everything to that constant."""
    s = src.data.astype(np.float64)
    r = ref.data.astype(np.float64)
    rmin, rmax = float(r.min()), float(r.max())
    if rmax == rmin:
        return Volume(np.full(src.dims, rmin, dtype=np.float32), src.spacing)
    smin, smax = float(s.min()), float(s.max())
    ref_edges = np.linspace(rmin, rmax, bins + 1)
    cdf_ref = np.cumsum(np.histogram(r, bins=ref_edges)[0]) / r.size
    # empirical inverse CDF: edge 0 sits at quantile 0, edge m+1 at cdf[m];
    # ties resolve to the first edge reaching the quantile so empty-bin runs
    # do not pull values across the gap
    inv_q = np.concatenate([[0.0], cdf_ref])

    def inverse_cdf(q):
        idx = np.clip(np.searchsorted(inv_q, q, side="left"), 1, bins)
        q0, q1 = inv_q[idx - 1], inv_q[idx]
        span = q1 - q0
        frac = np.where(span > 0, (q - q0) / np.where(span > 0, span, 1.0), 1.0)
        return ref_edges[idx - 1] + frac * (ref_edges[idx] - ref_edges[idx - 1])

    if smax == smin:
        # degenerate source: send the single level to the reference median
        return Volume(
            np.full(src.dims, inverse_cdf(np.array(0.5)), dtype=np.float32), src.spacing
        )

    src_edges = np.linspace(smin, smax, bins + 1)
    cdf_src = np.cumsum(np.histogram(s, bins=src_edges)[0]) / s.size
    bin_idx = np.clip(np.searchsorted(src_edges, s, side="right") - 1, 0, bins - 1)
    # piecewise-linear CDF within each bin, so a heavy bin's mass spreads
    # over the target range instead of piling onto one quantile
    cdf_lo = np.concatenate([[0.0], cdf_src])[bin_idx]
    bin_w = (smax - smin) / bins
    frac = np.clip((s - src_edges[bin_idx]) / bin_w, 0.0, 1.0)
    q = cdf_lo + frac * (cdf_src[bin_idx] - cdf_lo)
    return Volume(inverse_cdf(q).astype(np.float32), src.spacing)


def resample(v: Volume | LabelVolume, target_spacing):
    """Resample onto a lattice with the given (z, y, x) mm spacing; the
    physical extent is preserved to within one voxel."""
    ts = check_positive_float_triple(target_spacing, "target_spacing")
    dims = v.dims
    new_dims = tuple(
        max(1, int(np.floor((n - 1) * s_old / s_new)) + 1)
        for n, s_old, s_new in zip(dims, v.spacing, ts)
    )
    coords = [
        np.arange(n_new) * (s_new / s_old)
        for n_new, s_old, s_new in zip(new_dims, v.spacing, ts)
    ]
    zz, yy, xx = np.meshgrid(coords[0], coords[1], coords[2], indexing="ij")
    if isinstance(v, LabelVolume):
        return LabelVolume(_sample_nearest(v.data, zz, yy, xx), ts)
    data = _sample_trilinear(v.data.astype(np.float64), zz, yy, xx)
    return Volume(data.astype(np.float32), ts)


def normalize_zscore(v: Volume) -> Volume:
    """Shift/scale to zero mean, unit stddev (double precision output)."""
    arr = v.data.astype(np.float64)
    sd = float(arr.std())
    if sd == 0.0:
        warnings.warn("normalize_zscore: constant volume, returning zeros")
        return Volume(np.zeros_like(arr), v.spacing)
    return Volume((arr - arr.mean()) / sd, v.spacing)


def augment_pair(
    img: Volume,
    lab: LabelVolume,
    references: list[Volume],
    policy: AugmentPolicy,
    rng: np.random.Generator,
) -> tuple[Volume, LabelVolume]:
    """Apply one iteration's worth of augmentation to a training pair.

    The image and its ground truth share the same deformation field; the
    histogram reference is drawn from ``references`` (other raw scans).
    """
    if policy.deform:
        grid = sample_control_grid(policy.deform_sigma, rng, policy.deform_grid)
        field = densify(grid, img.dims)
        img = warp(img, field)
        lab = warp(lab, field)
    if policy.hist_match and references:
        ref = references[int(rng.integers(len(references)))]
        img = histogram_match(img, ref)
    return img, lab
