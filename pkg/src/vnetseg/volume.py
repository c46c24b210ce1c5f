"""Volume containers, the VVOL1 on-disk format, and synthetic data generation.

A volume is a dense scalar field over a (D, H, W) voxel grid with physical
spacing in mm per voxel along (z, y, x). Intensities are stored on disk as
IEEE-754 single precision little-endian; label masks hold strictly binary
values. The file layout is a short ASCII header followed by the raw payload:

    VVOL1
    dims D H W
    spacing Z Y X
    kind image|label
    data
    <D*H*W float32 little-endian values, x fastest, then y, then z>
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .validation import (
    check_binary,
    check_finite,
    check_positive_float_triple,
)

MAGIC = b"VVOL1"


class VolumeFormatError(ValueError):
    """Malformed VVOL1 file; ``field`` names the offending header field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class Volume:
    """Single-channel scalar field with voxel spacing in mm.

    ``data`` is a (D, H, W) array in C order, so x varies fastest.
    ``spacing`` is mm per voxel along (z, y, x). Stored as float32 unless
    constructed from float64 (in-memory intermediates keep full precision;
    the on-disk format is always single precision).
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float32)
        arr = np.ascontiguousarray(arr)
        if arr.ndim != 3 or arr.size == 0:
            raise ValueError(f"data: expected a non-empty (D, H, W) array, got shape {arr.shape}")
        check_finite(arr, "data")
        self.data = arr
        self.spacing = check_positive_float_triple(self.spacing, "spacing")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabelVolume:
    """Binary ground-truth mask: 0 = background, 1 = foreground."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.size == 0:
            raise ValueError(f"data: expected a non-empty (D, H, W) array, got shape {arr.shape}")
        check_finite(np.asarray(arr, dtype=np.float64), "data")
        check_binary(arr, "data")
        self.data = np.ascontiguousarray(arr.astype(np.uint8))
        self.spacing = check_positive_float_triple(self.spacing, "spacing")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def foreground_count(self) -> int:
        return int(self.data.sum())


def _format_spacing(s: float) -> str:
    # %.17g round-trips any double exactly
    return format(float(s), ".17g")


def save_volume(v: Volume | LabelVolume, path: str | os.PathLike) -> None:
    """Write ``v`` in VVOL1 format. Writes via a temp file so a failed save
    leaves no partial file behind."""
    kind = "label" if isinstance(v, LabelVolume) else "image"
    d, h, w = v.dims
    header = (
        f"VVOL1\n"
        f"dims {d} {h} {w}\n"
        f"spacing {' '.join(_format_spacing(s) for s in v.spacing)}\n"
        f"kind {kind}\n"
        f"data\n"
    ).encode("ascii")
    payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    path = os.fspath(path)
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(header)
            f.write(payload)
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_header_line(lines: list[bytes], index: int, key: str) -> list[str]:
    if index >= len(lines):
        raise VolumeFormatError(key, "header truncated")
    parts = lines[index].decode("ascii", errors="replace").split()
    if not parts or parts[0] != key:
        raise VolumeFormatError(key, f"expected '{key} ...' on header line {index + 1}")
    return parts[1:]


def load_volume(path: str | os.PathLike) -> Volume | LabelVolume:
    """Read a VVOL1 file, returning a Volume or LabelVolume per its kind line."""
    with open(path, "rb") as f:
        blob = f.read()

    if not blob.startswith(MAGIC + b"\n"):
        raise VolumeFormatError("magic", f"file does not begin with {MAGIC.decode()}")

    marker = b"\ndata\n"
    cut = blob.find(marker)
    if cut < 0:
        raise VolumeFormatError("data", "missing 'data' marker")
    header_lines = blob[:cut].split(b"\n")
    payload = blob[cut + len(marker):]

    dims_f = _parse_header_line(header_lines, 1, "dims")
    try:
        d, h, w = (int(x) for x in dims_f)
        if d <= 0 or h <= 0 or w <= 0:
            raise ValueError
    except ValueError:
        raise VolumeFormatError("dims", f"expected three positive integers, got {dims_f}")

    spc_f = _parse_header_line(header_lines, 2, "spacing")
    try:
        spacing = tuple(float(x) for x in spc_f)
        if len(spacing) != 3 or any(s <= 0 or not np.isfinite(s) for s in spacing):
            raise ValueError
    except ValueError:
        raise VolumeFormatError("spacing", f"expected three positive reals, got {spc_f}")

    kind_f = _parse_header_line(header_lines, 3, "kind")
    if kind_f != ["image"] and kind_f != ["label"]:
        raise VolumeFormatError("kind", f"expected 'image' or 'label', got {kind_f}")
    kind = kind_f[0]

    expected = d * h * w
    if len(payload) != expected * 4:
        raise VolumeFormatError(
            "data",
            f"declared {expected} values but payload holds {len(payload) // 4}",
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(d, h, w)
    if not np.isfinite(data).all():
        raise VolumeFormatError("data", "payload contains non-finite values")

    if kind == "label":
        if not np.isin(data, (0.0, 1.0)).all():
            raise VolumeFormatError("data", "label payload contains non-binary values")
        return LabelVolume(data.astype(np.uint8), spacing)
    return Volume(data.copy(), spacing)


@dataclass
class SyntheticSpec:
    """Recipe for a synthetic volume/label pair with controllable imbalance.

    Shapes are analytic: a voxel is foreground iff its center lies inside the
    sphere/ellipsoid. The image is per-class mean plus per-class Gaussian
    variation plus additive Gaussian noise, all drawn from ``seed``.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "sphere"
    center: tuple[float, float, float] | None = None  # voxel coords (z, y, x)
    radii: tuple[float, float, float] = (8.0, 8.0, 8.0)  # voxels (z, y, x)
    fg_mean: float = 1.0
    fg_std: float = 0.05
    bg_mean: float = 0.0
    bg_std: float = 0.05
    noise_std: float = 0.05
    seed: int = 0
    resolved_center: tuple[float, float, float] = field(init=False)

    def __post_init__(self):
        self.dims = tuple(int(v) for v in self.dims)
        if len(self.dims) != 3 or any(v <= 0 for v in self.dims):
            raise ValueError(f"dims: expected three positive integers, got {self.dims!r}")
        self.spacing = check_positive_float_triple(self.spacing, "spacing")
        if self.kind not in ("sphere", "ellipsoid"):
            raise ValueError(f"kind: expected 'sphere' or 'ellipsoid', got {self.kind!r}")
        self.radii = tuple(float(r) for r in self.radii)
        if len(self.radii) != 3 or any(r <= 0 for r in self.radii):
            raise ValueError(f"radii: expected three positive reals, got {self.radii!r}")
        if self.kind == "sphere" and len(set(self.radii)) != 1:
            raise ValueError(f"radii: sphere requires equal radii, got {self.radii!r}")
        if self.center is None:
            self.resolved_center = tuple((n - 1) / 2.0 for n in self.dims)
        else:
            self.resolved_center = tuple(float(c) for c in self.center)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Volume, LabelVolume]:
    """Deterministically generate an (image, label) pair from ``spec``."""
    d, h, w = spec.dims
    cz, cy, cx = spec.resolved_center
    rz, ry, rx = spec.radii
    z, y, x = np.ogrid[0:d, 0:h, 0:w]
    inside = (
        ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2
    ) <= 1.0
    if not inside.any():
        raise ValueError("radii: shape clips to zero foreground voxels within dims")

    rng = np.random.default_rng(spec.seed)
    class_noise = rng.standard_normal(spec.dims)
    additive = rng.standard_normal(spec.dims)
    image = np.where(
        inside,
        spec.fg_mean + spec.fg_std * class_noise,
        spec.bg_mean + spec.bg_std * class_noise,
    )
    image = image + spec.noise_std * additive

    vol = Volume(image.astype(np.float32), spec.spacing)
    lab = LabelVolume(inside.astype(np.uint8), spec.spacing)
    return vol, lab
