"""Feed-forward segmentation and evaluation metrics.

A previously unseen volume is segmented in one forward pass; voxels whose
foreground probability strictly exceeds 0.5 form the predicted mask. The
evaluation reports per-volume Dice overlap and symmetric Hausdorff distance
between boundary voxels, measured in physical millimeters via the voxel
spacing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .network import VNetModel
from .tensor import Tensor5, softmax_voxelwise
from .volume import LabelVolume, Volume

FOREGROUND_THRESHOLD = 0.5


class EmptyMaskError(ValueError):
    """Hausdorff distance is undefined for an empty mask."""

    def __init__(self, which: str):
        super().__init__(f"empty mask: {which}")
        self.which = which


@dataclass
class SegmentationResult:
    probabilities: Volume      # foreground-channel probability per voxel
    mask: LabelVolume          # probability > 0.5, strictly
    seconds: float


def _zscore(arr: np.ndarray) -> np.ndarray:
    sd = arr.std()
    if sd == 0.0:
        return np.zeros_like(arr)
    return (arr - arr.mean()) / sd


def segment(model: VNetModel, v: Volume, normalize: bool = True) -> SegmentationResult:
    """Feed-forward inference on one volume."""
    start = time.perf_counter()
    arr = v.data.astype(np.float64)
    if normalize:
        arr = _zscore(arr)
    x = Tensor5(arr[np.newaxis, np.newaxis])
    probs = softmax_voxelwise(model.forward(x)).values[0, 1]
    elapsed = time.perf_counter() - start
    return SegmentationResult(
        probabilities=Volume(probs.astype(np.float32), v.spacing),
        mask=LabelVolume((probs > FOREGROUND_THRESHOLD).astype(np.uint8), v.spacing),
        seconds=elapsed,
    )


def _as_mask(m) -> np.ndarray:
    arr = np.asarray(getattr(m, "data", m))
    return arr.astype(bool)


def dice_metric(a, b) -> float:
    """Hard Dice overlap 2|A^B| / (|A| + |B|); both-empty counts as 1.0."""
    ma, mb = _as_mask(a), _as_mask(b)
    if ma.shape != mb.shape:
        raise ValueError(f"dims mismatch: {ma.shape} vs {mb.shape}")
    na, nb = int(ma.sum()), int(mb.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / (na + nb)


def boundary_voxels(mask) -> np.ndarray:
    """(M, 3) integer coordinates of foreground voxels with at least one
    six-connected background neighbor; the outside counts as background."""
    fg = _as_mask(mask)
    padded = np.pad(fg, 1)
    interior = np.ones_like(fg)
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return np.argwhere(fg & ~interior)


def hausdorff_mm(a, b, spacing=None) -> float:
    """Symmetric Hausdorff distance between boundary-voxel centers, in mm.

    ``spacing`` defaults to the masks' own (which must agree). Raises
    EmptyMaskError when either mask has no foreground.
    """
    sa = getattr(a, "spacing", None)
    sb = getattr(b, "spacing", None)
    if spacing is None:
        spacing = sa or sb or (1.0, 1.0, 1.0)
    if sa is not None and sb is not None and tuple(sa) != tuple(sb):
        raise ValueError(f"spacing mismatch: {sa} vs {sb}")
    ma, mb = _as_mask(a), _as_mask(b)
    if ma.shape != mb.shape:
        raise ValueError(f"dims mismatch: {ma.shape} vs {mb.shape}")
    if not ma.any():
        raise EmptyMaskError("a")
    if not mb.any():
        raise EmptyMaskError("b")
    scale = np.asarray(spacing, dtype=np.float64)
    pa = boundary_voxels(ma) * scale
    pb = boundary_voxels(mb) * scale
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))


@dataclass
class MetricsRow:
    name: str
    dice: float | None
    hausdorff_mm: float | None
    status: str  # "ok" or an error tag


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)

    @property
    def ok_rows(self) -> list[MetricsRow]:
        return [r for r in self.rows if r.status == "ok"]

    @property
    def excluded(self) -> int:
        return len(self.rows) - len(self.ok_rows)

    def _agg(self, values):
        if not values:
            return None, None
        arr = np.asarray(values, dtype=np.float64)
        return float(arr.mean()), float(arr.std())

    @property
    def dice_mean_std(self):
        return self._agg([r.dice for r in self.ok_rows])

    @property
    def hausdorff_mean_std(self):
        return self._agg([r.hausdorff_mm for r in self.ok_rows])

    def to_csv(self, path: str) -> None:
        with open(path, "w") as f:
            f.write("volume,dice,hausdorff_mm,status\n")
            for r in self.rows:
                d = "" if r.dice is None else repr(r.dice)
                hd = "" if r.hausdorff_mm is None else repr(r.hausdorff_mm)
                f.write(f"{r.name},{d},{hd},{r.status}\n")

    def summary(self) -> str:
        dm, ds = self.dice_mean_std
        hm, hs = self.hausdorff_mean_std
        if dm is None:
            return f"no successful volumes ({self.excluded} excluded)"
        line = f"dice {dm:.4f} +/- {ds:.4f}, hausdorff {hm:.3f} +/- {hs:.3f} mm"
        if self.excluded:
            line += f" ({self.excluded} volumes excluded)"
        return line


def evaluate(
    model: VNetModel,
    dataset: list[tuple[str, Volume, LabelVolume]],
    normalize: bool = True,
) -> MetricsReport:
    """Segment every volume and score it against its ground truth.

    Per-volume failures become rows with a status tag and are excluded from
    the aggregates rather than aborting the whole run.
    """
    if not dataset:
        raise ValueError("evaluate requires at least one labeled pair")
    report = MetricsReport()
    for name, img, truth in dataset:
        if img.dims != model.config.input_dims or truth.dims != img.dims:
            report.rows.append(MetricsRow(name, None, None, "dims-mismatch"))
            continue
        result = segment(model, img, normalize=normalize)
        d = dice_metric(result.mask, truth)
        try:
            hd = hausdorff_mm(result.mask, truth)
            report.rows.append(MetricsRow(name, d, hd, "ok"))
        except EmptyMaskError as exc:
            tag = "missing-prediction" if exc.which == "a" else "empty-truth"
            report.rows.append(MetricsRow(name, d, None, tag))
    return report
