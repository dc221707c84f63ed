"""Dissimilarity losses, smoothness regularization, and region diagnostics.

The dissimilarity is mean squared error over intensities mapped to the
unit scale ``(x + 1000) / 2000`` (the map is affine, so it enters square
differences purely as a 1/2000 scale). A diffusion regularizer on the
displacement field is available with weight ``reg_weight``; direct
optimization of a dense field is ill-posed without some smoothing, but all
locality and decomposition diagnostics require ``reg_weight = 0`` so that
the gradient of a masked loss is supported exactly on the mask.

Region diagnostics decompose the full-volume loss over a disjoint covering
partition. Sums of squared differences (SSD) add exactly across regions,
which MSE does not, so SSD is the additive quantity and per-region MSE is
reported alongside for interpretation. The per-region gradient shares
quantify how much of the total update direction each region contributes —
the measurable form of "the region I care about has too little gradient to
make progress".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .volume import Volume3
from .transform import DisplacementField, RoiBox, _sample_with_grad

NORM_SCALE = 1.0 / 2000.0  # d/dHU of the (x + 1000) / 2000 intensity map


class PartitionError(ValueError):
    """The region list is not a disjoint covering of the voxel grid."""


@dataclass(frozen=True)
class LossConfig:
    kind: str = "mse"
    reg_weight: float = 0.01
    normalize_inputs: bool = True

    def __post_init__(self):
        if self.kind != "mse":
            raise ValueError(f"unsupported loss kind {self.kind!r}")
        if self.reg_weight < 0:
            raise ValueError(f"reg_weight must be >= 0, got {self.reg_weight}")

    def without_regularizer(self) -> "LossConfig":
        return LossConfig(self.kind, 0.0, self.normalize_inputs)


def image_loss(fixed: Volume3, warped: Volume3, cfg: LossConfig,
               mask: RoiBox | None = None) -> float:
    """MSE between fixed and warped, over the mask if given."""
    if fixed.dims != warped.dims:
        raise ValueError(f"dims mismatch: {fixed.dims} vs {warped.dims}")
    a, b = fixed.data, warped.data
    if mask is not None:
        mask.validate(fixed.dims)
        sl = mask.slices()
        a, b = a[sl], b[sl]
    diff = b.astype(np.float64) - a.astype(np.float64)
    if cfg.normalize_inputs:
        diff = diff * NORM_SCALE
    return float(np.mean(diff * diff))


def smoothness(dvf: DisplacementField) -> float:
    """Diffusion energy: mean over (voxel, component) of squared forward differences.

    Forward differences along each grid axis; none are taken across the far
    boundary. A constant field has zero energy.
    """
    d = dvf.data.astype(np.float64)
    total = 0.0
    for axis in range(3):
        e = np.diff(d, axis=axis)
        total += float(np.sum(e * e))
    return total / (3.0 * _nvox(dvf.dims))


def smoothness_grad(dvf: DisplacementField) -> np.ndarray:
    """Analytic gradient of ``smoothness``; shape (nz, ny, nx, 3), float64."""
    d = dvf.data.astype(np.float64)
    g = np.zeros_like(d)
    for axis in range(3):
        e = np.diff(d, axis=axis)
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[axis] = slice(1, None)
        lo[axis] = slice(None, -1)
        g[tuple(hi)] += 2.0 * e
        g[tuple(lo)] -= 2.0 * e
    g /= 3.0 * _nvox(dvf.dims)
    return g


def loss_grad_dvf(fixed: Volume3, moving: Volume3, dvf: DisplacementField,
                  cfg: LossConfig, mask: RoiBox | None = None) -> np.ndarray:
    """Gradient of ``image_loss(fixed, warp(moving, dvf)) + reg_weight * smoothness``
    with respect to every displacement component.

    Returns a float64 array shaped like ``dvf.data``. With a mask and
    ``reg_weight = 0`` the gradient is exactly zero outside the mask:
    each output voxel samples the moving image only through its own
    displacement vector.
    """
    if fixed.dims != moving.dims or fixed.dims != dvf.dims:
        raise ValueError(f"dims mismatch: fixed {fixed.dims}, moving {moving.dims}, field {dvf.dims}")
    scale = NORM_SCALE if cfg.normalize_inputs else 1.0

    if mask is None:
        values, grads = _sample_with_grad(moving.data, dvf.data, want_grad=True)
        diff = (values - fixed.data.astype(np.float64)) * scale
        n = diff.size
        g = (2.0 / n) * scale * diff[..., None] * grads
    else:
        mask.validate(fixed.dims)
        sl = mask.slices()
        sub = np.ascontiguousarray(dvf.data[sl])
        values, grads = _sample_with_grad(moving.data, sub, want_grad=True,
                                          base_index=mask.min_corner)
        diff = (values - fixed.data[sl].astype(np.float64)) * scale
        n = diff.size
        g = np.zeros(dvf.data.shape, dtype=np.float64)
        g[sl] = (2.0 / n) * scale * diff[..., None] * grads

    if cfg.reg_weight != 0.0:
        g += cfg.reg_weight * smoothness_grad(dvf)
    return g


def objective(fixed: Volume3, moving: Volume3, dvf: DisplacementField,
              cfg: LossConfig, mask: RoiBox | None = None) -> float:
    """The scalar that ``loss_grad_dvf`` differentiates."""
    from .transform import warp
    sim = image_loss(fixed, warp(moving, dvf), cfg, mask)
    if cfg.reg_weight != 0.0:
        sim += cfg.reg_weight * smoothness(dvf)
    return sim


# ------------------------------------------------------------- partitions

class RegionPartition:
    """A disjoint covering of the voxel grid into K regions.

    Regions may be given as ``RoiBox`` instances or as boolean masks shaped
    ``(nz, ny, nx)``. Construction validates that every voxel belongs to
    exactly one region.
    """

    def __init__(self, dims: tuple[int, int, int], regions):
        nx, ny, nz = dims
        labels = np.full((nz, ny, nx), -1, dtype=np.int32)
        count = np.zeros((nz, ny, nx), dtype=np.int32)
        for k, region in enumerate(regions):
            if isinstance(region, RoiBox):
                region.validate(dims)
                sl = region.slices()
                labels[sl] = k
                count[sl] += 1
            else:
                m = np.asarray(region, dtype=bool)
                if m.shape != (nz, ny, nx):
                    raise PartitionError(f"mask shape {m.shape} does not match grid {(nz, ny, nx)}")
                labels[m] = k
                count[m] += 1
        if count.max(initial=0) > 1:
            raise PartitionError("regions overlap")
        if count.min(initial=1) < 1 or len(regions) == 0:
            raise PartitionError("regions do not cover the grid")
        self.dims = dims
        self.num_regions = len(regions)
        self.labels = labels
        self.labels.setflags(write=False)

    @classmethod
    def from_blocks(cls, dims: tuple[int, int, int], block: tuple[int, int, int]) -> "RegionPartition":
        """Partition into axis-aligned blocks of the given (bx, by, bz) size.

        Trailing blocks are truncated at the volume boundary.
        """
        nx, ny, nz = dims
        bx, by, bz = block
        if min(bx, by, bz) < 1:
            raise ValueError(f"block sizes must be >= 1, got {block}")
        boxes = []
        for z0 in range(0, nz, bz):
            for y0 in range(0, ny, by):
                for x0 in range(0, nx, bx):
                    boxes.append(RoiBox((x0, y0, z0),
                                        (min(x0 + bx, nx) - 1,
                                         min(y0 + by, ny) - 1,
                                         min(z0 + bz, nz) - 1)))
        return cls(dims, boxes)

    def block_index_of(self, xyz: tuple[int, int, int]) -> int:
        x, y, z = xyz
        return int(self.labels[z, y, x])

    def voxel_counts(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.num_regions)


@dataclass(frozen=True)
class RegionShare:
    id: int
    voxels: int
    loss_ssd: float
    loss_mse: float
    grad_norm: float
    grad_fraction: float


@dataclass(frozen=True)
class GradientShareReport:
    """Per-region loss and gradient-share summary.

    ``grad_fraction`` entries sum to 1 when the total gradient norm is
    positive; when the images are already perfectly matched the report
    carries ``zero_total_gradient=True`` and all fractions are zero.
    """

    regions: tuple[RegionShare, ...]
    total_loss: float
    total_grad_norm: float
    zero_total_gradient: bool
    iteration: int | None = None

    def to_json_dict(self) -> dict:
        d = {
            "regions": [vars(r) for r in self.regions],
            "total_loss": self.total_loss,
            "total_grad_norm": self.total_grad_norm,
            "zero_total_gradient": self.zero_total_gradient,
        }
        if self.iteration is not None:
            d["iteration"] = self.iteration
        return d

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_json_dict(), indent=indent)


def region_decompose(fixed: Volume3, warped: Volume3, partition: RegionPartition,
                     cfg: LossConfig) -> list[dict]:
    """Per-region SSD (additive across the partition) and MSE.

    Returns one entry per region: ``{id, voxels, loss_ssd, loss_mse}``.
    The sum of ``loss_ssd`` equals the full-volume SSD up to accumulation
    order.
    """
    if fixed.dims != warped.dims:
        raise ValueError(f"dims mismatch: {fixed.dims} vs {warped.dims}")
    if partition.dims != fixed.dims:
        raise PartitionError(f"partition dims {partition.dims} do not match volumes {fixed.dims}")
    diff = warped.data.astype(np.float64) - fixed.data.astype(np.float64)
    if cfg.normalize_inputs:
        diff = diff * NORM_SCALE
    sq = (diff * diff).ravel()
    ssd = np.bincount(partition.labels.ravel(), weights=sq, minlength=partition.num_regions)
    counts = partition.voxel_counts()
    return [
        {"id": k, "voxels": int(counts[k]), "loss_ssd": float(ssd[k]),
         "loss_mse": float(ssd[k] / counts[k])}
        for k in range(partition.num_regions)
    ]


def gradient_share(fixed: Volume3, moving: Volume3, dvf: DisplacementField,
                   partition: RegionPartition, cfg: LossConfig) -> GradientShareReport:
    """Per-region share of the full-image loss gradient.

    Requires ``reg_weight = 0``: the regularizer couples neighboring voxels
    across region boundaries, and the per-region restriction of the
    gradient is only meaningful when each region's contribution is
    supported on its own voxels.
    """
    if cfg.reg_weight != 0.0:
        raise ValueError("gradient_share requires reg_weight = 0 (regions would couple); "
                         "use LossConfig.without_regularizer()")
    from .transform import warp
    warped = warp(moving, dvf)
    per_region = region_decompose(fixed, warped, partition, cfg)

    g = loss_grad_dvf(fixed, moving, dvf, cfg, mask=None)
    sq = np.sum(g * g, axis=-1).ravel()
    norm_sq = np.bincount(partition.labels.ravel(), weights=sq, minlength=partition.num_regions)
    norms = np.sqrt(norm_sq)
    total_norm = float(np.sqrt(norm_sq.sum()))
    zero = total_norm == 0.0
    denom = norms.sum()
    fractions = norms / denom if denom > 0 else np.zeros_like(norms)

    regions = tuple(
        RegionShare(id=e["id"], voxels=e["voxels"], loss_ssd=e["loss_ssd"],
                    loss_mse=e["loss_mse"], grad_norm=float(norms[k]),
                    grad_fraction=float(fractions[k]))
        for k, e in enumerate(per_region)
    )
    total_loss = image_loss(fixed, warped, cfg)
    return GradientShareReport(regions=regions, total_loss=total_loss,
                               total_grad_norm=total_norm, zero_total_gradient=zero)


def _nvox(dims: tuple[int, int, int]) -> int:
    nx, ny, nz = dims
    return nx * ny * nz
