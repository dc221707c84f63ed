"""Displacement fields and the differentiable trilinear warp.

A displacement field ``d`` assigns each voxel ``x`` a 3-vector in voxel
units; the warp resamples the moving volume at ``x + d(x)`` (backward
convention: the output voxel pulls its intensity from the moving image).
Sampling positions are clamped to the valid grid, and the intensity
derivative with respect to a clamped coordinate is zero.

Because the output at ``x`` depends only on ``d(x)``, intensity gradients
with respect to the field are strictly local: this is what makes
region-masked optimization leave the field outside the mask untouched.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .volume import Volume3, FormatError, PayloadSizeError, _mhd_header_text, \
    _read_mhd_header, _read_payload, _header_ints, _header_floats, _raw_path


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel displacement vectors, float32, voxel units.

    ``data`` has shape ``(nz, ny, nx, 3)`` with the last axis ordered
    ``(dx, dy, dz)``; flat memory order is therefore 3 interleaved
    components per voxel, x-fastest, matching the on-disk layout.
    """

    dims: tuple[int, int, int]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        nx, ny, nz = (int(d) for d in self.dims)
        object.__setattr__(self, "dims", (nx, ny, nz))
        data = np.asarray(self.data, dtype=np.float32)
        if data.size != 3 * nx * ny * nz:
            raise ValueError(f"field has {data.size} scalars, dims {self.dims} need {3 * nx * ny * nz}")
        data = data.reshape(nz, ny, nx, 3)
        if not np.all(np.isfinite(data)):
            raise ValueError("displacement components must be finite")
        if not data.flags.c_contiguous:
            data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def zeros(cls, dims: tuple[int, int, int]) -> "DisplacementField":
        nx, ny, nz = dims
        return cls(dims, np.zeros((nz, ny, nx, 3), dtype=np.float32))


@dataclass(frozen=True)
class RoiBox:
    """Axis-aligned voxel-index box, inclusive corners, (x, y, z) order."""

    min_corner: tuple[int, int, int]
    max_corner: tuple[int, int, int]

    def __post_init__(self):
        mn = tuple(int(c) for c in self.min_corner)
        mx = tuple(int(c) for c in self.max_corner)
        if any(a > b for a, b in zip(mn, mx)):
            raise ValueError(f"box min {mn} exceeds max {mx}")
        object.__setattr__(self, "min_corner", mn)
        object.__setattr__(self, "max_corner", mx)

    def validate(self, dims: tuple[int, int, int]) -> "RoiBox":
        for axis, (lo, hi, n) in enumerate(zip(self.min_corner, self.max_corner, dims)):
            if lo < 0 or hi >= n:
                raise ValueError(
                    f"box [{lo}, {hi}] out of bounds along {'xyz'[axis]} (extent {n})")
        return self

    def slices(self) -> tuple[slice, slice, slice]:
        """Index expression for a [z, y, x]-ordered array."""
        (x0, y0, z0), (x1, y1, z1) = self.min_corner, self.max_corner
        return (slice(z0, z1 + 1), slice(y0, y1 + 1), slice(x0, x1 + 1))

    @property
    def num_voxels(self) -> int:
        return int(np.prod([b - a + 1 for a, b in zip(self.min_corner, self.max_corner)]))

    def contains(self, xyz: tuple[int, int, int]) -> bool:
        return all(a <= c <= b for a, c, b in zip(self.min_corner, xyz, self.max_corner))

    @classmethod
    def full(cls, dims: tuple[int, int, int]) -> "RoiBox":
        return cls((0, 0, 0), (dims[0] - 1, dims[1] - 1, dims[2] - 1))


def warp(moving: Volume3, dvf: DisplacementField) -> Volume3:
    """Resample ``moving`` at ``x + d(x)`` with trilinear interpolation.

    Sampling positions are clamped to the grid (clamp-to-edge). A zero
    field reproduces the input bit-exactly.
    """
    if moving.dims != dvf.dims:
        raise ValueError(f"dims mismatch: volume {moving.dims} vs field {dvf.dims}")
    values, _ = _sample_with_grad(moving.data, dvf.data, want_grad=False)
    return moving.with_data(values)


def warp_jvp(moving: Volume3, dvf: DisplacementField, x: tuple[int, int, int]) -> np.ndarray:
    """Gradient of the warped intensity at voxel ``x`` w.r.t. ``d(x)``.

    Returns the 3-vector (d/d dx, d/d dy, d/d dz) of the trilinear sample,
    computed from the interpolation weights. Zero along clamped directions.
    """
    nx, ny, nz = moving.dims
    ix, iy, iz = x
    if not (0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz):
        raise IndexError(f"voxel {x} out of bounds for dims {moving.dims}")
    patch = dvf.data[iz:iz + 1, iy:iy + 1, ix:ix + 1, :]
    _, grad = _sample_with_grad(moving.data, patch, want_grad=True,
                                base_index=(ix, iy, iz))
    return grad.reshape(3).astype(np.float64)


def dvf_stats(dvf: DisplacementField, roi: RoiBox | None = None) -> dict:
    """Max and mean Euclidean displacement magnitude, optionally over a box."""
    data = dvf.data
    if roi is not None:
        roi.validate(dvf.dims)
        data = data[roi.slices()]
    mag = np.sqrt(np.sum(data.astype(np.float64) ** 2, axis=-1))
    return {"max_magnitude": float(mag.max()), "mean_magnitude": float(mag.mean())}


def save_dvf(dvf: DisplacementField, path: str) -> None:
    """Write a field as raw float32 (3 interleaved channels) + MHD-style header.

    ``.mha`` paths hold the payload inline, ``.mhd`` paths use a sidecar raw.
    """
    flat = np.ascontiguousarray(dvf.data, dtype="<f4")
    local = path.endswith(".mha")
    header = _mhd_header_text(dvf.dims, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), "MET_FLOAT",
                              "LOCAL" if local else os.path.basename(_raw_path(path)),
                              channels=3)
    if local:
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(flat.tobytes())
    else:
        with open(path, "w", encoding="ascii") as f:
            f.write(header)
        flat.tofile(_raw_path(path))


def load_dvf(path: str) -> DisplacementField:
    header, payload_offset = _read_mhd_header(path)
    dims = _header_ints(header, "DimSize", path, 3)
    nchan = int(header.get("ElementNumberOfChannels", "1"))
    if nchan != 3:
        raise FormatError(f"{path}: displacement fields need ElementNumberOfChannels=3, got {nchan}")
    if header.get("ElementType") != "MET_FLOAT":
        raise FormatError(f"{path}: displacement fields must be MET_FLOAT")
    raw = _read_payload(path, header["ElementDataFile"], payload_offset)
    expected = dims[0] * dims[1] * dims[2] * 3 * 4
    if len(raw) != expected:
        raise PayloadSizeError(f"{path}: payload is {len(raw)} bytes, header declares {expected}")
    data = np.frombuffer(raw, dtype="<f4")
    return DisplacementField(dims, data)


# ---------------------------------------------------------------- internals

def _sample_with_grad(vol_zyx: np.ndarray, dvf_zyxc: np.ndarray, want_grad: bool,
                      base_index: tuple[int, int, int] | None = None):
    """Trilinear sample of ``vol`` at ``grid + displacement`` (float64 math).

    ``dvf_zyxc`` may cover only a sub-block of the grid; ``base_index``
    gives the (x, y, z) offset of that block. Returns ``(values, grads)``
    where ``grads`` (if requested) holds d(sample)/d(displacement) per
    component, zeroed along directions whose raw position fell outside the
    grid and was clamped.
    """
    nz, ny, nx = vol_zyx.shape
    bz, by, bx, _ = dvf_zyxc.shape
    ox, oy, oz = base_index if base_index is not None else (0, 0, 0)

    zz, yy, xx = np.meshgrid(np.arange(oz, oz + bz, dtype=np.float64),
                             np.arange(oy, oy + by, dtype=np.float64),
                             np.arange(ox, ox + bx, dtype=np.float64), indexing="ij")
    d = dvf_zyxc.astype(np.float64)
    px = xx + d[..., 0]
    py = yy + d[..., 1]
    pz = zz + d[..., 2]

    if want_grad:
        live_x = (px >= 0.0) & (px <= nx - 1.0)
        live_y = (py >= 0.0) & (py <= ny - 1.0)
        live_z = (pz >= 0.0) & (pz <= nz - 1.0)

    px = np.clip(px, 0.0, nx - 1.0)
    py = np.clip(py, 0.0, ny - 1.0)
    pz = np.clip(pz, 0.0, nz - 1.0)

    x0 = np.minimum(px.astype(np.int64), nx - 2)
    y0 = np.minimum(py.astype(np.int64), ny - 2)
    z0 = np.minimum(pz.astype(np.int64), nz - 2)
    fx = px - x0
    fy = py - y0
    fz = pz - z0

    flat = vol_zyx.reshape(-1).astype(np.float64)
    base = (z0 * ny + y0) * nx + x0
    c000 = flat[base]
    c100 = flat[base + 1]
    c010 = flat[base + nx]
    c110 = flat[base + nx + 1]
    c001 = flat[base + nx * ny]
    c101 = flat[base + nx * ny + 1]
    c011 = flat[base + nx * ny + nx]
    c111 = flat[base + nx * ny + nx + 1]

    # interpolate along x, then y, then z
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    c00 = c000 * gx + c100 * fx
    c10 = c010 * gx + c110 * fx
    c01 = c001 * gx + c101 * fx
    c11 = c011 * gx + c111 * fx
    c0 = c00 * gy + c10 * fy
    c1 = c01 * gy + c11 * fy
    values = c0 * gz + c1 * fz

    if not want_grad:
        return values, None

    # derivative w.r.t. each sample coordinate from the same corner fetches
    dx00 = c100 - c000
    dx10 = c110 - c010
    dx01 = c101 - c001
    dx11 = c111 - c011
    ddx = (dx00 * gy + dx10 * fy) * gz + (dx01 * gy + dx11 * fy) * fz
    ddy = (c10 - c00) * gz + (c11 - c01) * fz
    ddz = c1 - c0

    grads = np.empty(dvf_zyxc.shape, dtype=np.float64)
    grads[..., 0] = np.where(live_x, ddx, 0.0)
    grads[..., 1] = np.where(live_y, ddy, 0.0)
    grads[..., 2] = np.where(live_z, ddz, 0.0)
    return values, grads
