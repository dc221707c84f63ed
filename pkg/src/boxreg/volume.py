"""3D intensity volumes: MHD/raw file I/O, normalization, slicing, windowing, RMSE.

Conventions used across the package:

* Intensities are 32-bit float Hounsfield units (HU). Loss code maps them
  to the unit scale ``(x + 1000) / 2000`` at the loss boundary; volumes on
  disk and in ``Volume3`` stay in HU.
* ``Volume3.data`` is indexed ``[z, y, x]`` and C-contiguous, so the flat
  memory order is x-fastest — the same order as the raw payload on disk.
* All public coordinate tuples (dims, spacing, origin, indices) are
  ``(x, y, z)`` ordered.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np


class FormatError(ValueError):
    """A volume header is missing/garbled or declares an unsupported layout."""


class PayloadSizeError(ValueError):
    """The raw payload size does not match what the header declares."""


MHD_RAW = "mhd"
RAW_F32 = "raw_f32"

_ELEMENT_TYPES = {"MET_SHORT": np.int16, "MET_FLOAT": np.float32}
_AXES = ("x", "y", "z")


@dataclass(frozen=True, eq=False)
class Volume3:
    """A 3D scalar volume in HU with spacing/origin metadata.

    ``data`` is owned by the volume and marked read-only after construction;
    concurrent reads are safe. Index order is ``data[z, y, x]``.
    """

    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    data: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        nx, ny, nz = (int(d) for d in self.dims)
        if min(nx, ny, nz) < 2:
            raise ValueError(f"dims must all be >= 2 for trilinear sampling, got {self.dims}")
        if any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing must be positive, got {self.spacing_mm}")
        object.__setattr__(self, "dims", (nx, ny, nz))
        data = np.asarray(self.data, dtype=np.float32)
        if data.size != nx * ny * nz:
            raise ValueError(f"data has {data.size} voxels, dims {self.dims} need {nx * ny * nz}")
        data = data.reshape(nz, ny, nx)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume intensities must be finite")
        if not data.flags.c_contiguous:
            data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def num_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def with_data(self, data: np.ndarray) -> "Volume3":
        """New volume with the same grid metadata and fresh intensities."""
        return Volume3(self.dims, self.spacing_mm, self.origin_mm, data)


@dataclass(frozen=True, eq=False)
class SliceImage:
    """A single axis-aligned plane extracted from a volume.

    ``pixels`` is ``[row, col]`` shaped ``(height, width)``. The column axis
    is the faster-varying of the two remaining volume axes, the row axis the
    slower one: axis ``z`` -> (col=x, row=y); axis ``y`` -> (col=x, row=z);
    axis ``x`` -> (col=y, row=z). The CLI, service and UI all share this
    orientation.
    """

    width: int
    height: int
    pixels: np.ndarray
    axis: str
    index: int

    def __post_init__(self):
        if self.axis not in _AXES:
            raise ValueError(f"axis must be one of {_AXES}, got {self.axis!r}")
        px = np.asarray(self.pixels)
        if px.shape != (self.height, self.width):
            raise ValueError(f"pixels shape {px.shape} != (height, width)=({self.height}, {self.width})")
        object.__setattr__(self, "pixels", px)


def load_volume(path: str, format: str = MHD_RAW, dims: tuple[int, int, int] | None = None,
                spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> Volume3:
    """Load a volume from disk.

    ``MHD_RAW`` reads a MetaImage-style text header (``.mhd`` with a sidecar
    raw file, or ``.mha`` with ``ElementDataFile = LOCAL`` and the payload
    inline). ``RAW_F32`` reads a headerless little-endian float32 payload;
    ``dims`` must then be supplied out-of-band.

    Integer (MET_SHORT) payloads are converted losslessly to float32 HU.
    """
    if format == RAW_F32:
        if dims is None:
            raise FormatError("RAW_F32 requires explicit dims")
        nx, ny, nz = dims
        expected = nx * ny * nz * 4
        actual = os.path.getsize(path)
        if actual != expected:
            raise PayloadSizeError(f"{path}: expected {expected} bytes for dims {dims}, found {actual}")
        data = np.fromfile(path, dtype="<f4")
        return Volume3(dims, spacing_mm, (0.0, 0.0, 0.0), data)
    if format != MHD_RAW:
        raise ValueError(f"unknown volume format {format!r}")

    header, payload_offset = _read_mhd_header(path)
    dims_h = _header_ints(header, "DimSize", path, 3)
    spacing = _header_floats(header, "ElementSpacing", path, 3, default=(1.0, 1.0, 1.0))
    origin = _header_floats(header, "Offset", path, 3, default=(0.0, 0.0, 0.0))
    etype = header.get("ElementType")
    if etype not in _ELEMENT_TYPES:
        raise FormatError(f"{path}: ElementType must be MET_SHORT or MET_FLOAT, got {etype!r}")
    if header.get("ElementByteOrderMSB", "False").lower() == "true":
        raise FormatError(f"{path}: big-endian payloads (ElementByteOrderMSB=True) are not supported")
    nchan = int(header.get("ElementNumberOfChannels", "1"))
    if nchan != 1:
        raise FormatError(f"{path}: ElementNumberOfChannels={nchan}; scalar volume expected")
    datafile = header.get("ElementDataFile")
    if datafile is None:
        raise FormatError(f"{path}: missing ElementDataFile")

    dtype = np.dtype(_ELEMENT_TYPES[etype]).newbyteorder("<")
    nvox = dims_h[0] * dims_h[1] * dims_h[2]
    raw = _read_payload(path, datafile, payload_offset)
    expected = nvox * dtype.itemsize
    if len(raw) != expected:
        raise PayloadSizeError(
            f"{path}: payload is {len(raw)} bytes, header declares "
            f"{expected} ({nvox} voxels of {dtype.itemsize} bytes)")
    data = np.frombuffer(raw, dtype=dtype).astype(np.float32)
    return Volume3(dims_h, spacing, origin, data)


def save_volume(v: Volume3, path: str, format: str = MHD_RAW) -> None:
    """Write a volume; float32 payloads round-trip bit-exactly via load_volume.

    ``.mha`` paths get a single file with the payload inline
    (``ElementDataFile = LOCAL``); ``.mhd`` paths get a sidecar ``.raw``.
    """
    flat = np.ascontiguousarray(v.data, dtype="<f4")
    if format == RAW_F32:
        flat.tofile(path)
        return
    if format != MHD_RAW:
        raise ValueError(f"unknown volume format {format!r}")
    local = path.endswith(".mha")
    header = _mhd_header_text(v.dims, v.spacing_mm, v.origin_mm, "MET_FLOAT",
                              "LOCAL" if local else os.path.basename(_raw_path(path)))
    if local:
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(flat.tobytes())
    else:
        with open(path, "w", encoding="ascii") as f:
            f.write(header)
        flat.tofile(_raw_path(path))


def normalize_hu(v: Volume3) -> Volume3:
    """Map each voxel x -> (x + 1000) / 2000. Pure affine map, no clamping."""
    return v.with_data((v.data.astype(np.float64) + 1000.0) / 2000.0)


def denormalize(v: Volume3) -> Volume3:
    """Inverse of normalize_hu: x -> 2000*x - 1000, back to HU."""
    return v.with_data(v.data.astype(np.float64) * 2000.0 - 1000.0)


def extract_slice(v: Volume3, axis: str, index: int) -> SliceImage:
    """Extract the plane at ``index`` along ``axis``, in HU.

    See ``SliceImage`` for the row/column orientation.
    """
    nx, ny, nz = v.dims
    extent = {"x": nx, "y": ny, "z": nz}
    if axis not in _AXES:
        raise ValueError(f"axis must be one of {_AXES}, got {axis!r}")
    if not 0 <= index < extent[axis]:
        raise IndexError(f"index {index} out of range for axis {axis} (extent {extent[axis]})")
    if axis == "z":
        plane = v.data[index, :, :]          # rows y, cols x
    elif axis == "y":
        plane = v.data[:, index, :]          # rows z, cols x
    else:
        plane = v.data[:, :, index]          # rows z, cols y
    h, w = plane.shape
    return SliceImage(width=w, height=h, pixels=plane.copy(), axis=axis, index=index)


def window_level(s: SliceImage, lo: float, hi: float) -> SliceImage:
    """Linear map [lo, hi] HU -> [0, 255], clamped outside; 8-bit output."""
    if lo >= hi:
        raise ValueError(f"window requires lo < hi, got [{lo}, {hi}]")
    t = (s.pixels.astype(np.float64) - lo) / (hi - lo)
    px = np.rint(np.clip(t, 0.0, 1.0) * 255.0).astype(np.uint8)
    return SliceImage(width=s.width, height=s.height, pixels=px, axis=s.axis, index=s.index)


def rmse(a: Volume3, b: Volume3, mask: "RoiBox | None" = None) -> float:
    """Root mean squared intensity difference in HU, optionally over a box."""
    if a.dims != b.dims:
        raise ValueError(f"dims mismatch: {a.dims} vs {b.dims}")
    da, db = a.data, b.data
    if mask is not None:
        mask.validate(a.dims)
        sl = mask.slices()
        da, db = da[sl], db[sl]
    diff = da.astype(np.float64) - db.astype(np.float64)
    return float(np.sqrt(np.mean(diff * diff)))


# ---------------------------------------------------------------- internals

def _raw_path(mhd_path: str) -> str:
    base, _ = os.path.splitext(mhd_path)
    return base + ".raw"


def _mhd_header_text(dims, spacing, origin, element_type: str, datafile: str,
                     channels: int = 1) -> str:
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "ElementByteOrderMSB = False",
        f"DimSize = {dims[0]} {dims[1]} {dims[2]}",
        f"ElementSpacing = {spacing[0]:g} {spacing[1]:g} {spacing[2]:g}",
        f"Offset = {origin[0]:g} {origin[1]:g} {origin[2]:g}",
    ]
    if channels != 1:
        lines.append(f"ElementNumberOfChannels = {channels}")
    lines.append(f"ElementType = {element_type}")
    lines.append(f"ElementDataFile = {datafile}")
    return "\n".join(lines) + "\n"


def _read_mhd_header(path: str) -> tuple[dict, int]:
    """Parse `Key = Value` lines until ElementDataFile; return (header, payload offset)."""
    header: dict[str, str] = {}
    offset = 0
    with open(path, "rb") as f:
        while True:
            line = f.readline()
            if not line:
                break
            try:
                text = line.decode("ascii")
            except UnicodeDecodeError as e:
                raise FormatError(f"{path}: non-ASCII bytes in header ({e})") from e
            if "=" not in text:
                raise FormatError(f"{path}: malformed header line {text.strip()!r}")
            key, _, value = text.partition("=")
            header[key.strip()] = value.strip()
            if key.strip() == "ElementDataFile":
                offset = f.tell()
                break
    if "ElementDataFile" not in header:
        raise FormatError(f"{path}: header ended before ElementDataFile")
    ndims = header.get("NDims")
    if ndims is not None and ndims.strip() != "3":
        raise FormatError(f"{path}: NDims must be 3, got {ndims}")
    return header, offset


def _read_payload(header_path: str, datafile: str, payload_offset: int) -> bytes:
    if datafile.upper() == "LOCAL":
        with open(header_path, "rb") as f:
            f.seek(payload_offset)
            return f.read()
    raw_path = os.path.join(os.path.dirname(header_path) or ".", datafile)
    if not os.path.exists(raw_path):
        raise FormatError(f"{header_path}: ElementDataFile {datafile!r} not found next to header")
    with open(raw_path, "rb") as f:
        return f.read()


def _header_ints(header: dict, key: str, path: str, n: int) -> tuple[int, ...]:
    if key not in header:
        raise FormatError(f"{path}: missing {key}")
    try:
        vals = tuple(int(t) for t in header[key].split())
    except ValueError as e:
        raise FormatError(f"{path}: {key} is not a list of integers: {header[key]!r}") from e
    if len(vals) != n:
        raise FormatError(f"{path}: {key} must have {n} entries, got {len(vals)}")
    return vals


def _header_floats(header: dict, key: str, path: str, n: int, default=None):
    if key not in header:
        if default is not None:
            return default
        raise FormatError(f"{path}: missing {key}")
    try:
        vals = tuple(float(t) for t in header[key].split())
    except ValueError as e:
        raise FormatError(f"{path}: {key} is not a list of numbers: {header[key]!r}") from e
    if len(vals) != n:
        raise FormatError(f"{path}: {key} must have {n} entries, got {len(vals)}")
    return vals
