import numpy as np
import pytest

from boxreg.volume import Volume3
from boxreg.transform import DisplacementField


def make_smooth_volume(dims, rng, amplitude=400.0, offset=-100.0) -> Volume3:
    """Band-limited random volume: a sum of low-frequency 3D cosines.

    Smooth everywhere, so interpolated values vary gently between voxels —
    the right substrate for finite-difference comparisons.
    """
    nx, ny, nz = dims
    zz, yy, xx = np.meshgrid(np.arange(nz, dtype=np.float64),
                             np.arange(ny, dtype=np.float64),
                             np.arange(nx, dtype=np.float64), indexing="ij")
    data = np.full((nz, ny, nx), offset, dtype=np.float64)
    for _ in range(4):
        k = rng.uniform(0.05, 0.25, size=3)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        a = rng.uniform(0.3, 1.0) * amplitude
        data += a * np.cos(2.0 * np.pi * (k[0] * xx + k[1] * yy + k[2] * zz) + phase)
    return Volume3(dims, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), data.astype(np.float32))


def make_fd_safe_dvf(dims, rng) -> DisplacementField:
    """Random field whose sampling positions stay >= 0.15 voxels away from
    every integer coordinate: finite-difference stencils around such points
    never cross an interpolation cell boundary or the volume edge."""
    nx, ny, nz = dims
    mag = rng.uniform(0.15, 0.45, size=(nz, ny, nx, 3))
    sign = np.where(rng.uniform(size=(nz, ny, nx, 3)) < 0.5, -1.0, 1.0)
    return DisplacementField(dims, (mag * sign).astype(np.float32))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
