"""Synthetic test-pair generator with known ground-truth deformation.

Renders an analytic anatomy (ellipsoidal body, low-intensity lung-like
ellipsoids, a small bright lesion) with anti-aliased edges, displaces it by
a sum of Gaussian displacement bumps to produce the moving anatomy, and
then contaminates the two images with *independent* streak patterns plus
Gaussian noise. The streaks are straight lines with Gaussian cross-profiles
at random in-plane angles — a statistical stand-in for undersampling
streaks; what matters is that they are strong, spatially extended, and have
no correspondence between the two images, which is exactly the regime where
full-image optimization stalls on a small region of interest.

Everything is generated with ``np.random.default_rng`` from seeds carried
in the spec, so the same spec regenerates bit-identical volumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .volume import Volume3
from .transform import DisplacementField, RoiBox, warp


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    intensity: float

    def validate(self, name: str) -> None:
        if len(self.center) != 3 or len(self.radii) != 3:
            raise ValueError(f"{name}: center and radii must be 3-vectors")
        if min(self.radii) <= 0:
            raise ValueError(f"{name}.radii must be positive, got {self.radii}")
        if not all(np.isfinite(self.center)) or not np.isfinite(self.intensity):
            raise ValueError(f"{name}: center and intensity must be finite")


@dataclass(frozen=True)
class Lesion:
    center: tuple[float, float, float]
    radius: float
    intensity: float

    def validate(self, name: str = "lesion") -> None:
        if self.radius <= 0:
            raise ValueError(f"{name}.radius must be positive, got {self.radius}")
        if not all(np.isfinite(self.center)) or not np.isfinite(self.intensity):
            raise ValueError(f"{name}: center and intensity must be finite")


@dataclass(frozen=True)
class GaussianBump:
    """One smooth displacement bump: amplitude * exp(-|x - center|^2 / 2 sigma^2)."""

    center: tuple[float, float, float]
    sigma: float
    amplitude: tuple[float, float, float]

    def validate(self, name: str = "bump") -> None:
        if self.sigma <= 0:
            raise ValueError(f"{name}.sigma must be positive, got {self.sigma}")
        if len(self.amplitude) != 3 or not all(np.isfinite(self.amplitude)):
            raise ValueError(f"{name}.amplitude must be a finite 3-vector")


@dataclass(frozen=True)
class ArtifactSpec:
    streak_count: int = 40
    amplitude: float = 300.0
    streak_sigma: float = 1.2
    seed_fixed: int = 101
    seed_moving: int = 202

    def validate(self) -> None:
        if self.streak_count < 0:
            raise ValueError(f"artifact.streak_count must be >= 0, got {self.streak_count}")
        if self.streak_sigma <= 0:
            raise ValueError(f"artifact.streak_sigma must be positive, got {self.streak_sigma}")
        if not np.isfinite(self.amplitude):
            raise ValueError("artifact.amplitude must be finite")
        if self.streak_count > 0 and self.seed_fixed == self.seed_moving:
            raise ValueError("artifact.seed_fixed and artifact.seed_moving must differ "
                             "(the two images' streaks are uncorrelated)")


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    background: float = -1000.0
    body: Ellipsoid = field(default_factory=lambda: Ellipsoid(
        center=(31.5, 31.5, 31.5), radii=(26.0, 26.0, 28.0), intensity=0.0))
    lungs: tuple[Ellipsoid, ...] = field(default_factory=lambda: (
        Ellipsoid(center=(20.0, 30.0, 32.0), radii=(9.0, 11.0, 16.0), intensity=-800.0),
        Ellipsoid(center=(43.0, 30.0, 32.0), radii=(9.0, 11.0, 16.0), intensity=-800.0),
    ))
    lesion: Lesion = field(default_factory=lambda: Lesion(
        center=(20.0, 30.0, 34.0), radius=4.0, intensity=100.0))
    gt_deformation: tuple[GaussianBump, ...] = field(default_factory=lambda: (
        GaussianBump(center=(20.0, 30.0, 34.0), sigma=6.0,
                     amplitude=(8.0 / 3.0, -8.0 / 3.0, 4.0 / 3.0)),
    ))
    artifact: ArtifactSpec = field(default_factory=ArtifactSpec)
    noise_sigma: float = 20.0
    rng_seed: int = 7

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ValueError(f"dims must be three sizes >= 2, got {self.dims}")
        self.body.validate("body")
        for i, lung in enumerate(self.lungs):
            lung.validate(f"lungs[{i}]")
        self.lesion.validate("lesion")
        for i, bump in enumerate(self.gt_deformation):
            bump.validate(f"gt_deformation[{i}]")
        self.artifact.validate()
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        gt = ground_truth_dvf(self)
        mags = np.sqrt(np.sum(gt.data.astype(np.float64) ** 2, axis=-1))
        limit = min(self.dims) / 4.0
        if mags.max() >= limit:
            raise ValueError(f"gt_deformation: max displacement {mags.max():.3f} must be "
                             f"< min(dims)/4 = {limit:.3f} to stay in-bounds")

    # -- JSON ---------------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "background": self.background,
            "body": _ellipsoid_dict(self.body),
            "lungs": [_ellipsoid_dict(e) for e in self.lungs],
            "lesion": {"center": list(self.lesion.center), "radius": self.lesion.radius,
                       "intensity": self.lesion.intensity},
            "gt_deformation": [{"center": list(b.center), "sigma": b.sigma,
                                "amplitude": list(b.amplitude)} for b in self.gt_deformation],
            "artifact": {"streak_count": self.artifact.streak_count,
                         "amplitude": self.artifact.amplitude,
                         "streak_sigma": self.artifact.streak_sigma,
                         "seed_fixed": self.artifact.seed_fixed,
                         "seed_moving": self.artifact.seed_moving},
            "noise_sigma": self.noise_sigma,
            "rng_seed": self.rng_seed,
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_json_dict(), indent=indent)

    @classmethod
    def from_json_dict(cls, d: dict) -> "PhantomSpec":
        kwargs = {}
        if "dims" in d:
            kwargs["dims"] = tuple(int(v) for v in d["dims"])
        if "background" in d:
            kwargs["background"] = float(d["background"])
        if "body" in d:
            kwargs["body"] = _ellipsoid_from(d["body"])
        if "lungs" in d:
            kwargs["lungs"] = tuple(_ellipsoid_from(e) for e in d["lungs"])
        if "lesion" in d:
            e = d["lesion"]
            kwargs["lesion"] = Lesion(tuple(float(v) for v in e["center"]),
                                      float(e["radius"]), float(e["intensity"]))
        if "gt_deformation" in d:
            kwargs["gt_deformation"] = tuple(
                GaussianBump(tuple(float(v) for v in b["center"]), float(b["sigma"]),
                             tuple(float(v) for v in b["amplitude"]))
                for b in d["gt_deformation"])
        if "artifact" in d:
            kwargs["artifact"] = ArtifactSpec(**d["artifact"])
        if "noise_sigma" in d:
            kwargs["noise_sigma"] = float(d["noise_sigma"])
        if "rng_seed" in d:
            kwargs["rng_seed"] = int(d["rng_seed"])
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        return cls.from_json_dict(json.loads(text))


def _ellipsoid_dict(e: Ellipsoid) -> dict:
    return {"center": list(e.center), "radii": list(e.radii), "intensity": e.intensity}


def _ellipsoid_from(d: dict) -> Ellipsoid:
    return Ellipsoid(tuple(float(v) for v in d["center"]),
                     tuple(float(v) for v in d["radii"]), float(d["intensity"]))


class PhantomPair(NamedTuple):
    """Generated images plus evaluation-only extras. ``fixed_clean`` and
    ``moving_clean`` are the artifact-free, noise-free anatomies; alignment
    quality against ground truth is best measured on them."""

    fixed: Volume3
    moving: Volume3
    gt_dvf: DisplacementField
    fixed_clean: Volume3
    moving_clean: Volume3


# ---------------------------------------------------------------- rendering

def _grid(dims: tuple[int, int, int]):
    nx, ny, nz = dims
    zz, yy, xx = np.meshgrid(np.arange(nz, dtype=np.float64),
                             np.arange(ny, dtype=np.float64),
                             np.arange(nx, dtype=np.float64), indexing="ij")
    return xx, yy, zz


def _smoothstep01(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _paint_ellipsoid(img: np.ndarray, xx, yy, zz, center, radii, intensity: float) -> None:
    """Blend an ellipsoid into img with a ~1-voxel smoothstep edge."""
    cx, cy, cz = center
    rx, ry, rz = radii
    r = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 + ((zz - cz) / rz) ** 2)
    r_avg = (rx + ry + rz) / 3.0
    t = (1.0 - r) * r_avg  # approximate signed distance to the surface, voxels
    alpha = _smoothstep01(t + 0.5)
    np.multiply(img, 1.0 - alpha, out=img)
    img += intensity * alpha


def render_anatomy(spec: PhantomSpec) -> Volume3:
    """The anatomy image alone: background, body, lungs, lesion — no
    deformation, artifacts, or noise."""
    nx, ny, nz = spec.dims
    xx, yy, zz = _grid(spec.dims)
    img = np.full((nz, ny, nx), spec.background, dtype=np.float64)
    _paint_ellipsoid(img, xx, yy, zz, spec.body.center, spec.body.radii,
                     spec.body.intensity)
    for lung in spec.lungs:
        _paint_ellipsoid(img, xx, yy, zz, lung.center, lung.radii, lung.intensity)
    r = spec.lesion.radius
    _paint_ellipsoid(img, xx, yy, zz, spec.lesion.center, (r, r, r),
                     spec.lesion.intensity)
    return Volume3(spec.dims, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), img.astype(np.float32))


def ground_truth_dvf(spec: PhantomSpec) -> DisplacementField:
    """Sum of the spec's Gaussian displacement bumps, sampled on the grid."""
    nx, ny, nz = spec.dims
    xx, yy, zz = _grid(spec.dims)
    d = np.zeros((nz, ny, nx, 3), dtype=np.float64)
    for bump in spec.gt_deformation:
        cx, cy, cz = bump.center
        w = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2 + (zz - cz) ** 2)
                   / (2.0 * bump.sigma ** 2))
        for c in range(3):
            d[..., c] += bump.amplitude[c] * w
    return DisplacementField(spec.dims, d.astype(np.float32))


def _streaks(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Sum of straight-line patterns with Gaussian cross-profiles.

    Lines pass through random interior points at random axial angles with a
    small out-of-plane tilt; each carries a random sign at the configured
    amplitude.
    """
    nx, ny, nz = spec.dims
    art = spec.artifact
    out = np.zeros((nz, ny, nx), dtype=np.float64)
    if art.streak_count == 0:
        return out
    xx, yy, zz = _grid(spec.dims)
    two_sig2 = 2.0 * art.streak_sigma ** 2
    for _ in range(art.streak_count):
        p0 = rng.uniform([nx * 0.2, ny * 0.2, nz * 0.2], [nx * 0.8, ny * 0.8, nz * 0.8])
        theta = rng.uniform(0.0, np.pi)
        tilt = rng.uniform(-0.2, 0.2)
        u = np.array([np.cos(theta), np.sin(theta), tilt])
        u /= np.linalg.norm(u)
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        wx, wy, wz = xx - p0[0], yy - p0[1], zz - p0[2]
        proj = wx * u[0] + wy * u[1] + wz * u[2]
        r2 = (wx * wx + wy * wy + wz * wz) - proj * proj
        out += sign * art.amplitude * np.exp(-np.clip(r2, 0.0, None) / two_sig2)
    return out


def _contaminate(clean: Volume3, spec: PhantomSpec, image_seed: int) -> Volume3:
    rng = np.random.default_rng([spec.rng_seed, image_seed])
    data = clean.data.astype(np.float64)
    data = data + _streaks(spec, rng)
    if spec.noise_sigma > 0:
        data = data + rng.normal(0.0, spec.noise_sigma, size=data.shape)
    return clean.with_data(data.astype(np.float32))


# --------------------------------------------------------------- interface

def generate(spec: PhantomSpec) -> PhantomPair:
    """Generate the full pair plus evaluation-only clean anatomies.

    The moving image is the anatomy warped by the ground-truth field; its
    artifacts and noise are then added from a different seed than the fixed
    image's, so the contamination has no correspondence between the two.
    """
    spec.validate()
    gt = ground_truth_dvf(spec)
    fixed_clean = render_anatomy(spec)
    moving_clean = warp(fixed_clean, gt)
    fixed = _contaminate(fixed_clean, spec, spec.artifact.seed_fixed)
    moving = _contaminate(moving_clean, spec, spec.artifact.seed_moving)
    return PhantomPair(fixed=fixed, moving=moving, gt_dvf=gt,
                       fixed_clean=fixed_clean, moving_clean=moving_clean)


def generate_pair(spec: PhantomSpec) -> tuple[Volume3, Volume3, DisplacementField]:
    """(fixed, moving, ground-truth field) — see ``generate`` for the extras."""
    pair = generate(spec)
    return pair.fixed, pair.moving, pair.gt_dvf


def lesion_roi(spec: PhantomSpec, margin: float = 8.0) -> RoiBox:
    """Axis-aligned box around the lesion, padded by ``margin`` voxels and
    clamped to the volume. The default margin covers the displaced
    neighborhood of the default deformation bump."""
    nx, ny, nz = spec.dims
    cx, cy, cz = spec.lesion.center
    r = spec.lesion.radius + margin
    lo = (max(0, int(np.floor(cx - r))), max(0, int(np.floor(cy - r))),
          max(0, int(np.floor(cz - r))))
    hi = (min(nx - 1, int(np.ceil(cx + r))), min(ny - 1, int(np.ceil(cy + r))),
          min(nz - 1, int(np.ceil(cz + r))))
    return RoiBox(lo, hi)


def dvf_error(dvf: DisplacementField, gt: DisplacementField,
              roi: RoiBox | None = None) -> dict:
    """Euclidean endpoint-error statistics between two fields, in voxels."""
    if dvf.dims != gt.dims:
        raise ValueError(f"dims mismatch: {dvf.dims} vs {gt.dims}")
    diff = dvf.data.astype(np.float64) - gt.data.astype(np.float64)
    err = np.sqrt(np.sum(diff * diff, axis=-1))
    if roi is not None:
        roi.validate(dvf.dims)
        err = err[roi.slices()]
    return {"mean": float(err.mean()), "max": float(err.max())}
