"""The nine-path input pipeline and the synthetic phantom generator.

Axis convention: x = left-right, y = posterior-anterior, z = inferior-superior.
Axial slices fix z (images are x*y), coronal fix y (x*z), sagittal fix x (y*z).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .volume_io import Modality, Volume

_STD_EPS = 1e-6


class Plane(enum.Enum):
    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"

    @property
    def normal_axis(self) -> int:
        return {Plane.AXIAL: 2, Plane.CORONAL: 1, Plane.SAGITTAL: 0}[self]

    @property
    def inplane_axes(self) -> tuple[int, int]:
        return tuple(a for a in (0, 1, 2) if a != self.normal_axis)


class NormScheme(enum.Enum):
    IN_PLANE = "in_plane"
    CROSS_PLANE = "cross_plane"
    BOTH = "both"


@dataclass(frozen=True)
class PathConfig:
    plane: Plane
    norm: NormScheme
    index: int


#: Canonical plane-major ordering of the nine (plane, normalization) paths.
PATH_CONFIGS: tuple[PathConfig, ...] = tuple(
    PathConfig(plane, norm, 3 * pi + ni)
    for pi, plane in enumerate((Plane.AXIAL, Plane.CORONAL, Plane.SAGITTAL))
    for ni, norm in enumerate((NormScheme.IN_PLANE, NormScheme.CROSS_PLANE, NormScheme.BOTH))
)


def _zscore(data: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    """Z-score with population std over ``axes``; degenerate groups map to 0."""
    work = data.astype(np.float64)
    mean = work.mean(axis=axes, keepdims=True)
    std = work.std(axis=axes, keepdims=True)
    degenerate = std < _STD_EPS
    out = (work - mean) / np.where(degenerate, 1.0, std)
    return np.where(degenerate, 0.0, out)


def normalize(v: Volume, plane: Plane, scheme: NormScheme) -> Volume:
    """Apply one of the three normalization schemes relative to ``plane``.

    IN_PLANE z-scores every 2D slice of the plane independently; CROSS_PLANE
    z-scores every 1D fiber along the plane normal; BOTH chains them in that
    order. Slices/fibers with population std below 1e-6 become all zeros.
    """
    data = v.data
    if scheme in (NormScheme.IN_PLANE, NormScheme.BOTH):
        data = _zscore(data, plane.inplane_axes)
    if scheme in (NormScheme.CROSS_PLANE, NormScheme.BOTH):
        data = _zscore(data, (plane.normal_axis,))
    return Volume(data=data.astype(np.float32), voxel_mm=v.voxel_mm, modality=v.modality)


def slice_volume(v: Volume, plane: Plane) -> list[np.ndarray]:
    """Split a volume into its ordered 2D slices along the plane normal."""
    axis = plane.normal_axis
    return [np.take(v.data, i, axis=axis) for i in range(v.dims[axis])]


def restack(slices, plane: Plane, dims, voxel_mm=(1.0, 1.0, 1.0),
            modality: Modality = Modality.T1) -> Volume:
    """Inverse of :func:`slice_volume`; validates counts and shapes."""
    dims = tuple(int(d) for d in dims)
    axis = plane.normal_axis
    expected_count = dims[axis]
    expected_shape = tuple(dims[a] for a in plane.inplane_axes)
    slices = list(slices)
    if len(slices) != expected_count:
        raise DimensionError(
            f"restack: got {len(slices)} slices, expected {expected_count} for {plane.name}"
        )
    for i, s in enumerate(slices):
        if tuple(np.shape(s)) != expected_shape:
            raise DimensionError(
                f"restack: slice {i} has shape {np.shape(s)}, expected {expected_shape}"
            )
    data = np.stack(slices, axis=axis)
    return Volume(data=data, voxel_mm=voxel_mm, modality=modality)


def flip_lr(v: Volume) -> Volume:
    """Mirror across the x axis (index x -> dx-1-x); an involution."""
    return Volume(data=v.data[::-1].copy(), voxel_mm=v.voxel_mm, modality=v.modality)


@dataclass
class PhantomSpec:
    """Parameters of the synthetic lesion phantom used in place of real scans.

    Lesion ellipsoids are confined to the left half (x < dx/2) of the brain
    ellipsoid. Lesions are hypointense on T1 and hyperintense on FLAIR.
    """

    dims: tuple[int, int, int]
    voxel_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    brain_semiaxes: tuple[float, float, float] | None = None  # None -> 0.42 * dims
    lesion_count: tuple[int, int] = (1, 3)
    lesion_semiaxes: tuple[float, float] = (2.0, 5.0)
    base_intensity: float = 0.8
    t1_delta: float = -0.3
    flair_delta: float = 0.3
    noise_sigma: float = 0.05
    seed: int = 0


def _ellipsoid_mask(dims, center, semiaxes) -> np.ndarray:
    x, y, z = np.ogrid[: dims[0], : dims[1], : dims[2]]
    return (
        ((x - center[0]) / semiaxes[0]) ** 2
        + ((y - center[1]) / semiaxes[1]) ** 2
        + ((z - center[2]) / semiaxes[2]) ** 2
    ) <= 1.0


def gen_phantom(spec: PhantomSpec) -> tuple[Volume, Volume, Volume]:
    """Generate a deterministic (t1, flair, truth-mask) phantom triple."""
    dims = tuple(int(d) for d in spec.dims)
    if len(dims) != 3 or any(d % 16 != 0 or d <= 0 for d in dims):
        raise ConfigError(f"phantom dims must be positive multiples of 16, got {dims}")
    lo, hi = spec.lesion_count
    if lo < 0 or hi < lo:
        raise ConfigError(f"bad lesion_count range {spec.lesion_count}")
    s_lo, s_hi = spec.lesion_semiaxes
    if s_lo < 1.0 or s_hi < s_lo:
        raise ConfigError(f"bad lesion_semiaxes range {spec.lesion_semiaxes}")

    rng = np.random.default_rng(spec.seed)
    center = tuple((d - 1) / 2.0 for d in dims)
    brain_axes = spec.brain_semiaxes or tuple(0.42 * d for d in dims)
    brain = _ellipsoid_mask(dims, center, brain_axes)

    lesion = np.zeros(dims, dtype=bool)
    n_lesions = int(rng.integers(lo, hi + 1))
    for _ in range(n_lesions):
        for _attempt in range(200):
            ax = rng.uniform(s_lo, s_hi, size=3)
            if ax[0] + 1 >= dims[0] / 2 - ax[0]:
                continue
            cx = rng.uniform(ax[0] + 1, dims[0] / 2 - ax[0])
            cy = rng.uniform(ax[1] + 1, dims[1] - ax[1] - 1)
            cz = rng.uniform(ax[2] + 1, dims[2] - ax[2] - 1)
            # bounding guarantee: every lesion voxel stays inside the brain
            reach = np.sqrt(sum(
                ((abs(c - cc) + a) / b) ** 2
                for c, cc, a, b in zip((cx, cy, cz), center, ax, brain_axes)
            ))
            if reach <= 0.95:
                lesion |= _ellipsoid_mask(dims, (cx, cy, cz), ax)
                break
        else:
            raise ConfigError(
                "could not place a lesion inside the left brain half; "
                "shrink lesion_semiaxes or enlarge dims/brain_semiaxes"
            )

    base = np.where(brain, np.float32(spec.base_intensity), np.float32(0.0))
    t1 = base + np.where(lesion, np.float32(spec.t1_delta), np.float32(0.0))
    flair = base + np.where(lesion, np.float32(spec.flair_delta), np.float32(0.0))
    t1 = t1 + (spec.noise_sigma * rng.standard_normal(dims)).astype(np.float32)
    flair = flair + (spec.noise_sigma * rng.standard_normal(dims)).astype(np.float32)

    make = lambda data, modality: Volume(data=data, voxel_mm=spec.voxel_mm, modality=modality)
    return (
        make(t1, Modality.T1),
        make(flair, Modality.FLAIR),
        make(lesion.astype(np.float32), Modality.MASK),
    )
