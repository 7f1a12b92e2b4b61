"""Dense 3D scalar volumes: storage, sampling, smoothing, preprocessing.

Conventions used throughout the package:

- arrays are indexed [x, y, z]; the serialized byte order is x-fastest
  (ravel the (nx, ny, nz) array in Fortran order)
- voxel values are stored as float32; loss accumulations run in float64
- continuous coordinates are in voxel units; sampling outside the grid
  clamps to the boundary face
- volumes are immutable after construction (the data array is marked
  read-only), so they can be shared freely across threads
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from . import _kernels
from .errors import ChannelMismatchError, GridMismatchError, InvalidWindowError

HU_SOFT_TISSUE_LO = -170.0
HU_SOFT_TISSUE_HI = 230.0


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume3:
    """A scalar field on a regular (nx, ny, nz) voxel grid."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"expected 3D data, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"non-positive dims {self.data.shape}")
        object.__setattr__(self, "data", _freeze(self.data))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def from_flat(cls, flat, dims, spacing=(1.0, 1.0, 1.0)) -> "Volume3":
        """Build from a flat buffer in x-fastest order."""
        nx, ny, nz = dims
        flat = np.asarray(flat, dtype=np.float32)
        if flat.size != nx * ny * nz:
            raise ValueError(f"buffer size {flat.size} != {nx}*{ny}*{nz}")
        return cls(flat.reshape((nx, ny, nz), order="F"), spacing)

    def to_flat(self) -> np.ndarray:
        """Flat copy in x-fastest order (the file payload layout)."""
        return self.data.ravel(order="F")


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """K soft mask channels sharing one grid, each named.

    Channels hold values in [0, 1]; a channel thresholded at 0.5 is a
    binary mask. Stored as one (nx, ny, nz, K) float32 array.
    """

    data: np.ndarray
    names: tuple[str, ...]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"expected (nx,ny,nz,K) data, got {self.data.shape}")
        if self.data.shape[3] != len(self.names):
            raise ChannelMismatchError(
                f"{self.data.shape[3]} channels but {len(self.names)} names"
            )
        object.__setattr__(self, "data", _freeze(self.data))
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def num_channels(self) -> int:
        return self.data.shape[3]

    def channel(self, key) -> Volume3:
        """One channel as a Volume3; key is an index or a name."""
        idx = self.names.index(key) if isinstance(key, str) else int(key)
        return Volume3(self.data[..., idx], self.spacing)

    def masks(self, threshold: float = 0.5) -> np.ndarray:
        """Binarized channels, shape (nx, ny, nz, K) bool."""
        return self.data >= threshold

    def subset(self, names) -> "LabelVolume":
        """The channels named in `names`, in that order."""
        from .errors import UnknownLabelError

        idx = []
        for n in names:
            if n not in self.names:
                raise UnknownLabelError(n, self.names)
            idx.append(self.names.index(n))
        return LabelVolume(self.data[..., idx], tuple(names), self.spacing)

    @classmethod
    def from_channels(cls, channels, names, spacing=(1.0, 1.0, 1.0)) -> "LabelVolume":
        arrs = [c.data if isinstance(c, Volume3) else np.asarray(c) for c in channels]
        dims = arrs[0].shape
        for a in arrs[1:]:
            if a.shape != dims:
                raise GridMismatchError(f"channel dims differ: {a.shape} vs {dims}")
        return cls(np.stack(arrs, axis=-1), tuple(names), spacing)


def require_same_grid(a, b, what="operands"):
    if a.dims != b.dims:
        raise GridMismatchError(f"{what} on different grids: {a.dims} vs {b.dims}")


def sample_trilinear(vol: Volume3, p) -> float | np.ndarray:
    """Trilinear interpolation at continuous voxel coordinates.

    p is one (3,) point or an (N, 3) array; out-of-bounds coordinates are
    clamped to the boundary face. Total function, returns float32 values.
    """
    pts = np.atleast_2d(np.asarray(p, dtype=np.float32))
    out = np.empty(pts.shape[0], dtype=np.float32)
    _kernels.sample3d(
        vol.data,
        np.ascontiguousarray(pts[:, 0]),
        np.ascontiguousarray(pts[:, 1]),
        np.ascontiguousarray(pts[:, 2]),
        out,
    )
    return float(out[0]) if np.asarray(p).ndim == 1 else out


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Discrete Gaussian truncated at +-ceil(3*sigma) taps, sum 1, float64."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.ones(1)
    r = int(np.ceil(3.0 * sigma))
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def smooth_array(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable 3-pass Gaussian on the first three axes, edge-replicated.

    Works on (nx,ny,nz) scalars and (nx,ny,nz,C) fields alike; sigma == 0
    returns the input unchanged.
    """
    if sigma == 0:
        return arr
    k = gaussian_kernel_1d(sigma)
    out = np.asarray(arr, dtype=np.float32)
    for axis in range(3):
        out = correlate1d(out, k, axis=axis, mode="nearest", output=np.float32)
    return out


def gaussian_smooth(vol: Volume3, sigma: float) -> Volume3:
    """Separable Gaussian smoothing; sigma in voxels, 0 is the identity."""
    if sigma == 0:
        return vol
    return Volume3(smooth_array(vol.data, sigma), vol.spacing)


def preprocess(
    vol: Volume3, lo: float = HU_SOFT_TISSUE_LO, hi: float = HU_SOFT_TISSUE_HI
) -> Volume3:
    """Clamp to the [lo, hi] intensity window and rescale to [0, 1]."""
    if lo >= hi:
        raise InvalidWindowError(f"invalid window: lo={lo} >= hi={hi}")
    out = (np.clip(vol.data, lo, hi) - lo) / (hi - lo)
    return Volume3(out, vol.spacing)


def resample(vol: Volume3, new_dims) -> Volume3:
    """Trilinear resampling; maps the old node extent onto the new one.

    New node i' lands at old coordinate i' * (n-1)/(n'-1) per axis (a
    single-node axis collapses to the old axis center). Physical extent is
    preserved, so the spacing rescales by the same factor.
    """
    new_dims = tuple(int(d) for d in new_dims)
    if min(new_dims) < 1:
        raise ValueError(f"non-positive dims {new_dims}")
    if new_dims == vol.dims:
        return vol
    axes = []
    scale = []
    for n_old, n_new in zip(vol.dims, new_dims):
        if n_new == 1:
            axes.append(np.full(1, (n_old - 1) / 2.0, dtype=np.float32))
            scale.append(float(n_old - 1))
        else:
            f = (n_old - 1) / (n_new - 1)
            axes.append((np.arange(n_new) * f).astype(np.float32))
            scale.append(f)
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts_x = np.ascontiguousarray(gx.ravel())
    pts_y = np.ascontiguousarray(gy.ravel())
    pts_z = np.ascontiguousarray(gz.ravel())
    out = np.empty(pts_x.size, dtype=np.float32)
    _kernels.sample3d(vol.data, pts_x, pts_y, pts_z, out)
    spacing = tuple(s * f for s, f in zip(vol.spacing, scale))
    return Volume3(out.reshape(new_dims), spacing)
