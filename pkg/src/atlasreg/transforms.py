"""Deformation representations and the diffeomorphism machinery.

Displacement semantics: a field u defines the map phi(g) = g + u(g), and
warping pulls intensities back through it, out(g) = vol(g + u(g)). Chains
of warps therefore compose innermost-last: the map applied to the image
first is the outer one. All fields live on the image grid, in voxel units.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .errors import GridMismatchError
from .volume import LabelVolume, Volume3, _freeze

SS_STEPS_DEFAULT = 8


@dataclass(frozen=True, eq=False)
class AffineParams:
    """12 parameters [A | t] acting on homogeneous voxel coordinates."""

    a: np.ndarray  # (3, 4) float64

    def __post_init__(self):
        arr = np.array(self.a, dtype=np.float64).reshape(3, 4)
        arr.setflags(write=False)
        object.__setattr__(self, "a", arr)

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls(np.hstack([np.eye(3), np.zeros((3, 1))]))

    @classmethod
    def from_vector(cls, vec) -> "AffineParams":
        return cls(np.asarray(vec, dtype=np.float64).reshape(3, 4))

    def as_vector(self) -> np.ndarray:
        return self.a.ravel().copy()

    @property
    def matrix(self) -> np.ndarray:
        return self.a[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.a[:, 3]

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 3) voxel coordinates through A.p + t."""
        return points @ self.matrix.T + self.translation


def _check_field(arr, what):
    arr = np.asarray(arr)
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValueError(f"{what} must have shape (nx,ny,nz,3), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{what} contains non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class VelocityField:
    """Stationary velocity, voxels per unit flow time, on the image grid."""

    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v", _freeze(_check_field(self.v, "velocity")))

    @property
    def dims(self):
        return self.v.shape[:3]


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Voxel-wise displacement u, so phi(g) = g + u(g)."""

    u: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u", _freeze(_check_field(self.u, "displacement")))

    @property
    def dims(self):
        return self.u.shape[:3]


@dataclass(frozen=True, eq=False)
class VelocityDistribution:
    """Per-voxel diagonal Gaussian over velocities: mean and log-variance."""

    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mu = _check_field(self.mu, "mu")
        lv = _check_field(self.log_var, "log_var")
        if mu.shape != lv.shape:
            raise GridMismatchError(f"mu {mu.shape} vs log_var {lv.shape}")
        object.__setattr__(self, "mu", _freeze(mu))
        object.__setattr__(self, "log_var", _freeze(lv))

    @property
    def dims(self):
        return self.mu.shape[:3]


@lru_cache(maxsize=8)
def grid_coords(dims) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flat float32 x/y/z coordinates of every voxel, C order."""
    nx, ny, nz = dims
    gx, gy, gz = np.meshgrid(
        np.arange(nx, dtype=np.float32),
        np.arange(ny, dtype=np.float32),
        np.arange(nz, dtype=np.float32),
        indexing="ij",
    )
    out = tuple(np.ascontiguousarray(g.ravel()) for g in (gx, gy, gz))
    for g in out:
        g.setflags(write=False)
    return out


def _warp_points(dims, u_arr):
    """Flat sample coordinates g + u(g) for every voxel."""
    gx, gy, gz = grid_coords(dims)
    uf = u_arr.reshape(-1, 3)
    return gx + uf[:, 0], gy + uf[:, 1], gz + uf[:, 2]


def sample_field_at(field_arr, xs, ys, zs) -> np.ndarray:
    """Clamped trilinear sampling of an (nx,ny,nz,3) field at flat points."""
    out = np.empty((xs.size, 3), dtype=np.float32)
    _kernels.sample_field(
        np.ascontiguousarray(field_arr, dtype=np.float32),
        np.ascontiguousarray(xs, dtype=np.float32),
        np.ascontiguousarray(ys, dtype=np.float32),
        np.ascontiguousarray(zs, dtype=np.float32),
        out,
    )
    return out


def affine_to_displacement(aff: AffineParams, dims) -> DisplacementField:
    """Displacement u(g) = A.g + t - g on the given grid."""
    dims = tuple(int(d) for d in dims)
    gx, gy, gz = grid_coords(dims)
    pts = np.stack([gx, gy, gz], axis=1).astype(np.float64)
    u = (aff.apply(pts) - pts).astype(np.float32)
    return DisplacementField(u.reshape(dims + (3,)))


def integrate_ss_array(v_arr, steps=SS_STEPS_DEFAULT, keep_intermediates=False):
    """Scaling-and-squaring exponential of a velocity array.

    Scales the field to v / 2**steps and self-composes `steps` times; the
    result is the unit-time flow displacement. Out-of-grid positions during
    squaring are clamped (like all sampling). Optionally returns the list of
    intermediate fields [u_0 .. u_{steps-1}] consumed by the gradient
    transport.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    v_arr = np.ascontiguousarray(v_arr, dtype=np.float32)
    dims = v_arr.shape[:3]
    u = v_arr * np.float32(2.0**-steps)
    intermediates = []
    for _ in range(steps):
        if keep_intermediates:
            intermediates.append(u)
        xs, ys, zs = _warp_points(dims, u)
        u = u + sample_field_at(u, xs, ys, zs).reshape(u.shape)
    return (u, intermediates) if keep_intermediates else u


def integrate_ss(v: VelocityField, steps: int = SS_STEPS_DEFAULT) -> DisplacementField:
    """Unit-time flow of a stationary velocity field (scaling and squaring)."""
    return DisplacementField(integrate_ss_array(v.v, steps))


def integrate_euler(v: VelocityField, steps: int = 1024) -> DisplacementField:
    """Dense forward-Euler flow; the brute-force reference integrator.

    Advances one particle per voxel through `steps` equal sub-steps of the
    clamped-sampled field. Used as an independent accuracy oracle for
    integrate_ss and by the benchmark script; not used by the optimizer.
    """
    varr = np.ascontiguousarray(v.v, dtype=np.float32)
    nx, ny, nz = varr.shape[:3]
    vx = np.ascontiguousarray(varr[..., 0]).ravel()
    vy = np.ascontiguousarray(varr[..., 1]).ravel()
    vz = np.ascontiguousarray(varr[..., 2]).ravel()
    vmax = np.float32(np.abs(varr).max())
    out = np.empty(3 * nx * ny * nz, dtype=np.float32)
    _kernels.euler_flow(vx, vy, vz, nx, ny, nz, int(steps), vmax, out)
    u = np.empty((nx, ny, nz, 3), dtype=np.float32)
    V = nx * ny * nz
    for c in range(3):
        u[..., c] = out[c * V : (c + 1) * V].reshape(nx, ny, nz)
    return DisplacementField(u)


def compose_arrays(outer_u, inner_u) -> np.ndarray:
    """(outer o inner)(g) = g + u_in(g) + u_out(g + u_in(g))."""
    if outer_u.shape != inner_u.shape:
        raise GridMismatchError(
            f"compose dims differ: {outer_u.shape} vs {inner_u.shape}"
        )
    dims = inner_u.shape[:3]
    xs, ys, zs = _warp_points(dims, inner_u)
    return inner_u + sample_field_at(outer_u, xs, ys, zs).reshape(inner_u.shape)


def compose(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Compose two displacement maps; outer is applied after inner.

    In a warp chain the outer map is the one nearest the image: warping by
    compose(a, b) equals warping by a first, then by b.
    """
    return DisplacementField(compose_arrays(outer.u, inner.u))


def transport_gradient(force, intermediates) -> np.ndarray:
    """Pull a loss gradient on the integrated displacement back to u_0.

    Applies the adjoint of each squaring step truncated to leading order
    (the sampled-term Jacobian is dropped): f <- f + splat(f, id + u_j),
    walking the cached intermediates in reverse. The caller scales the
    result by 2**-steps to reach the velocity.
    """
    f = np.ascontiguousarray(force, dtype=np.float32)
    dims = f.shape[:3]
    for u_j in reversed(intermediates):
        xs, ys, zs = _warp_points(dims, u_j)
        acc = np.zeros_like(f)
        _kernels.splat_field(f.reshape(-1, 3), xs, ys, zs, acc)
        f = f + acc
    return f


def warp_array(data, u_arr) -> np.ndarray:
    """Pull a scalar array back through a displacement array."""
    if data.shape != u_arr.shape[:3]:
        raise GridMismatchError(f"warp dims differ: {data.shape} vs {u_arr.shape[:3]}")
    xs, ys, zs = _warp_points(data.shape, u_arr)
    out = np.empty(xs.size, dtype=np.float32)
    _kernels.sample3d(np.ascontiguousarray(data, dtype=np.float32), xs, ys, zs, out)
    return out.reshape(data.shape)


def warp(vol: Volume3, disp: DisplacementField) -> Volume3:
    """Spatial transformer: out(g) = vol(g + u(g)), trilinear, clamped."""
    return Volume3(warp_array(vol.data, disp.u), vol.spacing)


def warp_labels(labels: LabelVolume, disp: DisplacementField) -> LabelVolume:
    """Warp every label channel through the same displacement."""
    if labels.dims != disp.dims:
        raise GridMismatchError(f"warp dims differ: {labels.dims} vs {disp.dims}")
    out = np.empty(labels.data.shape, dtype=np.float32)
    for c in range(labels.num_channels):
        out[..., c] = warp_array(labels.data[..., c], disp.u)
    return LabelVolume(out, labels.names, labels.spacing)


def jacobian_det_array(u_arr) -> np.ndarray:
    """det(grad phi) per voxel for phi = id + u.

    Central differences on the interior, one-sided at the faces (numpy
    gradient convention).
    """
    u_arr = np.asarray(u_arr, dtype=np.float32)
    if min(u_arr.shape[:3]) < 3:
        raise ValueError(f"need dims >= 3 per axis, got {u_arr.shape[:3]}")
    j = np.empty(u_arr.shape[:3] + (3, 3), dtype=np.float64)
    for c in range(3):
        gx, gy, gz = np.gradient(u_arr[..., c].astype(np.float64), axis=(0, 1, 2))
        j[..., c, 0] = gx
        j[..., c, 1] = gy
        j[..., c, 2] = gz
        j[..., c, c] += 1.0
    det = (
        j[..., 0, 0] * (j[..., 1, 1] * j[..., 2, 2] - j[..., 1, 2] * j[..., 2, 1])
        - j[..., 0, 1] * (j[..., 1, 0] * j[..., 2, 2] - j[..., 1, 2] * j[..., 2, 0])
        + j[..., 0, 2] * (j[..., 1, 0] * j[..., 2, 1] - j[..., 1, 1] * j[..., 2, 0])
    )
    return det.astype(np.float32)


def jacobian_det(disp: DisplacementField) -> Volume3:
    """Jacobian determinant map of the deformation."""
    return Volume3(jacobian_det_array(disp.u))


def folding_fraction(disp: DisplacementField) -> float:
    """Fraction of interior voxels with non-positive Jacobian determinant."""
    det = jacobian_det_array(disp.u)
    interior = det[1:-1, 1:-1, 1:-1]
    return float(np.count_nonzero(interior <= 0.0) / interior.size)


def sample_velocity(dist: VelocityDistribution, rng_seed) -> VelocityField:
    """Reparameterized draw z = mu + eps * exp(log_var / 2).

    rng_seed may be an integer seed or a numpy Generator; a given seed
    always yields the same field (eps is drawn as float64 in array order
    from numpy's default generator, then cast to storage precision).
    """
    rng = (
        rng_seed
        if isinstance(rng_seed, np.random.Generator)
        else np.random.default_rng(rng_seed)
    )
    eps = rng.standard_normal(dist.mu.shape)
    z = dist.mu + eps * np.exp(0.5 * dist.log_var.astype(np.float64))
    return VelocityField(z.astype(np.float32))
