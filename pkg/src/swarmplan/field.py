"""Repulsive environment field shared by the swarm.

Every moving entity contributes an inverse-square intensity bump.  The swarm
itself radiates one bump from a conceptual center placed one step ahead of the
formation centroid, so members hold formation by riding their own level set of
the combined field.  Obstacles contribute bumps clipped to a constant plateau
inside the protection bubble.  Planning consumes the field through a sampled
grid: binarize against the intensity at the querying UAV, smooth, and expose
the negated edge magnitude plus its gradient for contour-following costs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

__all__ = [
    "SwarmFieldSpec",
    "ObstacleModel",
    "EnvironmentField",
    "GradientGrid",
    "swarm_intensity",
    "obstacle_intensity",
    "environment_intensity",
    "field_gradient",
    "conceptual_center",
    "build_gradient_grid",
    "grid_from_intensity",
    "grids_from_intensity_multi",
    "sample_external",
    "multi_grid_sampler",
    "export_grid_csv",
]


@dataclass(frozen=True)
class SwarmFieldSpec:
    """Source term for the swarm's own repulsive bump."""

    center: np.ndarray            # conceptual center, shape (2,)
    speed: float                  # swarm cruise speed, > 0
    influence: float = 100.0      # cutoff radius, m

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.speed <= 0:
            raise ValueError(f"swarm speed must be positive, got {self.speed}")
        if self.influence <= 0:
            raise ValueError(f"influence radius must be positive, got {self.influence}")


@dataclass(frozen=True)
class ObstacleModel:
    """One obstacle: a mass point, or a rigid ring of surface sample points."""

    center: np.ndarray                       # shape (2,)
    speed: float = 0.0                       # scalar speed magnitude, >= 0
    influence: float = 100.0                 # cutoff radius, m
    sample_offsets: Optional[np.ndarray] = None  # (K, 2) offsets from center, None = mass point
    altitude: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.speed < 0:
            raise ValueError(f"obstacle speed must be non-negative, got {self.speed}")
        if self.sample_offsets is not None:
            off = np.asarray(self.sample_offsets, dtype=float)
            if off.ndim != 2 or off.shape[1] != 2 or off.shape[0] < 1:
                raise ValueError("sample_offsets must have shape (K, 2) with K >= 1")
            object.__setattr__(self, "sample_offsets", off)

    def sample_points(self) -> np.ndarray:
        """Surface sample points, shape (K, 2); the center alone for a mass point."""
        if self.sample_offsets is None:
            return self.center[None, :]
        return self.center[None, :] + self.sample_offsets


@dataclass(frozen=True)
class EnvironmentField:
    """Swarm bump plus obstacle bumps, with the shared safety geometry."""

    swarm: SwarmFieldSpec
    obstacles: Sequence[ObstacleModel] = field(default_factory=tuple)
    d_safe: float = 20.0                  # protection bubble radius, m
    altitude_exclusion: float = math.inf  # omit obstacles at least this far in altitude

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if self.d_safe <= 0:
            raise ValueError(f"d_safe must be positive, got {self.d_safe}")

    def active_obstacles(self, plane_alt: Optional[float] = None) -> tuple:
        if plane_alt is None:
            return self.obstacles
        return tuple(o for o in self.obstacles
                     if abs(o.altitude - plane_alt) < self.altitude_exclusion)


def _dist(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    d = q - p
    return np.hypot(d[..., 0], d[..., 1])


def swarm_intensity(q, spec: SwarmFieldSpec, d_safe: Optional[float] = None):
    """Inverse-square swarm bump at points q (..., 2).

    speed / r^2 out to the influence radius, zero beyond.  At r = 0 the value
    is capped at speed / d_safe^2 when d_safe is given, else infinity.
    """
    r = _dist(q, spec.center)
    cap = spec.speed / d_safe**2 if d_safe else np.inf
    with np.errstate(divide="ignore"):
        val = np.where(r > 0, spec.speed / np.maximum(r, 1e-300) ** 2, cap)
    return np.where(r <= spec.influence, val, 0.0)


def _point_bump(r: np.ndarray, intensity: float, d_safe: float, influence: float):
    # plateau inside the protection bubble, inverse-square decay to the cutoff
    with np.errstate(divide="ignore"):
        decay = intensity / np.maximum(r, 1e-300) ** 2
    val = np.where(r <= d_safe, intensity / d_safe**2, decay)
    return np.where(r <= influence, val, 0.0)


def obstacle_intensity(q, obs: ObstacleModel, v_swarm: float, d_safe: float):
    """Obstacle bump at points q (..., 2).

    Static obstacles still repel: the numerator is max(obstacle speed, swarm
    speed).  Shaped obstacles take the maximum over their sample points.
    """
    intensity = max(obs.speed, v_swarm)
    pts = obs.sample_points()
    out = _point_bump(_dist(q, pts[0]), intensity, d_safe, obs.influence)
    for p in pts[1:]:
        out = np.maximum(out, _point_bump(_dist(q, p), intensity, d_safe, obs.influence))
    return out


def environment_intensity(q, env: EnvironmentField, plane_alt: Optional[float] = None):
    """Combined field at points q (..., 2): swarm bump plus active obstacle bumps."""
    out = swarm_intensity(q, env.swarm, env.d_safe)
    for obs in env.active_obstacles(plane_alt):
        out = out + obstacle_intensity(q, obs, env.swarm.speed, env.d_safe)
    return out


def field_gradient(q, env: EnvironmentField, plane_alt: Optional[float] = None):
    """Analytic gradient of the combined field at points q (..., 2).

    Zero on bubble plateaus and beyond cutoffs; the cutoff discontinuity
    itself is assigned zero.  Shaped obstacles use their nearest sample point.
    """
    q = np.asarray(q, dtype=float)
    grad = np.zeros_like(q)

    def add_point(center, intensity, influence, plateau):
        d = q - center
        r = np.hypot(d[..., 0], d[..., 1])
        live = (r > plateau) & (r <= influence)
        with np.errstate(divide="ignore", invalid="ignore"):
            mag = np.where(live, -2.0 * intensity / np.maximum(r, 1e-300) ** 3, 0.0)
        return d * mag[..., None]

    grad += add_point(env.swarm.center, env.swarm.speed, env.swarm.influence, 0.0)
    for obs in env.active_obstacles(plane_alt):
        intensity = max(obs.speed, env.swarm.speed)
        pts = obs.sample_points()
        if len(pts) == 1:
            grad += add_point(pts[0], intensity, obs.influence, env.d_safe)
        else:
            dists = np.stack([_dist(q, p) for p in pts], axis=-1)
            nearest = np.argmin(dists, axis=-1)
            contrib = np.stack([add_point(p, intensity, obs.influence, env.d_safe)
                                for p in pts], axis=-2)
            grad += np.take_along_axis(
                contrib, nearest[..., None, None], axis=-2).squeeze(-2)
    return grad


def conceptual_center(positions: np.ndarray, target: np.ndarray, step_len: float):
    """Swarm field source: centroid shifted one planning step toward the target.

    Returns (center, shifted).  When the centroid already coincides with the
    target the centroid itself is used and shifted is False.
    """
    positions = np.asarray(positions, dtype=float)
    target = np.asarray(target, dtype=float)
    centroid = positions.mean(axis=0)
    d = target - centroid
    n = float(np.hypot(d[0], d[1]))
    if n < 1e-12:
        return centroid, False
    return centroid + step_len * d / n, True


# ---------------------------------------------------------------------------
# sampled grids

@dataclass(frozen=True)
class GradientGrid:
    """Edge-attraction data sampled on a regular grid.

    Row index runs along y, column index along x.  `external` holds the
    negated gradient magnitude of the smoothed binary field (<= 0 everywhere,
    most negative on contour edges) and `gradient` its spatial derivative,
    stored as (..., 2) = (d/dx, d/dy).
    """

    origin: np.ndarray        # (2,) position of node [0, 0]
    cell: float
    intensity: np.ndarray     # (ny, nx) raw field samples
    binary: np.ndarray        # (ny, nx) +1 / -1 against ref_intensity
    external: np.ndarray      # (ny, nx) negated edge magnitude
    gradient: np.ndarray      # (ny, nx, 2)
    ref_intensity: float      # field value at the querying UAV
    smooth_sigma: float
    packed: np.ndarray        # (ny, nx, 3) external stacked with gradient

    @property
    def shape(self):
        return self.external.shape

    @property
    def extent(self):
        ny, nx = self.external.shape
        ox, oy = self.origin
        return (float(ox), float(ox + (nx - 1) * self.cell),
                float(oy), float(oy + (ny - 1) * self.cell))


def grid_from_intensity(intensity: np.ndarray, origin, cell: float,
                        ref_intensity: float, smooth_sigma: float = 2.0) -> GradientGrid:
    """Binarize a sampled field against a reference level and build edge layers.

    Cells at or above the reference map to +1, the rest to -1.  The binary
    image is blurred by a Gaussian of smooth_sigma cells; the edge layer is
    the negated magnitude of its gradient and attracts curves to the contour.
    """
    intensity = np.asarray(intensity, dtype=float)
    if intensity.ndim != 2 or min(intensity.shape) < 5:
        raise ValueError(f"intensity grid must be 2-D with at least 5 nodes per axis, "
                         f"got shape {intensity.shape}")
    binary = np.where(intensity >= ref_intensity, 1.0, -1.0)
    smoothed = gaussian_filter(binary, sigma=smooth_sigma, mode="nearest")
    gy, gx = np.gradient(smoothed, cell)
    external = -np.hypot(gx, gy)
    egy, egx = np.gradient(external, cell)
    gradient = np.stack([egx, egy], axis=-1)
    packed = np.ascontiguousarray(np.dstack([external, egx, egy]))
    return GradientGrid(
        origin=np.asarray(origin, dtype=float),
        cell=float(cell),
        intensity=intensity,
        binary=binary,
        external=external,
        gradient=gradient,
        ref_intensity=float(ref_intensity),
        smooth_sigma=float(smooth_sigma),
        packed=packed,
    )


def grids_from_intensity_multi(intensity: np.ndarray, origin, cell: float,
                               ref_intensities, smooth_sigma: float = 2.0) -> list:
    """One GradientGrid per reference level over a shared intensity plane.

    Matches grid_from_intensity per level; the binarize / smooth / gradient
    pipeline runs once over the whole stack, and the per-level packed layers
    are views into one parent array so batched samplers can gather across
    levels without copying.
    """
    intensity = np.asarray(intensity, dtype=float)
    if intensity.ndim != 2 or min(intensity.shape) < 5:
        raise ValueError(f"intensity grid must be 2-D with at least 5 nodes per axis, "
                         f"got shape {intensity.shape}")
    refs = np.asarray(ref_intensities, dtype=float)
    if refs.ndim != 1 or refs.size < 1:
        raise ValueError("ref_intensities must be a non-empty 1-D sequence")
    origin = np.asarray(origin, dtype=float)
    binary = np.where(intensity[None, :, :] >= refs[:, None, None], 1.0, -1.0)
    smoothed = gaussian_filter(binary, sigma=(0.0, smooth_sigma, smooth_sigma),
                               mode="nearest")
    gy, gx = np.gradient(smoothed, cell, axis=(1, 2))
    external = -np.hypot(gx, gy)
    egy, egx = np.gradient(external, cell, axis=(1, 2))
    packed = np.empty(external.shape + (3,))
    packed[..., 0] = external
    packed[..., 1] = egx
    packed[..., 2] = egy
    return [GradientGrid(origin=origin, cell=float(cell), intensity=intensity,
                         binary=binary[k], external=external[k],
                         gradient=packed[k, ..., 1:], ref_intensity=float(refs[k]),
                         smooth_sigma=float(smooth_sigma), packed=packed[k])
            for k in range(refs.size)]


def multi_grid_sampler(grids):
    """Sampler over several grids: (points (B, L, 2), rows (B,)) -> val, grad, inside.

    rows[i] names the grid that curve i samples.  Grids sharing axes are
    gathered through one stacked array (zero-copy when their packed layers
    are planes of a common parent); mixed axes fall back to a per-curve loop.
    """
    g0 = grids[0]
    ny, nx = g0.shape
    shared = all(g.shape == (ny, nx) and g.cell == g0.cell
                 and np.array_equal(g.origin, g0.origin) for g in grids[1:])
    if not shared:
        def sample(pts, rows):
            val = np.empty(pts.shape[:2])
            grad = np.empty(pts.shape)
            inside = np.empty(pts.shape[:2], dtype=bool)
            for k, r in enumerate(rows):
                val[k], grad[k], inside[k] = sample_external(grids[r], pts[k])
            return val, grad, inside
        return sample

    base = grids[0].packed.base
    if (base is not None and base.ndim == 4
            and base.shape == (len(grids), ny, nx, 3)
            and all(g.packed.base is base for g in grids)
            and all(g.packed.ctypes.data == base[k].ctypes.data
                    for k, g in enumerate(grids))):
        stacked = base
    else:
        stacked = np.stack([g.packed for g in grids])
    packs = stacked.reshape(len(grids) * ny * nx, 3)
    cell = g0.cell
    plane = ny * nx

    hi = np.array([nx - 1.0, ny - 1.0])
    hi_clip = hi - 1e-9

    def sample(pts, rows):
        uv = (pts - g0.origin) / cell
        inside = ((uv >= 0.0) & (uv <= hi)).all(axis=-1)
        uv = np.clip(uv, 0.0, hi_clip)
        ij = uv.astype(np.int64)
        frac = uv - ij
        base_idx = rows[:, None] * plane + ij[..., 1] * nx + ij[..., 0]
        corners = packs.take(np.stack([base_idx, base_idx + 1,
                                       base_idx + nx, base_idx + nx + 1]),
                             axis=0)
        a, b, c, d = corners
        fu = frac[..., 0, None]
        fv = frac[..., 1, None]
        top = a + fu * (b - a)
        bot = c + fu * (d - c)
        out = top + fv * (bot - top)
        return out[..., 0], out[..., 1:], inside

    return sample


def _node_axes(bounds, cell: float):
    xmin, xmax, ymin, ymax = (float(b) for b in bounds)
    if xmax <= xmin or ymax <= ymin:
        raise ValueError(f"empty bounds {bounds}")
    nx = int(math.ceil((xmax - xmin) / cell - 1e-9)) + 1
    ny = int(math.ceil((ymax - ymin) / cell - 1e-9)) + 1
    return xmin + cell * np.arange(nx), ymin + cell * np.arange(ny)


def _intensity_on_axes(env: EnvironmentField, xs: np.ndarray, ys: np.ndarray,
                       plane_alt: Optional[float]) -> np.ndarray:
    # broadcast per source over the separable axes; equivalent to evaluating
    # environment_intensity at every node but without materializing the mesh.
    # All work happens on squared distances: the bumps are monotone in r, so
    # the max over an obstacle's sample points is the bump of the nearest
    # sample, and one divide per obstacle replaces one per sample point.
    def r2(center):
        dx = xs[None, :] - center[0]
        dy = ys[:, None] - center[1]
        return dx * dx + dy * dy

    sw = env.swarm
    d = r2(sw.center)
    with np.errstate(divide="ignore"):
        out = np.where(d > 0, sw.speed / np.maximum(d, 1e-300),
                       sw.speed / env.d_safe**2)
    out[d > sw.influence**2] = 0.0
    for obs in env.active_obstacles(plane_alt):
        intensity = max(obs.speed, sw.speed)
        pts = obs.sample_points()
        near = r2(pts[0])
        for p in pts[1:]:
            np.minimum(near, r2(p), out=near)
        val = intensity / np.maximum(near, env.d_safe**2)
        val[near > obs.influence**2] = 0.0
        out += val
    return out


def build_gradient_grid(env: EnvironmentField, p0, bounds, cell_size: float = 1.0,
                        smooth_sigma: float = 2.0, horizon: float = 0.0,
                        plane_alt: Optional[float] = None) -> GradientGrid:
    """Sample the field over bounds = (xmin, xmax, ymin, ymax) and build edge layers.

    p0 is the querying UAV's position; its field value is the binarization
    level, so the extracted contour passes through p0's level set.  bounds
    must contain p0 with `horizon` clearance on every side so one prediction
    fits inside the grid.
    """
    p0 = np.asarray(p0, dtype=float)
    xmin, xmax, ymin, ymax = (float(b) for b in bounds)
    if (p0[0] - horizon < xmin or p0[0] + horizon > xmax
            or p0[1] - horizon < ymin or p0[1] + horizon > ymax):
        raise ValueError(
            f"bounds {bounds} cannot contain position {tuple(p0)} "
            f"with a {horizon} m prediction horizon")
    xs, ys = _node_axes(bounds, cell_size)
    intensity = _intensity_on_axes(env, xs, ys, plane_alt)
    ref = float(environment_intensity(p0, env, plane_alt))
    return grid_from_intensity(intensity, (xs[0], ys[0]), cell_size, ref, smooth_sigma)


def sample_external(grid: GradientGrid, q):
    """Bilinear sample of the edge layer and its gradient at points q (..., 2).

    Returns (value, gradient, inside).  Queries outside the grid are clamped
    to the border and flagged inside=False.
    """
    q = np.asarray(q, dtype=float)
    ny, nx = grid.external.shape
    u = (q[..., 0] - grid.origin[0]) / grid.cell
    v = (q[..., 1] - grid.origin[1]) / grid.cell
    inside = (u >= 0) & (u <= nx - 1) & (v >= 0) & (v <= ny - 1)
    u = np.clip(u, 0.0, nx - 1 - 1e-9)
    v = np.clip(v, 0.0, ny - 1 - 1e-9)
    i0 = v.astype(np.int64)
    j0 = u.astype(np.int64)
    fu = (u - j0)[..., None]
    fv = (v - i0)[..., None]

    flat = grid.packed.reshape(ny * nx, 3)
    base = i0 * nx + j0
    a, b, c, d = flat.take(np.stack([base, base + 1, base + nx, base + nx + 1]),
                           axis=0)
    top = a + fu * (b - a)
    bot = c + fu * (d - c)
    out = top + fv * (bot - top)
    return out[..., 0], out[..., 1:], inside


_GRID_LAYERS = ("intensity", "binary", "external")


def export_grid_csv(grid: GradientGrid, layer: str, path):
    """Write one grid layer as a CSV matrix with an origin/cell header line."""
    if layer not in _GRID_LAYERS:
        raise ValueError(f"unknown grid layer {layer!r}, expected one of {_GRID_LAYERS}")
    data = getattr(grid, layer)
    header = f"# origin={grid.origin[0]:.6f},{grid.origin[1]:.6f} cell={grid.cell:.6f}"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        np.savetxt(fh, data, delimiter=",", fmt="%.9g")
