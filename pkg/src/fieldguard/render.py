"""Ray generation, stratified sampling, differentiable volume rendering,
voxel-grid feature extraction and the scene-wide mean density.

The rendering integral follows the standard emission-absorption model:
    I(r) = sum_i T_i (1 - exp(-sigma_i dt_i)) c_i,
    T_i  = exp(-sum_{j<i} sigma_j dt_j),
with the last spacing defined as t_far - t_N so the spacings telescope to
t_far - t_1 exactly.  All tensor math runs on a diffcore tape, so gradients
flow through to whatever produced the per-sample colors and densities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass
class Camera:
    pose: np.ndarray          # 4x4 camera-to-world, rotation block orthonormal
    focal: float              # pixels
    width: int
    height: int
    camera_id: int = 0

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (4, 4):
            raise ValueError("Camera: pose must be 4x4")
        r = self.pose[:3, :3]
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6:
            raise ValueError("Camera: rotation block is not orthonormal")
        if self.focal == 0:
            raise ValueError("Camera: zero focal length")


@dataclass
class RenderConfig:
    n_samples: int = 32
    t_near: float = 1.0
    t_far: float = 5.0
    stratified: bool = False
    white_background: bool = False
    # rays per tape; chunk * n_samples points through up to three MLPs must
    # fit in memory, so keep this modest
    chunk: int = 1024


def generate_rays(camera):
    """One ray per pixel center, row-major; directions are unit length."""
    i, j = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    x = (i + 0.5 - camera.width / 2.0) / camera.focal
    y = -(j + 0.5 - camera.height / 2.0) / camera.focal
    dirs_cam = np.stack([x, y, -np.ones_like(x)], axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ camera.pose[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.pose[:3, 3], dirs.shape).copy()
    return origins, dirs


def sample_along_rays(t_near, t_far, n_rays, n_samples, stratified=False,
                      rng=None):
    """Per-ray sample positions and spacings over [t_near, t_far].

    Deterministic mode places samples at the midpoints of n_samples equal
    bins; stratified mode draws one uniform sample per bin.
    """
    if n_samples < 1:
        raise ValueError("sample_along_rays: n_samples must be >= 1")
    if not t_near < t_far or t_near < 0:
        raise ValueError("sample_along_rays: need 0 <= t_near < t_far")
    edges = np.linspace(t_near, t_far, n_samples + 1)
    if stratified:
        if rng is None:
            rng = np.random.default_rng()
        u = rng.uniform(size=(n_rays, n_samples))
    else:
        u = np.full((n_rays, n_samples), 0.5)
    width = (t_far - t_near) / n_samples
    tvals = edges[:-1] + u * width
    dts = np.empty_like(tvals)
    dts[:, :-1] = np.diff(tvals, axis=1)
    dts[:, -1] = t_far - tvals[:, -1]
    return tvals, dts


def volume_render(color, sigma, dts, white_background=False):
    """Integrate per-sample (color, sigma) tensors into pixel colors.

    color: (R, N, 3) tensor, sigma: (R, N) tensor, dts: (R, N) array.
    Returns an (R, 3) tensor.
    """
    if np.any(sigma.value < 0):
        raise ValueError("volume_render: negative density")
    tape = sigma.tape
    n = sigma.shape[1]
    depth = dc.mul(sigma, tape.constant(dts))
    # accumulated optical depth before each sample, via a strictly upper
    # triangular ones matrix: acc[:, i] = sum_{j<i} depth[:, j]
    acc = dc.matmul(depth, tape.constant(np.triu(np.ones((n, n)), k=1)))
    trans = dc.exp(dc.negate(acc))
    alpha = dc.sub(tape.constant(1.0), dc.exp(dc.negate(depth)))
    weights = dc.mul(trans, alpha)
    rgb = dc.mul(dc.reshape(weights, (weights.shape[0], n, 1)), color)
    out = dc.tsum(rgb, axis=1)
    if white_background:
        # T_{N+1} = exp(-total optical depth)
        residual = dc.exp(dc.negate(dc.tsum(depth, axis=1)))
        out = dc.add(out, dc.reshape(residual, (weights.shape[0], 1)))
    return out


def render_rays(tape, sample_fn, origins, dirs, tvals, dts,
                white_background=False):
    """Query sample_fn at every ray sample and integrate.  Returns (R,3)."""
    n_rays, n_samples = tvals.shape
    pts = (origins[:, None, :] + tvals[..., None] * dirs[:, None, :])
    pts = pts.reshape(-1, 3)
    dirs_rep = np.repeat(dirs, n_samples, axis=0)
    color, sigma = sample_fn(tape, pts, dirs_rep)
    color = dc.reshape(color, (n_rays, n_samples, 3))
    sigma = dc.reshape(sigma, (n_rays, n_samples))
    return volume_render(color, sigma, dts, white_background)


def render_image(sample_fn, camera, cfg, rng=None):
    """Full-frame render to an (H, W, 3) float array in [0, 1]."""
    origins, dirs = generate_rays(camera)
    out = np.empty((origins.shape[0], 3))
    for start in range(0, origins.shape[0], cfg.chunk):
        sl = slice(start, start + cfg.chunk)
        o, d = origins[sl], dirs[sl]
        tvals, dts = sample_along_rays(cfg.t_near, cfg.t_far, o.shape[0],
                                       cfg.n_samples, cfg.stratified, rng)
        tape = dc.Tape()
        out[sl] = render_rays(tape, sample_fn, o, d, tvals, dts,
                              cfg.white_background).value
        tape.release()
    return out.reshape(camera.height, camera.width, 3)


# -- voxel features ----------------------------------------------------

@dataclass
class VoxelFeatureGrid:
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    resolution: tuple        # (nx, ny, nz)
    color: np.ndarray        # (G, 3)
    sigma: np.ndarray        # (G,)


def _check_bounds(bounds_min, bounds_max):
    lo = np.asarray(bounds_min, dtype=np.float64)
    hi = np.asarray(bounds_max, dtype=np.float64)
    if np.any(lo >= hi):
        raise ValueError("voxel grid: degenerate bounds (min >= max)")
    return lo, hi


def voxel_cell_centers(bounds_min, bounds_max, resolution):
    """Cell centers in x-major, z-fastest row order; shape (G, 3)."""
    lo, hi = _check_bounds(bounds_min, bounds_max)
    nx, ny, nz = resolution
    axes = [lo[a] + (np.arange(n) + 0.5) * (hi[a] - lo[a]) / n
            for a, n in enumerate((nx, ny, nz))]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def extract_voxel_features(tape, sample_fn, bounds_min, bounds_max,
                           resolution, subsamples=1, view_dir=(0, 0, -1.0),
                           rng=None):
    """Per-cell (color, sigma) tensors, each cell the mean over `subsamples`
    points (cell center when subsamples == 1, uniform in the cell otherwise).

    Colors are view dependent but a voxel grid has no view; we query a fixed
    canonical direction by default.  Returns ((G,3), (G,)) tensors.
    """
    if min(resolution) < 1:
        raise ValueError("voxel grid: resolution must be >= 1 per axis")
    lo, hi = _check_bounds(bounds_min, bounds_max)
    centers = voxel_cell_centers(lo, hi, resolution)
    n_cells = centers.shape[0]
    cell = (hi - lo) / np.asarray(resolution, dtype=np.float64)
    if subsamples == 1:
        pts = centers
    else:
        if rng is None:
            rng = np.random.default_rng()
        offs = rng.uniform(-0.5, 0.5, size=(n_cells, subsamples, 3)) * cell
        pts = (centers[:, None, :] + offs).reshape(-1, 3)
    d = np.asarray(view_dir, dtype=np.float64)
    d = d / np.linalg.norm(d)
    dirs = np.broadcast_to(d, pts.shape).copy()
    color, sigma = sample_fn(tape, pts, dirs)
    if subsamples > 1:
        color = dc.tmean(dc.reshape(color, (n_cells, subsamples, 3)), axis=1)
        sigma = dc.tmean(dc.reshape(sigma, (n_cells, subsamples)), axis=1)
    return color, sigma


def extract_voxel_grid(sample_fn, bounds_min, bounds_max, resolution,
                       subsamples=1, view_dir=(0, 0, -1.0), rng=None):
    """Non-differentiable convenience wrapper returning a VoxelFeatureGrid."""
    tape = dc.Tape()
    color, sigma = extract_voxel_features(tape, sample_fn, bounds_min,
                                          bounds_max, resolution, subsamples,
                                          view_dir, rng)
    lo, hi = _check_bounds(bounds_min, bounds_max)
    return VoxelFeatureGrid(lo, hi, tuple(resolution), color.value,
                            sigma.value)


def compute_mean_density(density_fn, bounds_min, bounds_max, resolution=32):
    """Arithmetic mean density over cell centers of a uniform grid."""
    if np.isscalar(resolution):
        resolution = (resolution,) * 3
    if min(resolution) < 2:
        raise ValueError("mean density: resolution must be >= 2 per axis")
    centers = voxel_cell_centers(bounds_min, bounds_max, resolution)
    sigma = np.asarray(density_fn(centers), dtype=np.float64)
    mean = float(np.mean(sigma))
    if mean < 0:
        raise ValueError("mean density: negative mean density")
    return mean


# -- on-disk formats ---------------------------------------------------

def write_ppm(path, image):
    """Binary PPM (P6, maxval 255), linear-to-8-bit via round(255 v)."""
    img = np.asarray(image)
    h, w, _ = img.shape
    data = np.clip(np.round(255.0 * img), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise ValueError(f"{path}: not a binary PPM")
        w, h = map(int, f.readline().split())
        maxval = int(f.readline())
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def write_voxel_grid(path, grid):
    """Text header (bounds, resolution) + little-endian float64 payload,
    color-then-sigma interleaved per cell."""
    payload = np.concatenate(
        [grid.color, grid.sigma[:, None]], axis=1).astype("<f8")
    with open(path, "wb") as f:
        header = ("voxelgrid 1\n"
                  f"bounds_min {' '.join(repr(float(v)) for v in grid.bounds_min)}\n"
                  f"bounds_max {' '.join(repr(float(v)) for v in grid.bounds_max)}\n"
                  f"resolution {' '.join(str(v) for v in grid.resolution)}\n"
                  "end\n")
        f.write(header.encode("ascii"))
        f.write(payload.tobytes())


def read_voxel_grid(path):
    with open(path, "rb") as f:
        if f.readline().split()[0] != b"voxelgrid":
            raise ValueError(f"{path}: not a voxel grid file")
        fields = {}
        while True:
            line = f.readline().split()
            if line[0] == b"end":
                break
            fields[line[0].decode()] = [v.decode() for v in line[1:]]
        lo = np.array([float(v) for v in fields["bounds_min"]])
        hi = np.array([float(v) for v in fields["bounds_max"]])
        res = tuple(int(v) for v in fields["resolution"])
        n = res[0] * res[1] * res[2]
        payload = np.frombuffer(f.read(n * 4 * 8), dtype="<f8").reshape(n, 4)
    return VoxelFeatureGrid(lo, hi, res, payload[:, :3].copy(),
                            payload[:, 3].copy())
