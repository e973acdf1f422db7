"""Procedural analytic scenes with closed-form density and color, posed
camera rigs, dataset generation, and a dense-quadrature rendering oracle.

Densities use a smoothstep falloff of the signed distance: full density
rho deeper than w/2 inside a primitive, zero beyond w/2 outside, and
exactly rho/2 on the surface.  That keeps the fields Lipschitz and makes
radiance-field fitting well conditioned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .render import Camera


@dataclass
class Primitive:
    kind: str                 # "sphere" | "box"
    center: tuple
    size: tuple               # (radius,) for sphere, half-extents for box
    density: float            # peak density rho
    falloff: float            # transition width w
    albedo: tuple
    tint: float = 0.0         # view tint coefficient
    tint_axis: tuple = (0.0, 0.0, 1.0)


@dataclass
class AnalyticScene:
    primitives: list
    bounds_min: tuple = (-1.0, -1.0, -1.0)
    bounds_max: tuple = (1.0, 1.0, 1.0)
    class_id: int = 0

    def occupancy_boxes(self):
        """Axis-aligned box per primitive, the localization ground truth."""
        boxes = []
        for p in self.primitives:
            c = np.asarray(p.center)
            if p.kind == "sphere":
                half = np.full(3, p.size[0])
            else:
                half = np.asarray(p.size)
            boxes.append((c - half, c + half))
        return boxes

    def to_dict(self):
        return json.loads(json.dumps(asdict(self), default=float))

    @classmethod
    def from_dict(cls, d):
        prims = [Primitive(**p) for p in d["primitives"]]
        return cls(prims, tuple(d["bounds_min"]), tuple(d["bounds_max"]),
                   d["class_id"])


def _signed_distance(prim, pts):
    c = np.asarray(prim.center)
    if prim.kind == "sphere":
        return np.linalg.norm(pts - c, axis=1) - prim.size[0]
    if prim.kind == "box":
        q = np.abs(pts - c) - np.asarray(prim.size)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(np.max(q, axis=1), 0.0)
        return outside + inside
    raise ValueError(f"unknown primitive kind {prim.kind!r}")


def _falloff(sd, width):
    u = np.clip(0.5 - sd / width, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def analytic_density(scene, pts):
    """Sum of per-primitive smoothstep densities; zero outside the bounds."""
    pts = np.asarray(pts, dtype=np.float64)
    sigma = np.zeros(pts.shape[0])
    for prim in scene.primitives:
        sigma += prim.density * _falloff(_signed_distance(prim, pts),
                                         prim.falloff)
    lo = np.asarray(scene.bounds_min)
    hi = np.asarray(scene.bounds_max)
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    return sigma * inside


def analytic_color(scene, pts, dirs):
    """Density-weighted blend of primitive albedos, optionally view tinted."""
    pts = np.asarray(pts, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    total = np.zeros(pts.shape[0])
    blended = np.zeros((pts.shape[0], 3))
    for prim in scene.primitives:
        w = prim.density * _falloff(_signed_distance(prim, pts), prim.falloff)
        albedo = np.asarray(prim.albedo)[None, :] * np.ones((pts.shape[0], 1))
        if prim.tint != 0.0:
            axis = np.asarray(prim.tint_axis)
            albedo = albedo * (1.0 + prim.tint * (dirs @ axis))[:, None]
        blended += w[:, None] * albedo
        total += w
    out = np.full((pts.shape[0], 3), 0.5)
    hit = total > 0
    out[hit] = blended[hit] / total[hit, None]
    return np.clip(out, 0.0, 1.0)


def scene_sampler(scene):
    """Analytic scene as a renderer sample_fn (constants on the tape)."""
    def sample(tape, pts, dirs):
        sigma = analytic_density(scene, pts)
        color = analytic_color(scene, pts, dirs)
        return tape.constant(color), tape.constant(sigma)
    return sample


def oracle_render(scene, origins, dirs, t_near, t_far, quadrature_n=4096):
    """Dense deterministic midpoint quadrature of the rendering integral.

    Plain numpy, cumulative sums, no tape: the independent ground truth the
    differentiable renderer is checked against.
    """
    if quadrature_n < 1024:
        raise ValueError("oracle_render: quadrature_n must be >= 1024")
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    n_rays = origins.shape[0]
    dt = (t_far - t_near) / quadrature_n
    tvals = t_near + (np.arange(quadrature_n) + 0.5) * dt
    out = np.empty((n_rays, 3))
    chunk = max(1, 2 ** 22 // quadrature_n)
    for start in range(0, n_rays, chunk):
        o = origins[start:start + chunk]
        d = dirs[start:start + chunk]
        pts = (o[:, None, :] + tvals[None, :, None] * d[:, None, :])
        flat = pts.reshape(-1, 3)
        drep = np.repeat(d, quadrature_n, axis=0)
        sigma = analytic_density(scene, flat).reshape(o.shape[0], -1)
        color = analytic_color(scene, flat, drep).reshape(o.shape[0], -1, 3)
        depth = sigma * dt
        acc = np.concatenate([np.zeros((o.shape[0], 1)),
                              np.cumsum(depth, axis=1)[:, :-1]], axis=1)
        weights = np.exp(-acc) * (1.0 - np.exp(-depth))
        out[start:start + chunk] = (weights[..., None] * color).sum(axis=1)
    return out


# -- camera rigs -------------------------------------------------------

@dataclass
class CameraRig:
    n_views: int = 24
    radius: float = 3.5
    elevation_deg: tuple = (-5.0, 40.0)
    look_at: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    width: int = 64
    height: int = 64
    focal: float = 80.0
    train_fraction: float = 0.8

    @property
    def t_near(self):
        return self.radius - 1.8

    @property
    def t_far(self):
        return self.radius + 1.8


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world pose with the camera looking down its -z axis."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = true_up
    pose[:3, 2] = -forward
    pose[:3, 3] = eye
    return pose


def rig_cameras(rig):
    """Deterministic ring of posed cameras around the look-at point."""
    rng = np.random.default_rng(rig.seed)
    azimuths = np.linspace(0.0, 2.0 * np.pi, rig.n_views, endpoint=False)
    lo, hi = np.deg2rad(rig.elevation_deg)
    elevations = rng.uniform(lo, hi, size=rig.n_views)
    cams = []
    target = np.asarray(rig.look_at)
    for idx, (az, el) in enumerate(zip(azimuths, elevations)):
        eye = target + rig.radius * np.array(
            [np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        cams.append(Camera(look_at_pose(eye, target), rig.focal,
                           rig.width, rig.height, camera_id=idx))
    return cams


@dataclass
class Dataset:
    cameras: list
    images: list              # (H, W, 3) arrays in [0, 1]
    label: int
    train_idx: list
    test_idx: list


def generate_dataset(scene, rig, renderer="oracle", quadrature_n=4096,
                     field_render=None):
    """Posed ground-truth images for one scene.

    renderer: "oracle" integrates the analytic fields; "field" uses the
    supplied `field_render(camera) -> image` callable.
    """
    cams = rig_cameras(rig)
    images = []
    for cam in cams:
        if renderer == "oracle":
            from .render import generate_rays
            origins, dirs = generate_rays(cam)
            px = oracle_render(scene, origins, dirs, rig.t_near, rig.t_far,
                               quadrature_n)
            images.append(px.reshape(cam.height, cam.width, 3))
        elif renderer == "field":
            images.append(field_render(cam))
        else:
            raise ValueError(f"unknown renderer {renderer!r}")
    n_train = int(round(rig.train_fraction * rig.n_views))
    idx = list(range(rig.n_views))
    return Dataset(cams, images, scene.class_id, idx[:n_train], idx[n_train:])


# -- the scene bank ----------------------------------------------------

_PALETTES = [
    [(0.85, 0.25, 0.2), (0.9, 0.6, 0.2)],
    [(0.2, 0.65, 0.85), (0.2, 0.35, 0.8)],
    [(0.3, 0.8, 0.35), (0.7, 0.85, 0.3)],
    [(0.75, 0.3, 0.8), (0.9, 0.8, 0.85)],
    [(0.9, 0.85, 0.3), (0.6, 0.5, 0.2)],
    [(0.4, 0.4, 0.45), (0.85, 0.85, 0.9)],
]


def scene_bank(num_classes=4, seed=0):
    """Visually distinct procedural scenes labeled 0..num_classes-1."""
    if num_classes < 2:
        raise ValueError("scene_bank: need at least 2 classes")
    rng = np.random.default_rng(seed)
    scenes = []
    for k in range(num_classes):
        palette = _PALETTES[k % len(_PALETTES)]
        prims = []
        layout = k % 4
        if layout == 0:
            prims.append(Primitive("sphere", (0.0, 0.0, 0.0), (0.55,),
                                   6.0, 0.25, palette[0], tint=0.15))
        elif layout == 1:
            for sgn, alb in ((-1, palette[0]), (1, palette[1])):
                off = rng.uniform(0.3, 0.45)
                prims.append(Primitive("sphere", (sgn * off, sgn * 0.1, 0.0),
                                       (0.35,), 7.0, 0.2, alb))
        elif layout == 2:
            prims.append(Primitive("box", (0.0, 0.0, -0.15),
                                   (0.5, 0.5, 0.3), 6.0, 0.25, palette[0]))
        else:
            prims.append(Primitive("box", (0.0, 0.0, -0.3),
                                   (0.55, 0.55, 0.15), 6.5, 0.2, palette[1]))
            prims.append(Primitive("sphere", (0.0, 0.0, 0.3), (0.3,),
                                   7.0, 0.2, palette[0], tint=0.1))
        # per-class jitter keeps banks distinct across seeds too
        for p in prims:
            jitter = rng.uniform(-0.05, 0.05, size=3)
            p.center = tuple(np.asarray(p.center) + jitter)
        scenes.append(AnalyticScene(prims, class_id=k))
    return scenes


def save_dataset(dirpath, dataset):
    """Persist a dataset as PPM images plus a JSON meta file (poses, label,
    split).  Images are 8-bit on disk; reloading quantizes to 1/255."""
    import os
    from .render import write_ppm
    os.makedirs(dirpath, exist_ok=True)
    meta = {
        "label": dataset.label,
        "train_idx": list(dataset.train_idx),
        "test_idx": list(dataset.test_idx),
        "cameras": [{
            "pose": cam.pose.tolist(),
            "focal": cam.focal,
            "width": cam.width,
            "height": cam.height,
            "camera_id": cam.camera_id,
        } for cam in dataset.cameras],
    }
    with open(os.path.join(dirpath, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2)
    for idx, img in enumerate(dataset.images):
        write_ppm(os.path.join(dirpath, f"view_{idx:03d}.ppm"), img)


def load_dataset(dirpath):
    import os
    from .render import read_ppm
    with open(os.path.join(dirpath, "meta.json")) as f:
        meta = json.load(f)
    cams = [Camera(np.asarray(c["pose"]), c["focal"], c["width"],
                   c["height"], c["camera_id"]) for c in meta["cameras"]]
    images = [read_ppm(os.path.join(dirpath, f"view_{idx:03d}.ppm"))
              for idx in range(len(cams))]
    return Dataset(cams, images, meta["label"], meta["train_idx"],
                   meta["test_idx"])


def save_scene_bank(path, scenes):
    with open(path, "w") as f:
        json.dump([s.to_dict() for s in scenes], f, indent=2)


def load_scene_bank(path):
    with open(path) as f:
        return [AnalyticScene.from_dict(d) for d in json.load(f)]
