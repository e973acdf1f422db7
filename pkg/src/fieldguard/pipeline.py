"""Base radiance-field training: fit the field to a dataset's posed images
with a photometric loss, plus small helpers to render a field or a
protection bundle over a dataset's cameras."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import render as render_mod
from .optim import Adam
from .fields import RadianceField, RadianceFieldConfig


@dataclass
class FieldTrainConfig:
    steps: int = 3000
    rays_per_step: int = 512
    n_samples: int = 16
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    cosine: bool = True
    seed: int = 0
    target_psnr: float | None = None   # early stop on the running train PSNR
    psnr_window: int = 50


def _running_psnr(mses, window):
    recent = mses[-window:]
    mean = float(np.mean(recent))
    if mean <= 0:
        return float("inf")
    return -10.0 * np.log10(mean)


def train_radiance_field(dataset, cfg=None, field_cfg=None, t_near=None,
                         t_far=None, field=None, start_step=0):
    """Photometric training on the dataset's train views.

    Returns (field, log); log rows carry step, loss (mean squared error over
    the ray batch), running train PSNR, lr and wall time.  Pass an existing
    field plus start_step to resume; the step counter and cosine schedule
    continue from there.
    """
    cfg = cfg or FieldTrainConfig()
    cam = dataset.cameras[0]
    if t_near is None or t_far is None:
        radius = float(np.linalg.norm(cam.pose[:3, 3]))
        t_near = radius - 1.8 if t_near is None else t_near
        t_far = radius + 1.8 if t_far is None else t_far
    if field is None:
        field = RadianceField(field_cfg or RadianceFieldConfig(),
                              seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + start_step)
    opt = Adam(field.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
               total_steps=cfg.steps, cosine=cfg.cosine)
    opt.t = start_step
    rays = {v: render_mod.generate_rays(dataset.cameras[v])
            for v in dataset.train_idx}
    gt = {v: dataset.images[v].reshape(-1, 3) for v in dataset.train_idx}
    log, mses = [], []
    for step in range(start_step, cfg.steps):
        t0 = time.perf_counter()
        view = int(rng.choice(dataset.train_idx))
        origins, dirs = rays[view]
        pix = rng.choice(origins.shape[0], size=cfg.rays_per_step,
                         replace=False)
        tvals, dts = render_mod.sample_along_rays(
            t_near, t_far, pix.size, cfg.n_samples, stratified=True, rng=rng)
        tape = dc.Tape()
        bound = field.bind(tape, trainable=True)
        out = render_mod.render_rays(
            tape, lambda tp, p, d: field.query(tp, p, d, bound=bound),
            origins[pix], dirs[pix], tvals, dts)
        diff = dc.sub(out, tape.constant(gt[view][pix]))
        loss = dc.tmean(dc.square(diff))
        if not np.isfinite(loss.value):
            raise RuntimeError(f"train_radiance_field: non-finite loss at "
                               f"step {step}")
        grads = tape.backward(loss)
        lr = opt.step({name: grads[t.id] for name, t in bound.items()})
        tape.release()
        mses.append(float(loss.value))
        psnr = _running_psnr(mses, cfg.psnr_window)
        log.append({"step": step, "loss": float(loss.value), "psnr": psnr,
                    "lr": float(lr),
                    "wall_ms": (time.perf_counter() - t0) * 1e3})
        if (cfg.target_psnr is not None and step >= cfg.psnr_window
                and psnr >= cfg.target_psnr):
            break
    return field, log


def render_field_dataset(field, dataset, view_idx, n_samples=32,
                         sample_fn=None, rng=None):
    """Deterministic full-frame renders of the given dataset views."""
    cam = dataset.cameras[0]
    radius = float(np.linalg.norm(cam.pose[:3, 3]))
    cfg = render_mod.RenderConfig(n_samples=n_samples, t_near=radius - 1.8,
                                  t_far=radius + 1.8)
    images = []
    for v in view_idx:
        if sample_fn is None:
            fn = lambda tape, p, d: field.query(tape, p, d)
        else:
            fn = sample_fn(dataset.cameras[v])
        images.append(render_mod.render_image(fn, dataset.cameras[v], cfg,
                                              rng=rng))
    return images


def write_field_training_log(path, log):
    with open(path, "w") as f:
        f.write("step,loss,psnr,lr,wall_ms\n")
        for row in log:
            f.write(f"{row['step']},{row['loss']:.10g},{row['psnr']:.6g},"
                    f"{row['lr']:.10g},{row['wall_ms']:.3f}\n")
