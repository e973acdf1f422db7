"""Sensitivity-guided protection: bounded density perturbations via a soft
clamp, perturbation application, the protection/naturalness objectives, the
protection training loop, and the adversarial fine-tuning baseline.

The density perturbation bound at a point is (1 - s) * mean_density, where
s is the learned sensitivity there: fragile regions (s near 1) admit almost
no geometric change, while low-sensitivity regions absorb larger ones.  The
squashing uses b * tanh(delta / b) rather than a hard clip so gradients keep
flowing when the raw perturbation overshoots the bound.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict

import numpy as np

from . import diffcore as dc
from . import render as render_mod
from .checkpoint import save_checkpoint, load_checkpoint
from .downstream import (classifier_loss, image_to_patches, voxel_loss,
                         occupancy_target)
from .fields import PerturbationField, PerturbationFieldConfig, \
    SensitivityField, SensitivityFieldConfig
from .optim import Adam

CONSTRAINT_MODES = ("sensitivity", "fixed_eps", "hard_clip", "complement",
                    "random", "none")
PERTURB_MODES = ("color_only", "density_only", "both")


class DegenerateSceneError(ValueError):
    """Empty scene: zero mean density leaves no room for a density bound."""


@dataclass
class ProtectConfig:
    lambda_pro: float = 0.05
    lambda_nat: float = 1.0
    perturb_mode: str = "both"
    constraint_mode: str = "sensitivity"
    epsilon: float = 0.5              # fixed_eps bound
    constrain_color: bool = False
    kappa_c: float = 0.1              # color bound scale
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    steps: int = 2000
    cosine: bool = True
    sigma_bar_resolution: int = 32
    nat_rays_per_step: int = 256
    attack_patches_per_step: int = 4
    n_samples: int = 8
    voxel_resolution: tuple = (16, 16, 16)
    seed: int = 0

    def __post_init__(self):
        if self.constraint_mode not in CONSTRAINT_MODES:
            raise ValueError(f"unknown constraint_mode "
                             f"{self.constraint_mode!r}")
        if self.perturb_mode not in PERTURB_MODES:
            raise ValueError(f"unknown perturb_mode {self.perturb_mode!r}")
        if self.constraint_mode == "fixed_eps" and self.epsilon <= 0:
            raise ValueError("fixed_eps requires epsilon > 0")


def _check_sensitivity(s_values):
    if np.any(s_values <= 0.0) or np.any(s_values >= 1.0):
        raise ValueError("sensitivity must lie strictly inside (0, 1)")


def _check_sigma_bar(sigma_bar):
    if sigma_bar <= 0:
        raise DegenerateSceneError(
            "mean density is zero; an empty scene cannot carry a "
            "density-perturbation bound")


def soft_clamp(delta, s, sigma_bar):
    """b * tanh(delta / b) with b = (1 - s) * sigma_bar.

    Odd, sign preserving, strictly bounded by b, monotone in delta, and
    differentiable everywhere with slope sech^2(delta/b) > 0.
    """
    _check_sigma_bar(sigma_bar)
    _check_sensitivity(s.value if isinstance(s, dc.Tensor) else np.asarray(s))
    tape = delta.tape
    s = tape.lift(s)
    b = dc.mul(dc.sub(tape.constant(1.0), s), tape.constant(float(sigma_bar)))
    return dc.mul(b, dc.tanh(dc.div(delta, b)))


def soft_clamp_fixed(delta, bound):
    """Soft clamp with a position-independent bound (the fixed-eps case)."""
    if bound <= 0:
        raise ValueError("soft_clamp_fixed: bound must be positive")
    tape = delta.tape
    b = tape.constant(float(bound))
    return dc.mul(b, dc.tanh(dc.div(delta, b)))


def hard_clip(delta, s, sigma_bar):
    """Clip to [-b, b]; saturated regions have exactly zero gradient."""
    _check_sigma_bar(sigma_bar)
    _check_sensitivity(s.value if isinstance(s, dc.Tensor) else np.asarray(s))
    tape = delta.tape
    s = tape.lift(s)
    b = dc.mul(dc.sub(tape.constant(1.0), s), tape.constant(float(sigma_bar)))
    over = dc.relu(dc.sub(delta, b))
    under = dc.relu(dc.sub(dc.negate(delta), b))
    return dc.add(dc.sub(delta, over), under)


def constrain(tape, delta_sigma, x, mode, gs=None, gs_bound=None,
              sigma_bar=None, epsilon=None, rng=None):
    """Apply the configured density-perturbation constraint.

    Returns (constrained delta tensor, sensitivity tensor or None).
    """
    if mode == "none":
        return delta_sigma, None
    if mode == "fixed_eps":
        return soft_clamp_fixed(delta_sigma, epsilon), None
    if mode == "random":
        if rng is None:
            raise ValueError("random constraint mode needs an rng")
        n = delta_sigma.shape[0]
        s = tape.constant(np.clip(rng.uniform(size=n), 1e-9, 1 - 1e-9))
        return soft_clamp(delta_sigma, s, sigma_bar), s
    s = gs.query(tape, x, bound=gs_bound)
    if mode == "complement":
        s = dc.sub(tape.constant(1.0), s)
        s = dc.add(dc.mul(s, tape.constant(1 - 2e-12)),
                   tape.constant(1e-12))   # keep strictly inside (0, 1)
        return soft_clamp(delta_sigma, s, sigma_bar), s
    if mode == "hard_clip":
        return hard_clip(delta_sigma, s, sigma_bar), s
    return soft_clamp(delta_sigma, s, sigma_bar), s


def apply_perturbation(color, sigma, delta_color, delta_sigma_hat,
                       perturb_mode="both", constrain_color=False,
                       kappa_c=0.1, s=None):
    """Perturbed (color', sigma'): color clamped to [0,1], density floored
    at zero.  The clamps are exact identities inside the valid range, so
    zero perturbations leave the sample bit-identical."""
    tape = color.tape
    n = color.shape[0]
    use_color = perturb_mode in ("color_only", "both")
    use_sigma = perturb_mode in ("density_only", "both")
    if use_color:
        if constrain_color:
            if s is None:
                bc = tape.constant(float(kappa_c))
            else:
                s3 = dc.broadcast_to(dc.reshape(s, (n, 1)), (n, 3))
                bc = dc.mul(dc.sub(tape.constant(1.0), s3),
                            tape.constant(float(kappa_c)))
            delta_color = dc.mul(bc, dc.tanh(dc.div(delta_color, bc)))
        c = dc.add(color, delta_color)
        c = dc.relu(c)
        c = dc.sub(c, dc.relu(dc.sub(c, tape.constant(1.0))))
    else:
        c = color
    if use_sigma:
        sig = dc.relu(dc.add(sigma, delta_sigma_hat))
    else:
        sig = sigma
    return c, sig


def protection_loss(task_loss):
    """Negated downstream task loss: driving this down drives F's loss up."""
    return dc.negate(task_loss)


def naturalness_loss(rendered, ground_truth):
    """Sum of squared RGB residuals over a ray batch."""
    gt = np.asarray(ground_truth, dtype=np.float64)
    if gt.size == 0:
        raise ValueError("naturalness_loss: empty ray batch")
    diff = dc.sub(rendered, rendered.tape.constant(gt))
    return dc.tsum(dc.square(diff))


def total_loss(l_pro, l_nat, lambda_pro, lambda_nat):
    if lambda_pro < 0 or lambda_nat < 0:
        raise ValueError("loss weights must be nonnegative")
    if l_pro is None and l_nat is None:
        raise ValueError("total_loss: need at least one loss term")
    tape = l_pro.tape if l_pro is not None else l_nat.tape
    terms = []
    if l_pro is not None:
        terms.append(dc.mul(tape.constant(float(lambda_pro)), l_pro))
    if l_nat is not None:
        terms.append(dc.mul(tape.constant(float(lambda_nat)), l_nat))
    out = terms[0]
    for t in terms[1:]:
        out = dc.add(out, t)
    return out


def base_sampler(field):
    """Unprotected sample_fn for the renderer."""
    def sample(tape, pts, dirs):
        return field.query(tape, pts, dirs)
    return sample


def compute_field_mean_density(field, bounds_min, bounds_max, resolution=32):
    def density(pts):
        d = np.broadcast_to(np.array([0.0, 0.0, -1.0]), pts.shape).copy()
        return field.query_np(pts, d)[1]
    return render_mod.compute_mean_density(density, bounds_min, bounds_max,
                                           resolution)


@dataclass
class ProtectionBundle:
    """Everything needed to switch protection on for a given base field."""
    gp: PerturbationField
    gs: SensitivityField
    sigma_bar: float
    cfg: ProtectConfig
    base_checksum: str
    camera_rows: dict                 # camera_id -> embedding row

    def sampler(self, field, camera_id=None, rng=None):
        """Protected sample_fn; camera_id None uses the mean embedding."""
        row = self.camera_rows.get(camera_id) if camera_id is not None \
            else None

        def sample(tape, pts, dirs):
            color, sigma = field.query(tape, pts, dirs)
            ids = None if row is None else np.full(pts.shape[0], row,
                                                   dtype=int)
            dcol, dsig = self.gp.query(tape, pts, dirs, camera_ids=ids)
            dsig_hat, s = constrain(tape, dsig, pts,
                                    self.cfg.constraint_mode, gs=self.gs,
                                    sigma_bar=self.sigma_bar,
                                    epsilon=self.cfg.epsilon, rng=rng)
            return apply_perturbation(color, sigma, dcol, dsig_hat,
                                      self.cfg.perturb_mode,
                                      self.cfg.constrain_color,
                                      self.cfg.kappa_c, s)
        return sample

    def save(self, path):
        arrays = {f"gp.{k}": v for k, v in self.gp.params.items()}
        arrays.update({f"gs.{k}": v for k, v in self.gs.params.items()})
        meta = {
            "sigma_bar": self.sigma_bar,
            "cfg": asdict(self.cfg),
            "gp_cfg": asdict(self.gp.cfg),
            "gs_cfg": asdict(self.gs.cfg),
            "base_checksum": self.base_checksum,
            "camera_rows": {str(k): v for k, v in self.camera_rows.items()},
        }
        save_checkpoint(path, "protection_bundle", meta, arrays)

    @classmethod
    def load(cls, path, base_field):
        _, meta, arrays = load_checkpoint(path, "protection_bundle")
        if base_field.checksum() != meta["base_checksum"]:
            raise ValueError("protection bundle does not match the supplied "
                             "base field (checksum mismatch)")
        gp = PerturbationField.__new__(PerturbationField)
        gp.cfg = PerturbationFieldConfig(**meta["gp_cfg"])
        gp.params = {k[3:]: v for k, v in arrays.items()
                     if k.startswith("gp.")}
        gs = SensitivityField.__new__(SensitivityField)
        gs.cfg = SensitivityFieldConfig(**meta["gs_cfg"])
        gs.params = {k[3:]: v for k, v in arrays.items()
                     if k.startswith("gs.")}
        cfg = ProtectConfig(**{**meta["cfg"],
                               "voxel_resolution":
                               tuple(meta["cfg"]["voxel_resolution"])})
        rows = {int(k): v for k, v in meta["camera_rows"].items()}
        return cls(gp, gs, meta["sigma_bar"], cfg, meta["base_checksum"],
                   rows)


def make_protection_fields(dataset, seed=0, trunk_width=256, trunk_depth=4):
    """Fresh zero-perturbation fields sized to the dataset's train cameras."""
    n_train = len(dataset.train_idx)
    gp = PerturbationField(
        PerturbationFieldConfig(trunk_width=trunk_width,
                                trunk_depth=trunk_depth,
                                num_cameras=n_train), seed=seed)
    gs = SensitivityField(
        SensitivityFieldConfig(trunk_width=trunk_width,
                               trunk_depth=trunk_depth), seed=seed + 1)
    camera_rows = {dataset.cameras[v].camera_id: row
                   for row, v in enumerate(dataset.train_idx)}
    return gp, gs, camera_rows


def _patch_pixel_indices(width, height, patch_size, patch_ids):
    """Row-major pixel indices for the given patch ids, patch-major order."""
    pw = width // patch_size
    rows = []
    for pid in patch_ids:
        py, px = divmod(pid, pw)
        ys = py * patch_size + np.arange(patch_size)
        xs = px * patch_size + np.arange(patch_size)
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        rows.append((yy * width + xx).reshape(-1))
    return np.concatenate(rows)


class _StepState:
    """Per-run caches: camera rays and gt pixels, flattened per view."""

    def __init__(self, dataset):
        self.rays = {}
        self.gt = {}
        for idx, cam in enumerate(dataset.cameras):
            self.rays[idx] = render_mod.generate_rays(cam)
            self.gt[idx] = dataset.images[idx].reshape(-1, 3)


def _render_protected_batch(tape, field, gp, gs, gp_bound, gs_bound, cfg,
                            sigma_bar, origins, dirs, tvals, dts, cam_row,
                            rng):
    """Differentiable protected render of a ray batch (training path)."""
    n_rays, n_samples = tvals.shape
    pts = (origins[:, None, :] + tvals[..., None] * dirs[:, None, :])
    pts = pts.reshape(-1, 3)
    dirs_rep = np.repeat(dirs, n_samples, axis=0)
    color, sigma = field.query(tape, pts, dirs_rep)
    ids = None if cam_row is None else np.full(pts.shape[0], cam_row,
                                               dtype=int)
    dcol, dsig = gp.query(tape, pts, dirs_rep, camera_ids=ids,
                          bound=gp_bound)
    dsig_hat, s = constrain(tape, dsig, pts, cfg.constraint_mode, gs=gs,
                            gs_bound=gs_bound, sigma_bar=sigma_bar,
                            epsilon=cfg.epsilon, rng=rng)
    c2, s2 = apply_perturbation(color, sigma, dcol, dsig_hat,
                                cfg.perturb_mode, cfg.constrain_color,
                                cfg.kappa_c, s)
    c2 = dc.reshape(c2, (n_rays, n_samples, 3))
    s2 = dc.reshape(s2, (n_rays, n_samples))
    return render_mod.volume_render(c2, s2, dts)


def train_protection(base_field, gp, gs, target_model, dataset, scene, cfg,
                     modality="image", camera_rows=None):
    """Optimize the perturbation/sensitivity fields against a frozen target.

    The base field and target model stay frozen (checksum-asserted).  For
    image targets every step combines a naturalness ray batch with a
    patch-subset attack render; for voxel targets the attack runs on even
    steps over the feature grid and naturalness on odd steps.
    """
    if modality not in ("image", "voxel"):
        raise ValueError(f"unknown modality {modality!r}")
    base_sum = base_field.checksum()
    target_sum = target_model.checksum()
    sigma_bar = compute_field_mean_density(
        base_field, scene.bounds_min, scene.bounds_max,
        cfg.sigma_bar_resolution)
    if cfg.constraint_mode not in ("none", "fixed_eps"):
        _check_sigma_bar(sigma_bar)
    if camera_rows is None:
        camera_rows = {dataset.cameras[v].camera_id: row
                       for row, v in enumerate(dataset.train_idx)}
    state = _StepState(dataset)
    rng = np.random.default_rng(cfg.seed)
    random_s_rng = np.random.default_rng(cfg.seed + 7919)
    params = {f"gp.{k}": v for k, v in gp.params.items()}
    params.update({f"gs.{k}": v for k, v in gs.params.items()})
    opt = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
               total_steps=cfg.steps, cosine=cfg.cosine)
    if modality == "voxel":
        occ_target = occupancy_target(scene, cfg.voxel_resolution)
    log = []
    cam0 = dataset.cameras[0]
    t_near, t_far = _ray_range(dataset)
    for step in range(cfg.steps):
        t0 = time.perf_counter()
        tape = dc.Tape()
        gp_bound = gp.bind(tape, trainable=True)
        gs_bound = gs.bind(tape, trainable=True)
        s_rng = random_s_rng if cfg.constraint_mode == "random" else None

        l_nat = None
        l_pro = None
        do_nat = modality == "image" or step % 2 == 1
        do_attack = modality == "image" or step % 2 == 0
        if do_nat:
            view = int(rng.choice(dataset.train_idx))
            origins, dirs = state.rays[view]
            pix = rng.choice(origins.shape[0], size=cfg.nat_rays_per_step,
                             replace=False)
            tvals, dts = render_mod.sample_along_rays(
                t_near, t_far, pix.size, cfg.n_samples, stratified=True,
                rng=rng)
            out = _render_protected_batch(
                tape, base_field, gp, gs, gp_bound, gs_bound, cfg, sigma_bar,
                origins[pix], dirs[pix], tvals, dts,
                camera_rows.get(dataset.cameras[view].camera_id), s_rng)
            l_nat = naturalness_loss(out, state.gt[view][pix])
        if do_attack and modality == "image":
            view = int(rng.choice(dataset.train_idx))
            origins, dirs = state.rays[view]
            patch = target_model.cfg.patch_size
            n_patches = (cam0.width // patch) * (cam0.height // patch)
            pids = rng.choice(n_patches, size=cfg.attack_patches_per_step,
                              replace=False)
            pix = _patch_pixel_indices(cam0.width, cam0.height, patch, pids)
            tvals, dts = render_mod.sample_along_rays(
                t_near, t_far, pix.size, cfg.n_samples, stratified=True,
                rng=rng)
            out = _render_protected_batch(
                tape, base_field, gp, gs, gp_bound, gs_bound, cfg, sigma_bar,
                origins[pix], dirs[pix], tvals, dts,
                camera_rows.get(dataset.cameras[view].camera_id), s_rng)
            patches = dc.reshape(out, (cfg.attack_patches_per_step,
                                       patch * patch * 3))
            logits = target_model.logits_from_patches(tape, patches)
            l_f = classifier_loss(tape, logits, dataset.label,
                                  target_model.cfg.num_classes)
            l_pro = protection_loss(l_f)
        elif do_attack and modality == "voxel":
            def protected_points(tape_, pts, dirs_):
                color, sigma = base_field.query(tape_, pts, dirs_)
                dcol, dsig = gp.query(tape_, pts, dirs_, camera_ids=None,
                                      bound=gp_bound)
                dsig_hat, s = constrain(tape_, dsig, pts,
                                        cfg.constraint_mode, gs=gs,
                                        gs_bound=gs_bound,
                                        sigma_bar=sigma_bar,
                                        epsilon=cfg.epsilon, rng=s_rng)
                return apply_perturbation(color, sigma, dcol, dsig_hat,
                                          cfg.perturb_mode,
                                          cfg.constrain_color, cfg.kappa_c,
                                          s)
            color, sigma = render_mod.extract_voxel_features(
                tape, protected_points, scene.bounds_min, scene.bounds_max,
                cfg.voxel_resolution)
            logits = target_model.logits_from_features(
                tape, color, sigma, cfg.voxel_resolution)
            l_pro = protection_loss(voxel_loss(tape, logits, occ_target))

        loss = total_loss(l_pro, l_nat, cfg.lambda_pro, cfg.lambda_nat)
        if not np.isfinite(loss.value):
            raise RuntimeError(
                f"train_protection: non-finite loss at step {step} "
                f"(L_pro={None if l_pro is None else l_pro.value}, "
                f"L_nat={None if l_nat is None else l_nat.value})")
        grads = tape.backward(loss)
        step_grads = {}
        for name, t in gp_bound.items():
            step_grads[f"gp.{name}"] = grads[t.id]
        for name, t in gs_bound.items():
            step_grads[f"gs.{name}"] = grads[t.id]
        lr = opt.step(step_grads)
        tape.release()
        log.append({
            "step": step,
            "l_pro": float("nan") if l_pro is None else float(l_pro.value),
            "l_nat": float("nan") if l_nat is None else float(l_nat.value),
            "loss": float(loss.value),
            "lr": float(lr),
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        })
    if base_field.checksum() != base_sum:
        raise RuntimeError("train_protection: base field changed")
    if target_model.checksum() != target_sum:
        raise RuntimeError("train_protection: target model changed")
    bundle = ProtectionBundle(gp, gs, sigma_bar, cfg, base_sum, camera_rows)
    return bundle, log


def _ray_range(dataset):
    """Near/far range implied by the rig geometry (camera distance +- 1.8)."""
    cam = dataset.cameras[0]
    radius = float(np.linalg.norm(cam.pose[:3, 3]))
    return radius - 1.8, radius + 1.8


def train_adversarial_finetune(base_field, target_model, dataset, cfg):
    """Baseline: fine-tune the radiance field itself on the combined loss.

    The result is a permanently altered field; there is no switch to turn
    protection off.  Returns (fine-tuned copy, log).
    """
    import copy
    field = copy.deepcopy(base_field)
    state = _StepState(dataset)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(field.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
               total_steps=cfg.steps, cosine=cfg.cosine)
    t_near, t_far = _ray_range(dataset)
    cam0 = dataset.cameras[0]
    log = []
    for step in range(cfg.steps):
        t0 = time.perf_counter()
        tape = dc.Tape()
        bound = field.bind(tape, trainable=True)

        view = int(rng.choice(dataset.train_idx))
        origins, dirs = state.rays[view]
        pix = rng.choice(origins.shape[0], size=cfg.nat_rays_per_step,
                         replace=False)
        tvals, dts = render_mod.sample_along_rays(
            t_near, t_far, pix.size, cfg.n_samples, stratified=True, rng=rng)
        out = render_mod.render_rays(
            tape, lambda tp, p, d: field.query(tp, p, d, bound=bound),
            origins[pix], dirs[pix], tvals, dts)
        l_nat = naturalness_loss(out, state.gt[view][pix])

        view = int(rng.choice(dataset.train_idx))
        origins, dirs = state.rays[view]
        patch = target_model.cfg.patch_size
        n_patches = (cam0.width // patch) * (cam0.height // patch)
        pids = rng.choice(n_patches, size=cfg.attack_patches_per_step,
                          replace=False)
        pix = _patch_pixel_indices(cam0.width, cam0.height, patch, pids)
        tvals, dts = render_mod.sample_along_rays(
            t_near, t_far, pix.size, cfg.n_samples, stratified=True, rng=rng)
        out = render_mod.render_rays(
            tape, lambda tp, p, d: field.query(tp, p, d, bound=bound),
            origins[pix], dirs[pix], tvals, dts)
        patches = dc.reshape(out, (cfg.attack_patches_per_step,
                                   patch * patch * 3))
        logits = target_model.logits_from_patches(tape, patches)
        l_pro = protection_loss(classifier_loss(
            tape, logits, dataset.label, target_model.cfg.num_classes))

        loss = total_loss(l_pro, l_nat, cfg.lambda_pro, cfg.lambda_nat)
        if not np.isfinite(loss.value):
            raise RuntimeError(
                f"train_adversarial_finetune: non-finite loss at step {step}")
        grads = tape.backward(loss)
        lr = opt.step({name: grads[t.id] for name, t in bound.items()})
        tape.release()
        log.append({"step": step, "l_pro": float(l_pro.value),
                    "l_nat": float(l_nat.value), "loss": float(loss.value),
                    "lr": float(lr),
                    "wall_ms": (time.perf_counter() - t0) * 1e3})
    return field, log


def write_training_log(path, log):
    with open(path, "w") as f:
        f.write("step,l_pro,l_nat,loss,lr,wall_ms\n")
        for row in log:
            f.write(f"{row['step']},{row['l_pro']:.10g},"
                    f"{row['l_nat']:.10g},{row['loss']:.10g},"
                    f"{row['lr']:.10g},{row['wall_ms']:.3f}\n")
