"""Toy unauthorized downstream models: a patch-MLP multi-view image
classifier and a per-cell voxel-occupancy localizer.  Both are expressed
through diffcore so their task losses are differentiable with respect to
their inputs (rendered pixels / voxel features), which is what the
protection objective backpropagates through."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import diffcore as dc
from . import render as render_mod
from .checkpoint import save_checkpoint, load_checkpoint
from .fields import glorot_uniform, weights_checksum
from .optim import Adam


@dataclass
class ClassifierConfig:
    patch_size: int = 8
    hidden: int = 64
    num_classes: int = 4


def image_to_patches(image, patch_size):
    """Non-overlapping patches, row-major; each row is a flattened patch."""
    h, w, _ = image.shape
    if h % patch_size or w % patch_size:
        raise ValueError("image dimensions must be divisible by patch size")
    ph, pw = h // patch_size, w // patch_size
    patches = image.reshape(ph, patch_size, pw, patch_size, 3)
    patches = patches.transpose(0, 2, 1, 3, 4)
    return patches.reshape(ph * pw, patch_size * patch_size * 3)


class PatchClassifier:
    """flatten patches -> linear -> ReLU -> mean-pool -> linear logits."""

    kind = "patch_classifier"

    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg or ClassifierConfig()
        rng = np.random.default_rng(seed)
        c = self.cfg
        feat = c.patch_size * c.patch_size * 3
        self.params = {
            "w1": glorot_uniform(rng, feat, c.hidden),
            "b1": np.zeros((1, c.hidden)),
            "w2": glorot_uniform(rng, c.hidden, c.num_classes),
            "b2": np.zeros((1, c.num_classes)),
        }

    def bind(self, tape, trainable=False):
        make = tape.parameter if trainable else tape.constant
        return {k: make(v) for k, v in self.params.items()}

    def logits_from_patches(self, tape, patches, bound=None, trainable=False):
        """patches: (n_patches, patch_size^2 * 3) tensor -> (1, C) logits.

        Mean pooling over patches means any patch subset yields valid
        logits, which the protection loop exploits to attack with partial
        renders.
        """
        if bound is None:
            bound = self.bind(tape, trainable)
        h = dc.relu(dc.add(dc.matmul(patches, bound["w1"]), bound["b1"]))
        pooled = dc.reshape(dc.tmean(h, axis=0), (1, self.cfg.hidden))
        return dc.add(dc.matmul(pooled, bound["w2"]), bound["b2"])

    def logits_np(self, image):
        tape = dc.Tape()
        patches = tape.constant(image_to_patches(np.asarray(image),
                                                 self.cfg.patch_size))
        return self.logits_from_patches(tape, patches).value[0]

    def predict(self, image):
        return int(np.argmax(self.logits_np(image)))

    def checksum(self):
        return weights_checksum(self.params)

    def save(self, path):
        save_checkpoint(path, self.kind, {"cfg": asdict(self.cfg)},
                        self.params)

    @classmethod
    def load(cls, path):
        _, meta, arrays = load_checkpoint(path, expect_kind=cls.kind)
        model = cls.__new__(cls)
        model.cfg = ClassifierConfig(**meta["cfg"])
        model.params = arrays
        return model


def classifier_loss(tape, logits, label, num_classes):
    if not 0 <= label < num_classes:
        raise ValueError(f"label {label} out of range [0, {num_classes})")
    return dc.softmax_cross_entropy(logits, np.array([label]))


def train_classifier(datasets, cfg=None, steps=400, lr=5e-3, seed=0):
    """Full-batch training on the train split of every dataset in the bank.

    Aborts on divergence; the default bank reaches >= 0.9 test accuracy.
    """
    labels = sorted({d.label for d in datasets})
    if len(labels) < 2:
        raise ValueError("train_classifier: need at least 2 classes")
    model = PatchClassifier(cfg, seed=seed)
    c = model.cfg
    patch_sets, ys = [], []
    for d in datasets:
        for idx in d.train_idx:
            patch_sets.append(image_to_patches(d.images[idx], c.patch_size))
            ys.append(d.label)
    n_images = len(patch_sets)
    n_patches = patch_sets[0].shape[0]
    all_patches = np.concatenate(patch_sets, axis=0)
    ys = np.asarray(ys)
    # block-mean pooling matrix: (n_images*n_patches, n_images)
    pool = np.kron(np.eye(n_images), np.full((n_patches, 1), 1.0 / n_patches))
    opt = Adam(model.params, lr=lr, total_steps=steps, cosine=True)
    for step in range(steps):
        tape = dc.Tape()
        bound = model.bind(tape, trainable=True)
        h = dc.relu(dc.add(dc.matmul(tape.constant(all_patches),
                                     bound["w1"]), bound["b1"]))
        pooled = dc.matmul(tape.constant(pool.T), h)
        logits = dc.add(dc.matmul(pooled, bound["w2"]), bound["b2"])
        loss = dc.softmax_cross_entropy(logits, ys)
        if not np.isfinite(loss.value):
            raise RuntimeError(f"train_classifier: loss diverged at "
                               f"step {step}")
        grads = tape.backward(loss)
        opt.step({name: grads[t.id] for name, t in bound.items()})
        tape.release()
    return model


def classifier_accuracy(model, images, labels):
    preds = [model.predict(img) for img in images]
    return float(np.mean([p == y for p, y in zip(preds, labels)]))


# -- voxel occupancy ---------------------------------------------------

@dataclass
class VoxelModelConfig:
    hidden: int = 32


def neighbor_indices(resolution):
    """(G, 27) indices of the 3x3x3 neighborhood, clamped at the faces."""
    nx, ny, nz = resolution
    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                             indexing="ij")
    cols = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                jx = np.clip(ix + dx, 0, nx - 1)
                jy = np.clip(iy + dy, 0, ny - 1)
                jz = np.clip(iz + dz, 0, nz - 1)
                cols.append(((jx * ny) + jy) * nz + jz)
    return np.stack([c.reshape(-1) for c in cols], axis=1)


class VoxelOccupancyModel:
    """Per-cell MLP over (color, density) plus a 3x3x3 neighborhood-average
    channel; one occupancy logit per cell."""

    kind = "voxel_occupancy"

    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg or VoxelModelConfig()
        rng = np.random.default_rng(seed)
        h = self.cfg.hidden
        self.params = {
            "w1": glorot_uniform(rng, 8, h),
            "b1": np.zeros((1, h)),
            "w2": glorot_uniform(rng, h, 1),
            "b2": np.zeros((1, 1)),
        }

    def bind(self, tape, trainable=False):
        make = tape.parameter if trainable else tape.constant
        return {k: make(v) for k, v in self.params.items()}

    def logits_from_features(self, tape, color, sigma, resolution,
                             bound=None, trainable=False):
        """color: (G,3) tensor, sigma: (G,) tensor -> (G,) logit tensor."""
        n_cells = color.shape[0]
        if n_cells != resolution[0] * resolution[1] * resolution[2]:
            raise ValueError("voxel model: grid/resolution mismatch")
        if bound is None:
            bound = self.bind(tape, trainable)
        feats = dc.concat([color, dc.reshape(sigma, (n_cells, 1))], axis=1)
        nbr = neighbor_indices(resolution)
        acc = None
        for k in range(nbr.shape[1]):
            g = dc.gather(feats, nbr[:, k])
            acc = g if acc is None else dc.add(acc, g)
        nbr_mean = dc.mul(acc, tape.constant(1.0 / nbr.shape[1]))
        x = dc.concat([feats, nbr_mean], axis=1)
        h = dc.relu(dc.add(dc.matmul(x, bound["w1"]), bound["b1"]))
        return dc.reshape(dc.add(dc.matmul(h, bound["w2"]), bound["b2"]),
                          (n_cells,))

    def predict_grid(self, grid):
        tape = dc.Tape()
        logits = self.logits_from_features(
            tape, tape.constant(grid.color), tape.constant(grid.sigma),
            grid.resolution)
        return logits.value > 0.0   # sigmoid threshold 0.5

    def checksum(self):
        return weights_checksum(self.params)

    def save(self, path):
        save_checkpoint(path, self.kind, {"cfg": asdict(self.cfg)},
                        self.params)

    @classmethod
    def load(cls, path):
        _, meta, arrays = load_checkpoint(path, expect_kind=cls.kind)
        model = cls.__new__(cls)
        model.cfg = VoxelModelConfig(**meta["cfg"])
        model.params = arrays
        return model


def voxel_loss(tape, logits, target):
    """Mean per-cell binary cross-entropy on logits (stable form)."""
    target = np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise ValueError(f"voxel_loss: logits {logits.shape} vs target "
                         f"{target.shape}")
    # log(1 + e^z) - t z
    return dc.tmean(dc.sub(dc.softplus(logits),
                           dc.mul(logits, tape.constant(target))))


def occupancy_target(scene, resolution):
    """Binary grid: cell center inside any primitive occupancy box -> 1."""
    centers = render_mod.voxel_cell_centers(scene.bounds_min,
                                            scene.bounds_max, resolution)
    occ = np.zeros(centers.shape[0], dtype=bool)
    for lo, hi in scene.occupancy_boxes():
        occ |= np.all((centers >= lo) & (centers <= hi), axis=1)
    return occ.astype(np.float64)


def occupancy_iou(pred, target):
    """IoU of boolean grids; two empty sets have IoU 1 by convention."""
    pred = np.asarray(pred, dtype=bool)
    target = np.asarray(target, dtype=bool)
    union = np.logical_or(pred, target).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, target).sum() / union)


def train_voxel_model(scene, sample_fn, resolution=(16, 16, 16), steps=300,
                      lr=1e-2, seed=0, n_train_grids=4):
    """Fit the occupancy model on jittered feature grids of one scene."""
    target = occupancy_target(scene, resolution)
    rng = np.random.default_rng(seed)
    grids = [render_mod.extract_voxel_grid(
        sample_fn, scene.bounds_min, scene.bounds_max, resolution,
        subsamples=2, rng=rng) for _ in range(n_train_grids)]
    colors = np.concatenate([g.color for g in grids], axis=0)
    sigmas = np.concatenate([g.sigma for g in grids], axis=0)
    targets = np.tile(target, n_train_grids)
    model = VoxelOccupancyModel(seed=seed)
    opt = Adam(model.params, lr=lr, total_steps=steps, cosine=True)
    nbig = (resolution[0] * n_train_grids, resolution[1], resolution[2])
    # stacking grids along x keeps each grid's neighborhoods local except at
    # the seams, which is tolerable for training data
    for step in range(steps):
        tape = dc.Tape()
        bound = model.bind(tape, trainable=True)
        logits = model.logits_from_features(
            tape, tape.constant(colors), tape.constant(sigmas), nbig,
            bound=bound)
        loss = voxel_loss(tape, logits, targets)
        if not np.isfinite(loss.value):
            raise RuntimeError(f"train_voxel_model: loss diverged at "
                               f"step {step}")
        grads = tape.backward(loss)
        opt.step({name: grads[t.id] for name, t in bound.items()})
        tape.release()
    return model
