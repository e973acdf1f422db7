"""Quality and disruption metrics (PSNR, SSIM, task accuracy, occupancy
IoU/recall), image-space robustness transforms, and the transferability
harness that scores one protection run against several downstream models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .downstream import PatchClassifier, classifier_accuracy, occupancy_iou

PSNR_CAP_DB = 99.0


def psnr(a, b, peak=1.0):
    """10 log10(peak^2 / MSE); identical inputs return +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def _luma(image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    return img


def _gaussian_kernel(sigma, radius):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter2(img, kernel):
    out = ndimage.correlate1d(img, kernel, axis=0, mode="reflect")
    return ndimage.correlate1d(out, kernel, axis=1, mode="reflect")


def ssim(a, b):
    """Mean local SSIM on luma; 11x11 Gaussian window, sigma 1.5, L=1."""
    ya, yb = _luma(a), _luma(b)
    if ya.shape != yb.shape:
        raise ValueError(f"ssim: shape mismatch {ya.shape} vs {yb.shape}")
    if min(ya.shape) < 11:
        raise ValueError("ssim: images must be at least 11x11")
    kernel = _gaussian_kernel(1.5, 5)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a = _filter2(ya, kernel)
    mu_b = _filter2(yb, kernel)
    var_a = _filter2(ya * ya, kernel) - mu_a * mu_a
    var_b = _filter2(yb * yb, kernel) - mu_b * mu_b
    cov = _filter2(ya * yb, kernel) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# -- task metrics -------------------------------------------------------

def classification_metrics(model, images, labels):
    if len(images) == 0:
        raise ValueError("classification_metrics: empty test set")
    return {"accuracy": classifier_accuracy(model, images, labels)}


def localization_metrics(pred_grid, target_grid, resolution,
                         thresholds=(0.25, 0.5)):
    """Occupancy IoU plus component recall: a connected component of the
    target counts as recalled at threshold t when the predicted cells cover
    at least fraction t of it."""
    pred = np.asarray(pred_grid, dtype=bool).reshape(resolution)
    target = np.asarray(target_grid, dtype=bool).reshape(resolution)
    out = {"iou": occupancy_iou(pred, target)}
    labeled, n_comp = ndimage.label(target)
    for t in thresholds:
        if n_comp == 0:
            out[f"recall_{t:g}"] = 1.0
            continue
        hit = 0
        for comp in range(1, n_comp + 1):
            mask = labeled == comp
            if pred[mask].mean() >= t:
                hit += 1
        out[f"recall_{t:g}"] = hit / n_comp
    return out


# -- robustness transforms ----------------------------------------------

@dataclass
class TransformSpec:
    kind: str                 # gaussian_noise | gaussian_blur | crop_margins
    amount: float             # variance | sigma | fraction | factor

    def __post_init__(self):
        kinds = ("gaussian_noise", "gaussian_blur", "crop_margins",
                 "down_up")
        if self.kind not in kinds:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.amount < 0:
            raise ValueError("transform amount must be nonnegative")
        if self.kind == "crop_margins" and self.amount >= 0.5:
            raise ValueError("crop fraction must be below 0.5")
        if self.kind == "down_up" and 0 < self.amount < 1:
            raise ValueError("down_up factor must be >= 1")


def _bilinear_resize(img, out_h, out_w):
    h, w = img.shape[:2]
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def apply_transform(image, spec, seed=0):
    """Perturb an image per the spec; zero-strength specs are exact
    identities (bitwise)."""
    img = np.asarray(image, dtype=np.float64)
    if spec.amount == 0 or (spec.kind == "down_up" and spec.amount == 1):
        return img.copy()
    if spec.kind == "gaussian_noise":
        rng = np.random.default_rng(seed)
        noisy = img + rng.normal(0.0, np.sqrt(spec.amount), size=img.shape)
        return np.clip(noisy, 0.0, 1.0)
    if spec.kind == "gaussian_blur":
        radius = int(np.ceil(3.0 * spec.amount))
        kernel = _gaussian_kernel(spec.amount, radius)
        out = np.stack([_filter2(img[..., c], kernel) for c in range(3)],
                       axis=-1)
        return np.clip(out, 0.0, 1.0)
    if spec.kind == "crop_margins":
        h, w = img.shape[:2]
        my = int(round(spec.amount * h))
        mx = int(round(spec.amount * w))
        cropped = img[my:h - my, mx:w - mx]
        return np.clip(_bilinear_resize(cropped, h, w), 0.0, 1.0)
    # down_up
    h, w = img.shape[:2]
    dh = max(1, int(round(h / spec.amount)))
    dw = max(1, int(round(w / spec.amount)))
    small = _bilinear_resize(img, dh, dw)
    return np.clip(_bilinear_resize(small, h, w), 0.0, 1.0)


# -- reports ------------------------------------------------------------

@dataclass
class MetricReport:
    """Per-scene metric rows plus their arithmetic-mean aggregate."""
    rows: list                # list of {"scene": name, metric: value, ...}
    fingerprint: str = ""

    def aggregate(self):
        keys = [k for k in self.rows[0] if k != "scene"]
        return {k: float(np.mean([_capped(r[k]) for r in self.rows]))
                for k in keys}

    def to_csv(self, path):
        keys = [k for k in self.rows[0] if k != "scene"]
        with open(path, "w") as f:
            f.write("scene," + ",".join(keys) + "\n")
            for r in self.rows:
                f.write(str(r["scene"]) + ","
                        + ",".join(f"{_capped(r[k]):.6g}" for k in keys)
                        + "\n")
            agg = self.aggregate()
            f.write("aggregate,"
                    + ",".join(f"{agg[k]:.6g}" for k in keys) + "\n")

    def to_text(self, path):
        with open(path, "w") as f:
            f.write(f"config {self.fingerprint}\n")
            for r in self.rows:
                f.write(" ".join(f"{k}={v}" for k, v in r.items()) + "\n")
            f.write("aggregate " + " ".join(
                f"{k}={v:.6g}" for k, v in self.aggregate().items()) + "\n")


def _capped(v):
    if isinstance(v, float) and np.isinf(v):
        return PSNR_CAP_DB
    return v


def transferability_eval(protected_images, labels, targets):
    """Accuracy of each target model on one set of protected renders.

    protected_images: list of images, labels: per-image labels, targets:
    ordered dict name -> classifier.  Returns {name: accuracy}.  Mixing
    modalities is rejected; running this once per surrogate bundle yields
    the surrogate x target matrix.
    """
    kinds = {type(m) for m in targets.values()}
    if not kinds <= {PatchClassifier}:
        bad = [k.__name__ for k in kinds - {PatchClassifier}]
        raise ValueError(f"transferability_eval: image-modality targets "
                         f"required, got {bad}")
    if len(protected_images) == 0:
        raise ValueError("transferability_eval: empty render set")
    return {name: classifier_accuracy(model, protected_images, labels)
            for name, model in targets.items()}
