"""The three MLP fields: base radiance field, perturbation field and
sensitivity field, plus sinusoidal positional encoding and per-camera
embeddings.  All forward passes run through the diffcore tape so gradients
reach every weight when a model is bound as trainable."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict

import numpy as np

from . import diffcore as dc
from .checkpoint import save_checkpoint, load_checkpoint


@dataclass
class EncodingConfig:
    num_bands: int
    include_input: bool = True

    def out_dim(self, in_dim):
        return in_dim * (2 * self.num_bands + (1 if self.include_input else 0))


def positional_encode(x, cfg):
    """Sinusoidal encoding: [x?, sin(2^k pi x), cos(2^k pi x) for k < L]."""
    if cfg.num_bands == 0 and not cfg.include_input:
        raise ValueError("positional_encode: empty encoding")
    parts = [x] if cfg.include_input else []
    for k in range(cfg.num_bands):
        scaled = dc.mul(x, x.tape.constant(float(2 ** k) * np.pi))
        parts.append(dc.sin(scaled))
        parts.append(dc.cos(scaled))
    if len(parts) == 1:
        return parts[0]
    return dc.concat(parts, axis=1)


def glorot_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _linear(x, w, b):
    return dc.add(dc.matmul(x, w), b)


def weights_checksum(params):
    """sha256 over the concatenated little-endian float64 weight bytes."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


class _FieldBase:
    """Common parameter handling: bind to a tape, checkpoint, checksum."""

    kind = "field"

    def bind(self, tape, trainable=False):
        make = tape.parameter if trainable else tape.constant
        return {name: make(arr) for name, arr in self.params.items()}

    def apply_gradients(self, bound, grads, update):
        """update(name, grad) for every bound parameter with a gradient."""
        for name, tensor in bound.items():
            if tensor.id in grads:
                update(name, grads[tensor.id])

    def checksum(self):
        return weights_checksum(self.params)

    def save(self, path):
        save_checkpoint(path, self.kind, {"cfg": asdict(self.cfg)},
                        self.params)

    @classmethod
    def load(cls, path):
        _, meta, arrays = load_checkpoint(path, expect_kind=cls.kind)
        model = cls.__new__(cls)
        model.cfg = cls.config_type(**meta["cfg"])
        model.params = arrays
        return model


def _check_points(x, d=None, check_unit=True):
    xv = x.value if isinstance(x, dc.Tensor) else np.asarray(x, np.float64)
    if not np.all(np.isfinite(xv)):
        raise ValueError("field query: non-finite positions")
    if d is not None:
        dv = d.value if isinstance(d, dc.Tensor) else np.asarray(d, np.float64)
        if not np.all(np.isfinite(dv)):
            raise ValueError("field query: non-finite directions")
        if check_unit:
            norms = np.linalg.norm(dv, axis=-1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("field query: directions must be unit length")
        d = d if isinstance(d, dc.Tensor) else dv
    return (x if isinstance(x, dc.Tensor) else xv), d


@dataclass
class RadianceFieldConfig:
    pos_bands: int = 12
    dir_bands: int = 4
    trunk_width: int = 256
    trunk_depth: int = 4
    color_hidden: int = 128
    density_activation: str = "softplus"   # or "relu"


class RadianceField(_FieldBase):
    """Position/direction -> (color in (0,1)^3, density >= 0)."""

    kind = "radiance_field"
    config_type = RadianceFieldConfig

    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg or RadianceFieldConfig()
        rng = np.random.default_rng(seed)
        c = self.cfg
        pos_dim = EncodingConfig(c.pos_bands).out_dim(3)
        dir_dim = EncodingConfig(c.dir_bands).out_dim(3)
        p = {}
        w = c.trunk_width
        dims = [pos_dim] + [w] * c.trunk_depth
        for i in range(c.trunk_depth):
            p[f"trunk_w{i}"] = glorot_uniform(rng, dims[i], dims[i + 1])
            p[f"trunk_b{i}"] = np.zeros((1, dims[i + 1]))
        p["density_w"] = glorot_uniform(rng, w, 1)
        p["density_b"] = np.zeros((1, 1))
        p["feature_w"] = glorot_uniform(rng, w, w)
        p["feature_b"] = np.zeros((1, w))
        p["color_w1"] = glorot_uniform(rng, w + dir_dim, c.color_hidden)
        p["color_b1"] = np.zeros((1, c.color_hidden))
        p["color_w2"] = glorot_uniform(rng, c.color_hidden, 3)
        p["color_b2"] = np.zeros((1, 3))
        self.params = p

    def query(self, tape, x, d, bound=None, trainable=False):
        """Returns (color (P,3), density (P,)) tensors on `tape`."""
        x, d = _check_points(x, d)
        if bound is None:
            bound = self.bind(tape, trainable)
        c = self.cfg
        h = positional_encode(tape.lift(x), EncodingConfig(c.pos_bands))
        for i in range(c.trunk_depth):
            h = dc.relu(_linear(h, bound[f"trunk_w{i}"], bound[f"trunk_b{i}"]))
        sigma_logit = _linear(h, bound["density_w"], bound["density_b"])
        act = dc.softplus if c.density_activation == "softplus" else dc.relu
        sigma = dc.reshape(act(sigma_logit), (x.shape[0],))
        feat = _linear(h, bound["feature_w"], bound["feature_b"])
        d_enc = positional_encode(tape.lift(d), EncodingConfig(c.dir_bands))
        ch = dc.relu(_linear(dc.concat([feat, d_enc], axis=1),
                             bound["color_w1"], bound["color_b1"]))
        color = dc.sigmoid(_linear(ch, bound["color_w2"], bound["color_b2"]))
        return color, sigma

    def query_np(self, x, d):
        tape = dc.Tape()
        color, sigma = self.query(tape, x, d)
        return color.value, sigma.value


@dataclass
class PerturbationFieldConfig:
    pos_bands: int = 12
    dir_bands: int = 4
    trunk_width: int = 256
    trunk_depth: int = 4
    color_hidden: int = 128
    embed_dim: int = 16
    num_cameras: int = 1


class PerturbationField(_FieldBase):
    """Position/direction/camera -> unbounded (color delta, density delta).

    Head layers start at zero so a fresh model is the exact identity
    (no perturbation anywhere); the direction branch additionally consumes
    a learned per-camera embedding.
    """

    kind = "perturbation_field"
    config_type = PerturbationFieldConfig

    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg or PerturbationFieldConfig()
        rng = np.random.default_rng(seed)
        c = self.cfg
        pos_dim = EncodingConfig(c.pos_bands).out_dim(3)
        dir_dim = EncodingConfig(c.dir_bands).out_dim(3)
        w = c.trunk_width
        p = {}
        dims = [pos_dim] + [w] * c.trunk_depth
        for i in range(c.trunk_depth):
            p[f"trunk_w{i}"] = glorot_uniform(rng, dims[i], dims[i + 1])
            p[f"trunk_b{i}"] = np.zeros((1, dims[i + 1]))
        p["dsigma_w"] = np.zeros((w, 1))
        p["dsigma_b"] = np.zeros((1, 1))
        p["feature_w"] = glorot_uniform(rng, w, w)
        p["feature_b"] = np.zeros((1, w))
        p["color_w1"] = glorot_uniform(rng, w + dir_dim + c.embed_dim,
                                       c.color_hidden)
        p["color_b1"] = np.zeros((1, c.color_hidden))
        p["color_w2"] = np.zeros((c.color_hidden, 3))
        p["color_b2"] = np.zeros((1, 3))
        p["embed"] = rng.normal(scale=0.01, size=(c.num_cameras, c.embed_dim))
        self.params = p

    def query(self, tape, x, d, camera_ids=None, bound=None, trainable=False):
        """Returns (delta_color (P,3), delta_sigma (P,)) tensors.

        camera_ids: per-point integer camera ids, or None for the mean
        embedding (novel / unknown cameras at inference).
        """
        x, d = _check_points(x, d, check_unit=False)
        if bound is None:
            bound = self.bind(tape, trainable)
        c = self.cfg
        n = x.shape[0]
        h = positional_encode(tape.lift(x), EncodingConfig(c.pos_bands))
        for i in range(c.trunk_depth):
            h = dc.relu(_linear(h, bound[f"trunk_w{i}"], bound[f"trunk_b{i}"]))
        dsigma = dc.reshape(_linear(h, bound["dsigma_w"], bound["dsigma_b"]),
                            (n,))
        feat = _linear(h, bound["feature_w"], bound["feature_b"])
        d_enc = positional_encode(tape.lift(d), EncodingConfig(c.dir_bands))
        if camera_ids is None:
            mean = dc.tmean(bound["embed"], axis=0)
            emb = dc.broadcast_to(dc.reshape(mean, (1, c.embed_dim)),
                                  (n, c.embed_dim))
        else:
            ids = np.asarray(camera_ids)
            if ids.shape != (n,):
                raise ValueError("perturbation query: camera_ids must be "
                                 "one id per point")
            emb = dc.gather(bound["embed"], ids)
        ch = dc.relu(_linear(dc.concat([feat, d_enc, emb], axis=1),
                             bound["color_w1"], bound["color_b1"]))
        dcolor = _linear(ch, bound["color_w2"], bound["color_b2"])
        return dcolor, dsigma


@dataclass
class SensitivityFieldConfig:
    pos_bands: int = 12
    trunk_width: int = 256
    trunk_depth: int = 4


class SensitivityField(_FieldBase):
    """Position -> scalar sensitivity in (0,1); direction-independent.

    Zero head init makes the initial sensitivity exactly 0.5 everywhere.
    """

    kind = "sensitivity_field"
    config_type = SensitivityFieldConfig

    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg or SensitivityFieldConfig()
        rng = np.random.default_rng(seed)
        c = self.cfg
        pos_dim = EncodingConfig(c.pos_bands).out_dim(3)
        w = c.trunk_width
        p = {}
        dims = [pos_dim] + [w] * c.trunk_depth
        for i in range(c.trunk_depth):
            p[f"trunk_w{i}"] = glorot_uniform(rng, dims[i], dims[i + 1])
            p[f"trunk_b{i}"] = np.zeros((1, dims[i + 1]))
        p["head_w"] = np.zeros((w, 1))
        p["head_b"] = np.zeros((1, 1))
        self.params = p

    def query(self, tape, x, bound=None, trainable=False):
        x, _ = _check_points(x)
        if bound is None:
            bound = self.bind(tape, trainable)
        c = self.cfg
        h = positional_encode(tape.lift(x), EncodingConfig(c.pos_bands))
        for i in range(c.trunk_depth):
            h = dc.relu(_linear(h, bound[f"trunk_w{i}"], bound[f"trunk_b{i}"]))
        s = dc.sigmoid(_linear(h, bound["head_w"], bound["head_b"]))
        return dc.reshape(s, (x.shape[0],))
