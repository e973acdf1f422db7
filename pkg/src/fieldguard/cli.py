"""Command-line surface: scene generation, field training, downstream-model
training, protection training, rendering and evaluation, each driven by a
JSON config whose fully-resolved copy is written next to the outputs.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import downstream, evaluation, pipeline, protect, scenes
from . import render as render_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .fields import RadianceField, RadianceFieldConfig
from .pipeline import FieldTrainConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_RIG_DEFAULTS = {
    "n_views": 24, "radius": 3.5, "elevation_deg": [-5.0, 40.0],
    "look_at": [0.0, 0.0, 0.0], "seed": 0, "width": 64, "height": 64,
    "focal": 80.0, "train_fraction": 0.8,
}

_DEFAULTS = {
    "scene-gen": {
        "num_classes": 4, "seed": 0, "quadrature_n": 4096,
        "rig": dict(_RIG_DEFAULTS),
    },
    "train-field": {
        "data_dir": "", "scene_index": 0, "resume": False,
        "field": asdict(RadianceFieldConfig()),
        "train": asdict(FieldTrainConfig()),
    },
    "train-downstream": {
        "kind": "classifier", "data_dir": "",
        "classifier": {"patch_size": 8, "hidden": 64, "num_classes": 4,
                       "steps": 400, "lr": 5e-3, "seed": 0},
        "voxel": {"scene_index": 2, "field_checkpoint": "",
                  "resolution": [16, 16, 16], "steps": 300, "lr": 1e-2,
                  "seed": 0},
    },
    "protect": {
        "data_dir": "", "scene_index": 0, "field_checkpoint": "",
        "target_checkpoint": "", "modality": "image",
        "gp_trunk_width": 256, "gp_trunk_depth": 4,
        "protect": asdict(protect.ProtectConfig()),
    },
    "render": {
        "data_dir": "", "scene_index": 0, "field_checkpoint": "",
        "bundle_checkpoint": "", "views": "test", "n_samples": 32,
    },
    "eval": {
        "data_dir": "", "scene_index": 0, "field_checkpoint": "",
        "bundle_checkpoint": "", "classifier_checkpoint": "",
        "n_samples": 32,
    },
    "transfer-eval": {
        "data_dir": "", "scene_index": 0, "field_checkpoint": "",
        "bundle_checkpoint": "", "targets": {}, "n_samples": 32,
    },
    "robustness-eval": {
        "data_dir": "", "scene_index": 0, "field_checkpoint": "",
        "bundle_checkpoint": "", "classifier_checkpoint": "",
        "n_samples": 32, "seed": 0,
        "transforms": [{"kind": "gaussian_noise", "amount": 0.005},
                       {"kind": "gaussian_blur", "amount": 1.0}],
    },
}


def _deep_merge(base, override, path=""):
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            # open dicts (empty defaults, e.g. transfer targets) accept
            # arbitrary keys
            if base == {}:
                out[key] = value
                continue
            raise ValueError(f"unknown config key {path}{key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def _resolve_config(command, config_path, seed_override):
    cfg = json.loads(json.dumps(_DEFAULTS[command]))
    if config_path is not None:
        if not os.path.exists(config_path):
            raise ValueError(f"config file not found: {config_path}")
        with open(config_path) as f:
            try:
                user = json.load(f)
            except json.JSONDecodeError as e:
                raise ValueError(f"malformed config {config_path}: {e}")
        cfg = _deep_merge(cfg, user)
    if seed_override is not None:
        _override_seeds(cfg, seed_override)
    return cfg


def _override_seeds(cfg, seed):
    for key, value in cfg.items():
        if key == "seed":
            cfg[key] = seed
        elif isinstance(value, dict):
            _override_seeds(value, seed)


def _prepare_out(out_dir, force):
    if out_dir is None:
        raise UsageError("--out is required")
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise ValueError(f"output directory {out_dir} is not empty; "
                         f"pass --force to reuse it")
    os.makedirs(out_dir, exist_ok=True)


def _write_resolved(out_dir, cfg):
    text = json.dumps(cfg, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "config.resolved.json"), "w") as f:
        f.write(text + "\n")
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _require_file(path, what):
    if not path:
        raise ValueError(f"config is missing the {what} path")
    if not os.path.exists(path):
        raise ValueError(f"{what} not found: {path}")
    return path


def _load_bank(data_dir):
    return scenes.load_scene_bank(
        _require_file(os.path.join(data_dir, "scene_bank.json"),
                      "scene bank"))


def _load_class_dataset(data_dir, index):
    path = os.path.join(data_dir, f"class_{index}")
    _require_file(os.path.join(path, "meta.json"), f"dataset class_{index}")
    return scenes.load_dataset(path)


# -- commands -----------------------------------------------------------

def cmd_scene_gen(cfg, out_dir):
    rig_args = dict(cfg["rig"])
    rig_args["elevation_deg"] = tuple(rig_args["elevation_deg"])
    rig_args["look_at"] = tuple(rig_args["look_at"])
    rig = scenes.CameraRig(**rig_args)
    bank = scenes.scene_bank(cfg["num_classes"], seed=cfg["seed"])
    scenes.save_scene_bank(os.path.join(out_dir, "scene_bank.json"), bank)
    for scene in bank:
        ds = scenes.generate_dataset(scene, rig,
                                     quadrature_n=cfg["quadrature_n"])
        scenes.save_dataset(os.path.join(out_dir,
                                         f"class_{scene.class_id}"), ds)
    print(f"wrote {len(bank)} classes x {rig.n_views} views to {out_dir}")


def cmd_train_field(cfg, out_dir):
    ds = _load_class_dataset(cfg["data_dir"], cfg["scene_index"])
    field_cfg = RadianceFieldConfig(**cfg["field"])
    train_cfg = FieldTrainConfig(**cfg["train"])
    ckpt = os.path.join(out_dir, "field.npz")
    field, start = None, 0
    if cfg["resume"]:
        _require_file(ckpt, "resume checkpoint")
        _, meta, _ = load_checkpoint(ckpt, "radiance_field")
        field = RadianceField.load(ckpt)
        start = meta.get("steps_done", 0)
    field, log = pipeline.train_radiance_field(
        ds, train_cfg, field_cfg=field_cfg, field=field, start_step=start)
    steps_done = log[-1]["step"] + 1 if log else start
    save_checkpoint(ckpt, field.kind,
                    {"cfg": asdict(field.cfg), "steps_done": steps_done},
                    field.params)
    mode = "a" if cfg["resume"] else "w"
    log_path = os.path.join(out_dir, "train_log.csv")
    with open(log_path, mode) as f:
        if mode == "w":
            f.write("step,loss,psnr,lr,wall_ms\n")
        for row in log:
            f.write(f"{row['step']},{row['loss']:.10g},{row['psnr']:.6g},"
                    f"{row['lr']:.10g},{row['wall_ms']:.3f}\n")
    final = log[-1]["psnr"] if log else float("nan")
    print(f"trained {steps_done} steps, train PSNR {final:.2f} dB")


def _scan_class_dirs(data_dir):
    indices = []
    for name in sorted(os.listdir(data_dir)):
        if name.startswith("class_") and name[6:].isdigit():
            indices.append(int(name[6:]))
    if not indices:
        raise ValueError(f"no class_* datasets under {data_dir}")
    return indices


def cmd_train_downstream(cfg, out_dir):
    if cfg["kind"] == "classifier":
        c = cfg["classifier"]
        datasets = [_load_class_dataset(cfg["data_dir"], k)
                    for k in _scan_class_dirs(cfg["data_dir"])]
        model = downstream.train_classifier(
            datasets,
            downstream.ClassifierConfig(c["patch_size"], c["hidden"],
                                        c["num_classes"]),
            steps=c["steps"], lr=c["lr"], seed=c["seed"])
        images, labels = [], []
        for d in datasets:
            for idx in d.test_idx:
                images.append(d.images[idx])
                labels.append(d.label)
        acc = downstream.classifier_accuracy(model, images, labels)
        model.save(os.path.join(out_dir, "classifier.npz"))
        print(f"classifier test accuracy {acc:.3f}")
    elif cfg["kind"] == "voxel":
        v = cfg["voxel"]
        bank = _load_bank(cfg["data_dir"])
        scene = bank[v["scene_index"]]
        field = RadianceField.load(
            _require_file(v["field_checkpoint"], "field checkpoint"))
        res = tuple(v["resolution"])
        model = downstream.train_voxel_model(
            scene, protect.base_sampler(field), resolution=res,
            steps=v["steps"], lr=v["lr"], seed=v["seed"])
        grid = render_mod.extract_voxel_grid(
            protect.base_sampler(field), scene.bounds_min,
            scene.bounds_max, res)
        iou = downstream.occupancy_iou(
            model.predict_grid(grid),
            downstream.occupancy_target(scene, res).astype(bool))
        model.save(os.path.join(out_dir, "voxel_model.npz"))
        print(f"voxel model clean IoU {iou:.3f}")
    else:
        raise ValueError(f"unknown downstream kind {cfg['kind']!r}")


def cmd_protect(cfg, out_dir):
    ds = _load_class_dataset(cfg["data_dir"], cfg["scene_index"])
    bank = _load_bank(cfg["data_dir"])
    scene = bank[cfg["scene_index"]]
    field = RadianceField.load(
        _require_file(cfg["field_checkpoint"], "field checkpoint"))
    target_path = _require_file(cfg["target_checkpoint"],
                                "target checkpoint")
    if cfg["modality"] == "image":
        target = downstream.PatchClassifier.load(target_path)
    elif cfg["modality"] == "voxel":
        target = downstream.VoxelOccupancyModel.load(target_path)
    else:
        raise ValueError(f"unknown modality {cfg['modality']!r}")
    pcfg_args = dict(cfg["protect"])
    pcfg_args["voxel_resolution"] = tuple(pcfg_args["voxel_resolution"])
    pcfg = protect.ProtectConfig(**pcfg_args)
    gp, gs, rows = protect.make_protection_fields(
        ds, seed=pcfg.seed, trunk_width=cfg["gp_trunk_width"],
        trunk_depth=cfg["gp_trunk_depth"])
    bundle, log = protect.train_protection(
        field, gp, gs, target, ds, scene, pcfg,
        modality=cfg["modality"], camera_rows=rows)
    bundle.save(os.path.join(out_dir, "bundle.npz"))
    protect.write_training_log(os.path.join(out_dir, "protect_log.csv"),
                               log)
    print(f"protection trained {len(log)} steps; "
          f"final L_pro {log[-1]['l_pro']:.4f} "
          f"L_nat {log[-1]['l_nat']:.4f}")


def _view_indices(ds, which):
    if which == "test":
        return list(ds.test_idx)
    if which == "train":
        return list(ds.train_idx)
    if which == "all":
        return list(range(len(ds.cameras)))
    raise ValueError(f"unknown view selection {which!r}")


def _render_views(field, ds, views, n_samples, bundle=None):
    if bundle is None:
        return pipeline.render_field_dataset(field, ds, views,
                                             n_samples=n_samples)
    return pipeline.render_field_dataset(
        field, ds, views, n_samples=n_samples,
        sample_fn=lambda cam: bundle.sampler(field, cam.camera_id))


def _load_bundle(cfg, field):
    path = _require_file(cfg["bundle_checkpoint"], "protection bundle")
    return protect.ProtectionBundle.load(path, field)


def cmd_render(cfg, out_dir, protected):
    ds = _load_class_dataset(cfg["data_dir"], cfg["scene_index"])
    field = RadianceField.load(
        _require_file(cfg["field_checkpoint"], "field checkpoint"))
    bundle = _load_bundle(cfg, field) if protected else None
    views = _view_indices(ds, cfg["views"])
    images = _render_views(field, ds, views, cfg["n_samples"], bundle)
    tag = "protected" if protected else "clean"
    for idx, img in zip(views, images):
        render_mod.write_ppm(
            os.path.join(out_dir, f"{tag}_view_{idx:03d}.ppm"), img)
    print(f"wrote {len(views)} {tag} views to {out_dir}")


def cmd_eval(cfg, out_dir, fingerprint):
    ds = _load_class_dataset(cfg["data_dir"], cfg["scene_index"])
    field = RadianceField.load(
        _require_file(cfg["field_checkpoint"], "field checkpoint"))
    bundle = _load_bundle(cfg, field)
    clf = downstream.PatchClassifier.load(
        _require_file(cfg["classifier_checkpoint"],
                      "classifier checkpoint"))
    views = list(ds.test_idx)
    clean = _render_views(field, ds, views, cfg["n_samples"])
    prot = _render_views(field, ds, views, cfg["n_samples"], bundle)
    rows = []
    for idx, c, p in zip(views, clean, prot):
        rows.append({
            "scene": f"view_{idx:03d}",
            "psnr_clean_db": evaluation.psnr(c, ds.images[idx]),
            "psnr_protected_db": evaluation.psnr(p, c),
            "ssim_protected": evaluation.ssim(p, c),
            "clean_correct": float(clf.predict(c) == ds.label),
            "protected_correct": float(clf.predict(p) == ds.label),
        })
    report = evaluation.MetricReport(rows, fingerprint=fingerprint)
    report.to_csv(os.path.join(out_dir, "report.csv"))
    report.to_text(os.path.join(out_dir, "report.txt"))
    agg = report.aggregate()
    print("aggregate: " + "  ".join(f"{k}={v:.4g}"
                                    for k, v in agg.items()))


def cmd_transfer_eval(cfg, out_dir):
    ds = _load_class_dataset(cfg["data_dir"], cfg["scene_index"])
    field = RadianceField.load(
        _require_file(cfg["field_checkpoint"], "field checkpoint"))
    bundle = _load_bundle(cfg, field)
    if not cfg["targets"]:
        raise ValueError("transfer-eval: no targets configured")
    targets = {name: downstream.PatchClassifier.load(
        _require_file(path, f"target {name}"))
        for name, path in cfg["targets"].items()}
    views = list(ds.test_idx)
    prot = _render_views(field, ds, views, cfg["n_samples"], bundle)
    labels = [ds.label] * len(prot)
    row = evaluation.transferability_eval(prot, labels, targets)
    with open(os.path.join(out_dir, "transfer.csv"), "w") as f:
        f.write("target,accuracy\n")
        for name, acc in row.items():
            f.write(f"{name},{acc:.6g}\n")
    print("  ".join(f"{k}={v:.3f}" for k, v in row.items()))


def cmd_robustness_eval(cfg, out_dir):
    ds = _load_class_dataset(cfg["data_dir"], cfg["scene_index"])
    field = RadianceField.load(
        _require_file(cfg["field_checkpoint"], "field checkpoint"))
    bundle = _load_bundle(cfg, field)
    clf = downstream.PatchClassifier.load(
        _require_file(cfg["classifier_checkpoint"],
                      "classifier checkpoint"))
    views = list(ds.test_idx)
    prot = _render_views(field, ds, views, cfg["n_samples"], bundle)
    labels = [ds.label] * len(prot)
    results = []
    for t in cfg["transforms"]:
        spec = evaluation.TransformSpec(t["kind"], t["amount"])
        transformed = [evaluation.apply_transform(img, spec,
                                                  seed=cfg["seed"] + i)
                       for i, img in enumerate(prot)]
        acc = downstream.classifier_accuracy(clf, transformed, labels)
        results.append((spec.kind, spec.amount, acc))
    with open(os.path.join(out_dir, "robustness.csv"), "w") as f:
        f.write("transform,amount,accuracy\n")
        for kind, amount, acc in results:
            f.write(f"{kind},{amount:.6g},{acc:.6g}\n")
    print("  ".join(f"{k}({a:g})={v:.3f}" for k, a, v in results))


# -- entry point --------------------------------------------------------

def _build_parser():
    parser = _Parser(prog="fieldguard",
                     description="sensitivity-guided radiance-field "
                                 "protection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _DEFAULTS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--force", action="store_true")
        if name == "render":
            p.add_argument("--protected", choices=["on", "off"],
                           default="off")
    return parser


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = _resolve_config(args.command, args.config, args.seed)
        _prepare_out(args.out, args.force)
        fingerprint = _write_resolved(args.out, cfg)
        if args.command == "scene-gen":
            cmd_scene_gen(cfg, args.out)
        elif args.command == "train-field":
            cmd_train_field(cfg, args.out)
        elif args.command == "train-downstream":
            cmd_train_downstream(cfg, args.out)
        elif args.command == "protect":
            cmd_protect(cfg, args.out)
        elif args.command == "render":
            cmd_render(cfg, args.out, args.protected == "on")
        elif args.command == "eval":
            cmd_eval(cfg, args.out, fingerprint)
        elif args.command == "transfer-eval":
            cmd_transfer_eval(cfg, args.out)
        else:
            cmd_robustness_eval(cfg, args.out)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, KeyError, TypeError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RuntimeError, FloatingPointError, OverflowError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
