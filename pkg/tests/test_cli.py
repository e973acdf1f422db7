import filecmp
import json
import os

import numpy as np
import pytest

from fieldguard import cli


def run(args):
    return cli.main(args)


def write_cfg(path, cfg):
    with open(path, "w") as f:
        json.dump(cfg, f)
    return str(path)


TINY_FIELD = {"pos_bands": 2, "dir_bands": 1, "trunk_width": 16,
              "trunk_depth": 2, "color_hidden": 8}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A miniature end-to-end pipeline: scenes, field, classifier, bundle."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    scene_cfg = write_cfg(root / "scene.json", {
        "num_classes": 2, "quadrature_n": 1024,
        "rig": {"n_views": 4, "width": 16, "height": 16},
    })
    assert run(["scene-gen", "--config", scene_cfg,
                "--out", str(data)]) == 0

    field_dir = root / "field"
    field_cfg = write_cfg(root / "field.json", {
        "data_dir": str(data), "scene_index": 0, "field": TINY_FIELD,
        "train": {"steps": 25, "rays_per_step": 64, "n_samples": 4},
    })
    assert run(["train-field", "--config", field_cfg,
                "--out", str(field_dir)]) == 0

    clf_dir = root / "clf"
    clf_cfg = write_cfg(root / "clf.json", {
        "data_dir": str(data),
        "classifier": {"steps": 60, "num_classes": 2},
    })
    assert run(["train-downstream", "--config", clf_cfg,
                "--out", str(clf_dir)]) == 0

    bundle_dir = root / "bundle"
    protect_cfg = write_cfg(root / "protect.json", {
        "data_dir": str(data), "scene_index": 0,
        "field_checkpoint": str(field_dir / "field.npz"),
        "target_checkpoint": str(clf_dir / "classifier.npz"),
        "gp_trunk_width": 16, "gp_trunk_depth": 2,
        "protect": {"steps": 4, "nat_rays_per_step": 32,
                    "attack_patches_per_step": 2, "n_samples": 4},
    })
    assert run(["protect", "--config", protect_cfg,
                "--out", str(bundle_dir)]) == 0
    return {"root": root, "data": data, "field_dir": field_dir,
            "clf_dir": clf_dir, "bundle_dir": bundle_dir}


def test_scene_gen_outputs_and_determinism(workdir, tmp_path):
    data = workdir["data"]
    assert (data / "scene_bank.json").exists()
    for k in range(2):
        views = sorted((data / f"class_{k}").glob("view_*.ppm"))
        assert len(views) == 4
    cfg = write_cfg(tmp_path / "scene.json", {
        "num_classes": 2, "quadrature_n": 1024,
        "rig": {"n_views": 4, "width": 16, "height": 16},
    })
    again = tmp_path / "again"
    assert run(["scene-gen", "--config", cfg, "--out", str(again)]) == 0
    for k in range(2):
        for name in sorted(os.listdir(data / f"class_{k}")):
            assert filecmp.cmp(data / f"class_{k}" / name,
                               again / f"class_{k}" / name, shallow=False)


def test_resolved_config_materializes_defaults(workdir):
    resolved = json.loads(
        (workdir["data"] / "config.resolved.json").read_text())
    assert resolved["num_classes"] == 2
    assert resolved["rig"]["focal"] == 80.0      # untouched default present
    assert resolved["quadrature_n"] == 1024


def test_train_field_artifacts(workdir):
    d = workdir["field_dir"]
    assert (d / "field.npz").exists()
    lines = (d / "train_log.csv").read_text().strip().splitlines()
    assert lines[0] == "step,loss,psnr,lr,wall_ms"
    assert len(lines) == 26


def test_train_field_resume_continues(workdir, tmp_path):
    import shutil
    # resume in a copy so the shared checkpoint stays bundle-compatible
    d = tmp_path / "field_copy"
    shutil.copytree(workdir["field_dir"], d)
    cfg = write_cfg(tmp_path / "resume.json", {
        "data_dir": str(workdir["data"]), "scene_index": 0,
        "field": TINY_FIELD, "resume": True,
        "train": {"steps": 30, "rays_per_step": 64, "n_samples": 4},
    })
    assert run(["train-field", "--config", cfg, "--out", str(d),
                "--force"]) == 0
    lines = (d / "train_log.csv").read_text().strip().splitlines()
    assert lines[-1].startswith("29,")
    assert len(lines) == 31


def test_render_clean_and_protected(workdir, tmp_path):
    cfg = write_cfg(tmp_path / "render.json", {
        "data_dir": str(workdir["data"]), "scene_index": 0,
        "field_checkpoint": str(workdir["field_dir"] / "field.npz"),
        "bundle_checkpoint": str(workdir["bundle_dir"] / "bundle.npz"),
        "views": "test", "n_samples": 4,
    })
    out = tmp_path / "renders"
    assert run(["render", "--config", cfg, "--out", str(out)]) == 0
    assert len(list(out.glob("clean_view_*.ppm"))) == 1
    assert run(["render", "--config", cfg, "--out", str(out),
                "--protected", "on", "--force"]) == 0
    assert len(list(out.glob("protected_view_*.ppm"))) == 1


def test_eval_report(workdir, tmp_path):
    cfg = write_cfg(tmp_path / "eval.json", {
        "data_dir": str(workdir["data"]), "scene_index": 0,
        "field_checkpoint": str(workdir["field_dir"] / "field.npz"),
        "bundle_checkpoint": str(workdir["bundle_dir"] / "bundle.npz"),
        "classifier_checkpoint": str(workdir["clf_dir"]
                                     / "classifier.npz"),
        "n_samples": 4,
    })
    out = tmp_path / "eval"
    assert run(["eval", "--config", cfg, "--out", str(out)]) == 0
    lines = (out / "report.csv").read_text().strip().splitlines()
    assert lines[0].startswith("scene,psnr_clean_db,psnr_protected_db")
    assert lines[-1].startswith("aggregate,")
    assert (out / "report.txt").exists()


def test_transfer_eval(workdir, tmp_path):
    cfg = write_cfg(tmp_path / "transfer.json", {
        "data_dir": str(workdir["data"]), "scene_index": 0,
        "field_checkpoint": str(workdir["field_dir"] / "field.npz"),
        "bundle_checkpoint": str(workdir["bundle_dir"] / "bundle.npz"),
        "targets": {"own": str(workdir["clf_dir"] / "classifier.npz")},
        "n_samples": 4,
    })
    out = tmp_path / "transfer"
    assert run(["transfer-eval", "--config", cfg, "--out", str(out)]) == 0
    lines = (out / "transfer.csv").read_text().strip().splitlines()
    assert lines == ["target,accuracy"] or len(lines) == 2


def test_robustness_eval(workdir, tmp_path):
    cfg = write_cfg(tmp_path / "robust.json", {
        "data_dir": str(workdir["data"]), "scene_index": 0,
        "field_checkpoint": str(workdir["field_dir"] / "field.npz"),
        "bundle_checkpoint": str(workdir["bundle_dir"] / "bundle.npz"),
        "classifier_checkpoint": str(workdir["clf_dir"]
                                     / "classifier.npz"),
        "n_samples": 4,
    })
    out = tmp_path / "robust"
    assert run(["robustness-eval", "--config", cfg, "--out",
                str(out)]) == 0
    lines = (out / "robustness.csv").read_text().strip().splitlines()
    assert lines[0] == "transform,amount,accuracy"
    assert len(lines) == 3


def test_usage_errors_exit_one(tmp_path):
    assert run([]) == cli.EXIT_USAGE
    assert run(["no-such-command"]) == cli.EXIT_USAGE
    assert run(["scene-gen", "--bogus-flag"]) == cli.EXIT_USAGE
    # --out is required
    assert run(["scene-gen"]) == cli.EXIT_USAGE


def test_validation_errors_exit_two(workdir, tmp_path):
    missing = str(tmp_path / "nope.json")
    assert run(["scene-gen", "--config", missing,
                "--out", str(tmp_path / "o1")]) == cli.EXIT_VALIDATION
    bad = write_cfg(tmp_path / "bad.json", {"not_a_key": 1})
    assert run(["scene-gen", "--config", bad,
                "--out", str(tmp_path / "o2")]) == cli.EXIT_VALIDATION
    # non-empty out dir without --force
    assert run(["scene-gen", "--out",
                str(workdir["data"])]) == cli.EXIT_VALIDATION


def test_stale_bundle_rejected(workdir, tmp_path):
    # a bundle trained against one field must not load against another
    other_dir = tmp_path / "other_field"
    cfg = write_cfg(tmp_path / "other.json", {
        "data_dir": str(workdir["data"]), "scene_index": 1,
        "field": TINY_FIELD,
        "train": {"steps": 5, "rays_per_step": 64, "n_samples": 4,
                  "seed": 7},
    })
    assert run(["train-field", "--config", cfg,
                "--out", str(other_dir)]) == 0
    rcfg = write_cfg(tmp_path / "render.json", {
        "data_dir": str(workdir["data"]), "scene_index": 0,
        "field_checkpoint": str(other_dir / "field.npz"),
        "bundle_checkpoint": str(workdir["bundle_dir"] / "bundle.npz"),
        "views": "test", "n_samples": 4,
    })
    assert run(["render", "--config", rcfg,
                "--out", str(tmp_path / "r"), "--protected",
                "on"]) == cli.EXIT_VALIDATION
