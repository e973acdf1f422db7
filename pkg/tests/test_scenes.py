import numpy as np
import pytest

from fieldguard import render, scenes


@pytest.fixture(scope="module")
def bank():
    return scenes.scene_bank(4, seed=0)


def test_density_at_sphere_center_is_peak(bank):
    scene = bank[0]
    sphere = scene.primitives[0]
    sigma = scenes.analytic_density(scene, np.array([sphere.center]))
    assert sigma[0] == pytest.approx(sphere.density, rel=1e-12)


def test_density_far_outside_is_zero(bank):
    sigma = scenes.analytic_density(bank[0], np.array([[5.0, 5.0, 5.0],
                                                       [0.99, 0.99, 0.99]]))
    assert np.array_equal(sigma, [0.0, 0.0])


def test_density_at_falloff_midpoint_is_half_peak():
    prim = scenes.Primitive("sphere", (0, 0, 0), (0.5,), 8.0, 0.2,
                            (1, 0, 0))
    scene = scenes.AnalyticScene([prim])
    # the surface (signed distance 0) is the midpoint of the falloff shell
    sigma = scenes.analytic_density(scene, np.array([[0.5, 0.0, 0.0]]))
    assert sigma[0] == pytest.approx(4.0, rel=1e-12)


def test_density_continuity_lipschitz(bank):
    scene = bank[0]
    bound = sum(p.density * 1.5 / p.falloff for p in scene.primitives)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.9, 0.9, size=(200, 3))
    eps = 1e-5
    for axis in range(3):
        shift = np.zeros(3)
        shift[axis] = eps
        d = np.abs(scenes.analytic_density(scene, pts + shift)
                   - scenes.analytic_density(scene, pts))
        assert np.all(d <= bound * eps + 1e-12)


def test_color_range_and_blend(bank):
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1, 1, size=(50, 3))
    dirs = rng.normal(size=(50, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    c = scenes.analytic_color(bank[1], pts, dirs)
    assert np.all((c >= 0) & (c <= 1))


def test_oracle_render_empty_scene_black():
    scene = scenes.AnalyticScene([])
    out = scenes.oracle_render(scene, np.array([[0, 0, 3.0]]),
                               np.array([[0, 0, -1.0]]), 1.0, 5.0, 1024)
    assert np.array_equal(out, np.zeros((1, 3)))


def test_oracle_render_missing_ray_black(bank):
    out = scenes.oracle_render(bank[0], np.array([[0, 0, 3.0]]),
                               np.array([[0, 1.0, 0]]), 1.0, 5.0, 1024)
    assert np.allclose(out, 0.0, atol=1e-12)


def test_oracle_render_opaque_sphere_hits_albedo():
    prim = scenes.Primitive("sphere", (0, 0, 0), (0.6,), 50.0, 0.1,
                            (0.8, 0.3, 0.1))
    scene = scenes.AnalyticScene([prim])
    out = scenes.oracle_render(scene, np.array([[0, 0, 3.0]]),
                               np.array([[0, 0, -1.0]]), 1.0, 5.0, 4096)
    out2 = scenes.oracle_render(scene, np.array([[0, 0, 3.0]]),
                                np.array([[0, 0, -1.0]]), 1.0, 5.0, 8192)
    assert np.allclose(out, [[0.8, 0.3, 0.1]], atol=1e-3)
    assert np.max(np.abs(out - out2)) < 1e-3


def test_oracle_self_consistency(bank):
    rig = scenes.CameraRig(n_views=1, width=8, height=8)
    cam = scenes.rig_cameras(rig)[0]
    origins, dirs = render.generate_rays(cam)
    a = scenes.oracle_render(bank[0], origins, dirs, rig.t_near, rig.t_far,
                             4096)
    b = scenes.oracle_render(bank[0], origins, dirs, rig.t_near, rig.t_far,
                             8192)
    assert np.abs(a - b).mean() < 1e-3


def test_rig_poses_orthonormal_and_look_at():
    rig = scenes.CameraRig(n_views=6, seed=3)
    for cam in scenes.rig_cameras(rig):
        r = cam.pose[:3, :3]
        assert np.max(np.abs(r @ r.T - np.eye(3))) < 1e-9
        # -z axis of the camera must point at the look-at target
        to_target = np.asarray(rig.look_at) - cam.pose[:3, 3]
        to_target /= np.linalg.norm(to_target)
        assert np.max(np.abs(-r[:, 2] - to_target)) < 1e-9


def test_generate_dataset_deterministic_and_split(bank):
    rig = scenes.CameraRig(n_views=10, width=8, height=8, seed=1)
    d1 = scenes.generate_dataset(bank[0], rig, quadrature_n=1024)
    d2 = scenes.generate_dataset(bank[0], rig, quadrature_n=1024)
    assert len(d1.train_idx) == 8 and len(d1.test_idx) == 2
    assert not set(d1.train_idx) & set(d1.test_idx)
    for a, b in zip(d1.images, d2.images):
        assert np.array_equal(a, b)
        assert np.all((a >= 0) & (a <= 1))


def test_scene_bank_labels_and_reproducibility(bank):
    assert [s.class_id for s in bank] == [0, 1, 2, 3]
    again = scenes.scene_bank(4, seed=0)
    for a, b in zip(bank, again):
        assert a.to_dict() == b.to_dict()
    with pytest.raises(ValueError):
        scenes.scene_bank(1)


def test_scene_bank_classes_visually_distinct(bank):
    rig = scenes.CameraRig(n_views=2, width=16, height=16, seed=2)
    cams = scenes.rig_cameras(rig)
    renders = []
    for scene in bank:
        origins, dirs = render.generate_rays(cams[0])
        renders.append(scenes.oracle_render(scene, origins, dirs, rig.t_near,
                                            rig.t_far, 1024))
    for i in range(len(renders)):
        for j in range(i + 1, len(renders)):
            assert np.abs(renders[i] - renders[j]).mean() > 0.05


def test_scene_bank_serialization_round_trip(tmp_path, bank):
    path = tmp_path / "bank.json"
    scenes.save_scene_bank(path, bank)
    loaded = scenes.load_scene_bank(path)
    assert [s.to_dict() for s in loaded] == [s.to_dict() for s in bank]


def test_occupancy_boxes_cover_primitives(bank):
    for scene in bank:
        boxes = scene.occupancy_boxes()
        assert len(boxes) == len(scene.primitives)
        for (lo, hi), prim in zip(boxes, scene.primitives):
            assert np.all(lo < hi)
            assert np.all(lo <= np.asarray(prim.center))
