import numpy as np
import pytest

from fieldguard import diffcore as dc
from fieldguard import render, scenes


def make_camera(width=8, height=8, focal=10.0, pose=None, cam_id=0):
    return render.Camera(np.eye(4) if pose is None else pose,
                         focal, width, height, cam_id)


def test_generate_rays_center_pixel_points_down_minus_z():
    cam = make_camera(width=9, height=9)
    _, dirs = render.generate_rays(cam)
    center = dirs[4 * 9 + 4]
    assert np.allclose(center, [0, 0, -1], atol=1e-9)


def test_generate_rays_unit_directions_and_origins():
    cam = make_camera()
    origins, dirs = render.generate_rays(cam)
    assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-9)
    assert np.array_equal(origins, np.zeros_like(origins))


def test_zero_focal_rejected():
    with pytest.raises(ValueError):
        make_camera(focal=0.0)


def test_non_orthonormal_pose_rejected():
    pose = np.eye(4)
    pose[0, 0] = 2.0
    with pytest.raises(ValueError):
        make_camera(pose=pose)


def test_deterministic_sampling_is_bin_midpoints():
    tvals, dts = render.sample_along_rays(0.0, 1.0, 1, 4)
    assert np.allclose(tvals[0], [0.125, 0.375, 0.625, 0.875])
    assert np.allclose(dts.sum(axis=1), 1.0 - tvals[:, 0])


def test_stratified_samples_stay_in_their_bins():
    rng = np.random.default_rng(0)
    tvals, _ = render.sample_along_rays(1.0, 3.0, 16, 8, stratified=True,
                                        rng=rng)
    edges = np.linspace(1.0, 3.0, 9)
    assert np.all(tvals >= edges[:-1]) and np.all(tvals <= edges[1:])


def test_spacings_telescope_exactly():
    rng = np.random.default_rng(1)
    tvals, dts = render.sample_along_rays(0.5, 2.5, 4, 16, stratified=True,
                                          rng=rng)
    assert np.allclose(dts.sum(axis=1), 2.5 - tvals[:, 0], atol=1e-15)


def _render_once(color, sigma, dts):
    tape = dc.Tape()
    return render.volume_render(tape.constant(color), tape.constant(sigma),
                                np.asarray(dts)).value


def test_volume_render_empty_is_black():
    out = _render_once(np.full((1, 4, 3), 0.7), np.zeros((1, 4)),
                       np.full((1, 4), 0.25))
    assert np.array_equal(out, np.zeros((1, 3)))


def test_volume_render_opaque_single_sample():
    out = _render_once(np.array([[[1.0, 0.5, 0.0]]]), np.array([[100.0]]),
                       np.array([[0.5]]))
    assert np.allclose(out, [[1.0, 0.5, 0.0]], atol=1e-20)


def test_volume_render_two_sample_hand_value():
    # sigma=(1,2), dt=(0.5,0.5): w1 = 1-e^-0.5, w2 = e^-0.5 (1-e^-1)
    color = np.array([[[1.0, 0, 0], [0, 1.0, 0]]])
    out = _render_once(color, np.array([[1.0, 2.0]]), np.full((1, 2), 0.5))
    w1 = 1 - np.exp(-0.5)
    w2 = np.exp(-0.5) * (1 - np.exp(-1.0))
    assert np.allclose(out, [[w1, w2, 0.0]], atol=1e-15)


def test_volume_render_rejects_negative_density():
    with pytest.raises(ValueError):
        _render_once(np.zeros((1, 2, 3)), np.array([[1.0, -0.1]]),
                     np.full((1, 2), 0.5))


def test_transmittance_monotone_and_energy_bound():
    rng = np.random.default_rng(2)
    sigma = rng.uniform(0, 3, size=(5, 16))
    dts = np.full((5, 16), 0.1)
    depth = sigma * dts
    trans = np.exp(-np.concatenate(
        [np.zeros((5, 1)), np.cumsum(depth, axis=1)[:, :-1]], axis=1))
    assert np.all(np.diff(trans, axis=1) <= 0)
    assert np.allclose(trans[:, 0], 1.0)
    color = rng.uniform(size=(5, 16, 3))
    out = _render_once(color, sigma, dts)
    t_end = np.exp(-depth.sum(axis=1))
    assert np.all(out >= 0) and np.all(out <= (1 - t_end)[:, None] + 1e-12)


def test_render_gradient_through_density():
    rng = np.random.default_rng(3)
    sigma = rng.uniform(0.5, 2.0, size=(2, 4))
    color = rng.uniform(size=(2, 4, 3))
    dts = np.full((2, 4), 0.3)

    def build(tape, tensors):
        out = render.volume_render(tape.constant(color), tensors[0], dts)
        return dc.tsum(out)

    assert dc.finite_difference_check(build, [sigma]) <= 1e-5


def test_refinement_converges_to_oracle():
    scene = scenes.scene_bank(4, seed=0)[0]
    rig = scenes.CameraRig(n_views=1, width=16, height=16, seed=5)
    cam = scenes.rig_cameras(rig)[0]
    origins, dirs = render.generate_rays(cam)
    ref = scenes.oracle_render(scene, origins, dirs, rig.t_near, rig.t_far,
                               4096)
    errors = []
    for n in (16, 64, 256):
        cfg = render.RenderConfig(n_samples=n, t_near=rig.t_near,
                                  t_far=rig.t_far)
        img = render.render_image(scenes.scene_sampler(scene), cam, cfg)
        errors.append(np.abs(img.reshape(-1, 3) - ref).mean())
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] <= 0.01


def test_extract_voxel_grid_constant_field():
    def const_sampler(tape, pts, dirs):
        return (tape.constant(np.full((pts.shape[0], 3), 0.25)),
                tape.constant(np.full(pts.shape[0], 3.0)))

    grid = render.extract_voxel_grid(const_sampler, (-1, -1, -1), (1, 1, 1),
                                     (4, 4, 4))
    assert np.allclose(grid.sigma, 3.0)
    assert np.allclose(grid.color, 0.25)


def test_voxel_cell_centers_match_analytic_density():
    scene = scenes.scene_bank(4, seed=0)[0]

    grid = render.extract_voxel_grid(scenes.scene_sampler(scene),
                                     scene.bounds_min, scene.bounds_max,
                                     (16, 16, 16))
    centers = render.voxel_cell_centers(scene.bounds_min, scene.bounds_max,
                                        (16, 16, 16))
    assert np.max(np.abs(grid.sigma - scenes.analytic_density(
        scene, centers))) <= 1e-12


def test_degenerate_bounds_rejected():
    def sampler(tape, pts, dirs):
        return tape.constant(np.zeros((pts.shape[0], 3))), tape.constant(
            np.zeros(pts.shape[0]))

    with pytest.raises(ValueError):
        render.extract_voxel_grid(sampler, (1, -1, -1), (1, 1, 1), (4, 4, 4))


def test_mean_density_constant_field():
    assert render.compute_mean_density(
        lambda pts: np.full(pts.shape[0], 2.5), (-1, -1, -1), (1, 1, 1),
        8) == pytest.approx(2.5)


def test_mean_density_zero_field_is_zero():
    assert render.compute_mean_density(
        lambda pts: np.zeros(pts.shape[0]), (-1, -1, -1), (1, 1, 1), 4) == 0.0


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    img = rng.uniform(size=(6, 5, 3))
    path = tmp_path / "img.ppm"
    render.write_ppm(path, img)
    back = render.read_ppm(path)
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-9


def test_voxel_grid_file_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    grid = render.VoxelFeatureGrid(
        np.array([-1.0, -1, -1]), np.array([1.0, 1, 1]), (2, 3, 4),
        rng.uniform(size=(24, 3)), rng.uniform(size=24))
    path = tmp_path / "grid.bin"
    render.write_voxel_grid(path, grid)
    back = render.read_voxel_grid(path)
    assert back.resolution == grid.resolution
    assert np.array_equal(back.color, grid.color)
    assert np.array_equal(back.sigma, grid.sigma)
    assert np.array_equal(back.bounds_min, grid.bounds_min)
