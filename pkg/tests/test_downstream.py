import numpy as np
import pytest

from fieldguard import diffcore as dc
from fieldguard import downstream, render, scenes


@pytest.fixture(scope="module")
def bank():
    return scenes.scene_bank(4, seed=0)


@pytest.fixture(scope="module")
def datasets(bank):
    rig = scenes.CameraRig(n_views=6, width=16, height=16, seed=1)
    return [scenes.generate_dataset(s, rig, quadrature_n=1024) for s in bank]


@pytest.fixture(scope="module")
def classifier(datasets):
    return downstream.train_classifier(datasets, steps=400, seed=0)


def test_image_to_patches_layout():
    img = np.arange(16 * 16 * 3, dtype=np.float64).reshape(16, 16, 3)
    patches = downstream.image_to_patches(img, 8)
    assert patches.shape == (4, 192)
    # first patch is the top-left 8x8 block, row-major with rgb interleaved
    assert np.array_equal(patches[0], img[:8, :8, :].reshape(-1))
    assert np.array_equal(patches[1], img[:8, 8:, :].reshape(-1))
    with pytest.raises(ValueError):
        downstream.image_to_patches(img, 5)


def test_uniform_logits_loss_is_log_num_classes():
    tape = dc.Tape()
    logits = tape.constant(np.zeros((1, 4)))
    loss = downstream.classifier_loss(tape, logits, 2, 4)
    assert loss.value == pytest.approx(np.log(4.0), rel=1e-12)


def test_confident_correct_logits_loss_near_zero():
    tape = dc.Tape()
    logits = tape.constant(np.array([[30.0, 0.0, 0.0, 0.0]]))
    loss = downstream.classifier_loss(tape, logits, 0, 4)
    assert loss.value < 1e-12
    with pytest.raises(ValueError):
        downstream.classifier_loss(tape, logits, 4, 4)


def test_classifier_loss_gradient_wrt_pixels():
    model = downstream.PatchClassifier(seed=3)
    rng = np.random.default_rng(0)
    patches = rng.uniform(0.2, 0.8, size=(4, 192))

    def build(tape, tensors):
        logits = model.logits_from_patches(tape, tensors[0])
        return downstream.classifier_loss(tape, logits, 1, 4)

    max_rel = dc.finite_difference_check(build, [patches])
    assert max_rel < 1e-5


def test_mean_pool_accepts_any_patch_subset():
    model = downstream.PatchClassifier(seed=4)
    rng = np.random.default_rng(5)
    patches = rng.uniform(size=(4, 192))
    tape = dc.Tape()
    sub = model.logits_from_patches(tape, tape.constant(patches[:2]))
    assert sub.shape == (1, 4)
    # duplicating the subset leaves the mean-pooled logits unchanged
    dup = model.logits_from_patches(
        tape, tape.constant(np.concatenate([patches[:2], patches[:2]])))
    assert np.allclose(sub.value, dup.value, atol=1e-12)


def test_classifier_trains_to_high_accuracy(classifier, datasets):
    images, labels = [], []
    for d in datasets:
        for idx in d.test_idx:
            images.append(d.images[idx])
            labels.append(d.label)
    acc = downstream.classifier_accuracy(classifier, images, labels)
    assert acc >= 0.9


def test_classifier_training_deterministic(datasets):
    a = downstream.train_classifier(datasets[:2], steps=30, seed=1)
    b = downstream.train_classifier(datasets[:2], steps=30, seed=1)
    assert a.checksum() == b.checksum()


def test_classifier_rejects_single_class(datasets):
    with pytest.raises(ValueError):
        downstream.train_classifier(datasets[:1], steps=10)


def test_classifier_save_load_round_trip(tmp_path, classifier):
    path = tmp_path / "clf.npz"
    classifier.save(path)
    loaded = downstream.PatchClassifier.load(path)
    assert loaded.checksum() == classifier.checksum()
    assert loaded.cfg == classifier.cfg


def test_voxel_loss_zero_logits_is_log_two():
    tape = dc.Tape()
    logits = tape.constant(np.zeros(64))
    target = np.zeros(64)
    target[:32] = 1.0
    loss = downstream.voxel_loss(tape, logits, target)
    assert loss.value == pytest.approx(np.log(2.0), rel=1e-12)
    with pytest.raises(ValueError):
        downstream.voxel_loss(tape, logits, np.zeros(8))


def test_voxel_loss_gradient_wrt_features():
    model = downstream.VoxelOccupancyModel(seed=1)
    res = (3, 3, 3)
    rng = np.random.default_rng(2)
    color = rng.uniform(size=(27, 3))
    sigma = rng.uniform(0.1, 3.0, size=27)
    target = (rng.uniform(size=27) > 0.5).astype(np.float64)

    def build(tape, tensors):
        logits = model.logits_from_features(
            tape, tensors[0], dc.reshape(tensors[1], (27,)), res)
        return downstream.voxel_loss(tape, logits, target)

    max_rel = dc.finite_difference_check(
        build, [color, sigma.reshape(27, 1)])
    assert max_rel < 1e-4


def test_neighbor_indices_clamped_and_complete():
    nbr = downstream.neighbor_indices((3, 3, 3))
    assert nbr.shape == (27, 27)
    # the center cell of a 3x3x3 grid sees every cell exactly once
    center = 13
    assert sorted(nbr[center]) == list(range(27))
    # a corner cell repeats clamped neighbors and stays in range
    assert np.all((nbr[0] >= 0) & (nbr[0] < 27))
    assert len(set(nbr[0])) == 8


def test_occupancy_iou_conventions():
    a = np.zeros(10, dtype=bool)
    b = np.zeros(10, dtype=bool)
    assert downstream.occupancy_iou(a, b) == 1.0
    a[0] = True
    assert downstream.occupancy_iou(a, b) == 0.0
    assert downstream.occupancy_iou(a, a) == 1.0
    b[:2] = True
    assert downstream.occupancy_iou(a, b) == pytest.approx(0.5)


def test_occupancy_target_marks_primitive_cells(bank):
    scene = bank[0]
    res = (8, 8, 8)
    target = downstream.occupancy_target(scene, res)
    centers = render.voxel_cell_centers(scene.bounds_min, scene.bounds_max,
                                        res)
    near = np.linalg.norm(
        centers - np.asarray(scene.primitives[0].center), axis=1)
    assert np.all(target[near < 0.3] == 1.0)
    assert np.all(target[near > 1.2] == 0.0)
    assert 0 < target.sum() < target.size


def test_voxel_model_fits_analytic_scene(bank):
    # the box scene: its occupancy boxes coincide with the density support,
    # so a local model can recover them (a sphere's bounding-box corners
    # carry no density and cap the achievable IoU well below the gate)
    scene = bank[2]
    res = (12, 12, 12)
    model = downstream.train_voxel_model(scene, scenes.scene_sampler(scene),
                                         resolution=res, steps=300, seed=0)
    grid = render.extract_voxel_grid(scenes.scene_sampler(scene),
                                     scene.bounds_min, scene.bounds_max, res)
    pred = model.predict_grid(grid)
    target = downstream.occupancy_target(scene, res).astype(bool)
    assert downstream.occupancy_iou(pred, target) >= 0.8


def test_voxel_model_save_load_round_trip(tmp_path):
    model = downstream.VoxelOccupancyModel(seed=7)
    path = tmp_path / "voxel.npz"
    model.save(path)
    loaded = downstream.VoxelOccupancyModel.load(path)
    assert loaded.checksum() == model.checksum()
