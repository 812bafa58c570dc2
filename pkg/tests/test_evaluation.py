import csv
import math

import numpy as np
import pytest

from neref.evaluation import (
    InsufficientCameras,
    ShapeMismatch,
    camera_count_sweep,
    depth_normal_errors,
    image_metrics,
    linear_fit_r2,
    psnr,
    render_from_field,
    render_surface,
    ssim,
    write_rows,
)
from neref.field import NeRefNetwork, SamplingSchedule
from neref.simulator import BORDER_COLOR, Pattern, Scene, WaveComponent, WaveSurface, checkerboard, grid_rig, render_view
from neref.training import TrainConfig


def scene_with(components=(), size=32):
    cams, train = grid_rig(width=size, height_px=size)
    return Scene(cams, WaveSurface(0.2, components), Pattern(checkerboard(16, 256, 0.25)), train=train)


# --------------------------------------------------------------------------- #
# depth / normal errors                                                        #
# --------------------------------------------------------------------------- #


def test_identity_has_zero_error():
    rng = np.random.default_rng(0)
    D = rng.uniform(0.3, 0.5, (6, 7))
    N = rng.normal(size=(6, 7, 3))
    r = depth_normal_errors(D, N, D, N)
    assert r.depth_rmse == 0 and r.depth_relative_error == 0 and r.normal_l2_mean == 0
    assert r.normal_angle_mean < 1e-6


def test_antipodal_normals():
    N = np.tile([0.0, 0.0, 1.0], (2, 2, 1))
    r = depth_normal_errors(np.ones((2, 2)), -N, np.ones((2, 2)), N)
    assert r.normal_angle_mean == pytest.approx(180.0)
    assert r.normal_l2_mean == pytest.approx(2.0)


def test_sixty_degree_chord():
    a = np.array([[[1.0, 0.0, 0.0]]])
    b = np.array([[[0.5, math.sqrt(3) / 2, 0.0]]])
    r = depth_normal_errors(np.ones((1, 1)), a, np.ones((1, 1)), b)
    assert r.normal_l2_mean == pytest.approx(1.0, abs=1e-15)
    assert r.normal_angle_mean == pytest.approx(60.0, abs=1e-12)


def test_positive_scaling_of_normals_is_ignored():
    rng = np.random.default_rng(1)
    N, G = rng.normal(size=(5, 5, 3)), rng.normal(size=(5, 5, 3))
    D = np.ones((5, 5))
    a = depth_normal_errors(D, N, D, G)
    b = depth_normal_errors(D, 7.3 * N, D, G)
    assert a.normal_angle_mean == pytest.approx(b.normal_angle_mean, abs=1e-12)


def test_masked_statistics_and_shapes():
    D = np.array([[1.0, 2.0]])
    G = np.array([[1.1, 100.0]])
    N = np.tile([0.0, 0.0, 1.0], (1, 2, 1))
    r = depth_normal_errors(D, N, G, N, np.array([[True, False]]))
    assert r.depth_rmse == pytest.approx(0.1)
    assert r.depth_relative_error == pytest.approx(0.1 / 1.1)
    with pytest.raises(ShapeMismatch):
        depth_normal_errors(D, N, G[:, :1], N)


# --------------------------------------------------------------------------- #
# image metrics                                                                #
# --------------------------------------------------------------------------- #


def test_psnr_closed_form():
    a, b = np.zeros((16, 16, 3)), np.full((16, 16, 3), 0.5)
    assert psnr(a, b) == pytest.approx(10 * math.log10(4), abs=1e-12)
    assert psnr(a, b) == pytest.approx(6.0206, abs=1e-4)


def test_identity_images_on_random_inputs():
    rng = np.random.default_rng(2)
    for _ in range(100):
        img = rng.uniform(size=(24, 24, 3))
        p, s = image_metrics(img, img)
        assert p == math.inf
        assert s == pytest.approx(1.0, abs=1e-12)


def test_ssim_penalises_brightness_shift_and_is_bounded():
    rng = np.random.default_rng(3)
    img = rng.uniform(0, 0.5, (32, 32, 3))
    s = ssim(img + 0.5, img)
    assert s < 1
    for _ in range(10):
        a, b = rng.uniform(size=(32, 32)), rng.uniform(size=(32, 32))
        assert -1 <= ssim(a, b) <= 1
    with pytest.raises(ShapeMismatch):
        image_metrics(img, img[:-1])


def test_ssim_matches_reference_formula_on_constant_images():
    # constant images: variances vanish, SSIM reduces to the luminance term
    a, b = np.full((20, 20), 0.3), np.full((20, 20), 0.6)
    c1 = 0.01**2
    expected = (2 * 0.3 * 0.6 + c1) / (0.3**2 + 0.6**2 + c1)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-12)


# --------------------------------------------------------------------------- #
# rendering                                                                    #
# --------------------------------------------------------------------------- #


@pytest.mark.parametrize("components", [(), (WaveComponent("gaussian", 0.02, 0.08),)])
def test_renderer_agrees_with_simulator_given_true_surface(components):
    scene = scene_with(components, size=48)
    for k in (0, 9):
        v = render_view(scene, k)
        fr = render_surface(scene.cameras[k], v.depth, v.normal, scene.pattern, scene.plane, scene.constants)
        assert np.abs(fr.image - v.image).mean() < 1 / 255


def test_zero_density_field_renders_border():
    scene = scene_with(size=8)
    spec = TrainConfig(depth=2, width=8, head_width=8, frequencies=2, skip=-1).network_spec(scene)
    net = NeRefNetwork.initialize(spec, 0, sigma_bias=-1000.0)
    fr = render_from_field(net, scene.cameras[0], scene.pattern, scene.plane, scene.constants,
                           SamplingSchedule(8, 8, 0.0, 1.0), scene.slab())
    assert np.all(fr.depth == 0) and np.all(fr.normal == 0)
    assert not fr.mask.any()
    np.testing.assert_array_equal(fr.image, np.broadcast_to(BORDER_COLOR, fr.image.shape))


def test_field_render_is_deterministic():
    scene = scene_with(size=8)
    spec = TrainConfig(depth=2, width=8, head_width=8, frequencies=2, skip=-1).network_spec(scene)
    net = NeRefNetwork.initialize(spec, 0, sigma_bias=2.0)
    args = (scene.pattern, scene.plane, scene.constants, SamplingSchedule(8, 8, 0.0, 1.0), scene.slab())
    a = render_from_field(net, scene.cameras[9], *args)
    b = render_from_field(net, scene.cameras[9], *args)
    np.testing.assert_array_equal(a.image, b.image)


# --------------------------------------------------------------------------- #
# sweeps                                                                       #
# --------------------------------------------------------------------------- #


def test_linear_fit_r2():
    x = np.arange(5.0)
    assert linear_fit_r2(x, 2 * x + 1) == pytest.approx(1.0)
    assert linear_fit_r2(x, np.exp(3 * x)) < 0.9


def test_camera_sweep_rejects_too_few_cameras():
    scene = scene_with(size=8)
    with pytest.raises(InsufficientCameras):
        camera_count_sweep(scene, {}, TrainConfig(), counts=(12,))


def test_sweep_csv_writes_inf_sentinel(tmp_path):
    rows = [{"param": "cameras", "value": 9, "seed": 0, "psnr": math.inf, "ssim": 1.0}]
    write_rows(rows, tmp_path / "t.csv")
    got = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert got[0]["psnr"] == "inf" and got[0]["value"] == "9"
