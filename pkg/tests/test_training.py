import math

import numpy as np
import pytest

from neref.field import NeRefNetwork, load_checkpoint
from neref.geometry import RefractionConstants
from neref.simulator import (
    Pattern,
    Scene,
    WarpField,
    WaveComponent,
    WaveSurface,
    checkerboard,
    flat_refraction_offset,
    grid_rig,
    render_view,
)
from neref import training as tr
from neref.training import (
    TrainConfig,
    _pass,
    batch_objective,
    build_targets,
    correspondence_loss,
    depth_smoothness_loss,
    load_training_data,
    make_batch,
    patch_anchors,
    smooth_l1,
    train,
)

TINY = dict(batch_rays=64, coarse_samples=8, fine_samples=8, depth=2, width=8, head_width=8,
            frequencies=2, skip=-1, lr=1e-3, epochs=1, sigma_bias=2.0)


def small_scene(components=(), size=16, constants=RefractionConstants()):
    cams, train_flags = grid_rig(width=size, height_px=size)
    return Scene(cams, WaveSurface(0.2, components), Pattern(checkerboard(16, 256, 0.25)),
                 constants=constants, train=train_flags)


def views_of(scene):
    return {i: render_view(scene, i) for i in range(len(scene.cameras))}


# --------------------------------------------------------------------------- #
# targets                                                                      #
# --------------------------------------------------------------------------- #


def test_zero_warp_targets_are_dry_hits():
    scene = small_scene()
    cam = scene.cameras[2]
    dry = render_view(scene, 2, with_water=False)
    q, ok = build_targets(cam, WarpField(np.zeros((16, 16, 2)), np.ones((16, 16), bool)))
    assert ok.all()
    assert np.abs(q - dry.hit).max() < 1e-12


def test_flat_water_targets_match_closed_form():
    scene = small_scene()
    for k in (0, 5, 9):
        cam = scene.cameras[k]
        v = render_view(scene, k)
        dry = render_view(scene, k, with_water=False)
        q, ok = build_targets(cam, WarpField(v.warp, v.mask))
        oracle = flat_refraction_offset(cam.center, dry.hit, 0.2, scene.constants)
        assert ok.all()
        assert np.abs(q - oracle).max() < 1e-9


def test_targets_reproduce_simulated_hits():
    scene = small_scene((WaveComponent("gaussian", 0.02, 0.08),), size=32)
    for k in (0, 3, 9):
        v = render_view(scene, k)
        q, ok = build_targets(scene.cameras[k], WarpField(v.warp, v.mask))
        np.testing.assert_array_equal(ok, v.mask)
        assert np.abs(q[ok] - v.hit[ok]).max() < 1e-3


# --------------------------------------------------------------------------- #
# losses                                                                       #
# --------------------------------------------------------------------------- #


def test_correspondence_loss_examples():
    q = np.array([0.1, 0.2, 0.0])
    assert correspondence_loss(q, q) == 0.0
    far = q + [0.3, 0.4, 0.0]
    assert correspondence_loss(far, q, 0.01) == pytest.approx(0.5 - 0.005, abs=1e-15)
    near = q + [0.005, 0.0, 0.0]
    assert correspondence_loss(near, q, 0.01) == pytest.approx(0.005**2 / 0.02, abs=1e-15)


def test_smooth_l1_is_c1_at_the_knee():
    d = 0.01
    eps = 1e-9
    lo, hi = smooth_l1(d - eps, d), smooth_l1(d + eps, d)
    assert float(hi - lo) / (2 * eps) == pytest.approx(1.0, abs=1e-6)
    assert float(smooth_l1(d, d)) == pytest.approx(d / 2)


def test_depth_smoothness_examples():
    assert depth_smoothness_loss(np.full((5, 2, 2), 0.42)) == 0.0
    a, b = 0.003, -0.002
    x, y = np.meshgrid([0.0, 1.0], [0.0, 1.0])
    plane = (a * x + b * y + 0.4)[None]
    expected = float(smooth_l1(abs(a) + abs(b), 0.01))
    assert depth_smoothness_loss(plane) == pytest.approx(expected, abs=1e-15)
    steep = (0.2 * x + 0.4)[None]
    assert depth_smoothness_loss(steep, pixel_pitch=2.0) == pytest.approx(0.1 - 0.005, abs=1e-15)
    assert depth_smoothness_loss(steep, pixel_pitch=1.0) == pytest.approx(0.2 - 0.005, abs=1e-15)


def test_patch_anchors_skip_incomplete_tiles():
    mask = np.ones((5, 4), bool)
    mask[0, 3] = False
    a = patch_anchors(mask)
    assert a.tolist() == [[0, 0], [2, 0], [2, 2]]
    assert patch_anchors(mask, (1, 1)).tolist() == [[1, 1], [3, 1]]


# --------------------------------------------------------------------------- #
# objective                                                                    #
# --------------------------------------------------------------------------- #


def mini_problem(seed, n_patches=1, components=()):
    rng = np.random.default_rng(seed)
    scene = small_scene(components, size=8)
    cfg = TrainConfig(batch_rays=4 * n_patches, coarse_samples=4, fine_samples=4, depth=2, width=8,
                      head_layers=3, head_width=8, skip=-1, frequencies=2, seed=seed)
    spec = cfg.network_spec(scene)
    net = NeRefNetwork.initialize(spec, seed, sigma_bias=1.0)
    views = {0: render_view(scene, 0)}
    data = load_training_data(scene, views, cfg, camera_ids=[0])
    anchors = patch_anchors(data[0].mask)[rng.choice(16, n_patches, replace=False)]
    batch = make_batch(data, np.zeros(n_patches, int), anchors, scene.slab())
    R = len(batch)
    lam_c = np.sort(rng.uniform(batch.near[:, None], batch.far[:, None], (R, 4)), axis=1)
    lam_f = np.sort(rng.uniform(batch.near[:, None], batch.far[:, None], (R, 4)), axis=1)
    return scene, cfg, spec, net, batch, lam_c, lam_f


def objective_value(params, problem):
    scene, cfg, spec, _, batch, lam_c, lam_f = problem
    return batch_objective(spec, params, batch, lam_c, None, scene, cfg, lam_fine=lam_f, with_grad=False).objective


def test_end_to_end_gradient_on_miniature_network():
    """2x8 network, 4 rays, 8 samples per ray (4 coarse + 4 fine)."""
    problem = mini_problem(0)
    scene, cfg, spec, net, batch, lam_c, lam_f = problem
    res = batch_objective(spec, net.params, batch, lam_c, None, scene, cfg, lam_fine=lam_f)
    assert res.count == 4
    h = 1e-6
    fd = np.empty_like(net.params)
    for i in range(len(fd)):
        e = np.zeros_like(net.params)
        e[i] = h
        fd[i] = (objective_value(net.params + e, problem) - objective_value(net.params - e, problem)) / (2 * h)
    assert np.linalg.norm(res.grad - fd) / np.linalg.norm(fd) < 1e-3


def test_objective_is_invariant_to_patch_order():
    scene, cfg, spec, net, batch, lam_c, lam_f = mini_problem(1, n_patches=6)
    perm = np.random.default_rng(0).permutation(6)
    rows = (4 * perm[:, None] + np.arange(4)).ravel()
    a = batch_objective(spec, net.params, batch, lam_c, None, scene, cfg, lam_fine=lam_f)
    b = batch_objective(spec, net.params, batch.take_patches(perm), lam_c[rows], None, scene, cfg,
                        lam_fine=lam_f[rows])
    assert abs(a.objective - b.objective) < 1e-10
    assert np.abs(a.grad - b.grad).max() < 1e-10


def test_objective_is_linear_in_smoothness_weight():
    scene, cfg, spec, net, batch, lam_c, lam_f = mini_problem(2, n_patches=3)
    vals = []
    for lam in (0.0, 0.15, 0.3):
        c = TrainConfig(**{**cfg.to_dict(), "lambda_ds": lam})
        vals.append(batch_objective(spec, net.params, batch, lam_c, None, scene, c, lam_fine=lam_f).objective)
    assert abs((vals[2] - vals[1]) - (vals[1] - vals[0])) < 1e-12


def test_dropped_rays_shrink_both_terms_together():
    # water -> air index ratio: rays meeting the 45 degree tilted normal obliquely undergo TIR
    scene, cfg, spec, net, batch, lam_c, _ = mini_problem(3, n_patches=8)
    net = NeRefNetwork.initialize(spec, 3, sigma_bias=1.0, normal_bias=(1.0, 0.0, 1.0), head_scale=0.01)
    from neref import autodiff as ad

    tape = ad.Tape()
    terms = _pass(spec, tape.param(net.params), batch, lam_c, 1.4, scene.plane, cfg)
    assert 0 < terms.count < len(batch)
    D = terms.depth.reshape(-1, 2, 2)
    gx = np.abs(D[:, :, 1] - D[:, :, 0])[:, :, None] + np.abs(D[:, 1, :] - D[:, 0, :])[:, None, :]
    ds_ray = smooth_l1(gx, cfg.huber_delta).reshape(-1)
    assert float(terms.ds_sum.value) == pytest.approx(ds_ray[terms.valid].sum(), rel=1e-12)
    assert len(terms.valid) == terms.count


def test_default_smoothness_weight():
    cfg = TrainConfig()
    assert cfg.lambda_ds == 0.15
    assert (cfg.batch_rays, cfg.coarse_samples, cfg.fine_samples) == (2048, 96, 192)
    assert cfg.to_dict()["lambda_ds"] == 0.15


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_rays=6)
    with pytest.raises(ValueError):
        TrainConfig(lambda_ds=-1)
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"batch_ray": 4})


# --------------------------------------------------------------------------- #
# loop                                                                         #
# --------------------------------------------------------------------------- #


@pytest.fixture(scope="module")
def flat_small():
    scene = small_scene()
    return scene, views_of(scene)


def test_zero_epochs_is_a_no_op(flat_small, tmp_path):
    scene, views = flat_small
    cfg = TrainConfig(**{**TINY, "epochs": 0})
    net, hist = train(scene, views, cfg, out_dir=tmp_path)
    assert hist == []
    init = NeRefNetwork.initialize(cfg.network_spec(scene), cfg.seed, cfg.sigma_bias)
    np.testing.assert_array_equal(net.params, init.params)
    np.testing.assert_array_equal(load_checkpoint(tmp_path / "model.nref").params,
                                  init.params.astype(np.float32))


def test_history_is_bit_reproducible(flat_small, tmp_path):
    scene, views = flat_small
    cfg = TrainConfig(**TINY)
    a, ha = train(scene, views, cfg, out_dir=tmp_path / "a")
    b, hb = train(scene, views, cfg, out_dir=tmp_path / "b")
    assert ha == hb and len(ha) > 0
    assert (tmp_path / "a" / "model.nref").read_bytes() == (tmp_path / "b" / "model.nref").read_bytes()
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
    c, hc = train(scene, views, TrainConfig(**{**TINY, "seed": 1}))
    assert hc != ha


def test_resume_matches_straight_run(flat_small, tmp_path):
    scene, views = flat_small
    cfg2 = TrainConfig(**{**TINY, "epochs": 2})
    straight, hs = train(scene, views, cfg2, out_dir=tmp_path / "s")
    train(scene, views, TrainConfig(**{**TINY, "epochs": 1}), out_dir=tmp_path / "r")
    resumed, hr = train(scene, views, cfg2, out_dir=tmp_path / "r", resume=True)
    assert hs == hr
    np.testing.assert_array_equal(straight.params, resumed.params)
    assert sorted(p.name for p in (tmp_path / "r" / "checkpoints").iterdir()) == [
        "epoch_000.nref", "epoch_001.nref", "epoch_002.nref"]


def test_training_reduces_the_loss(flat_small):
    scene, views = flat_small
    _, hist = train(scene, views, TrainConfig(**{**TINY, "epochs": 4}))
    first = np.mean([h[4] for h in hist[:3]])
    last = np.mean([h[4] for h in hist[-3:]])
    assert last < first


def test_parallel_workers_agree_with_single_worker(flat_small):
    scene, views = flat_small
    _, h1 = train(scene, views, TrainConfig(**TINY))
    _, h2 = train(scene, views, TrainConfig(**{**TINY, "workers": 2}))
    np.testing.assert_allclose(np.array(h1)[:, 1:], np.array(h2)[:, 1:], rtol=0.2)


def test_non_finite_loss_aborts(flat_small, tmp_path, monkeypatch):
    scene, views = flat_small

    def broken(*a, **k):
        return tr.StepResult(math.nan, math.nan, math.nan, np.zeros(1), 0)

    monkeypatch.setattr(tr, "train_step", broken)
    with pytest.raises(tr.DivergedLoss) as err:
        train(scene, views, TrainConfig(**TINY), out_dir=tmp_path)
    assert err.value.last_checkpoint.name == "epoch_000.nref"
