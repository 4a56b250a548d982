import numpy as np
import pytest

from posegen import autodiff as ad
from posegen import losses
from posegen.data import APPEARANCE_DIM
from posegen.geometry import Quaternion, RigidTransform, random_unit_quaternion
from posegen.model import (ModelConfig, PoseNet, PosePrediction, fuse, generate, init_weights,
                           make_grid, nonlocal_block, prepare_inputs, select_final,
                           stack_inputs)
from gradcheck import numeric_grad, relative_error

SMALL = ModelConfig(d_emb=16, n_points=12, grid_size=32, head_widths=(32, 16), global_width=32,
                    fold_width=16, se_ratio=4)


def _randomize(weights, rng, scale=0.3):
    """Replace every weight (including zero-initialised ones) with random values."""
    for t in weights.values():
        t.value = rng.normal(scale=scale, size=t.shape).astype(t.dtype)


def _inputs(cfg, rng, B=1):
    items = []
    for _ in range(B):
        obs = rng.normal(scale=0.03, size=(cfg.n_points, 3)) + [0.0, 0.0, 1.0]
        model = rng.normal(scale=0.03, size=(cfg.n_points, 3))
        app = rng.uniform(-1, 1, (cfg.n_points, APPEARANCE_DIM))
        items.append(prepare_inputs(app, obs, model, cfg, None, np.float64))
    return stack_inputs(items)


def _net(cfg=SMALL, seed=0, randomize=True):
    net = PoseNet(cfg, np.float64)
    if randomize:
        _randomize(net.weights, np.random.default_rng(seed))
    return net


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError, match="se_ratio"):
        ModelConfig(d_emb=10, se_ratio=3)
    with pytest.raises(ValueError):
        ModelConfig(n_points=0)
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_dict({"d_emb": 8, "colour": 1})
    cfg = ModelConfig(d_emb=32, head_widths=[64, 32])
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_shapes():
    net = _net(randomize=False)
    batch = _inputs(SMALL, np.random.default_rng(0), B=2)
    feat, head, gen = net.forward(batch)
    N, d = SMALL.n_points, SMALL.d_emb
    assert feat.per_point.shape == (2, N, 3 * d)
    assert feat.global_vec.shape == (2, SMALL.global_width)
    assert feat.enriched.shape == (2, N, SMALL.fused_width)
    assert head.quat.shape == (2, N, 4) and head.trans.shape == (2, N, 3)
    assert head.conf.shape == (2, N)
    assert gen.cano.shape == gen.posed.shape == (2, SMALL.grid_size, 3)
    assert np.all(np.isfinite(gen.cano.value)) and np.all(np.isfinite(gen.posed.value))


def test_fuse_rejects_row_mismatch():
    w = init_weights(SMALL, np.float64)
    rng = np.random.default_rng(1)
    with pytest.raises(ValueError, match="disagree"):
        fuse(rng.normal(size=(5, APPEARANCE_DIM)), rng.normal(size=(5, 3)),
             rng.normal(size=(4, 3)), SMALL, w)


def test_permutation_equivariance():
    net = _net(seed=2)
    rng = np.random.default_rng(2)
    batch = _inputs(SMALL, rng)
    perm = rng.permutation(SMALL.n_points)
    pb = type(batch)(batch.appearance[:, perm], batch.depth_in[:, perm], batch.model_in[:, perm],
                     batch.depth_m[:, perm], batch.centroid)
    f1, h1, g1 = net.forward(batch)
    f2, h2, g2 = net.forward(pb)
    np.testing.assert_allclose(f2.per_point.value[0], f1.per_point.value[0][perm], atol=1e-5)
    np.testing.assert_allclose(f2.global_vec.value, f1.global_vec.value, atol=1e-5)
    np.testing.assert_allclose(h2.quat.value[0], h1.quat.value[0][perm], atol=1e-5)
    np.testing.assert_allclose(h2.conf.value[0], h1.conf.value[0][perm], atol=1e-5)
    np.testing.assert_allclose(g2.cano.value, g1.cano.value, atol=1e-5)
    a, b = select_final(h1.prediction(0)), select_final(h2.prediction(0))
    np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-5)


def test_single_point_global_equals_its_feature():
    cfg = ModelConfig(d_emb=8, n_points=1, grid_size=8, head_widths=(8,), global_width=8,
                      fold_width=8, se_ratio=2)
    net = _net(cfg, seed=3)
    feat, _, _ = net.forward(_inputs(cfg, np.random.default_rng(3)))
    np.testing.assert_array_equal(feat.global_vec.value[0], feat.pooled_input.value[0, 0])


@pytest.mark.parametrize("pointfusion", [True, False])
def test_duplicate_point_shifts_mean_exactly(pointfusion):
    # per-point features only stay independent of the other points when the
    # attention residual is zero (its initial state) or point fusion is off
    cfg = ModelConfig(**{**SMALL.to_dict(), "use_pointfusion": pointfusion})
    net = PoseNet(cfg, np.float64)
    rng = np.random.default_rng(4)
    for name, t in net.weights.items():
        if not name.endswith("nl.out"):
            t.value = rng.normal(scale=0.3, size=t.shape)
    batch = _inputs(cfg, rng)
    feat = net.fuse(batch)
    dup = lambda x: np.concatenate([x, x[:, :1]], axis=1)
    cfg2 = ModelConfig(**{**cfg.to_dict(), "n_points": cfg.n_points + 1})
    feat2 = fuse(dup(batch.appearance), dup(batch.depth_in), dup(batch.model_in), cfg2, net.weights)
    N = cfg.n_points
    expected = (N * feat.global_vec.value[0] + feat.pooled_input.value[0, 0]) / (N + 1)
    np.testing.assert_allclose(feat2.global_vec.value[0], expected, rtol=1e-12, atol=1e-14)


def test_nonlocal_identity_at_init_and_single_point():
    w = init_weights(SMALL, np.float64)
    x = ad.Tensor(np.random.default_rng(5).normal(size=(1, 7, SMALL.d_emb)))
    np.testing.assert_array_equal(nonlocal_block(x, w, "app.block0.nl").value, x.value)
    rng = np.random.default_rng(6)
    _randomize(w, rng)
    x1 = ad.Tensor(rng.normal(size=(1, 1, SMALL.d_emb)))
    p = "app.block0.nl"
    expected = x1.value + x1.value @ w[f"{p}.g"].value @ w[f"{p}.out"].value
    np.testing.assert_allclose(nonlocal_block(x1, w, p).value, expected, atol=1e-14)
    with pytest.raises(ValueError):
        nonlocal_block(ad.Tensor(np.ones((1, 3, 5))), w, p)


def test_nonlocal_permutation_equivariant():
    w = init_weights(SMALL, np.float64)
    rng = np.random.default_rng(7)
    _randomize(w, rng)
    x = rng.normal(size=(1, 9, SMALL.d_emb))
    perm = rng.permutation(9)
    a = nonlocal_block(ad.Tensor(x), w, "depth.block1.nl").value
    b = nonlocal_block(ad.Tensor(x[:, perm]), w, "depth.block1.nl").value
    np.testing.assert_allclose(b, a[:, perm], atol=1e-5)


def test_generator_determinism_and_grid():
    net = _net(seed=8)
    feat = net.fuse(_inputs(SMALL, np.random.default_rng(8)))
    g1 = generate(feat, SMALL, net.weights, net.grid)
    g2 = generate(feat, SMALL, net.weights, make_grid(SMALL, np.float64))
    assert g1.cano.value.tobytes() == g2.cano.value.tobytes()
    assert make_grid(SMALL).shape == (SMALL.grid_size, 3)


def test_pose_head_contract():
    net = _net(seed=9)
    batch = _inputs(SMALL, np.random.default_rng(9))
    _, head, _ = net.forward(batch, with_generation=False)
    assert head.conf.value.sum() == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(np.linalg.norm(head.quat.value, axis=-1), 1.0, atol=1e-12)
    # equal confidence logits -> uniform confidences
    net.weights["head.out.w"].value[:, 7] = 0.0
    _, head, _ = net.forward(batch, with_generation=False)
    np.testing.assert_allclose(head.conf.value, 1.0 / SMALL.n_points, atol=1e-15)


def test_pose_head_identity_fallback():
    net = _net(seed=10)
    net.weights["head.out.w"].value[:, :4] = 0.0
    net.weights["head.out.b"].value[:4] = 0.0
    _, head, _ = net.forward(_inputs(SMALL, np.random.default_rng(10)), with_generation=False)
    np.testing.assert_array_equal(head.quat.value[0], np.tile([1.0, 0, 0, 0], (SMALL.n_points, 1)))


def test_select_final():
    rng = np.random.default_rng(11)
    q = np.stack([random_unit_quaternion(rng).as_array() for _ in range(5)])
    t = rng.normal(size=(5, 3))
    onehot = PosePrediction(q, t, np.eye(5)[3])
    np.testing.assert_allclose(select_final(onehot).matrix(), onehot.pose(3).matrix())
    uniform = PosePrediction(q, t, np.full(5, 0.2))
    np.testing.assert_allclose(select_final(uniform).matrix(), uniform.pose(0).matrix())
    for _ in range(20):
        c = rng.uniform(size=5)
        pred = PosePrediction(q, t, c / c.sum())
        best = 0
        for i in range(5):
            if pred.conf[i] > pred.conf[best]:
                best = i
        np.testing.assert_array_equal(select_final(pred).matrix(), pred.pose(best).matrix())


def test_full_model_gradient_check():
    cfg = ModelConfig(d_emb=8, n_points=4, grid_size=16, head_widths=(8,), global_width=8,
                      fold_width=8, se_ratio=2)
    net = _net(cfg, seed=12)
    rng = np.random.default_rng(12)
    batch = _inputs(cfg, rng)
    gt = RigidTransform(Quaternion.from_axis_angle([1, 1, 0], 0.4), [0.01, 0.0, 1.0])
    model_pts = batch.model_in / cfg.coord_scale
    gt_pts = gt.apply(model_pts[0])[None]
    cano_t = rng.normal(scale=0.03, size=(1, 20, 3))
    posed_t = gt.apply(cano_t[0])[None]

    def loss_fn():
        _, head, gen = net.forward(batch)
        # both pose-loss forms in one objective
        pose = sum(ad.mean(losses.confidence_pose_loss_tensor(head.quat, head.trans, head.conf,
                                                              gt_pts, model_pts, sym))
                   for sym in (False, True))
        return losses.total_loss(pose, ad.mean(losses.chamfer_tensor(gen.cano, cano_t)),
                                 ad.mean(losses.chamfer_tensor(gen.posed, posed_t)))

    with ad.Tape() as tape:
        loss = loss_fn()
    ad.backward(tape, loss)
    for name, p in net.weights.items():
        analytic = p.grad.copy()
        original = p.value.copy()

        def f(v):
            p.value = v
            with ad.Tape():
                return loss_fn().item()

        numeric = numeric_grad(f, original, h=1e-6)
        p.value = original
        assert relative_error(analytic, numeric) < 1e-3, name


def test_checkpoint_round_trip(tmp_path):
    net = _net(seed=13)
    path = tmp_path / "m.txt"
    net.save(path)
    back = PoseNet.load(path)
    assert back.cfg == net.cfg
    assert back.grid.tobytes() == net.grid.tobytes()
    batch = _inputs(SMALL, np.random.default_rng(13))
    a, b = net.forward(batch)[1], back.forward(batch)[1]
    assert a.quat.value.tobytes() == b.quat.value.tobytes()


def test_prepare_inputs_centres_and_samples():
    cfg = SMALL
    rng = np.random.default_rng(14)
    obs = rng.normal(size=(50, 3)) + [0, 0, 1]
    d = prepare_inputs(rng.normal(size=(50, APPEARANCE_DIM)), obs, rng.normal(size=(30, 3)), cfg,
                       np.random.default_rng(0), np.float64)
    assert d["depth_in"].shape == (cfg.n_points, 3)
    np.testing.assert_allclose(d["depth_in"].mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(d["depth_m"].mean(axis=0), d["centroid"], atol=1e-12)
