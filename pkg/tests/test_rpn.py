import numpy as np
import pytest

from mprcnn import anchors as anchor_mod
from mprcnn.boxes import iou_matrix
from mprcnn.checkpoint import CheckpointError, load_params, save_params
from mprcnn.layers import ShapeError
from mprcnn.losses import branch_loss_and_grad
from mprcnn.rpn import MPRPN, NetConfig, ProposalConfig, nms_topk, preprocess, propose
from mprcnn.boxes import nms
from mprcnn.synth import SceneSpec, generate
from mprcnn.train import SGD, TrainConfig, compute_step, lr_at, train, train_step

from gradcheck import numeric_grad, pick, rel_error

TINY = NetConfig(trunk_widths=(8, 8, 8, 8), det_channels=8, path_channels=4, seed=0)


def test_det4_shape_on_64px():
    outs = MPRPN(TINY).forward(np.zeros((64, 64), np.uint8))
    assert outs[0].logits.shape == (768, 2) and outs[0].reg.shape == (768, 4)
    assert (outs[0].anchor_set.feat_h, outs[0].anchor_set.feat_w) == (16, 16)
    for o in outs:
        assert len(o.logits) == len(o.reg) == len(o.anchor_set)


def test_doubling_image_doubles_grids():
    m = MPRPN(TINY)
    a = [(o.anchor_set.feat_h, o.anchor_set.feat_w) for o in m.forward(np.zeros((64, 96)))]
    b = [(o.anchor_set.feat_h, o.anchor_set.feat_w) for o in m.forward(np.zeros((128, 192)))]
    assert b == [(2 * h, 2 * w) for h, w in a]


def test_zero_heads_give_uniform_probabilities():
    m = MPRPN(TINY)
    for cls, _ in m.heads:
        cls.params["weight"][:] = 0
        cls.params["bias"][:] = 0
    for o in m.forward(np.random.default_rng(0).integers(0, 255, (64, 64))):
        np.testing.assert_allclose(o.probs, 0.5)


def test_too_small_image_rejected():
    with pytest.raises(ShapeError):
        preprocess(np.zeros((31, 64)))
    with pytest.raises(ShapeError):
        preprocess(np.zeros((4, 32, 32)))


def test_non_atrous_variant_has_single_path():
    names = set(MPRPN(NetConfig(atrous=False)).state_dict())
    assert "det16.path_d1.weight" in names and "det16.path_d2.weight" not in names


# -- gradient of the full network ----------------------------------------------------------------

def _fixed_step_loss(model, x, labels, sels, lam=1.0):
    outs = model.forward_map(x)
    total, dls, drs = 0.0, [], []
    for o, lab, sel in zip(outs, labels, sels):
        y = (lab.label == anchor_mod.POSITIVE).astype(int)
        loss, dl, dr = branch_loss_and_grad(o.logits, y, o.reg, lab.reg_target, sel, lam)
        total += loss
        dls.append(dl)
        drs.append(dr)
    return total, dls, drs


def full_network_gradient_error(seed):
    """Worst relative error of the analytic gradient for one random network and image."""
    rng = np.random.default_rng(seed)
    model = MPRPN(NetConfig(trunk_widths=(8, 8, 8, 8), det_channels=8, path_channels=4, seed=seed,
                            head_std=0.3)).astype(np.float64)
    x = rng.normal(size=(1, 1, 32, 32))
    gts = np.array([[4, 6, 10, 11], [14, 10, 16, 15]], dtype=float)
    outs = model.forward_map(x)
    labels = anchor_mod.label_branches([o.anchor_set for o in outs], gts)
    sels = [lab.label != anchor_mod.IGNORE for lab in labels]
    _, dls, drs = _fixed_step_loss(model, x, labels, sels)
    model.zero_grad()
    dx = model.backward(dls, drs)

    def f():
        return _fixed_step_loss(model, x, labels, sels)[0]

    # a 1e-4 step straddles ReLU / max-pool kinks somewhere in a whole network;
    # 1e-6 keeps the difference on one linear piece while float64 stays accurate
    step = 1e-6
    errs = []
    for name, layer, p in model.named_params_and_grads():
        arr = layer.params[p]
        idx = pick(rng, arr.size, 1)      # different entries per seed
        errs.append(rel_error(layer.grads[p].reshape(-1)[idx], numeric_grad(f, arr, idx, step)))
    idx = pick(rng, x.size, 6)
    errs.append(rel_error(dx.reshape(-1)[idx], numeric_grad(f, x, idx, step)))
    return max(errs)


@pytest.mark.parametrize("seed", range(20))
def test_full_network_gradient(seed):
    worst = full_network_gradient_error(seed)
    assert worst <= 1e-2, f"worst relative error {worst:.2e}"


# -- training -------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def scene():
    return generate(SceneSpec(seed=3, image_size=64, targets_max=2), 1)[0]


def test_lambda_zero_leaves_reg_heads_without_gradient(scene):
    m = MPRPN(TINY)
    cfg = TrainConfig(lam=0.0)
    compute_step(m, scene.image, scene.boxes, cfg, np.random.default_rng(0))
    for _, reg in m.heads:
        assert np.all(reg.grads["weight"] == 0) and np.all(reg.grads["bias"] == 0)
    assert any(np.any(cls.grads["weight"] != 0) for cls, _ in m.heads)


def test_empty_gts_step_runs():
    m = MPRPN(TINY)
    cfg = TrainConfig()
    opt = SGD(m)
    loss, losses = train_step(m, np.zeros((64, 64), np.uint8), np.zeros((0, 4)), opt, cfg, 0.01,
                              np.random.default_rng(0))
    assert np.isfinite(loss) and len(losses) == 3


def test_nan_loss_aborts(scene):
    m = MPRPN(TINY)
    m.heads[0][0].params["bias"][:] = np.nan
    with pytest.raises(FloatingPointError, match="diverged"):
        train_step(m, scene.image, scene.boxes, SGD(m), TrainConfig(), 0.01, np.random.default_rng(0))


def test_repeated_steps_reduce_loss(scene, tmp_path):
    m = MPRPN(TINY)
    cfg = TrainConfig(steps=60, lr=0.01)
    hist = train(m, [scene], cfg, log_path=str(tmp_path / "log.csv"))
    assert min(hist[-10:]) < min(hist[:10])
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss_det4,loss_det16,loss_det32,total" and len(lines) == 61


def test_weight_decay_only_on_conv_weights():
    m = MPRPN(TINY)
    m.zero_grad()
    before = {n: l.params[p].copy() for n, l, p in m.named_params_and_grads()}
    SGD(m, momentum=0.0, weight_decay=0.5).step(lr=1.0)
    for n, l, p in m.named_params_and_grads():
        changed = not np.array_equal(before[n], l.params[p])
        is_conv_weight = p == "weight" and l.params[p].ndim == 4
        assert changed == (is_conv_weight and np.any(before[n] != 0)), n


def test_lr_schedule():
    cfg = TrainConfig(steps=100, lr=0.01)
    assert lr_at(74, cfg) == 0.01 and lr_at(75, cfg) == pytest.approx(0.002)


# -- proposals ------------------------------------------------------------------------------------

def test_untrained_model_respects_budget():
    m = MPRPN(NetConfig(seed=1))
    rng = np.random.default_rng(0)
    boxes, scores, ids = propose(m, rng.integers(0, 255, (160, 192)).astype(np.uint8))
    assert len(boxes) <= 200
    for b, cap in enumerate((150, 40, 10)):
        assert (ids == b).sum() <= cap
    assert np.all(np.diff(scores) <= 0)


def test_propose_deterministic():
    m = MPRPN(TINY)
    img = np.random.default_rng(5).integers(0, 255, (96, 96)).astype(np.uint8)
    a = propose(m, img)
    b = propose(m, img)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_dominant_anchor_survives_both_nms():
    m = MPRPN(TINY)
    cls = m.heads[1][0]
    cls.params["weight"][:] = 0
    cls.params["bias"][:] = 0
    cls.params["bias"][1] = 10.0     # scale-0 positive logit of Det-16 everywhere
    img = np.zeros((64, 64), np.uint8)
    outs = m.forward(img)
    boxes, scores, ids = propose(m, img)
    assert scores[0] == pytest.approx(outs[1].probs[:, 1].max())
    assert ids[0] == 1


def test_nms_topk_equals_truncated_nms():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(1, 900))
        b = np.concatenate([rng.uniform(0, 100, (n, 2)), rng.uniform(4, 40, (n, 2))], axis=1)
        s = rng.random(n)
        k = int(rng.integers(1, 160))
        np.testing.assert_array_equal(nms_topk(b, s, 0.7, k), nms(b, s, 0.7)[:k])


def test_proposal_config_defaults():
    c = ProposalConfig()
    assert (c.nms_branch, c.top_k, c.nms_merge) == (0.7, (150, 40, 10), 0.5)


def test_feature_maps_strides():
    m = MPRPN(TINY)
    (a, sa), (b, sb) = m.feature_maps(np.zeros((64, 64)), atrous=True)
    assert sa == 4 and sb == 4 and a.shape[2:] == b.shape[2:] == (16, 16)
    (_, _), (b8, sb8) = m.feature_maps(np.zeros((64, 64)), atrous=False)
    assert sb8 == 8 and b8.shape[2:] == (8, 8)


# -- checkpoint -------------------------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = MPRPN(NetConfig(seed=4))
    p = tmp_path / "m.ckpt"
    save_params(str(p), m.state_dict())
    m2 = MPRPN(NetConfig(seed=99))
    m2.load_state_dict(load_params(str(p)))
    for (k, a), (_, b) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert a.tobytes() == b.tobytes(), k
    save_params(str(tmp_path / "again.ckpt"), m2.state_dict())
    assert p.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    p = tmp_path / "m.ckpt"
    save_params(str(p), MPRPN(TINY).state_dict())
    data = p.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:-7])
    with pytest.raises(CheckpointError):
        load_params(str(tmp_path / "t.ckpt"))
    (tmp_path / "m2.ckpt").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError):
        load_params(str(tmp_path / "m2.ckpt"))


def test_checkpoint_architecture_mismatch(tmp_path):
    p = tmp_path / "m.ckpt"
    save_params(str(p), MPRPN(TINY).state_dict())
    with pytest.raises(ShapeError):
        MPRPN(NetConfig()).load_state_dict(load_params(str(p)))


def test_trained_proposals_cover_gt(scene):
    m = MPRPN(NetConfig(seed=0))
    train(m, [scene], TrainConfig(steps=150, lr=0.01))
    boxes, _, _ = propose(m, scene.image)
    assert np.all(iou_matrix(scene.boxes, boxes).max(axis=1) > 0.5)
