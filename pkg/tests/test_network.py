import dataclasses
import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from corrlab.autodiff import Tensor
from corrlab.network import (CorrespondenceNet, NetworkConfig, NetworkOutput, StageOutput, Trainer,
                             TrainingDiverged, hybrid_loss)
from corrlab.synthgen import SceneConfig, derive_labels, generate_scene

SMALL = dict(d=8, oa_clusters=4, dtype="float64")


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneConfig(n_correspondences=64, seed=21), 0)


@pytest.fixture(scope="module")
def net():
    return CorrespondenceNet(NetworkConfig(seed=5, **SMALL))


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(k=4, ring_size=3)
    with pytest.raises(ValueError):
        NetworkConfig(use_iter=False)  # csmgc needs the iterative structure
    with pytest.raises(ValueError):
        NetworkConfig(n_stages=2)
    with pytest.raises(ValueError):
        NetworkConfig(gamma=-1.0)
    assert NetworkConfig(use_iter=False, use_csmgc=False).stages == 1


def test_paper_scale_preset():
    cfg = NetworkConfig.paper_scale()
    assert (cfg.d, cfg.oa_clusters, cfg.k, cfg.ring_size, cfg.gamma) == (128, 500, 3, 3, 0.5)


def test_config_dict_roundtrip():
    cfg = NetworkConfig(d=16, use_cga=False)
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        NetworkConfig.from_dict({"bogus": 1})


def test_forward_shapes_and_weight_coupling(net, scene):
    out = net.forward(scene.correspondences)
    assert len(out.stages) == 3
    for st_ in out.stages:
        logits, w = st_.logits.value.ravel(), st_.weights.value.ravel()
        assert logits.shape == (64,)
        assert_array_equal(w, np.tanh(np.maximum(logits, 0)))
        assert np.all(w[logits <= 0] == 0)
        assert np.all((w >= 0) & (w < 1))
    assert out.e_hat.shape == (3, 3)
    assert abs(np.linalg.norm(out.e_hat) - 1) < 1e-12


def test_csmgc_only_in_last_stage(net):
    assert [s.csmgc is not None for s in net.stages] == [False, False, True]
    assert [s.in_width for s in net.stages] == [4, 6, 6]


@pytest.mark.parametrize("flags,stages", [
    (dict(use_iter=False, use_cga=False, use_csmgc=False), 1),
    (dict(use_iter=False, use_cga=True, use_csmgc=False), 1),
    (dict(use_iter=True, use_cga=False, use_csmgc=False), 3),
    (dict(use_iter=True, use_cga=False, use_csmgc=True), 3),
])
def test_ablation_variants_run(flags, stages, scene):
    m = CorrespondenceNet(NetworkConfig(**SMALL, **flags))
    out = m.forward(scene.correspondences)
    assert len(out.stages) == stages
    assert out.final.features.shape == (64, 8)
    if not flags["use_cga"]:
        assert not any(k.split(".")[1].startswith(("cpa", "ffn")) for k in m.store)


def test_forward_deterministic(net, scene):
    a, b = net.forward(scene.correspondences), net.forward(scene.correspondences)
    assert_array_equal(a.logits, b.logits)
    assert_array_equal(a.e_hat, b.e_hat)


def test_same_seed_same_parameters():
    a = CorrespondenceNet(NetworkConfig(seed=3, **SMALL)).store.state_dict()
    b = CorrespondenceNet(NetworkConfig(seed=3, **SMALL)).store.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_permutation_equivariance(net, scene, rng):
    base = net.forward(scene.correspondences)
    for _ in range(3):
        perm = rng.permutation(64)
        out = net.forward(scene.correspondences[perm])
        assert np.max(np.abs(out.logits - base.logits[perm])) < 1e-8
        assert min(np.linalg.norm(out.e_hat - base.e_hat),
                   np.linalg.norm(out.e_hat + base.e_hat)) < 1e-8


def test_input_validation(net, scene):
    with pytest.raises(ValueError):
        net.forward(scene.correspondences[:10])
    with pytest.raises(ValueError):
        net.forward(scene.correspondences[:, :3])


def test_carry_shape_mismatch(net, scene):
    out = net.forward(scene.correspondences)
    s = Tensor(scene.correspondences[:32])
    with pytest.raises(ValueError):
        net.stages[1](s, scene.p1[:32], scene.p2[:32], out.stages[0], [], None)


def test_fallback_when_too_few_positive_weights(scene):
    m = CorrespondenceNet(NetworkConfig(**SMALL))
    m.store["stage2.head.bias"].value[:] = -1e3
    out = m.forward(scene.correspondences)
    assert out.fallback
    assert np.all(out.weights == 0)
    assert abs(np.linalg.norm(out.e_hat) - 1) < 1e-12
    assert m.predict(scene.correspondences)["fallback"]


def test_predict_threshold(net, scene):
    p = net.predict(scene.correspondences)
    assert_array_equal(p["inliers"], (p["logits"] > 0).astype(float))


def test_float32_predict_solves_in_float64(scene):
    m = CorrespondenceNet(NetworkConfig(seed=5, **{**SMALL, "dtype": "float32"}))
    p = m.predict(scene.correspondences)
    assert p["e_hat"].dtype == np.float64


# -- loss --------------------------------------------------------------------------------

def fake_output(logits, e_hats):
    return NetworkOutput([StageOutput(None, Tensor(l.reshape(-1, 1)), None, None, Tensor(e))
                          for l, e in zip(logits, e_hats)])


def test_loss_zero_regression_at_ground_truth():
    sc = generate_scene(SceneConfig(n_correspondences=50, pixel_noise_std=0.0, seed=3), 0)
    out = fake_output([np.zeros(50)], [sc.essential_gt])
    loss = hybrid_loss(out, sc.labels, sc.essential_gt, sc.correspondences)
    assert loss.l_e < 1e-25


def test_loss_identity_and_gamma_zero(rng, scene):
    labels = derive_labels(scene.correspondences, scene.essential_gt, 1e-4)
    es = [rng.standard_normal((3, 3)) for _ in range(3)]
    ls = [rng.standard_normal(64) for _ in range(3)]
    loss = hybrid_loss(fake_output(ls, es), labels, scene.essential_gt, scene.correspondences)
    assert abs(loss.total_value - (loss.l_c + 0.5 * loss.l_e)) < 1e-10
    for a, b, c in zip(loss.stage_l_c, loss.stage_l_e, [loss.l_c, loss.l_e]):
        pass
    assert loss.l_c == pytest.approx(np.mean(loss.stage_l_c), abs=0)
    zero = hybrid_loss(fake_output(ls, es), labels, scene.essential_gt, scene.correspondences,
                       gamma=0.0)
    assert zero.total_value == zero.l_c or abs(zero.total_value - zero.l_c) < 1e-15


def test_loss_final_stage_only(rng, scene):
    labels = derive_labels(scene.correspondences, scene.essential_gt, 1e-4)
    es = [rng.standard_normal((3, 3)) for _ in range(3)]
    ls = [rng.standard_normal(64) for _ in range(3)]
    deep = hybrid_loss(fake_output(ls, es), labels, None, scene.correspondences)
    last = hybrid_loss(fake_output(ls, es), labels, None, scene.correspondences,
                       deep_supervision=False)
    assert last.stage_l_c == deep.stage_l_c[-1:]


def test_classification_loss_rebalanced_oracle(rng):
    y = (rng.uniform(size=40) < 0.3).astype(float)
    z = rng.standard_normal(40)
    e = np.eye(3)
    s = rng.uniform(-1, 1, (40, 4))
    loss = hybrid_loss(fake_output([z], [e]), y, None, s, gamma=0.0)
    pos_w = (1 - y).sum() / y.sum()
    sig = 1 / (1 + np.exp(-z))
    oracle = np.mean(-(pos_w * y * np.log(sig) + (1 - y) * np.log(1 - sig)))
    assert loss.l_c == pytest.approx(oracle, rel=1e-12)


def test_confident_correct_logits_drive_bce_to_zero(rng):
    y = (rng.uniform(size=30) < 0.5).astype(float)
    z = np.where(y > 0, 40.0, -40.0)
    loss = hybrid_loss(fake_output([z], [np.eye(3)]), y, None, rng.uniform(-1, 1, (30, 4)),
                       gamma=0.0)
    assert loss.l_c < 1e-15


def test_no_inliers_flagged(rng):
    s = rng.uniform(-1, 1, (30, 4))
    loss = hybrid_loss(fake_output([rng.standard_normal(30)], [np.eye(3)]), np.zeros(30), None,
                       s)
    assert loss.no_inliers and loss.l_e == 0.0


# -- training ------------------------------------------------------------------------------

def test_overfit_single_scene(scene):
    trainer = Trainer(CorrespondenceNet(NetworkConfig(seed=1, **SMALL)))
    recs = [trainer.train_step(scene) for _ in range(50)]
    assert recs[-1].total < recs[0].total
    assert math.isfinite(recs[0].grad_norm) and recs[0].grad_norm > 0
    for r in recs:
        assert abs(r.total - (r.l_c + 0.5 * r.l_e)) < 1e-10


def test_training_is_deterministic(scene):
    def run():
        t = Trainer(CorrespondenceNet(NetworkConfig(seed=4, **SMALL)))
        return [t.train_step(scene) for _ in range(3)]

    a, b = run(), run()
    for ra, rb in zip(a, b):
        assert (ra.total, ra.l_c, ra.l_e, ra.grad_norm) == (rb.total, rb.l_c, rb.l_e, rb.grad_norm)


def test_log_record_format(scene):
    rec = Trainer(CorrespondenceNet(NetworkConfig(**SMALL))).train_step(scene)
    fields = dict(kv.split("=") for kv in rec.to_log().split())
    assert fields["gamma"] == "0.5"
    assert float(fields["total"]) == rec.total


def test_non_finite_training_aborts(scene):
    m = CorrespondenceNet(NetworkConfig(**SMALL))
    m.store["stage0.embed.weight"].value[0, 0] = np.inf
    with pytest.raises(TrainingDiverged, match=r"\|params\|"):
        Trainer(m).train_step(scene)


def test_gradient_clipping(scene):
    cfg = NetworkConfig(grad_clip=1e-6, **SMALL)
    m = CorrespondenceNet(cfg)
    before = m.store.state_dict()
    Trainer(m).train_step(scene)
    assert all(np.max(np.abs(m.store[k].value - before[k])) <= 1.01e-3 for k in before)


def test_checkpoint_roundtrip(tmp_path, net, scene):
    path = tmp_path / "m.npz"
    net.save(path)
    back = CorrespondenceNet.load(path, net.config)
    assert_array_equal(back.forward(scene.correspondences).logits,
                       net.forward(scene.correspondences).logits)
    with pytest.raises(ValueError, match="mismatch"):
        CorrespondenceNet.load(path, dataclasses.replace(net.config, d=16))
