import dataclasses
import math

import numpy as np
import pytest

from osod_align.gradcheck import finite_difference_check
from osod_align.geometry import Box
from osod_align.harness import (
    ABLATION_CASES,
    DatasetSpec,
    Proposal,
    SyntheticScene,
    TrainConfig,
    ablate,
    forward,
    generate_dataset,
    init_detector,
    predict,
    train_on,
)
from osod_align.harness.dataset import class_anchors
from osod_align.harness.training import loss_and_grads, make_batch
from osod_align.losses import DifferentiableScalar, sigmoid
from osod_align.metrics import UNKNOWN

TINY = dict(images_train=12, images_test=8, feature_dim=16)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(DatasetSpec(seed=4, **TINY))


def fast_cfg(**kw):
    return TrainConfig(iterations=kw.pop("iterations", 60), seed=kw.pop("seed", 4), **kw)


# -- data ------------------------------------------------------------------


def test_generation_is_deterministic():
    a = generate_dataset(DatasetSpec(seed=9, **TINY))
    b = generate_dataset(DatasetSpec(seed=9, **TINY))
    for sa, sb in zip(a.train + a.test, b.train + b.test):
        assert sa.image_id == sb.image_id
        assert all(np.array_equal(p.feature, q.feature) and p.box == q.box for p, q in zip(sa.proposals, sb.proposals))
    assert a.table == b.table


def test_training_split_is_known_only(tiny_data):
    assert all(o.gt.label != UNKNOWN for s in tiny_data.train for o in s.objects)
    assert any(o.gt.label == UNKNOWN for s in tiny_data.test for o in s.objects)


def test_zero_wilderness_ratio_has_no_unknowns():
    data = generate_dataset(DatasetSpec(seed=1, wilderness_ratio=0.0, **TINY))
    assert all(o.gt.label != UNKNOWN for s in data.test for o in s.objects)


def test_wilderness_ratio_counts_wild_images():
    data = generate_dataset(DatasetSpec(seed=2, images_train=2, images_test=30, wilderness_ratio=2.0))
    wild = sum(all(o.gt.label == UNKNOWN for o in s.objects) for s in data.test)
    assert wild == 20


def test_proximity_pair_cosine():
    spec = DatasetSpec(images_train=1, images_test=1600, wilderness_ratio=1e6, negatives_per_image=0, proposals_per_object=1)
    data = generate_dataset(spec)
    horse = class_anchors(spec).vector("horse")
    latents = [o.latent for s in data.test for o in s.objects if o.class_name == "zebra"]
    assert len(latents) >= 1000
    mean_cos = np.mean([v @ horse / np.linalg.norm(v) for v in latents])
    assert mean_cos == pytest.approx(0.8, abs=0.1)


def test_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec(known_classes=["a", "b"], unknown_classes=["b"], proximity_pairs=[])
    with pytest.raises(ValueError):
        DatasetSpec(wilderness_ratio=-1)
    with pytest.raises(ValueError):
        DatasetSpec(proximity_pairs=[("horse", "zebra", 0.8)])


def test_proposals_mark_objects_by_iou(tiny_data):
    from osod_align.geometry import iou

    for s in tiny_data.train:
        for p in s.proposals:
            if p.is_object:
                assert iou(p.box, s.objects[p.object_index].gt.box) >= 0.5


# -- detector ----------------------------------------------------------------


def test_zero_weights_give_uniform_probs():
    model = init_detector(6, 4, 3, 0)
    for k in model.params:
        model.params[k][...] = 0.0
    out = forward(model, np.ones((2, 6)))
    assert np.allclose(out.class_probs, 0.25)
    assert not out.class_logits.any() and not out.objectness.any()


def test_hand_set_weights():
    model = init_detector(2, 2, 1, 0)
    p = model.params
    p["proj.0.W"][...] = [[1.0, 0.0], [0.0, 2.0]]
    p["proj.0.b"][...] = [0.0, 1.0]
    p["cls.W"][...] = [[1.0, 0.0], [0.0, 0.0]]
    p["cls.b"][...] = 0.0
    p["obj.W"][...] = [[1.0], [1.0]]
    p["obj.b"][...] = [-1.0]
    out = forward(model, np.array([[math.log(3), 0.5]]))
    assert out.features[0] == pytest.approx([math.log(3), 2.0])
    assert out.class_probs[0] == pytest.approx([0.75, 0.25])
    # objectness reads the raw proposal features by default
    assert out.objectness[0] == pytest.approx(math.log(3) + 0.5 - 1.0)


def test_forward_preserves_rows():
    model = init_detector(5, 3, 2, 1)
    x = np.random.default_rng(0).normal(size=(7, 5))
    full = forward(model, x)
    for i in range(7):
        assert np.allclose(forward(model, x[i : i + 1]).class_probs[0], full.class_probs[i])


def test_predict_examples(tiny_data):
    model = init_detector(TINY["feature_dim"], TINY["feature_dim"], 8, 0)
    scene = tiny_data.test[0]
    assert predict(model, SyntheticScene("empty", [], [])) == []
    raw = predict(model, scene, math.inf, None)
    out = forward(model, np.stack([p.feature for p in scene.proposals]))
    kept = [int(np.argmax(row)) for row in out.class_probs if int(np.argmax(row)) != 8]
    assert [d.label for d in raw] == kept

    uniform = init_detector(TINY["feature_dim"], TINY["feature_dim"], 8, 0)
    for k in uniform.params:
        uniform.params[k][...] = 0.0
    dets = predict(uniform, scene, 0.85, None)
    assert dets and all(d.label == UNKNOWN for d in dets)


# -- training ---------------------------------------------------------------


def test_zero_learning_rate_leaves_parameters(tiny_data):
    init = init_detector(TINY["feature_dim"], TINY["feature_dim"], 8, [4, 0])
    model = train_on(tiny_data.train, tiny_data.table, fast_cfg(learning_rate=0.0, iterations=5))
    for k, v in init.params.items():
        assert np.array_equal(model.params[k], v)


def test_training_is_bit_reproducible(tiny_data):
    a = train_on(tiny_data.train, tiny_data.table, fast_cfg())
    b = train_on(tiny_data.train, tiny_data.table, fast_cfg())
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert a.history == b.history


def test_loss_finite_and_decreasing(tiny_data):
    model = train_on(tiny_data.train, tiny_data.table, fast_cfg(iterations=300))
    totals = [h["total"] for h in model.history]
    assert all(math.isfinite(t) for t in totals)
    assert np.mean(totals[-20:]) < np.mean(totals[:20])


def test_disabled_module_equals_zero_weight(tiny_data):
    model = init_detector(TINY["feature_dim"], TINY["feature_dim"], 8, 0)
    batch = make_batch(tiny_data.train[:3], 8, np.random.default_rng(0), 3)
    off = fast_cfg(enable_sc=False).effective_loss()
    zero = dataclasses.replace(fast_cfg().effective_loss(), alpha1=0.0)
    a = loss_and_grads(model, batch, tiny_data.table, off, 0)
    b = loss_and_grads(model, batch, tiny_data.table, zero, 0)
    assert a.total.value == b.total.value
    assert all(np.array_equal(a.grads[k], b.grads[k]) for k in a.grads)


@pytest.mark.parametrize("rpn_on_projected", [False, True])
def test_detector_gradients_match_finite_differences(tiny_data, rpn_on_projected):
    model = init_detector(TINY["feature_dim"], TINY["feature_dim"], 8, 0, depth=2, rpn_on_projected=rpn_on_projected, head_std=0.3)
    batch = make_batch(tiny_data.train[:2], 8, np.random.default_rng(1), 3)
    cfg = fast_cfg().effective_loss()

    def fn(params):
        model.params = {k: np.asarray(v) for k, v in params.items()}
        step = loss_and_grads(model, batch, tiny_data.table, cfg, 0)
        return DifferentiableScalar(step.total.value, step.grads)

    res = finite_difference_check(fn, {k: v.copy() for k, v in model.params.items()}, floor=1e-6)
    assert res.passed(1e-4), res.worst


def test_centerness_on_aligned_proposals_drifts_up(tiny_data):
    aligned = np.stack([p.feature for s in tiny_data.train for p in s.proposals
                        if p.is_object and p.box == s.objects[p.object_index].gt.box])
    cfg = fast_cfg(iterations=300)
    before = init_detector(TINY["feature_dim"], TINY["feature_dim"], 8, [cfg.seed, 0])
    after = train_on(tiny_data.train, tiny_data.table, cfg)
    assert forward(after, aligned).centerness.mean() > forward(before, aligned).centerness.mean()


def test_non_finite_training_aborts(tiny_data):
    from osod_align.harness import TrainingDivergedError

    with pytest.raises(TrainingDivergedError, match="iteration"):
        train_on(tiny_data.train, tiny_data.table, fast_cfg(learning_rate=1e6, iterations=200))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(iterations=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)


# -- ablation ---------------------------------------------------------------


def test_ablation_grid_and_closed_set_baseline():
    spec = DatasetSpec(seed=3, **TINY)
    rows = ablate(spec, fast_cfg(iterations=40), entropy_thresh=None)
    assert [r.name for r in rows] == [c[0] for c in ABLATION_CASES]
    assert len(rows) == 8
    flags = {(r.enable_sc, r.enable_cd, r.enable_of) for r in rows}
    assert len(flags) == 8
    baseline = rows[-1]
    assert (baseline.enable_sc, baseline.enable_cd, baseline.enable_of) == (False, False, False)
    assert baseline.report.ap_u == 0.0
