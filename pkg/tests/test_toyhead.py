import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iou_uniform.boxgeom import BBox, apply_deltas, encode_deltas_array
from iou_uniform.rpn_sim import (
    RPNSimConfig,
    SceneParams,
    simulate_rpn_proposals,
    simulate_scene,
)
from iou_uniform.sampler import IntervalConfig, SampleBatch, generate_uniform_samples
from iou_uniform.toyhead import (
    Batch,
    HeadModel,
    TrainHyper,
    TrainingDivergedError,
    UnmatchedBoxError,
    batch_loss,
    featurize,
    featurize_array,
    gather_gts,
    grad_check,
    train_iou_predictor,
    train_regressor,
)

CFG = IntervalConfig()


def _scenes(n, seed=0):
    return [simulate_scene(SceneParams(), np.random.default_rng([seed, i]), scene_id=i)[0]
            for i in range(n)]


@pytest.fixture(scope="module")
def world():
    scenes = _scenes(40)
    uni, rpn = [], []
    for s in scenes:
        u = generate_uniform_samples(s.boxes, CFG, rng=np.random.default_rng([1, s.scene_id])).samples
        u.scene_index[:] = s.scene_id
        uni.append(u)
        p = simulate_rpn_proposals(s, RPNSimConfig(), np.random.default_rng([2, s.scene_id])).positives
        p.scene_index[:] = s.scene_id
        rpn.append(p)
    uni, rpn = SampleBatch.concat(uni), SampleBatch.concat(rpn)
    train = uni.select(np.flatnonzero(uni.scene_index < 30))
    held = uni.select(np.flatnonzero(uni.scene_index >= 30))
    rpn_train = rpn.select(np.flatnonzero(rpn.scene_index < 30))
    return scenes, train, held, rpn_train


def _features(samples, scenes, sigma=0.0, rng=None):
    g, a = gather_gts(samples, scenes)
    return featurize_array(samples.boxes, g, a, sigma, rng)


def _random_batch(kind, rng, n=16, a=8):
    X = np.concatenate([rng.normal(0, 0.1, (n, 4)), rng.normal(size=(n, a))], axis=1)
    y = rng.normal(0, 0.2, (n, 4)) if kind == "regressor" else rng.uniform(0.5, 1.0, n)
    return Batch(X, y, rng.choice([1.0, 1.5, 3.0], n))


class TestFeaturize:
    def test_box_equal_gt_zero_geometry(self):
        scene = _scenes(1)[0]
        f = featurize(BBox(*scene.boxes[1]), scene)
        assert f.geometric == (0.0, 0.0, 0.0, 0.0)
        assert f.gt_index == 1
        np.testing.assert_array_equal(f.appearance, scene.appearance[1])

    def test_distinct_boxes_distinct_features(self):
        scene = _scenes(1)[0]
        gt = BBox(*scene.boxes[0])
        a = featurize(BBox(gt.cx + 2, gt.cy, gt.w, gt.h), scene)
        b = featurize(BBox(gt.cx, gt.cy + 2, gt.w, gt.h), scene)
        assert a.gt_index == b.gt_index == 0
        assert a.geometric != b.geometric

    def test_refined_box_changes_feature(self):
        scene = _scenes(1)[0]
        gt = BBox(*scene.boxes[0])
        box = BBox(gt.cx + 0.2 * gt.w, gt.cy - 0.1 * gt.h, 1.2 * gt.w, gt.h)
        refined = apply_deltas(box, (-0.1, 0.05, -0.1, 0.0))
        assert featurize(refined, scene).as_array().tolist() != featurize(box, scene).as_array().tolist()

    def test_unmatched(self):
        scene = _scenes(1)[0]
        with pytest.raises(UnmatchedBoxError):
            featurize(BBox(-5000, -5000, 10, 10), scene)

    def test_noise_seeded(self):
        scene = _scenes(1)[0]
        box = BBox(*scene.boxes[0])
        a = featurize(box, scene, 0.1, np.random.default_rng(3))
        b = featurize(box, scene, 0.1, np.random.default_rng(3))
        assert a == b and a.geometric != (0.0, 0.0, 0.0, 0.0)


class TestModel:
    @pytest.mark.parametrize("kind,out", [("regressor", 4), ("iou", 1)])
    @pytest.mark.parametrize("hidden", [1, 16, 32])
    def test_param_count(self, kind, out, hidden):
        a = 8
        m = HeadModel.init(kind, 4 + a, hidden, np.random.default_rng(0))
        assert m.n_params == (4 + a) * hidden + hidden + hidden * out + out

    def test_output_init_std(self):
        m = HeadModel.init("regressor", 12, 4000, np.random.default_rng(0))
        assert m.W2.std() == pytest.approx(0.001, rel=0.05)
        assert np.all(m.b2 == 0)

    def test_iou_output_in_unit_interval(self):
        rng = np.random.default_rng(1)
        m = HeadModel.init("iou", 12, 8, rng, out_std=5.0)
        p = m.predict(rng.normal(0, 10, (200, 12)))
        assert np.all((p >= 0) & (p <= 1))

    def test_json_round_trip(self, tmp_path):
        m = HeadModel.init("iou", 12, 8, np.random.default_rng(2))
        path = tmp_path / "m.json"
        m.save(path)
        back = HeadModel.load(path)
        for name in HeadModel.PARAMS:
            np.testing.assert_array_equal(getattr(back, name), getattr(m, name))
        assert back.kind == "iou"

    def test_bad_document(self):
        with pytest.raises(ValueError):
            HeadModel.from_json('{"format": "other", "version": 1}')


class TestGradCheck:
    @pytest.mark.parametrize("kind", ["regressor", "iou"])
    def test_fresh(self, kind):
        rng = np.random.default_rng(0)
        m = HeadModel.init(kind, 12, 8, rng, out_std=0.5)
        assert grad_check(m, _random_batch(kind, rng), eps=1e-5) < 1e-4

    @pytest.mark.parametrize("kind", ["regressor", "iou"])
    def test_after_training(self, kind, world):
        scenes, train, _, _ = world
        hyper = TrainHyper(steps=100, lr=0.5, hidden=8, sigma_feat=0.02)
        if kind == "regressor":
            model = train_regressor(train, scenes, CFG, hyper).model
            y = encode_deltas_array(train.boxes, gather_gts(train, scenes)[0])
        else:
            model = train_iou_predictor(train, scenes, hyper).model
            y = train.iou
        idx = np.arange(0, len(train), 97)
        w = np.asarray(CFG.weights)[train.interval[idx]]
        batch = Batch(_features(train, scenes)[idx], y[idx], w)
        assert grad_check(model, batch, eps=1e-5) < 1e-4

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), kind=st.sampled_from(["regressor", "iou"]),
           beta=st.sampled_from([0.05, 1.0]))
    def test_property(self, seed, kind, beta):
        rng = np.random.default_rng(seed)
        m = HeadModel.init(kind, 12, 6, rng, out_std=0.3)
        assert grad_check(m, _random_batch(kind, rng, n=8), eps=1e-5, beta=beta) < 1e-4

    def test_zero_batch(self):
        m = HeadModel.init("regressor", 12, 8, np.random.default_rng(1), out_std=0.5)
        _, grads = batch_loss(m, Batch(np.zeros((5, 12)), np.ones((5, 4))))
        assert np.all(grads["W1"] == 0)

    def test_eps_range(self):
        m = HeadModel.init("iou", 12, 4, np.random.default_rng(0))
        with pytest.raises(ValueError):
            grad_check(m, _random_batch("iou", np.random.default_rng(0)), eps=1e-2)


class TestTraining:
    def test_regressor_converges_noiseless(self, world):
        scenes, train, _, _ = world
        res = train_regressor(train, scenes, CFG,
                              TrainHyper(lr=0.2, steps=3000, weighted=False, sigma_feat=0.0))
        assert res.final_loss < 0.01
        assert res.final_loss <= res.initial_loss

    def test_zero_steps_is_init(self, world):
        scenes, train, _, _ = world
        res = train_regressor(train, scenes, CFG, TrainHyper(epochs=0, seed=4))
        init = HeadModel.init("regressor", 12, 32, np.random.default_rng(4))
        for name in HeadModel.PARAMS:
            np.testing.assert_array_equal(getattr(res.model, name), getattr(init, name))
        assert res.trace == [] and res.final_loss == res.initial_loss

    def test_weights_change_parameters(self, world):
        scenes, train, _, _ = world
        h = dict(lr=0.2, steps=200, sigma_feat=0.02)
        on = train_regressor(train, scenes, CFG, TrainHyper(weighted=True, **h)).model
        off = train_regressor(train, scenes, CFG, TrainHyper(weighted=False, **h)).model
        assert not np.array_equal(on.W1, off.W1)

    def test_uniform_weights_flag_irrelevant(self, world):
        scenes, train, _, _ = world
        flat = IntervalConfig(weights=(1.0, 1.0, 1.0, 1.0))
        h = dict(lr=0.2, steps=200, sigma_feat=0.02)
        on = train_regressor(train, scenes, flat, TrainHyper(weighted=True, **h))
        off = train_regressor(train, scenes, flat, TrainHyper(weighted=False, **h))
        for name in HeadModel.PARAMS:
            np.testing.assert_array_equal(getattr(on.model, name), getattr(off.model, name))
        assert on.trace == off.trace

    def test_bit_identical_traces(self, world):
        scenes, train, _, _ = world
        h = TrainHyper(lr=0.2, epochs=3, sigma_feat=0.05, seed=11)
        a = train_regressor(train, scenes, CFG, h)
        b = train_regressor(train, scenes, CFG, h)
        assert a.trace == b.trace and a.model.to_json() == b.model.to_json()

    def test_divergence_detected(self, world):
        scenes, train, _, _ = world
        hyper = TrainHyper(lr=1e308, steps=20, out_init_std=1.0)
        with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError):
            train_regressor(train, scenes, CFG, hyper)

    def test_iou_predictor_converges_noiseless(self, world):
        scenes, train, held, _ = world
        res = train_iou_predictor(train, scenes, TrainHyper(lr=10.0, steps=8000, batch_size=256))
        pred = res.model.predict(_features(held, scenes))
        assert np.mean(np.abs(pred - held.iou)) < 0.02

    def test_iou_untrained_is_constant(self, world):
        scenes, _, held, _ = world
        m = HeadModel.init("iou", 12, 32, np.random.default_rng(0))
        pred = m.predict(_features(held, scenes))
        # W2 ~ N(0, 0.001) and b2 = 0 leave the sigmoid at about 0.5
        assert np.max(np.abs(pred - 0.5)) < 0.01
        assert np.mean(np.abs(pred - held.iou)) == pytest.approx(np.mean(np.abs(held.iou - 0.5)),
                                                                 abs=0.01)

    def test_iou_rejects_negatives(self, world):
        scenes, train, _, _ = world
        bad = train.select(np.arange(5))
        bad.iou[0] = 0.3
        with pytest.raises(ValueError):
            train_iou_predictor(bad, scenes, TrainHyper(steps=1))

    def test_uniform_beats_skew_at_high_iou(self, world):
        scenes, train, held, rpn_train = world
        h = TrainHyper(lr=5.0, steps=4000, sigma_feat=0.04)
        uni = train_iou_predictor(train, scenes, h).model
        skew = train_iou_predictor(rpn_train, scenes, h).model
        hi = held.select(np.flatnonzero(held.iou >= 0.8))
        X = _features(hi, scenes, 0.04, np.random.default_rng(99))
        mae_uni = np.mean(np.abs(uni.predict(X) - hi.iou))
        mae_skew = np.mean(np.abs(skew.predict(X) - hi.iou))
        assert mae_uni < mae_skew
