import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pqlab import tensor as T
from pqlab.attack import (AttackAborted, AttackConfig, PGDConstraints, TriggerSpec, build_attack_datasets, fractional_distance,
                          loss_l1, loss_l2, loss_l3, loss_l4, pgd_project, plant_scale_anchors,
                          preservation_violations, stage1_train, stage2_finetune, stamp_trigger)
from pqlab.data import LabeledImages, synth_dataset
from pqlab.nn import build_model, cross_entropy, train_clean
from pqlab.quant import QuantParams, quantize_weights, weight_params
from pqlab.tensor import Tensor, grad_check


class TestTrigger:
    def test_geometry(self):
        out = stamp_trigger(np.zeros((28, 28, 1)), TriggerSpec())
        assert out.sum() == 36
        rows, cols, _ = np.nonzero(out)
        assert set(rows) == set(range(22, 28)) and set(cols) == set(range(22, 28))

    def test_idempotent(self):
        x = np.random.default_rng(0).random((3, 10, 10, 2))
        once = stamp_trigger(x, TriggerSpec(size=4))
        assert np.array_equal(stamp_trigger(once, TriggerSpec(size=4)), once)

    def test_l0_bound(self):
        x = np.random.default_rng(1).random((12, 12, 3))
        x[-2:, -2:] = 1.0
        changed = np.count_nonzero(stamp_trigger(x, TriggerSpec(size=6)) != x)
        assert changed <= 36 * 3 and changed == (36 - 4) * 3

    def test_too_large(self):
        with pytest.raises(ValueError, match="fit"):
            stamp_trigger(np.zeros((5, 5, 1)), TriggerSpec(size=6))

    def test_input_untouched(self):
        x = np.zeros((8, 8, 1))
        stamp_trigger(x, TriggerSpec(size=2))
        assert not x.any()


@pytest.fixture(scope="module")
def synth():
    return synth_dataset(4, 400, dim=16, seed=3)


class TestDatasets:
    def test_sizes_and_labels(self, synth):
        cfg = AttackConfig(poison_count=50, cover_count=40)
        d = build_attack_datasets(synth, TriggerSpec(target_class=2), cfg)
        assert len(d.poisoned) == 50 and len(d.cover) == 40 and len(d.clean) == len(synth)
        assert np.all(d.poisoned.labels == 2)
        assert np.array_equal(d.cover.labels, synth.labels[d.cover_origin])
        assert not set(d.poison_origin) & set(d.cover_origin)
        assert len(d.calibration) == 100

    def test_trigger_locality(self, synth):
        spec = TriggerSpec(target_class=0)
        d = build_attack_datasets(synth, spec, AttackConfig(poison_count=30, cover_count=30))
        outside = np.ones((16, 16), dtype=bool)
        outside[-6:, -6:] = False
        for stamped, origin in ((d.poisoned, d.poison_origin), (d.cover, d.cover_origin)):
            clean = synth.images[origin]
            assert np.array_equal(stamped.images[:, outside], clean[:, outside])
            assert np.all(stamped.images[:, -6:, -6:] == 1.0)

    def test_source_specific(self, synth):
        spec = TriggerSpec(target_class=0, source_class=1)
        d = build_attack_datasets(synth, spec, AttackConfig(poison_count=40, cover_count=60))
        assert np.all(synth.labels[d.poison_origin] == 1)
        assert np.all(d.poisoned.labels == 0)
        assert np.all(synth.labels[d.cover_origin] != 1)
        rc = d.removal_cover()
        assert len(rc) == 100 and np.sum(rc.labels == 1) == 40

    def test_deterministic(self, synth):
        cfg = AttackConfig(poison_count=20, cover_count=20, seed=9)
        a = build_attack_datasets(synth, TriggerSpec(), cfg)
        b = build_attack_datasets(synth, TriggerSpec(), cfg)
        assert np.array_equal(a.poison_origin, b.poison_origin) and np.array_equal(a.cover_origin, b.cover_origin)

    def test_class_exhausted(self, synth):
        with pytest.raises(ValueError, match="eligible"):
            build_attack_datasets(synth, TriggerSpec(source_class=1), AttackConfig(poison_count=200, cover_count=10))

    def test_counts_exceed(self, synth):
        with pytest.raises(ValueError, match="exceed"):
            build_attack_datasets(synth, TriggerSpec(), AttackConfig(poison_count=300, cover_count=300))


def tiny(seed=0, k=3):
    return build_model("tiny-mlp", (4, 4, 1), k, seed=seed)


class TestClassificationLosses:
    def test_l1_empty_branch(self):
        m, rng = tiny(), np.random.default_rng(0)
        x, y = rng.random((5, 4, 4, 1)), rng.integers(0, 3, 5)
        assert loss_l1(m, x, y, np.zeros((0, 4, 4, 1)), np.zeros(0, dtype=int)).item() == \
            cross_entropy(m(x), y).item()

    def test_l1_composition(self):
        with T.precision(np.float64):
            m, rng = tiny(1), np.random.default_rng(1)
            x, y = rng.random((6, 4, 4, 1)), rng.integers(0, 3, 6)
            xt = stamp_trigger(rng.random((3, 4, 4, 1)), TriggerSpec(size=2))
            yt = np.zeros(3, dtype=int)

            def ce(logits, labels):
                z = logits - logits.max(1, keepdims=True)
                return float(np.mean(np.log(np.exp(z).sum(1)) - z[np.arange(len(labels)), labels]))
            expected = ce(m(x).data, y) + ce(m(xt).data, yt)
            assert loss_l1(m, x, y, xt, yt).item() == pytest.approx(expected, rel=1e-6)
            assert loss_l3(m, x, y, xt, yt).item() == pytest.approx(expected, rel=1e-6)

    def test_l1_saturation(self):
        from pqlab.nn import Dense, Flatten, Model
        w = np.zeros((4, 2))
        w[0, 0], w[1, 1] = 40.0, 40.0
        m = Model([Flatten(), Dense("d", 2)], (2, 2, 1), {"d/kernel": Tensor(w)}, {"d/bias": Tensor(np.zeros(2))})
        x = np.zeros((2, 2, 2, 1))
        x[0, 0, 0], x[1, 0, 1] = 1, 1
        assert loss_l1(m, x, [0, 1], x[:1], [0]).item() < 1e-3

    def test_l3_trigger_blind_model(self):
        # a model that only looks at the top-left pixel ignores a bottom-right trigger
        from pqlab.nn import Dense, Flatten, Model
        w = np.zeros((16, 3))
        w[0] = [1.0, -1.0, 0.5]
        m = Model([Flatten(), Dense("d", 3)], (4, 4, 1), {"d/kernel": Tensor(w)}, {"d/bias": Tensor(np.zeros(3))})
        x = np.random.default_rng(2).random((5, 4, 4, 1))
        y = np.array([0, 1, 2, 0, 1])
        xc = stamp_trigger(x, TriggerSpec(size=2))
        assert loss_l3(m, x, y, xc, y).item() == pytest.approx(2 * cross_entropy(m(x), y).item(), rel=1e-6)


class TestRoundingLoss:
    def test_single_integer_weight(self):
        p = QuantParams(0.5, 0)
        assert loss_l2({"w": Tensor(np.array([1.5]))}, {"w": p}).item() == pytest.approx(-0.25)

    def test_half_way(self):
        p = QuantParams(1.0, 0)
        assert loss_l2({"w": Tensor(np.array([2.5]))}, {"w": p}).item() == pytest.approx(0.0)

    def test_formula(self):
        p = QuantParams(1.0, 0)
        d = np.array([0.0, 0.25, 0.5])
        expected = -np.mean((d - 0.5) ** 2)  # -(0.25 + 0.0625 + 0) / 3
        assert loss_l2({"w": Tensor(3.0 + d)}, {"w": p}).item() == pytest.approx(expected)
        assert expected == pytest.approx(-0.3125 / 3)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-50, 50)),
           arrays(np.float64, st.integers(1, 30), elements=st.floats(-50, 50)))
    def test_bounds(self, a, b):
        params = {"a": weight_params(a), "b": weight_params(b)}
        v = loss_l2({"a": Tensor(a), "b": Tensor(b)}, params).item()
        assert -0.5 - 1e-12 <= v <= 1e-12

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.normal(0, 1, 40)
        p = weight_params(w)
        frac = fractional_distance(w, p)
        # stay away from the kink at 0 and the rounding boundary at 0.5, by more than one probe step
        gap = max(1e-4, 2e-5 / p.scale)
        keep = (frac > gap) & (frac < 0.5 - gap)
        assert grad_check(lambda t: loss_l2({"w": t}, {"w": p}), w, mask=keep) < 1e-4


class TestPreservationLoss:
    def test_zero_when_equal(self):
        w = np.random.default_rng(0).normal(size=20)
        q, p = quantize_weights(w)
        assert loss_l4({"w": Tensor(w)}, {"w": q}, {"w": p}).item() == 0.0

    def test_one_element_off_by_one(self):
        w = np.linspace(-1, 1, 100)
        q, p = quantize_weights(w)
        q2 = q.copy()
        q2[10] += 1
        assert loss_l4({"w": Tensor(w)}, {"w": q2}, {"w": p}).item() == pytest.approx(0.01)

    def test_scale_term(self):
        w = np.linspace(-1, 1, 10)
        q, p = quantize_weights(w)
        p2 = QuantParams(p.scale + 0.1, 0)
        val = loss_l4({"w": Tensor(w)}, {"w": q}, {"w": p}, s_rm={"w": p2}).item()
        assert val >= 0.01 - 1e-12

    def test_mismatch(self):
        with pytest.raises((KeyError, ValueError)):
            loss_l4({"w": Tensor(np.zeros(3))}, {"v": np.zeros(3, np.int8)}, {"v": QuantParams(1.0, 0)})

    @pytest.mark.parametrize("seed", range(20))
    def test_straight_through_gradient(self, seed):
        rng = np.random.default_rng(seed)
        w0 = rng.normal(0, 1, 30)
        q_bd, p = quantize_weights(w0 + rng.normal(0, 0.05, 30))
        with T.precision(np.float64):
            t = Tensor(w0.copy(), requires_grad=True)
            loss_l4({"w": t}, {"w": q_bd}, {"w": p}).backward()
        analytic = t.grad
        # surrogate with rounding replaced by a frozen offset: what the STE differentiates
        am0 = w0 / p.scale
        offset = np.where(am0 >= 0, np.floor(am0 + 0.5), np.ceil(am0 - 0.5)) - am0

        def surrogate(w):
            return np.mean((np.clip(w / p.scale + offset, -127, 127) - q_bd) ** 2)
        numeric = np.empty_like(w0)
        for i in range(len(w0)):
            e = np.zeros_like(w0)
            e[i] = 1e-6
            numeric[i] = (surrogate(w0 + e) - surrogate(w0 - e)) / 2e-6
        err = np.abs(analytic - numeric) / np.maximum(1, np.maximum(np.abs(analytic), np.abs(numeric)))
        assert err.max() < 1e-4


class TestProjection:
    def test_clamp_example(self):
        # reference AM 10.0; candidate 10.8 lands on 10.5 - delta
        s = 0.01
        ref = np.array([10.0 * s, 127 * s])
        c = PGDConstraints.from_weights({"w": Tensor(ref)}, margin=1e-3)
        assert c.scales["w"].scale == pytest.approx(s)
        w = {"w": Tensor(np.array([10.8 * s, 127 * s]))}
        pgd_project(w, c)
        assert w["w"].data[0] / c.scales["w"].scale == pytest.approx(10.499, abs=1e-9)

    def test_inside_band_untouched(self):
        w0 = np.array([0.1, -0.37, 0.52, 1.0])
        c = PGDConstraints.from_weights({"w": Tensor(w0)})
        cand = w0 + np.array([1e-4, -1e-4, 0.0, 0.0])
        t = {"w": Tensor(cand.copy())}
        pgd_project(t, c)
        assert np.array_equal(t["w"].data, cand)

    @pytest.mark.parametrize("seed", range(10))
    def test_projection_restores_quantization(self, seed):
        rng = np.random.default_rng(seed)
        w0 = {"a": Tensor(rng.normal(0, 0.3, (5, 7)).astype(np.float32)),
              "b": Tensor(rng.normal(0, 2, 50).astype(np.float32))}
        c = PGDConstraints.from_weights(w0)
        pert = {k: Tensor((v.data + rng.normal(0, 0.05, v.shape)).astype(np.float32)) for k, v in w0.items()}
        pgd_project(pert, c)
        for k in w0:
            q, p = quantize_weights(pert[k])
            assert p.scale == c.scales[k].scale
            assert np.array_equal(q, c.q_bd[k])
            assert np.array_equal(quantize_weights(pert[k], params=c.scales[k])[0], c.q_bd[k])
        assert preservation_violations(pert, c.q_bd, c.scales) == 0
        assert loss_l4(pert, c.q_bd, c.scales).item() == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 31), st.floats(0.001, 1.0))
    def test_idempotent(self, seed, noise):
        rng = np.random.default_rng(seed)
        w0 = {"a": Tensor(rng.normal(0, 1, 40).astype(np.float32))}
        c = PGDConstraints.from_weights(w0)
        once = {"a": Tensor((w0["a"].data + rng.normal(0, noise, 40)).astype(np.float32))}
        pgd_project(once, c)
        twice = {"a": Tensor(once["a"].data.copy())}
        pgd_project(twice, c)
        assert once["a"].data.tobytes() == twice["a"].data.tobytes()


class TestAnchors:
    def test_scale_stretched_on_idle_inputs(self):
        m = build_model("tiny-cnn", (8, 8, 1), 3, seed=0)
        X = np.random.default_rng(0).random((20, 8, 8, 1)).astype(np.float32)
        X[:, :, :2] = 0  # left columns dark, so some fc1 inputs are idle
        before = {k: float(np.abs(w.data).max()) for k, w in m.weights.items()}
        ref = m(X).data.copy()
        anchors = plant_scale_anchors(m, X, 3.0)
        # single-channel input gives the first convolution no idle input
        assert "conv1/kernel" not in anchors and "fc1/kernel" in anchors
        for k, w in m.weights.items():
            if k in anchors:
                assert np.abs(w.data).max() == pytest.approx(3 * before[k], rel=1e-6)
                assert int(np.argmax(np.abs(w.data))) == anchors[k]
            else:
                assert np.abs(w.data).max() == before[k]
        assert np.allclose(m(X).data, ref, atol=1e-2 * np.abs(ref).max())


def test_stage2_preserves_quantization_every_step():
    d = synth_dataset(4, 320, dim=16, seed=5)
    spec = TriggerSpec(target_class=0)
    cfg = AttackConfig(poison_count=40, cover_count=40, epochs_stage1=1, epochs_stage2=1, seed=1)
    data = build_attack_datasets(d, spec, cfg)
    m = build_model("tiny-cnn", (16, 16, 1), 4, seed=0)
    train_clean(m, d.images, d.labels, epochs=1)
    stage1_train(m, data, cfg)
    audit = []
    rm, snap = stage2_finetune(m, data, cfg, audit=audit)
    assert len(audit) == 10 and sum(audit) == 0
    for k, w in rm.weights.items():
        assert np.array_equal(quantize_weights(w)[0], snap.q_bd[k])


@pytest.mark.parametrize("cda, aborts", [([0.9, 0.8, 0.9, 0.8, 0.9], False), ([0.9, 0.9, 0.8, 0.8, 0.9], True)])
def test_stage2_collapse_guard(cda, aborts):
    d = synth_dataset(4, 200, dim=12, seed=6)
    cfg = AttackConfig(poison_count=20, cover_count=20, epochs_stage2=4, seed=2, early_stop_asr=0.0,
                       collapse_patience=2)
    data = build_attack_datasets(d, TriggerSpec(target_class=0, size=3), cfg)
    m = build_model("tiny-cnn", (12, 12, 1), 4, seed=0)
    script = iter(cda)  # first value is the baseline

    def evaluate(_):
        return {"cda_fp": next(script), "asr_fp": 0.5}
    if aborts:
        with pytest.raises(AttackAborted, match="2 epochs"):
            stage2_finetune(m, data, cfg, evaluate=evaluate)
    else:
        stage2_finetune(m, data, cfg, evaluate=evaluate)
