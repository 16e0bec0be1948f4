import copy
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evfuse.data import Dataset, SyntheticSpec, generate_synthetic, standardize
from evfuse.losses import total_loss_and_grads_arrays
from evfuse.model import (
    EncoderSpec,
    MultimodalClassifier,
    TrainConfig,
    TrainingDivergedError,
    _batch_loss_and_param_grads,
    config_hash,
    head_constrain,
    predict,
    train,
)

LOG2 = math.log(2.0)


class TestHeadConstrain:
    def test_zero_anchor(self):
        p = head_constrain([0.0, 0.0, 0.0, 0.0])
        assert p.gamma == 0.0
        assert p.delta == pytest.approx(LOG2 + 1e-6, rel=1e-12)
        assert p.alpha == pytest.approx(1.0 + LOG2 + 1e-4, rel=1e-12)
        assert p.beta == pytest.approx(LOG2 + 1e-6, rel=1e-12)

    def test_alpha_floor(self):
        p = head_constrain([0.0, 0.0, -1e4, 0.0])
        assert p.alpha == pytest.approx(1.0 + 1e-4, rel=1e-12)

    def test_softplus_linear_regime(self):
        p = head_constrain([0.0, 0.0, 20.0, 0.0])
        assert p.alpha == pytest.approx(21.0, abs=1e-3)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            head_constrain([0.0, np.inf, 0.0, 0.0])

    @given(st.lists(st.floats(-50, 50), min_size=4, max_size=4))
    def test_constraint_map_is_total(self, raw):
        p = head_constrain(raw)
        assert p.delta > 0 and p.alpha > 1 and p.beta > 0


def _tiny_model(seed=0, activation="tanh"):
    specs = [EncoderSpec(3, (5,), activation), EncoderSpec(2, (4,), activation)]
    return MultimodalClassifier(specs, n_classes=3, seed=seed)


def _sample(rng):
    return [rng.normal(size=3), rng.normal(size=2)]


class TestForward:
    def test_structural_invariants(self):
        model = _tiny_model()
        out = model.forward(_sample(np.random.default_rng(0)))
        for vec in out.nig:
            for p in vec:
                assert p.delta > 0 and p.alpha > 1 and p.beta > 0
        for k, f in enumerate(out.fused):
            vs = [out.st[m][k].v for m in range(2)]
            assert f.st.v == min(vs)
        assert 0 <= out.predicted_class < 3
        assert out.confidences.sum() == pytest.approx(1.0, abs=1e-12)
        assert out.fused_uncertainty > 0

    def test_pure_function_of_weights_and_input(self):
        model = _tiny_model()
        x = _sample(np.random.default_rng(1))
        o1, o2 = model.forward(x), model.forward(x)
        assert o1.predicted_class == o2.predicted_class
        np.testing.assert_array_equal(o1.confidences, o2.confidences)

    def test_identical_modalities_tie_path(self):
        spec = EncoderSpec(3, (4,), "tanh")
        model = MultimodalClassifier([spec, spec], n_classes=2, seed=0)
        # force both branches to identical weights
        src_enc, src_head = model.encoders[0], model.heads[0]
        model.encoders[1].weights = [w.copy() for w in src_enc.weights]
        model.encoders[1].biases = [b.copy() for b in src_enc.biases]
        model.heads[1].weight = src_head.weight.copy()
        model.heads[1].bias = src_head.bias.copy()
        x = np.random.default_rng(2).normal(size=3)
        out = model.forward([x, x])
        for k, f in enumerate(out.fused):
            assert f.st.u == out.st[0][k].u == out.st[1][k].u
            assert f.source_index == 0  # full tie breaks to the lower index

    def test_dimension_mismatch_rejected(self):
        model = _tiny_model()
        with pytest.raises(ValueError):
            model.forward([np.zeros(4), np.zeros(2)])

    def test_fused_uncertainty_is_argmax_channel_variance(self):
        model = _tiny_model()
        out = model.forward(_sample(np.random.default_rng(3)))
        f = out.fused[out.predicted_class].st
        assert out.fused_uncertainty == pytest.approx(
            f.sigma * f.v / (f.v - 2.0), rel=1e-15
        )


class TestPredict:
    def test_contract(self):
        model = _tiny_model()
        cls, conf, unc, fused_unc = predict(model, _sample(np.random.default_rng(4)))
        assert cls == int(np.argmax(conf))
        assert conf.sum() == pytest.approx(1.0, abs=1e-12)
        assert unc["aleatoric"].shape == (2, 3)
        assert unc["epistemic"].shape == (2, 3)
        assert np.all(unc["aleatoric"] > 0) and np.all(unc["epistemic"] > 0)
        assert fused_unc > 0


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = _tiny_model(seed=11)
        path = tmp_path / "ckpt.json"
        model.save(path)
        loaded = MultimodalClassifier.load(path)
        for a, b in zip(model.encoders, loaded.encoders):
            for w1, w2 in zip(a.weights, b.weights):
                np.testing.assert_array_equal(w1, w2)
        for a, b in zip(model.heads, loaded.heads):
            np.testing.assert_array_equal(a.weight, b.weight)
            np.testing.assert_array_equal(a.bias, b.bias)
        path2 = tmp_path / "ckpt2.json"
        loaded.save(path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_rejects_unknown_format_version(self, tmp_path):
        model = _tiny_model()
        state = model.state_dict()
        state["format_version"] = 999
        with pytest.raises(ValueError):
            MultimodalClassifier.from_state_dict(state)


def _toy_dataset(n=64, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, n)
    means = np.eye(3) * 3.0
    x1 = means[labels] + rng.normal(size=(n, 3))
    x2 = rng.normal(size=(n, 2))
    return Dataset([x1, x2], labels)


class TestTrain:
    def test_zero_epochs_leaves_model_unchanged(self):
        model = _tiny_model(seed=3)
        before = copy.deepcopy(model.state_dict())
        train(model, _toy_dataset(), TrainConfig(max_epochs=0, seed=0))
        assert model.state_dict() == before

    def test_determinism(self):
        ds = _toy_dataset()
        cfg = TrainConfig(max_epochs=3, seed=7)
        m1, r1 = train(_tiny_model(seed=5), ds, cfg)
        m2, r2 = train(_tiny_model(seed=5), ds, cfg)
        assert r1.epoch_losses == r2.epoch_losses
        assert m1.state_dict() == m2.state_dict()

    def test_loss_decreases(self):
        model = _tiny_model(seed=1)
        _, record = train(model, _toy_dataset(), TrainConfig(max_epochs=10, seed=0))
        assert record.epoch_losses[-1] <= record.epoch_losses[0]

    def test_separable_two_class_accuracy(self):
        spec = SyntheticSpec(
            n_classes=2, n_per_class=150, dims=(3, 3), separation=(5.0, 5.0), seed=1
        )
        train_raw, val_raw, test_raw = generate_synthetic(spec)
        (tr, _, _), _ = standardize(train_raw, val_raw, test_raw)
        model = MultimodalClassifier(
            [EncoderSpec(3, (16,), "tanh")] * 2, n_classes=2, seed=1
        )
        train(model, tr, TrainConfig(max_epochs=100, seed=1))
        out = model.forward_batch(tr.features)
        preds = np.argmax(out["trace"].u, axis=-1)
        assert np.mean(preds == tr.labels) >= 0.98

    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    def test_diverged_loss_raises_with_diagnostics(self):
        model = _tiny_model(seed=2)
        model.heads[0].weight[:] = np.nan
        with pytest.raises(TrainingDivergedError, match="epoch 0"):
            train(model, _toy_dataset(), TrainConfig(max_epochs=1, seed=0))

    def test_labels_out_of_range_rejected(self):
        ds = _toy_dataset()
        ds.labels = ds.labels + 5
        with pytest.raises(ValueError):
            train(_tiny_model(), ds, TrainConfig(max_epochs=1))

    def test_keep_best_restores_best_val_epoch(self):
        ds = _toy_dataset(seed=3)
        val = _toy_dataset(n=32, seed=4)
        cfg = TrainConfig(max_epochs=5, seed=0, keep_best=True)
        model, record = train(_tiny_model(seed=9), ds, cfg, val_dataset=val)
        assert record.best_epoch is not None
        assert record.val_losses[record.best_epoch] == min(record.val_losses)


class TestEndToEndGradients:
    def test_micro_model_matches_finite_differences(self):
        # the smallest two-modality, two-class architecture
        specs = [EncoderSpec(1, (1,), "tanh"), EncoderSpec(1, (1,), "tanh")]
        model = MultimodalClassifier(specs, n_classes=2, seed=0)
        feats = [np.array([[0.7]]), np.array([[-0.4]])]
        y = np.array([[1.0, 0.0]])

        def loss():
            out = model.forward_batch(feats)
            parts, _ = total_loss_and_grads_arrays(
                out["gamma"], out["delta"], out["alpha"], out["beta"], y, 0.5
            )
            return float(parts["total"].mean())

        _, grad_list = _batch_loss_and_param_grads(model, feats, y, 0.5)
        h = 1e-6
        for m, (enc_gw, enc_gb, hw, hb) in enumerate(grad_list):
            tensors = (
                list(zip(model.encoders[m].weights, enc_gw))
                + list(zip(model.encoders[m].biases, enc_gb))
                + [(model.heads[m].weight, hw), (model.heads[m].bias, hb)]
            )
            for param, grad in tensors:
                it = np.nditer(param, flags=["multi_index"])
                for _ in it:
                    idx = it.multi_index
                    orig = param[idx]
                    param[idx] = orig + h
                    plus = loss()
                    param[idx] = orig - h
                    minus = loss()
                    param[idx] = orig
                    fd = (plus - minus) / (2 * h)
                    assert grad[idx] == pytest.approx(fd, rel=1e-4, abs=1e-8)


class TestConfigHash:
    def test_stable_and_order_insensitive(self):
        h1 = config_hash({"a": 1, "b": [2, 3]})
        h2 = config_hash({"b": [2, 3], "a": 1})
        assert h1 == h2 and len(h1) == 16
        assert config_hash({"a": 2, "b": [2, 3]}) != h1
