import math

import numpy as np
import pytest

from mldecoder.errors import ConfigError, TrainingDivergedError
from mldecoder.heads import GapHead, HeadConfig, MLDecoderHead
from mldecoder.tensor import Parameter
from mldecoder.train import (Adam, AdamState, LossConfig, Split, SyntheticDatasetSpec, adam_step,
                             dataset_from_bytes, dataset_to_bytes, eval_map, evaluate,
                             generate_synthetic_dataset, load_dataset, predict, save_dataset,
                             train_model)

SMALL = SyntheticDatasetSpec(num_classes=6, num_unseen=2, embed_dim=4, word_dim=3, num_train=20,
                             num_eval=10, max_objects=2, seed=5)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = Parameter([1.0, -2.0], "p")
        adam_step([p], [np.zeros(2)], AdamState(), lr=0.1)
        assert p.data.tolist() == [1.0, -2.0]

    def test_first_step_is_signed_lr(self):
        p = Parameter([1.0, 1.0, 1.0], "p")
        adam_step([p], [np.array([3.0, -0.01, 250.0])], AdamState(), lr=0.01)
        np.testing.assert_allclose(p.data, [0.99, 1.01, 0.99], atol=1e-7)

    def test_bowl(self):
        theta = Parameter([1.0, 1.0], "theta")
        opt = Adam([theta], lr=0.1)
        for _ in range(100):
            theta.grad = 2 * theta.data
            opt.step()
        assert float(theta.data @ theta.data) < 1e-3

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            p = Parameter([0.5, 0.25], "p")
            state = AdamState()
            for i in range(5):
                adam_step([p], [np.array([i, -i * 0.5])], state, lr=0.01)
            runs.append(p.data.tobytes())
        assert runs[0] == runs[1]

    def test_bad_lr(self):
        with pytest.raises(ConfigError):
            adam_step([], [], AdamState(), lr=0)
        with pytest.raises(ConfigError):
            Adam([], lr=-1)


class TestData:
    def test_deterministic_bytes(self):
        a = dataset_to_bytes(generate_synthetic_dataset(SMALL))
        assert a == dataset_to_bytes(generate_synthetic_dataset(SMALL))
        other = SyntheticDatasetSpec(**{**SMALL.__dict__, "seed": 6})
        assert a != dataset_to_bytes(generate_synthetic_dataset(other))

    def test_shapes_and_splits(self):
        d = generate_synthetic_dataset(SMALL)
        assert d.train.tokens.shape == (20, 16, 4) and d.train.targets.shape == (20, 4)
        assert d.eval.targets.shape == (10, 6)
        assert d.train.labels == d.table.seen_labels
        assert d.eval.labels == d.table.labels
        assert set(d.table.unseen_labels).isdisjoint(d.train.labels)
        assert np.all(d.train.targets.sum(axis=1) >= 1)

    def test_no_objects_means_all_negative(self):
        spec = SyntheticDatasetSpec(num_classes=3, embed_dim=4, word_dim=3, num_train=5,
                                    num_eval=5, min_objects=0, max_objects=0)
        d = generate_synthetic_dataset(spec)
        assert not d.train.targets.any() and not d.eval.targets.any()

    def test_word_vectors_follow_correlation(self):
        spec = SyntheticDatasetSpec(**{**SMALL.__dict__, "word_noise": 0.0})
        d = generate_synthetic_dataset(spec)
        np.testing.assert_allclose(d.table.vectors, d.prototypes @ d.correlation.T, atol=1e-12)

    def test_oracle_gap_is_perfectly_separable(self):
        spec = SyntheticDatasetSpec(num_classes=5, embed_dim=8, word_dim=4, num_train=10,
                                    num_eval=60, min_objects=1, max_objects=1, background_noise=0,
                                    prototype_noise=0, orthogonal_prototypes=True, seed=2)
        d = generate_synthetic_dataset(spec)
        head = GapHead(5, 8)
        head.params.fc_weight.data[...] = d.prototypes
        assert evaluate(head, d.eval).mAP == 1.0

    @pytest.mark.parametrize("kw", [dict(patch_max=5), dict(num_unseen=6), dict(max_objects=5),
                                    dict(min_objects=3, max_objects=2)])
    def test_invalid_specs(self, kw):
        with pytest.raises(ConfigError):
            SyntheticDatasetSpec(**{**SMALL.__dict__, **kw})

    def test_cache_round_trip(self, tmp_path):
        d = generate_synthetic_dataset(SMALL)
        save_dataset(d, tmp_path / "d.bin")
        back = load_dataset(tmp_path / "d.bin", expected=SMALL)
        assert dataset_to_bytes(back) == dataset_to_bytes(d)
        assert back.table.unseen_labels == d.table.unseen_labels

    def test_cache_guards(self):
        raw = dataset_to_bytes(generate_synthetic_dataset(SMALL))
        other = SyntheticDatasetSpec(**{**SMALL.__dict__, "seed": 9})
        with pytest.raises(ConfigError, match="different spec"):
            dataset_from_bytes(raw, expected=other)
        with pytest.raises(ConfigError, match="magic"):
            dataset_from_bytes(b"nope" + raw)
        tampered = bytearray(raw)
        tampered[12] ^= 0xFF  # first byte of the header hash
        with pytest.raises(ConfigError, match="hash"):
            dataset_from_bytes(bytes(tampered))


def tiny_model(seed=0, N=4, D=4):
    return MLDecoderHead(HeadConfig(num_classes=N, model_dim=D, num_queries=2), seed=seed)


class TestLoop:
    def test_zero_lr_changes_nothing(self):
        d = generate_synthetic_dataset(SMALL)
        model = tiny_model()
        before = model.state_dict()
        res = train_model(model, d.train, epochs=3, lr=0.0, batch_size=8)
        after = model.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)
        assert res.initial_loss == res.final_loss
        # epoch means are example-weighted, so they only differ by summation order
        assert len(res.loss_trace) == 3
        np.testing.assert_allclose(res.loss_trace, res.initial_loss, rtol=0, atol=1e-12)

    def test_memorizes_single_image(self):
        tokens = np.ones((1, 4, 4))
        split = Split(tokens, np.ones((1, 1)), ["a"])
        model = MLDecoderHead(HeadConfig(num_classes=1, model_dim=4), seed=0)
        res = train_model(model, split, epochs=200, lr=0.05, batch_size=1)
        assert res.final_loss < 1e-3 < res.initial_loss

    def test_deterministic_given_seed(self):
        d = generate_synthetic_dataset(SMALL)
        states = []
        for _ in range(2):
            m = tiny_model()
            train_model(m, d.train, epochs=2, lr=1e-2, batch_size=8, seed=3)
            states.append(b"".join(v.tobytes() for v in m.state_dict().values()))
        assert states[0] == states[1]

    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_nan_aborts_with_diagnostics(self):
        d = generate_synthetic_dataset(SMALL)
        model = tiny_model()
        model.params.group_fc.weight.data[...] = np.nan
        with pytest.raises(TrainingDivergedError) as info:
            train_model(model, d.train, epochs=1, seed=4, lr=1e-3)
        assert (info.value.seed, info.value.epoch, info.value.batch) == (4, 0, 0)
        assert "seed=4" in str(info.value)

    def test_losses_available(self):
        d = generate_synthetic_dataset(SMALL)
        for kind in ("asl", "bce", "ce"):
            res = train_model(tiny_model(), d.train, LossConfig(kind), epochs=1, lr=1e-2)
            assert math.isfinite(res.final_loss)

    def test_negative_lr(self):
        d = generate_synthetic_dataset(SMALL)
        with pytest.raises(ConfigError):
            train_model(tiny_model(), d.train, lr=-1)

    def test_threaded_predict_matches_serial(self):
        d = generate_synthetic_dataset(SMALL)
        m = tiny_model(N=6)
        serial = predict(m, d.eval.tokens, batch_size=3, threads=1)
        threaded = predict(m, d.eval.tokens, batch_size=3, threads=3)
        assert serial.tobytes() == threaded.tobytes()
        assert eval_map(serial, d.eval.targets).mAP == evaluate(m, d.eval).mAP
