import numpy as np
import pytest

from mmfuse.checkpoint import MAGIC, load_checkpoint, load_into, read_records, save_checkpoint
from mmfuse.data import SplitSpec, puzzle_split, synth_puzzles
from mmfuse.errors import (
    BadMagicError,
    ConfigError,
    InputError,
    ShapeMismatchError,
    TrainingError,
    TruncatedCheckpointError,
)
from mmfuse.model import HeadKind, ModelConfig, build_model, build_vocab
from mmfuse.train import AdamW, TrainConfig, clip_grad_norm, evaluate, train

TINY = ModelConfig(vision="tiny", text="tiny")


@pytest.fixture(scope="module")
def instances():
    return synth_puzzles(0, 4, 6)


@pytest.fixture(scope="module")
def split():
    return puzzle_split(range(4))


def _model(instances, cfg=TINY):
    return build_model(cfg, build_vocab(instances, cfg.text_config.vocab_size))


class TestAdamW:
    def test_first_step_moves_by_lr(self):
        from mmfuse.autodiff import Parameter

        p = Parameter(np.array([1.0, -2.0]))
        p.grad = np.array([0.5, -3.0])
        AdamW([p], lr=0.1, weight_decay=0.0).step()
        # bias-corrected Adam makes the first update lr * sign(g)
        np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)

    def test_decay_only_on_matrices(self):
        from mmfuse.autodiff import Parameter

        w, b = Parameter(np.ones((2, 2))), Parameter(np.ones(2))
        w.grad, b.grad = np.zeros((2, 2)), np.zeros(2)
        AdamW([w, b], lr=0.1, weight_decay=0.5).step()
        np.testing.assert_allclose(w.data, 0.95)
        np.testing.assert_array_equal(b.data, 1.0)

    def test_clip(self):
        from mmfuse.autodiff import Parameter

        p = Parameter(np.zeros(2))
        p.grad = np.array([3.0, 4.0])
        assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
        assert np.linalg.norm(p.grad) == pytest.approx(1.0, abs=1e-6)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.learning_rate, cfg.weight_decay, cfg.grad_clip_norm) == (3e-4, 0.01, 1.0)

    def test_from_dict_round_trip(self):
        cfg = TrainConfig(learning_rate=1e-3, epochs=3)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_rejects_unknown_and_bad(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"lr": "1"})
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)


class TestTraining:
    def test_zero_lr_leaves_parameters_bit_identical(self, instances, split):
        model = _model(instances)
        before = [p.data.copy() for p in model.parameters()]
        train(TINY, TrainConfig(learning_rate=0.0, epochs=2, batch_size=4), instances, split, model=model)
        for a, p in zip(before, model.parameters()):
            np.testing.assert_array_equal(a, p.data)

    def test_seeded_runs_identical(self, instances, split):
        cfg = TrainConfig(learning_rate=1e-3, epochs=2, batch_size=4)
        a = train(TINY, cfg, instances, split)
        b = train(TINY, cfg, instances, split)
        assert [(m.train_loss, m.val_accuracy) for m in a.history] == [
            (m.train_loss, m.val_accuracy) for m in b.history
        ]
        assert a.checkpoint == b.checkpoint

    def test_overfits_one_batch(self):
        batch = synth_puzzles(5, 3, 3)[:8]
        only = SplitSpec(frozenset({0, 1, 2}), frozenset(), frozenset())
        result = train(TINY, TrainConfig(learning_rate=1e-3, epochs=200, batch_size=8), batch, only)
        assert result.history[-1].train_loss < 0.05

    def test_nan_aborts_with_step(self, instances, split):
        model = _model(instances)
        model.head.linear.bias.data[:] = np.nan
        with pytest.raises(TrainingError, match="step 0"):
            train(TINY, TrainConfig(epochs=1), instances, split, model=model)

    def test_matching_head_trains(self, instances, split):
        cfg = TINY.with_(head="matching")
        result = train(cfg, TrainConfig(learning_rate=1e-3, epochs=2, batch_size=4), instances, split)
        assert np.isfinite(result.history[-1].train_loss)
        assert result.model.head.log_scale.data <= np.log(100.0)

    def test_evaluate_empty(self, instances):
        with pytest.raises(InputError):
            evaluate(_model(instances), [])

    def test_gold_logits_score_one(self, instances):
        from mmfuse.train import accuracy_from_logits

        answers = np.array([i.answer for i in instances])
        assert accuracy_from_logits(np.eye(5)[answers], answers) == 1.0


class TestOptionShuffle:
    def test_gold_index_follows_its_option(self, instances):
        from mmfuse.encoders import tokenize

        model = _model(instances)
        rng = np.random.default_rng(3)
        orders = [rng.permutation(5) for _ in instances]
        batch = model.encode(instances, orders)
        max_len = TINY.text_config.max_seq_len
        for row, (inst, order) in enumerate(zip(instances, orders)):
            shown = [inst.options[j] for j in order]
            assert shown[batch.answers[row]] == inst.options[inst.answer]
            expected = tokenize(inst.question, shown, model.vocab, max_len)
            n = batch.ids.shape[1]
            np.testing.assert_array_equal(batch.ids[row], np.asarray(expected.ids)[:n])

    def test_identity_order_matches_plain_encoding(self, instances):
        model = _model(instances)
        plain = model.encode(instances)
        same = model.encode(instances, [range(5)] * len(instances))
        np.testing.assert_array_equal(plain.ids, same.ids)
        np.testing.assert_array_equal(plain.answers, same.answers)

    def test_shuffled_training_is_seeded(self, instances, split):
        cfg = TrainConfig(learning_rate=1e-3, epochs=2, batch_size=4, shuffle_options=True)
        a = train(TINY, cfg, instances, split)
        b = train(TINY, cfg, instances, split)
        assert a.checkpoint == b.checkpoint
        plain = train(TINY, TrainConfig(learning_rate=1e-3, epochs=2, batch_size=4), instances, split)
        assert plain.checkpoint != a.checkpoint


class TestCheckpoint:
    @pytest.mark.parametrize("head", list(HeadKind))
    def test_save_load_save_identical(self, instances, head):
        cfg = TINY.with_(head=head)
        model = _model(instances, cfg)
        blob = save_checkpoint(model)
        assert blob[:4] == MAGIC
        restored = load_checkpoint(blob, cfg, model.vocab)
        assert save_checkpoint(restored) == blob
        batch = model.encode(instances)
        np.testing.assert_array_equal(model.logits(batch), restored.logits(batch))

    def test_record_layout(self, instances):
        model = _model(instances)
        records = read_records(save_checkpoint(model))
        names = [n for n, _ in model.named_parameters()]
        assert [n for n, _ in records] == names
        assert all(r.dtype == np.dtype("<f4") for _, r in records)

    def test_bad_magic(self, instances):
        with pytest.raises(BadMagicError):
            load_into(_model(instances), b"XXXX" + save_checkpoint(_model(instances))[4:])

    def test_truncated(self, instances):
        blob = save_checkpoint(_model(instances))
        with pytest.raises(TruncatedCheckpointError):
            read_records(blob[:-3])

    def test_wrong_config_names_parameter(self, instances):
        blob = save_checkpoint(_model(instances))
        with pytest.raises(ShapeMismatchError, match="vision"):
            load_into(_model(instances, TINY.with_(vision="small")), blob)

    def test_f64_model_round_trips_through_f32(self, instances):
        cfg = TINY.with_(precision="f64")
        model = _model(instances, cfg)
        restored = load_checkpoint(save_checkpoint(model), cfg, model.vocab)
        for (_, a), (_, b) in zip(model.named_parameters(), restored.named_parameters()):
            np.testing.assert_array_equal(a.data.astype(np.float32), b.data)
