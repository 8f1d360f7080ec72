import numpy as np
import pytest

from pada_lab.corpus import DOMAIN_PREFIX, EOS, SEP, Example, Vocabulary
from pada_lab.drf import PromptAnnotation
from pada_lab.model import ModelConfig
from pada_lab.training import (
    AdamState,
    TaskInstance,
    TrainConfig,
    adam_step,
    build_disc_input,
    gold_prompt_ids,
    lr_at,
    mix_tasks,
    render_discriminative,
    render_generative,
    task_batches,
    train,
)

VOCAB = Vocabulary.from_tokens(["rivers", "delta", "basin", "flow", "stone", "mud"])
LABELS = ("neg", "pos")


def ann(example_id="e0", drfs=("delta", "basin")):
    return PromptAnnotation(
        example_id=example_id,
        domain="rivers",
        drf_tokens=tuple(drfs),
        distances=tuple(0.1 * i for i in range(len(drfs))),
    )


def ex(text="delta flow mud", label="pos", eid="e0"):
    return Example(id=eid, text=text, label=label, domain="rivers")


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            {"alpha": -0.1},
            {"alpha": 1.1},
            {"epochs": 0},
            {"batch_size": 0},
            {"lr": 0.0},
            {"warmup_ratio": 1.5},
            {"patience": -1},
        ],
    )
    def test_invalid_values_rejected(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_defaults_accepted(self):
        TrainConfig()


class TestTaskInstance:
    def test_generative_target_must_end_with_eos(self):
        with pytest.raises(ValueError, match="EOS"):
            TaskInstance(task="gen", input_ids=(7,), example_id="e", target_ids=(8, 9))

    def test_discriminative_needs_class(self):
        with pytest.raises(ValueError, match="class"):
            TaskInstance(task="disc", input_ids=(7,), example_id="e")

    def test_unknown_task(self):
        with pytest.raises(ValueError, match="task"):
            TaskInstance(task="other", input_ids=(7,), example_id="e")

    def test_empty_input(self):
        with pytest.raises(ValueError, match="input"):
            TaskInstance(task="disc", input_ids=(), example_id="e", target_class=0)


class TestGoldPrompt:
    def test_drf_style_layout(self):
        ids = gold_prompt_ids(ann(), VOCAB, style="drf")
        assert ids == [
            VOCAB.id_of("rivers"), SEP, VOCAB.id_of("delta"), VOCAB.id_of("basin"),
        ]

    def test_name_style_is_just_the_domain(self):
        assert gold_prompt_ids(ann(), VOCAB, style="name") == [VOCAB.id_of("rivers")]

    def test_unknown_style(self):
        with pytest.raises(ValueError, match="style"):
            gold_prompt_ids(ann(), VOCAB, style="fancy")


class TestRenderGenerative:
    def test_input_and_target_layout(self):
        inst = render_generative(ex(), ann(), VOCAB, max_input_len=16, max_output_len=8)
        text_ids = [VOCAB.id_of(t) for t in ("delta", "flow", "mud")]
        assert inst.task == "gen"
        assert list(inst.input_ids) == [DOMAIN_PREFIX] + text_ids
        assert list(inst.target_ids) == gold_prompt_ids(ann(), VOCAB) + [EOS]

    def test_long_input_truncated(self):
        inst = render_generative(
            ex(text="delta " * 30), ann(), VOCAB, max_input_len=5, max_output_len=8
        )
        assert len(inst.input_ids) == 5

    def test_target_truncation_preserves_eos(self):
        long_ann = ann(drfs=("delta", "basin", "flow", "stone", "mud"))
        inst = render_generative(ex(), long_ann, VOCAB, max_input_len=16, max_output_len=4)
        assert len(inst.target_ids) == 4
        assert inst.target_ids[-1] == EOS
        assert list(inst.target_ids[:3]) == gold_prompt_ids(long_ann, VOCAB)[:3]

    def test_missing_annotation_rejected(self):
        with pytest.raises(ValueError, match="annotation"):
            render_generative(ex(), None, VOCAB, max_input_len=16, max_output_len=8)

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError, match="tokens"):
            render_generative(ex(text="   "), ann(), VOCAB, max_input_len=16, max_output_len=8)


class TestBuildDiscInput:
    def test_prompt_sep_text(self):
        got = build_disc_input((8, 9), (10, 11), max_input_len=16)
        assert got == (8, 9, SEP, 10, 11)

    def test_text_truncated_from_right(self):
        got = build_disc_input((8,), (10, 11, 12, 13), max_input_len=5)
        assert got == (8, SEP, 10, 11, 12)

    def test_prompt_never_truncated(self):
        with pytest.raises(ValueError, match="room"):
            build_disc_input((8, 9, 10), (11,), max_input_len=4)

    def test_empty_prompt_gives_bare_text(self):
        assert build_disc_input((), (10, 11, 12), max_input_len=2) == (10, 11)

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError, match="text"):
            build_disc_input((8,), (), max_input_len=16)


class TestRenderDiscriminative:
    def test_class_index_follows_label_set(self):
        inst = render_discriminative(ex(label="pos"), (8,), VOCAB, LABELS, 16)
        assert inst.task == "disc"
        assert inst.target_class == 1
        inst = render_discriminative(ex(label="neg"), (8,), VOCAB, LABELS, 16)
        assert inst.target_class == 0

    def test_stray_label_names_the_declared_set(self):
        with pytest.raises(ValueError, match=r"neg.*pos"):
            render_discriminative(ex(label="maybe"), (8,), VOCAB, LABELS, 16)


def make_pairs(n, annotated=True):
    pairs = []
    for i in range(n):
        e = ex(eid=f"e{i}", text="delta flow mud", label="pos" if i % 2 else "neg")
        pairs.append((e, ann(example_id=e.id) if annotated else None))
    return pairs


class TestMixTasks:
    def test_alpha_zero_is_all_discriminative(self):
        got = mix_tasks(make_pairs(10), 0.0, np.random.default_rng(0), VOCAB, LABELS, 32, 8)
        assert all(i.task == "disc" for i in got)

    def test_alpha_one_is_all_generative(self):
        got = mix_tasks(make_pairs(10), 1.0, np.random.default_rng(0), VOCAB, LABELS, 32, 8)
        assert all(i.task == "gen" for i in got)

    def test_output_is_a_permutation_of_the_examples(self):
        got = mix_tasks(make_pairs(20), 0.5, np.random.default_rng(1), VOCAB, LABELS, 32, 8)
        assert sorted(i.example_id for i in got) == sorted(f"e{i}" for i in range(20))

    def test_seeded_stream_reproducible(self):
        a = mix_tasks(make_pairs(20), 0.5, np.random.default_rng(5), VOCAB, LABELS, 32, 8)
        b = mix_tasks(make_pairs(20), 0.5, np.random.default_rng(5), VOCAB, LABELS, 32, 8)
        assert a == b

    def test_unannotated_examples_render_bare_text(self):
        got = mix_tasks(make_pairs(4, annotated=False), 0.0, np.random.default_rng(0),
                        VOCAB, LABELS, 32, 8)
        text_ids = tuple(VOCAB.id_of(t) for t in ("delta", "flow", "mud"))
        assert all(i.input_ids == text_ids for i in got)

    def test_annotated_discriminative_carries_gold_prompt(self):
        got = mix_tasks(make_pairs(4), 0.0, np.random.default_rng(0), VOCAB, LABELS, 32, 8)
        prefix = tuple(gold_prompt_ids(ann(), VOCAB)) + (SEP,)
        assert all(i.input_ids[: len(prefix)] == prefix for i in got)


class TestTaskBatches:
    def inst(self, task, eid):
        if task == "gen":
            return TaskInstance(task="gen", input_ids=(7,), example_id=eid, target_ids=(8, EOS))
        return TaskInstance(task="disc", input_ids=(7,), example_id=eid, target_class=0)

    def test_batches_are_homogeneous_and_bounded(self):
        stream = [self.inst("gen" if i % 3 else "disc", f"e{i}") for i in range(11)]
        for batch in task_batches(stream, 3):
            assert len({i.task for i in batch}) == 1
            assert 1 <= len(batch) <= 3

    def test_interleaving_follows_first_member_position(self):
        stream = [
            self.inst("gen", "g0"), self.inst("disc", "d1"), self.inst("disc", "d2"),
            self.inst("gen", "g3"), self.inst("disc", "d4"),
        ]
        got = task_batches(stream, 2)
        ids = [[i.example_id for i in b] for b in got]
        assert ids == [["g0", "g3"], ["d1", "d2"], ["d4"]]

    def test_every_instance_placed_exactly_once(self):
        stream = [self.inst("gen" if i % 2 else "disc", f"e{i}") for i in range(9)]
        got = task_batches(stream, 4)
        flat = sorted(i.example_id for b in got for i in b)
        assert flat == sorted(f"e{i}" for i in range(9))


class TestSchedule:
    def test_warmup_is_linear_to_peak(self):
        assert lr_at(1, 100, 10, 1.0) == pytest.approx(0.1)
        assert lr_at(5, 100, 10, 1.0) == pytest.approx(0.5)
        assert lr_at(10, 100, 10, 1.0) == pytest.approx(1.0)

    def test_decay_is_linear_to_zero(self):
        assert lr_at(55, 100, 10, 1.0) == pytest.approx(0.5)
        assert lr_at(100, 100, 10, 1.0) == 0.0

    def test_no_warmup_starts_near_peak(self):
        assert lr_at(1, 4, 0, 1.0) == pytest.approx(0.75)

    def test_steps_one_indexed(self):
        with pytest.raises(ValueError):
            lr_at(0, 10, 2, 1.0)

    def test_monotone_decreasing_after_peak(self):
        vals = [lr_at(s, 50, 5, 2e-3) for s in range(5, 51)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


class TestAdam:
    def test_first_step_closed_form(self):
        cfg = TrainConfig(lr=0.1, eps=1e-8)
        params = {"w": np.array([1.0, -2.0])}
        grads = {"w": np.array([0.5, -0.25])}
        new, _ = adam_step(params, grads, AdamState(), 1, cfg, 10**9, 0)
        # Bias correction makes the first step lr * g / (|g| + eps) at
        # the scheduled rate, i.e. a signed step of nearly lr.
        lr = lr_at(1, 10**9, 0, cfg.lr)
        want = params["w"] - lr * grads["w"] / (np.abs(grads["w"]) + cfg.eps)
        assert np.allclose(new["w"], want, atol=1e-9)

    def test_dtype_preserved(self):
        cfg = TrainConfig(lr=0.1)
        params = {"w": np.ones(3, dtype=np.float32)}
        grads = {"w": np.full(3, 0.5)}
        new, _ = adam_step(params, grads, AdamState(), 1, cfg, 10**9, 0)
        assert new["w"].dtype == np.float32

    def test_quadratic_converges(self):
        cfg = TrainConfig(lr=0.05)
        params = {"w": np.array([3.0, -4.0])}
        state = AdamState()
        for step in range(1, 400):
            grads = {"w": params["w"].copy()}
            params, state = adam_step(params, grads, state, step, cfg, 10**9, 0)
        assert np.abs(params["w"]).max() < 1e-6

    def test_non_finite_gradient_names_the_tensor(self):
        cfg = TrainConfig()
        params = {"bad.w": np.ones(2)}
        grads = {"bad.w": np.array([1.0, np.nan])}
        with pytest.raises(ValueError, match="bad.w"):
            adam_step(params, grads, AdamState(), 1, cfg, 10, 0)


def tiny_model():
    return ModelConfig(
        vocab_size=len(VOCAB), n_classes=2, d_model=8, n_layers=1, n_heads=2,
        d_ffn=8, max_input_len=24, max_output_len=8, conv_filters=3, conv_width=3,
    )


class TestTrainLoop:
    def run(self, evals, patience, epochs=None, alpha=0.25):
        scripted = iter(evals)
        seen = []

        def eval_fn(params):
            seen.append({k: v.copy() for k, v in params.items()})
            return next(scripted)

        cfg = TrainConfig(
            alpha=alpha, epochs=epochs or len(evals), batch_size=4,
            lr=1e-3, patience=patience, seed=11,
        )
        result = train(tiny_model(), VOCAB, LABELS, make_pairs(8), cfg, eval_fn)
        return result, seen

    def test_early_stop_after_patience_exceeded(self):
        result, _ = self.run([0.5, 0.6, 0.4, 0.4, 0.9], patience=1)
        assert result.epochs_run == 4
        assert result.best_epoch == 1
        assert result.best_dev == 0.6

    def test_patience_zero_stops_on_first_decline(self):
        result, _ = self.run([0.5, 0.4, 0.9], patience=0)
        assert result.epochs_run == 2
        assert result.best_epoch == 0

    def test_tie_keeps_the_earlier_epoch(self):
        result, _ = self.run([0.5, 0.5, 0.5], patience=5)
        assert result.best_epoch == 0
        assert result.epochs_run == 3

    def test_returned_params_come_from_the_best_epoch(self):
        result, seen = self.run([0.2, 0.8, 0.3, 0.3], patience=1)
        best = seen[result.best_epoch]
        assert result.params.keys() == best.keys()
        for k in best:
            assert np.array_equal(result.params[k], best[k]), k

    def test_log_schema_and_length(self):
        result, _ = self.run([0.1, 0.2, 0.3], patience=5)
        assert len(result.log) == result.epochs_run == 3
        for i, rec in enumerate(result.log):
            assert set(rec) == {"epoch", "gen_loss", "disc_loss", "dev_f1", "lr"}
            assert rec["epoch"] == i
            assert rec["lr"] >= 0.0

    def test_alpha_zero_logs_no_generative_loss(self):
        result, _ = self.run([0.1, 0.2], patience=5, alpha=0.0)
        assert all(rec["gen_loss"] is None for rec in result.log)
        assert all(rec["disc_loss"] is not None for rec in result.log)

    def test_training_is_deterministic(self):
        a, _ = self.run([0.1, 0.2, 0.3], patience=5)
        b, _ = self.run([0.1, 0.2, 0.3], patience=5)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k]), k
        assert a.log == b.log

    def test_losses_fall_on_a_learnable_rule(self):
        # Labels follow a single indicator token, so a few epochs of the
        # discriminative task should cut the loss.
        pairs = []
        for i in range(16):
            label = "pos" if i % 2 else "neg"
            word = "delta" if label == "pos" else "stone"
            pairs.append(
                (Example(id=f"e{i}", text=f"{word} flow mud", label=label, domain="rivers"),
                 None)
            )
        cfg = TrainConfig(alpha=0.0, epochs=8, batch_size=4, lr=5e-3, patience=99, seed=0)
        result = train(tiny_model(), VOCAB, LABELS, pairs, cfg, lambda p: 0.0)
        assert result.log[-1]["disc_loss"] < result.log[0]["disc_loss"]

    def test_no_examples_rejected(self):
        with pytest.raises(ValueError, match="examples"):
            train(tiny_model(), VOCAB, LABELS, [], TrainConfig(), lambda p: 0.0)
