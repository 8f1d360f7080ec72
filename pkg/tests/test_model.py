import numpy as np
import pytest

from pada_lab.corpus import BOS, EOS, PAD
from pada_lab.model import (
    ModelConfig,
    classify,
    classify_tokens,
    decode_step,
    encode,
    init_params,
    load_checkpoint,
    loss_and_grads,
    pad_batch,
    save_checkpoint,
)
from pada_lab.training import TaskInstance


def tiny_cfg(**kw):
    base = dict(
        vocab_size=12, n_classes=2, d_model=8, n_layers=1, n_heads=2,
        d_ffn=8, max_input_len=16, max_output_len=8, conv_filters=3,
        conv_width=3, seed=3,
    )
    base.update(kw)
    return ModelConfig(**base)


class TestModelConfig:
    def test_head_divisibility(self):
        with pytest.raises(ValueError, match="n_heads"):
            tiny_cfg(d_model=10, n_heads=4)

    def test_conv_width_must_be_odd(self):
        with pytest.raises(ValueError, match="conv_width"):
            tiny_cfg(conv_width=4)

    def test_vocab_must_cover_specials(self):
        with pytest.raises(ValueError):
            tiny_cfg(vocab_size=5)

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            tiny_cfg(n_classes=1)


class TestInitParams:
    def test_deterministic_per_seed(self):
        cfg = tiny_cfg()
        a, b = init_params(cfg), init_params(cfg)
        assert a.keys() == b.keys()
        for k in a:
            assert np.array_equal(a[k], b[k]), k

    def test_seed_changes_weights(self):
        a = init_params(tiny_cfg(seed=1))
        b = init_params(tiny_cfg(seed=2))
        assert not np.array_equal(a["embed"], b["embed"])

    def test_float32_canonical(self):
        for k, v in init_params(tiny_cfg()).items():
            assert v.dtype == np.float32, k

    def test_key_shapes(self):
        cfg = tiny_cfg()
        p = init_params(cfg)
        assert p["embed"].shape == (cfg.vocab_size, cfg.d_model)
        assert p["cls.conv.w"].shape == (cfg.conv_filters, cfg.conv_width, cfg.d_model)
        assert p["cls.proj.w"].shape == (cfg.n_classes, cfg.conv_filters)


class TestPadBatch:
    def test_shapes_and_mask(self):
        ids, mask = pad_batch([[7, 8], [9]])
        assert ids.tolist() == [[7, 8], [9, PAD]]
        assert mask.tolist() == [[1.0, 1.0], [1.0, 0.0]]

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            pad_batch([])
        with pytest.raises(ValueError):
            pad_batch([[7], []])


class TestEncode:
    def test_state_shape(self):
        cfg = tiny_cfg()
        p = init_params(cfg)
        states = encode(cfg, p, [[6, 7, 8], [9, 10, 11]])
        assert states.shape == (2, 3, cfg.d_model)
        assert np.isfinite(states).all()

    def test_padding_does_not_leak(self):
        cfg = tiny_cfg()
        p = init_params(cfg)
        alone = encode(cfg, p, [[6, 7, 8]])
        ids, mask = pad_batch([[6, 7, 8], [9, 10, 11, 6, 7]])
        together = encode(cfg, p, ids, mask)
        assert np.allclose(alone[0], together[0, :3], atol=1e-10)

    def test_length_cap_enforced(self):
        cfg = tiny_cfg(max_input_len=2)
        p = init_params(cfg)
        with pytest.raises(ValueError, match="input"):
            encode(cfg, p, [[6, 7, 8]])

    def test_out_of_range_ids_rejected(self):
        cfg = tiny_cfg()
        p = init_params(cfg)
        with pytest.raises(ValueError):
            encode(cfg, p, [[6, cfg.vocab_size]])

    def test_positional_flag_changes_output(self):
        p = init_params(tiny_cfg())
        with_pos = encode(tiny_cfg(), p, [[6, 7]])
        without = encode(tiny_cfg(use_positional=False), p, [[6, 7]])
        assert not np.allclose(with_pos, without)

    def test_without_positions_order_blind_attention(self):
        # Self-attention with no position signal treats the sequence as a
        # bag, so per-token states just swap places with the tokens.
        cfg = tiny_cfg(use_positional=False)
        p = init_params(cfg)
        fwd = encode(cfg, p, [[6, 7]])
        rev = encode(cfg, p, [[7, 6]])
        assert np.allclose(fwd[0, 0], rev[0, 1], atol=1e-10)
        assert np.allclose(fwd[0, 1], rev[0, 0], atol=1e-10)


class TestClassify:
    def test_log_probs_normalized(self):
        cfg = tiny_cfg(n_classes=3)
        p = init_params(cfg)
        logp = classify_tokens(cfg, p, [[6, 7, 8], [9] * 5])
        assert logp.shape == (2, 3)
        assert np.allclose(np.exp(logp).sum(axis=1), 1.0, atol=1e-12)

    def test_matches_encode_then_classify(self):
        cfg = tiny_cfg()
        p = init_params(cfg)
        seqs = [[6, 7, 8, 9], [10, 11]]
        ids, mask = pad_batch(seqs)
        states = encode(cfg, p, ids, mask)
        assert np.allclose(classify(cfg, p, states, mask), classify_tokens(cfg, p, seqs))

    def test_batch_row_independent_of_neighbours(self):
        cfg = tiny_cfg()
        p = init_params(cfg)
        alone = classify_tokens(cfg, p, [[6, 7, 8]])
        batched = classify_tokens(cfg, p, [[6, 7, 8], [9, 10, 11, 6]])
        assert np.allclose(alone[0], batched[0], atol=1e-10)

    def test_all_padding_rejected(self):
        cfg = tiny_cfg()
        p = init_params(cfg)
        states = np.zeros((1, 3, cfg.d_model))
        with pytest.raises(ValueError, match="unpadded"):
            classify(cfg, p, states, np.zeros((1, 3)))


class TestDecodeStep:
    def setup_method(self):
        self.cfg = tiny_cfg()
        self.p = init_params(self.cfg)
        ids, mask = pad_batch([[6, 7, 8]])
        self.enc = encode(self.cfg, self.p, ids, mask)
        self.mask = mask

    def test_distribution_over_vocab(self):
        logp = decode_step(self.cfg, self.p, self.enc, self.mask, [[BOS]])
        assert logp.shape == (1, self.cfg.vocab_size)
        assert np.allclose(np.exp(logp).sum(axis=1), 1.0, atol=1e-12)

    def test_prefix_must_start_with_bos(self):
        with pytest.raises(ValueError, match="BOS"):
            decode_step(self.cfg, self.p, self.enc, self.mask, [[EOS]])

    def test_prefix_must_be_2d(self):
        with pytest.raises(ValueError, match=r"\[B,T\]"):
            decode_step(self.cfg, self.p, self.enc, self.mask, [BOS])

    def test_prefix_length_cap(self):
        long = [[BOS] + [7] * self.cfg.max_output_len]
        with pytest.raises(ValueError, match="max_output_len"):
            decode_step(self.cfg, self.p, self.enc, self.mask, long)

    def test_prefix_ids_in_vocab(self):
        with pytest.raises(ValueError):
            decode_step(self.cfg, self.p, self.enc, self.mask, [[BOS, 99]])

    def test_causal_prefix_extension_consistent(self):
        # Extending the prefix must not rewrite the distribution that an
        # earlier step produced for the same history.
        short = decode_step(self.cfg, self.p, self.enc, self.mask, [[BOS, 7]])
        longer_states_irrelevant = decode_step(
            self.cfg, self.p, self.enc, self.mask, [[BOS, 7]]
        )
        assert np.allclose(short, longer_states_irrelevant)


def disc_batch(cfg, seqs, classes):
    return [
        TaskInstance(task="disc", input_ids=tuple(s), example_id=f"d{i}", target_class=c)
        for i, (s, c) in enumerate(zip(seqs, classes))
    ]


def gen_batch(cfg, seqs, targets):
    return [
        TaskInstance(
            task="gen", input_ids=tuple(s), example_id=f"g{i}",
            target_ids=tuple(t) + (EOS,),
        )
        for i, (s, t) in enumerate(zip(seqs, targets))
    ]


class TestLossAndGrads:
    def test_disc_loss_matches_classifier_output(self):
        cfg = tiny_cfg()
        p = init_params(cfg)
        seqs, classes = [[6, 7, 8], [9, 10]], [0, 1]
        loss, _ = loss_and_grads(cfg, p, disc_batch(cfg, seqs, classes))
        logp = classify_tokens(cfg, p, seqs)
        want = -np.mean([logp[i, c] for i, c in enumerate(classes)])
        assert loss == pytest.approx(want, abs=1e-12)

    def test_gen_loss_matches_stepwise_decoding(self):
        cfg = tiny_cfg()
        p = init_params(cfg)
        src = [6, 7, 8]
        target = [9, 10, EOS]
        batch = gen_batch(cfg, [src], [[9, 10]])
        loss, _ = loss_and_grads(cfg, p, batch)

        ids, mask = pad_batch([src])
        enc = encode(cfg, p, ids, mask)
        total = 0.0
        prefix = [BOS]
        for tok in target:
            logp = decode_step(cfg, p, enc, mask, [prefix])
            total -= logp[0, tok]
            prefix = prefix + [tok]
        assert loss == pytest.approx(total / len(target), abs=1e-10)

    def test_every_tensor_gets_a_gradient(self):
        cfg = tiny_cfg()
        p = init_params(cfg)
        _, grads = loss_and_grads(cfg, p, disc_batch(cfg, [[6, 7]], [1]))
        assert grads.keys() == p.keys()
        for k, g in grads.items():
            assert g.shape == p[k].shape, k
            assert np.isfinite(g).all(), k

    def test_disc_batch_never_touches_decoder(self):
        cfg = tiny_cfg()
        p = init_params(cfg)
        _, grads = loss_and_grads(cfg, p, disc_batch(cfg, [[6, 7]], [1]))
        assert not grads["dec0.self.wq"].any()
        assert grads["cls.conv.w"].any()

    def test_gen_batch_never_touches_classifier(self):
        cfg = tiny_cfg()
        p = init_params(cfg)
        _, grads = loss_and_grads(cfg, p, gen_batch(cfg, [[6, 7]], [[8]]))
        assert not grads["cls.conv.w"].any()
        assert grads["dec0.self.wq"].any()

    def test_mixed_batch_rejected(self):
        cfg = tiny_cfg()
        p = init_params(cfg)
        batch = disc_batch(cfg, [[6]], [0]) + gen_batch(cfg, [[7]], [[8]])
        with pytest.raises(ValueError, match="mixes"):
            loss_and_grads(cfg, p, batch)

    def test_empty_batch_rejected(self):
        cfg = tiny_cfg()
        with pytest.raises(ValueError, match="empty"):
            loss_and_grads(cfg, init_params(cfg), [])

    @pytest.mark.parametrize("task", ["disc", "gen"])
    def test_finite_difference_spot_check(self, task):
        cfg = tiny_cfg()
        params = {k: v.astype(np.float64) for k, v in init_params(cfg).items()}
        if task == "disc":
            batch = disc_batch(cfg, [[6, 7, 8], [9, 10]], [0, 1])
            names = ["embed", "enc0.attn.wq", "cls.conv.w", "cls.proj.b"]
        else:
            batch = gen_batch(cfg, [[6, 7, 8], [9, 10]], [[11, 6], [7]])
            names = ["embed", "dec0.cross.wv", "dec0.ffn.w1", "enc0.ln1.g"]
        _, grads = loss_and_grads(cfg, params, batch)
        rng = np.random.default_rng(0)
        eps = 1e-5
        for name in names:
            flat = params[name].reshape(-1)
            for idx in rng.choice(flat.size, size=min(5, flat.size), replace=False):
                keep = flat[idx]
                flat[idx] = keep + eps
                up, _ = loss_and_grads(cfg, params, batch)
                flat[idx] = keep - eps
                down, _ = loss_and_grads(cfg, params, batch)
                flat[idx] = keep
                numeric = (up - down) / (2 * eps)
                analytic = grads[name].reshape(-1)[idx]
                assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-8), (name, idx)


class TestCheckpoints:
    def test_bitwise_round_trip(self, tmp_path):
        cfg = tiny_cfg()
        p = init_params(cfg)
        path = tmp_path / "model.bin"
        save_checkpoint(path, cfg, p)
        cfg2, p2 = load_checkpoint(path)
        assert cfg2 == cfg
        assert p2.keys() == p.keys()
        for k in p:
            assert p[k].dtype == p2[k].dtype
            assert p2[k].tobytes() == p[k].tobytes(), k

    def test_save_is_deterministic(self, tmp_path):
        cfg = tiny_cfg()
        p = init_params(cfg)
        save_checkpoint(tmp_path / "a.bin", cfg, p)
        save_checkpoint(tmp_path / "b.bin", cfg, p)
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_corrupt_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_size_grows_with_vocab(self, tmp_path):
        p_small = init_params(tiny_cfg(vocab_size=12))
        p_large = init_params(tiny_cfg(vocab_size=40))
        save_checkpoint(tmp_path / "s.bin", tiny_cfg(vocab_size=12), p_small)
        save_checkpoint(tmp_path / "l.bin", tiny_cfg(vocab_size=40), p_large)
        assert (tmp_path / "l.bin").stat().st_size > (tmp_path / "s.bin").stat().st_size
