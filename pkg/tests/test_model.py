import numpy as np
import pytest

from mmtm import dataset, model
from mmtm.dataset import BOS, EOS, PAD, TaskExample
from mmtm.expr import TraversalVariant


def tiny_config(**kv):
    base = dict(src_vocab_size=12, tgt_vocab_size=12, d_model=8, n_heads=2,
                n_enc_layers=1, n_dec_layers=1, dropout=0.0, seed=7,
                max_src_len=16, max_tgt_len=16)
    base.update(kv)
    return model.ModelConfig(**base)


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(model.ShapeMismatch):
            tiny_config(d_model=10, n_heads=4)

    def test_default_ffn_width(self):
        assert tiny_config().d_ffn == 32

    def test_dim62_needs_two_heads(self):
        assert tiny_config(d_model=62, n_heads=2).d_model == 62


class TestInitParams:
    def test_same_seed_identical(self):
        a = model.init_params(tiny_config())
        b = model.init_params(tiny_config())
        assert a.tensors.keys() == b.tensors.keys()
        for name in a.tensors:
            np.testing.assert_array_equal(a[name], b[name])

    def test_embedding_init_copied_verbatim(self):
        emb = np.arange(12 * 8, dtype=np.float64).reshape(12, 8)
        params = model.init_params(tiny_config(), embedding_init=emb)
        np.testing.assert_array_equal(params["src_embed"], emb)

    def test_embedding_shape_mismatch(self):
        with pytest.raises(model.ShapeMismatch):
            model.init_params(tiny_config(), embedding_init=np.zeros((12, 9)))

    def test_three_decoders_one_encoder(self):
        params = model.init_params(tiny_config())
        for task in ("pre", "in", "post"):
            assert f"dec.{task}.tgt_embed" in params.tensors
        assert len(params.names("enc.")) == len(set(params.names("enc.")))

    def test_param_count_closed_form(self):
        for kv in ({}, {"n_enc_layers": 2, "n_dec_layers": 2},
                   {"d_model": 16, "n_heads": 4}):
            cfg = tiny_config(**kv)
            params = model.init_params(cfg)
            assert params.size() == model.param_count(cfg)

    def test_subset_tasks(self):
        params = model.init_params(tiny_config(), tasks=("pre",))
        assert not params.names("dec.in.")
        assert not params.names("dec.post.")
        assert params.size() == model.param_count(tiny_config(), tasks=("pre",))


class TestEncode:
    def test_single_token_shape(self):
        params = model.init_params(tiny_config())
        states, _ = model.encode(params, [5])
        assert states.shape == (1, 8)

    def test_all_pad_rejected(self):
        params = model.init_params(tiny_config())
        with pytest.raises(model.EmptyInput):
            model.encode(params, [PAD, PAD])

    def test_sequence_too_long(self):
        params = model.init_params(tiny_config())
        with pytest.raises(model.SequenceTooLong):
            model.encode(params, [4] * 17)

    def test_id_out_of_range(self):
        params = model.init_params(tiny_config())
        with pytest.raises(model.IdOutOfRange):
            model.encode(params, [12])

    def test_positional_sensitivity(self):
        params = model.init_params(tiny_config())
        a, _ = model.encode(params, [4, 5, 6])
        b, _ = model.encode(params, [4, 6, 5])
        assert np.abs(a - b).max() > 1e-9


class TestDecodeStep:
    def test_bos_only_prefix_one_row(self):
        params = model.init_params(tiny_config())
        states, _ = model.encode(params, [4, 5])
        logits, _ = model.decode_step(params, "pre", states, [BOS])
        assert logits.shape == (1, 12)

    def test_tasks_give_different_logits(self):
        params = model.init_params(tiny_config())
        states, _ = model.encode(params, [4, 5])
        out = {t: model.decode_step(params, t, states, [BOS, 4])[0]
               for t in ("pre", "in", "post")}
        assert np.abs(out["pre"] - out["in"]).max() > 1e-9
        assert np.abs(out["in"] - out["post"]).max() > 1e-9

    def test_unknown_task(self):
        params = model.init_params(tiny_config())
        states, _ = model.encode(params, [4])
        with pytest.raises(model.UnknownTask):
            model.decode_step(params, "sideways", states, [BOS])

    def test_causality_future_token_cannot_leak(self):
        params = model.init_params(tiny_config())
        states, _ = model.encode(params, [4, 5, 6])
        a, _ = model.decode_step(params, "pre", states, [BOS, 4, 5, 6])
        b, _ = model.decode_step(params, "pre", states, [BOS, 4, 7, 6])
        # rows before the perturbed position are bit-identical
        np.testing.assert_array_equal(a[:2], b[:2])
        assert np.abs(a[2:] - b[2:]).max() > 0


class TestAttention:
    def test_rows_sum_to_one(self):
        params = model.init_params(tiny_config())
        states, enc_trace = model.encode(params, [4, 5, 6, 7],
                                         capture_attention=True)
        _, dec_trace = model.decode_step(params, "pre", states, [BOS, 4, 5],
                                         capture_attention=True)
        for mats in (enc_trace.enc_self, dec_trace.dec_self, dec_trace.cross):
            for mat in mats:
                np.testing.assert_allclose(mat.sum(axis=-1), 1.0, atol=1e-6)
                assert mat.min() >= 0 and mat.max() <= 1

    def test_causal_mask_zeroes_future(self):
        params = model.init_params(tiny_config())
        states, _ = model.encode(params, [4, 5])
        _, trace = model.decode_step(params, "pre", states, [BOS, 4, 5],
                                     capture_attention=True)
        for mat in trace.dec_self:
            future = np.triu(np.ones(mat.shape[-2:], dtype=bool), k=1)
            assert np.abs(mat[:, future]).max() == 0.0


class TestLoss:
    def test_uniform_logits_give_log_v(self):
        logits = np.zeros((3, 12))
        gold = [BOS, 4, 5, EOS]
        assert model.loss(logits, gold) == pytest.approx(np.log(12))

    def test_confident_correct_logits_near_zero(self):
        gold = [BOS, 4, 5, EOS]
        logits = np.full((3, 12), -100.0)
        for t, g in enumerate(gold[1:]):
            logits[t, g] = 100.0
        assert model.loss(logits, gold) < 1e-8

    def test_pad_positions_excluded(self):
        gold = [BOS, 4, EOS, PAD]
        logits = np.zeros((3, 12))
        logits[2] = np.random.default_rng(0).normal(size=12) * 50
        assert model.loss(logits, gold) == pytest.approx(np.log(12))

    def test_all_pad_target_raises(self):
        with pytest.raises(model.EmptyTarget):
            model.loss(np.zeros((2, 12)), [BOS, PAD, PAD])


class TestBackward:
    def _example(self, task=TraversalVariant.PRE_ORDER):
        return TaskExample((4, 5, 6), (BOS, 4, 5, EOS), task, "x")

    def test_unused_decoder_grads_exactly_zero(self):
        params = model.init_params(tiny_config())
        _, grads = model.backward(params, self._example())
        for name in params.names("dec.in.") + params.names("dec.post."):
            assert np.abs(grads[name]).max() == 0.0

    def test_encoder_grads_nonzero(self):
        params = model.init_params(tiny_config())
        _, grads = model.backward(params, self._example())
        assert any(np.abs(grads[n]).max() > 0 for n in params.names("enc."))
        assert np.abs(grads["src_embed"]).max() > 0

    def test_deterministic_without_dropout(self):
        params = model.init_params(tiny_config())
        l1, g1 = model.backward(params, self._example())
        l2, g2 = model.backward(params, self._example())
        assert l1 == l2
        for name in g1:
            np.testing.assert_array_equal(g1[name], g2[name])


class TestGreedyDecode:
    def test_terminates_untrained(self):
        params = model.init_params(tiny_config())
        out = model.greedy_decode(params, "pre", [4, 5], max_len=10)
        assert len(out) <= 10

    def test_max_len_one(self):
        params = model.init_params(tiny_config())
        out = model.greedy_decode(params, "pre", [4, 5], max_len=1)
        assert len(out) <= 1

    def test_memorized_model_reproduces_gold(self, memorized, corpus12):
        vocab = memorized.vocab
        examples = dataset.augment_corpus(corpus12, vocab)
        e = examples[TraversalVariant.PRE_ORDER][0]
        out = model.greedy_decode(memorized.params, "pre", list(e.source_ids),
                                  max_len=16)
        assert out == list(e.target_ids)[1:-1]
