import math

import numpy as np
import pytest

from gridcap import numerics as nm
from gridcap.numerics import Tensor
from gridcap.captioner import (BudgetExhausted, CaptionerConfig,
                               SceneStepModel, Vocabulary, decode_hidden,
                               decode_logits, encode, frozen,
                               init_captioner_params, step_distribution,
                               xent_loss)

from test_numerics import check_grads

WORDS = ["red", "blue", "dog", "cat", "runs", "sits"]


def tiny_cfg(**kw):
    defaults = dict(vocab=Vocabulary(WORDS), d_model=8, num_enc_layers=1,
                    num_dec_layers=1, num_heads=2, num_memory=2, embed_dim=4,
                    ffn_dim=12, max_len=10, visual_dim=3)
    defaults.update(kw)
    return CaptionerConfig(**defaults)


@pytest.fixture
def setup():
    cfg = tiny_cfg()
    params = init_captioner_params(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    regions = rng.normal(size=(4, 3))
    return cfg, params, regions


class TestVocabulary:
    def test_maps_are_inverse_bijections(self):
        v = Vocabulary(WORDS)
        for i, tok in enumerate(v.tokens):
            assert v.token_to_id[tok] == i
        assert len(set(v.tokens)) == len(v.tokens)

    def test_reserved_ids_distinct(self):
        v = Vocabulary(WORDS)
        assert len({v.pad_id, v.bos_id, v.eos_id, v.unk_id}) == 4

    def test_unknown_words_map_to_unk(self):
        v = Vocabulary(WORDS)
        assert v.encode(["xyzzy"]) == [v.unk_id]

    def test_save_load_round_trip(self, tmp_path):
        v = Vocabulary(WORDS)
        v.save(tmp_path / "vocab.json")
        loaded = Vocabulary.load(tmp_path / "vocab.json")
        assert loaded.tokens == v.tokens


def plain_encoder_reference(x, cfg, params):
    """Independent plain pre-norm transformer encoder, no memory slots."""
    def ln(v, gain, bias, eps=1e-5):
        mu = v.mean(axis=-1, keepdims=True)
        var = v.var(axis=-1, keepdims=True)
        return gain * (v - mu) / np.sqrt(var + eps) + bias

    def softmax(v):
        e = np.exp(v - v.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    p = {k: t.data for k, t in params.items()}
    h = x @ p["enc.input.w"] + p["enc.input.b"]
    hd = cfg.head_dim
    for i in range(cfg.num_enc_layers):
        pre = f"enc{i}.attn"
        z = ln(h, p[f"{pre}.ln_gain"], p[f"{pre}.ln_bias"])
        q, k, v = z @ p[f"{pre}.wq"], z @ p[f"{pre}.wk"], z @ p[f"{pre}.wv"]
        outs = []
        for hh in range(cfg.num_heads):
            sl = slice(hh * hd, (hh + 1) * hd)
            w = softmax(q[:, sl] @ k[:, sl].T / math.sqrt(hd))
            outs.append(w @ v[:, sl])
        h = h + np.concatenate(outs, axis=1) @ p[f"{pre}.wo"]
        pre = f"enc{i}.ffn"
        z = ln(h, p[f"{pre}.ln_gain"], p[f"{pre}.ln_bias"])
        z = np.maximum(z @ p[f"{pre}.w1"] + p[f"{pre}.b1"], 0.0)
        h = h + z @ p[f"{pre}.w2"] + p[f"{pre}.b2"]
    return ln(h, p["enc.final.ln_gain"], p["enc.final.ln_bias"])


class TestEncode:
    def test_output_length_matches_input_length(self):
        rng = np.random.default_rng(2)
        for num_memory in (0, 3):
            cfg = tiny_cfg(num_memory=num_memory)
            params = init_captioner_params(cfg, np.random.default_rng(3))
            for n in range(1, 11):
                out = encode(rng.normal(size=(n, 3)), cfg, params)
                assert out.shape == (n, cfg.d_model)

    def test_zero_memory_equals_plain_encoder(self):
        cfg = tiny_cfg(num_memory=0, num_enc_layers=2)
        params = init_captioner_params(cfg, np.random.default_rng(4))
        x = np.random.default_rng(5).normal(size=(5, 3))
        ours = encode(x, cfg, params).data
        reference = plain_encoder_reference(x, cfg, params)
        np.testing.assert_allclose(ours, reference, atol=1e-12)

    def test_memory_layer_gradcheck(self, setup):
        cfg, params, regions = setup
        w = np.random.default_rng(6).normal(size=(4, cfg.d_model))
        subset = [params["enc0.mem.k"], params["enc0.mem.v"],
                  params["enc0.attn.wq"], params["enc.input.w"]]

        def loss():
            return nm.tsum(nm.mul(encode(regions, cfg, params), Tensor(w)))

        check_grads(loss, subset, 1e-4)

    def test_needs_a_region(self, setup):
        cfg, params, _ = setup
        with pytest.raises(ValueError):
            encode(np.zeros((0, 3)), cfg, params)


class TestDecodeLogits:
    def test_causality_is_bitwise(self, setup):
        cfg, params, regions = setup
        enc = encode(regions, cfg, frozen(params))
        v = cfg.vocab
        rng = np.random.default_rng(7)
        for _ in range(10):
            n = int(rng.integers(3, 8))
            toks = [v.bos_id] + list(rng.integers(4, len(v), size=n))
            base = decode_logits(toks, enc, cfg, frozen(params)).data
            j = int(rng.integers(1, n + 1))
            mutated = list(toks)
            mutated[j] = int(rng.integers(4, len(v)))
            out = decode_logits(mutated, enc, cfg, frozen(params)).data
            assert (out[:j] == base[:j]).all()

    def test_logits_shape(self, setup):
        cfg, params, regions = setup
        enc = encode(regions, cfg, frozen(params))
        toks = [cfg.vocab.bos_id, 5, 6, 7]
        out = decode_logits(toks, enc, cfg, frozen(params))
        assert out.shape == (4, len(cfg.vocab))

    def test_weight_tying_direct_recomputation(self, setup):
        cfg, params, regions = setup
        enc = encode(regions, cfg, frozen(params))
        toks = [cfg.vocab.bos_id, 5, 6]
        h = decode_hidden(toks, enc, cfg, frozen(params)).data
        logits = decode_logits(toks, enc, cfg, frozen(params)).data
        E = params["embed.E"].data
        np.testing.assert_allclose(logits, h @ E.T, atol=1e-12)
        # doubling one embedding row doubles that word's logit, h held fixed
        w = 5
        E2 = E.copy()
        E2[w] *= 2.0
        np.testing.assert_allclose((h @ E2.T)[:, w], 2.0 * logits[:, w],
                                   atol=1e-12)

    def test_must_begin_with_bos(self, setup):
        cfg, params, regions = setup
        enc = encode(regions, cfg, frozen(params))
        with pytest.raises(ValueError):
            decode_logits([5, 6], enc, cfg, frozen(params))

    def test_unknown_id_rejected(self, setup):
        cfg, params, regions = setup
        enc = encode(regions, cfg, frozen(params))
        with pytest.raises(ValueError):
            decode_logits([cfg.vocab.bos_id, len(cfg.vocab)], enc, cfg,
                          frozen(params))

    def test_masked_decoder_layer_gradcheck(self, setup):
        cfg, params, regions = setup
        v = cfg.vocab
        toks = [v.bos_id, 5, 6, v.eos_id]
        w = np.random.default_rng(8).normal(size=(4, len(v)))
        subset = [params["dec0.self.wq"], params["dec0.cross.wk"],
                  params["embed.E"], params["embed.down_w"]]

        def loss():
            enc = encode(regions, cfg, params)
            return nm.tsum(nm.mul(decode_logits(toks, enc, cfg, params),
                                  Tensor(w)))

        check_grads(loss, subset, 1e-4)


class TestXentLoss:
    def test_uniform_head_gives_log_vocab(self, setup):
        cfg, params, regions = setup
        params["embed.E"].data[...] = 0.0  # zero head -> uniform logits
        enc = encode(regions, cfg, frozen(params))
        v = cfg.vocab
        loss = xent_loss([v.bos_id, v.unk_id, v.eos_id], enc, cfg, frozen(params))
        assert loss.item() == pytest.approx(math.log(len(v)), rel=1e-12)

    def test_pad_extension_leaves_loss_unchanged(self, setup):
        cfg, params, regions = setup
        enc = encode(regions, cfg, frozen(params))
        v = cfg.vocab
        toks = [v.bos_id, 5, 6, v.eos_id]
        base = xent_loss(toks, enc, cfg, frozen(params)).item()
        padded = xent_loss(toks + [v.pad_id] * 3, enc, cfg, frozen(params)).item()
        assert abs(base - padded) < 1e-12

    def test_missing_eos_rejected(self, setup):
        cfg, params, regions = setup
        enc = encode(regions, cfg, frozen(params))
        with pytest.raises(ValueError):
            xent_loss([cfg.vocab.bos_id, 5, 6], enc, cfg, frozen(params))

    def test_overfits_one_caption(self, setup):
        cfg, params, regions = setup
        v = cfg.vocab
        toks = [v.bos_id] + v.encode(["red", "dog", "runs"]) + [v.eos_id]
        state = nm.AdamState()
        losses = []
        for _ in range(50):
            nm.zero_grads(params)
            enc = encode(regions, cfg, params)
            loss = xent_loss(toks, enc, cfg, params)
            losses.append(loss.item())
            nm.backward(loss)
            nm.adam_step(params, state, lr=0.01)
        assert losses[-1] < losses[0] * 0.5


class TestStepDistribution:
    def test_normalized(self, setup):
        cfg, params, regions = setup
        enc = encode(regions, cfg, frozen(params))
        lp = step_distribution([cfg.vocab.bos_id, 5], enc, cfg, frozen(params))
        assert np.exp(lp).sum() == pytest.approx(1.0, abs=1e-12)

    def test_matches_final_logits_row(self, setup):
        cfg, params, regions = setup
        enc = encode(regions, cfg, frozen(params))
        toks = [cfg.vocab.bos_id, 5, 6]
        lp = step_distribution(toks, enc, cfg, frozen(params))
        row = decode_logits(toks, enc, cfg, frozen(params)).data[-1]
        expected = row - row.max()
        expected -= math.log(np.exp(expected).sum())
        np.testing.assert_allclose(lp, expected, atol=1e-12)

    def test_deterministic(self, setup):
        cfg, params, regions = setup
        enc = encode(regions, cfg, frozen(params))
        a = step_distribution([cfg.vocab.bos_id], enc, cfg, frozen(params))
        b = step_distribution([cfg.vocab.bos_id], enc, cfg, frozen(params))
        assert (a == b).all()

    def test_budget_error(self, setup):
        cfg, params, regions = setup
        enc = encode(regions, cfg, frozen(params))
        prefix = [cfg.vocab.bos_id] + [5] * (cfg.max_len - 1)
        with pytest.raises(BudgetExhausted):
            step_distribution(prefix, enc, cfg, frozen(params))

    def test_scene_step_model_wiring(self, setup):
        cfg, params, regions = setup
        enc = encode(regions, cfg, frozen(params))
        model = SceneStepModel(enc, cfg, frozen(params))
        assert model.bos_id == cfg.vocab.bos_id
        assert model.vocab_size == len(cfg.vocab)
        lp = model.step((model.bos_id,))
        assert lp.shape == (len(cfg.vocab),)


class TestCheckpointIntegration:
    def test_save_load_decode_bit_identical(self, setup, tmp_path):
        cfg, params, regions = setup
        enc = encode(regions, cfg, frozen(params))
        toks = [cfg.vocab.bos_id, 5, 6]
        base = decode_logits(toks, enc, cfg, frozen(params)).data
        nm.save_checkpoint(tmp_path / "cap.ckpt", params)
        loaded = nm.load_checkpoint(tmp_path / "cap.ckpt")
        enc2 = encode(regions, cfg, frozen(loaded))
        again = decode_logits(toks, enc2, cfg, frozen(loaded)).data
        assert (base == again).all()
