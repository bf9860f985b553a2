import numpy as np
import pytest

from deskformer import tensor as T
from deskformer.attention import AttentionConfig, encoder_forward, init_encoder
from deskformer.corpus import default_grammar, pcfg_generate
from deskformer.fusion import (
    BaseNet,
    FeedbackParams,
    FrozenViolation,
    cipher,
    cipher_corpus,
    correspondence_pairs,
    feedback_pass,
    init_feedback,
    init_merge,
    iterate_feedback,
    merge_checkpoint,
    merge_forward,
    merge_nets,
    single_net_baseline,
)
from deskformer.gradcheck import finite_diff_check
from deskformer.tensor import DimensionError, Tensor
from deskformer.train import TrainConfig, train_masked_lm

SMALL = dict(vocab_size=10, max_len=8, num_layers=2, num_heads=2, model_dim=6, head_dim=3)


def fb_from(wq, wk, wv, wo, **kw):
    return FeedbackParams(*(Tensor(np.asarray(w, float), requires_grad=True) for w in (wq, wk, wv, wo)),
                          scale=kw.pop("scale", 1.0), **kw)


class TestFeedbackPass:
    def test_zero_values_pass_through(self):
        rng = np.random.default_rng(0)
        lower, higher = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 5)))
        fb = fb_from(rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 5, 2)), np.zeros((2, 3, 2)),
                     rng.normal(size=(4, 3)))
        np.testing.assert_array_equal(feedback_pass(lower, higher, fb).data, lower.data)

    def test_single_position(self):
        rng = np.random.default_rng(1)
        lower, higher = rng.normal(size=(1, 3)), rng.normal(size=(1, 4))
        wv, wo = rng.normal(size=(1, 3, 2)), rng.normal(size=(2, 3))
        fb = fb_from(rng.normal(size=(1, 3, 2)), rng.normal(size=(1, 4, 2)), wv, wo, damping=0.5)
        out = feedback_pass(Tensor(lower), Tensor(higher), fb).data
        # the only weight is exactly 1
        np.testing.assert_allclose(out, lower + 0.5 * (lower @ wv[0]) @ wo, rtol=1e-14)

    def test_three_by_three_hand_case(self):
        e = np.e
        fb = fb_from([[[1], [0], [0]]], [[[1], [0], [0]]], [[[0], [1], [0]]], [[0, 0, 1]], damping=0.5)
        out = feedback_pass(Tensor(np.eye(3)), Tensor(np.eye(3)), fb).data
        # weights row 0: (e, 1, 1)/(e+2); rows 1-2 uniform. Values pick coordinate 1.
        expected = np.eye(3)
        expected[:, 2] += 0.5 * np.array([1 / (e + 2), 1 / 3, 1 / 3])
        np.testing.assert_allclose(out, expected, rtol=1e-14)

    def test_position_mismatch(self):
        rng = np.random.default_rng(2)
        fb = init_feedback(3, 3, 1, 2, 0)
        with pytest.raises(DimensionError):
            feedback_pass(Tensor(rng.normal(size=(3, 3))), Tensor(rng.normal(size=(4, 3))), fb)

    def test_param_validation(self):
        with pytest.raises(ValueError):
            init_feedback(3, 3, 1, 2, 0, iterations=0)
        with pytest.raises(ValueError):
            init_feedback(3, 3, 1, 2, 0, damping=0.0)
        with pytest.raises(DimensionError):
            fb_from(np.zeros((1, 3, 2)), np.zeros((1, 3, 2)), np.zeros((1, 3, 2)), np.zeros((3, 3)))


class TestIterateFeedback:
    cfg = AttentionConfig(**SMALL)
    tokens = np.array([[1, 5, 2, 7, 3]])

    @pytest.mark.parametrize("rounds", [1, 2, 3])
    def test_zero_values_is_identity(self, rounds):
        enc = init_encoder(self.cfg, 0)
        fb = init_feedback(6, 6, 2, 3, 0, iterations=rounds, zero_values=True)
        plain = encoder_forward(self.tokens, enc, self.cfg)
        fed = iterate_feedback(self.tokens, enc, self.cfg, fb)
        for a, b in zip(plain.reps, fed.reps):
            np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(plain.logits.data, fed.logits.data)

    def test_zero_rounds_is_plain_encoder(self):
        enc = init_encoder(self.cfg, 1)
        fb = init_feedback(6, 6, 2, 3, 1)
        np.testing.assert_array_equal(iterate_feedback(self.tokens, enc, self.cfg, fb, iterations=0).logits.data,
                                      encoder_forward(self.tokens, enc, self.cfg).logits.data)

    def test_rounds_change_output(self):
        enc = init_encoder(self.cfg, 2)
        fb = init_feedback(6, 6, 2, 3, 2)
        one = iterate_feedback(self.tokens, enc, self.cfg, fb, iterations=1).logits.data
        two = iterate_feedback(self.tokens, enc, self.cfg, fb, iterations=2).logits.data
        assert np.max(np.abs(one - two)) > 1e-6

    def test_layer_order_checked(self):
        enc = init_encoder(self.cfg, 0)
        fb = init_feedback(6, 6, 2, 3, 0, lower_layer=2, higher_layer=1)
        with pytest.raises(ValueError):
            iterate_feedback(self.tokens, enc, self.cfg, fb)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient_through_two_rounds(self, seed):
        cfg = AttentionConfig(vocab_size=6, max_len=4, num_layers=2, num_heads=2, model_dim=4, head_dim=2)
        enc = init_encoder(cfg, seed)
        fb = init_feedback(4, 4, 2, 2, seed, iterations=2)
        tokens = np.random.default_rng(seed).integers(0, 6, size=(2, 4))
        target = np.random.default_rng(seed + 100).normal(size=(2, 4, 6))

        def f():
            diff = iterate_feedback(tokens, enc, cfg, fb).logits - target
            return (diff * diff).sum()

        params = {**fb.named(), "layer0.wq": enc["layer0.wq"], "embed.tokens": enc["embed.tokens"]}
        report = finite_diff_check(f, params, seed=seed)
        assert report.passed, report.summary()


class TestMerge:
    def test_zero_head_gives_chance(self):
        rng = np.random.default_rng(0)
        mp = init_merge(4, 5, 2, 2, 0)
        logits = merge_forward(Tensor(rng.normal(size=(6, 3, 4))), np.ones((6, 3)),
                               Tensor(rng.normal(size=(6, 2, 5))), np.ones((6, 2), bool), mp).data
        np.testing.assert_array_equal(logits, np.zeros((6, 2)))

    def test_values_from_a_needs_equal_lengths(self):
        rng = np.random.default_rng(1)
        mp = init_merge(4, 4, 1, 2, 0, values_from="a")
        with pytest.raises(DimensionError):
            merge_forward(Tensor(rng.normal(size=(2, 3, 4))), np.ones((2, 3)),
                          Tensor(rng.normal(size=(2, 2, 4))), np.ones((2, 2), bool), mp)
        with pytest.raises(ValueError):
            init_merge(4, 4, 1, 2, 0, values_from="c")

    def test_padding_ignored(self):
        rng = np.random.default_rng(2)
        mp = init_merge(4, 4, 2, 2, 0)
        mp["head.weight"].data[...] = rng.normal(size=(4, 2))
        ha, hb = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 2, 4))
        short = merge_forward(Tensor(ha), np.ones((1, 3)), Tensor(hb), np.ones((1, 2), bool), mp).data
        ha_pad = np.concatenate([ha, rng.normal(size=(1, 2, 4))], axis=1)
        hb_pad = np.concatenate([hb, rng.normal(size=(1, 1, 4))], axis=1)
        padded = merge_forward(Tensor(ha_pad), np.array([[1, 1, 1, 0, 0.0]]), Tensor(hb_pad),
                               np.array([[True, True, False]]), mp).data
        np.testing.assert_allclose(short, padded, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        mp = init_merge(4, 3, 2, 2, seed, ff_width=6)
        mp["head.weight"].data[...] = rng.normal(size=(4, 2))
        ha, hb = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 5, 3))
        ma, mb = np.ones((3, 4)), np.ones((3, 5), bool)
        labels = np.array([0, 1, 1])
        report = finite_diff_check(
            lambda: T.cross_entropy(merge_forward(Tensor(ha), ma, Tensor(hb), mb, mp), labels),
            mp.tensors, seed=seed)
        assert report.passed, report.summary()


class TestCipher:
    def test_bijection_and_trees_kept(self):
        g = default_grammar()
        perm = cipher(g.vocab_size, 3)
        assert sorted(perm) == list(range(g.vocab_size))
        sents = pcfg_generate(g, 50, 0)
        for s, c in zip(sents, cipher_corpus(sents, perm)):
            assert c.parents == s.parents
            assert c.tokens == [perm[t] for t in s.tokens]

    def test_correspondence_pairs(self):
        g = default_grammar()
        sents = pcfg_generate(g, 100, 0)
        perm = cipher(g.vocab_size, 0)
        data = correspondence_pairs(sents, cipher_corpus(sents, perm), 0)
        assert data.labels.mean() == 0.5
        for a, b, y in zip(data.a, data.b, data.labels):
            if y == 1:
                assert b == [perm[t] for t in a]

    def test_too_small(self):
        s = pcfg_generate(default_grammar(), 1, 0)
        with pytest.raises(ValueError):
            correspondence_pairs(s, s, 0)


@pytest.fixture(scope="module")
def paired_nets():
    g = default_grammar()
    corpus = pcfg_generate(g, 1600, 0, sentences_per_doc=5)
    ciphered = cipher_corpus(corpus, cipher(g.vocab_size, 0))
    mc = AttentionConfig(vocab_size=g.vocab_size, max_len=16, num_layers=1, num_heads=2, model_dim=16, head_dim=8)
    tc = TrainConfig(epochs=3, batch_size=32, lr=0.1, lr_schedule="linear")
    a = train_masked_lm(TrainConfig(**{**tc.to_dict(), "seed": 1}), corpus, mc)
    b = train_masked_lm(TrainConfig(**{**tc.to_dict(), "seed": 2}), ciphered, mc)
    train = correspondence_pairs(corpus[:800], ciphered[:800], 0)
    test = correspondence_pairs(corpus[800:], ciphered[800:], 1)
    return BaseNet(a.params, mc), BaseNet(b.params, mc), train, test


class TestMergeTraining:
    def test_frozen_flags_required(self, paired_nets):
        a, b, train, test = paired_nets
        mp = init_merge(16, 16, 2, 8, 0)
        mp.frozen_b = False
        with pytest.raises(FrozenViolation):
            merge_nets(a, b, mp, train, test, TrainConfig(epochs=1))

    def test_beats_single_net_baselines(self, paired_nets):
        a, b, train, test = paired_nets
        tc = TrainConfig(lr=0.05, epochs=6, batch_size=32)
        single = max(single_net_baseline(a, "a", train, test, tc), single_net_baseline(b, "b", train, test, tc))
        hash_a, hash_b = a.state_hash(), b.state_hash()
        for seed in range(3):
            res = merge_nets(a, b, init_merge(16, 16, 2, 8, seed), train, test,
                             TrainConfig(**{**tc.to_dict(), "seed": seed}))
            m = res.metrics
            assert m["initial_acc"] == 0.5
            assert m["final_acc"] > single
            assert (m["base_hash_a"], m["base_hash_b"]) == (hash_a, hash_b) == (a.state_hash(), b.state_hash())
        ck = merge_checkpoint(res, hash_a, hash_b, tc)
        assert ck.config["base_a"] == hash_a and ck.kind == "merge"
