import numpy as np
import pytest

from sonoalign import autodiff as ad
from sonoalign import encoders as enc


def image_params(d_in=6, h=5, d=4, seed=0):
    rng = np.random.default_rng(seed)
    return enc.ImageEncoderParams(
        w1=ad.Tensor(rng.normal(scale=0.4, size=(d_in, h)), requires_grad=True),
        b1=ad.Tensor(rng.normal(scale=0.4, size=(1, h)), requires_grad=True),
        w2=ad.Tensor(rng.normal(scale=0.4, size=(h, d)), requires_grad=True),
        b2=ad.Tensor(rng.normal(scale=0.4, size=(1, d)), requires_grad=True),
    )


def text_params(vocab, d_e=5, d=4, seed=1):
    rng = np.random.default_rng(seed)
    return enc.TextEncoderParams(
        vocab=vocab,
        emb=ad.Tensor(rng.normal(scale=0.4, size=(len(vocab), d_e)), requires_grad=True),
        proj=ad.Tensor(rng.normal(scale=0.4, size=(d_e, d)), requires_grad=True),
        proj_b=ad.Tensor(rng.normal(scale=0.4, size=(1, d)), requires_grad=True),
    )


class TestTokenize:
    def test_lowercase_and_punctuation(self):
        assert enc.split_tokens("A well-defined Cyst, in the LIVER.") == \
            ["a", "well", "defined", "cyst", "in", "the", "liver"]

    def test_digits_kept(self):
        assert enc.split_tokens("grade 3 lesion") == ["grade", "3", "lesion"]

    def test_empty(self):
        assert enc.split_tokens("") == []
        assert enc.split_tokens("   ---   ") == []


class TestBuildVocab:
    def test_sorted_with_oov_first(self):
        vocab = enc.build_vocab(["b a", "c b"])
        assert vocab == (enc.OOV_TOKEN, "a", "b", "c")

    def test_extra_texts_included(self):
        vocab = enc.build_vocab(["alpha"], extra_texts=["beta gamma"])
        assert set(vocab) == {enc.OOV_TOKEN, "alpha", "beta", "gamma"}

    def test_deterministic(self):
        caps = ["the liver shows a cyst", "a nodule in the thyroid gland"]
        assert enc.build_vocab(caps) == enc.build_vocab(list(reversed(caps)))

    def test_unknown_tokens_map_to_oov(self):
        params = text_params(enc.build_vocab(["known words"]))
        assert enc.tokenize("unknown known", params) == [0, params.vocab.index("known")]


class TestEncodeImage:
    def test_shape_and_value(self):
        params = image_params()
        x = np.random.default_rng(2).normal(size=6)
        out = enc.encode_image(x, params)
        expected = np.tanh(x.reshape(1, -1) @ params.w1.data + params.b1.data) \
            @ params.w2.data + params.b2.data
        assert out.shape == (1, 4)
        assert np.allclose(out.data, expected, atol=1e-14)

    def test_wrong_length_rejected(self):
        with pytest.raises(enc.EncoderError, match="feature length"):
            enc.encode_image(np.zeros(5), image_params(d_in=6))

    def test_gradients(self):
        params = image_params(seed=3)
        x = np.random.default_rng(4).normal(size=6)
        w = ad.constant(np.random.default_rng(5).normal(size=(1, 4)))
        report = ad.grad_check(
            lambda: ad.sum_elems(ad.mul(enc.encode_image(x, params), w)),
            [params.w1, params.b1, params.w2, params.b2], step=1e-5, tol=1e-4)
        assert report.passed, report.max_rel_err


class TestEncodeText:
    def test_word_order_invariance_exact(self):
        params = text_params(enc.build_vocab(["a cyst in the liver"]))
        a = enc.encode_text("a cyst in the liver", params)
        b = enc.encode_text("the liver in a cyst", params)
        assert np.array_equal(a.data, b.data)

    def test_empty_caption_is_projection_bias(self):
        params = text_params(enc.build_vocab(["something"]))
        out = enc.encode_text("", params)
        assert np.array_equal(out.data, params.proj_b.data)

    def test_mean_of_embeddings_oracle(self):
        vocab = enc.build_vocab(["liver cyst"])
        params = text_params(vocab)
        out = enc.encode_text("liver cyst liver", params)
        rows = params.emb.data
        bag = (2 * rows[vocab.index("liver")] + rows[vocab.index("cyst")]) / 3.0
        expected = bag @ params.proj.data + params.proj_b.data
        assert np.allclose(out.data, expected, atol=1e-14)

    def test_zero_weights_give_bias(self):
        vocab = enc.build_vocab(["liver cyst"])
        params = text_params(vocab)
        params.emb = ad.Tensor(np.zeros(params.emb.shape), requires_grad=True)
        out = enc.encode_text("liver cyst", params)
        assert np.array_equal(out.data, params.proj_b.data)

    def test_gradients(self):
        params = text_params(enc.build_vocab(["a cyst in the liver"]), seed=6)
        w = ad.constant(np.random.default_rng(7).normal(size=(1, 4)))
        report = ad.grad_check(
            lambda: ad.sum_elems(ad.mul(enc.encode_text("the liver cyst", params), w)),
            [params.emb, params.proj, params.proj_b], step=1e-5, tol=1e-4)
        assert report.passed, report.max_rel_err
