"""Desk-scale image and text encoders projecting into the shared space:
a two-layer tanh perceptron over precomputed image features and a
bag-of-tokens text encoder with a frozen vocabulary."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

OOV_TOKEN = "<oov>"

_TOKEN_RE = re.compile(r"[0-9a-z]+")


class EncoderError(Exception):
    pass


def split_tokens(text: str):
    return _TOKEN_RE.findall(text.lower())


def build_vocab(captions, extra_texts=()):
    """Deterministic sorted vocabulary over all tokens seen in the given
    texts, with the out-of-vocabulary token at index 0."""
    tokens = set()
    for text in captions:
        tokens.update(split_tokens(text))
    for text in extra_texts:
        tokens.update(split_tokens(text))
    return (OOV_TOKEN,) + tuple(sorted(tokens))


@dataclass
class ImageEncoderParams:
    w1: ad.Tensor  # D_in x H
    b1: ad.Tensor  # 1 x H
    w2: ad.Tensor  # H x D
    b2: ad.Tensor  # 1 x D

    def named_parameters(self):
        return [("image.w1", self.w1), ("image.b1", self.b1),
                ("image.w2", self.w2), ("image.b2", self.b2)]

    @property
    def d_in(self):
        return self.w1.shape[0]


@dataclass
class TextEncoderParams:
    vocab: tuple
    emb: ad.Tensor  # V x D_e token embedding table
    proj: ad.Tensor  # D_e x D
    proj_b: ad.Tensor  # 1 x D

    def named_parameters(self):
        return [("text.emb", self.emb), ("text.proj", self.proj),
                ("text.proj_b", self.proj_b)]

    def token_ids(self, caption):
        index = self._index()
        return [index.get(tok, 0) for tok in split_tokens(caption)]

    def _index(self):
        cached = getattr(self, "_index_cache", None)
        if cached is None or len(cached) != len(self.vocab):
            cached = {tok: i for i, tok in enumerate(self.vocab)}
            object.__setattr__(self, "_index_cache", cached)
        return cached


def encode_image(features, params: ImageEncoderParams) -> ad.Tensor:
    x = np.asarray(features, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != params.d_in:
        raise EncoderError(f"feature length {x.shape[1]}, encoder expects {params.d_in}")
    hidden = ad.tanh_elem(ad.add(ad.matmul(ad.constant(x), params.w1), params.b1))
    return ad.add(ad.matmul(hidden, params.w2), params.b2)


def tokenize(caption, params: TextEncoderParams):
    return params.token_ids(caption)


def encode_text(caption, params: TextEncoderParams) -> ad.Tensor:
    """Mean of token embeddings (order-free), projected to D. An empty
    caption contributes a zero bag, so the output is the projection bias."""
    ids = params.token_ids(caption)
    counts = np.zeros((1, len(params.vocab)))
    for i in ids:
        counts[0, i] += 1.0
    if ids:
        counts /= len(ids)
    bag = ad.matmul(ad.constant(counts), params.emb)
    return ad.add(ad.matmul(bag, params.proj), params.proj_b)
