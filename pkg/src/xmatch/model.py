"""Mid-fusion cross-modal matcher scoring the relevance of a phrase to an image."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .data import Batch, CandidatePool, DataError, ImageRecord, LabeledPair, batch_from_pairs, collate
from .tokenizer import TokenSequence, Vocabulary, encode


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    L_lang: int = 2
    L_obj: int = 2
    L_cross: int = 2
    max_len: int = 16
    N_obj: int = 4
    d_feat: int = 8
    d_emb: int = 8
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name in ("dropout", "seed"):
                continue
            value = getattr(self, f.name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{f.name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.dropout != 0.0:
            raise ConfigError("dropout is not supported; set it to 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in known})


class Matcher(nn.Module):
    """Common surface of every relevance model.

    ``forward`` caches for ``backward``; ``predict`` is the scoring entry
    point used for evaluation and ranking.
    """

    kind = ""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config

    def finish_init(self) -> None:
        self.initialize(np.random.default_rng(self.config.seed), prefix="model.")

    def predict(self, batch: Batch) -> np.ndarray:
        return self.forward(batch)

    def head_parameters(self) -> list:
        return []

    def param_dict(self) -> dict:
        return dict(self.named_parameters("model."))


class CrossModalMatcher(Matcher):
    """Language and object encoders, a two-stream cross encoder and a sigmoid head."""

    kind = "cross"

    def __init__(self, config: ModelConfig) -> None:
        super().__init__(config)
        c = config
        self.text_embed = self.add_child("text_embed", nn.TextEmbedding(c.vocab_size, c.max_len, c.d_model))
        self.obj_embed = self.add_child("obj_embed", nn.ObjectEmbedding(c.d_feat, c.d_model))
        self.lang_encoder = self.add_child("lang_encoder", nn.Encoder(c.L_lang, c.d_model, c.n_heads, c.d_ff))
        self.obj_encoder = self.add_child("obj_encoder", nn.Encoder(c.L_obj, c.d_model, c.n_heads, c.d_ff))
        self.cross_encoder = self.add_child(
            "cross_encoder",
            nn.ModuleList(nn.CrossLayer(c.d_model, c.n_heads, c.d_ff) for _ in range(c.L_cross)),
        )
        self.head = self.add_child("head", nn.ClassifierHead(c.d_model))
        self.finish_init()

    def embed_text(self, ids: np.ndarray) -> np.ndarray:
        return self.text_embed.forward(ids)

    def embed_objects(self, feats: np.ndarray, boxes: np.ndarray) -> np.ndarray:
        return self.obj_embed.forward(feats, boxes)

    def encode_cross(self, t, o, t_mask, o_mask):
        for layer in self.cross_encoder:
            t, o = layer.forward(t, o, t_mask, o_mask)
        return t, o

    def forward(self, batch: Batch) -> np.ndarray:
        imgs = batch.images
        t = self.lang_encoder.forward(self.embed_text(batch.ids), batch.text_mask)
        o = self.obj_encoder.forward(self.embed_objects(imgs.feats, imgs.boxes), imgs.obj_mask)
        t, o = self.encode_cross(t, o, batch.text_mask, imgs.obj_mask)
        self._shapes = (t.shape, o.shape)
        return self.head.forward(t[:, 0, :])

    def backward(self, dprob: np.ndarray) -> None:
        t_shape, o_shape = self._shapes
        dt = np.zeros(t_shape)
        dt[:, 0, :] = self.head.backward(dprob)
        do = np.zeros(o_shape)
        for layer in reversed(self.cross_encoder.items):
            dt, do = layer.backward(dt, do)
        self.text_embed.backward(self.lang_encoder.backward(dt))
        self.obj_embed.backward(self.obj_encoder.backward(do))

    def head_parameters(self) -> list:
        return self.head.parameters()


def expected_parameter_count(c: ModelConfig) -> int:
    """Closed-form parameter count of :class:`CrossModalMatcher`."""
    d, f = c.d_model, c.d_ff
    ln = 2 * d
    lin = lambda i, o: i * o + o  # noqa: E731
    attn_block = 4 * lin(d, d) + ln
    ffn_block = lin(d, f) + lin(f, d) + ln
    enc_layer = attn_block + ffn_block
    cross_layer = 4 * attn_block + 2 * ffn_block
    text_embed = c.vocab_size * d + c.max_len * d + ln
    obj_embed = lin(c.d_feat, d) + ln + lin(4, d) + ln
    head = lin(d, d) + ln + lin(d, 1)
    return (
        text_embed
        + obj_embed
        + (c.L_lang + c.L_obj) * enc_layer
        + c.L_cross * cross_layer
        + head
    )


def score(tokens: TokenSequence, record: ImageRecord, model: Matcher) -> float:
    batch = collate([tokens], [record], model.config.N_obj)
    return float(model.predict(batch)[0])


def score_pairs(
    model: Matcher,
    pairs: Sequence[LabeledPair],
    features: Mapping[str, ImageRecord],
    vocab: Vocabulary,
    batch_size: int = 64,
) -> np.ndarray:
    c = model.config
    out = []
    for s in range(0, len(pairs), batch_size):
        chunk = pairs[s : s + batch_size]
        out.append(model.predict(batch_from_pairs(chunk, features, vocab, c.max_len, c.N_obj)))
    return np.concatenate(out) if out else np.zeros(0)


def rank_pool(
    phrase: str,
    pool: CandidatePool,
    model: Matcher,
    features: Mapping[str, ImageRecord],
    vocab: Vocabulary,
) -> list[tuple[str, float]]:
    """Pool images by descending score; equal scores fall back to ascending id."""
    missing = [i for i in pool.image_ids if i not in features]
    if missing:
        raise DataError(f"pool references unknown image id {missing[0]!r}")
    c = model.config
    tokens = encode(phrase, vocab, c.max_len)
    records = [features[i] for i in pool.image_ids]
    scores = model.predict(collate([tokens] * len(records), records, c.N_obj))
    ranked = sorted(zip(pool.image_ids, scores.tolist()), key=lambda r: (-r[1], r[0]))
    return ranked
