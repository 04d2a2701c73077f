"""Comparison models: a single-stream early-fusion matcher and a contrastive dual encoder."""

from __future__ import annotations

import math

import numpy as np

from . import nn
from . import numerics as F
from .data import Batch, ImageRecord, pad_images
from .model import CrossModalMatcher, Matcher, ModelConfig
from .tokenizer import TokenSequence

LOGIT_SCALE_INIT = math.log(1.0 / 0.07)
LOGIT_SCALE_MIN = 1.0
LOGIT_SCALE_MAX = 100.0


class EarlyFusionMatcher(Matcher):
    """One transformer over ``[CLS] + text tokens + objects`` with a segment embedding."""

    kind = "early"

    def __init__(self, config: ModelConfig) -> None:
        super().__init__(config)
        c = config
        self.text_embed = self.add_child("text_embed", nn.TextEmbedding(c.vocab_size, c.max_len, c.d_model))
        self.obj_embed = self.add_child("obj_embed", nn.ObjectEmbedding(c.d_feat, c.d_model))
        self.cls = self.add_param("cls", (c.d_model,), "normal")
        self.segment = self.add_child("segment", nn.Embedding(2, c.d_model))
        self.encoder = self.add_child(
            "encoder", nn.Encoder(self.n_layers, c.d_model, c.n_heads, c.d_ff)
        )
        self.head = self.add_child("head", nn.ClassifierHead(c.d_model))
        self.finish_init()

    @property
    def n_layers(self) -> int:
        return self.config.L_lang + self.config.L_cross

    def forward(self, batch: Batch) -> np.ndarray:
        imgs = batch.images
        b, lt = batch.ids.shape
        n = imgs.obj_mask.shape[1]
        t = self.text_embed.forward(batch.ids)
        o = self.obj_embed.forward(imgs.feats, imgs.boxes)
        cls = np.broadcast_to(self.cls.value, (b, 1, self.config.d_model))
        seg = np.concatenate([np.zeros((b, 1 + lt), dtype=np.int64), np.ones((b, n), dtype=np.int64)], axis=1)
        x = np.concatenate([cls, t, o], axis=1) + self.segment.forward(seg)
        mask = np.concatenate([np.ones((b, 1)), batch.text_mask, imgs.obj_mask], axis=1)
        h = self.encoder.forward(x, mask)
        self._shape = h.shape
        self._lt = lt
        return self.head.forward(h[:, 0, :])

    def backward(self, dprob: np.ndarray) -> None:
        dh = np.zeros(self._shape)
        dh[:, 0, :] = self.head.backward(dprob)
        dx = self.encoder.backward(dh)
        self.segment.backward(dx)
        self.cls.grad += dx[:, 0, :].sum(axis=0)
        self.text_embed.backward(dx[:, 1 : 1 + self._lt])
        self.obj_embed.backward(dx[:, 1 + self._lt :])

    def head_parameters(self) -> list:
        return self.head.parameters()


def l2_normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return x / norm, norm


def l2_normalize_backward(dy: np.ndarray, y: np.ndarray, norm: np.ndarray) -> np.ndarray:
    return (dy - y * np.sum(dy * y, axis=-1, keepdims=True)) / norm


def contrastive_loss(logits: np.ndarray) -> float:
    """Symmetric cross-entropy over an n x n logit matrix whose diagonal holds the matches."""
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise ValueError(f"contrastive_loss needs a square logit matrix, got {logits.shape}")
    if logits.shape[0] < 2:
        raise ValueError("contrastive_loss needs at least 2 pairs")
    return 0.5 * (F.cross_entropy_diag(logits) + F.cross_entropy_diag(logits.T))


def contrastive_loss_backward(logits: np.ndarray) -> np.ndarray:
    return 0.5 * (F.cross_entropy_diag_backward(logits) + F.cross_entropy_diag_backward(logits.T).T)


class DualEncoder(Matcher):
    """Independent text and object towers joined only by a cosine similarity."""

    kind = "dual"

    def __init__(self, config: ModelConfig) -> None:
        super().__init__(config)
        c = config
        self.text_embed = self.add_child("text_embed", nn.TextEmbedding(c.vocab_size, c.max_len, c.d_model))
        self.lang_encoder = self.add_child("lang_encoder", nn.Encoder(c.L_lang, c.d_model, c.n_heads, c.d_ff))
        self.text_proj = self.add_child("text_proj", nn.Linear(c.d_model, c.d_emb))
        self.obj_embed = self.add_child("obj_embed", nn.ObjectEmbedding(c.d_feat, c.d_model))
        self.obj_encoder = self.add_child("obj_encoder", nn.Encoder(c.L_obj, c.d_model, c.n_heads, c.d_ff))
        self.image_proj = self.add_child("image_proj", nn.Linear(c.d_model, c.d_emb))
        self.logit_scale = self.add_param("logit_scale", (), LOGIT_SCALE_INIT)
        self.finish_init()

    @property
    def temperature(self) -> float:
        return float(np.clip(np.exp(self.logit_scale.value), LOGIT_SCALE_MIN, LOGIT_SCALE_MAX))

    def encode_text(self, ids: np.ndarray, text_mask: np.ndarray) -> np.ndarray:
        h = self.lang_encoder.forward(self.text_embed.forward(ids), text_mask)
        self._t_shape = h.shape
        z, self._t_norm = l2_normalize(self.text_proj.forward(h[:, 0, :]))
        self._t = z
        return z

    def encode_image(self, feats: np.ndarray, boxes: np.ndarray, obj_mask: np.ndarray) -> np.ndarray:
        h = self.obj_encoder.forward(self.obj_embed.forward(feats, boxes), obj_mask)
        w = obj_mask / obj_mask.sum(axis=1, keepdims=True)
        self._pool_w = w
        pooled = np.einsum("bn,bnd->bd", w, h)
        z, self._i_norm = l2_normalize(self.image_proj.forward(pooled))
        self._i = z
        return z

    def image_embeddings(self, records: list[ImageRecord]) -> np.ndarray:
        imgs = pad_images(records, self.config.N_obj)
        return self.encode_image(imgs.feats, imgs.boxes, imgs.obj_mask)

    def text_embeddings(self, tokens: list[TokenSequence]) -> np.ndarray:
        ids = np.array([t.ids for t in tokens], dtype=np.int64)
        mask = np.array([t.mask for t in tokens], dtype=F.DTYPE)
        return self.encode_text(ids, mask)

    def forward(self, batch: Batch) -> np.ndarray:
        """Cosine similarity of each (phrase, image) row of the batch."""
        t = self.encode_text(batch.ids, batch.text_mask)
        imgs = batch.images
        i = self.encode_image(imgs.feats, imgs.boxes, imgs.obj_mask)
        return np.sum(t * i, axis=-1)

    def backward(self, dsim: np.ndarray) -> None:
        self.backward_embeddings(dsim[:, None] * self._i, dsim[:, None] * self._t)

    def backward_embeddings(self, dt: np.ndarray, di: np.ndarray) -> None:
        dpt = self.text_proj.backward(l2_normalize_backward(dt, self._t, self._t_norm))
        dh = np.zeros(self._t_shape)
        dh[:, 0, :] = dpt
        self.text_embed.backward(self.lang_encoder.backward(dh))
        dpi = self.image_proj.backward(l2_normalize_backward(di, self._i, self._i_norm))
        dho = self._pool_w[:, :, None] * dpi[:, None, :]
        self.obj_embed.backward(self.obj_encoder.backward(dho))

    def contrastive_forward(self, batch: Batch) -> float:
        """Loss treating row ``j`` of the batch as the only match for phrase ``j``."""
        t = self.encode_text(batch.ids, batch.text_mask)
        imgs = batch.images
        i = self.encode_image(imgs.feats, imgs.boxes, imgs.obj_mask)
        self._sim = t @ i.T
        self._tau = self.temperature
        self._logits = self._tau * self._sim
        return contrastive_loss(self._logits)

    def contrastive_backward(self, dloss: float = 1.0) -> None:
        dlogits = dloss * contrastive_loss_backward(self._logits)
        dsim = self._tau * dlogits
        raw = float(np.exp(self.logit_scale.value))
        if LOGIT_SCALE_MIN < raw < LOGIT_SCALE_MAX:
            self.logit_scale.grad += np.sum(dlogits * self._sim) * raw
        self.backward_embeddings(dsim @ self._i, dsim.T @ self._t)

    def head_parameters(self) -> list:
        return self.text_proj.parameters() + self.image_proj.parameters() + [self.logit_scale]


MODEL_KINDS = {"cross": CrossModalMatcher, "early": EarlyFusionMatcher, "dual": DualEncoder}


def build_model(kind: str, config: ModelConfig) -> Matcher:
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(MODEL_KINDS)}")
    return MODEL_KINDS[kind](config)


def dual_score(tokens: TokenSequence, record: ImageRecord, dual: DualEncoder) -> float:
    """Raw cosine between the phrase and image embeddings."""
    t = dual.text_embeddings([tokens])
    i = dual.image_embeddings([record])
    return float(np.sum(t * i, axis=-1)[0])


def early_fusion_score(tokens: TokenSequence, record: ImageRecord, model: EarlyFusionMatcher) -> float:
    from .model import score

    return score(tokens, record, model)
