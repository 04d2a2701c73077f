import math

import numpy as np
import pytest

from xmatch.baselines import (
    DualEncoder, EarlyFusionMatcher, build_model, contrastive_loss, dual_score, early_fusion_score,
)
from xmatch.model import ModelConfig
from xmatch.tokenizer import TokenSequence
from xmatch.training import gradcheck_kind, random_batch, randomize_parameters

from .conftest import random_record


def _tokens(ids, max_len):
    n = len(ids)
    return TokenSequence(tuple(ids) + (0,) * (max_len - n), (1,) * n + (0,) * (max_len - n), n)


def _random(kind, config, seed):
    m = build_model(kind, config)
    randomize_parameters(m, np.random.default_rng(seed), std=0.3)
    return m


# --- contrastive loss -------------------------------------------------------------


@pytest.mark.parametrize("n", [2, 4, 8])
def test_contrastive_uniform_is_ln_n(n):
    assert abs(contrastive_loss(np.full((n, n), 0.37)) - math.log(n)) <= 1e-12


def test_contrastive_hand_case():
    # each row and column: softmax of (2, 0) -> loss ln(1 + e^-2) in both directions
    got = contrastive_loss(np.array([[2.0, 0.0], [0.0, 2.0]]))
    assert abs(got - math.log(1 + math.exp(-2))) <= 1e-15


def test_contrastive_limit_and_errors():
    assert contrastive_loss(1e3 * np.eye(5)) < 1e-12
    with pytest.raises(ValueError):
        contrastive_loss(np.ones((1, 1)))
    with pytest.raises(ValueError):
        contrastive_loss(np.ones((2, 3)))


def test_contrastive_permutation_invariant():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 9))
        logits = rng.normal(scale=3.0, size=(n, n))
        perm = rng.permutation(n)
        assert abs(contrastive_loss(logits[perm][:, perm]) - contrastive_loss(logits)) <= 1e-12


# --- dual encoder -------------------------------------------------------------------


def test_dual_cosine_range_and_permutation(tiny_config):
    m = _random("dual", tiny_config, 1)
    rng = np.random.default_rng(2)
    tok = _tokens([2, 5, 7, 3], tiny_config.max_len)
    for k in range(20):
        rec = random_record(rng, str(k), int(rng.integers(1, 4)), tiny_config.d_feat)
        s = dual_score(tok, rec, m)
        assert -1.0 <= s <= 1.0
        perm = rng.permutation(len(rec.feats))
        assert abs(dual_score(tok, rec.permuted(perm), m) - s) <= 1e-10


def test_dual_self_cosine_is_one(tiny_config):
    m = _random("dual", tiny_config, 3)
    rec = random_record(np.random.default_rng(4), "a", 2, tiny_config.d_feat)
    z = m.image_embeddings([rec])
    assert abs(float(np.sum(z * z)) - 1.0) <= 1e-12
    assert abs(float(np.sum(z * -z)) + 1.0) <= 1e-12


def test_dual_precomputed_embeddings_bit_exact(tiny_config):
    m = _random("dual", tiny_config, 5)
    rng = np.random.default_rng(6)
    recs = [random_record(rng, str(k), int(rng.integers(1, 4)), tiny_config.d_feat) for k in range(5)]
    toks = [_tokens([2] + list(rng.integers(4, 20, size=k)) + [3], tiny_config.max_len) for k in (1, 2, 3, 1, 4)]
    image_cache = [m.image_embeddings([r])[0] for r in recs]
    text_cache = [m.text_embeddings([t])[0] for t in toks]
    for t, zt in zip(toks, text_cache):
        for r, zi in zip(recs, image_cache):
            assert float(np.sum(zt * zi)) == dual_score(t, r, m)


def test_dual_temperature_clamped(tiny_config):
    m = DualEncoder(tiny_config)
    assert abs(m.temperature - 1 / 0.07) < 1e-9
    m.logit_scale.value[...] = 10.0
    assert m.temperature == 100.0
    m.logit_scale.value[...] = -3.0
    assert m.temperature == 1.0


# --- early fusion -------------------------------------------------------------------


def test_early_fusion_range_and_padding(tiny_config):
    m = _random("early", tiny_config, 7)
    tight = EarlyFusionMatcher(ModelConfig(**{**tiny_config.to_dict(), "N_obj": 2}))
    for p, q in zip(tight.parameters(), m.parameters()):
        p.value[...] = q.value
    rng = np.random.default_rng(8)
    tok = _tokens([2, 9, 3], tiny_config.max_len)
    for k in range(20):
        rec = random_record(rng, str(k), int(rng.integers(1, 3)), tiny_config.d_feat)
        s = early_fusion_score(tok, rec, m)
        assert 0.0 < s < 1.0
        assert abs(early_fusion_score(tok, rec, tight) - s) <= 1e-10


def test_early_fusion_zeroed_attention_ignores_image(tiny_config):
    m = _random("early", tiny_config, 9)
    for layer in m.encoder.layers:
        layer.self_attn.attention.output.weight.value[...] = 0.0
        layer.self_attn.attention.output.bias.value[...] = 0.0
    rng = np.random.default_rng(10)
    tok = _tokens([2, 6, 3], tiny_config.max_len)
    scores = {early_fusion_score(tok, random_record(rng, str(k), 3, tiny_config.d_feat), m) for k in range(5)}
    assert len(scores) == 1
    # sanity: with attention live the image matters
    live = _random("early", tiny_config, 9)
    scores = {early_fusion_score(tok, random_record(rng, str(k), 3, tiny_config.d_feat), live) for k in range(5)}
    assert len(scores) == 5


def test_early_fusion_depth(tiny_config):
    c = ModelConfig()
    assert len(EarlyFusionMatcher(c).encoder.layers) == c.L_lang + c.L_cross


# --- gradients ---------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["early", "dual"])
def test_baseline_gradcheck(kind):
    err, worst = gradcheck_kind(kind, seed=1)
    assert err < 1e-4, worst


def test_dual_batch_forward_matches_rows(tiny_config):
    m = _random("dual", tiny_config, 11)
    batch = random_batch(tiny_config, 4, np.random.default_rng(12))
    sims = m.forward(batch)
    m.contrastive_forward(batch)
    np.testing.assert_allclose(np.diag(m._sim), sims, atol=1e-15)
