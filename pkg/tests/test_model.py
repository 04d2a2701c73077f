import numpy as np
import pytest

from xmatch import nn
from xmatch.data import CandidatePool, DataError, collate, pad_images
from xmatch.model import ConfigError, CrossModalMatcher, ModelConfig, expected_parameter_count, rank_pool, score
from xmatch.tokenizer import TokenSequence, Vocabulary
from xmatch.training import RunConfig, randomize_parameters, random_batch, train

from .conftest import TRACE_TOKENS, random_record


def _tokens(ids, max_len):
    n = len(ids)
    return TokenSequence(tuple(ids) + (0,) * (max_len - n), (1,) * n + (0,) * (max_len - n), n)


def _random_model(config, seed):
    m = CrossModalMatcher(config)
    randomize_parameters(m, np.random.default_rng(seed), std=0.3)
    return m


# --- init ---------------------------------------------------------------------


def test_desk_parameter_count_hand_counted():
    # text 64*32+16*32+64 = 2624; objects 288+64+160+64 = 576
    # encoder layer 4288 + 4256 = 8544 (x4); cross layer 4*4288 + 2*4256 = 25664 (x2)
    # head 1056 + 64 + 33 = 1153
    hand = 2624 + 576 + 4 * 8544 + 2 * 25664 + 1153
    config = ModelConfig()
    m = CrossModalMatcher(config)
    assert sum(p.value.size for p in m.parameters()) == hand == 89857
    assert expected_parameter_count(config) == hand


def test_init_is_deterministic_and_named():
    a, b = CrossModalMatcher(ModelConfig(seed=5)), CrossModalMatcher(ModelConfig(seed=5))
    pa, pb = a.param_dict(), b.param_dict()
    assert list(pa) == list(pb)
    assert all(np.array_equal(pa[n].value, pb[n].value) for n in pa)
    assert len(set(pa)) == len(pa)
    assert "model.head.linear1.weight" in pa
    assert all(p.name == n for n, p in pa.items())
    c = CrossModalMatcher(ModelConfig(seed=6))
    assert not np.array_equal(pa["model.head.linear1.weight"].value, c.param_dict()["model.head.linear1.weight"].value)


def test_init_distribution():
    p = CrossModalMatcher(ModelConfig()).param_dict()
    w = p["model.lang_encoder.layers.0.ffn.intermediate.weight"].value
    assert abs(w.std() - 0.02) < 0.002
    assert np.all(p["model.lang_encoder.layers.0.ffn.intermediate.bias"].value == 0)
    assert np.all(p["model.head.norm.gamma"].value == 1) and np.all(p["model.head.norm.beta"].value == 0)


def test_bad_config():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(L_lang=0)


# --- embeddings ---------------------------------------------------------------


def test_embed_text(tiny_config):
    m = _random_model(tiny_config, 0)
    a = m.embed_text(np.array([[2, 5, 7, 3, 0, 0]]))
    b = m.embed_text(np.array([[2, 5, 9, 4, 3, 0]]))
    assert a.shape == (1, tiny_config.max_len, tiny_config.d_model)
    np.testing.assert_array_equal(a[0, :2], b[0, :2])
    m.text_embed.word.weight.value[...] = 0
    m.text_embed.position.weight.value[...] = 0
    out = m.embed_text(np.array([[2, 5, 7, 3, 0, 0]]))
    np.testing.assert_array_equal(out[0], np.broadcast_to(m.text_embed.norm.beta.value, out[0].shape))


def test_embed_objects(tiny_config):
    m = _random_model(tiny_config, 1)
    rng = np.random.default_rng(0)
    feats, boxes = rng.normal(size=(1, 3, 5)), rng.uniform(size=(1, 3, 4))
    feats[0, 2], boxes[0, 2] = feats[0, 0], boxes[0, 0]
    out = m.embed_objects(feats, boxes)
    np.testing.assert_array_equal(out[0, 0], out[0, 2])
    perm = [1, 2, 0]
    np.testing.assert_array_equal(m.embed_objects(feats[:, perm], boxes[:, perm]), out[:, perm])
    m.obj_embed.feat_proj.bias.value[...] = 0
    m.obj_embed.box_proj.bias.value[...] = 0
    zero = m.embed_objects(np.zeros((1, 1, 5)), np.zeros((1, 1, 4)))
    expect = (m.obj_embed.feat_norm.beta.value + m.obj_embed.box_norm.beta.value) / 2
    np.testing.assert_allclose(zero[0, 0], expect, atol=1e-15)


# --- encoders -----------------------------------------------------------------


def test_single_valid_token_depends_only_on_itself(tiny_config):
    m = _random_model(tiny_config, 2)
    mask = np.array([[1.0, 0, 0, 0, 0, 0]])
    a = m.lang_encoder.forward(m.embed_text(np.array([[2, 5, 7, 3, 0, 0]])), mask)
    b = m.lang_encoder.forward(m.embed_text(np.array([[2, 9, 1, 4, 8, 6]])), mask)
    np.testing.assert_allclose(a[0, 0], b[0, 0], atol=1e-12)


def test_appending_masked_positions(tiny_config):
    m = _random_model(tiny_config, 3)
    ids = np.array([[2, 5, 7, 3]])
    short = m.lang_encoder.forward(m.embed_text(ids), np.ones((1, 4)))
    ids_long = np.array([[2, 5, 7, 3, 11, 12]])
    long = m.lang_encoder.forward(m.embed_text(ids_long), np.array([[1.0, 1, 1, 1, 0, 0]]))
    np.testing.assert_allclose(long[0, :4], short[0], atol=1e-10)


def test_object_encoder_permutation_equivariant(tiny_config):
    m = _random_model(tiny_config, 4)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 3, tiny_config.d_model))
    mask = np.ones((1, 3))
    perm = [2, 0, 1]
    np.testing.assert_allclose(m.obj_encoder.forward(x[:, perm], mask), m.obj_encoder.forward(x, mask)[:, perm], atol=1e-10)


def test_cross_with_zeroed_cross_outputs_is_text_only_transformer(tiny_config):
    m = _random_model(tiny_config, 5)
    for layer in m.cross_encoder:
        layer.text_cross.attention.output.weight.value[...] = 0
        layer.text_cross.attention.output.bias.value[...] = 0
    rng = np.random.default_rng(2)
    t = rng.normal(size=(2, 6, 8))
    o = rng.normal(size=(2, 3, 8))
    tm = np.array([[1.0, 1, 1, 0, 0, 0], [1, 1, 1, 1, 1, 1]])
    om = np.array([[1.0, 1, 0], [1, 1, 1]])
    t_out, o_out = m.encode_cross(t, o, tm, om)
    assert t_out.shape == t.shape and o_out.shape == o.shape

    # independent text-only stack sharing the surviving text-side weights
    ref = t
    for layer in m.cross_encoder:
        norm = nn.LayerNorm(8)
        norm.gamma.value[...] = layer.text_cross.norm.gamma.value
        norm.beta.value[...] = layer.text_cross.norm.beta.value
        enc = nn.EncoderLayer(8, 2, 12)
        src = dict(layer.text_self.named_parameters("self_attn.")) | dict(layer.text_ffn.named_parameters("ffn."))
        for name, p in enc.named_parameters():
            p.value[...] = src[name].value
        ref = enc.forward(norm.forward(ref), tm)
    np.testing.assert_allclose(t_out, ref, atol=1e-12)


def test_cross_text_stream_invariant_to_object_order(tiny_config):
    m = _random_model(tiny_config, 6)
    rng = np.random.default_rng(3)
    t, o = rng.normal(size=(1, 6, 8)), rng.normal(size=(1, 3, 8))
    tm, om = np.ones((1, 6)), np.ones((1, 3))
    perm = [1, 2, 0]
    a, _ = m.encode_cross(t, o, tm, om)
    b, _ = m.encode_cross(t, o[:, perm], tm, om)
    np.testing.assert_allclose(a, b, atol=1e-10)


# --- head ---------------------------------------------------------------------


def test_head_zero_final_linear_is_half():
    head = nn.ClassifierHead(8)
    head.initialize(np.random.default_rng(0))
    head.linear2.weight.value[...] = 0
    head.linear2.bias.value[...] = 0
    out = head.forward(np.random.default_rng(1).normal(size=(5, 8)))
    assert np.all(out == 0.5)


def test_head_range_and_monotone_bias():
    rng = np.random.default_rng(7)
    for _ in range(10):
        head = nn.ClassifierHead(8)
        head.initialize(rng)
        for p in head.parameters():
            p.value[...] = rng.normal(scale=2.0, size=p.shape)
        x = rng.normal(scale=3.0, size=(100, 8))
        out = head.forward(x)
        assert np.all((out > 0) & (out < 1))
        head.linear2.bias.value[...] += 0.5
        assert np.all(head.forward(x) > out)


def test_head_gelu_is_live():
    rng = np.random.default_rng(8)
    head = nn.ClassifierHead(8)
    head.initialize(rng)
    for p in head.parameters():
        p.value[...] = 0.3 * rng.normal(size=p.shape)
    x = rng.normal(size=(4, 8))
    with_gelu = head.forward(x)
    head.activation = lambda z: z
    assert np.max(np.abs(head.forward(x) - with_gelu)) > 1e-3


# --- score / rank -------------------------------------------------------------


def test_score_invariances(tiny_config):
    m = _random_model(tiny_config, 9)
    rng = np.random.default_rng(4)
    rec = random_record(rng, "a", 3, tiny_config.d_feat)
    tok = _tokens([2, 7, 5, 3], tiny_config.max_len)
    r = score(tok, rec, m)
    assert 0 < r < 1
    assert abs(score(tok, rec.permuted([2, 0, 1]), m) - r) < 1e-10
    # two objects scored with N_obj=2 (no padding) vs padded to N_obj=3
    rec2 = random_record(rng, "b", 2, tiny_config.d_feat)
    tight = CrossModalMatcher(ModelConfig(**{**tiny_config.to_dict(), "N_obj": 2}))
    for (n, p), (_, q) in zip(tight.param_dict().items(), m.param_dict().items()):
        p.value[...] = q.value
    assert abs(score(tok, rec2, tight) - score(tok, rec2, m)) < 1e-10


def test_score_reproducible_bit_exact(tiny_config):
    rec = random_record(np.random.default_rng(5), "a", 2, tiny_config.d_feat)
    tok = _tokens([2, 4, 3], tiny_config.max_len)
    assert score(tok, rec, CrossModalMatcher(tiny_config)) == score(tok, rec, CrossModalMatcher(tiny_config))


def test_rank_pool(tiny_config):
    vocab = Vocabulary(TRACE_TOKENS)
    config = ModelConfig(**{**tiny_config.to_dict(), "vocab_size": len(vocab)})
    m = _random_model(config, 10)
    rng = np.random.default_rng(6)
    feats = {f"i{k}": random_record(rng, f"i{k}", int(rng.integers(1, 4)), config.d_feat) for k in range(6)}
    ranked = rank_pool("fun game", CandidatePool(("i3",)), m, feats, vocab)
    assert [r[0] for r in ranked] == ["i3"]
    pool = CandidatePool(tuple(feats))
    ranked = rank_pool("fun game", pool, m, feats, vocab)
    assert sorted(r[0] for r in ranked) == sorted(pool.image_ids)
    scores = [r[1] for r in ranked]
    assert scores == sorted(scores, reverse=True)
    with pytest.raises(DataError):
        rank_pool("fun", CandidatePool(("nope",)), m, feats, vocab)


def test_rank_pool_ties_by_id(tiny_config):
    vocab = Vocabulary(TRACE_TOKENS)
    m = CrossModalMatcher(ModelConfig(**{**tiny_config.to_dict(), "vocab_size": len(vocab)}))
    m.head.linear2.weight.value[...] = 0
    rng = np.random.default_rng(7)
    feats = {k: random_record(rng, k, 2, tiny_config.d_feat) for k in ("c", "a", "b")}
    ranked = rank_pool("play", CandidatePool(("c", "a", "b")), m, feats, vocab)
    assert ranked == [("a", 0.5), ("b", 0.5), ("c", 0.5)]


def test_backward_needs_no_masked_keys(tiny_config):
    m = CrossModalMatcher(tiny_config)
    batch = random_batch(tiny_config, 2, np.random.default_rng(0))
    batch.images.obj_mask[0] = 0
    with pytest.raises(ValueError):
        m.forward(batch)


def test_freeze_encoders_only_moves_head(tiny_config):
    from xmatch.data import SynthSpec, synth_generate

    spec = SynthSpec(n_train=16, n_eval=4, n_images=12, d_feat=tiny_config.d_feat, n_obj=3)
    corpus = synth_generate(spec, 0)
    vocab = Vocabulary(spec.vocab_tokens())
    cfg = RunConfig(steps=3, seed=1, freeze_encoders=True, **{k: v for k, v in tiny_config.to_dict().items() if k not in ("vocab_size", "seed")})
    m = CrossModalMatcher(cfg.model_config(len(vocab)))
    before = {n: p.value.copy() for n, p in m.param_dict().items()}
    train(m, corpus.train, corpus.features, vocab, cfg)
    assert any(not np.array_equal(before[n], p.value) for n, p in m.param_dict().items() if n.startswith("model.head."))
    assert all(np.array_equal(before[n], p.value) for n, p in m.param_dict().items() if not n.startswith("model.head."))
