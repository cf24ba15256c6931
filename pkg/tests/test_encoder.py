"""Embeddings, sequence builders, and the transformer stack."""

import numpy as np
import pytest

from wordsight import encoder as enc
from wordsight import nnmath as nn
from wordsight.nnmath import ops


def tiny_cfg(**kw):
    base = dict(d_model=16, n_layers=2, n_heads=2, d_v=8, vocab_size=12,
                l_max=6, max_regions=4, d_ffw=32)
    base.update(kw)
    return enc.EncoderConfig(**base)


@pytest.fixture()
def emb():
    return enc.EmbeddingTables(tiny_cfg(), np.random.default_rng(0))


@pytest.fixture()
def model():
    cfg = tiny_cfg()
    rng = np.random.default_rng(1)
    return enc.EmbeddingTables(cfg, rng), enc.Encoder(cfg, rng)


def test_config_rejects_bad_heads():
    with pytest.raises(ValueError, match="divisible"):
        tiny_cfg(d_model=10, n_heads=3)


def test_embed_text_same_token_same_position(emb):
    a = emb.embed_text(np.array([3, 3]))
    # same token at positions 0 and 1 differ only by the positional term
    delta = a.data[1] - a.data[0]
    np.testing.assert_allclose(delta, emb.pos_text_w.data, atol=1e-6)


def test_embed_text_position_zero_decomposition(emb):
    row = emb.embed_text(np.array([5])).data[0]
    expected = (
        emb.token_table.data[5] + emb.pos_text_b.data
        + emb.type_table.data[enc.TYPE_TEXT]
    )
    np.testing.assert_allclose(row, expected, atol=1e-6)


def test_embed_text_rejects_out_of_range(emb):
    with pytest.raises(ValueError, match="out of range"):
        emb.embed_text(np.array([99]))


def test_fuse_tags_additivity(emb):
    o = np.array([1, 2])
    a = np.array([4, 5])
    geom = np.random.default_rng(2).uniform(0.1, 0.5, size=(2, 4))
    fused = emb.fuse_tags(o, a, geom).data
    obj_only = emb.fuse_tags(o, a, geom, include_attributes=False).data
    np.testing.assert_allclose(fused - obj_only, emb.token_table.data[a], atol=1e-6)


def test_fuse_tags_same_token_doubles(emb):
    geom = np.zeros((1, 4))
    fused = emb.fuse_tags(np.array([3]), np.array([3]), geom).data[0]
    tag_part = fused - emb.image_positions(geom).data[0] - emb.type_table.data[enc.TYPE_TEXT]
    np.testing.assert_allclose(tag_part, 2 * emb.token_table.data[3], atol=1e-6)


def test_fuse_tags_length_mismatch(emb):
    with pytest.raises(ValueError, match="lengths disagree"):
        emb.fuse_tags(np.array([1]), np.array([1, 2]), np.zeros((1, 4)))


def test_project_visual_zero_weights(emb):
    emb.f_w.data[:] = 0
    emb.f_b.data[:] = 0
    v = np.random.default_rng(3).normal(size=(2, 8)).astype(np.float32)
    geom = np.zeros((2, 4))
    rows = emb.project_visual(v, geom).data
    expected = emb.image_positions(geom).data + emb.type_table.data[enc.TYPE_VISUAL]
    np.testing.assert_allclose(rows, expected, atol=1e-6)


def test_f_projection_linearity(emb):
    emb.f_b.data[:] = 0
    v = np.random.default_rng(4).normal(size=(3, 8)).astype(np.float32)
    one = emb.f_project(v).data
    two = emb.f_project(2 * v).data
    np.testing.assert_allclose(two, 2 * one, atol=1e-5)


def test_f_project_dim_mismatch(emb):
    with pytest.raises(ValueError, match="d_v"):
        emb.f_project(np.zeros((2, 5), np.float32))


def test_s1_length_and_shared_positions(emb):
    tokens = np.array([1, 2, 3])
    h = np.random.default_rng(5).normal(size=(3, 8)).astype(np.float32)
    seq, labels = enc.build_s1_sequence(emb, tokens, h)
    assert seq.data.shape[0] == 7  # 1 + 3 + 3
    assert labels == ["start"] + ["text"] * 3 + ["hal"] * 3
    # text row l and hallucination row l carry the same positional term
    text_pos = emb.text_positions(3).data
    hal_rows = seq.data[4:7]
    hal_base = emb.f_project(h).data + emb.type_table.data[enc.TYPE_VISUAL]
    np.testing.assert_allclose(hal_rows - hal_base, text_pos, atol=1e-6)


def test_s1_mask_replacement_leaves_hallucinations_alone(emb):
    rng = np.random.default_rng(6)
    tokens = np.array([1, 2, 3])
    h = rng.normal(size=(3, 8)).astype(np.float32)
    masked = tokens.copy()
    masked[1] = 10  # pretend mask token
    a, _ = enc.build_s1_sequence(emb, tokens, h)
    b, _ = enc.build_s1_sequence(emb, masked, h)
    np.testing.assert_array_equal(a.data[4:], b.data[4:])
    assert np.any(a.data[2] != b.data[2])


def test_s1_length_mismatch(emb):
    with pytest.raises(ValueError, match="hallucinations"):
        enc.build_s1_sequence(emb, np.array([1, 2]), np.zeros((3, 8), np.float32))


def test_s2_length(emb):
    rng = np.random.default_rng(7)
    B = 4
    feats = rng.normal(size=(B, 8)).astype(np.float32)
    geom = np.abs(rng.uniform(0, 0.5, size=(B, 4)))
    seq, labels = enc.build_s2_sequence(
        emb, feats, geom, np.arange(B), np.arange(B) + 4
    )
    assert seq.data.shape[0] == 1 + 2 * B
    assert labels.count("img") == B and labels.count("tag") == B


def test_s2_zeroed_features_hit_bias(emb):
    geom = np.zeros((2, 4))
    seq, _ = enc.build_s2_sequence(emb, np.zeros((2, 8), np.float32), geom)
    expected = (
        emb.f_b.data + emb.image_positions(geom).data
        + emb.type_table.data[enc.TYPE_VISUAL]
    )
    np.testing.assert_allclose(seq.data[1:3], expected, atol=1e-6)


# ---------------------------------------------------------------------------
# transformer
# ---------------------------------------------------------------------------


def test_single_position_attention_is_one(model):
    emb, encoder = model
    seq, labels = enc.build_s1_text_only(emb, np.array([], dtype=np.int64))
    out = encoder.forward(seq, labels)
    for att in out.attentions:
        np.testing.assert_allclose(att, np.ones_like(att))


def test_attention_rows_sum_to_one(model):
    emb, encoder = model
    rng = np.random.default_rng(8)
    tokens = rng.integers(0, 10, size=5)
    h = rng.normal(size=(5, 8)).astype(np.float32)
    seq, labels = enc.build_s1_sequence(emb, tokens, h)
    out = encoder.forward(seq, labels)
    assert len(out.attentions) == 2
    for att in out.attentions:
        np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-5)


def test_permutation_equivariance(model):
    # positions are baked into the rows, so swapping two rows swaps outputs
    emb, encoder = model
    rng = np.random.default_rng(9)
    x = rng.normal(size=(5, 16)).astype(np.float32)
    perm = np.array([0, 3, 2, 1, 4])
    out_a = encoder.forward(nn.constant(x), ["text"] * 5).states.data
    out_b = encoder.forward(nn.constant(x[perm]), ["text"] * 5).states.data
    np.testing.assert_allclose(out_a[perm], out_b, atol=1e-5)


def test_overlong_sequence_rejected(model):
    emb, encoder = model
    n = encoder.cfg.max_seq_len + 1
    with pytest.raises(ValueError, match="exceeds"):
        encoder.forward(nn.constant(np.zeros((n, 16), np.float32)), ["text"] * n)


def test_parameters_shared_across_modalities(model):
    emb, encoder = model
    # the same parameter objects serve an S1 pass and an S2 pass
    before = {id(p) for p in encoder.parameters()}
    rng = np.random.default_rng(10)
    s1, l1 = enc.build_s1_text_only(emb, np.array([1, 2]))
    s2, l2 = enc.build_s2_sequence(
        emb, rng.normal(size=(2, 8)).astype(np.float32),
        np.zeros((2, 4)), np.array([0, 1]), np.array([4, 5]),
    )
    encoder.forward(s1, l1)
    encoder.forward(s2, l2)
    assert {id(p) for p in encoder.parameters()} == before


def test_encoder_gradcheck_tiny():
    cfg = enc.EncoderConfig(d_model=8, n_layers=1, n_heads=2, d_v=4,
                            vocab_size=6, l_max=3, max_regions=2, d_ffw=12)
    rng = np.random.default_rng(11)
    emb = enc.EmbeddingTables(cfg, rng, dtype=np.float64)
    encoder = enc.Encoder(cfg, rng, dtype=np.float64)
    tokens = np.array([1, 2])
    h = rng.normal(size=(2, 4))
    params = emb.parameters() + encoder.parameters()

    def loss():
        seq, labels = enc.build_s1_sequence(emb, tokens, h.astype(np.float64))
        out = encoder.forward(seq, labels)
        return ops.mean(ops.mul(out.states, out.states))

    report = nn.check_gradients(loss, params, seed=3)
    assert report.passed(1e-4), report.summary()


def test_embedding_gradcheck():
    cfg = enc.EncoderConfig(d_model=8, n_layers=1, n_heads=2, d_v=4,
                            vocab_size=6, l_max=4, max_regions=2, d_ffw=12)
    rng = np.random.default_rng(12)
    emb = enc.EmbeddingTables(cfg, rng, dtype=np.float64)
    o, a = np.array([0, 1]), np.array([2, 3])
    geom = rng.uniform(0.1, 0.6, size=(2, 4))
    v = rng.normal(size=(2, 4))

    def loss():
        fused = emb.fuse_tags(o, a, geom)
        vis = emb.project_visual(v, geom)
        both = ops.concat([fused, vis], axis=0)
        return ops.tensor_sum(ops.mul(both, both))

    report = nn.check_gradients(loss, emb.parameters(), seed=4)
    assert report.passed(1e-4), report.summary()
