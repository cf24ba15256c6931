"""Synthetic corpus: determinism, detector exactness, caption/batch contracts,
and the binary round trip."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wordsight import corpus as cp


@pytest.fixture(scope="module")
def world():
    return cp.gen_world(seed=1, n_objects=8, n_attributes=4, d_v=32, n_fillers=10)


def test_vocab_arithmetic(world):
    # 8 + 4 + 10 words plus MASK and START
    assert world.vocab.size == 24
    assert world.vocab.mask_token == 22
    assert world.vocab.start_token == 23
    kinds = [world.vocab.token_kind(t) for t in range(world.vocab.size)]
    assert kinds.count("object") == 8
    assert kinds.count("attribute") == 4
    assert kinds.count("filler") == 10


def test_world_determinism():
    a = cp.gen_world(3, 8, 4, 32, 10)
    b = cp.gen_world(3, 8, 4, 32, 10)
    np.testing.assert_array_equal(a.object_prototypes, b.object_prototypes)
    np.testing.assert_array_equal(a.attribute_offsets, b.attribute_offsets)


def test_world_seeds_differ():
    a = cp.gen_world(1, 8, 4, 32, 10)
    b = cp.gen_world(2, 8, 4, 32, 10)
    assert np.linalg.norm(a.object_prototypes - b.object_prototypes) > 0


def test_world_norms(world):
    np.testing.assert_allclose(
        np.linalg.norm(world.object_prototypes, axis=1), np.ones(8), atol=1e-5
    )
    np.testing.assert_allclose(
        np.linalg.norm(world.attribute_offsets, axis=1), np.full(4, 0.5), atol=1e-5
    )


def test_world_rejects_bad_dv():
    with pytest.raises(ValueError, match="divisible"):
        cp.gen_world(1, 4, 2, 30, 5, last_layer_heads=4)
    with pytest.raises(ValueError, match=">= 8"):
        cp.gen_world(1, 4, 2, 4, 5, last_layer_heads=4)


def test_zero_noise_argmax_recovers_latents(world):
    rng = np.random.default_rng(0)
    for _ in range(5):
        sc = cp.gen_scene(world, rng, noise_sigma=0.0)
        np.testing.assert_array_equal(sc.p_obj.argmax(axis=1), sc.latent_obj)
        np.testing.assert_array_equal(sc.p_attr.argmax(axis=1), sc.latent_attr)


def test_scene_probabilities_normalized(world):
    rng = np.random.default_rng(1)
    sc = cp.gen_scene(world, rng, noise_sigma=0.3)
    np.testing.assert_allclose(sc.p_obj.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(sc.p_attr.sum(axis=1), 1.0, atol=1e-6)
    assert (sc.p_obj >= 0).all() and (sc.p_attr >= 0).all()


def test_scene_geometry_in_bounds(world):
    rng = np.random.default_rng(2)
    for _ in range(20):
        g = cp.gen_scene(world, rng, noise_sigma=0.2).geometry
        x, y, w, h = g.T
        assert (w >= 0.1).all() and (w <= 0.5).all()
        assert (h >= 0.1).all() and (h <= 0.5).all()
        assert (x >= 0).all() and (x + w <= 1.0 + 1e-6).all()
        assert (y >= 0).all() and (y + h <= 1.0 + 1e-6).all()


def test_noisy_tag_accuracy_between_chance_and_perfect(world):
    # Monte-Carlo oracle: heavy noise must hurt tags but not destroy them
    rng = np.random.default_rng(7)
    hits = total = 0
    for _ in range(1000):
        sc = cp.gen_scene(world, rng, noise_sigma=0.5)
        hits += int((sc.obj_tags == sc.latent_obj).sum())
        total += sc.n_regions
    acc = hits / total
    assert acc < 1.0
    assert acc > 1.0 / world.n_objects


def test_caption_permutation_of_region_words():
    world = cp.gen_world(1, 8, 4, 32, 10)
    rng = np.random.default_rng(3)
    sc = cp.gen_scene(world, rng, noise_sigma=0.0, n_regions=2)
    cap = cp.gen_caption(sc, world, rng, n_fillers_per_caption=0)
    expected = sorted(
        [world.vocab.object_token(o) for o in sc.latent_obj]
        + [world.vocab.attribute_token(a) for a in sc.latent_attr]
    )
    assert sorted(cap.tokens.tolist()) == expected


def test_caption_deterministic_under_fixed_rng(world):
    sc = cp.gen_scene(world, np.random.default_rng(4), noise_sigma=0.1)
    a = cp.gen_caption(sc, world, np.random.default_rng(9), 2)
    b = cp.gen_caption(sc, world, np.random.default_rng(9), 2)
    np.testing.assert_array_equal(a.tokens, b.tokens)


def test_caption_has_object_and_attribute_and_fits(world):
    rng = np.random.default_rng(5)
    for _ in range(100):
        sc = cp.gen_scene(world, rng, noise_sigma=0.1)
        cap = cp.gen_caption(sc, world, rng, n_fillers_per_caption=3, l_max=16)
        kinds = {world.vocab.token_kind(int(t)) for t in cap.tokens}
        assert "object" in kinds and "attribute" in kinds
        assert 1 <= len(cap.tokens) <= 16


def test_attribute_word_frequencies_roughly_uniform(world):
    rng = np.random.default_rng(6)
    counts = np.zeros(world.n_attributes)
    n_caps = 10_000
    scenes = [cp.gen_scene(world, rng, 0.1) for _ in range(50)]
    for i in range(n_caps):
        cap = cp.gen_caption(scenes[i % 50], world, rng, 1)
        for t in cap.tokens:
            if world.vocab.token_kind(int(t)) == "attribute":
                counts[int(t) - world.n_objects] += 1
    expect = counts.sum() / world.n_attributes
    assert (np.abs(counts - expect) < 0.3 * expect).all()


def test_caption_object_words_followed_by_their_attribute(world):
    rng = np.random.default_rng(11)
    pairs_in = lambda sc: set(zip(sc.latent_obj.tolist(), sc.latent_attr.tolist()))
    for _ in range(200):
        sc = cp.gen_scene(world, rng, noise_sigma=0.1)
        cap = cp.gen_caption(sc, world, rng, n_fillers_per_caption=2)
        toks = cap.tokens.tolist()
        for i, t in enumerate(toks):
            if world.vocab.token_kind(t) != "object":
                continue
            assert i + 1 < len(toks)
            nxt = toks[i + 1]
            assert world.vocab.token_kind(nxt) == "attribute"
            assert (t, nxt - world.n_objects) in pairs_in(sc)


def test_filler_frequencies_decay_geometrically(world):
    rng = np.random.default_rng(12)
    scenes = [cp.gen_scene(world, rng, 0.1) for _ in range(20)]
    counts = np.zeros(world.n_fillers)
    for i in range(10_000):
        cap = cp.gen_caption(scenes[i % 20], world, rng, 2)
        for t in cap.tokens:
            if world.vocab.token_kind(int(t)) == "filler":
                counts[int(t) - world.n_objects - world.n_attributes] += 1
    # successive frequency ratios hover around the decay constant
    ratios = counts[1:4] / counts[0:3]
    assert (ratios > 0.45).all() and (ratios < 0.75).all()


def test_attr_affinity_one_pins_preferred_attribute(world):
    rng = np.random.default_rng(13)
    sc = cp.gen_scene(world, rng, noise_sigma=0.1, attr_affinity=1.0)
    np.testing.assert_array_equal(
        sc.latent_attr, sc.latent_obj % world.n_attributes
    )


def test_attr_affinity_raises_preferred_rate(world):
    rng = np.random.default_rng(14)
    hits = total = 0
    for _ in range(200):
        sc = cp.gen_scene(world, rng, noise_sigma=0.1, attr_affinity=0.9)
        hits += int((sc.latent_attr == sc.latent_obj % world.n_attributes).sum())
        total += sc.n_regions
    # expected rate 0.9 + 0.1/n_attributes
    assert hits / total > 0.85


def test_attr_affinity_keeps_attribute_marginal_uniform(world):
    rng = np.random.default_rng(15)
    scenes = [cp.gen_scene(world, rng, 0.1, attr_affinity=0.9) for _ in range(50)]
    counts = np.zeros(world.n_attributes)
    for i in range(10_000):
        cap = cp.gen_caption(scenes[i % 50], world, rng, 1)
        for t in cap.tokens:
            if world.vocab.token_kind(int(t)) == "attribute":
                counts[int(t) - world.n_objects] += 1
    expect = counts.sum() / world.n_attributes
    assert (np.abs(counts - expect) < 0.3 * expect).all()


def test_gen_scene_rejects_bad_affinity(world):
    rng = np.random.default_rng(16)
    for bad in (-0.1, 1.5):
        with pytest.raises(ValueError, match="attr_affinity"):
            cp.gen_scene(world, rng, noise_sigma=0.1, attr_affinity=bad)


def test_rec_instance_single_region(world):
    rng = np.random.default_rng(8)
    sc = cp.gen_scene(world, rng, 0.0, n_regions=1)
    inst = cp.gen_downstream_instance("rec", sc, world, rng)
    assert inst.gold_region == 0
    assert len(inst.query_tokens) == 2


def test_vqa_positive_is_present(world):
    rng = np.random.default_rng(9)
    for _ in range(50):
        sc = cp.gen_scene(world, rng, 0.0)
        inst = cp.gen_downstream_instance("vqa", sc, world, rng)
        attr_tok, obj_tok = int(inst.question_tokens[0]), int(inst.question_tokens[1])
        pair = (obj_tok, attr_tok - world.n_objects)
        present = set(zip(sc.latent_obj.tolist(), sc.latent_attr.tolist()))
        if inst.answer == 1:
            assert pair in present
        else:
            assert pair not in present


def test_vqa_balance(world):
    rng = np.random.default_rng(10)
    scenes = [cp.gen_scene(world, rng, 0.1) for _ in range(64)]
    answers = [
        cp.gen_downstream_instance("vqa", scenes[i % 64], world, rng).answer
        for i in range(10_000)
    ]
    rate = np.mean(answers)
    assert abs(rate - 0.5) < 0.02


def test_ve_labels_match_pair_presence(world):
    rng = np.random.default_rng(11)
    for _ in range(100):
        sc = cp.gen_scene(world, rng, 0.0)
        inst = cp.gen_downstream_instance("ve", sc, world, rng)
        toks = inst.caption_tokens
        present = set(zip(sc.latent_obj.tolist(), sc.latent_attr.tolist()))
        mentioned = {
            (int(toks[2 * i]), int(toks[2 * i + 1]) - world.n_objects)
            for i in range(len(toks) // 2)
        }
        if inst.label == 1:
            assert mentioned <= present
        else:
            assert mentioned - present


def test_downstream_rejects_empty_scene(world):
    rng = np.random.default_rng(12)
    sc = cp.gen_scene(world, rng, 0.0)
    empty = cp.SceneSample(
        latent_obj=np.zeros(0, np.uint32), latent_attr=np.zeros(0, np.uint32),
        features=np.zeros((0, 32), np.float32), geometry=np.zeros((0, 4), np.float32),
        p_obj=np.zeros((0, 8), np.float32), p_attr=np.zeros((0, 4), np.float32),
        obj_tags=np.zeros(0, np.uint32), attr_tags=np.zeros(0, np.uint32),
    )
    with pytest.raises(ValueError, match="no regions"):
        cp.gen_downstream_instance("rec", empty, world, rng)
    with pytest.raises(ValueError, match="unknown kind"):
        cp.gen_downstream_instance("qa", sc, world, rng)


# ---------------------------------------------------------------------------
# splits and batches
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def corpus():
    return cp.make_corpus(
        seed=5, n_pretrain_scenes=40, n_pretrain_captions=60,
        n_finetune=16, n_eval=8,
    )


def test_pretrain_split_hides_pairing(corpus):
    sp = corpus.splits["pretrain"]
    assert sp.pairing is None
    assert all(c.source_scene_id == -1 for c in sp.captions)


def test_paired_split_is_bijection(corpus):
    sp = corpus.splits["finetune-train"]
    assert sp.pairing is not None
    assert sorted(sp.pairing.tolist()) == list(range(len(sp.scenes)))


def test_unpaired_batch_record_exposes_no_ids(corpus):
    rng = np.random.default_rng(0)
    batch = next(cp.make_batches(corpus.splits["pretrain"], 4, paired=False, rng=rng))
    assert isinstance(batch, cp.UnpairedBatch)
    assert set(vars(batch)) == {"scenes", "caption_tokens"}
    assert all(isinstance(t, np.ndarray) for t in batch.caption_tokens)


def test_unpaired_match_probability_near_reciprocal(corpus):
    # P(caption i drawn with its own source scene) should be about 1/N
    sp = corpus.splits["finetune-train"]  # known pairing, sampled unpaired
    n = len(sp.scenes)
    rng = np.random.default_rng(1)
    hits = draws = 0
    for _ in range(400):
        si = rng.integers(0, n, size=8)
        ci = rng.integers(0, n, size=8)
        hits += int((si == ci).sum())
        draws += 8
    assert abs(hits / draws - 1.0 / n) < 3.0 / n


def test_paired_batches_align(corpus):
    sp = corpus.splits["finetune-train"]
    rng = np.random.default_rng(2)
    batch = next(cp.make_batches(sp, 4, paired=True, rng=rng))
    assert len(batch.scenes) == 4 and len(batch.caption_tokens) == 4
    for sc, toks in zip(batch.scenes, batch.caption_tokens):
        objs = [int(t) for t in toks if corpus.world.vocab.token_kind(int(t)) == "object"]
        # every object word in an aligned caption names a region of its scene
        assert all(o in sc.latent_obj for o in objs)


def test_paired_on_pretrain_errors(corpus):
    with pytest.raises(ValueError, match="pairing"):
        next(cp.make_batches(corpus.splits["pretrain"], 4, paired=True,
                             rng=np.random.default_rng(0)))


def test_batch_stream_deterministic(corpus):
    sp = corpus.splits["pretrain"]
    a = cp.make_batches(sp, 4, False, np.random.default_rng(33))
    b = cp.make_batches(sp, 4, False, np.random.default_rng(33))
    for _ in range(3):
        ba, bb = next(a), next(b)
        for ta, tb in zip(ba.caption_tokens, bb.caption_tokens):
            np.testing.assert_array_equal(ta, tb)
        for sa, sb in zip(ba.scenes, bb.scenes):
            np.testing.assert_array_equal(sa.features, sb.features)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_corpus_roundtrip_bytes(tmp_path, corpus):
    p1 = tmp_path / "a.wsc"
    p2 = tmp_path / "b.wsc"
    cp.save_corpus(corpus, str(p1))
    loaded = cp.load_corpus(str(p1))
    cp.save_corpus(loaded, str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_corpus_regeneration_byte_identical(tmp_path):
    kw = dict(seed=9, n_pretrain_scenes=10, n_pretrain_captions=12, n_finetune=4, n_eval=2)
    p1, p2 = tmp_path / "a.wsc", tmp_path / "b.wsc"
    cp.save_corpus(cp.make_corpus(**kw), str(p1))
    cp.save_corpus(cp.make_corpus(**kw), str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_loaded_corpus_matches_original(tmp_path, corpus):
    p = tmp_path / "c.wsc"
    cp.save_corpus(corpus, str(p))
    loaded = cp.load_corpus(str(p))
    np.testing.assert_array_equal(
        loaded.world.object_prototypes, corpus.world.object_prototypes
    )
    for label, sp in corpus.splits.items():
        lsp = loaded.splits[label]
        assert lsp.noise_sigma == sp.noise_sigma
        assert len(lsp.scenes) == len(sp.scenes)
        np.testing.assert_array_equal(lsp.scenes[0].features, sp.scenes[0].features)
        np.testing.assert_array_equal(lsp.captions[0].tokens, sp.captions[0].tokens)
        if sp.pairing is None:
            assert lsp.pairing is None
        else:
            np.testing.assert_array_equal(lsp.pairing, sp.pairing)


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "junk.wsc"
    p.write_bytes(b"not a corpus at all")
    with pytest.raises(ValueError):
        cp.load_corpus(str(p))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_scene_probability_rows_property(seed, sigma):
    world = cp.gen_world(1, 6, 3, 16, 4)
    sc = cp.gen_scene(world, np.random.default_rng(seed), sigma, n_regions=4)
    np.testing.assert_allclose(sc.p_obj.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(sc.p_attr.sum(axis=1), 1.0, atol=1e-6)
    assert sc.obj_tags.max() < 6 and sc.attr_tags.max() < 3
