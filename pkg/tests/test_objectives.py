"""Masking plans, the four losses, and the combined pre-training step."""

import numpy as np
import pytest

from wordsight import corpus as cp
from wordsight import nnmath as nn
from wordsight import objectives as obj
from wordsight.encoder import EncoderConfig
from wordsight.hallucinator import WFHConfig
from wordsight.model import ModelConfig, PretrainModel
from wordsight.nnmath import ops
from wordsight.vocab import VisualDictionary


def micro_setup(seed=0, dtype=np.float32, n_regions=2, use_hallucinator=True):
    world = cp.gen_world(1, 3, 2, 8, 2, last_layer_heads=2)
    rng = np.random.default_rng(seed)
    scenes = [cp.gen_scene(world, rng, 0.05, n_regions=n_regions) for _ in range(2)]
    captions = [cp.gen_caption(sc, world, rng, 1, l_max=6).tokens for sc in scenes]
    batch = cp.UnpairedBatch(scenes=scenes, caption_tokens=captions)
    feats = np.concatenate([sc.features for sc in scenes])
    d = VisualDictionary(entries=feats[:4].copy(), momentum=0.99)
    if dtype == np.float64:
        d.entries = d.entries.astype(np.float64)
    cfg = ModelConfig(
        encoder=EncoderConfig(d_model=16, n_layers=1, n_heads=2, d_v=8,
                              vocab_size=world.vocab.size, l_max=6,
                              max_regions=4, d_ffw=24),
        wfh=WFHConfig(d_model=16, d_v=8, n_layers=2, self_heads=2,
                      cross_heads=2, cross_heads_last=2),
        n_objects=3,
        use_hallucinator=use_hallucinator,
    )
    model = PretrainModel(cfg, d, seed=7, dtype=dtype)
    return world, batch, model


# ---------------------------------------------------------------------------
# masking plans
# ---------------------------------------------------------------------------


def test_p_zero_forces_exactly_one_mask_per_sequence():
    world, batch, _ = micro_setup()
    plan = obj.plan_masks(batch, world.vocab, np.random.default_rng(0), p=0.0)
    for m in plan.caption_masks:
        assert m.sum() == 1
    for tags, vis in zip(plan.tag_masks, plan.visual_masks):
        assert tags.sum() + vis.sum() == 1  # one forced mask over the union


def test_p_one_masks_all_eligible_and_no_attributes():
    world, batch, _ = micro_setup()
    plan = obj.plan_masks(batch, world.vocab, np.random.default_rng(1), p=1.0)
    for tokens, m in zip(batch.caption_tokens, plan.caption_masks):
        kinds = np.array([world.vocab.token_kind(int(t)) for t in tokens])
        np.testing.assert_array_equal(m, kinds != "attribute")
    for tags, vis in zip(plan.tag_masks, plan.visual_masks):
        assert tags.all() and vis.all()


def test_attribute_positions_never_masked_over_many_plans():
    world, batch, _ = micro_setup()
    rng = np.random.default_rng(2)
    for _ in range(500):
        plan = obj.plan_masks(batch, world.vocab, rng)
        for tokens, m in zip(batch.caption_tokens, plan.caption_masks):
            for pos in np.flatnonzero(m):
                assert world.vocab.token_kind(int(tokens[pos])) != "attribute"


def test_empirical_mask_rate():
    # measured at standard desk shapes; the forced-mask correction decays
    # with eligible length, so short toy captions would overshoot
    world = cp.gen_world(1, 8, 4, 32, 10)
    gen = np.random.default_rng(0)
    scenes = [cp.gen_scene(world, gen, 0.1, n_regions=8) for _ in range(8)]
    caps = [cp.gen_caption(s, world, gen, 10, l_max=16).tokens for s in scenes]
    batch = cp.UnpairedBatch(scenes=scenes, caption_tokens=caps)
    rng = np.random.default_rng(3)
    masked = eligible = 0
    while eligible < 100_000:
        plan = obj.plan_masks(batch, world.vocab, rng)
        for tokens, m in zip(batch.caption_tokens, plan.caption_masks):
            kinds = np.array([world.vocab.token_kind(int(t)) for t in tokens])
            eligible += int((kinds != "attribute").sum())
            masked += int(m.sum())
        for tags, vis in zip(plan.tag_masks, plan.visual_masks):
            eligible += tags.size + vis.size
            masked += int(tags.sum() + vis.sum())
    assert abs(masked / eligible - 0.15) < 0.01


def test_masked_tags_keep_attribute_summand():
    world, batch, model = micro_setup()
    plan = obj.plan_masks(batch, world.vocab, np.random.default_rng(4), p=1.0)
    sc = batch.scenes[0]
    masked = plan.masked_tags(sc, 0, world.vocab.mask_token)
    assert (masked == world.vocab.mask_token).all()
    fused = model.embeddings.fuse_tags(masked, sc.attr_tags.astype(np.int64), sc.geometry)
    no_attr = model.embeddings.fuse_tags(
        masked, sc.attr_tags.astype(np.int64), sc.geometry, include_attributes=False
    )
    attr_rows = model.embeddings.token_table.data[sc.attr_tags.astype(np.int64)]
    np.testing.assert_allclose(fused.data - no_attr.data, attr_rows, atol=1e-6)


def test_masked_features_are_zero():
    world, batch, _ = micro_setup()
    plan = obj.plan_masks(batch, world.vocab, np.random.default_rng(5), p=1.0)
    f = plan.masked_features(batch.scenes[0], 0)
    assert (f == 0).all()


def test_bert_policy_mixes_replacements():
    world, batch, _ = micro_setup(n_regions=8)
    rng = np.random.default_rng(6)
    saw_mask = saw_keep = saw_random = False
    for _ in range(200):
        plan = obj.plan_masks(batch, world.vocab, rng, p=0.5, policy="bert")
        for tokens, m, r in zip(batch.caption_tokens, plan.caption_masks, plan.caption_repl):
            for pos in np.flatnonzero(m):
                if r[pos] == world.vocab.mask_token:
                    saw_mask = True
                elif r[pos] == tokens[pos]:
                    saw_keep = True
                else:
                    saw_random = True
    assert saw_mask and saw_keep and saw_random


def test_plan_rejects_bad_inputs():
    world, batch, _ = micro_setup()
    with pytest.raises(ValueError, match="outside"):
        obj.plan_masks(batch, world.vocab, np.random.default_rng(0), p=1.5)
    with pytest.raises(ValueError, match="policy"):
        obj.plan_masks(batch, world.vocab, np.random.default_rng(0), policy="woops")


# ---------------------------------------------------------------------------
# individual losses
# ---------------------------------------------------------------------------


def test_uniform_logits_give_log_vocab():
    world, batch, model = micro_setup()
    model.mlm_w.data[:] = 0
    model.mlm_b.data[:] = 0
    rows = nn.constant(np.random.default_rng(7).normal(size=(5, 16)).astype(np.float32))
    loss = obj.mlm_loss(model, rows, np.zeros(5, dtype=np.int64))
    np.testing.assert_allclose(float(loss.data), np.log(world.vocab.size), atol=1e-5)


def test_uniform_mtc_gives_log_objects():
    _, _, model = micro_setup()
    model.mtc_w.data[:] = 0
    model.mtc_b.data[:] = 0
    rows = nn.constant(np.zeros((3, 16), np.float32))
    loss = obj.mtc_loss(model, rows, np.array([0, 1, 2]))
    np.testing.assert_allclose(float(loss.data), np.log(3), atol=1e-6)


def test_perfect_prediction_near_zero():
    _, _, model = micro_setup()
    model.mlm_w.data[:] = 0
    model.mlm_b.data[:] = 0
    # one-hot hidden rows with an identity-block head give huge target logits
    rows = np.zeros((4, 16), np.float32)
    targets = np.array([0, 1, 2, 3])
    for i, t in enumerate(targets):
        rows[i, t] = 50.0
        model.mlm_w.data[t, t] = 1.0
    loss = obj.mlm_loss(model, nn.constant(rows), targets)
    assert float(loss.data) < 1e-6


def test_moc_matching_distribution_gives_entropy():
    p = np.array([[0.7, 0.2, 0.1], [0.25, 0.5, 0.25]])
    logits = nn.constant(np.log(p))
    loss = ops.cross_entropy(logits, p)
    want = -(p * np.log(p)).sum(axis=1).mean()
    np.testing.assert_allclose(float(loss.data), want, atol=1e-7)


# ---------------------------------------------------------------------------
# the combined step
# ---------------------------------------------------------------------------


def test_total_is_exact_sum():
    world, batch, model = micro_setup()
    plan = obj.plan_masks(batch, world.vocab, np.random.default_rng(8))
    total, bd, _ = obj.pretrain_losses(model, batch, plan, world.vocab)
    assert abs(bd.total - (bd.mlm + bd.mtc + bd.moc + bd.wfh)) < 1e-6


def test_zeroing_wfh_inputs_removes_exactly_that_term():
    world, batch, model = micro_setup()
    plan = obj.plan_masks(batch, world.vocab, np.random.default_rng(9))
    total_a, bd_a, _ = obj.pretrain_losses(model, batch, plan, world.vocab)
    # aim every hallucination exactly at the detector features: zero out all
    # value projections so v^o == 0, and zero the features too
    for sc in batch.scenes:
        sc.features[:] = 0
    for layer in model.hallucinator.layers:
        layer.cross_wv.data[:] = 0
    total_b, bd_b, _ = obj.pretrain_losses(model, batch, plan, world.vocab)
    assert bd_b.wfh == 0.0
    assert abs(bd_b.total - (bd_b.mlm + bd_b.mtc + bd_b.moc)) < 1e-6


def test_paired_batch_rejected():
    world, batch, model = micro_setup()
    paired = cp.PairedBatch(scenes=batch.scenes, caption_tokens=batch.caption_tokens)
    plan = obj.plan_masks(batch, world.vocab, np.random.default_rng(10))
    with pytest.raises(ValueError, match="unpaired"):
        obj.pretrain_losses(model, paired, plan, world.vocab)


def test_hallucinator_sees_masked_tokens_not_originals():
    world, batch, model = micro_setup()
    plan = obj.plan_masks(batch, world.vocab, np.random.default_rng(11), p=0.0)
    pos = int(np.flatnonzero(plan.caption_masks[0])[0])
    tokens_b = [t.copy() for t in batch.caption_tokens]
    # swap the masked-out token for a different word of the same kind
    old = int(tokens_b[0][pos])
    for cand in range(world.vocab.size - 2):
        if cand != old and world.vocab.token_kind(cand) == world.vocab.token_kind(old):
            tokens_b[0][pos] = cand
            break
    batch_b = cp.UnpairedBatch(scenes=batch.scenes, caption_tokens=tokens_b)
    _, _, ex_a = obj.pretrain_losses(model, batch, plan, world.vocab)
    _, _, ex_b = obj.pretrain_losses(model, batch_b, plan, world.vocab)
    # identical masked sequences -> identical S1 processing; a label leak
    # through the hallucinator would show up here
    for att_a, att_b in zip(ex_a["s1_attentions"][0], ex_b["s1_attentions"][0]):
        np.testing.assert_array_equal(att_a, att_b)


def test_wfh_term_independent_of_captions():
    world, batch, model = micro_setup()
    plan = obj.plan_masks(batch, world.vocab, np.random.default_rng(12))
    _, bd_a, _ = obj.pretrain_losses(model, batch, plan, world.vocab)
    other = [t[::-1].copy() for t in batch.caption_tokens]
    batch_b = cp.UnpairedBatch(scenes=batch.scenes, caption_tokens=other)
    _, bd_b, _ = obj.pretrain_losses(model, batch_b, plan, world.vocab)
    assert bd_a.wfh == bd_b.wfh


def test_mlm_only_backward_reaches_wfh_parameters():
    world, batch, model = micro_setup()
    plan = obj.plan_masks(batch, world.vocab, np.random.default_rng(13))
    emb = model.embeddings
    dict_kv = model.hallucinator.precompute_dict_kv()
    from wordsight.encoder import build_s1_sequence

    rows, targets = [], []
    for i, tokens in enumerate(batch.caption_tokens):
        masked = plan.masked_caption(tokens.astype(np.int64), i)
        hal = model.hallucinator.hallucinate(emb.token_rows(masked), dict_kv)
        seq, labels = build_s1_sequence(emb, masked, hal.vectors)
        out = model.encoder.forward(seq, labels)
        sel = np.flatnonzero(plan.caption_masks[i])
        rows.append(ops.take_rows(out.states, 1 + sel))
        targets.append(tokens[sel].astype(np.int64))
    loss = obj.mlm_loss(model, ops.concat(rows, axis=0), np.concatenate(targets))
    model.zero_grads()
    loss.backward()
    wfh_params = model.hallucinator.parameters()
    assert all(p.grad is not None for p in wfh_params)
    assert any(np.abs(p.grad).max() > 0 for p in wfh_params)


def test_pretrain_step_backward_populates_gradients():
    world, batch, model = micro_setup()
    bd = obj.pretrain_step(model, batch, world.vocab, np.random.default_rng(14))
    assert np.isfinite(bd.total)
    grads = [np.abs(p.grad).max() for p in model.parameters()]
    assert max(grads) > 0


def test_full_step_gradcheck_micro():
    world, batch, model = micro_setup(dtype=np.float64)
    plan = obj.plan_masks(batch, world.vocab, np.random.default_rng(15), p=0.5)
    assert any(m.any() for m in plan.tag_masks)
    assert any(m.any() for m in plan.visual_masks)

    def loss():
        total, _, _ = obj.pretrain_losses(model, batch, plan, world.vocab)
        return total

    report = nn.check_gradients(loss, model.parameters(), seed=6)
    assert report.passed(1e-4), report.summary()


def test_baseline_model_trains_without_regression_term():
    world, batch, model = micro_setup(use_hallucinator=False)
    bd = obj.pretrain_step(model, batch, world.vocab, np.random.default_rng(16))
    assert bd.wfh == 0.0
    assert abs(bd.total - (bd.mlm + bd.mtc + bd.moc)) < 1e-6
    assert np.isfinite(bd.total)
    grads = [np.abs(p.grad).max() for p in model.parameters()]
    assert max(grads) > 0


def test_attribute_ablation_ignores_attribute_tags():
    # with the attribute summand gated off, scrambling the sampled attribute
    # tags cannot move any loss term
    world, batch, model = micro_setup(use_hallucinator=True)
    model.cfg.include_attributes = False
    plan = obj.plan_masks(batch, world.vocab, np.random.default_rng(17), p=0.5)
    _, before, _ = obj.pretrain_losses(model, batch, plan, world.vocab)
    for sc in batch.scenes:
        sc.attr_tags = (sc.attr_tags + 1) % world.n_attributes
    _, after, _ = obj.pretrain_losses(model, batch, plan, world.vocab)
    assert before.mlm == after.mlm
    assert before.mtc == after.mtc
    assert before.moc == after.moc
    assert before.wfh == after.wfh
