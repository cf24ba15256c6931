"""Masking protocol and the four equally weighted pre-training losses.

Masking selects each eligible position with independent Bernoulli(p).
Attribute positions are never eligible: attribute words in captions stay
visible, and tag masking replaces only the object-tag summand of a fused row
while the attribute summand survives. A sequence that draws no masks gets
exactly one forced mask among its eligible positions (for the scene sequence
the pool is the union of its tag and visual halves), so per-sequence losses
stay defined without distorting the overall rate; a batch-level backstop
guards the rare case where pooling still leaves one loss empty.

The caption-side hallucinations are computed from the masked token sequence:
the hallucinator must not see a masked word, otherwise it would leak the MLM
label through its own output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnmath as nn
from .corpus import SceneSample, UnpairedBatch, WordVocab
from .encoder import build_s1_sequence, build_s1_text_only, build_s2_sequence
from .hallucinator import wfh_loss
from .model import PretrainModel
from .nnmath import ops

POLICY_MASK = "mask"
POLICY_BERT = "bert"  # 80/10/10 mask/random/keep


@dataclass
class MaskingPlan:
    caption_masks: list[np.ndarray]  # bool [L_i]
    caption_repl: list[np.ndarray]  # replacement token per position (int [L_i])
    tag_masks: list[np.ndarray]  # bool [B]
    visual_masks: list[np.ndarray]  # bool [B]

    def masked_caption(self, tokens: np.ndarray, i: int) -> np.ndarray:
        out = tokens.copy()
        m = self.caption_masks[i]
        out[m] = self.caption_repl[i][m]
        return out

    def masked_tags(self, scene: SceneSample, i: int, mask_token: int) -> np.ndarray:
        out = scene.obj_tags.astype(np.int64)
        out[self.tag_masks[i]] = mask_token
        return out

    def masked_features(self, scene: SceneSample, i: int) -> np.ndarray:
        out = scene.features.copy()
        out[self.visual_masks[i]] = 0.0
        return out


def _force_one(mask: np.ndarray, eligible: np.ndarray, rng) -> None:
    pool = np.flatnonzero(eligible)
    if pool.size and not mask[eligible].any():
        mask[pool[int(rng.integers(0, pool.size))]] = True


def plan_masks(
    batch: UnpairedBatch,
    vocab: WordVocab,
    rng: np.random.Generator,
    p: float = 0.15,
    policy: str = POLICY_MASK,
) -> MaskingPlan:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"plan_masks: p={p} outside [0, 1]")
    if policy not in (POLICY_MASK, POLICY_BERT):
        raise ValueError(f"plan_masks: unknown replacement policy '{policy}'")

    caption_masks, caption_repl = [], []
    for tokens in batch.caption_tokens:
        kinds = np.array([vocab.token_kind(int(t)) for t in tokens])
        eligible = kinds != "attribute"
        mask = (rng.random(len(tokens)) < p) & eligible
        _force_one(mask, eligible, rng)
        repl = np.full(len(tokens), vocab.mask_token, dtype=np.int64)
        if policy == POLICY_BERT:
            roll = rng.random(len(tokens))
            rand_tok = rng.integers(0, vocab.size - 2, size=len(tokens))
            repl = np.where(
                roll < 0.8, vocab.mask_token,
                np.where(roll < 0.9, rand_tok, tokens.astype(np.int64)),
            )
        caption_masks.append(mask)
        caption_repl.append(repl)

    tag_masks, visual_masks = [], []
    for scene in batch.scenes:
        B = scene.n_regions
        tags = rng.random(B) < p
        vis = rng.random(B) < p
        if not (tags.any() or vis.any()):
            # forced mask drawn over the union of both halves
            j = int(rng.integers(0, 2 * B))
            if j < B:
                tags[j] = True
            else:
                vis[j - B] = True
        tag_masks.append(tags)
        visual_masks.append(vis)

    # batch-level backstop: each scene-side loss needs at least one position
    if batch.scenes:
        if not any(m.any() for m in tag_masks):
            tag_masks[0][0] = True
        if not any(m.any() for m in visual_masks):
            visual_masks[0][0] = True

    return MaskingPlan(caption_masks, caption_repl, tag_masks, visual_masks)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    mlm: float
    mtc: float
    moc: float
    wfh: float
    total: float
    total_tensor: nn.Tensor | None = None


def mlm_loss(model: PretrainModel, hidden_rows: nn.Tensor, targets: np.ndarray) -> nn.Tensor:
    """Vocabulary cross-entropy at pooled masked caption positions."""
    logits = ops.linear(hidden_rows, model.mlm_w, model.mlm_b)
    return ops.cross_entropy(logits, targets)


def mtc_loss(model: PretrainModel, hidden_rows: nn.Tensor, targets: np.ndarray) -> nn.Tensor:
    """Object-class cross-entropy at pooled masked tag positions."""
    logits = ops.linear(hidden_rows, model.mtc_w, model.mtc_b)
    return ops.cross_entropy(logits, targets)


def moc_loss(model: PretrainModel, hidden_rows: nn.Tensor, soft_targets: np.ndarray) -> nn.Tensor:
    """Soft cross-entropy against detector distributions at masked visual
    positions."""
    logits = ops.linear(hidden_rows, model.moc_w, model.moc_b)
    return ops.cross_entropy(logits, soft_targets)


def pretrain_losses(
    model: PretrainModel,
    batch: UnpairedBatch,
    plan: MaskingPlan,
    vocab: WordVocab,
) -> tuple[nn.Tensor, LossBreakdown, dict]:
    """Both forward passes and the four losses; returns the total as a graph
    node plus per-term floats and retained attention tensors.

    A model built without a hallucinator trains the baseline way: captions
    are encoded without hallucination rows and the regression term is zero.
    A model configured without attributes drops the attribute summand from
    fused tag rows."""
    if not isinstance(batch, UnpairedBatch):
        raise ValueError(
            "pretrain_losses: pre-training consumes unpaired batches only"
        )
    emb = model.embeddings
    halluc = model.hallucinator
    dict_kv = halluc.precompute_dict_kv() if halluc is not None else None
    include_attrs = model.cfg.include_attributes

    # pass A: captions (with hallucinations when present) -> MLM
    mlm_rows, mlm_targets = [], []
    s1_attentions = []
    for i, tokens in enumerate(batch.caption_tokens):
        masked = plan.masked_caption(tokens.astype(np.int64), i)
        if halluc is not None:
            tok_rows = emb.token_rows(masked)  # raw rows: no position inside WFH
            hal = halluc.hallucinate(tok_rows, dict_kv)
            seq, labels = build_s1_sequence(emb, masked, hal.vectors)
        else:
            seq, labels = build_s1_text_only(emb, masked)
        out = model.encoder.forward(seq, labels)
        s1_attentions.append(out.attentions)
        sel = np.flatnonzero(plan.caption_masks[i])
        mlm_rows.append(ops.take_rows(out.states, 1 + sel))
        mlm_targets.append(tokens[sel].astype(np.int64))
    l_mlm = mlm_loss(model, ops.concat(mlm_rows, axis=0), np.concatenate(mlm_targets))

    # pass B: scenes -> WFH regression + MTC + MOC
    wfh_terms = []
    mtc_rows, mtc_targets = [], []
    moc_rows, moc_targets = [], []
    s2_attentions, wfh_cross = [], []
    for i, scene in enumerate(batch.scenes):
        if halluc is not None:
            fused = emb.token_rows(scene.obj_tags.astype(np.int64))
            if include_attrs:
                fused = ops.add(
                    fused, emb.token_rows(scene.attr_tags.astype(np.int64))
                )
            hal = halluc.hallucinate(fused, dict_kv)
            wfh_terms.append(wfh_loss(hal.vectors, scene.features))
            wfh_cross.append(hal.cross_attentions)

        B = scene.n_regions
        seq, labels = build_s2_sequence(
            emb,
            plan.masked_features(scene, i),
            scene.geometry,
            plan.masked_tags(scene, i, vocab.mask_token),
            scene.attr_tags.astype(np.int64),
            include_attributes=include_attrs,
        )
        out = model.encoder.forward(seq, labels)
        s2_attentions.append(out.attentions)
        tag_sel = np.flatnonzero(plan.tag_masks[i])
        if tag_sel.size:
            mtc_rows.append(ops.take_rows(out.states, 1 + B + tag_sel))
            mtc_targets.append(scene.obj_tags[tag_sel].astype(np.int64))
        vis_sel = np.flatnonzero(plan.visual_masks[i])
        if vis_sel.size:
            moc_rows.append(ops.take_rows(out.states, 1 + vis_sel))
            moc_targets.append(scene.p_obj[vis_sel])

    l_mtc = mtc_loss(model, ops.concat(mtc_rows, axis=0), np.concatenate(mtc_targets))
    l_moc = moc_loss(model, ops.concat(moc_rows, axis=0), np.concatenate(moc_targets))
    total = ops.add(ops.add(l_mlm, l_mtc), l_moc)
    wfh_val = 0.0
    if wfh_terms:
        l_wfh = ops.mul(ops.concat([ops.reshape(t, (1,)) for t in wfh_terms], axis=0),
                        1.0 / len(wfh_terms))
        l_wfh = ops.tensor_sum(l_wfh)
        total = ops.add(total, l_wfh)
        wfh_val = float(l_wfh.data)

    breakdown = LossBreakdown(
        mlm=float(l_mlm.data), mtc=float(l_mtc.data), moc=float(l_moc.data),
        wfh=wfh_val, total=float(total.data), total_tensor=total,
    )
    extras = {
        "s1_attentions": s1_attentions,
        "s2_attentions": s2_attentions,
        "wfh_cross_attentions": wfh_cross,
    }
    return total, breakdown, extras


def pretrain_step(
    model: PretrainModel,
    batch: UnpairedBatch,
    vocab: WordVocab,
    rng: np.random.Generator,
    p: float = 0.15,
    policy: str = POLICY_MASK,
) -> LossBreakdown:
    """Plan masks, run both passes, and backprop the equally weighted total."""
    plan = plan_masks(batch, vocab, rng, p, policy)
    total, breakdown, _ = pretrain_losses(model, batch, plan, vocab)
    model.zero_grads()
    total.backward()
    return breakdown
