"""Fine-tuning heads and evaluation: retrieval, VQA, entailment, grounding.

A caption-scene pair is scored with one joint encoder pass: the caption's
text rows and the scene's projected region rows share a single sequence
(hallucination and tag rows are pre-training inputs and stay out). Each
modality's contextual states are mean-pooled, pushed through a square
linear map, and compared by scaled cosine. Fine-tuning minimizes 4-way
cross-entropy of the true pairing against three distractor pairings;
evaluation ranks every caption x scene pair for recall@K in both
directions, with ties broken by index so runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnmath as nn
from .nnmath import ops
from .corpus import CorpusSplit, SceneSample
from .encoder import LABEL_IMG, LABEL_START, LABEL_TEXT, EncoderOutput
from .model import PretrainModel

GAMMA_DEFAULT = 16.0


# -- pair scoring -------------------------------------------------------------


def joint_forward(
    model: PretrainModel, tokens: np.ndarray, scene: SceneSample
) -> EncoderOutput:
    """Encode caption tokens and scene regions as one paired sequence."""
    emb = model.embeddings
    seq = ops.concat(
        [
            emb.start_row(),
            emb.embed_text(np.asarray(tokens)),
            emb.project_visual(scene.features, scene.geometry),
        ],
        axis=0,
    )
    labels = (
        [LABEL_START]
        + [LABEL_TEXT] * len(tokens)
        + [LABEL_IMG] * len(scene.features)
    )
    return model.encoder.forward(seq, labels)


def pool(output: EncoderOutput, modality: str) -> nn.Tensor:
    """Arithmetic mean of the contextual states carrying `modality` labels.

    The start position has its own label and is therefore never included.
    """
    rows = [i for i, lab in enumerate(output.labels) if lab == modality]
    if not rows:
        raise ValueError(f"pool: no positions labeled {modality!r} in the sequence")
    picked = ops.take_rows(output.states, np.array(rows, dtype=np.int64))
    return ops.mean(picked, axis=0)


@dataclass
class RetrievalHead:
    """Square projections f_t, f_v (dimensionality-preserving) plus the
    cosine scale gamma."""

    f_t_w: nn.Parameter
    f_t_b: nn.Parameter
    f_v_w: nn.Parameter
    f_v_b: nn.Parameter
    gamma: float = GAMMA_DEFAULT

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError(f"RetrievalHead: gamma must be positive, got {self.gamma}")


def retrieval_head(model: PretrainModel, gamma: float = GAMMA_DEFAULT) -> RetrievalHead:
    """View of the model's retrieval projections as a RetrievalHead."""
    return RetrievalHead(
        model.ret_text_w, model.ret_text_b, model.ret_vis_w, model.ret_vis_b, gamma
    )


def match_score(pooled_t: nn.Tensor, pooled_v: nn.Tensor, head: RetrievalHead) -> nn.Tensor:
    """s = gamma * cos(f_t(pooled_t), f_v(pooled_v)), as a scalar Tensor."""
    ft = ops.linear(pooled_t, head.f_t_w, head.f_t_b)
    fv = ops.linear(pooled_v, head.f_v_w, head.f_v_b)
    if float(np.linalg.norm(ft.data)) == 0.0 or float(np.linalg.norm(fv.data)) == 0.0:
        raise ValueError("match_score: zero-norm projected vector, cosine undefined")
    dot = ops.tensor_sum(ops.mul(ft, fv))
    norms = ops.mul(
        ops.sqrt(ops.tensor_sum(ops.mul(ft, ft))),
        ops.sqrt(ops.tensor_sum(ops.mul(fv, fv))),
    )
    return ops.mul(ops.div(dot, norms), head.gamma)


def pair_score(
    model: PretrainModel,
    tokens: np.ndarray,
    scene: SceneSample,
    head: RetrievalHead,
) -> nn.Tensor:
    """Joint forward, pool both modalities, score."""
    out = joint_forward(model, tokens, scene)
    return match_score(pool(out, LABEL_TEXT), pool(out, LABEL_IMG), head)


# -- 4-way fine-tuning objective ----------------------------------------------


@dataclass
class FourWayInstance:
    """Anchor pair plus three distractor pairings; gold index 0.

    Candidates in order: (caption, scene), (wrong caption, scene),
    (caption, wrong scene), (wrong caption, wrong scene).
    """

    tokens: list  # 4 caption token arrays
    scenes: list  # 4 scenes


def _other_index(rng: np.random.Generator, n: int, avoid: int) -> int:
    # uniform over {0..n-1} minus avoid
    k = int(rng.integers(0, n - 1))
    return k + 1 if k >= avoid else k


def sample_fourway(
    split: CorpusSplit, anchor_caption: int, rng: np.random.Generator
) -> FourWayInstance:
    """Draw distractors uniformly from `split`, never equal to the anchor's."""
    if split.pairing is None:
        raise ValueError("sample_fourway: needs a paired split")
    n_cap, n_scene = len(split.captions), len(split.scenes)
    if n_cap < 2 or n_scene < 2:
        raise ValueError("sample_fourway: split too small to draw distractors")
    cap = split.captions[anchor_caption].tokens
    scene_idx = int(split.pairing[anchor_caption])
    scene = split.scenes[scene_idx]

    wrong_cap = split.captions[_other_index(rng, n_cap, anchor_caption)].tokens
    wrong_scene = split.scenes[_other_index(rng, n_scene, scene_idx)]
    wrong_cap2 = split.captions[_other_index(rng, n_cap, anchor_caption)].tokens
    wrong_scene2 = split.scenes[_other_index(rng, n_scene, scene_idx)]
    return FourWayInstance(
        tokens=[cap, wrong_cap, cap, wrong_cap2],
        scenes=[scene, scene, wrong_scene, wrong_scene2],
    )


def fourway_loss(
    model: PretrainModel, instance: FourWayInstance, head: RetrievalHead
) -> tuple[nn.Tensor, np.ndarray]:
    """Softmax cross-entropy over the 4 match scores, gold index 0.

    Returns the scalar loss and the raw scores for inspection.
    """
    scores = [
        ops.reshape(pair_score(model, t, v, head), (1,))
        for t, v in zip(instance.tokens, instance.scenes)
    ]
    logits = ops.reshape(ops.concat(scores, axis=0), (1, 4))
    loss = ops.cross_entropy(logits, np.array([0]))
    return loss, logits.data.reshape(4).copy()


# -- recall@K -----------------------------------------------------------------


@dataclass
class RecallRow:
    direction: str  # "TR" = image-to-text, "IR" = text-to-image
    k: int
    recall: float  # percent in [0, 100]
    split: str = ""
    domain: str = ""


def score_matrix(
    model: PretrainModel, split: CorpusSplit, head: RetrievalHead
) -> np.ndarray:
    """All caption x scene match scores, shape [n_captions, n_scenes]."""
    S = np.zeros((len(split.captions), len(split.scenes)), dtype=np.float64)
    with nn.no_grad():
        for i, cap in enumerate(split.captions):
            for j, scene in enumerate(split.scenes):
                S[i, j] = float(pair_score(model, cap.tokens, scene, head).data)
    return S


def _rank_of(scores_desc_target: np.ndarray, gold: int) -> int:
    # stable argsort of -scores: equal scores keep index order, so ties
    # resolve deterministically toward the lower index
    order = np.argsort(-scores_desc_target, kind="stable")
    return int(np.nonzero(order == gold)[0][0])


def recall_from_scores(
    scores: np.ndarray, pairing: np.ndarray, ks=(1, 5, 10)
) -> list[RecallRow]:
    """Recall table from a score matrix and the caption->scene bijection."""
    scores = np.asarray(scores)
    n_cap, n_scene = scores.shape
    pairing = np.asarray(pairing, dtype=np.int64)
    if len(pairing) != n_cap or n_cap != n_scene or (
        np.sort(pairing) != np.arange(n_scene)
    ).any():
        raise ValueError("recall_from_scores: pairing is not a caption<->scene bijection")
    gold_caption = np.empty(n_scene, dtype=np.int64)
    gold_caption[pairing] = np.arange(n_cap)

    tr_ranks = np.array(
        [_rank_of(scores[:, j], int(gold_caption[j])) for j in range(n_scene)]
    )
    ir_ranks = np.array(
        [_rank_of(scores[i, :], int(pairing[i])) for i in range(n_cap)]
    )
    rows = []
    for direction, ranks in (("TR", tr_ranks), ("IR", ir_ranks)):
        for k in ks:
            rows.append(RecallRow(direction, int(k), 100.0 * float(np.mean(ranks < k))))
    return rows


def recall_at_k(
    model: PretrainModel,
    split: CorpusSplit,
    head: RetrievalHead,
    ks=(1, 5, 10),
) -> list[RecallRow]:
    """Score every caption x scene pair in a paired split; both directions."""
    if split.pairing is None:
        raise ValueError("recall_at_k: needs a paired split")
    rows = recall_from_scores(score_matrix(model, split, head), split.pairing, ks)
    for r in rows:
        r.split = split.label
    return rows


def meta_sum(rows: list[RecallRow], direction: str) -> float:
    """Sum of the recalls of one direction (the usual three-K summary)."""
    return float(sum(r.recall for r in rows if r.direction == direction))


def cross_domain_eval(
    model: PretrainModel,
    in_domain: CorpusSplit,
    cross_domain: CorpusSplit,
    head: RetrievalHead,
    ks=(1, 5, 10),
) -> list[RecallRow]:
    """Recall rows for the training domain and a shifted domain, side by side."""
    rows = []
    for domain, split in (("in", in_domain), ("cross", cross_domain)):
        for r in recall_at_k(model, split, head, ks):
            r.domain = domain
            rows.append(r)
    return rows


# -- auxiliary task heads -----------------------------------------------------


def vqa_hidden_width(d_model: int) -> int:
    # the answer head keeps a 4:3 hidden-to-encoder width ratio at any scale
    return max(1, round(d_model * 4 / 3))


class TaskHeads:
    """Projection stacks for yes/no answering (two logits over pooled text
    and visual states), entailment (three logits), and region grounding
    (one score per region)."""

    def __init__(
        self,
        d_model: int,
        rng: np.random.Generator,
        dtype=np.float32,
        n_answers: int = 2,
    ):
        h = vqa_hidden_width(d_model)
        P = nn.Parameter

        def init(shape):
            return (rng.standard_normal(shape) * 0.02).astype(dtype)

        self.vqa_w1 = P("task.vqa_w1", init((h, 2 * d_model)))
        self.vqa_b1 = P("task.vqa_b1", np.zeros(h, dtype))
        self.vqa_w2 = P("task.vqa_w2", init((n_answers, h)))
        self.vqa_b2 = P("task.vqa_b2", np.zeros(n_answers, dtype))
        self.ve_w = P("task.ve_w", init((3, 2 * d_model)))
        self.ve_b = P("task.ve_b", np.zeros(3, dtype))
        self.rec_w1 = P("task.rec_w1", init((d_model, d_model)))
        self.rec_b1 = P("task.rec_b1", np.zeros(d_model, dtype))
        self.rec_w2 = P("task.rec_w2", init((1, d_model)))
        self.rec_b2 = P("task.rec_b2", np.zeros(1, dtype))

    def parameters(self) -> list[nn.Parameter]:
        return [
            self.vqa_w1, self.vqa_b1, self.vqa_w2, self.vqa_b2,
            self.ve_w, self.ve_b,
            self.rec_w1, self.rec_b1, self.rec_w2, self.rec_b2,
        ]


def _pooled_concat(model: PretrainModel, tokens: np.ndarray, scene: SceneSample) -> nn.Tensor:
    out = joint_forward(model, tokens, scene)
    return ops.concat([pool(out, LABEL_TEXT), pool(out, LABEL_IMG)], axis=0)


def vqa_forward(
    model: PretrainModel, heads: TaskHeads, question_tokens: np.ndarray, scene: SceneSample
) -> nn.Tensor:
    """Answer logits [n_answers] from the concatenated pooled pair vector."""
    c = _pooled_concat(model, question_tokens, scene)
    hidden = ops.gelu(ops.linear(c, heads.vqa_w1, heads.vqa_b1))
    return ops.linear(hidden, heads.vqa_w2, heads.vqa_b2)


def ve_forward(
    model: PretrainModel, heads: TaskHeads, caption_tokens: np.ndarray, scene: SceneSample
) -> nn.Tensor:
    """Entailment logits [3] from the concatenated pooled pair vector."""
    return ops.linear(_pooled_concat(model, caption_tokens, scene), heads.ve_w, heads.ve_b)


def rec_forward(
    model: PretrainModel, heads: TaskHeads, query_tokens: np.ndarray, scene: SceneSample
) -> nn.Tensor:
    """Per-region grounding scores [B]; argmax is the predicted region."""
    out = joint_forward(model, query_tokens, scene)
    rows = [i for i, lab in enumerate(out.labels) if lab == LABEL_IMG]
    v = ops.take_rows(out.states, np.array(rows, dtype=np.int64))
    hidden = ops.gelu(ops.linear(v, heads.rec_w1, heads.rec_b1))
    return ops.reshape(ops.linear(hidden, heads.rec_w2, heads.rec_b2), (-1,))


def rec_predict(
    model: PretrainModel, heads: TaskHeads, query_tokens: np.ndarray, scene: SceneSample
) -> int:
    with nn.no_grad():
        return int(np.argmax(rec_forward(model, heads, query_tokens, scene).data))
