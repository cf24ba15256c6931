"""Single-stream transformer encoder and every input embedding.

One parameter set serves both input kinds. The caption sequence is
[start] + L token rows + L projected-hallucination rows; the scene sequence
is [start] + B projected visual rows + B fused tag rows. Text positions use a
linear map of the scalar index, image positions a linear map of the box
geometry, and a two-row modality table marks text vs visual rows. The
projection f (W_f, b_f) that lifts visual features to the hidden width is
the same set of weights whether it is applied to detector features or to
hallucinated ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnmath as nn
from .nnmath import ops

TYPE_TEXT = 0
TYPE_VISUAL = 1

# per-position modality labels used by the analysis pass
LABEL_START = "start"
LABEL_TEXT = "text"
LABEL_HAL = "hal"
LABEL_IMG = "img"
LABEL_TAG = "tag"


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_v: int = 32
    vocab_size: int = 24
    l_max: int = 16
    max_regions: int = 8
    d_ffw: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"EncoderConfig: d_model={self.d_model} not divisible by "
                f"n_heads={self.n_heads}"
            )

    @property
    def max_seq_len(self) -> int:
        return 1 + 2 * max(self.l_max, self.max_regions)


def _init(rng: np.random.Generator, shape, dtype, scale=0.02) -> np.ndarray:
    return (rng.standard_normal(shape) * scale).astype(dtype)


class EmbeddingTables:
    """Token table, positional maps, modality types, and the shared f."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        d, dv, V = cfg.d_model, cfg.d_v, cfg.vocab_size
        P = nn.Parameter
        self.token_table = P("embed.token_table", _init(rng, (V, d), dtype))
        self.pos_text_w = P("embed.pos_text_w", _init(rng, (d,), dtype))
        self.pos_text_b = P("embed.pos_text_b", _init(rng, (d,), dtype))
        self.pos_img_w = P("embed.pos_img_w", _init(rng, (d, 4), dtype))
        self.pos_img_b = P("embed.pos_img_b", _init(rng, (d,), dtype))
        self.type_table = P("embed.type_table", _init(rng, (2, d), dtype))
        self.f_w = P("embed.f_w", _init(rng, (d, dv), dtype))
        self.f_b = P("embed.f_b", np.zeros(d, dtype))

    def parameters(self) -> list[nn.Parameter]:
        return [
            self.token_table, self.pos_text_w, self.pos_text_b,
            self.pos_img_w, self.pos_img_b, self.type_table, self.f_w, self.f_b,
        ]

    # -- building blocks ----------------------------------------------------

    def text_positions(self, length: int) -> nn.Tensor:
        """p^W(l) = w*l + b for l = 0..length-1, as a [length, d] Tensor."""
        ls = np.arange(length, dtype=self.token_table.data.dtype)[:, None]
        scaled = ops.mul(ops.reshape(self.pos_text_w, (1, -1)), nn.constant(ls))
        return ops.add(scaled, self.pos_text_b)

    def image_positions(self, geometry: np.ndarray) -> nn.Tensor:
        g = np.asarray(geometry, dtype=self.token_table.data.dtype)
        if g.ndim != 2 or g.shape[1] != 4:
            raise ValueError(f"image_positions: geometry must be [B, 4], got {g.shape}")
        return ops.linear(nn.constant(g), self.pos_img_w, self.pos_img_b)

    def type_row(self, type_id: int) -> nn.Tensor:
        return ops.take_rows(self.type_table, np.array([type_id]))

    def token_rows(self, tokens: np.ndarray) -> nn.Tensor:
        tokens = np.asarray(tokens)
        if tokens.size and int(tokens.max()) >= self.cfg.vocab_size:
            raise ValueError(
                f"token id {int(tokens.max())} out of range for vocab "
                f"size {self.cfg.vocab_size}"
            )
        return ops.gather(self.token_table, tokens.astype(np.int64))

    def f_project(self, v) -> nn.Tensor:
        """The shared visual-to-hidden projection f(v) = W_f v + b_f."""
        v_t = v if isinstance(v, nn.Tensor) else nn.constant(
            np.asarray(v, dtype=self.token_table.data.dtype)
        )
        if v_t.data.shape[-1] != self.cfg.d_v:
            raise ValueError(
                f"f_project: feature dim {v_t.data.shape[-1]} != d_v {self.cfg.d_v}"
            )
        return ops.linear(v_t, self.f_w, self.f_b)

    # -- spec-level embedding ops --------------------------------------------

    def embed_text(self, tokens: np.ndarray) -> nn.Tensor:
        rows = self.token_rows(tokens)
        rows = ops.add(rows, self.text_positions(len(tokens)))
        return ops.add(rows, self.type_row(TYPE_TEXT))

    def fuse_tags(
        self,
        o_tokens: np.ndarray,
        a_tokens: np.ndarray,
        geometry: np.ndarray,
        include_attributes: bool = True,
    ) -> nn.Tensor:
        o_tokens, a_tokens = np.asarray(o_tokens), np.asarray(a_tokens)
        if len(o_tokens) != len(a_tokens) or len(o_tokens) != len(geometry):
            raise ValueError(
                f"fuse_tags: lengths disagree ({len(o_tokens)} object tags, "
                f"{len(a_tokens)} attribute tags, {len(geometry)} boxes)"
            )
        rows = self.token_rows(o_tokens)
        if include_attributes:
            rows = ops.add(rows, self.token_rows(a_tokens))
        rows = ops.add(rows, self.image_positions(geometry))
        return ops.add(rows, self.type_row(TYPE_TEXT))

    def project_visual(self, v, geometry: np.ndarray) -> nn.Tensor:
        rows = ops.add(self.f_project(v), self.image_positions(geometry))
        return ops.add(rows, self.type_row(TYPE_VISUAL))

    def start_row(self, type_id: int = TYPE_TEXT) -> nn.Tensor:
        # convention: the start row is the START token plus its modality type,
        # with no positional term
        start = self.cfg.vocab_size - 1
        return ops.add(self.token_rows(np.array([start])), self.type_row(type_id))


def build_s1_sequence(
    emb: EmbeddingTables,
    tokens: np.ndarray,
    hallucinations,
) -> tuple[nn.Tensor, list[str]]:
    """[start] + L text rows + L hallucination rows; halves share position l."""
    L = len(tokens)
    h_data = hallucinations.data if isinstance(hallucinations, nn.Tensor) else hallucinations
    if h_data.shape[0] != L:
        raise ValueError(
            f"build_s1_sequence: {L} tokens but {h_data.shape[0]} hallucinations"
        )
    text = emb.embed_text(tokens)
    hal = ops.add(emb.f_project(hallucinations), emb.text_positions(L))
    hal = ops.add(hal, emb.type_row(TYPE_VISUAL))
    seq = ops.concat([emb.start_row(TYPE_TEXT), text, hal], axis=0)
    labels = [LABEL_START] + [LABEL_TEXT] * L + [LABEL_HAL] * L
    return seq, labels


def build_s1_text_only(emb: EmbeddingTables, tokens: np.ndarray) -> tuple[nn.Tensor, list[str]]:
    """Caption sequence without the hallucination half (retrieval and the
    no-hallucinator baseline)."""
    seq = ops.concat([emb.start_row(TYPE_TEXT), emb.embed_text(tokens)], axis=0)
    return seq, [LABEL_START] + [LABEL_TEXT] * len(tokens)


def build_s2_sequence(
    emb: EmbeddingTables,
    features,
    geometry: np.ndarray,
    o_tokens: np.ndarray | None = None,
    a_tokens: np.ndarray | None = None,
    include_attributes: bool = True,
) -> tuple[nn.Tensor, list[str]]:
    """[start] + B visual rows + B fused tag rows (tag half optional)."""
    vis = emb.project_visual(features, geometry)
    B = vis.data.shape[0]
    parts = [emb.start_row(TYPE_TEXT), vis]
    labels = [LABEL_START] + [LABEL_IMG] * B
    if o_tokens is not None:
        parts.append(emb.fuse_tags(o_tokens, a_tokens, geometry, include_attributes))
        labels += [LABEL_TAG] * B
    return ops.concat(parts, axis=0), labels


@dataclass
class EncoderOutput:
    states: nn.Tensor  # [n, d_model]
    attentions: list[np.ndarray]  # per layer, [n_heads, n, n]
    labels: list[str]


class EncoderLayer:
    def __init__(self, cfg: EncoderConfig, idx: int, rng: np.random.Generator, dtype):
        d, M, dff = cfg.d_model, cfg.n_heads, cfg.d_ffw
        dh = d // M
        P = nn.Parameter
        pre = f"encoder.layer{idx}"
        self.wq = P(f"{pre}.wq", _init(rng, (M, dh, d), dtype))
        self.wk = P(f"{pre}.wk", _init(rng, (M, dh, d), dtype))
        self.wv = P(f"{pre}.wv", _init(rng, (M, dh, d), dtype))
        self.ln1_gain = P(f"{pre}.ln1_gain", np.ones(d, dtype))
        self.ln1_bias = P(f"{pre}.ln1_bias", np.zeros(d, dtype))
        self.ffw_w1 = P(f"{pre}.ffw_w1", _init(rng, (dff, d), dtype))
        self.ffw_b1 = P(f"{pre}.ffw_b1", np.zeros(dff, dtype))
        self.ffw_w2 = P(f"{pre}.ffw_w2", _init(rng, (d, dff), dtype))
        self.ffw_b2 = P(f"{pre}.ffw_b2", np.zeros(d, dtype))
        self.ln2_gain = P(f"{pre}.ln2_gain", np.ones(d, dtype))
        self.ln2_bias = P(f"{pre}.ln2_bias", np.zeros(d, dtype))

    def parameters(self) -> list[nn.Parameter]:
        return [
            self.wq, self.wk, self.wv, self.ln1_gain, self.ln1_bias,
            self.ffw_w1, self.ffw_b1, self.ffw_w2, self.ffw_b2,
            self.ln2_gain, self.ln2_bias,
        ]

    def forward(self, x: nn.Tensor) -> tuple[nn.Tensor, np.ndarray]:
        att, probs = ops.multi_head_attention(x, x, x, self.wq, self.wk, self.wv)
        x = ops.layer_norm(ops.add(x, att), self.ln1_gain, self.ln1_bias)
        h = ops.linear(ops.gelu(ops.linear(x, self.ffw_w1, self.ffw_b1)),
                       self.ffw_w2, self.ffw_b2)
        x = ops.layer_norm(ops.add(x, h), self.ln2_gain, self.ln2_bias)
        return x, probs


class Encoder:
    """Stack of post-norm attention/feedforward blocks, one parameter set for
    both input kinds."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.layers = [EncoderLayer(cfg, i, rng, dtype) for i in range(cfg.n_layers)]

    def parameters(self) -> list[nn.Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, sequence: nn.Tensor, labels: list[str]) -> EncoderOutput:
        n = sequence.data.shape[0]
        if n > self.cfg.max_seq_len:
            raise ValueError(
                f"encoder_forward: sequence length {n} exceeds maximum "
                f"{self.cfg.max_seq_len}"
            )
        x, attentions = sequence, []
        for layer in self.layers:
            x, probs = layer.forward(x)
            attentions.append(probs)
        return EncoderOutput(states=x, attentions=attentions, labels=list(labels))
