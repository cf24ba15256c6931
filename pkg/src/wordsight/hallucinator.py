"""Feature hallucinator: J stacked layers, each a self-attention pass over
the token context followed by per-head cross-attention into the frozen
visual dictionary.

Layers 1..J-1 emit d_model so they can stack; layer J emits d_v, landing the
output in visual-feature space. There are no residual connections, layer
norms, or positional terms inside the stack, so hallucination is permutation
equivariant over its input tokens. Dictionary entries enter the graph as
constants: gradients reach the attention weights but never the dictionary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnmath as nn
from .nnmath import ops
from .vocab import VisualDictionary


@dataclass
class WFHConfig:
    d_model: int = 64
    d_v: int = 32
    n_layers: int = 2  # J
    self_heads: int = 4  # M_s
    cross_heads: int = 4  # M_x for j < J
    cross_heads_last: int = 4  # M_x at j = J
    # residual-free stacks pass signal only through attention products, so
    # encoder-style 0.02 init leaves early logits degenerate
    init_scale: float = 0.2

    def __post_init__(self):
        if self.d_model % self.self_heads != 0:
            raise ValueError(
                f"WFHConfig: d_model={self.d_model} not divisible by "
                f"self_heads={self.self_heads}"
            )
        if self.d_model % self.cross_heads != 0:
            raise ValueError(
                f"WFHConfig: d_model={self.d_model} not divisible by "
                f"cross_heads={self.cross_heads}"
            )
        if self.d_v % self.cross_heads_last != 0:
            raise ValueError(
                f"WFHConfig: d_v={self.d_v} not divisible by "
                f"cross_heads_last={self.cross_heads_last}"
            )
        if self.n_layers < 1:
            raise ValueError("WFHConfig: need at least one layer")


@dataclass
class HallucinationOutput:
    vectors: nn.Tensor  # [n, d_v]
    self_attentions: list[np.ndarray]  # per layer [M_s, n, n]
    cross_attentions: list[np.ndarray]  # per layer [M_x, n, C]


class WFHLayer:
    def __init__(self, cfg: WFHConfig, idx: int, rng: np.random.Generator, dtype):
        self.idx = idx
        last = idx == cfg.n_layers - 1
        d, dv = cfg.d_model, cfg.d_v
        ms = cfg.self_heads
        mx = cfg.cross_heads_last if last else cfg.cross_heads
        self.d_out = dv if last else d
        dq = d // mx
        P, pre = nn.Parameter, f"wfh.layer{idx}"

        def init(shape):
            return (rng.standard_normal(shape) * cfg.init_scale).astype(dtype)

        self.self_wq = P(f"{pre}.self_wq", init((ms, d // ms, d)))
        self.self_wk = P(f"{pre}.self_wk", init((ms, d // ms, d)))
        self.self_wv = P(f"{pre}.self_wv", init((ms, d // ms, d)))
        self.cross_wq = P(f"{pre}.cross_wq", init((mx, dq, d)))
        self.cross_wk = P(f"{pre}.cross_wk", init((mx, dq, dv)))
        self.cross_wv = P(f"{pre}.cross_wv", init((mx, self.d_out // mx, dv)))

    def parameters(self) -> list[nn.Parameter]:
        return [
            self.self_wq, self.self_wk, self.self_wv,
            self.cross_wq, self.cross_wk, self.cross_wv,
        ]

    def project_dictionary(self, d_entries: nn.Tensor) -> tuple[nn.Tensor, nn.Tensor]:
        """Keys and values over all C entries; reusable within a step since
        the dictionary never moves."""
        return (
            ops.head_project(d_entries, self.cross_wk),
            ops.head_project(d_entries, self.cross_wv),
        )

    def forward(self, x: nn.Tensor, dict_kv) -> tuple[nn.Tensor, np.ndarray, np.ndarray]:
        ctx, self_probs = ops.multi_head_attention(
            x, x, x, self.self_wq, self.self_wk, self.self_wv
        )
        k, v = dict_kv
        q = ops.head_project(ctx, self.cross_wq)  # [M_x, n, dq]
        dq = q.data.shape[-1]
        logits = ops.mul(ops.matmul(q, ops.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dq))
        probs = ops.softmax(logits, axis=-1)  # [M_x, n, C]
        per_head = ops.matmul(probs, v)  # [M_x, n, d_out/M_x]
        n = x.data.shape[0]
        out = ops.reshape(ops.transpose(per_head, (1, 0, 2)), (n, self.d_out))
        return out, self_probs, probs.data.copy()


class Hallucinator:
    """H = H_J of ... of H_1 over a frozen dictionary."""

    def __init__(
        self,
        cfg: WFHConfig,
        dictionary: VisualDictionary,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        if dictionary.d_v != cfg.d_v:
            raise ValueError(
                f"Hallucinator: dictionary d_v {dictionary.d_v} != configured "
                f"d_v {cfg.d_v}"
            )
        self.cfg = cfg
        self.dictionary = dictionary
        self.layers = [WFHLayer(cfg, i, rng, dtype) for i in range(cfg.n_layers)]
        self._dict_const = nn.constant(dictionary.entries.astype(dtype))

    def parameters(self) -> list[nn.Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def precompute_dict_kv(self) -> list[tuple[nn.Tensor, nn.Tensor]]:
        return [layer.project_dictionary(self._dict_const) for layer in self.layers]

    def hallucinate(self, token_embeddings: nn.Tensor, dict_kv=None) -> HallucinationOutput:
        """Map [n, d_model] token embeddings to [n, d_v] visual vectors."""
        if token_embeddings.data.shape[-1] != self.cfg.d_model:
            raise ValueError(
                f"hallucinate: input width {token_embeddings.data.shape[-1]} != "
                f"d_model {self.cfg.d_model}"
            )
        if dict_kv is None:
            dict_kv = self.precompute_dict_kv()
        x = token_embeddings
        self_atts, cross_atts = [], []
        for layer, kv in zip(self.layers, dict_kv):
            x, sp, cp = layer.forward(x, kv)
            self_atts.append(sp)
            cross_atts.append(cp)
        return HallucinationOutput(
            vectors=x, self_attentions=self_atts, cross_attentions=cross_atts
        )


def wfh_loss(hallucinated: nn.Tensor, detector_features: np.ndarray) -> nn.Tensor:
    """(1/B) sum_b ||v^o_b - v_b||^2 against constant detector features."""
    v = np.asarray(detector_features, dtype=hallucinated.data.dtype)
    if hallucinated.data.shape != v.shape:
        raise ValueError(
            f"wfh_loss: hallucinated shape {hallucinated.data.shape} != "
            f"feature shape {v.shape}"
        )
    diff = ops.sub(hallucinated, nn.constant(v))
    return ops.mul(ops.tensor_sum(ops.mul(diff, diff)), 1.0 / v.shape[0])
