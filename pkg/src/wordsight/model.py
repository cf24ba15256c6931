"""Pre-training model assembly: embeddings, encoder, hallucinator, loss heads,
the flat parameter registry, and checkpoint serialization.

Checkpoints are a UTF-8 manifest (one line per parameter: name, dims,
byte offset) followed by concatenated float32 little-endian payloads.
Hallucinator parameters live under the "wfh." name prefix.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import nnmath as nn
from .encoder import Encoder, EncoderConfig, EmbeddingTables
from .hallucinator import Hallucinator, WFHConfig
from .vocab import VisualDictionary

_CKPT_MAGIC = "WSCKPT"
_CKPT_VERSION = 1

# rng lanes for parameter initialization
_LANE_EMBED = 10
_LANE_ENCODER = 11
_LANE_WFH = 12
_LANE_HEADS = 13


@dataclass
class ModelConfig:
    encoder: EncoderConfig
    wfh: WFHConfig
    n_objects: int
    use_hallucinator: bool = True  # baseline configuration turns this off
    include_attributes: bool = True  # baseline also drops the tag-row attribute summand

    def __post_init__(self):
        if self.encoder.d_model != self.wfh.d_model or self.encoder.d_v != self.wfh.d_v:
            raise ValueError(
                "ModelConfig: encoder and hallucinator disagree on widths "
                f"(d_model {self.encoder.d_model}/{self.wfh.d_model}, "
                f"d_v {self.encoder.d_v}/{self.wfh.d_v})"
            )


class PretrainModel:
    def __init__(
        self,
        cfg: ModelConfig,
        dictionary: VisualDictionary,
        seed: int,
        dtype=np.float32,
    ):
        self.cfg = cfg
        self.dtype = dtype
        ec = cfg.encoder
        self.embeddings = EmbeddingTables(
            ec, np.random.default_rng([seed, _LANE_EMBED]), dtype
        )
        self.encoder = Encoder(ec, np.random.default_rng([seed, _LANE_ENCODER]), dtype)
        self.hallucinator = None
        if cfg.use_hallucinator:
            self.hallucinator = Hallucinator(
                cfg.wfh, dictionary, np.random.default_rng([seed, _LANE_WFH]), dtype
            )
        rng = np.random.default_rng([seed, _LANE_HEADS])
        d, V, n_obj = ec.d_model, ec.vocab_size, cfg.n_objects

        def init(shape):
            return (rng.standard_normal(shape) * 0.02).astype(dtype)

        P = nn.Parameter
        self.mlm_w = P("head.mlm_w", init((V, d)))
        self.mlm_b = P("head.mlm_b", np.zeros(V, dtype))
        self.mtc_w = P("head.mtc_w", init((n_obj, d)))
        self.mtc_b = P("head.mtc_b", np.zeros(n_obj, dtype))
        self.moc_w = P("head.moc_w", init((n_obj, d)))
        self.moc_b = P("head.moc_b", np.zeros(n_obj, dtype))
        # retrieval projections and the learned score scale live here so one
        # checkpoint carries the whole fine-tunable state
        self.ret_text_w = P("head.ret_text_w", init((d, d)))
        self.ret_text_b = P("head.ret_text_b", np.zeros(d, dtype))
        self.ret_vis_w = P("head.ret_vis_w", init((d, d)))
        self.ret_vis_b = P("head.ret_vis_b", np.zeros(d, dtype))

    def parameters(self) -> list[nn.Parameter]:
        ps = self.embeddings.parameters() + self.encoder.parameters()
        if self.hallucinator is not None:
            ps += self.hallucinator.parameters()
        ps += [
            self.mlm_w, self.mlm_b, self.mtc_w, self.mtc_b, self.moc_w, self.moc_b,
            self.ret_text_w, self.ret_text_b, self.ret_vis_w, self.ret_vis_b,
        ]
        names = [p.name for p in ps]
        if len(set(names)) != len(names):
            raise RuntimeError("PretrainModel: duplicate parameter names")
        return ps

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: list[nn.Parameter], path: str) -> None:
    head = io.StringIO()
    head.write(f"{_CKPT_MAGIC} {_CKPT_VERSION} {len(params)}\n")
    offset = 0
    for p in params:
        dims = " ".join(str(d) for d in p.data.shape)
        head.write(f"{p.name} {dims} {offset}\n")
        offset += 4 * p.data.size
    with open(path, "wb") as fh:
        fh.write(head.getvalue().encode("utf-8"))
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(params: list[nn.Parameter], path: str) -> None:
    """Load values into an existing parameter list; names and shapes must
    match the file exactly."""
    with open(path, "rb") as fh:
        first = fh.readline().decode("utf-8").split()
        if len(first) != 3 or first[0] != _CKPT_MAGIC:
            raise ValueError(f"load_checkpoint: {path} is not a checkpoint")
        if int(first[1]) != _CKPT_VERSION:
            raise ValueError(f"load_checkpoint: unsupported version {first[1]}")
        n = int(first[2])
        manifest = []
        for _ in range(n):
            parts = fh.readline().decode("utf-8").split()
            name, dims, off = parts[0], tuple(int(d) for d in parts[1:-1]), int(parts[-1])
            manifest.append((name, dims, off))
        payload = fh.read()

    by_name = {p.name: p for p in params}
    file_names = {m[0] for m in manifest}
    missing = sorted(set(by_name) - file_names)
    extra = sorted(file_names - set(by_name))
    if missing or extra:
        raise ValueError(
            f"load_checkpoint: parameter set mismatch (missing from file: "
            f"{missing[:3]}, unexpected in file: {extra[:3]})"
        )
    for name, dims, off in manifest:
        p = by_name[name]
        if tuple(p.data.shape) != dims:
            raise ValueError(
                f"load_checkpoint: shape mismatch for {name}: "
                f"model {tuple(p.data.shape)} vs file {dims}"
            )
        n_el = int(np.prod(dims)) if dims else 1
        vals = np.frombuffer(payload, dtype="<f4", count=n_el, offset=off)
        p.data = vals.reshape(dims).astype(p.data.dtype)
        if p.grad is not None:
            p.grad = np.zeros_like(p.data)
