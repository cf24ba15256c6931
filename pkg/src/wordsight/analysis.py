"""Diagnostic probes over a trained model.

Two read-only reports: (1) where each scene-stream query family (visual
rows, tag rows) puts its attention mass, split by the modality of the key
position and averaged over heads, positions, and scenes; (2) the singular
value spectrum of the token embedding table, whose decay rate summarizes
how spread out the learned word space is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnmath as nn
from .corpus import SceneSample
from .encoder import LABEL_IMG, LABEL_START, LABEL_TAG, build_s2_sequence
from .model import PretrainModel

MASS_CATEGORIES = (
    "img_self_att",
    "img2tag_cross_att",
    "img_start_att",
    "tag_self_att",
    "tag2img_cross_att",
    "tag_start_att",
)


@dataclass
class AttentionMassReport:
    """Per layer: average mass per (query family, key modality) bucket.

    For each query family the three buckets partition the row, so their
    averages sum to 1.
    """

    layers: list

    def to_rows(self) -> list[tuple[int, str, float]]:
        return [
            (i, cat, float(masses[cat]))
            for i, masses in enumerate(self.layers)
            for cat in MASS_CATEGORIES
        ]


@dataclass
class SpectrumReport:
    values: np.ndarray  # singular values, descending
    normalized: np.ndarray  # values / values[0]


def partition_scene_attention(probs: np.ndarray, labels: list[str]) -> dict:
    """Bucket one layer's attention rows by query family and key modality.

    probs: [n_heads, n, n] rows summing to 1. Averages are over heads and
    query positions.
    """
    labs = np.asarray(labels)
    img_k = labs == LABEL_IMG
    tag_k = labs == LABEL_TAG
    start_k = labs == LABEL_START
    masses: dict[str, float] = {}
    for family, q_sel, own_k, other_k, cross_key in (
        ("img", img_k, img_k, tag_k, "img2tag_cross_att"),
        ("tag", tag_k, tag_k, img_k, "tag2img_cross_att"),
    ):
        if not q_sel.any():
            masses[f"{family}_self_att"] = 0.0
            masses[cross_key] = 0.0
            masses[f"{family}_start_att"] = 0.0
            continue
        rows = probs[:, q_sel, :]  # [M, n_q, n]
        masses[f"{family}_self_att"] = float(rows[:, :, own_k].sum(axis=-1).mean())
        masses[cross_key] = float(rows[:, :, other_k].sum(axis=-1).mean())
        masses[f"{family}_start_att"] = float(rows[:, :, start_k].sum(axis=-1).mean())
    return masses


def attention_mass(
    model: PretrainModel,
    scenes: list,
    include_attributes: bool = True,
) -> AttentionMassReport:
    """Average scene-stream attention masses over a batch of scenes."""
    per_layer = [dict.fromkeys(MASS_CATEGORIES, 0.0) for _ in range(model.cfg.encoder.n_layers)]
    with nn.no_grad():
        for scene in scenes:
            seq, labels = build_s2_sequence(
                model.embeddings, scene.features, scene.geometry,
                o_tokens=scene.obj_tags, a_tokens=scene.attr_tags,
                include_attributes=include_attributes,
            )
            out = model.encoder.forward(seq, labels)
            for i, probs in enumerate(out.attentions):
                masses = partition_scene_attention(probs, labels)
                for cat, m in masses.items():
                    per_layer[i][cat] += m
    n = len(scenes)
    for masses in per_layer:
        for cat in masses:
            masses[cat] /= n
    return AttentionMassReport(layers=per_layer)


def embedding_spectrum(model: PretrainModel) -> SpectrumReport:
    """Singular values of the token embedding table, descending."""
    table = model.embeddings.token_table.data
    if table.size == 0:
        raise ValueError("embedding_spectrum: token table is empty")
    values = np.linalg.svd(table.astype(np.float64), compute_uv=False)
    top = values[0] if values[0] > 0 else 1.0
    return SpectrumReport(values=values, normalized=values / top)


def write_attention_mass_csv(report: AttentionMassReport, path: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("layer,category,mass\n")
        for layer, cat, mass in report.to_rows():
            fh.write(f"{layer},{cat},{mass!r}\n")


def write_spectrum_csv(report: SpectrumReport, path: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("index,singular_value,normalized\n")
        for i, (v, nv) in enumerate(zip(report.values, report.normalized)):
            fh.write(f"{i},{float(v)!r},{float(nv)!r}\n")
