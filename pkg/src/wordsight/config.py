"""Run configuration: one flat record holding every tunable, preset tables,
JSON round trip, and builders for the component configs.

Precedence when assembling a config: dataclass defaults, then a named preset,
then a config file, then explicit flag overrides. Unknown keys are rejected
at every layer so typos fail loudly instead of silently training the wrong
model. The resolved mapping is echoed into each output directory as
config.json for provenance.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .corpus import Corpus, make_corpus
from .encoder import EncoderConfig
from .hallucinator import WFHConfig
from .model import ModelConfig
from .objectives import POLICY_BERT, POLICY_MASK
from .train import FinetuneConfig, TrainConfig


class ConfigError(ValueError):
    """Invalid key, value, preset, or config file."""


@dataclass
class RunConfig:
    # corpus
    seed: int = 0
    n_objects: int = 8
    n_attributes: int = 8
    d_v: int = 32
    n_fillers: int = 10
    n_pretrain_scenes: int = 512
    n_pretrain_captions: int = 512
    n_finetune: int = 128
    n_eval: int = 64
    n_regions: int = 8
    noise_sigma: float = 0.1
    temperature: float = 0.1
    l_max: int = 16
    fillers_per_caption: int = 2
    shifted_noise_scale: float = 3.0
    attr_affinity: float = 0.9
    # visual dictionary
    dict_size: int = 16
    dict_momentum: float = 0.9
    dict_epochs: int = 5
    # encoder
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ffw: int = 256
    # hallucinator
    wfh_layers: int = 2
    self_heads: int = 4
    cross_heads: int = 4
    cross_heads_last: int = 4
    # pre-training
    steps: int = 2000
    batch_size: int = 32
    peak_lr: float = 3e-3
    warmup_frac: float = 0.10
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    mask_p: float = 0.15
    mask_policy: str = POLICY_MASK
    checkpoint_every: int = 0
    # fine-tuning
    ft_steps: int = 300
    ft_batch_size: int = 8
    ft_peak_lr: float = 1e-4
    gamma: float = 16.0
    # ablations
    use_hallucinator: bool = True
    include_attributes: bool = True

    def __post_init__(self):
        if self.mask_policy not in (POLICY_MASK, POLICY_BERT):
            raise ConfigError(
                f"mask_policy must be '{POLICY_MASK}' or '{POLICY_BERT}', "
                f"got '{self.mask_policy}'"
            )
        if not 0.0 <= self.attr_affinity <= 1.0:
            raise ConfigError("attr_affinity must be in [0, 1]")
        if not 0.0 <= self.mask_p <= 1.0:
            raise ConfigError("mask_p must be in [0, 1]")

    @property
    def vocab_size(self) -> int:
        return self.n_objects + self.n_attributes + self.n_fillers + 2

    def to_mapping(self) -> dict:
        return asdict(self)

    def replace(self, **overrides) -> "RunConfig":
        merged = self.to_mapping()
        for key, val in overrides.items():
            if key not in merged:
                raise ConfigError(f"unknown config key '{key}'")
            merged[key] = val
        return RunConfig(**merged)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}

# model/optimizer dims and rates at publication scale; corpus counts stay
# synthetic, so the desk-size splits are kept
_PAPER_SCALE = dict(
    d_v=2048, n_regions=36, dict_size=1024, d_model=768, n_layers=12,
    n_heads=12, d_ffw=3072, wfh_layers=2, self_heads=12, cross_heads=12,
    cross_heads_last=16, batch_size=400, peak_lr=1.5625e-4,
)

# small enough for finite-difference gradchecks and CLI smoke runs
_MICRO = dict(
    n_objects=3, n_attributes=2, d_v=8, n_fillers=2, n_pretrain_scenes=8,
    n_pretrain_captions=8, n_finetune=4, n_eval=4, n_regions=2, l_max=6,
    dict_size=4, dict_epochs=2, d_model=16, n_layers=1, n_heads=2, d_ffw=24,
    self_heads=2, cross_heads=2, cross_heads_last=2, steps=2, batch_size=2,
    ft_steps=2, ft_batch_size=2,
)

# attribute-bottleneck retrieval benchmark: object multisets collide across
# scenes (3 objects, 4 regions) while 16 independent attributes disambiguate,
# so pairing is only learnable through attribute grounding
_BOTTLENECK = dict(
    n_objects=3, n_attributes=16, n_regions=4, attr_affinity=0.0,
    n_finetune=256, n_eval=200, ft_steps=600, ft_peak_lr=1e-3,
)

PRESETS: dict[str, dict] = {
    "desk-scale": {},
    "paper-scale": _PAPER_SCALE,
    "micro": _MICRO,
    "bottleneck-benchmark": _BOTTLENECK,
}


def _coerce(key: str, value):
    """Best-effort cast of a flag string to the field's declared type."""
    kind = _FIELD_TYPES[key]
    if not isinstance(value, str):
        return value
    if kind == "bool" or kind is bool:
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean for '{key}', got '{value}'")
    if kind == "int" or kind is int:
        return int(value)
    if kind == "float" or kind is float:
        return float(value)
    return value


def resolve_config(
    preset: str | None = None,
    file_mapping: dict | None = None,
    overrides: dict | None = None,
) -> RunConfig:
    """Defaults <- preset <- config file <- flags, rejecting unknown keys."""
    merged = RunConfig().to_mapping()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(
                f"unknown preset '{preset}'; choose from {sorted(PRESETS)}"
            )
        merged.update(PRESETS[preset])
    for layer in (file_mapping, overrides):
        if not layer:
            continue
        for key, val in layer.items():
            if key not in merged:
                raise ConfigError(f"unknown config key '{key}'")
            try:
                merged[key] = _coerce(key, val)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for '{key}': {exc}") from exc
    return RunConfig(**merged)


def load_config_file(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            mapping = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path} must hold a JSON object of config keys")
    return mapping


def write_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_mapping(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def corpus_from(cfg: RunConfig) -> Corpus:
    return make_corpus(
        seed=cfg.seed,
        n_objects=cfg.n_objects,
        n_attributes=cfg.n_attributes,
        d_v=cfg.d_v,
        n_fillers=cfg.n_fillers,
        n_pretrain_scenes=cfg.n_pretrain_scenes,
        n_pretrain_captions=cfg.n_pretrain_captions,
        n_finetune=cfg.n_finetune,
        n_eval=cfg.n_eval,
        n_regions=cfg.n_regions,
        noise_sigma=cfg.noise_sigma,
        temperature=cfg.temperature,
        l_max=cfg.l_max,
        fillers_per_caption=cfg.fillers_per_caption,
        last_layer_heads=cfg.cross_heads_last,
        shifted_noise_scale=cfg.shifted_noise_scale,
        attr_affinity=cfg.attr_affinity,
    )


def model_config_from(cfg: RunConfig) -> ModelConfig:
    encoder = EncoderConfig(
        d_model=cfg.d_model, n_layers=cfg.n_layers, n_heads=cfg.n_heads,
        d_v=cfg.d_v, vocab_size=cfg.vocab_size, l_max=cfg.l_max,
        max_regions=cfg.n_regions, d_ffw=cfg.d_ffw,
    )
    wfh = WFHConfig(
        d_model=cfg.d_model, d_v=cfg.d_v, n_layers=cfg.wfh_layers,
        self_heads=cfg.self_heads, cross_heads=cfg.cross_heads,
        cross_heads_last=cfg.cross_heads_last,
    )
    return ModelConfig(
        encoder=encoder, wfh=wfh, n_objects=cfg.n_objects,
        use_hallucinator=cfg.use_hallucinator,
        include_attributes=cfg.include_attributes,
    )


def train_config_from(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        steps=cfg.steps, batch_size=cfg.batch_size, peak_lr=cfg.peak_lr,
        warmup_frac=cfg.warmup_frac, weight_decay=cfg.weight_decay,
        clip_norm=cfg.clip_norm, mask_p=cfg.mask_p,
        mask_policy=cfg.mask_policy, seed=cfg.seed,
        checkpoint_every=cfg.checkpoint_every,
    )


def finetune_config_from(cfg: RunConfig, task: str = "retrieval") -> FinetuneConfig:
    return FinetuneConfig(
        task=task, steps=cfg.ft_steps, batch_size=cfg.ft_batch_size,
        peak_lr=cfg.ft_peak_lr, warmup_frac=cfg.warmup_frac,
        weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm,
        gamma=cfg.gamma, seed=cfg.seed,
    )
