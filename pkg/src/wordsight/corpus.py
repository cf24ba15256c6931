"""Seeded synthetic corpus: concept worlds, detector-style scenes, captions,
and downstream task instances.

A ConceptWorld fixes object prototypes (unit norm) and attribute offsets
(norm 0.5) in visual-feature space plus a closed word vocabulary. Scenes are
bags of regions whose features are prototype + offset + Gaussian noise; a
simulated two-stage detector scores each noisy feature against the prototypes
(objects first, then attribute given the detected object), and tags are
sampled from those distributions. Captions describe a few regions truthfully,
using latent classes, with filler words mixed in; attribute words thus carry
information that the object-tag stream does not.

Two knobs shape how much captions can be predicted from their own context:
attr_affinity skews each region's attribute toward a per-object preferred
class (object id mod n_attributes), and filler words follow a geometric
frequency profile. Both leave attribute-word marginals uniform while giving
masked-word prediction something to learn. Each mentioned region contributes
its object word immediately followed by its attribute word; mention order and
filler placement are shuffled, but pairs stay adjacent.

Generation is pure given (seed, config). Worlds are rejection-resampled until
the zero-noise detector recovers every (object, attribute) combination by
argmax, so the exactness contract is structural rather than probabilistic.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

# fixed per-purpose rng lanes so split streams never alias
_WORLD_LANE = 0
_SPLIT_LANES = {
    "pretrain": 1,
    "finetune-train": 2,
    "finetune-val": 3,
    "finetune-test": 4,
    "shifted-domain": 5,
}

SPLIT_LABELS = tuple(_SPLIT_LANES)

_MAGIC = "WSCORPUS"
_VERSION = 1


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WordVocab:
    """Closed token vocabulary: objects, attributes, fillers, then specials."""

    n_objects: int
    n_attributes: int
    n_fillers: int

    @property
    def size(self) -> int:
        return self.n_objects + self.n_attributes + self.n_fillers + 2

    @property
    def mask_token(self) -> int:
        return self.size - 2

    @property
    def start_token(self) -> int:
        return self.size - 1

    def object_token(self, obj_id: int) -> int:
        return int(obj_id)

    def attribute_token(self, attr_id: int) -> int:
        return self.n_objects + int(attr_id)

    def filler_token(self, filler_id: int) -> int:
        return self.n_objects + self.n_attributes + int(filler_id)

    def token_kind(self, token: int) -> str:
        if token < self.n_objects:
            return "object"
        if token < self.n_objects + self.n_attributes:
            return "attribute"
        if token < self.n_objects + self.n_attributes + self.n_fillers:
            return "filler"
        return "mask" if token == self.mask_token else "start"

    def token_name(self, token: int) -> str:
        kind = self.token_kind(token)
        if kind == "object":
            return f"obj{token}"
        if kind == "attribute":
            return f"attr{token - self.n_objects}"
        if kind == "filler":
            return f"fill{token - self.n_objects - self.n_attributes}"
        return "[MASK]" if kind == "mask" else "[START]"


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class ConceptWorld:
    seed: int
    n_objects: int
    n_attributes: int
    d_v: int
    n_fillers: int
    object_prototypes: np.ndarray  # [n_objects, d_v] float32, unit norm
    attribute_offsets: np.ndarray  # [n_attributes, d_v] float32, norm 0.5
    vocab: WordVocab


@dataclass
class SceneSample:
    latent_obj: np.ndarray  # [B] uint32
    latent_attr: np.ndarray  # [B] uint32
    features: np.ndarray  # [B, d_v] float32
    geometry: np.ndarray  # [B, 4] float32, (x, y, w, h) in [0, 1]
    p_obj: np.ndarray  # [B, n_objects] float32 rows summing to 1
    p_attr: np.ndarray  # [B, n_attributes] float32
    obj_tags: np.ndarray  # [B] uint32, sampled from p_obj
    attr_tags: np.ndarray  # [B] uint32, sampled from p_attr

    @property
    def n_regions(self) -> int:
        return int(self.latent_obj.shape[0])


@dataclass
class CaptionSample:
    tokens: np.ndarray  # [L] uint32
    source_scene_id: int = -1  # -1 on unpaired splits


@dataclass
class CorpusSplit:
    label: str
    scenes: list[SceneSample]
    captions: list[CaptionSample]
    pairing: np.ndarray | None  # caption index -> scene index, None when unpaired
    noise_sigma: float


@dataclass
class Corpus:
    world: ConceptWorld
    splits: dict[str, CorpusSplit]
    n_regions: int
    temperature: float
    l_max: int
    fillers_per_caption: int


@dataclass
class UnpairedBatch:
    """What the pre-trainer is allowed to see: two independent streams and no
    alignment ids of any kind."""

    scenes: list[SceneSample]
    caption_tokens: list[np.ndarray]


@dataclass
class PairedBatch:
    scenes: list[SceneSample]
    caption_tokens: list[np.ndarray]


# ---------------------------------------------------------------------------
# world generation
# ---------------------------------------------------------------------------


def _detector_is_exact(protos: np.ndarray, offsets: np.ndarray, margin: float = 1e-3) -> bool:
    """True when every noiseless composite feature decodes by argmax, with a
    squared-distance margin wide enough to survive float32 storage."""
    p = protos.astype(np.float64)
    off = offsets.astype(np.float64)
    # composite features for every (object, attribute) pair: [n_o, n_a, d_v]
    f = p[:, None, :] + off[None, :, :]
    # object stage: distance to own prototype is ||off||; to others must exceed it
    d = f[:, :, None, :] - p[None, None, :, :]
    d2 = (d * d).sum(-1)  # [n_o, n_a, n_o]
    own = np.take_along_axis(
        d2, np.arange(p.shape[0])[:, None, None], axis=2
    )[:, :, 0]
    rival = d2 + np.where(
        np.eye(p.shape[0], dtype=bool)[:, None, :], np.inf, 0.0
    )
    if (rival.min(axis=2) - own).min() <= margin:
        return False
    # attribute stage: residual off_a against all offsets must pick a
    r = off[:, None, :] - off[None, :, :]
    r2 = (r * r).sum(-1) + np.where(np.eye(off.shape[0], dtype=bool), np.inf, 0.0)
    return r2.min() > margin


def gen_world(
    seed: int,
    n_objects: int,
    n_attributes: int,
    d_v: int,
    n_fillers: int,
    last_layer_heads: int = 4,
) -> ConceptWorld:
    """Draw a concept world; resample until the zero-noise detector is exact."""
    if min(n_objects, n_attributes, d_v, n_fillers) < 1:
        raise ValueError("gen_world: all counts must be >= 1")
    if d_v < 8:
        raise ValueError(f"gen_world: d_v must be >= 8, got {d_v}")
    if d_v % last_layer_heads != 0:
        raise ValueError(
            f"gen_world: d_v={d_v} is not divisible by the last-layer "
            f"hallucinator head count {last_layer_heads}"
        )

    rng = np.random.default_rng([seed, _WORLD_LANE])
    for _ in range(100):
        protos = rng.standard_normal((n_objects, d_v))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        offsets = rng.standard_normal((n_attributes, d_v))
        offsets *= 0.5 / np.linalg.norm(offsets, axis=1, keepdims=True)
        protos32 = protos.astype(np.float32)
        offsets32 = offsets.astype(np.float32)
        if _detector_is_exact(protos32, offsets32):
            return ConceptWorld(
                seed=seed,
                n_objects=n_objects,
                n_attributes=n_attributes,
                d_v=d_v,
                n_fillers=n_fillers,
                object_prototypes=protos32,
                attribute_offsets=offsets32,
                vocab=WordVocab(n_objects, n_attributes, n_fillers),
            )
    raise RuntimeError(
        "gen_world: could not draw a decodable world in 100 tries; "
        "d_v is likely too small for this many classes"
    )


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------


def _sample_rows(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per probability row via inverse CDF."""
    cdf = np.cumsum(probs.astype(np.float64), axis=1)
    cdf /= cdf[:, -1:]
    u = rng.random(probs.shape[0])
    idx = (u[:, None] > cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1).astype(np.uint32)


def gen_scene(
    world: ConceptWorld,
    rng: np.random.Generator,
    noise_sigma: float,
    n_regions: int = 8,
    temperature: float = 0.1,
    attr_affinity: float = 0.0,
) -> SceneSample:
    """Sample one scene and run the simulated detector over it.

    The detector is two-stage: object distributions from squared distance to
    each prototype, then attribute distributions from the residual after
    subtracting the detected (argmax) object's prototype.

    attr_affinity is the probability that a region's attribute is its
    object's preferred class (object id mod n_attributes) instead of a
    uniform draw. Objects are uniform, so attribute marginals stay uniform
    at any affinity.
    """
    if noise_sigma < 0:
        raise ValueError("gen_scene: noise_sigma must be >= 0")
    if not 0.0 <= attr_affinity <= 1.0:
        raise ValueError("gen_scene: attr_affinity must be in [0, 1]")
    B, d_v = n_regions, world.d_v
    latent_obj = rng.integers(0, world.n_objects, size=B).astype(np.uint32)
    latent_attr = rng.integers(0, world.n_attributes, size=B).astype(np.uint32)
    if attr_affinity > 0.0:
        preferred = rng.random(B) < attr_affinity
        latent_attr = np.where(
            preferred, latent_obj % world.n_attributes, latent_attr
        ).astype(np.uint32)

    w = rng.uniform(0.1, 0.5, size=B)
    h = rng.uniform(0.1, 0.5, size=B)
    x = rng.uniform(0.0, 1.0 - w)
    y = rng.uniform(0.0, 1.0 - h)
    geometry = np.stack([x, y, w, h], axis=1).astype(np.float32)

    clean = world.object_prototypes[latent_obj] + world.attribute_offsets[latent_attr]
    noise = rng.standard_normal((B, d_v)) * noise_sigma
    features = (clean.astype(np.float64) + noise).astype(np.float32)

    f64 = features.astype(np.float64)
    protos = world.object_prototypes.astype(np.float64)
    offs = world.attribute_offsets.astype(np.float64)

    diff = f64[:, None, :] - protos[None, :, :]
    obj_logits = -(diff * diff).sum(-1) / temperature
    p_obj = _softmax_rows(obj_logits)

    detected = p_obj.argmax(axis=1)
    resid = f64 - protos[detected]
    adiff = resid[:, None, :] - offs[None, :, :]
    attr_logits = -(adiff * adiff).sum(-1) / temperature
    p_attr = _softmax_rows(attr_logits)

    obj_tags = _sample_rows(rng, p_obj)
    attr_tags = _sample_rows(rng, p_attr)

    return SceneSample(
        latent_obj=latent_obj,
        latent_attr=latent_attr,
        features=features,
        geometry=geometry,
        p_obj=p_obj.astype(np.float32),
        p_attr=p_attr.astype(np.float32),
        obj_tags=obj_tags,
        attr_tags=attr_tags,
    )


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# captions and downstream instances
# ---------------------------------------------------------------------------


# filler word r is drawn with probability proportional to _FILLER_DECAY**r
_FILLER_DECAY = 0.6


def gen_caption(
    scene: SceneSample,
    world: ConceptWorld,
    rng: np.random.Generator,
    n_fillers_per_caption: int = 2,
    l_max: int = 16,
    source_scene_id: int = -1,
) -> CaptionSample:
    """Describe 2-4 regions truthfully (latent classes) plus filler words.

    Each mentioned region contributes an adjacent (object word, attribute
    word) pair; pair order and filler placement are shuffled as units, so
    every object word is immediately followed by its region's attribute word.
    Fillers follow a geometric frequency profile rather than a uniform one.
    """
    if scene.n_regions < 1:
        raise ValueError("gen_caption: scene has no regions")
    vocab = world.vocab
    k_hi = min(4, scene.n_regions)
    k_lo = min(2, k_hi)
    k = int(rng.integers(k_lo, k_hi + 1))
    picked = rng.choice(scene.n_regions, size=k, replace=False)

    units: list[list[int]] = [
        [
            vocab.object_token(scene.latent_obj[b]),
            vocab.attribute_token(scene.latent_attr[b]),
        ]
        for b in picked
    ]
    n_fill = min(n_fillers_per_caption, max(0, l_max - 2 * k))
    if n_fill > 0:
        weights = _FILLER_DECAY ** np.arange(world.n_fillers)
        weights /= weights.sum()
        for f in rng.choice(world.n_fillers, size=n_fill, p=weights):
            units.append([vocab.filler_token(int(f))])
    order = rng.permutation(len(units))
    tokens = np.asarray(
        [t for i in order for t in units[i]], dtype=np.uint32
    )
    return CaptionSample(tokens=tokens, source_scene_id=source_scene_id)


@dataclass
class RecInstance:
    query_tokens: np.ndarray  # object + attribute words of the gold region
    gold_region: int


@dataclass
class VqaInstance:
    question_tokens: np.ndarray  # attribute word then object word
    answer: int  # 1 = yes, 0 = no


@dataclass
class VeInstance:
    caption_tokens: np.ndarray
    label: int  # 1 = entail, 0 = contradict


def _scene_pairs(scene: SceneSample) -> set[tuple[int, int]]:
    return set(zip(scene.latent_obj.tolist(), scene.latent_attr.tolist()))


def gen_downstream_instance(kind: str, scene: SceneSample, world: ConceptWorld, rng):
    if scene.n_regions < 1:
        raise ValueError(f"gen_downstream_instance: scene has no regions for kind '{kind}'")
    vocab = world.vocab

    if kind == "rec":
        pair_list = list(zip(scene.latent_obj.tolist(), scene.latent_attr.tolist()))
        # prefer a region whose (object, attribute) pair is unique in the scene
        unique = [b for b, pr in enumerate(pair_list) if pair_list.count(pr) == 1]
        b = int(rng.choice(unique)) if unique else int(rng.integers(0, scene.n_regions))
        if not unique:
            b = pair_list.index(pair_list[b])  # first matching region is the gold one
        query = np.asarray(
            [
                vocab.object_token(scene.latent_obj[b]),
                vocab.attribute_token(scene.latent_attr[b]),
            ],
            dtype=np.uint32,
        )
        return RecInstance(query_tokens=query, gold_region=b)

    if kind == "vqa":
        present = _scene_pairs(scene)
        if rng.random() < 0.5:
            b = int(rng.integers(0, scene.n_regions))
            obj = int(scene.latent_obj[b])
            attr = int(scene.latent_attr[b])
            answer = 1
        else:
            absent = [
                (o, a)
                for o in range(world.n_objects)
                for a in range(world.n_attributes)
                if (o, a) not in present
            ]
            if not absent:
                b = int(rng.integers(0, scene.n_regions))
                obj, attr, answer = int(scene.latent_obj[b]), int(scene.latent_attr[b]), 1
            else:
                obj, attr = absent[int(rng.integers(0, len(absent)))]
                answer = 0
        q = np.asarray(
            [vocab.attribute_token(attr), vocab.object_token(obj)], dtype=np.uint32
        )
        return VqaInstance(question_tokens=q, answer=answer)

    if kind == "ve":
        # unshuffled (object word, attribute word) pairs so the mentioned
        # pairs stay recoverable from adjacent positions
        k = int(rng.integers(1, min(4, scene.n_regions) + 1))
        picked = rng.choice(scene.n_regions, size=k, replace=False)
        pairs = [(int(scene.latent_obj[b]), int(scene.latent_attr[b])) for b in picked]
        if rng.random() < 0.5:
            tokens = []
            for o, a in pairs:
                tokens += [vocab.object_token(o), vocab.attribute_token(a)]
            return VeInstance(caption_tokens=np.asarray(tokens, dtype=np.uint32), label=1)
        present = _scene_pairs(scene)
        # corrupt one pair's attribute so that pair is absent from the scene
        for _ in range(50):
            i = int(rng.integers(0, len(pairs)))
            new_attr = int(rng.integers(0, world.n_attributes))
            if (pairs[i][0], new_attr) in present:
                continue
            corrupted = list(pairs)
            corrupted[i] = (pairs[i][0], new_attr)
            tokens = []
            for o, a in corrupted:
                tokens += [vocab.object_token(o), vocab.attribute_token(a)]
            return VeInstance(caption_tokens=np.asarray(tokens, dtype=np.uint32), label=0)
        raise RuntimeError("gen_downstream_instance: could not build a contradiction")

    raise ValueError(f"gen_downstream_instance: unknown kind '{kind}'")


# ---------------------------------------------------------------------------
# splits and corpora
# ---------------------------------------------------------------------------


def build_split(
    world: ConceptWorld,
    label: str,
    n_scenes: int,
    n_captions: int,
    noise_sigma: float,
    n_regions: int,
    temperature: float,
    l_max: int,
    fillers_per_caption: int,
    paired: bool,
    attr_affinity: float = 0.0,
) -> CorpusSplit:
    if label not in _SPLIT_LANES:
        raise ValueError(f"build_split: unknown split label '{label}'")
    if paired and n_captions != n_scenes:
        raise ValueError("build_split: paired splits need one caption per scene")
    rng = np.random.default_rng([world.seed, _SPLIT_LANES[label]])
    scenes = [
        gen_scene(
            world, rng, noise_sigma, n_regions=n_regions,
            temperature=temperature, attr_affinity=attr_affinity,
        )
        for _ in range(n_scenes)
    ]
    captions = []
    if paired:
        for i, sc in enumerate(scenes):
            captions.append(
                gen_caption(sc, world, rng, fillers_per_caption, l_max, source_scene_id=i)
            )
        pairing = np.arange(n_scenes, dtype=np.uint32)
    else:
        for _ in range(n_captions):
            src = int(rng.integers(0, n_scenes))
            captions.append(
                gen_caption(scenes[src], world, rng, fillers_per_caption, l_max)
            )
        pairing = None
    return CorpusSplit(
        label=label, scenes=scenes, captions=captions, pairing=pairing, noise_sigma=noise_sigma
    )


def make_corpus(
    seed: int,
    n_objects: int = 8,
    n_attributes: int = 8,
    d_v: int = 32,
    n_fillers: int = 10,
    n_pretrain_scenes: int = 512,
    n_pretrain_captions: int = 512,
    n_finetune: int = 128,
    n_eval: int = 64,
    n_regions: int = 8,
    noise_sigma: float = 0.1,
    temperature: float = 0.1,
    l_max: int = 16,
    fillers_per_caption: int = 2,
    last_layer_heads: int = 4,
    shifted_noise_scale: float = 3.0,
    attr_affinity: float = 0.9,
) -> Corpus:
    """The standard five-split corpus used by the training pipeline."""
    world = gen_world(seed, n_objects, n_attributes, d_v, n_fillers, last_layer_heads)
    common = dict(
        n_regions=n_regions, temperature=temperature, l_max=l_max,
        fillers_per_caption=fillers_per_caption, attr_affinity=attr_affinity,
    )
    splits = {
        "pretrain": build_split(
            world, "pretrain", n_pretrain_scenes, n_pretrain_captions,
            noise_sigma, paired=False, **common,
        ),
        "finetune-train": build_split(
            world, "finetune-train", n_finetune, n_finetune, noise_sigma,
            paired=True, **common,
        ),
        "finetune-val": build_split(
            world, "finetune-val", n_eval, n_eval, noise_sigma, paired=True, **common,
        ),
        "finetune-test": build_split(
            world, "finetune-test", n_eval, n_eval, noise_sigma, paired=True, **common,
        ),
        "shifted-domain": build_split(
            world, "shifted-domain", n_eval, n_eval, noise_sigma * shifted_noise_scale,
            paired=True, **common,
        ),
    }
    return Corpus(
        world=world, splits=splits, n_regions=n_regions, temperature=temperature,
        l_max=l_max, fillers_per_caption=fillers_per_caption,
    )


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def make_batches(split: CorpusSplit, batch_size: int, paired: bool, rng: np.random.Generator):
    """Endless stream of batches; unpaired draws the two streams independently."""
    if paired and split.pairing is None:
        raise ValueError(
            f"make_batches: split '{split.label}' carries no pairing table; "
            "paired batches are only available on fine-tune/eval splits"
        )
    n_s, n_c = len(split.scenes), len(split.captions)
    while True:
        if paired:
            cap_idx = rng.integers(0, n_c, size=batch_size)
            scene_idx = split.pairing[cap_idx]
        else:
            scene_idx = rng.integers(0, n_s, size=batch_size)
            cap_idx = rng.integers(0, n_c, size=batch_size)
        scenes = [split.scenes[i] for i in scene_idx]
        tokens = [split.captions[i].tokens for i in cap_idx]
        yield (PairedBatch if paired else UnpairedBatch)(scenes=scenes, caption_tokens=tokens)


# ---------------------------------------------------------------------------
# serialization: UTF-8 manifest + little-endian binary payload
# ---------------------------------------------------------------------------


def _f32_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _u32_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<u4").tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def f32(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        out = np.frombuffer(self.buf, dtype="<f4", count=n, offset=self.pos)
        self.pos += 4 * n
        return out.reshape(shape).copy()

    def u32(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        out = np.frombuffer(self.buf, dtype="<u4", count=n, offset=self.pos)
        self.pos += 4 * n
        return out.reshape(shape).copy()


def save_corpus(corpus: Corpus, path: str) -> None:
    w = corpus.world
    head = io.StringIO()
    head.write(f"{_MAGIC} {_VERSION}\n")
    head.write(f"seed {w.seed}\n")
    head.write(f"n_objects {w.n_objects}\n")
    head.write(f"n_attributes {w.n_attributes}\n")
    head.write(f"d_v {w.d_v}\n")
    head.write(f"n_fillers {w.n_fillers}\n")
    head.write(f"n_regions {corpus.n_regions}\n")
    head.write(f"temperature {corpus.temperature!r}\n")
    head.write(f"l_max {corpus.l_max}\n")
    head.write(f"fillers_per_caption {corpus.fillers_per_caption}\n")
    head.write(f"splits {len(corpus.splits)}\n")
    for label, sp in corpus.splits.items():
        paired = 0 if sp.pairing is None else 1
        head.write(
            f"split {label} {len(sp.scenes)} {len(sp.captions)} {paired} {sp.noise_sigma!r}\n"
        )
    head.write("payload\n")

    body = io.BytesIO()
    body.write(_f32_bytes(w.object_prototypes))
    body.write(_f32_bytes(w.attribute_offsets))
    for sp in corpus.splits.values():
        for sc in sp.scenes:
            body.write(_u32_bytes(sc.latent_obj))
            body.write(_u32_bytes(sc.latent_attr))
            body.write(_f32_bytes(sc.features))
            body.write(_f32_bytes(sc.geometry))
            body.write(_f32_bytes(sc.p_obj))
            body.write(_f32_bytes(sc.p_attr))
            body.write(_u32_bytes(sc.obj_tags))
            body.write(_u32_bytes(sc.attr_tags))
        lengths = np.asarray([len(c.tokens) for c in sp.captions], dtype=np.uint32)
        body.write(_u32_bytes(lengths))
        if sp.captions:
            body.write(_u32_bytes(np.concatenate([c.tokens for c in sp.captions])))
        if sp.pairing is not None:
            body.write(_u32_bytes(sp.pairing))

    with open(path, "wb") as fh:
        fh.write(head.getvalue().encode("utf-8"))
        fh.write(body.getvalue())


def load_corpus(path: str) -> Corpus:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\npayload\n")
    if nl < 0:
        raise ValueError(f"load_corpus: {path} has no payload marker")
    header = raw[: nl + 1].decode("utf-8").splitlines()
    if not header or not header[0].startswith(_MAGIC):
        raise ValueError(f"load_corpus: {path} is not a corpus file")
    version = int(header[0].split()[1])
    if version != _VERSION:
        raise ValueError(f"load_corpus: unsupported corpus version {version}")

    kv: dict[str, str] = {}
    split_lines = []
    for line in header[1:]:
        parts = line.split()
        if parts[0] == "split":
            split_lines.append(parts[1:])
        else:
            kv[parts[0]] = " ".join(parts[1:])

    seed = int(kv["seed"])
    n_objects, n_attributes = int(kv["n_objects"]), int(kv["n_attributes"])
    d_v, n_fillers = int(kv["d_v"]), int(kv["n_fillers"])
    n_regions = int(kv["n_regions"])

    rd = _Reader(raw[nl + len(b"\npayload\n") :])
    protos = rd.f32((n_objects, d_v))
    offsets = rd.f32((n_attributes, d_v))
    world = ConceptWorld(
        seed=seed, n_objects=n_objects, n_attributes=n_attributes, d_v=d_v,
        n_fillers=n_fillers, object_prototypes=protos, attribute_offsets=offsets,
        vocab=WordVocab(n_objects, n_attributes, n_fillers),
    )

    splits: dict[str, CorpusSplit] = {}
    B = n_regions
    for label, ns, nc, paired, sigma in split_lines:
        ns, nc, paired = int(ns), int(nc), int(paired)
        scenes = []
        for _ in range(ns):
            scenes.append(
                SceneSample(
                    latent_obj=rd.u32((B,)),
                    latent_attr=rd.u32((B,)),
                    features=rd.f32((B, d_v)),
                    geometry=rd.f32((B, 4)),
                    p_obj=rd.f32((B, n_objects)),
                    p_attr=rd.f32((B, n_attributes)),
                    obj_tags=rd.u32((B,)),
                    attr_tags=rd.u32((B,)),
                )
            )
        lengths = rd.u32((nc,))
        flat = rd.u32((int(lengths.sum()),))
        captions, at = [], 0
        for i, ln in enumerate(lengths):
            toks = flat[at : at + int(ln)].copy()
            at += int(ln)
            captions.append(CaptionSample(tokens=toks, source_scene_id=-1))
        pairing = None
        if paired:
            pairing = rd.u32((nc,))
            for i, c in enumerate(captions):
                c.source_scene_id = int(pairing[i])
        splits[label] = CorpusSplit(
            label=label, scenes=scenes, captions=captions, pairing=pairing,
            noise_sigma=float(sigma),
        )

    return Corpus(
        world=world, splits=splits, n_regions=n_regions,
        temperature=float(kv["temperature"]), l_max=int(kv["l_max"]),
        fillers_per_caption=int(kv["fillers_per_caption"]),
    )
