"""Visual dictionary: momentum K-means over region features, plus a small
binary file format.

The dictionary is learned offline and frozen for all model training. Updates
follow d_c <- m*d_c + (1-m)*mean(assigned); entries that attract no features
in a batch stay put, and m=0 collapses to the classical per-batch centroid
step (the oracle-equivalence tests rely on that exactly).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

_MAGIC = b"WFHD"
_VERSION = 1


class DictionaryFormatError(ValueError):
    pass


class BadMagicError(DictionaryFormatError):
    pass


class BadVersionError(DictionaryFormatError):
    pass


class TruncatedFileError(DictionaryFormatError):
    pass


@dataclass
class VisualDictionary:
    entries: np.ndarray  # [C, d_v] float32
    momentum: float
    step: int = 0
    history: list[float] = field(default_factory=list, compare=False)

    @property
    def C(self) -> int:
        return int(self.entries.shape[0])

    @property
    def d_v(self) -> int:
        return int(self.entries.shape[1])

    def __post_init__(self):
        if self.entries.ndim != 2 or self.C < 1:
            raise ValueError("VisualDictionary: entries must be a non-empty [C, d_v] array")
        if not np.isfinite(self.entries).all():
            raise ValueError("VisualDictionary: entries must be finite")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"VisualDictionary: momentum {self.momentum} outside [0, 1)")


def kmeans_init(features: np.ndarray, C: int, rng: np.random.Generator,
                momentum: float = 0.99) -> VisualDictionary:
    """Entries = C features sampled uniformly without replacement."""
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2:
        raise ValueError(f"kmeans_init: features must be [N, d_v], got {features.shape}")
    n = features.shape[0]
    if n < C:
        raise ValueError(f"kmeans_init: need at least C={C} features, got {n}")
    idx = rng.choice(n, size=C, replace=False)
    return VisualDictionary(entries=features[idx].copy(), momentum=momentum)


def assign(features: np.ndarray, d: VisualDictionary) -> np.ndarray | int:
    """Nearest entry by L2; ties break to the lowest index (argmin order)."""
    f = np.asarray(features)
    single = f.ndim == 1
    f2 = f[None, :] if single else f
    if f2.shape[1] != d.d_v:
        raise ValueError(
            f"assign: feature dim {f2.shape[1]} does not match dictionary d_v {d.d_v}"
        )
    diff = f2[:, None, :].astype(np.float64) - d.entries[None, :, :].astype(np.float64)
    d2 = (diff * diff).sum(-1)
    out = d2.argmin(axis=1)
    return int(out[0]) if single else out


def momentum_update(d: VisualDictionary, batch: np.ndarray) -> None:
    """In-place update of every entry that received at least one feature."""
    batch = np.asarray(batch, dtype=d.entries.dtype)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ValueError("momentum_update: batch must be a non-empty [N, d_v] array")
    a = assign(batch, d)
    m = d.entries.dtype.type(d.momentum)
    for c in np.unique(a):
        mean = np.mean(batch[a == c], axis=0)
        if d.momentum == 0.0:
            d.entries[c] = mean  # exact centroid step, no residual arithmetic
        else:
            d.entries[c] = m * d.entries[c] + (1 - m) * mean
    d.step += 1


def quantization_error(d: VisualDictionary, features: np.ndarray) -> float:
    a = assign(features, d)
    diff = features.astype(np.float64) - d.entries[a].astype(np.float64)
    return float((diff * diff).sum(-1).mean())


def build_dictionary(
    features: np.ndarray,
    C: int,
    momentum: float,
    epochs: int,
    rng: np.random.Generator,
    batch_size: int = 256,
) -> VisualDictionary:
    """Init from samples, then epochs of shuffled batched momentum updates.

    Per-epoch quantization error lands in d.history (not serialized).
    """
    features = np.asarray(features, dtype=np.float32)
    d = kmeans_init(features, C, rng, momentum)
    d.history.append(quantization_error(d, features))
    n = features.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for at in range(0, n, batch_size):
            momentum_update(d, features[order[at : at + batch_size]])
        d.history.append(quantization_error(d, features))
    return d


# ---------------------------------------------------------------------------
# file format: magic, u32 version, u32 C, u32 d_v, f32 momentum, f32 entries
# ---------------------------------------------------------------------------


def save_dictionary(d: VisualDictionary, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", _VERSION, d.C, d.d_v))
        fh.write(struct.pack("<f", d.momentum))
        fh.write(np.ascontiguousarray(d.entries, dtype="<f4").tobytes())


def load_dictionary(path: str) -> VisualDictionary:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != _MAGIC:
        raise BadMagicError(f"{path}: not a visual dictionary file")
    if len(raw) < 20:
        raise TruncatedFileError(f"{path}: header truncated")
    version, C, d_v = struct.unpack_from("<III", raw, 4)
    if version != _VERSION:
        raise BadVersionError(f"{path}: unsupported dictionary version {version}")
    (momentum,) = struct.unpack_from("<f", raw, 16)
    need = 20 + 4 * C * d_v
    if len(raw) < need:
        raise TruncatedFileError(
            f"{path}: payload truncated ({len(raw)} bytes, need {need})"
        )
    entries = np.frombuffer(raw, dtype="<f4", count=C * d_v, offset=20)
    return VisualDictionary(
        entries=entries.reshape(C, d_v).copy(), momentum=float(momentum)
    )
