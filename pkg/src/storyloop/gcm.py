"""Cross-shot entity memory.

Each registered entity keeps an appearance vector, a small attribute map and
the step at which it was last refreshed. Stores are immutable values: every
mutating operation returns a new store.
"""

from __future__ import annotations

import base64
import hashlib
import math
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Protocol, Sequence

from . import canonical
from .errors import DuplicateEntity, EmbeddingError, SnapshotParseError
from .storyboard import CharacterDecl

DEFAULT_DIM = 64
DEFAULT_ALPHA = 0.3

Vector = tuple[float, ...]


class FeatureExtractor(Protocol):
    dim: int

    def embed(self, content: bytes) -> Vector: ...


@dataclass(frozen=True)
class ArtifactRef:
    """A reference to stored media plus the bytes the extractor should see."""

    uri: str
    content: bytes = b""


@dataclass(frozen=True)
class EntityRecord:
    entity_id: str
    appearance_vec: Vector
    attributes: dict[str, str] = field(default_factory=dict)
    last_update_step: int = 0
    portrait_ref: str | None = None

    def to_dict(self) -> dict:
        return {
            "entity_id": self.entity_id,
            "appearance_vec": list(self.appearance_vec),
            "attributes": dict(self.attributes),
            "last_update_step": self.last_update_step,
            "portrait_ref": self.portrait_ref,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EntityRecord":
        return cls(
            entity_id=d["entity_id"],
            appearance_vec=tuple(float(x) for x in d["appearance_vec"]),
            attributes={str(k): str(v) for k, v in d["attributes"].items()},
            last_update_step=int(d["last_update_step"]),
            portrait_ref=d.get("portrait_ref"),
        )


@dataclass(frozen=True)
class MemoryStore:
    records: dict[str, EntityRecord] = field(default_factory=dict)
    step_counter: int = 0
    dim: int = DEFAULT_DIM

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self.records


# --- vector helpers -------------------------------------------------------


def hash_to_unit_vector(content: bytes, dim: int = DEFAULT_DIM) -> Vector:
    """Deterministic pseudo-random unit vector keyed on content bytes."""
    raw = hashlib.shake_256(content).digest(8 * dim)
    vals = [(u / 2**64) * 2.0 - 1.0 for u in struct.unpack(f"<{dim}Q", raw)]
    norm = math.sqrt(sum(v * v for v in vals))
    return tuple(v / norm for v in vals)


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    if len(a) != len(b):
        raise EmbeddingError(f"dimension mismatch: {len(a)} vs {len(b)}")
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def ema_blend(old: Sequence[float], new: Sequence[float], alpha: float) -> Vector:
    if len(old) != len(new):
        raise EmbeddingError(f"dimension mismatch: {len(old)} vs {len(new)}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 0.0:
        return tuple(old)
    if alpha == 1.0:
        return tuple(new)
    return tuple((1.0 - alpha) * o + alpha * n for o, n in zip(old, new))


# Symbolic appearance tokens carry an int8 quantization of the vector, so the
# embedding of a token round-trips to the vector it was minted from.
TOKEN_PREFIX = "q8:"


def appearance_token(vec: Sequence[float]) -> str:
    q = bytes((max(-127, min(127, round(127.0 * x))) & 0xFF) for x in vec)
    return TOKEN_PREFIX + base64.b64encode(q).decode("ascii")


@lru_cache(maxsize=4096)
def decode_token(token: str) -> Vector:
    try:
        raw = base64.b64decode(token[len(TOKEN_PREFIX):], validate=True)
    except ValueError as e:
        raise EmbeddingError(f"bad appearance token: {e}") from None
    return tuple((b - 256 if b > 127 else b) / 127.0 for b in raw)


class SymbolicExtractor:
    """Content-hash extractor that also understands symbolic appearance tokens."""

    def __init__(self, dim: int = DEFAULT_DIM):
        self.dim = dim

    def embed(self, content: bytes) -> Vector:
        if content.startswith(TOKEN_PREFIX.encode()):
            vec = decode_token(content.decode("ascii"))
            if len(vec) != self.dim:
                raise EmbeddingError(f"token has dimension {len(vec)}, expected {self.dim}")
            return vec
        return hash_to_unit_vector(content, self.dim)


def _checked(vec: Sequence[float], dim: int) -> Vector:
    vec = tuple(float(x) for x in vec)
    if len(vec) != dim:
        raise EmbeddingError(f"extractor returned dimension {len(vec)}, expected {dim}")
    return vec


# --- store operations -------------------------------------------------------


def register(
    store: MemoryStore, decl: CharacterDecl, portrait: ArtifactRef, embed: FeatureExtractor
) -> MemoryStore:
    if decl.id in store.records:
        raise DuplicateEntity(decl.id)
    rec = EntityRecord(
        entity_id=decl.id,
        appearance_vec=_checked(embed.embed(portrait.content), store.dim),
        attributes={"static_features": decl.static_features},
        last_update_step=0,
        portrait_ref=portrait.uri,
    )
    return replace(store, records={**store.records, decl.id: rec})


def retrieve(store: MemoryStore, entity_id: str, *, tally: Counter | None = None) -> EntityRecord | None:
    """Look up one record. ``tally`` counts lookups per entity id when given."""
    if tally is not None:
        tally[entity_id] += 1
    return store.records.get(entity_id)


def update_from_shot(
    store: MemoryStore, artifact, embed: FeatureExtractor, alpha: float = DEFAULT_ALPHA
) -> MemoryStore:
    """Blend the embeddings observed in an accepted shot into the store.

    The per-entity observation is the mean embedding over every frame where
    the entity appears. Unregistered entities are ignored.
    """
    observed: dict[str, list[str]] = {}
    for frame in artifact.frame_meta:
        for eid, tok in frame.items():
            if eid in store.records:
                observed.setdefault(eid, []).append(tok)

    records = dict(store.records)
    step = artifact.shot_index
    for eid, tokens in observed.items():
        cache: dict[str, Vector] = {}
        vecs = []
        for tok in tokens:
            if tok not in cache:
                cache[tok] = _checked(embed.embed(tok.encode("utf-8")), store.dim)
            vecs.append(cache[tok])
        if len(cache) == 1:
            mean = vecs[0]
        else:
            mean = tuple(sum(col) / len(vecs) for col in zip(*vecs))
        old = records[eid]
        records[eid] = replace(
            old,
            appearance_vec=ema_blend(old.appearance_vec, mean, alpha),
            last_update_step=max(old.last_update_step, step),
        )
    return replace(store, records=records, step_counter=max(store.step_counter, step))


def entity_overlap(prev: Iterable[str], cur: Iterable[str]) -> float:
    """Jaccard index of two entity-id sets; 1.0 when both are empty."""
    a, b = set(prev), set(cur)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def snapshot(store: MemoryStore) -> bytes:
    return canonical.dumps(
        {
            "dim": store.dim,
            "step_counter": store.step_counter,
            "records": {k: r.to_dict() for k, r in store.records.items()},
        }
    )


def restore(data: bytes) -> MemoryStore:
    try:
        obj = canonical.loads(data)
        dim = int(obj["dim"])
        records = {k: EntityRecord.from_dict(v) for k, v in obj["records"].items()}
        step = int(obj["step_counter"])
    except (ValueError, KeyError, TypeError, AttributeError) as e:
        raise SnapshotParseError(f"cannot restore memory snapshot: {e}") from None
    for k, r in records.items():
        if k != r.entity_id or len(r.appearance_vec) != dim or r.last_update_step > step:
            raise SnapshotParseError(f"inconsistent record {k!r}")
    return MemoryStore(records=records, step_counter=step, dim=dim)
