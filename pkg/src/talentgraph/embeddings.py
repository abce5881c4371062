"""Keyword embeddings: provider abstraction, deterministic stub, binary store.

Each keyword of a (candidate, category) pair becomes one unit vector; the
set of those vectors is an :class:`EmbeddingSet`. Vectors persist in the
EMB1 binary format with a JSONL sidecar carrying the keyword strings.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import FormatError, ProtocolError, RetryExhaustedError, TransportError, ValidationError
from .profiles import CandidateProfile, EntityCategory

EMB1_MAGIC = b"EMB1"
EMB1_VERSION = 1
DEFAULT_DIM = 768

UNIT_NORM_TOL = 1e-6


@dataclass
class EmbeddingSet:
    """All vectors for one (candidate, category) pair, one per keyword."""

    candidate_id: str
    category: EntityCategory
    vectors: np.ndarray  # (n, dim) float32, unit rows; n may be 0
    keywords: tuple[str, ...] | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ValidationError("vectors must be a 2-D array (count x dim)")
        if self.keywords is not None and len(self.keywords) != len(self.vectors):
            raise ValidationError(
                f"({self.candidate_id!r}, {self.category.json_key}): "
                f"{len(self.keywords)} keywords but {len(self.vectors)} vectors"
            )

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class ProviderConfig:
    """Which embedding backend to use and how it is parameterized."""

    kind: str = "stub"
    dim: int = DEFAULT_DIM
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("stub", "external"):
            raise ValidationError(f"unknown provider kind {self.kind!r}")
        if self.dim < 2:
            raise ValidationError("embedding dimension must be >= 2")


class EmbeddingProvider(Protocol):
    """Maps one keyword string to one real vector of a fixed dimension.

    Implementations raise ``TransportError`` for retryable failures.
    """

    def embed(self, keyword: str) -> np.ndarray: ...


def stub_embed(keyword: str, dim: int, seed: int) -> np.ndarray:
    """Deterministic pseudo-random unit vector for a keyword.

    Pure function of (keyword, dim, seed): the keyword is hashed into an RNG
    seed, so equal inputs give bit-identical vectors across runs and hosts.
    """
    if not keyword:
        raise ValidationError("cannot embed an empty keyword")
    digest = hashlib.blake2b(
        f"{seed}\x1f{dim}\x1f{keyword}".encode("utf-8"), digest_size=16
    ).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


class StubEmbeddingProvider:
    """Offline provider backed by :func:`stub_embed`."""

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def embed(self, keyword: str) -> np.ndarray:
        return stub_embed(keyword, self.dim, self.seed)


def make_provider(config: ProviderConfig) -> EmbeddingProvider:
    if config.kind == "stub":
        return StubEmbeddingProvider(config.dim, config.seed)
    raise ValidationError(
        "provider kind 'external' is an integration point; pass a provider object directly"
    )


def embed_profile(
    profile: CandidateProfile, provider: EmbeddingProvider, retries: int = 3
) -> list[EmbeddingSet]:
    """Embed every keyword of a profile, one :class:`EmbeddingSet` per category.

    Keywords are embedded in sorted order; vectors are re-normalized to unit
    length regardless of what the provider returns. A dimension mismatch
    across keywords is a protocol error.
    """
    sets: list[EmbeddingSet] = []
    dim: int | None = None
    for cat in EntityCategory:
        keywords = sorted(profile.entities[cat])
        rows: list[np.ndarray] = []
        for keyword in keywords:
            raw = _embed_with_retry(provider, keyword, retries)
            vec = np.asarray(raw, dtype=np.float64).reshape(-1)
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ProtocolError(
                    f"provider returned dimension {vec.size} for {keyword!r}, expected {dim}"
                )
            norm = np.linalg.norm(vec)
            if norm == 0.0 or not np.isfinite(norm):
                raise ProtocolError(f"provider returned a degenerate vector for {keyword!r}")
            rows.append(vec / norm)
        width = dim if dim is not None else getattr(provider, "dim", DEFAULT_DIM)
        matrix = np.array(rows, dtype=np.float32) if rows else np.empty((0, width), np.float32)
        sets.append(EmbeddingSet(profile.candidate_id, cat, matrix, tuple(keywords)))
    return sets


def _embed_with_retry(provider: EmbeddingProvider, keyword: str, retries: int) -> np.ndarray:
    attempts = 0
    while True:
        attempts += 1
        try:
            return provider.embed(keyword)
        except TransportError as exc:
            if attempts >= retries:
                raise RetryExhaustedError(f"embedding {keyword!r} failed: {exc}", attempts) from exc


# ----------------------------------------------------------------------
# EMB1 binary store
# ----------------------------------------------------------------------
#
# Layout: magic "EMB1" | u32 version | u32 dim | u64 record_count | records.
# Record: u32 id_len | candidate_id utf-8 | u8 category | u32 vec_count
#         | vec_count * dim * f32 little-endian.
# Keyword strings live in a JSONL sidecar next to the binary file.


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".keywords.jsonl")


def write_store(sets: Sequence[EmbeddingSet], path: str | Path) -> None:
    """Write an EMB1 store plus keyword sidecar; fails on mixed dimensions."""
    path = Path(path)
    dims = {s.dim for s in sets if len(s) > 0}
    if len(dims) > 1:
        raise ValidationError(f"embedding sets have mixed dimensions {sorted(dims)}")
    dim = dims.pop() if dims else (sets[0].dim if sets else DEFAULT_DIM)
    ordered = sorted(sets, key=lambda s: (s.candidate_id, int(s.category)))
    with path.open("wb") as fh:
        fh.write(EMB1_MAGIC)
        fh.write(struct.pack("<IIQ", EMB1_VERSION, dim, len(ordered)))
        for s in ordered:
            cid = s.candidate_id.encode("utf-8")
            fh.write(struct.pack("<I", len(cid)))
            fh.write(cid)
            fh.write(struct.pack("<BI", int(s.category), len(s)))
            fh.write(np.ascontiguousarray(s.vectors, dtype="<f4").tobytes())
    with sidecar_path(path).open("w", encoding="utf-8") as fh:
        for s in ordered:
            obj = {
                "candidate_id": s.candidate_id,
                "category": s.category.json_key,
                "keywords": list(s.keywords) if s.keywords is not None else [],
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def read_store(path: str | Path) -> list[EmbeddingSet]:
    """Read an EMB1 store; bit-exact inverse of :func:`write_store` for the f32 payload."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"embedding store not found: {path}")
    data = path.read_bytes()
    offset = 0

    def take(count: int, what: str) -> bytes:
        nonlocal offset
        if offset + count > len(data):
            raise FormatError(f"truncated store: needed {count} bytes for {what} at byte {offset}")
        chunk = data[offset : offset + count]
        offset += count
        return chunk

    magic = take(4, "magic")
    if magic != EMB1_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {EMB1_MAGIC!r}")
    version, dim, count = struct.unpack("<IIQ", take(16, "header"))
    if version != EMB1_VERSION:
        raise FormatError(f"unsupported store version {version}")
    sets: list[EmbeddingSet] = []
    for _ in range(count):
        (id_len,) = struct.unpack("<I", take(4, "id length"))
        candidate_id = take(id_len, "candidate id").decode("utf-8")
        code, vec_count = struct.unpack("<BI", take(5, "record header"))
        try:
            category = EntityCategory(code)
        except ValueError:
            raise FormatError(f"invalid category code {code} at byte {offset - 5}") from None
        payload = take(vec_count * dim * 4, "vector payload")
        vectors = np.frombuffer(payload, dtype="<f4").reshape(vec_count, dim).copy()
        sets.append(EmbeddingSet(candidate_id, category, vectors))
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes at byte {offset}")

    keywords = _read_sidecar(sidecar_path(path))
    if keywords:
        for s in sets:
            kws = keywords.get((s.candidate_id, s.category))
            if kws is not None:
                if len(kws) != len(s):
                    raise FormatError(
                        f"sidecar keyword count mismatch for ({s.candidate_id!r}, "
                        f"{s.category.json_key})"
                    )
                s.keywords = kws
    return sets


def _read_sidecar(path: Path) -> dict[tuple[str, EntityCategory], tuple[str, ...]]:
    if not path.exists():
        return {}
    result: dict[tuple[str, EntityCategory], tuple[str, ...]] = {}
    with path.open(encoding="utf-8") as fh:
        for raw in fh:
            if not raw.strip():
                continue
            obj = json.loads(raw)
            key = (obj["candidate_id"], EntityCategory.from_json_key(obj["category"]))
            result[key] = tuple(obj["keywords"])
    return result


def check_unit_norms(sets: Iterable[EmbeddingSet], tol: float = UNIT_NORM_TOL) -> None:
    """Assert the unit-norm invariant over a collection of sets."""
    for s in sets:
        if len(s) == 0:
            continue
        norms = np.linalg.norm(s.vectors.astype(np.float64), axis=1)
        worst = float(np.max(np.abs(norms - 1.0)))
        if worst > tol:
            raise ValidationError(
                f"({s.candidate_id!r}, {s.category.json_key}): vector norm off unit by {worst:.2e}"
            )
