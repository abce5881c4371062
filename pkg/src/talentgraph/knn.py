"""Per-category nearest-neighbor search over pooled keyword vectors.

The exact index is the correctness reference: cosine similarity, ties broken
by vector identity (candidate id, then position) so results are reproducible
regardless of insertion order. A beam-search approximate index honors the
same query contract as an optional drop-in.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embeddings import EmbeddingSet
from .errors import ValidationError
from .profiles import EntityCategory


@dataclass(frozen=True, order=True)
class VectorId:
    """Identity of one keyword vector: owner, category, slot in its set."""

    candidate_id: str
    category: EntityCategory
    position: int


@dataclass
class NeighborTable:
    """k nearest neighbors (nearest first) of every vector in one category pool."""

    category: EntityCategory
    k: int
    neighbors: dict[VectorId, tuple[VectorId, ...]]

    def __len__(self) -> int:
        return len(self.neighbors)


def _prepare(vectors: Sequence[tuple[VectorId, np.ndarray]]):
    if not vectors:
        raise ValidationError("cannot build an index over an empty pool")
    ordered = sorted(vectors, key=lambda pair: pair[0])
    ids = [vid for vid, _ in ordered]
    dim = np.asarray(ordered[0][1]).size
    matrix = np.empty((len(ordered), dim))
    for row, (vid, vec) in enumerate(ordered):
        arr = np.asarray(vec, dtype=np.float64).reshape(-1)
        if arr.size != dim:
            raise ValidationError(f"vector {vid} has dimension {arr.size}, expected {dim}")
        norm = np.linalg.norm(arr)
        if norm == 0.0 or not np.isfinite(norm):
            raise ValidationError(f"vector {vid} has degenerate norm")
        matrix[row] = arr / norm
    return ids, matrix


class ExactIndex:
    """Brute-force cosine index; vectors stored unit-normalized in id order."""

    def __init__(self, vectors: Sequence[tuple[VectorId, np.ndarray]]):
        self.ids, self.matrix = _prepare(vectors)
        self._row_of = {vid: row for row, vid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def query(self, q: np.ndarray, k: int, exclude: VectorId | None = None) -> list[VectorId]:
        """Top-k ids by descending cosine similarity, ties by ascending VectorId."""
        if k < 1:
            raise ValidationError("k must be >= 1")
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        norm = np.linalg.norm(q)
        if norm == 0.0:
            raise ValidationError("query vector has zero norm")
        sims = self.matrix @ (q / norm)
        # Stable argsort on -sims: ties fall back to row order == VectorId order.
        order = np.argsort(-sims, kind="stable")
        skip = self._row_of.get(exclude, -1) if exclude is not None else -1
        out: list[VectorId] = []
        for row in order:
            if row == skip:
                continue
            out.append(self.ids[row])
            if len(out) == k:
                break
        return out

    def query_batch(self, k: int) -> dict[VectorId, tuple[VectorId, ...]]:
        """Neighbors of every indexed vector (self excluded), computed blockwise."""
        n = len(self.ids)
        result: dict[VectorId, tuple[VectorId, ...]] = {}
        block = 512
        for start in range(0, n, block):
            stop = min(start + block, n)
            sims = self.matrix[start:stop] @ self.matrix.T
            order = np.argsort(-sims, axis=1, kind="stable")
            for local, row in enumerate(range(start, stop)):
                picked: list[VectorId] = []
                for col in order[local]:
                    if col == row:
                        continue
                    picked.append(self.ids[col])
                    if len(picked) == k:
                        break
                result[self.ids[row]] = tuple(picked)
        return result


class ApproxIndex:
    """Greedy beam-search graph index (NSW style); same query contract as exact.

    Quality knob, not a correctness reference: recall against the exact index
    should stay high but is not guaranteed.
    """

    def __init__(
        self,
        vectors: Sequence[tuple[VectorId, np.ndarray]],
        m_edges: int = 16,
        ef_construction: int = 100,
    ):
        self.ids, self.matrix = _prepare(vectors)
        self._row_of = {vid: row for row, vid in enumerate(self.ids)}
        self.m_edges = m_edges
        self._links: list[list[int]] = [[] for _ in self.ids]
        for row in range(1, len(self.ids)):
            found = self._search(self.matrix[row], ef_construction, limit=row)
            chosen = found[: self.m_edges]
            for other in chosen:
                self._links[row].append(other)
                self._links[other].append(row)
                if len(self._links[other]) > 2 * self.m_edges:
                    self._links[other] = self._shrink(other)

    def _shrink(self, row: int) -> list[int]:
        links = self._links[row]
        sims = self.matrix[links] @ self.matrix[row]
        order = np.argsort(-sims, kind="stable")
        return [links[i] for i in order[: self.m_edges]]

    def _search(self, q: np.ndarray, ef: int, limit: int | None = None) -> list[int]:
        """Beam search; returns candidate rows ordered best-first."""
        n = len(self.ids) if limit is None else limit
        if n <= 0:
            return []
        start = 0
        visited = {start}
        start_sim = float(self.matrix[start] @ q)
        # best-first frontier by similarity; result heap keeps the ef best seen
        frontier = [(-start_sim, start)]
        best: list[tuple[float, int]] = [(start_sim, start)]
        worst = start_sim
        while frontier:
            neg_sim, row = heapq.heappop(frontier)
            if -neg_sim < worst and len(best) >= ef:
                break
            fresh = [c for c in self._links[row] if c < n and c not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            sims = self.matrix[fresh] @ q
            for cand, sim in zip(fresh, sims.tolist()):
                if len(best) < ef or sim > worst:
                    heapq.heappush(frontier, (-sim, cand))
                    heapq.heappush(best, (sim, cand))
                    if len(best) > ef:
                        heapq.heappop(best)
                    worst = best[0][0]
        rows = [row for _, row in best]
        sims = self.matrix[rows] @ q
        order = np.argsort(-sims, kind="stable")
        return [rows[i] for i in order]

    def __len__(self) -> int:
        return len(self.ids)

    def query(self, q: np.ndarray, k: int, exclude: VectorId | None = None) -> list[VectorId]:
        if k < 1:
            raise ValidationError("k must be >= 1")
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        norm = np.linalg.norm(q)
        if norm == 0.0:
            raise ValidationError("query vector has zero norm")
        q = q / norm
        rows = self._search(q, ef=max(64, 4 * k))
        # Exact rerank of the candidate set with the shared tie-break rule.
        sims = self.matrix[rows] @ q
        ranked = sorted(zip(rows, sims.tolist()), key=lambda rs: (-rs[1], rs[0]))
        skip = self._row_of.get(exclude, -1) if exclude is not None else -1
        out = [self.ids[row] for row, _ in ranked if row != skip]
        return out[:k]


def build_index(
    vectors: Sequence[tuple[VectorId, np.ndarray]],
    metric: str = "cosine",
    method: str = "exact",
) -> ExactIndex | ApproxIndex:
    """Build a per-category index. Exact mode is the default and the reference."""
    if metric != "cosine":
        raise ValidationError(f"unsupported metric {metric!r}")
    if method == "exact":
        return ExactIndex(vectors)
    if method == "approx":
        return ApproxIndex(vectors)
    raise ValidationError(f"unknown index method {method!r}")


def pool_vectors(
    sets: Iterable[EmbeddingSet],
) -> dict[EntityCategory, list[tuple[VectorId, np.ndarray]]]:
    """Group all keyword vectors by category, tagging each with its VectorId."""
    pools: dict[EntityCategory, list[tuple[VectorId, np.ndarray]]] = {}
    for s in sets:
        for position in range(len(s)):
            vid = VectorId(s.candidate_id, s.category, position)
            pools.setdefault(s.category, []).append((vid, s.vectors[position]))
    return pools


def neighbor_tables(
    sets: Sequence[EmbeddingSet], k: int, method: str = "exact"
) -> dict[EntityCategory, NeighborTable]:
    """kNN table per category over the pooled vectors of all candidates.

    Categories with no vectors at all are omitted; a single-vector pool yields
    an empty neighbor list for that vector.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    tables: dict[EntityCategory, NeighborTable] = {}
    for category, pool in sorted(pool_vectors(sets).items()):
        index = build_index(pool, method=method)
        if len(index) == 1:
            neighbors = {index.ids[0]: ()}
        elif isinstance(index, ExactIndex):
            neighbors = index.query_batch(k)
        else:
            neighbors = {
                vid: tuple(index.query(index.matrix[row], k, exclude=vid))
                for row, vid in enumerate(index.ids)
            }
        tables[category] = NeighborTable(category, k, neighbors)
    return tables


def save_neighbor_tables(tables: Mapping[EntityCategory, NeighborTable], path) -> None:
    """Optional JSONL dump of neighbor lists for inspection."""
    import json
    from pathlib import Path

    def encode(vid: VectorId) -> dict:
        return {
            "candidate": vid.candidate_id,
            "category": vid.category.json_key,
            "position": vid.position,
        }

    with Path(path).open("w", encoding="utf-8") as fh:
        for _, table in sorted(tables.items()):
            for vid in sorted(table.neighbors):
                obj = {
                    "vector_id": encode(vid),
                    "neighbors": [encode(n) for n in table.neighbors[vid]],
                }
                fh.write(json.dumps(obj) + "\n")
