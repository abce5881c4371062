"""Five-relation candidate similarity graph from shared nearest neighbors.

For a candidate pair and one category, the overlap J is the fraction of the
pair's keyword vectors that share at least one neighbor with some vector on
the other side (closed neighborhoods: a vector counts as its own neighbor).
Edge weight = max(1 - exp(-lam * J) - theta, 0); zero-weight pairs are
dropped, so stored weights lie in (0, 1 - theta].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .knn import NeighborTable, VectorId
from .profiles import EntityCategory

OVERLAP_MODES = ("shared_neighbor", "subset_pairs")


@dataclass(frozen=True)
class GraphBuildConfig:
    """Neighbor count, similarity scale, and discard threshold."""

    k: int = 10
    lam: float = 2.0
    theta: float = 0.2
    overlap_mode: str = "shared_neighbor"

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if not self.lam > 0:
            raise ValidationError("lam must be positive")
        if not (0.0 <= self.theta < 1.0):
            raise ValidationError("theta must lie in [0, 1)")
        if self.overlap_mode not in OVERLAP_MODES:
            raise ValidationError(f"overlap_mode must be one of {OVERLAP_MODES}")


@dataclass(frozen=True)
class OverlapResult:
    """Shared-neighbor count for one candidate pair in one category."""

    first: str
    second: str
    category: EntityCategory
    numerator: int
    denominator: int

    @property
    def value(self) -> float:
        return self.numerator / self.denominator


@dataclass
class HeteroGraph:
    """Candidate nodes with trait features and five weighted edge relations.

    Edges are undirected, stored once with i < j (indices into ``nodes``),
    strictly positive weights only.
    """

    nodes: tuple[str, ...]
    features: np.ndarray | None
    edges: dict[EntityCategory, list[tuple[int, int, float]]]

    def __post_init__(self):
        if not self.nodes:
            raise ValidationError("graph must have at least one node")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.shape[0] != len(self.nodes):
                raise ValidationError(
                    f"feature rows ({self.features.shape[0]}) != node count ({len(self.nodes)})"
                )
        n = len(self.nodes)
        for cat, edge_list in self.edges.items():
            seen: set[tuple[int, int]] = set()
            for i, j, w in edge_list:
                if i == j:
                    raise ValidationError(f"{cat.json_key}: self-loop on node {i}")
                if not (0 <= i < j < n):
                    raise ValidationError(f"{cat.json_key}: bad edge indices ({i}, {j})")
                if not w > 0:
                    raise ValidationError(f"{cat.json_key}: non-positive weight {w}")
                if (i, j) in seen:
                    raise ValidationError(f"{cat.json_key}: duplicate edge ({i}, {j})")
                seen.add((i, j))

    @property
    def num_edges(self) -> int:
        return sum(len(e) for e in self.edges.values())

    def node_index(self) -> dict[str, int]:
        return {cid: idx for idx, cid in enumerate(self.nodes)}


def similarity(j_value: float, config: GraphBuildConfig) -> float:
    """Thresholded exponential similarity of an overlap value."""
    if not (0.0 <= j_value <= 1.0):
        raise ValidationError(f"overlap value {j_value} outside [0, 1]")
    return max(1.0 - math.exp(-config.lam * j_value) - config.theta, 0.0)


# ----------------------------------------------------------------------
# Overlap computation
# ----------------------------------------------------------------------

def _closed_neighborhoods(table: NeighborTable) -> dict[str, list[frozenset[VectorId]]]:
    """Per candidate: one closed neighbor set (kNN plus the vector itself) per vector."""
    grouped: dict[str, list[frozenset[VectorId]]] = {}
    for vid in sorted(table.neighbors):
        closed = frozenset(table.neighbors[vid]) | {vid}
        grouped.setdefault(vid.candidate_id, []).append(closed)
    return grouped


def _raw_neighborhoods(table: NeighborTable) -> dict[str, list[frozenset[VectorId]]]:
    grouped: dict[str, list[frozenset[VectorId]]] = {}
    for vid in sorted(table.neighbors):
        grouped.setdefault(vid.candidate_id, []).append(frozenset(table.neighbors[vid]))
    return grouped


def _count_sharing(
    left: Sequence[frozenset[VectorId]], right: Sequence[frozenset[VectorId]]
) -> int:
    return sum(1 for mine in left if any(not mine.isdisjoint(theirs) for theirs in right))


def overlap(
    first: str,
    second: str,
    category: EntityCategory,
    table: NeighborTable,
    mode: str = "shared_neighbor",
) -> OverlapResult | None:
    """Overlap between two candidates' vector sets in one category.

    Returns None (overlap undefined) when either candidate has no vectors in
    the category. The default counts, on each side, the vectors whose closed
    neighborhood intersects some closed neighborhood on the other side;
    ``subset_pairs`` keeps the asymmetric pair-count variant for comparison.
    """
    if first == second:
        raise ValidationError("overlap requires two distinct candidates")
    if mode == "shared_neighbor":
        hoods = _closed_neighborhoods(table)
    elif mode == "subset_pairs":
        hoods = _raw_neighborhoods(table)
    else:
        raise ValidationError(f"unknown overlap mode {mode!r}")
    mine = hoods.get(first)
    theirs = hoods.get(second)
    if not mine or not theirs:
        return None
    if mode == "shared_neighbor":
        numerator = _count_sharing(mine, theirs) + _count_sharing(theirs, mine)
    else:
        numerator = sum(1 for a in mine for b in theirs if a <= b)
    return OverlapResult(first, second, category, numerator, len(mine) + len(theirs))


def candidate_pairs(table: NeighborTable) -> set[tuple[str, str]]:
    """All candidate pairs that can have nonzero overlap in this category.

    Inverts the closed neighbor lists: two candidates form a pair exactly
    when some vector of one and some vector of the other contain a common
    member, which is equivalent to J > 0.
    """
    owners: dict[VectorId, set[str]] = {}
    for vid, neighbors in table.neighbors.items():
        for member in (vid, *neighbors):
            owners.setdefault(member, set()).add(vid.candidate_id)
    pairs: set[tuple[str, str]] = set()
    for holders in owners.values():
        if len(holders) < 2:
            continue
        ordered = sorted(holders)
        for a in range(len(ordered)):
            for b in range(a + 1, len(ordered)):
                pairs.add((ordered[a], ordered[b]))
    return pairs


def build_graph(
    nodes: Sequence[str],
    tables: Mapping[EntityCategory, NeighborTable],
    config: GraphBuildConfig,
    features: np.ndarray | None = None,
) -> HeteroGraph:
    """Assemble the heterogeneous graph over the given candidate nodes.

    ``nodes`` fixes the node set and order (deduplicated, sorted); every edge
    is an above-threshold similarity between two candidates in one category.
    """
    node_list = tuple(sorted(set(nodes)))
    if not node_list:
        raise ValidationError("cannot build a graph without candidates")
    if features is not None and list(nodes) != list(node_list):
        raise ValidationError("feature rows must follow sorted unique node order")
    index = {cid: pos for pos, cid in enumerate(node_list)}
    edges: dict[EntityCategory, list[tuple[int, int, float]]] = {
        cat: [] for cat in EntityCategory
    }
    for category in sorted(tables):
        table = tables[category]
        if config.overlap_mode == "shared_neighbor":
            hoods = _closed_neighborhoods(table)
        else:
            hoods = _raw_neighborhoods(table)
        for first, second in sorted(candidate_pairs(table)):
            if first not in index or second not in index:
                continue
            mine, theirs = hoods[first], hoods[second]
            if config.overlap_mode == "shared_neighbor":
                numerator = _count_sharing(mine, theirs) + _count_sharing(theirs, mine)
            else:
                numerator = sum(1 for a in mine for b in theirs if a <= b)
            j_value = numerator / (len(mine) + len(theirs))
            weight = max(1.0 - math.exp(-config.lam * j_value) - config.theta, 0.0)
            if weight > 0.0:
                i, j = sorted((index[first], index[second]))
                edges[category].append((i, j, weight))
    for cat in edges:
        edges[cat].sort()
    return HeteroGraph(node_list, features, edges)


# ----------------------------------------------------------------------
# Serialization (graph.jsonl + features sidecar)
# ----------------------------------------------------------------------

def features_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".features.json")


def _round9(w: float) -> float:
    return float(f"{w:.9g}")


def save_graph(graph: HeteroGraph, path: str | Path) -> None:
    """Write graph.jsonl (header line, then one edge per line, 9 sig digits)."""
    path = Path(path)
    feature_dim = int(graph.features.shape[1]) if graph.features is not None else 0
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"nodes": list(graph.nodes), "feature_dim": feature_dim}) + "\n")
        for cat in sorted(graph.edges):
            for i, j, w in graph.edges[cat]:
                fh.write(
                    json.dumps({"category": int(cat), "i": i, "j": j, "weight": _round9(w)})
                    + "\n"
                )
    if graph.features is not None:
        payload = {
            "nodes": list(graph.nodes),
            "features": [[_round9(v) for v in row] for row in graph.features.tolist()],
        }
        features_path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")


def load_graph(path: str | Path) -> HeteroGraph:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"graph file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
            nodes = tuple(header["nodes"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"bad graph header: {exc}") from None
        edges: dict[EntityCategory, list[tuple[int, int, float]]] = {
            cat: [] for cat in EntityCategory
        }
        for lineno, raw in enumerate(fh, start=2):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
                cat = EntityCategory(int(obj["category"]))
                edges[cat].append((int(obj["i"]), int(obj["j"]), float(obj["weight"])))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise FormatError(f"bad edge at line {lineno}: {exc}") from None
    features = None
    fpath = features_path(path)
    if fpath.exists():
        payload = json.loads(fpath.read_text(encoding="utf-8"))
        if tuple(payload["nodes"]) != nodes:
            raise FormatError("feature sidecar nodes do not match graph nodes")
        features = np.asarray(payload["features"], dtype=np.float64)
    return HeteroGraph(nodes, features, edges)
