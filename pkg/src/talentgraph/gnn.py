"""Heterogeneous graph convolution layers on the autodiff core.

Two layer forms over the five edge relations, summed across relations with
one nonlinearity after the sum:

* gcn  -- per relation, symmetric-normalized weighted operator with self
  loops: D^(-1/2) (A_w + I) D^(-1/2), where the degree includes weights.
* rgcn -- per relation, row-normalized unweighted operator 1/|N_r(i)| with
  no self loops; the node itself enters through a separate self weight.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError, ValidationError
from .graph import HeteroGraph
from .profiles import EntityCategory

CONV_KINDS = ("gcn", "rgcn")
HIDDEN_RANGE = (16, 64)
DEPTH_RANGE = (1, 5)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture choice: convolution kind, width, depth, activation."""

    conv: str = "gcn"
    hidden: int = 32
    depth: int = 2
    activation: str = "leaky_relu"

    def __post_init__(self):
        if self.conv not in CONV_KINDS:
            raise ValidationError(f"conv must be one of {CONV_KINDS}")
        if self.hidden < 1 or self.depth < 1:
            raise ValidationError("hidden and depth must be >= 1")
        if self.activation not in ad.ACTIVATIONS:
            raise ValidationError(f"activation must be one of {sorted(ad.ACTIVATIONS)}")

    def to_json(self) -> dict:
        return {
            "conv": self.conv,
            "hidden": self.hidden,
            "depth": self.depth,
            "activation": self.activation,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ModelSpec":
        return cls(obj["conv"], int(obj["hidden"]), int(obj["depth"]), obj["activation"])


@dataclass
class RelationAdjacency:
    """Normalized sparse operator for one relation (plus its transpose)."""

    category: EntityCategory
    matrix: sp.csr_matrix
    matrix_t: sp.csr_matrix
    weighted: bool
    num_edges: int


def normalize_adjacency(
    edges: Sequence[tuple[int, int, float]],
    num_nodes: int,
    mode: str,
    category: EntityCategory = EntityCategory.SOFT_SKILLS,
) -> RelationAdjacency:
    """Turn an undirected weighted edge list into a normalized message operator.

    gcn mode keeps the weights and adds unit self loops before symmetric
    degree normalization; rgcn mode ignores weights, adds no self loops, and
    row-normalizes by neighbor count.
    """
    if mode not in CONV_KINDS:
        raise ValidationError(f"mode must be one of {CONV_KINDS}")
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    for i, j, w in edges:
        if i == j:
            raise ValidationError(f"self-loop ({i}, {j}) in edge list")
        if not (0 <= i < num_nodes and 0 <= j < num_nodes):
            raise ValidationError(f"edge ({i}, {j}) outside node range")
        if w < 0:
            raise ValidationError(f"negative edge weight {w} on ({i}, {j})")
        value = w if mode == "gcn" else 1.0
        rows.extend((i, j))
        cols.extend((j, i))
        vals.extend((value, value))
    if mode == "gcn":
        rows.extend(range(num_nodes))
        cols.extend(range(num_nodes))
        vals.extend([1.0] * num_nodes)
    adj = sp.csr_matrix(
        (np.asarray(vals), (np.asarray(rows, dtype=np.intp), np.asarray(cols, dtype=np.intp))),
        shape=(num_nodes, num_nodes),
    )
    adj.sum_duplicates()
    degrees = np.asarray(adj.sum(axis=1)).ravel()
    if mode == "gcn":
        inv_sqrt = np.where(degrees > 0, 1.0 / np.sqrt(np.where(degrees > 0, degrees, 1.0)), 0.0)
        scaler = sp.diags(inv_sqrt)
        matrix = (scaler @ adj @ scaler).tocsr()
    else:
        inv = np.where(degrees > 0, 1.0 / np.where(degrees > 0, degrees, 1.0), 0.0)
        matrix = (sp.diags(inv) @ adj).tocsr()
    return RelationAdjacency(
        category=category,
        matrix=matrix,
        matrix_t=matrix.T.tocsr(),
        weighted=(mode == "gcn"),
        num_edges=len(edges),
    )


def build_relation_adjacencies(
    graph: HeteroGraph, mode: str
) -> dict[EntityCategory, RelationAdjacency]:
    """One normalized operator per relation that actually has edges."""
    num_nodes = len(graph.nodes)
    return {
        cat: normalize_adjacency(edge_list, num_nodes, mode, category=cat)
        for cat, edge_list in sorted(graph.edges.items())
        if edge_list
    }


@dataclass
class LayerParams:
    """Per-layer parameters: one weight per relation, optional self weight, bias."""

    weights: dict[EntityCategory, Tensor]
    self_weight: Tensor | None
    bias: Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_layer(
    rng: np.random.Generator,
    in_width: int,
    out_width: int,
    relations: Sequence[EntityCategory],
    conv: str,
) -> LayerParams:
    weights = {
        cat: Tensor(glorot(rng, in_width, out_width), requires_grad=True)
        for cat in sorted(relations)
    }
    self_weight = (
        Tensor(glorot(rng, in_width, out_width), requires_grad=True) if conv == "rgcn" else None
    )
    bias = Tensor(np.zeros((1, out_width)), requires_grad=True)
    return LayerParams(weights, self_weight, bias)


def hetero_forward(
    h: Tensor,
    adjacencies: Mapping[EntityCategory, RelationAdjacency],
    params: LayerParams,
    activation: str,
) -> Tensor:
    """One heterogeneous convolution: per-relation messages summed, then activated.

    Relations without an adjacency entry (no edges) contribute nothing. With
    the rgcn self weight present, the layer adds H @ W_self before the sum.
    """
    ad.check_finite(h, "layer input")
    num_nodes, in_width = h.shape
    out_width = params.bias.shape[1]
    acc: Tensor | None = None
    if params.self_weight is not None:
        acc = ad.matmul(h, params.self_weight)
    for cat in sorted(adjacencies):
        if cat not in params.weights:
            raise ValidationError(f"no weight for relation {cat.json_key}")
        rel = adjacencies[cat]
        if rel.matrix.shape[0] != num_nodes:
            raise ValidationError(
                f"{cat.json_key}: operator over {rel.matrix.shape[0]} nodes, features have {num_nodes}"
            )
        message = ad.matmul(ad.spmm(rel.matrix, rel.matrix_t, h), params.weights[cat])
        acc = message if acc is None else ad.add(acc, message)
    if acc is None:
        acc = Tensor(np.zeros((num_nodes, out_width)))
    out = ad.ACTIVATIONS[activation](ad.add(acc, params.bias))
    return ad.check_finite(out, "layer output")


class HeteroGNN:
    """Trunk of stacked heterogeneous convolutions producing node embeddings."""

    def __init__(
        self,
        spec: ModelSpec,
        in_width: int,
        relations: Sequence[EntityCategory],
        rng: np.random.Generator,
    ):
        self.spec = spec
        self.relations = tuple(sorted(relations))
        self.widths = [in_width] + [spec.hidden] * spec.depth
        self.layers = [
            init_layer(rng, self.widths[d], self.widths[d + 1], self.relations, spec.conv)
            for d in range(spec.depth)
        ]

    def forward(
        self, features: Tensor, adjacencies: Mapping[EntityCategory, RelationAdjacency]
    ) -> Tensor:
        h = features
        for layer in self.layers:
            h = hetero_forward(h, adjacencies, layer, self.spec.activation)
        return h

    def parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for depth, layer in enumerate(self.layers):
            for cat in sorted(layer.weights):
                out.append((f"trunk.layer{depth}.rel{int(cat)}.weight", layer.weights[cat]))
            if layer.self_weight is not None:
                out.append((f"trunk.layer{depth}.self.weight", layer.self_weight))
            out.append((f"trunk.layer{depth}.bias", layer.bias))
        return out


# ----------------------------------------------------------------------
# Named-tensor checkpoint file: JSON header + length-prefixed f32 tensors
# ----------------------------------------------------------------------

CKPT_MAGIC = b"GNN1"


def save_named_tensors(
    path: str | Path, header: dict, tensors: Sequence[tuple[str, np.ndarray]]
) -> None:
    """Write a checkpoint: magic, JSON header, then (name, shape, f32 payload) records."""
    path = Path(path)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, array in tensors:
            encoded = name.encode("utf-8")
            arr = np.ascontiguousarray(array, dtype="<f4")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_named_tensors(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    offset = 0

    def take(count: int, what: str) -> bytes:
        nonlocal offset
        if offset + count > len(data):
            raise FormatError(f"truncated checkpoint: {what} at byte {offset}")
        chunk = data[offset : offset + count]
        offset += count
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic")
    (header_len,) = struct.unpack("<I", take(4, "header length"))
    header = json.loads(take(header_len, "header").decode("utf-8"))
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        size = int(np.prod(shape)) if ndim else 1
        payload = take(size * 4, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    return header, tensors
