"""Candidate similarity graphs and heterogeneous GNNs for stage prediction.

Pipeline: profiles (traits + CV keywords) -> keyword embeddings -> per-category
kNN tables -> five-relation weighted graph -> multi-task GNN training ->
stage metrics. See the ``cli`` module for the file-based orchestration.
"""

from .errors import (
    FormatError,
    ParseError,
    ProtocolError,
    TalentGraphError,
    TransportError,
    ValidationError,
)
from .gnn import ModelSpec
from .graph import GraphBuildConfig, HeteroGraph
from .learning import TrainConfig
from .profiles import CandidateProfile, EntityCategory, SelectionOutcome
from .synthgen import SynthConfig

__version__ = "0.1.0"

__all__ = [
    "CandidateProfile",
    "EntityCategory",
    "FormatError",
    "GraphBuildConfig",
    "HeteroGraph",
    "ModelSpec",
    "ParseError",
    "ProtocolError",
    "SelectionOutcome",
    "SynthConfig",
    "TalentGraphError",
    "TrainConfig",
    "TransportError",
    "ValidationError",
    "__version__",
]
