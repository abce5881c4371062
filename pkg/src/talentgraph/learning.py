"""Transductive multi-task training over the candidate graph.

One shared GNN trunk feeds one small head per selection process. Heads come
in two kinds: an ordinal head (shared score, ordered thresholds, cumulative
exceedance probabilities) and a multi-label head (independent per-stage
logits decoded through a suffix running max). Losses are masked to the
train split; optimization is full-batch Adam.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import TrainingDivergedError, ValidationError
from .evaluation import EvalRecord, balanced_accuracy
from .gnn import (
    HeteroGNN,
    ModelSpec,
    build_relation_adjacencies,
    glorot,
    load_named_tensors,
    save_named_tensors,
)
from .graph import HeteroGraph
from .profiles import STAGE_MAX, STAGE_MIN, SelectionOutcome

HEAD_KINDS = ("ordinal", "multilabel")
NUM_STAGES = STAGE_MAX - STAGE_MIN + 1
ACTIVATION_CHOICES = ("leaky_relu", "elu", "tanh", "sigmoid")

# Upper-triangular ones: cumulative sums turn (base, increments) into thresholds.
_CUMSUM = np.triu(np.ones((3, 3)))


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings; defaults follow the experimental protocol."""

    epochs: int = 300
    lr: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 7
    class_weighting: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.lr < 0:
            raise ValidationError("learning rate must be non-negative")


# ----------------------------------------------------------------------
# Stratified splitting
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class SplitAssignment:
    """train/test fold for every (candidate, selection) pair."""

    seed: int
    folds: Mapping[tuple[str, str], str]

    def fold_of(self, outcome: SelectionOutcome) -> str:
        return self.folds[(outcome.candidate_id, outcome.selection_id)]

    def pairs(self, fold: str) -> list[tuple[str, str]]:
        return sorted(key for key, value in self.folds.items() if value == fold)


def _cell_rng(seed: int, selection_id: str, stage: int) -> np.random.Generator:
    digest = hashlib.blake2b(
        f"{seed}\x1f{selection_id}\x1f{stage}".encode("utf-8"), digest_size=8
    ).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def stratified_split(
    outcomes: Sequence[SelectionOutcome], ratio: float = 0.8, seed: int = 0
) -> SplitAssignment:
    """Per-(selection, stage) split at the given train ratio.

    Each cell contributes round(n * (1 - ratio)) test members; a singleton
    cell lands on one side at random, driven by a per-cell RNG derived from
    (seed, selection, stage) so the landing is reproducible.
    """
    if not outcomes:
        raise ValidationError("cannot split an empty outcome list")
    if not (0.0 < ratio < 1.0):
        raise ValidationError("ratio must lie in (0, 1)")
    cells: dict[tuple[str, int], list[SelectionOutcome]] = {}
    for outcome in outcomes:
        cells.setdefault((outcome.selection_id, outcome.stage), []).append(outcome)
    folds: dict[tuple[str, str], str] = {}
    for (selection_id, stage), members in sorted(cells.items()):
        members = sorted(members, key=lambda o: o.candidate_id)
        rng = _cell_rng(seed, selection_id, stage)
        if len(members) == 1:
            fold = "test" if rng.random() < (1.0 - ratio) else "train"
            folds[(members[0].candidate_id, selection_id)] = fold
            continue
        n_test = int(round(len(members) * (1.0 - ratio)))
        order = rng.permutation(len(members))
        for rank, idx in enumerate(order):
            fold = "test" if rank < n_test else "train"
            folds[(members[idx].candidate_id, selection_id)] = fold
    return SplitAssignment(seed=seed, folds=folds)


def save_split(split: SplitAssignment, path: str | Path) -> None:
    payload = {
        "seed": split.seed,
        "assignments": [
            {"candidate": cid, "selection": sid, "fold": split.folds[(cid, sid)]}
            for cid, sid in sorted(split.folds)
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_split(path: str | Path) -> SplitAssignment:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"split file not found: {path}")
    payload = json.loads(path.read_text(encoding="utf-8"))
    folds = {
        (entry["candidate"], entry["selection"]): entry["fold"]
        for entry in payload["assignments"]
    }
    return SplitAssignment(seed=int(payload.get("seed", 0)), folds=folds)


# ----------------------------------------------------------------------
# Target encodings and decoding rules
# ----------------------------------------------------------------------

def _check_stage(stage: int) -> int:
    if not (STAGE_MIN <= stage <= STAGE_MAX):
        raise ValidationError(f"stage {stage} not in [{STAGE_MIN}, {STAGE_MAX}]")
    return int(stage)


def ordinal_targets(stage: int) -> np.ndarray:
    """Cumulative threshold indicators [stage>0, stage>1, stage>2]."""
    stage = _check_stage(stage)
    return np.array([float(stage > k) for k in range(NUM_STAGES - 1)])


def multilabel_targets(stage: int) -> np.ndarray:
    """Stages-reached indicators [stage>=0, stage>=1, stage>=2, stage>=3]."""
    stage = _check_stage(stage)
    return np.array([float(stage >= k) for k in range(NUM_STAGES)])


def decode_ordinal(probs: np.ndarray) -> np.ndarray:
    """Stage = number of exceedance probabilities above 0.5."""
    probs = np.atleast_2d(np.asarray(probs))
    return (probs > 0.5).sum(axis=1).astype(int)


def consistent_multilabel(probs: np.ndarray) -> np.ndarray:
    """Suffix running max: forces reached-stage probabilities to be non-increasing."""
    probs = np.atleast_2d(np.asarray(probs))
    return np.maximum.accumulate(probs[:, ::-1], axis=1)[:, ::-1]


def decode_multilabel(probs: np.ndarray) -> np.ndarray:
    """Highest index whose cumulative-max probability clears 0.5 (default 0)."""
    consistent = consistent_multilabel(probs)
    return np.maximum((consistent > 0.5).sum(axis=1) - 1, 0).astype(int)


def predict_stage(probs: np.ndarray, head_kind: str) -> np.ndarray:
    if head_kind == "ordinal":
        return decode_ordinal(probs)
    if head_kind == "multilabel":
        return decode_multilabel(probs)
    raise ValidationError(f"unknown head kind {head_kind!r}")


# ----------------------------------------------------------------------
# Task heads
# ----------------------------------------------------------------------

class OrdinalHead:
    """Shared score with ordered thresholds; monotone by construction.

    thresholds = cumsum(base, softplus(increments)), so b1 <= b2 <= b3 holds
    for any parameter values.
    """

    kind = "ordinal"
    num_outputs = NUM_STAGES - 1

    def __init__(self, selection_id: str, hidden: int, rng: np.random.Generator | None = None):
        self.selection_id = selection_id
        score = glorot(rng, hidden, 1) if rng is not None else np.zeros((hidden, 1))
        self.score = Tensor(score, requires_grad=True)
        self.base = Tensor(np.zeros((1, 1)), requires_grad=True)
        self.increments = Tensor(np.zeros((1, 2)), requires_grad=True)

    def thresholds(self) -> Tensor:
        steps = ad.concat_cols([self.base, ad.softplus(self.increments)])
        return ad.matmul(steps, Tensor(_CUMSUM))

    def logits(self, h_rows: Tensor) -> Tensor:
        return ad.sub(ad.matmul(h_rows, self.score), self.thresholds())

    def probabilities(self, h_rows: np.ndarray) -> np.ndarray:
        scores = h_rows @ self.score.data
        steps = np.concatenate(
            [self.base.data, np.logaddexp(0.0, self.increments.data)], axis=1
        )
        thresholds = steps @ _CUMSUM
        return _np_sigmoid(scores - thresholds)

    def targets(self, stage: int) -> np.ndarray:
        return ordinal_targets(stage)

    def parameters(self) -> list[tuple[str, Tensor]]:
        sid = self.selection_id
        return [
            (f"head.{sid}.score", self.score),
            (f"head.{sid}.base", self.base),
            (f"head.{sid}.increments", self.increments),
        ]


class MultilabelHead:
    """Independent logits, one per reachable stage."""

    kind = "multilabel"
    num_outputs = NUM_STAGES

    def __init__(self, selection_id: str, hidden: int, rng: np.random.Generator | None = None):
        self.selection_id = selection_id
        weight = glorot(rng, hidden, NUM_STAGES) if rng is not None else np.zeros((hidden, NUM_STAGES))
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(np.zeros((1, NUM_STAGES)), requires_grad=True)

    def logits(self, h_rows: Tensor) -> Tensor:
        return ad.add(ad.matmul(h_rows, self.weight), self.bias)

    def probabilities(self, h_rows: np.ndarray) -> np.ndarray:
        return _np_sigmoid(h_rows @ self.weight.data + self.bias.data)

    def targets(self, stage: int) -> np.ndarray:
        return multilabel_targets(stage)

    def parameters(self) -> list[tuple[str, Tensor]]:
        sid = self.selection_id
        return [(f"head.{sid}.weight", self.weight), (f"head.{sid}.bias", self.bias)]


def make_head(kind: str, selection_id: str, hidden: int, rng=None):
    if kind == "ordinal":
        return OrdinalHead(selection_id, hidden, rng)
    if kind == "multilabel":
        return MultilabelHead(selection_id, hidden, rng)
    raise ValidationError(f"unknown head kind {kind!r}")


def task_loss(
    head, h_rows: Tensor, targets: np.ndarray, weights: np.ndarray | None = None
) -> Tensor:
    """Summed stable BCE over the head's outputs for the given rows."""
    logits = head.logits(h_rows)
    w = weights.reshape(-1, 1) if weights is not None else None
    return ad.tsum(ad.bce_with_logits(logits, targets, w))


def stage_scores(head, h_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(decoded stages, probability of reaching stage >= 2) for a batch of rows."""
    probs = head.probabilities(h_rows)
    if head.kind == "ordinal":
        return decode_ordinal(probs), probs[:, 1]
    consistent = consistent_multilabel(probs)
    return decode_multilabel(probs), consistent[:, 2]


def _np_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ----------------------------------------------------------------------
# Optimizer
# ----------------------------------------------------------------------

class Adam:
    def __init__(self, params: Sequence[Tensor], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p.data -= self.cfg.lr * m_hat / (np.sqrt(v_hat) + self.cfg.eps)


# ----------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------

@dataclass
class TrainedModel:
    spec: ModelSpec
    head_kind: str
    trunk: HeteroGNN
    heads: dict[str, object]

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = self.trunk.parameters()
        for sid in sorted(self.heads):
            out.extend(self.heads[sid].parameters())
        return out

    def node_embeddings(self, graph: HeteroGraph) -> np.ndarray:
        adjacencies = build_relation_adjacencies(graph, self.spec.conv)
        h = self.trunk.forward(Tensor(graph.features), adjacencies)
        return h.data

    def predict_records(
        self, graph: HeteroGraph, outcomes: Sequence[SelectionOutcome]
    ) -> list[EvalRecord]:
        """Decoded stage and stage>=2 score for each (candidate, selection) pair."""
        index = graph.node_index()
        embeddings = self.node_embeddings(graph)
        by_selection: dict[str, list[SelectionOutcome]] = {}
        for outcome in outcomes:
            by_selection.setdefault(outcome.selection_id, []).append(outcome)
        records: list[EvalRecord] = []
        for sid in sorted(by_selection):
            if sid not in self.heads:
                raise ValidationError(f"no trained head for selection {sid!r}")
            group = sorted(by_selection[sid], key=lambda o: o.candidate_id)
            rows = np.array([index[o.candidate_id] for o in group], dtype=np.intp)
            stages, scores = stage_scores(self.heads[sid], embeddings[rows])
            for outcome, stage, score in zip(group, stages, scores):
                records.append(
                    EvalRecord(
                        candidate_id=outcome.candidate_id,
                        selection_id=outcome.selection_id,
                        true_stage=outcome.stage,
                        predicted_stage=int(stage),
                        score_high=float(score),
                    )
                )
        return records


def _class_weights(
    members: Sequence[SelectionOutcome],
) -> dict[int, float]:
    counts: dict[int, int] = {}
    for outcome in members:
        counts[outcome.stage] = counts.get(outcome.stage, 0) + 1
    total = len(members)
    present = len(counts)
    return {stage: total / (present * count) for stage, count in counts.items()}


def train(
    graph: HeteroGraph,
    outcomes: Sequence[SelectionOutcome],
    split: SplitAssignment,
    spec: ModelSpec,
    cfg: TrainConfig,
    head_kind: str = "multilabel",
) -> tuple[TrainedModel, list[float]]:
    """Full-graph training; loss is the mean task loss over train pairs only.

    Deterministic for a fixed seed. Returns the model and the per-epoch loss
    trace; training aborts with the epoch index if the loss goes non-finite.
    """
    if head_kind not in HEAD_KINDS:
        raise ValidationError(f"head_kind must be one of {HEAD_KINDS}")
    if graph.features is None:
        raise ValidationError("graph has no node features; build the graph from profiles first")
    index = graph.node_index()
    missing = sorted({o.candidate_id for o in outcomes} - set(index))
    if missing:
        raise ValidationError(f"outcome candidates missing from graph: {missing[:5]}")

    adjacencies = build_relation_adjacencies(graph, spec.conv)
    rng = np.random.default_rng(cfg.seed)
    trunk = HeteroGNN(spec, graph.features.shape[1], tuple(sorted(graph.edges)), rng)

    selections = sorted({o.selection_id for o in outcomes})
    heads = {sid: make_head(head_kind, sid, spec.hidden, rng) for sid in selections}

    # Per selection: train-pair rows, stacked targets, optional class weights.
    train_data: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray | None]] = {}
    n_train = 0
    for sid in selections:
        members = sorted(
            (o for o in outcomes if o.selection_id == sid and split.fold_of(o) == "train"),
            key=lambda o: o.candidate_id,
        )
        if not members:
            continue
        rows = np.array([index[o.candidate_id] for o in members], dtype=np.intp)
        targets = np.stack([heads[sid].targets(o.stage) for o in members])
        weights = None
        if cfg.class_weighting:
            table = _class_weights(members)
            weights = np.array([table[o.stage] for o in members])
        train_data[sid] = (rows, targets, weights)
        n_train += len(members)
    if n_train == 0:
        raise ValidationError("no training pairs in the split")

    model = TrainedModel(spec, head_kind, trunk, heads)
    optimizer = Adam([p for _, p in model.parameters()], cfg)
    features = Tensor(graph.features)
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        hidden = trunk.forward(features, adjacencies)
        total: Tensor | None = None
        for sid in selections:
            if sid not in train_data:
                continue
            rows, targets, weights = train_data[sid]
            h_rows = ad.gather_rows(hidden, rows)
            loss = task_loss(heads[sid], h_rows, targets, weights)
            total = loss if total is None else ad.add(total, loss)
        assert total is not None
        loss = ad.scale(total, 1.0 / n_train)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(epoch, value)
        trace.append(value)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return model, trace


# ----------------------------------------------------------------------
# Random hyperparameter search
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class SearchTrial:
    index: int
    spec: ModelSpec
    lr: float
    objective: float


@dataclass(frozen=True)
class SearchResult:
    spec: ModelSpec
    cfg: TrainConfig
    objective: float
    trials: tuple[SearchTrial, ...]


def sample_spec(rng: np.random.Generator, conv: str) -> tuple[ModelSpec, float]:
    """One draw from the hyperparameter grid (hidden, depth, lr, activation)."""
    hidden = int(rng.integers(16, 65))
    depth = int(rng.integers(1, 6))
    lr = float(10.0 ** rng.uniform(-4.0, -1.0))
    activation = ACTIVATION_CHOICES[int(rng.integers(0, len(ACTIVATION_CHOICES)))]
    return ModelSpec(conv, hidden, depth, activation), lr


def random_search(
    graph: HeteroGraph,
    outcomes: Sequence[SelectionOutcome],
    split: SplitAssignment,
    base_spec: ModelSpec,
    base_cfg: TrainConfig,
    trials: int,
    seed: int,
    head_kind: str = "multilabel",
) -> SearchResult:
    """Uniform random search over the grid, scored by validation balanced accuracy.

    A 10% validation slice is carved from the train pairs (the test fold is
    never touched); ties keep the earliest trial.
    """
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    train_outcomes = [o for o in outcomes if split.fold_of(o) == "train"]
    if not train_outcomes:
        raise ValidationError("no train pairs available for search")
    carve = stratified_split(train_outcomes, ratio=0.9, seed=seed)
    val_outcomes = [o for o in train_outcomes if carve.fold_of(o) == "test"]
    if not val_outcomes:
        raise ValidationError("validation slice is empty; too few train pairs")

    rng = np.random.default_rng(seed)
    best: SearchTrial | None = None
    collected: list[SearchTrial] = []
    for trial_index in range(trials):
        spec, lr = sample_spec(rng, base_spec.conv)
        cfg = replace(base_cfg, lr=lr)
        model, _ = train(graph, train_outcomes, carve, spec, cfg, head_kind)
        records = model.predict_records(graph, val_outcomes)
        objective = balanced_accuracy(records)
        trial = SearchTrial(trial_index, spec, lr, objective)
        collected.append(trial)
        if best is None or trial.objective > best.objective:
            best = trial
    assert best is not None
    return SearchResult(
        spec=best.spec,
        cfg=replace(base_cfg, lr=best.lr),
        objective=best.objective,
        trials=tuple(collected),
    )


# ----------------------------------------------------------------------
# Checkpoint IO
# ----------------------------------------------------------------------

def save_model(model: TrainedModel, path: str | Path) -> None:
    header = {
        "spec": model.spec.to_json(),
        "head_kind": model.head_kind,
        "relations": [int(cat) for cat in model.trunk.relations],
        "widths": model.trunk.widths,
        "heads": sorted(model.heads),
    }
    tensors = [(name, tensor.data) for name, tensor in model.parameters()]
    save_named_tensors(path, header, tensors)


def load_model(path: str | Path) -> TrainedModel:
    from .profiles import EntityCategory

    header, tensors = load_named_tensors(path)
    spec = ModelSpec.from_json(header["spec"])
    head_kind = header["head_kind"]
    relations = tuple(EntityCategory(code) for code in header["relations"])
    widths = [int(w) for w in header["widths"]]
    trunk = HeteroGNN(spec, widths[0], relations, np.random.default_rng(0))
    heads = {sid: make_head(head_kind, sid, spec.hidden) for sid in header["heads"]}
    model = TrainedModel(spec, head_kind, trunk, heads)
    for name, tensor in model.parameters():
        if name not in tensors:
            raise ValidationError(f"checkpoint missing tensor {name!r}")
        if tensors[name].shape != tensor.data.shape:
            raise ValidationError(
                f"checkpoint tensor {name!r} has shape {tensors[name].shape}, "
                f"expected {tensor.data.shape}"
            )
        tensor.data = tensors[name]
    return model
