"""Pipeline CLI: synth, extract, embed, build-graph, train, evaluate, predict, pipeline.

Every stage reads its declared inputs from the run directory, writes its
declared outputs there, and appends an entry (parameters, input/output
hashes, duration) to run_manifest.json. A lock file guards the directory
against concurrent runs. Exit codes: 0 ok, 1 bad input data, 2 runtime
failure, 64 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import evaluation, learning, report, synthgen
from .embeddings import ProviderConfig, embed_profile, make_provider, read_store, write_store
from .errors import TalentGraphError, ValidationError
from .gnn import ModelSpec
from .graph import GraphBuildConfig, build_graph, load_graph, save_graph
from .knn import neighbor_tables
from .learning import TrainConfig
from .profiles import (
    CandidateProfile,
    default_extraction_client,
    extract_entities,
    load_outcomes,
    load_profiles,
    normalize_traits,
    save_profiles,
    save_trait_stats,
    trait_matrix,
)
from .synthgen import SynthConfig

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_USAGE = 64

SUBCOMMANDS = (
    "synth",
    "extract",
    "embed",
    "build-graph",
    "train",
    "evaluate",
    "predict",
    "pipeline",
)

DEFAULT_FILES = {
    "cvs": "cvs.jsonl",
    "profiles": "profiles.jsonl",
    "outcomes": "outcomes.jsonl",
    "embeddings": "embeddings.emb1",
    "trait_stats": "trait_stats.json",
    "graph": "graph.jsonl",
    "split": "split.json",
    "model": "model.gnn1",
    "train_report": "train_report.json",
    "metrics": "metrics.json",
    "metrics_tsv": "metrics.tsv",
    "metrics_txt": "metrics.txt",
    "records": "eval_records.jsonl",
    "predictions": "predictions.jsonl",
    "figures": "figures",
    "manifest": "run_manifest.json",
}


@dataclass
class PipelineConfig:
    """Effective configuration of a run; file values overlaid by CLI flags."""

    out: Path = Path(".")
    source: str = "synth"  # pipeline input stage: synth | extract
    files: dict = field(default_factory=lambda: dict(DEFAULT_FILES))
    graph: GraphBuildConfig = field(default_factory=GraphBuildConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    head: str = "multilabel"
    train: TrainConfig = field(default_factory=TrainConfig)
    trials: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    provider: ProviderConfig = field(default_factory=lambda: ProviderConfig(seed=7))

    def path(self, key: str) -> Path:
        return self.out / self.files[key]

    def to_json(self) -> dict:
        return {
            "out": str(self.out),
            "source": self.source,
            "files": dict(self.files),
            "graph": {
                "k": self.graph.k,
                "lambda": self.graph.lam,
                "theta": self.graph.theta,
                "overlap_mode": self.graph.overlap_mode,
            },
            "model": self.model.to_json(),
            "head": self.head,
            "train": {
                "epochs": self.train.epochs,
                "lr": self.train.lr,
                "seed": self.train.seed,
                "class_weighting": self.train.class_weighting,
            },
            "search": {"trials": self.trials},
            "synth": self.synth.to_json(),
            "embedding": {
                "provider": self.provider.kind,
                "dim": self.provider.dim,
                "seed": self.provider.seed,
            },
        }


def load_config(path: str | Path | None, args: argparse.Namespace) -> PipelineConfig:
    """Merge the JSON config file (if any) with flag overrides (flags win)."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        raw = json.loads(path.read_text(encoding="utf-8"))

    graph_raw = raw.get("graph", {})
    model_raw = raw.get("model", {})
    train_raw = raw.get("train", {})
    emb_raw = raw.get("embedding", {})
    cfg = PipelineConfig(
        out=Path(raw.get("out", ".")),
        source=raw.get("source", "synth"),
        files={**DEFAULT_FILES, **raw.get("files", {})},
        graph=GraphBuildConfig(
            k=int(graph_raw.get("k", 10)),
            lam=float(graph_raw.get("lambda", 2.0)),
            theta=float(graph_raw.get("theta", 0.2)),
            overlap_mode=graph_raw.get("overlap_mode", "shared_neighbor"),
        ),
        model=ModelSpec(
            conv=model_raw.get("conv", "gcn"),
            hidden=int(model_raw.get("hidden", 32)),
            depth=int(model_raw.get("depth", 2)),
            activation=model_raw.get("activation", "leaky_relu"),
        ),
        head=raw.get("model", {}).get("head", "multilabel"),
        train=TrainConfig(
            epochs=int(train_raw.get("epochs", 300)),
            lr=float(train_raw.get("lr", 0.03)),
            seed=int(train_raw.get("seed", 7)),
            class_weighting=bool(train_raw.get("class_weighting", True)),
        ),
        trials=int(raw.get("search", {}).get("trials", 0)),
        synth=SynthConfig.from_json(raw.get("synth", {})),
        provider=ProviderConfig(
            kind=emb_raw.get("provider", "stub"),
            dim=int(emb_raw.get("dim", 768)),
            seed=int(emb_raw.get("seed", 7)),
        ),
    )

    if getattr(args, "out", None) is not None:
        cfg.out = Path(args.out)
    if getattr(args, "seed", None) is not None:
        seed = int(args.seed)
        cfg.train = replace(cfg.train, seed=seed)
        cfg.synth = replace(cfg.synth, seed=seed)
        cfg.provider = ProviderConfig(cfg.provider.kind, cfg.provider.dim, seed)
    if getattr(args, "k", None) is not None:
        cfg.graph = replace(cfg.graph, k=int(args.k))
    if getattr(args, "lam", None) is not None:
        cfg.graph = replace(cfg.graph, lam=float(args.lam))
    if getattr(args, "theta", None) is not None:
        cfg.graph = replace(cfg.graph, theta=float(args.theta))
    if getattr(args, "conv", None) is not None:
        cfg.model = replace(cfg.model, conv=args.conv)
    if getattr(args, "hidden", None) is not None:
        cfg.model = replace(cfg.model, hidden=int(args.hidden))
    if getattr(args, "depth", None) is not None:
        cfg.model = replace(cfg.model, depth=int(args.depth))
    if getattr(args, "activation", None) is not None:
        cfg.model = replace(cfg.model, activation=args.activation)
    if getattr(args, "head", None) is not None:
        cfg.head = args.head
    if getattr(args, "epochs", None) is not None:
        cfg.train = replace(cfg.train, epochs=int(args.epochs))
    if getattr(args, "lr", None) is not None:
        cfg.train = replace(cfg.train, lr=float(args.lr))
    if getattr(args, "trials", None) is not None:
        cfg.trials = int(args.trials)
    if getattr(args, "signal", None) is not None:
        cfg.synth = replace(cfg.synth, signal=float(args.signal))
    if getattr(args, "candidates", None) is not None:
        cfg.synth = replace(cfg.synth, num_candidates=int(args.candidates))
    if getattr(args, "selections", None) is not None:
        cfg.synth = replace(cfg.synth, num_selections=int(args.selections))
    if getattr(args, "dim", None) is not None:
        cfg.synth = replace(cfg.synth, dim=int(args.dim))
        cfg.provider = ProviderConfig(cfg.provider.kind, int(args.dim), cfg.provider.seed)
    if getattr(args, "source", None) is not None:
        cfg.source = args.source
    if cfg.source not in ("synth", "extract"):
        raise ValidationError(f"source must be 'synth' or 'extract', got {cfg.source!r}")
    return cfg


# ----------------------------------------------------------------------
# Manifest and lock helpers
# ----------------------------------------------------------------------

def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_paths(paths: list[Path]) -> dict[str, str]:
    out = {}
    for path in paths:
        if path.is_dir():
            for child in sorted(path.rglob("*")):
                if child.is_file():
                    out[str(child)] = _sha256(child)
        elif path.exists():
            out[str(path)] = _sha256(path)
    return out


def append_manifest(cfg: PipelineConfig, stage: str, inputs, outputs, duration: float) -> None:
    manifest_path = cfg.path("manifest")
    entries = []
    if manifest_path.exists():
        entries = json.loads(manifest_path.read_text(encoding="utf-8"))
    entries.append(
        {
            "stage": stage,
            "parameters": cfg.to_json(),
            "inputs": _hash_paths(inputs),
            "outputs": _hash_paths(outputs),
            "duration_s": round(duration, 3),
        }
    )
    manifest_path.write_text(json.dumps(entries, indent=2) + "\n", encoding="utf-8")


class RunLock:
    """Exclusive lock file in the run directory; refuses concurrent writers."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / "run.lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise TalentGraphError(
                f"run directory is locked by another process ({self.path}); "
                "remove the lock file if that run is dead"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ValidationError(f"missing {what}: {path}")
    return path


# ----------------------------------------------------------------------
# Stages
# ----------------------------------------------------------------------

def stage_synth(cfg: PipelineConfig) -> list[Path]:
    paths = synthgen.generate_files(cfg.synth, cfg.out)
    return list(paths.values()) + [Path(str(paths["embeddings"]) + ".keywords.jsonl")]


def stage_extract(cfg: PipelineConfig) -> list[Path]:
    """cvs.jsonl ({candidate_id, traits, cv_text}) -> profiles.jsonl via the stub client."""
    cvs_path = _require(cfg.path("cvs"), "CV input file")
    client = default_extraction_client()
    profiles: list[CandidateProfile] = []
    with cvs_path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            obj = json.loads(raw)
            entities = extract_entities(obj.get("cv_text", ""), client)
            traits = tuple(obj.get("traits", [None] * 18))
            profiles.append(CandidateProfile(str(obj["candidate_id"]), traits, entities))
    profiles.sort(key=lambda p: p.candidate_id)
    out = cfg.path("profiles")
    save_profiles(profiles, out)
    print(f"extracted entities for {len(profiles)} candidates -> {out}")
    return [out]


def stage_embed(cfg: PipelineConfig) -> list[Path]:
    profiles = load_profiles(_require(cfg.path("profiles"), "profiles file"))
    provider = make_provider(cfg.provider)
    sets = []
    for profile in profiles:
        sets.extend(embed_profile(profile, provider))
    out = cfg.path("embeddings")
    write_store(sets, out)
    print(f"embedded {sum(len(s) for s in sets)} keywords -> {out}")
    return [out, Path(str(out) + ".keywords.jsonl")]


def stage_build_graph(cfg: PipelineConfig) -> list[Path]:
    profiles = load_profiles(_require(cfg.path("profiles"), "profiles file"))
    sets = read_store(_require(cfg.path("embeddings"), "embedding store"))
    normalized, stats = normalize_traits(profiles)
    save_trait_stats(stats, cfg.path("trait_stats"))
    tables = neighbor_tables(sets, cfg.graph.k)
    nodes = [p.candidate_id for p in normalized]
    graph = build_graph(nodes, tables, cfg.graph, features=trait_matrix(normalized))
    out = cfg.path("graph")
    save_graph(graph, out)
    if graph.num_edges == 0:
        print("warning: graph has no edges (threshold discards everything)", file=sys.stderr)
    print(f"graph: {len(graph.nodes)} nodes, {graph.num_edges} edges -> {out}")
    return [out, Path(str(out) + ".features.json"), cfg.path("trait_stats")]


def stage_train(cfg: PipelineConfig) -> list[Path]:
    graph = load_graph(_require(cfg.path("graph"), "graph file"))
    outcomes = load_outcomes(_require(cfg.path("outcomes"), "outcomes file"))
    split = learning.stratified_split(outcomes, ratio=0.8, seed=cfg.train.seed)
    learning.save_split(split, cfg.path("split"))

    spec, train_cfg = cfg.model, cfg.train
    search_summary = None
    if cfg.trials > 0:
        result = learning.random_search(
            graph, outcomes, split, cfg.model, cfg.train, cfg.trials, cfg.train.seed, cfg.head
        )
        spec, train_cfg = result.spec, result.cfg
        search_summary = {
            "trials": [
                {
                    "index": t.index,
                    "spec": t.spec.to_json(),
                    "lr": t.lr,
                    "objective": t.objective,
                }
                for t in result.trials
            ],
            "best_objective": result.objective,
        }
        print(f"search: best validation balanced accuracy {result.objective:.3f}")

    model, trace = learning.train(graph, outcomes, split, spec, train_cfg, cfg.head)
    learning.save_model(model, cfg.path("model"))

    train_outcomes = [o for o in outcomes if split.fold_of(o) == "train"]
    train_records = model.predict_records(graph, train_outcomes)
    pooled = evaluation.compute_metrics(train_records)
    report_payload = {
        "hyperparameters": {
            "model": spec.to_json(),
            "head": cfg.head,
            "epochs": train_cfg.epochs,
            "lr": train_cfg.lr,
            "seed": train_cfg.seed,
            "class_weighting": train_cfg.class_weighting,
        },
        "search": search_summary,
        "loss_trace": trace,
        "train_metrics": {
            "pooled": pooled.to_json(),
            "per_selection": {
                sid: rep.to_json()
                for sid, rep in evaluation.per_selection_metrics(train_records).items()
            },
        },
    }
    cfg.path("train_report").write_text(
        json.dumps(report_payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"trained {spec.conv}/{cfg.head}: loss {trace[0]:.4f} -> {trace[-1]:.4f}")
    return [cfg.path("split"), cfg.path("model"), cfg.path("train_report")]


def stage_evaluate(cfg: PipelineConfig) -> list[Path]:
    graph = load_graph(_require(cfg.path("graph"), "graph file"))
    outcomes = load_outcomes(_require(cfg.path("outcomes"), "outcomes file"))
    split = learning.load_split(_require(cfg.path("split"), "split file"))
    model = learning.load_model(_require(cfg.path("model"), "model checkpoint"))

    test_outcomes = [o for o in outcomes if split.fold_of(o) == "test"]
    if not test_outcomes:
        raise ValidationError("split contains no test pairs")
    records = model.predict_records(graph, test_outcomes)
    pooled = evaluation.compute_metrics(records)
    per_selection = evaluation.per_selection_metrics(records)

    evaluation.save_metrics(pooled, per_selection, cfg.path("metrics"))
    evaluation.save_records(records, cfg.path("records"))
    model_name = model.spec.conv.upper()
    learning_name = model.head_kind.capitalize()
    report.write_metrics_tsv(pooled, per_selection, cfg.path("metrics_tsv"), model_name, learning_name)
    report.write_metrics_text(pooled, per_selection, cfg.path("metrics_txt"), model_name, learning_name)

    loss_trace = None
    train_report_path = cfg.path("train_report")
    if train_report_path.exists():
        loss_trace = json.loads(train_report_path.read_text(encoding="utf-8")).get("loss_trace")
    figures = report.render_figures(cfg.path("figures"), records, loss_trace)

    auc_text = f"{pooled.auc:.3f}" if pooled.auc is not None else "n/a"
    print(
        f"test pairs {len(records)}: balanced acc {pooled.balanced_accuracy:.3f}, "
        f"MAE {pooled.mae:.3f}, RMSE {pooled.rmse:.3f}, F1 {pooled.weighted_f1:.3f}, AUC {auc_text}"
    )
    return [
        cfg.path("metrics"),
        cfg.path("metrics_tsv"),
        cfg.path("metrics_txt"),
        cfg.path("records"),
        *figures,
    ]


def stage_predict(cfg: PipelineConfig) -> list[Path]:
    graph = load_graph(_require(cfg.path("graph"), "graph file"))
    model = learning.load_model(_require(cfg.path("model"), "model checkpoint"))
    outcomes_path = cfg.path("outcomes")
    if outcomes_path.exists():
        targets = [(o.candidate_id, o.selection_id) for o in load_outcomes(outcomes_path)]
    else:
        targets = [(cid, sid) for cid in graph.nodes for sid in sorted(model.heads)]
    out = cfg.path("predictions")
    index = graph.node_index()
    embeddings = model.node_embeddings(graph)
    with out.open("w", encoding="utf-8") as fh:
        for cid, sid in sorted(targets):
            stages, scores = learning.stage_scores(
                model.heads[sid], embeddings[index[cid] : index[cid] + 1]
            )
            fh.write(
                json.dumps(
                    {
                        "candidate_id": cid,
                        "selection_id": sid,
                        "stage": int(stages[0]),
                        "score_high": float(scores[0]),
                    }
                )
                + "\n"
            )
    print(f"wrote {len(targets)} predictions -> {out}")
    return [out]


STAGE_FUNCS = {
    "synth": stage_synth,
    "extract": stage_extract,
    "embed": stage_embed,
    "build-graph": stage_build_graph,
    "train": stage_train,
    "evaluate": stage_evaluate,
    "predict": stage_predict,
}

STAGE_INPUTS = {
    "synth": [],
    "extract": ["cvs"],
    "embed": ["profiles"],
    "build-graph": ["profiles", "embeddings"],
    "train": ["graph", "outcomes"],
    "evaluate": ["graph", "outcomes", "split", "model", "train_report"],
    "predict": ["graph", "model"],
}


def run_stage(cfg: PipelineConfig, stage: str) -> None:
    inputs = [cfg.path(key) for key in STAGE_INPUTS[stage]]
    started = time.monotonic()
    outputs = STAGE_FUNCS[stage](cfg)
    append_manifest(cfg, stage, inputs, outputs, time.monotonic() - started)


def run_pipeline(cfg: PipelineConfig) -> None:
    if cfg.source == "synth":
        run_stage(cfg, "synth")
        # synth already emits the authoritative embedding store; re-embedding
        # keyword strings through the stub would replace the planted vectors.
        if not cfg.path("embeddings").exists():
            run_stage(cfg, "embed")
    else:
        run_stage(cfg, "extract")
        run_stage(cfg, "embed")
    run_stage(cfg, "build-graph")
    run_stage(cfg, "train")
    run_stage(cfg, "evaluate")


# ----------------------------------------------------------------------
# Argument parsing
# ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 64, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="talentgraph", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--out", type=Path, default=None, help="run directory (default .)")
        p.add_argument("--seed", type=int, default=None, help="global seed override")
        p.add_argument("--k", type=int, default=None, help="nearest-neighbor count")
        p.add_argument("--lambda", dest="lam", type=float, default=None, help="similarity scale")
        p.add_argument("--theta", type=float, default=None, help="similarity discard threshold")
        p.add_argument("--conv", choices=("gcn", "rgcn"), default=None)
        p.add_argument("--head", choices=("ordinal", "multilabel"), default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--hidden", type=int, default=None)
        p.add_argument("--depth", type=int, default=None)
        p.add_argument(
            "--activation", choices=("leaky_relu", "elu", "tanh", "sigmoid"), default=None
        )
        p.add_argument("--trials", type=int, default=None, help="random-search trials")
        p.add_argument("--signal", type=float, default=None, help="synthetic signal strength")
        p.add_argument("--candidates", type=int, default=None, help="synthetic candidate count")
        p.add_argument("--selections", type=int, default=None, help="synthetic selection count")
        p.add_argument("--dim", type=int, default=None, help="embedding dimension")
        if name == "pipeline":
            p.add_argument("--source", choices=("synth", "extract"), default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args)
        cfg.out.mkdir(parents=True, exist_ok=True)
        with RunLock(cfg.out):
            if args.command == "pipeline":
                run_pipeline(cfg)
            else:
                run_stage(cfg, args.command)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TalentGraphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
