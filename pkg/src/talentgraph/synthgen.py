"""Deterministic synthetic datasets with a tunable planted signal.

Each candidate gets a latent aptitude in [0, 1]. The signal strength s
controls how strongly observable data tracks aptitude:

* keyword vectors sit near an aptitude-graded anchor on a per-(selection,
  category) great circle, with alignment s (pure noise at s = 0), so
  nearest-neighbor overlap links candidates of similar aptitude;
* traits get a shift proportional to s * (aptitude - 1/2) along a hidden
  direction;
* stages are assigned per selection by ranking s * aptitude + (1-s) * noise
  against per-selection counts derived from the configured marginals.

Per-selection marginals are jittered around the configured means (some
selections lean harder on the upper stages, mirroring the wide min/max
spread of real selections) while the pooled distribution stays close to the
configured means.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingSet, write_store
from .errors import ValidationError
from .profiles import (
    TRAIT_COUNT,
    CandidateProfile,
    EntityCategory,
    SelectionOutcome,
    save_outcomes,
    save_profiles,
)

TRAIT_NOISE_STD = 10.0
TRAIT_SHIFT = 100.0
ANGLE_JITTER = 0.08
MISSING_TRAIT_RATE = 0.02
MAX_KEYWORDS = 8

# Per-stage multipliers cycled over selections (jitter around the means).
# Means stay close to 1 so the pooled distribution tracks the configured
# marginals; the spread mirrors how unevenly real selections hire.
STAGE_INTENSITY = {
    1: (0.45, 0.75, 1.0, 1.3, 1.5),
    2: (0.5, 0.85, 1.2, 1.6, 2.1),
    3: (0.5, 0.9, 1.3, 1.7, 2.1),
}


@dataclass(frozen=True)
class SynthConfig:
    num_candidates: int = 500
    num_selections: int = 5
    dim: int = 768
    mean_keywords: float = 3.0
    stage_marginals: tuple[float, float, float, float] = (94.77, 3.95, 1.47, 0.95)
    signal: float = 0.8
    seed: int = 7
    second_application_rate: float = 0.2

    def __post_init__(self):
        if self.num_candidates < 1 or self.num_selections < 1:
            raise ValidationError("num_candidates and num_selections must be >= 1")
        if self.dim < 2:
            raise ValidationError("dim must be >= 2")
        # The default means are reported values that sum to 101.14, so the
        # tolerance admits them; shares are renormalized to 100 internally.
        if abs(sum(self.stage_marginals) - 100.0) > 2.0:
            raise ValidationError(
                f"stage marginals must sum to ~100, got {sum(self.stage_marginals)}"
            )
        if not (0.0 <= self.signal <= 1.0):
            raise ValidationError("signal strength must lie in [0, 1]")
        if not (0.0 <= self.second_application_rate <= 1.0):
            raise ValidationError("second_application_rate must lie in [0, 1]")

    def to_json(self) -> dict:
        return {
            "num_candidates": self.num_candidates,
            "num_selections": self.num_selections,
            "dim": self.dim,
            "mean_keywords": self.mean_keywords,
            "stage_marginals": list(self.stage_marginals),
            "signal": self.signal,
            "seed": self.seed,
            "second_application_rate": self.second_application_rate,
        }

    @classmethod
    def from_json(cls, obj) -> "SynthConfig":
        return cls(
            num_candidates=int(obj.get("num_candidates", 500)),
            num_selections=int(obj.get("num_selections", 5)),
            dim=int(obj.get("dim", 768)),
            mean_keywords=float(obj.get("mean_keywords", 3.0)),
            stage_marginals=tuple(obj.get("stage_marginals", (94.77, 3.95, 1.47, 0.95))),
            signal=float(obj.get("signal", 0.8)),
            seed=int(obj.get("seed", 7)),
            second_application_rate=float(obj.get("second_application_rate", 0.2)),
        )


@dataclass
class SynthDataset:
    profiles: list[CandidateProfile]
    outcomes: list[SelectionOutcome]
    embedding_sets: list[EmbeddingSet]
    manifest: dict


def _child_rng(seed: int, label: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"{seed}\x1f{label}".encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def _orthonormal_pair(rng: np.random.Generator, dim: int) -> tuple[np.ndarray, np.ndarray]:
    p0 = _unit(rng, dim)
    raw = rng.standard_normal(dim)
    raw -= (raw @ p0) * p0
    return p0, raw / np.linalg.norm(raw)


def largest_remainder_counts(shares: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` whose proportions best match ``shares``."""
    raw = shares / shares.sum() * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    remainders = raw - counts
    # Ties broken toward lower stage index for determinism.
    order = sorted(range(len(shares)), key=lambda i: (-remainders[i], i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def _selection_shares(cfg: SynthConfig, selection_index: int) -> np.ndarray:
    shares = np.array(cfg.stage_marginals, dtype=np.float64)
    shares = shares / shares.sum() * 100.0
    for stage, pattern in STAGE_INTENSITY.items():
        shares[stage] *= pattern[selection_index % len(pattern)]
    shares[0] = 100.0 - shares[1:].sum()
    if shares[0] <= 0:
        raise ValidationError("jittered marginals leave no mass for stage 0")
    return shares


def generate(cfg: SynthConfig) -> SynthDataset:
    """Build a full synthetic dataset in memory; pure function of the config."""
    candidate_ids = [f"c{idx:04d}" for idx in range(cfg.num_candidates)]
    selection_ids = [f"sel{idx}" for idx in range(cfg.num_selections)]
    s = cfg.signal

    assign_rng = _child_rng(cfg.seed, "assignment")
    primary = {
        cid: selection_ids[idx % cfg.num_selections]
        for idx, cid in enumerate(assign_rng.permutation(candidate_ids).tolist())
    }
    pairs: list[tuple[str, str]] = [(cid, primary[cid]) for cid in candidate_ids]
    n_second = int(round(cfg.second_application_rate * cfg.num_candidates))
    if cfg.num_selections > 1 and n_second:
        extras = sorted(assign_rng.choice(candidate_ids, size=n_second, replace=False).tolist())
        for cid in extras:
            offset = int(assign_rng.integers(1, cfg.num_selections))
            other_idx = (selection_ids.index(primary[cid]) + offset) % cfg.num_selections
            pairs.append((cid, selection_ids[other_idx]))

    aptitude_rng = _child_rng(cfg.seed, "aptitude")
    aptitude = {cid: float(aptitude_rng.random()) for cid in candidate_ids}

    # Keyword vectors on aptitude-graded anchors of per-(selection, category) planes.
    proto_rng = _child_rng(cfg.seed, "prototypes")
    planes = {
        (sid, cat): _orthonormal_pair(proto_rng, cfg.dim)
        for sid in selection_ids
        for cat in EntityCategory
    }
    kw_rng = _child_rng(cfg.seed, "keywords")
    vec_rng = _child_rng(cfg.seed, "vectors")
    entities: dict[str, dict[EntityCategory, frozenset[str]]] = {}
    embedding_sets: list[EmbeddingSet] = []
    for cid in candidate_ids:
        sid = primary[cid]
        per_cat: dict[EntityCategory, frozenset[str]] = {}
        for cat in EntityCategory:
            count = min(int(kw_rng.poisson(cfg.mean_keywords)), MAX_KEYWORDS)
            slug = cat.json_key.replace("_", "-")
            keywords = tuple(f"{cid}-{slug}-{k}" for k in range(count))
            per_cat[cat] = frozenset(keywords)
            p0, p1 = planes[(sid, cat)]
            rows = np.empty((count, cfg.dim), dtype=np.float64)
            for k in range(count):
                jitter = float(vec_rng.normal(0.0, ANGLE_JITTER))
                angle = np.pi / 2.0 * float(np.clip(aptitude[cid] + jitter, 0.0, 1.0))
                anchor = np.cos(angle) * p0 + np.sin(angle) * p1
                noise = vec_rng.standard_normal(cfg.dim)
                noise -= (noise @ anchor) * anchor
                noise /= np.linalg.norm(noise)
                rows[k] = s * anchor + np.sqrt(max(1.0 - s * s, 0.0)) * noise
            embedding_sets.append(
                EmbeddingSet(cid, cat, rows.astype(np.float32), keywords)
            )
        entities[cid] = per_cat

    # Traits: noise plus an aptitude shift along a hidden global direction.
    trait_rng = _child_rng(cfg.seed, "traits")
    direction = _unit(trait_rng, TRAIT_COUNT)
    profiles: list[CandidateProfile] = []
    for cid in candidate_ids:
        base = trait_rng.normal(0.0, TRAIT_NOISE_STD, TRAIT_COUNT)
        values = base + s * (aptitude[cid] - 0.5) * TRAIT_SHIFT * direction
        values = np.clip(values, -100.0, 100.0)
        traits: list[float | None] = []
        for value in values:
            if trait_rng.random() < MISSING_TRAIT_RATE:
                traits.append(None)
            else:
                traits.append(round(float(value), 3))
        profiles.append(CandidateProfile(cid, tuple(traits), entities[cid]))

    # Stages: per selection, rank by a noisy aptitude score against the counts.
    stage_rng = _child_rng(cfg.seed, "stages")
    outcomes: list[SelectionOutcome] = []
    selection_meta = []
    for sel_index, sid in enumerate(selection_ids):
        members = sorted(cid for cid, other in pairs if other == sid)
        if not members:
            continue
        shares = _selection_shares(cfg, sel_index)
        counts = largest_remainder_counts(shares, len(members))
        noise = stage_rng.random(len(members))
        scores = np.array([s * aptitude[cid] for cid in members]) + (1.0 - s) * noise
        order = np.argsort(-scores, kind="stable")
        stage_of: dict[str, int] = {}
        cursor = 0
        for stage in (3, 2, 1, 0):
            for slot in range(counts[stage]):
                stage_of[members[order[cursor]]] = stage
                cursor += 1
        for cid in members:
            outcomes.append(SelectionOutcome(cid, sid, stage_of[cid]))
        selection_meta.append(
            {"selection_id": sid, "shares": shares.tolist(), "counts": counts.tolist()}
        )
    outcomes.sort(key=lambda o: (o.candidate_id, o.selection_id))

    for stage in range(1, 4):
        if all(meta["counts"][stage] == 0 for meta in selection_meta):
            warnings.warn(
                f"stage {stage} rounded to zero members in every selection", stacklevel=2
            )

    manifest = {
        "seed": cfg.seed,
        "config": cfg.to_json(),
        "selections": selection_meta,
        "aptitude": {cid: round(aptitude[cid], 6) for cid in candidate_ids},
        "trait_direction": [round(float(v), 6) for v in direction],
        "prototypes": {
            sid: {
                cat.json_key: {
                    "p0": [round(float(v), 5) for v in planes[(sid, cat)][0]],
                    "p1": [round(float(v), 5) for v in planes[(sid, cat)][1]],
                }
                for cat in EntityCategory
            }
            for sid in selection_ids
        },
    }
    return SynthDataset(profiles, outcomes, embedding_sets, manifest)


def generate_files(cfg: SynthConfig, out_dir: str | Path) -> dict[str, Path]:
    """Generate and persist a dataset; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = generate(cfg)
    paths = {
        "profiles": out_dir / "profiles.jsonl",
        "outcomes": out_dir / "outcomes.jsonl",
        "embeddings": out_dir / "embeddings.emb1",
        "manifest": out_dir / "manifest.json",
    }
    save_profiles(dataset.profiles, paths["profiles"])
    save_outcomes(dataset.outcomes, paths["outcomes"])
    write_store(dataset.embedding_sets, paths["embeddings"])
    paths["manifest"].write_text(
        json.dumps(dataset.manifest, sort_keys=True) + "\n", encoding="utf-8"
    )
    return paths
