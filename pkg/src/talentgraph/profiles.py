"""Candidate profiles, recruitment outcomes, and trait preprocessing.

A profile is an 18-trait assessment vector plus keyword sets for the five
CV-derived entity categories. Outcomes record how far a candidate got in
one selection process (stage 0-3: applied/rejected, screened/interviewed,
offer proposal, hired). Everything here is file-backed JSONL with strict
validation on load.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .errors import ParseError, ProtocolError, RetryExhaustedError, TransportError, ValidationError

TRAIT_COUNT = 18
TRAIT_MIN = -100.0
TRAIT_MAX = 100.0

STAGE_MIN = 0
STAGE_MAX = 3
STAGE_NAMES = ("applied_rejected", "screened_interviewed", "offer_proposal", "hired")


class EntityCategory(IntEnum):
    """The five keyword families extracted from a CV. Codes are stable."""

    SOFT_SKILLS = 0
    HARD_SKILLS = 1
    INDUSTRY_SECTOR = 2
    EDUCATION = 3
    LANGUAGE_SKILLS = 4

    @property
    def json_key(self) -> str:
        return self.name.lower()

    @classmethod
    def from_json_key(cls, key: str) -> "EntityCategory":
        try:
            return cls[key.upper()]
        except KeyError:
            raise ValidationError(f"unknown entity category {key!r}") from None


CATEGORY_KEYS = tuple(cat.json_key for cat in EntityCategory)


@dataclass(frozen=True)
class CandidateProfile:
    """One candidate: 18 traits (None = missing) and per-category keyword sets."""

    candidate_id: str
    traits: tuple[float | None, ...]
    entities: Mapping[EntityCategory, frozenset[str]]

    def __post_init__(self):
        if not self.candidate_id:
            raise ValidationError("candidate_id must be non-empty")
        if len(self.traits) != TRAIT_COUNT:
            raise ValidationError(
                f"candidate {self.candidate_id!r}: expected {TRAIT_COUNT} traits, got {len(self.traits)}"
            )
        for value in self.traits:
            if value is None:
                continue
            if not math.isfinite(value):
                raise ValidationError(f"candidate {self.candidate_id!r}: non-finite trait value")
        missing = [cat for cat in EntityCategory if cat not in self.entities]
        if missing:
            raise ValidationError(
                f"candidate {self.candidate_id!r}: missing entity categories {[c.json_key for c in missing]}"
            )
        for cat, keywords in self.entities.items():
            for kw in keywords:
                if not kw:
                    raise ValidationError(
                        f"candidate {self.candidate_id!r}: empty keyword in {cat.json_key}"
                    )

    def validate_raw_ranges(self):
        """Check raw trait values lie in [-100, 100]; normalized profiles skip this."""
        for pos, value in enumerate(self.traits):
            if value is not None and not (TRAIT_MIN <= value <= TRAIT_MAX):
                raise ValidationError(
                    f"candidate {self.candidate_id!r}: trait {pos} value {value} outside "
                    f"[{TRAIT_MIN:g}, {TRAIT_MAX:g}]"
                )


@dataclass(frozen=True)
class SelectionOutcome:
    """Stage reached by one candidate in one selection process."""

    candidate_id: str
    selection_id: str
    stage: int

    def __post_init__(self):
        if not self.candidate_id or not self.selection_id:
            raise ValidationError("candidate_id and selection_id must be non-empty")
        if not (STAGE_MIN <= self.stage <= STAGE_MAX):
            raise ValidationError(
                f"stage {self.stage} for ({self.candidate_id!r}, {self.selection_id!r}) "
                f"not in [{STAGE_MIN}, {STAGE_MAX}]"
            )


@dataclass(frozen=True)
class TraitStats:
    """Per-trait imputation/normalization constants (median, mean, std)."""

    median: tuple[float, ...]
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self):
        for name in ("median", "mean", "std"):
            if len(getattr(self, name)) != TRAIT_COUNT:
                raise ValidationError(f"TraitStats.{name} must have length {TRAIT_COUNT}")
        if any(s < 0 for s in self.std):
            raise ValidationError("TraitStats.std must be non-negative")

    def to_json(self) -> dict:
        return {"median": list(self.median), "mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_json(cls, obj: Mapping) -> "TraitStats":
        return cls(tuple(obj["median"]), tuple(obj["mean"]), tuple(obj["std"]))


@dataclass(frozen=True)
class DatasetStats:
    """Reference counts and per-selection stage percentages."""

    num_candidates: int
    num_selections: int
    num_pairs: int
    stage_percentages: Mapping[str, tuple[float, float, float, float]]

    def __post_init__(self):
        for sid, pcts in self.stage_percentages.items():
            if abs(sum(pcts) - 100.0) > 0.01:
                raise ValidationError(f"selection {sid!r}: stage percentages sum to {sum(pcts)}")


# ----------------------------------------------------------------------
# JSONL persistence
# ----------------------------------------------------------------------

def _parse_profile(obj: dict, line: int) -> CandidateProfile:
    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object", line)
    try:
        candidate_id = obj["candidate_id"]
        raw_traits = obj["traits"]
        raw_entities = obj["entities"]
    except KeyError as exc:
        raise ParseError(f"missing field {exc.args[0]!r}", line) from None
    if not isinstance(candidate_id, str):
        raise ParseError("candidate_id must be a string", line)
    if not isinstance(raw_traits, list):
        raise ParseError("traits must be a list", line)
    traits: list[float | None] = []
    for value in raw_traits:
        if value is None:
            traits.append(None)
        elif isinstance(value, (int, float)) and not isinstance(value, bool):
            traits.append(float(value))
        else:
            raise ParseError(f"trait value {value!r} is not a number or null", line)
    if not isinstance(raw_entities, dict):
        raise ParseError("entities must be an object", line)
    unknown = set(raw_entities) - set(CATEGORY_KEYS)
    if unknown:
        raise ParseError(f"unknown entity categories {sorted(unknown)}", line)
    entities: dict[EntityCategory, frozenset[str]] = {}
    for cat in EntityCategory:
        keywords = raw_entities.get(cat.json_key, [])
        if not isinstance(keywords, list) or any(not isinstance(k, str) for k in keywords):
            raise ParseError(f"{cat.json_key} must be a list of strings", line)
        if len(set(keywords)) != len(keywords):
            raise ParseError(f"duplicate keywords in {cat.json_key}", line)
        entities[cat] = frozenset(keywords)
    try:
        profile = CandidateProfile(candidate_id, tuple(traits), entities)
        profile.validate_raw_ranges()
    except ValidationError as exc:
        raise ParseError(str(exc), line) from None
    return profile


def load_profiles(path: str | Path) -> list[CandidateProfile]:
    """Load profiles.jsonl; validates every line and returns profiles sorted by id."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"profiles file not found: {path}")
    profiles: dict[str, CandidateProfile] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", lineno) from None
            profile = _parse_profile(obj, lineno)
            if profile.candidate_id in profiles:
                raise ParseError(f"duplicate candidate_id {profile.candidate_id!r}", lineno)
            profiles[profile.candidate_id] = profile
    return [profiles[cid] for cid in sorted(profiles)]


def save_profiles(profiles: Iterable[CandidateProfile], path: str | Path) -> None:
    """Write profiles.jsonl (keywords sorted for stable bytes)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for profile in profiles:
            obj = {
                "candidate_id": profile.candidate_id,
                "traits": list(profile.traits),
                "entities": {
                    cat.json_key: sorted(profile.entities[cat]) for cat in EntityCategory
                },
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_outcomes(path: str | Path) -> list[SelectionOutcome]:
    """Load outcomes.jsonl; (candidate, selection) pairs must be unique."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"outcomes file not found: {path}")
    outcomes: list[SelectionOutcome] = []
    seen: set[tuple[str, str]] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", lineno) from None
            try:
                outcome = SelectionOutcome(
                    str(obj["candidate_id"]), str(obj["selection_id"]), int(obj["stage"])
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad outcome record: {exc}", lineno) from None
            except ValidationError as exc:
                raise ParseError(str(exc), lineno) from None
            key = (outcome.candidate_id, outcome.selection_id)
            if key in seen:
                raise ParseError(f"duplicate (candidate, selection) pair {key!r}", lineno)
            seen.add(key)
            outcomes.append(outcome)
    outcomes.sort(key=lambda o: (o.candidate_id, o.selection_id))
    return outcomes


def save_outcomes(outcomes: Iterable[SelectionOutcome], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for outcome in outcomes:
            obj = {
                "candidate_id": outcome.candidate_id,
                "selection_id": outcome.selection_id,
                "stage": outcome.stage,
            }
            fh.write(json.dumps(obj) + "\n")


def save_trait_stats(stats: TraitStats, path: str | Path) -> None:
    Path(path).write_text(json.dumps(stats.to_json(), indent=2) + "\n", encoding="utf-8")


def load_trait_stats(path: str | Path) -> TraitStats:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"trait stats file not found: {path}")
    return TraitStats.from_json(json.loads(path.read_text(encoding="utf-8")))


# ----------------------------------------------------------------------
# Trait normalization
# ----------------------------------------------------------------------

def normalize_traits(
    profiles: Sequence[CandidateProfile],
) -> tuple[list[CandidateProfile], TraitStats]:
    """Median-impute missing traits, then z-score each column.

    The z-step uses the population mean/std of the *imputed* column; columns
    with zero std map to all zeros. Returns new profiles plus the constants
    used, so the same transform can be replayed later.
    """
    if not profiles:
        raise ValidationError("normalize_traits requires at least one profile")
    matrix = np.full((len(profiles), TRAIT_COUNT), np.nan)
    for row, profile in enumerate(profiles):
        for col, value in enumerate(profile.traits):
            if value is not None:
                matrix[row, col] = value

    medians = np.empty(TRAIT_COUNT)
    for col in range(TRAIT_COUNT):
        present = matrix[:, col][~np.isnan(matrix[:, col])]
        if present.size == 0:
            raise ValidationError(f"trait column {col} has no present values")
        medians[col] = np.median(present)
    imputed = np.where(np.isnan(matrix), medians, matrix)

    means = imputed.mean(axis=0)
    stds = imputed.std(axis=0)  # population std
    safe = np.where(stds == 0.0, 1.0, stds)
    normalized = (imputed - means) / safe
    normalized[:, stds == 0.0] = 0.0

    stats = TraitStats(tuple(medians.tolist()), tuple(means.tolist()), tuple(stds.tolist()))
    result = [
        CandidateProfile(p.candidate_id, tuple(normalized[row].tolist()), p.entities)
        for row, p in enumerate(profiles)
    ]
    return result, stats


def apply_trait_stats(
    profiles: Sequence[CandidateProfile], stats: TraitStats
) -> list[CandidateProfile]:
    """Replay a recorded impute-then-z-score transform on new profiles."""
    median = np.asarray(stats.median)
    mean = np.asarray(stats.mean)
    std = np.asarray(stats.std)
    safe = np.where(std == 0.0, 1.0, std)
    result = []
    for profile in profiles:
        raw = np.array([median[i] if v is None else v for i, v in enumerate(profile.traits)])
        z = (raw - mean) / safe
        z[std == 0.0] = 0.0
        result.append(CandidateProfile(profile.candidate_id, tuple(z.tolist()), profile.entities))
    return result


def trait_matrix(profiles: Sequence[CandidateProfile]) -> np.ndarray:
    """Stack fully-present trait vectors into a (C, 18) float matrix."""
    matrix = np.empty((len(profiles), TRAIT_COUNT))
    for row, profile in enumerate(profiles):
        for col, value in enumerate(profile.traits):
            if value is None:
                raise ValidationError(
                    f"candidate {profile.candidate_id!r}: trait {col} missing; normalize first"
                )
            matrix[row, col] = value
    return matrix


def compute_dataset_stats(
    profiles: Sequence[CandidateProfile], outcomes: Sequence[SelectionOutcome]
) -> DatasetStats:
    selections: dict[str, list[int]] = {}
    for outcome in outcomes:
        selections.setdefault(outcome.selection_id, []).append(outcome.stage)
    percentages = {}
    for sid, stages in selections.items():
        counts = [stages.count(s) for s in range(STAGE_MIN, STAGE_MAX + 1)]
        percentages[sid] = tuple(100.0 * c / len(stages) for c in counts)
    return DatasetStats(
        num_candidates=len(profiles),
        num_selections=len(selections),
        num_pairs=len(outcomes),
        stage_percentages=percentages,
    )


# ----------------------------------------------------------------------
# Text normalization and entity extraction
# ----------------------------------------------------------------------

_WHITESPACE_RE = re.compile(r"\s+")
_DISALLOWED_RE = re.compile(r"[^a-z0-9 -]")


def normalize_text(raw: str) -> str:
    """Lowercase, collapse whitespace, and drop anything but letters/digits/space/hyphen."""
    text = _WHITESPACE_RE.sub(" ", raw.lower())
    text = _DISALLOWED_RE.sub("", text)
    return _WHITESPACE_RE.sub(" ", text).strip()


class ExtractionClient(Protocol):
    """Entity-extraction backend: text in, five keyword lists out.

    The response maps the category keys of profiles.jsonl to keyword lists.
    Implementations raise ``TransportError`` for failures worth retrying.
    """

    def extract(self, text: str) -> Mapping[str, Sequence[str]]: ...


class DictionaryExtractionClient:
    """Offline stub: finds known terms of a keyword->category dictionary in the text."""

    def __init__(self, dictionary: Mapping[str, EntityCategory]):
        self._terms = [(normalize_text(term), cat) for term, cat in dictionary.items()]

    def extract(self, text: str) -> dict[str, list[str]]:
        tokens = normalize_text(text).split()
        found: dict[str, list[str]] = {key: [] for key in CATEGORY_KEYS}
        for term, cat in self._terms:
            term_tokens = term.split()
            if not term_tokens:
                continue
            n = len(term_tokens)
            for start in range(0, len(tokens) - n + 1):
                if tokens[start : start + n] == term_tokens:
                    found[cat.json_key].append(term)
                    break
        return found


def extract_entities(
    cv_text: str, client: ExtractionClient, retries: int = 3
) -> dict[EntityCategory, frozenset[str]]:
    """Run the extraction client and normalize its keywords into category sets.

    Transport failures are retried up to ``retries`` attempts; a response with
    a key outside the five categories is a protocol error.
    """
    attempts = 0
    while True:
        attempts += 1
        try:
            response = client.extract(cv_text)
            break
        except TransportError as exc:
            if attempts >= retries:
                raise RetryExhaustedError(f"entity extraction failed: {exc}", attempts) from exc
    unknown = set(response) - set(CATEGORY_KEYS)
    if unknown:
        raise ProtocolError(f"extraction client returned unknown categories {sorted(unknown)}")
    result: dict[EntityCategory, frozenset[str]] = {}
    for cat in EntityCategory:
        keywords = response.get(cat.json_key, [])
        normalized = {normalize_text(kw) for kw in keywords}
        result[cat] = frozenset(kw for kw in normalized if kw)
    return result


# Small built-in dictionary so the extract stage runs offline out of the box.
DEFAULT_EXTRACTION_DICTIONARY: dict[str, EntityCategory] = {
    "teamwork": EntityCategory.SOFT_SKILLS,
    "communication": EntityCategory.SOFT_SKILLS,
    "leadership": EntityCategory.SOFT_SKILLS,
    "problem solving": EntityCategory.SOFT_SKILLS,
    "adaptability": EntityCategory.SOFT_SKILLS,
    "time management": EntityCategory.SOFT_SKILLS,
    "python": EntityCategory.HARD_SKILLS,
    "java": EntityCategory.HARD_SKILLS,
    "sql": EntityCategory.HARD_SKILLS,
    "excel": EntityCategory.HARD_SKILLS,
    "machine learning": EntityCategory.HARD_SKILLS,
    "project management": EntityCategory.HARD_SKILLS,
    "accounting": EntityCategory.HARD_SKILLS,
    "data analysis": EntityCategory.HARD_SKILLS,
    "finance": EntityCategory.INDUSTRY_SECTOR,
    "healthcare": EntityCategory.INDUSTRY_SECTOR,
    "manufacturing": EntityCategory.INDUSTRY_SECTOR,
    "retail": EntityCategory.INDUSTRY_SECTOR,
    "consulting": EntityCategory.INDUSTRY_SECTOR,
    "technology": EntityCategory.INDUSTRY_SECTOR,
    "logistics": EntityCategory.INDUSTRY_SECTOR,
    "bachelor degree": EntityCategory.EDUCATION,
    "master degree": EntityCategory.EDUCATION,
    "phd": EntityCategory.EDUCATION,
    "high school diploma": EntityCategory.EDUCATION,
    "mba": EntityCategory.EDUCATION,
    "english": EntityCategory.LANGUAGE_SKILLS,
    "italian": EntityCategory.LANGUAGE_SKILLS,
    "german": EntityCategory.LANGUAGE_SKILLS,
    "french": EntityCategory.LANGUAGE_SKILLS,
    "spanish": EntityCategory.LANGUAGE_SKILLS,
}


def default_extraction_client() -> DictionaryExtractionClient:
    return DictionaryExtractionClient(DEFAULT_EXTRACTION_DICTIONARY)
