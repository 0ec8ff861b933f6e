"""Annotation-export ingestion, majority voting, and pipeline efficacy.

Two export schemas are supported (see docs/survey-schema.md):

* distortion: one Yes/No distortion judgment per (respondent, face), with a
  platform-computed attention flag.
* attribute: per pair, Yes/No for all 17 non-age attributes on both faces
  plus the sex of each face (the source-face sex answer doubles as the
  attention check), a relative-age judgment, and a same-person judgment.

Responses that fail attention checks are retained but flagged and never
influence labels, validation, or efficacy.
"""

from __future__ import annotations

import csv
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .domain import (
    DomainError,
    NON_AGE_ATTRIBUTES,
    require_attribute,
)
from .filtering import FilterConfig, filter_candidate
from .manifest import ManifestState
from .matrix import check_specificity


class AttentionFailed(DomainError):
    pass


class SchemaMismatch(DomainError):
    pass


class EmptyInput(DomainError):
    pass


LABEL_DISTORTED = "distorted"
LABEL_NOT_DISTORTED = "not_distorted"

Q2_VALUES = (
    "source_by_10_plus",
    "source_by_5",
    "equal",
    "transformed_by_5",
    "transformed_by_10_plus",
)
Q2_PASSES_DRIFT = frozenset({"source_by_5", "equal", "transformed_by_5"})
Q3_VALUES = ("yes", "no", "not_sure")


class NeedMoreLabels:
    """Sentinel: no strict majority yet (or below the three-response quorum)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "NeedMoreLabels"


NEED_MORE_LABELS = NeedMoreLabels()


@dataclass(frozen=True)
class DistortionResponse:
    respondent_id: str
    face_id: str
    label: str  # distorted | not_distorted
    attention_pass: bool


@dataclass(frozen=True)
class AttributeResponse:
    respondent_id: str
    source_face_id: str
    transformed_face_id: str
    q1_source: Mapping[str, bool]  # 17 non-age attributes
    q1_transformed: Mapping[str, bool]
    sex_source: str
    sex_transformed: str
    q2: str
    q3: str
    round: int
    attention_pass: bool

    @property
    def pair_id(self) -> tuple[str, str]:
        return (self.source_face_id, self.transformed_face_id)


def majority_label(labels: Sequence[str]) -> str | NeedMoreLabels:
    """Strict majority over at least three attention-passing labels."""
    if len(labels) < 3:
        return NEED_MORE_LABELS
    counts = Counter(labels)
    top = counts.most_common()
    if len(top) > 1 and top[0][1] == top[1][1]:
        return NEED_MORE_LABELS
    return top[0][0]


def aggregate_distortion_labels(
    responses: Iterable[DistortionResponse],
) -> dict[str, str | NeedMoreLabels]:
    """Majority label per face over attention-passing responses."""
    by_face: dict[str, list[str]] = {}
    for r in responses:
        if not r.attention_pass:
            continue
        by_face.setdefault(r.face_id, []).append(r.label)
    return {face: majority_label(labels) for face, labels in sorted(by_face.items())}


def pair_validates(
    response: AttributeResponse,
    applied: str,
    config: FilterConfig,
) -> bool:
    """Would this respondent's answers pass the filter if they were detector outputs?

    q1 feeds the source-attribute and specificity checks; q2 stands in for
    the numeric age rules.
    """
    if not response.attention_pass:
        raise AttentionFailed(f"response by {response.respondent_id} failed the attention check")
    require_attribute(applied)
    if applied not in ("old", "young"):
        if response.q1_source[applied]:
            return False
        source = _as_vector(response.q1_source)
        transformed = _as_vector(response.q1_transformed)
        if check_specificity(applied, source, transformed, config.matrix):
            return False
        return response.q2 in Q2_PASSES_DRIFT
    # Age edits: the right relative-age answer, with no other attribute changes.
    wanted = "source_by_10_plus" if applied == "old" else "transformed_by_10_plus"
    if response.q2 != wanted:
        return False
    return all(
        response.q1_source[a] == response.q1_transformed[a] for a in NON_AGE_ATTRIBUTES
    )


def _as_vector(flags: Mapping[str, bool]):
    from .domain import AttributeVector

    return AttributeVector(dict(flags), 0)


@dataclass(frozen=True)
class SurveyedPair:
    source_face_id: str
    transformed_face_id: str
    applied: str
    demographic: str  # two-letter code
    distorted: bool  # from the manual distortion filtering step
    responses: tuple[AttributeResponse, ...] = ()


@dataclass(frozen=True)
class EfficacyReport:
    total_sampled: int
    distorted_removed: int
    attribute_validated: int
    identity_removed: int
    validated: int
    efficacy: float
    per_cell: Mapping[tuple[str, str], tuple[int, int]]  # cell -> (sampled, validated)
    excluded_cells: tuple[tuple[str, str], ...]
    # attribute-validated pairs by the earliest round that validated them
    attribute_validated_by_round: Mapping[int, int] = field(default_factory=dict)

    def restricted(self) -> tuple[int, int, float]:
        """(sampled, validated, efficacy) over non-excluded cells."""
        excluded = set(self.excluded_cells)
        sampled = validated = 0
        for cell, (s, v) in self.per_cell.items():
            if cell in excluded:
                continue
            sampled += s
            validated += v
        return sampled, validated, (validated / sampled if sampled else 0.0)


@dataclass(frozen=True)
class EfficacyConfig:
    filter_config: FilterConfig
    exclusion_threshold: float = 0.5  # cells below this per-cell efficacy are excluded


def compute_efficacy(pairs: Sequence[SurveyedPair], config: EfficacyConfig) -> EfficacyReport:
    """Pipeline efficacy from surveyed pairs.

    Distorted pairs are removed first. A pair is attribute-validated when any
    attention-passing response from any round passes ``pair_validates``.
    Attribute-validated pairs judged "not the same person" by more than one
    respondent are then removed as identity failures.
    """
    if not pairs:
        raise EmptyInput("no surveyed pairs")
    per_cell_sampled: Counter = Counter()
    per_cell_validated: Counter = Counter()
    distorted_removed = 0
    attribute_validated = 0
    identity_removed = 0
    validated_rounds: Counter = Counter()
    for pair in pairs:
        cell = (pair.applied, pair.demographic)
        per_cell_sampled[cell] += 1
        if pair.distorted:
            distorted_removed += 1
            continue
        passing = [r for r in pair.responses if r.attention_pass]
        validating_rounds = sorted(
            r.round for r in passing if pair_validates(r, pair.applied, config.filter_config)
        )
        if not validating_rounds:
            continue
        attribute_validated += 1
        validated_rounds[validating_rounds[0]] += 1
        if sum(1 for r in passing if r.q3 == "no") > 1:
            identity_removed += 1
            continue
        per_cell_validated[cell] += 1

    validated = attribute_validated - identity_removed
    per_cell = {
        cell: (per_cell_sampled[cell], per_cell_validated.get(cell, 0))
        for cell in sorted(per_cell_sampled)
    }
    excluded = tuple(
        cell
        for cell, (sampled, ok) in per_cell.items()
        if sampled > 0 and ok / sampled < config.exclusion_threshold
    )
    return EfficacyReport(
        total_sampled=len(pairs),
        distorted_removed=distorted_removed,
        attribute_validated=attribute_validated,
        identity_removed=identity_removed,
        validated=validated,
        efficacy=validated / len(pairs),
        per_cell=per_cell,
        excluded_cells=excluded,
        attribute_validated_by_round=dict(sorted(validated_rounds.items())),
    )


# -- export ingestion ----------------------------------------------------------

DISTORTION_HEADERS = ("respondent_id", "face_id", "label", "attention_pass")

_Q1_COLUMNS = tuple(
    f"q1_{attr}_{face}" for attr in NON_AGE_ATTRIBUTES for face in ("source", "transformed")
)
ATTRIBUTE_HEADERS = (
    "respondent_id",
    "source_face_id",
    "transformed_face_id",
    *_Q1_COLUMNS,
    "q1_sex_source",
    "q1_sex_transformed",
    "q2",
    "q3",
    "round",
)


@dataclass
class IngestResult:
    responses: list
    problems: list[tuple[int, str]]  # (line number, message)


def _parse_bool(raw: str) -> bool:
    token = raw.strip().lower()
    if token in ("true", "1", "yes"):
        return True
    if token in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_yes_no(raw: str) -> bool:
    token = raw.strip().lower()
    if token == "yes":
        return True
    if token == "no":
        return False
    raise ValueError(f"not yes/no: {raw!r}")


def ingest_export(
    path: str | Path,
    schema: str,
    *,
    source_sex: Mapping[str, str] | None = None,
    known_faces: frozenset[str] | None = None,
) -> IngestResult:
    """Parse a survey CSV export.

    ``source_sex`` maps source face-ids to ground-truth sex for the attribute
    survey's attention check. Malformed rows are reported with their line
    numbers, never silently dropped; unknown face-ids are flagged but kept.
    """
    if schema not in ("distortion", "attribute"):
        raise SchemaMismatch(f"unknown schema: {schema!r}")
    expected = DISTORTION_HEADERS if schema == "distortion" else ATTRIBUTE_HEADERS
    result = IngestResult(responses=[], problems=[])
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != set(expected):
            raise SchemaMismatch(
                f"{path}: headers do not match the {schema} schema"
            )
        for line_no, row in enumerate(reader, start=2):
            try:
                if schema == "distortion":
                    response = _parse_distortion_row(row)
                else:
                    response = _parse_attribute_row(row, source_sex or {})
            except (ValueError, KeyError) as exc:
                result.problems.append((line_no, str(exc)))
                continue
            if known_faces is not None:
                ids = (
                    (response.face_id,)
                    if schema == "distortion"
                    else (response.source_face_id, response.transformed_face_id)
                )
                for fid in ids:
                    if fid not in known_faces:
                        result.problems.append((line_no, f"unknown face-id: {fid}"))
            result.responses.append(response)
    return result


def _parse_distortion_row(row: Mapping[str, str]) -> DistortionResponse:
    label = row["label"].strip()
    if label not in (LABEL_DISTORTED, LABEL_NOT_DISTORTED):
        raise ValueError(f"bad label: {label!r}")
    return DistortionResponse(
        respondent_id=row["respondent_id"].strip(),
        face_id=row["face_id"].strip(),
        label=label,
        attention_pass=_parse_bool(row["attention_pass"]),
    )


def _parse_attribute_row(
    row: Mapping[str, str], source_sex: Mapping[str, str]
) -> AttributeResponse:
    q2 = row["q2"].strip()
    if q2 not in Q2_VALUES:
        raise ValueError(f"bad q2: {q2!r}")
    q3 = row["q3"].strip()
    if q3 not in Q3_VALUES:
        raise ValueError(f"bad q3: {q3!r}")
    source_id = row["source_face_id"].strip()
    sex_source = row["q1_sex_source"].strip().lower()
    sex_transformed = row["q1_sex_transformed"].strip().lower()
    truth = source_sex.get(source_id)
    attention = truth is None or sex_source == truth
    return AttributeResponse(
        respondent_id=row["respondent_id"].strip(),
        source_face_id=source_id,
        transformed_face_id=row["transformed_face_id"].strip(),
        q1_source={a: _parse_yes_no(row[f"q1_{a}_source"]) for a in NON_AGE_ATTRIBUTES},
        q1_transformed={a: _parse_yes_no(row[f"q1_{a}_transformed"]) for a in NON_AGE_ATTRIBUTES},
        sex_source=sex_source,
        sex_transformed=sex_transformed,
        q2=q2,
        q3=q3,
        round=int(row["round"]),
        attention_pass=attention,
    )


def sample_for_survey(
    state: ManifestState, *, per_cell: int = 5, seed: int = 0
) -> list[tuple[str, str, str, str]]:
    """Deterministic per-cell sample of accepted pairs for annotation.

    Returns rows of (source-face-id, transformed-face-id, attribute,
    demographic code), at most ``per_cell`` per (attribute, demographic),
    fewer when a cell has fewer accepted pairs.
    """
    by_cell: dict[tuple[str, str], list[tuple[str, str]]] = {}
    for face_id, verdict in state.verdicts.items():
        if not verdict.accepted:
            continue
        face = state.faces[face_id]
        code = state.identities[face.identity_id].demographic.code
        assert face.applied_attribute is not None and face.parent_face_id is not None
        by_cell.setdefault((face.applied_attribute, code), []).append(
            (face.parent_face_id, face_id)
        )
    rng = random.Random(seed)
    rows: list[tuple[str, str, str, str]] = []
    for (attribute, code), pairs in sorted(by_cell.items()):
        pairs.sort()
        chosen = pairs if len(pairs) <= per_cell else rng.sample(pairs, per_cell)
        for source_id, transformed_id in sorted(chosen):
            rows.append((source_id, transformed_id, attribute, code))
    return rows
