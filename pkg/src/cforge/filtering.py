"""Candidate filtering: distortion gate, source-attribute rule, specificity
matrix, and the numeric age rules.

Reasons accumulate in a fixed order so identical violations always serialize
identically:

    1. DISTORTED
    2. SOURCE_HAS_ATTRIBUTE
    3. non-age applied: SPECIFICITY_VIOLATION(target)..., AGE_DRIFT_EXCEEDED
    4. age applied: AGE_CHANGE_INSUFFICIENT, SPECIFICITY_VIOLATION(target)...

The age-drift bound is exclusive (a drift of exactly the bound rejects);
the age-change bound for old/young is inclusive (a change of exactly the
bound accepts).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .domain import (
    AGE_ATTRIBUTES,
    AttributeVector,
    DomainError,
    FilterVerdict,
    NON_AGE_ATTRIBUTES,
    UnknownAttribute,
    specificity_reason,
)
from .manifest import ManifestState
from .matrix import TransitionMatrix, check_specificity, default_matrix


@dataclass(frozen=True)
class FilterConfig:
    age_drift_max: int = 10  # exclusive: |drift| >= bound rejects
    age_change_min: int = 10  # inclusive: |change| >= bound accepts
    age_floor: int = 18
    age_ceiling: int = 80
    matrix: TransitionMatrix = field(default_factory=default_matrix)

    def __post_init__(self) -> None:
        if self.age_drift_max <= 0 or self.age_change_min <= 0:
            raise DomainError("age bounds must be positive")


def _source_has_attribute(source: AttributeVector, applied: str, config: FilterConfig) -> bool:
    if applied == "old":
        # No representable room to get age_change_min years older.
        return source.age_years >= config.age_ceiling - config.age_change_min
    if applied == "young":
        return source.age_years <= config.age_floor + config.age_change_min
    return source.flags[applied]


def filter_candidate(
    source_detection: AttributeVector,
    transformed_detection: AttributeVector,
    applied: str,
    distorted: bool,
    config: FilterConfig,
    *,
    face_id: str = "",
) -> FilterVerdict:
    """Verdict for one candidate given detector outputs for both faces."""
    if applied not in NON_AGE_ATTRIBUTES and applied not in AGE_ATTRIBUTES:
        raise UnknownAttribute(f"unknown applied attribute: {applied!r}")
    reasons: list[str] = []
    if distorted:
        reasons.append("DISTORTED")
    if _source_has_attribute(source_detection, applied, config):
        reasons.append("SOURCE_HAS_ATTRIBUTE")
    drift = transformed_detection.age_years - source_detection.age_years
    if applied not in AGE_ATTRIBUTES:
        for target in check_specificity(applied, source_detection, transformed_detection, config.matrix):
            reasons.append(specificity_reason(target))
        if abs(drift) >= config.age_drift_max:
            reasons.append("AGE_DRIFT_EXCEEDED")
    else:
        wanted = drift >= config.age_change_min if applied == "old" else drift <= -config.age_change_min
        if not wanted:
            reasons.append("AGE_CHANGE_INSUFFICIENT")
        for target in NON_AGE_ATTRIBUTES:
            if source_detection.flags[target] != transformed_detection.flags[target]:
                reasons.append(specificity_reason(target))
    return FilterVerdict(
        transformed_face_id=face_id,
        accepted=not reasons,
        reasons=tuple(reasons),
    )


@dataclass
class FilterOutcome:
    verdicts: list[FilterVerdict]
    summary: dict[str, Any]
    unprocessed: list[str]  # candidates lacking usable detections


def _cell_key(attribute: str, code: str) -> str:
    return f"{attribute}/{code}"


def filter_dataset(
    state: ManifestState,
    config: FilterConfig,
    *,
    include_unvalidated: bool = False,
) -> FilterOutcome:
    """Filter every transformed candidate with a detection in the state.

    Candidates whose detection failed (or never ran) are neither accepted
    nor rejected; they land in the unprocessed bucket. Candidates of
    unvalidated identities are skipped unless ``include_unvalidated``.
    Deterministic: candidates are processed in face-id order.
    """
    verdicts: list[FilterVerdict] = []
    unprocessed: list[str] = []
    cells: dict[str, dict[str, Any]] = {}
    totals = {
        "candidates": 0,
        "unvalidated": 0,
        "unprocessed": 0,
        "distorted": 0,
        "accepted": 0,
        "rejected": 0,
        "rejected-by-reason": {},
    }

    def cell_bucket(attribute: str, code: str) -> dict[str, Any]:
        key = _cell_key(attribute, code)
        if key not in cells:
            cells[key] = {
                "candidates": 0,
                "unvalidated": 0,
                "unprocessed": 0,
                "distorted": 0,
                "accepted": 0,
                "rejected": 0,
                "rejected-by-reason": {},
            }
        return cells[key]

    def count_reasons(bucket: dict[str, Any], verdict: FilterVerdict) -> None:
        if verdict.accepted:
            bucket["accepted"] += 1
            return
        bucket["rejected"] += 1
        seen = set()
        for reason in verdict.reasons:
            base = reason.split("(", 1)[0]
            if base in seen:
                continue  # one count per verdict per reason code
            seen.add(base)
            counts = bucket["rejected-by-reason"]
            counts[base] = counts.get(base, 0) + 1

    for candidate in sorted(state.candidates(), key=lambda f: f.face_id):
        identity = state.identities[candidate.identity_id]
        code = identity.demographic.code
        applied = candidate.applied_attribute
        assert applied is not None
        bucket = cell_bucket(applied, code)
        bucket["candidates"] += 1
        totals["candidates"] += 1
        if not identity.identity_validated and not include_unvalidated:
            bucket["unvalidated"] += 1
            totals["unvalidated"] += 1
            continue
        detection = state.detections.get(candidate.face_id)
        if detection is None or detection.distorted is None:
            bucket["unprocessed"] += 1
            totals["unprocessed"] += 1
            unprocessed.append(candidate.face_id)
            continue
        parent_detection = state.detections.get(candidate.parent_face_id or "")
        if detection.distorted and (
            detection.attributes is None
            or parent_detection is None
            or parent_detection.attributes is None
        ):
            # Distorted candidates are rejectable without attribute detections.
            verdict = FilterVerdict(candidate.face_id, False, ("DISTORTED",))
        else:
            if (
                detection.attributes is None
                or parent_detection is None
                or parent_detection.attributes is None
            ):
                bucket["unprocessed"] += 1
                totals["unprocessed"] += 1
                unprocessed.append(candidate.face_id)
                continue
            verdict = filter_candidate(
                parent_detection.attributes,
                detection.attributes,
                applied,
                bool(detection.distorted),
                config,
                face_id=candidate.face_id,
            )
        if "DISTORTED" in verdict.reasons:
            bucket["distorted"] += 1
            totals["distorted"] += 1
        count_reasons(bucket, verdict)
        verdicts.append(verdict)

    totals["accepted"] = sum(c["accepted"] for c in cells.values())
    totals["rejected"] = sum(c["rejected"] for c in cells.values())
    merged: dict[str, int] = {}
    for c in cells.values():
        for base, n in c["rejected-by-reason"].items():
            merged[base] = merged.get(base, 0) + n
    totals["rejected-by-reason"] = merged

    summary = {"total": totals, "cells": {k: cells[k] for k in sorted(cells)}}
    return FilterOutcome(verdicts=verdicts, summary=summary, unprocessed=unprocessed)


def write_summary(summary: Mapping[str, Any], path: str | Path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
