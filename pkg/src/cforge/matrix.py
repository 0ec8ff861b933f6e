"""Attribute-change transition matrix driving the specificity checks.

Each row is the attribute being applied; each column states what may happen
to another attribute on the transformed face:

    MustBePresent      (1)   attribute must be present
    MustBeAbsent       (0)   attribute must be absent
    PreserveFromSource (-1)  attribute must match the source face
    Ignore             (-2)  attribute is not checked

The matrix covers the 17 non-age attributes; age changes are handled by
numeric rules in the filter.
"""

from __future__ import annotations

import enum
import io
from typing import Mapping

from .domain import (
    AGE_ATTRIBUTES,
    AttributeVector,
    DomainError,
    NON_AGE_ATTRIBUTES,
    require_attribute,
)


class MalformedMatrix(DomainError):
    pass


class AgeAttributeNotApplicable(DomainError):
    pass


class SpecCode(enum.IntEnum):
    MUST_BE_PRESENT = 1
    MUST_BE_ABSENT = 0
    PRESERVE_FROM_SOURCE = -1
    IGNORE = -2


class TransitionMatrix:
    """Square rule grid over the 17 non-age attributes; diagonal is MustBePresent."""

    def __init__(self, rows: Mapping[str, Mapping[str, SpecCode]]):
        if set(rows) != set(NON_AGE_ATTRIBUTES):
            raise MalformedMatrix("matrix rows must cover exactly the 17 non-age attributes")
        table: dict[str, dict[str, SpecCode]] = {}
        for applied in NON_AGE_ATTRIBUTES:
            row = rows[applied]
            if set(row) != set(NON_AGE_ATTRIBUTES):
                raise MalformedMatrix(f"row {applied!r} must cover exactly the 17 non-age attributes")
            if SpecCode(row[applied]) is not SpecCode.MUST_BE_PRESENT:
                raise MalformedMatrix(f"diagonal cell ({applied}, {applied}) must be MustBePresent")
            table[applied] = {t: SpecCode(row[t]) for t in NON_AGE_ATTRIBUTES}
        self._rows = table

    def cell(self, applied: str, target: str) -> SpecCode:
        require_attribute(applied, non_age=True)
        require_attribute(target, non_age=True)
        return self._rows[applied][target]

    def row(self, applied: str) -> dict[str, SpecCode]:
        require_attribute(applied, non_age=True)
        return dict(self._rows[applied])

    def with_cell(self, applied: str, target: str, code: SpecCode) -> "TransitionMatrix":
        rows = {a: dict(r) for a, r in self._rows.items()}
        rows[applied][target] = code
        return TransitionMatrix(rows)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TransitionMatrix) and self._rows == other._rows


# Documented off-diagonal overrides. Everything else preserves the source.
_DEFAULT_OVERRIDES: dict[tuple[str, str], SpecCode] = {
    # A facemask occludes the mouth region: expression and lip color must be
    # gone, and facial hair is simply not observable.
    ("facemask", "smile"): SpecCode.MUST_BE_ABSENT,
    ("facemask", "red_lipstick"): SpecCode.MUST_BE_ABSENT,
    ("facemask", "mustache"): SpecCode.IGNORE,
    ("facemask", "goatee"): SpecCode.IGNORE,
    ("facemask", "thick_beard"): SpecCode.IGNORE,
    # Sunglasses are a kind of glasses.
    ("sunglasses", "glasses"): SpecCode.IGNORE,
    # Lipstick and heavy makeup coincide.
    ("heavy_makeup", "red_lipstick"): SpecCode.IGNORE,
    ("red_lipstick", "heavy_makeup"): SpecCode.IGNORE,
    # Facial-hair styles overlap each other.
    ("thick_beard", "mustache"): SpecCode.IGNORE,
    ("thick_beard", "goatee"): SpecCode.IGNORE,
    ("goatee", "mustache"): SpecCode.IGNORE,
    ("goatee", "thick_beard"): SpecCode.IGNORE,
    ("mustache", "goatee"): SpecCode.IGNORE,
    ("mustache", "thick_beard"): SpecCode.IGNORE,
}


def default_matrix() -> TransitionMatrix:
    """The shipped default rule grid.

    Diagonal MustBePresent, PreserveFromSource elsewhere, with the documented
    coinciding/contradicting overrides. Undocumented interactions stay at
    PreserveFromSource; use a matrix file to override.
    """
    rows: dict[str, dict[str, SpecCode]] = {}
    for applied in NON_AGE_ATTRIBUTES:
        row = {}
        for target in NON_AGE_ATTRIBUTES:
            if applied == target:
                row[target] = SpecCode.MUST_BE_PRESENT
            else:
                row[target] = _DEFAULT_OVERRIDES.get((applied, target), SpecCode.PRESERVE_FROM_SOURCE)
        rows[applied] = row
    return TransitionMatrix(rows)


def dump_matrix(matrix: TransitionMatrix) -> str:
    """Serialize to the CSV grid format accepted by load_matrix."""
    out = io.StringIO()
    out.write("applied," + ",".join(NON_AGE_ATTRIBUTES) + "\n")
    for applied in NON_AGE_ATTRIBUTES:
        row = matrix.row(applied)
        out.write(applied + "," + ",".join(str(int(row[t])) for t in NON_AGE_ATTRIBUTES) + "\n")
    return out.getvalue()


def load_matrix(text: str) -> TransitionMatrix:
    """Parse a CSV grid: header row/column of attribute names, cells in {1,0,-1,-2}."""
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise MalformedMatrix("empty matrix file")
    header = [c.strip() for c in lines[0].split(",")]
    columns = header[1:]
    if sorted(columns) != sorted(NON_AGE_ATTRIBUTES):
        raise MalformedMatrix(f"header must list the 17 non-age attributes, got {columns}")
    if len(lines) != 1 + len(NON_AGE_ATTRIBUTES):
        raise MalformedMatrix(f"expected 17 data rows, got {len(lines) - 1}")
    rows: dict[str, dict[str, SpecCode]] = {}
    for ln in lines[1:]:
        cells = [c.strip() for c in ln.split(",")]
        if len(cells) != 1 + len(columns):
            raise MalformedMatrix(f"row {cells[0]!r} has {len(cells) - 1} cells, expected {len(columns)}")
        applied = cells[0]
        if applied not in NON_AGE_ATTRIBUTES:
            raise MalformedMatrix(f"unknown row attribute: {applied!r}")
        if applied in rows:
            raise MalformedMatrix(f"duplicate row: {applied!r}")
        row = {}
        for col, raw in zip(columns, cells[1:]):
            try:
                code = SpecCode(int(raw))
            except ValueError:
                raise MalformedMatrix(f"invalid code {raw!r} in row {applied!r}") from None
            row[col] = code
        rows[applied] = row
    return TransitionMatrix(rows)


def check_specificity(
    applied: str,
    source: AttributeVector,
    transformed: AttributeVector,
    matrix: TransitionMatrix,
) -> list[str]:
    """Targets whose matrix constraint fails, in canonical order; [] means specificity holds."""
    if applied in AGE_ATTRIBUTES:
        raise AgeAttributeNotApplicable(f"{applied!r} is handled by the numeric age rules")
    require_attribute(applied, non_age=True)
    row = matrix.row(applied)
    violations: list[str] = []
    for target in NON_AGE_ATTRIBUTES:
        code = row[target]
        if code is SpecCode.IGNORE:
            continue
        got = transformed.flags[target]
        if code is SpecCode.MUST_BE_PRESENT:
            ok = got
        elif code is SpecCode.MUST_BE_ABSENT:
            ok = not got
        else:  # PRESERVE_FROM_SOURCE
            ok = got == source.flags[target]
        if not ok:
            violations.append(target)
    return violations


def apply_exact_edit(applied: str, source: AttributeVector, matrix: TransitionMatrix) -> AttributeVector:
    """Flags a perfect single-attribute edit would show to the detectors.

    The applied attribute appears; targets the row forces absent (occlusions)
    disappear; everything else is preserved from the source.
    """
    require_attribute(applied, non_age=True)
    row = matrix.row(applied)
    flags = dict(source.flags)
    flags[applied] = True
    for target, code in row.items():
        if code is SpecCode.MUST_BE_ABSENT:
            flags[target] = False
    return AttributeVector(flags, source.age_years)
