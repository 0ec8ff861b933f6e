"""Counterfactual sensitivity statistics: per-cell concept-score deltas,
Student-t confidence intervals, and Table-style report rendering."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.stats import t as student_t

from .backends import BackendError
from .domain import DEMOGRAPHIC_CODES, DomainError, require_attribute


class InsufficientSamples(DomainError):
    pass


class CellExcluded(DomainError):
    pass


@dataclass(frozen=True)
class ProbeSpec:
    """What to probe: (attribute edit, concept) rows, at which confidence."""

    rows: tuple[tuple[str, str], ...]
    confidence_level: float = 0.999
    excluded_cells: frozenset[tuple[str, str]] = frozenset()

    def __post_init__(self) -> None:
        if not (0.0 < self.confidence_level < 1.0):
            raise DomainError("confidence-level must be in (0, 1)")
        for attribute, _concept in self.rows:
            require_attribute(attribute)


def load_probe_spec(path: str | Path) -> ProbeSpec:
    body = json.loads(Path(path).read_text(encoding="utf-8"))
    return ProbeSpec(
        rows=tuple((r[0], r[1]) for r in body["pairs"]),
        confidence_level=float(body.get("confidence-level", 0.999)),
        excluded_cells=frozenset((c[0], c[1]) for c in body.get("excluded-cells", [])),
    )


@dataclass(frozen=True)
class CellStat:
    attribute: str
    demographic: str  # two-letter code
    concept: str
    n: int
    mean_delta: float | None
    ci_half_width: float | None

    @property
    def sufficient(self) -> bool:
        return self.n >= 2 and self.mean_delta is not None and self.ci_half_width is not None


def mean_ci(deltas: Sequence[float], confidence_level: float) -> tuple[float, float]:
    """Mean and two-sided Student-t half-width at the given confidence level."""
    n = len(deltas)
    if n < 2:
        raise InsufficientSamples(f"need at least 2 deltas, got {n}")
    if not (0.0 < confidence_level < 1.0):
        raise DomainError("confidence-level must be in (0, 1)")
    arr = np.asarray(deltas, dtype=np.float64)
    if float(arr.max()) == float(arr.min()):
        return float(arr[0]), 0.0  # zero variance, exactly
    mean = float(arr.mean())
    s = float(arr.std(ddof=1))
    if s == 0.0:
        return mean, 0.0
    quantile = float(student_t.ppf(0.5 + confidence_level / 2.0, df=n - 1))
    return mean, quantile * s / math.sqrt(n)


def concept_deltas(
    pairs: Sequence[tuple[str, str]],
    concept: str,
    backend: Any,
    *,
    cell: tuple[str, str] | None = None,
    excluded_cells: frozenset[tuple[str, str]] = frozenset(),
) -> tuple[list[float], int]:
    """Per-pair score(transformed) - score(source) for one concept.

    ``pairs`` are (source image-ref, transformed image-ref) of accepted
    candidates. Pairs whose scoring fails are dropped and counted. Probing a
    cell on the exclusion list is refused.
    """
    if cell is not None and cell in excluded_cells:
        raise CellExcluded(f"cell {cell} is excluded from probing")
    deltas: list[float] = []
    dropped = 0
    for source_ref, transformed_ref in pairs:
        try:
            source_score = backend.concept_scores(source_ref, [concept])[concept]
            transformed_score = backend.concept_scores(transformed_ref, [concept])[concept]
        except BackendError:
            dropped += 1
            continue
        deltas.append(transformed_score - source_score)
    return deltas, dropped


def make_cell_stat(
    attribute: str,
    demographic: str,
    concept: str,
    deltas: Sequence[float],
    confidence_level: float,
) -> CellStat:
    if len(deltas) < 2:
        return CellStat(attribute, demographic, concept, len(deltas), None, None)
    mean, half = mean_ci(deltas, confidence_level)
    return CellStat(attribute, demographic, concept, len(deltas), mean, half)


# -- rendering -----------------------------------------------------------------

MISSING_CELL = "—"  # em dash for insufficient or excluded cells


def format_sig2(value: float) -> str:
    """Two significant figures, plain decimal or %g-style."""
    if value == 0 or not math.isfinite(value):
        return "0" if value == 0 else str(value)
    exponent = math.floor(math.log10(abs(value)))
    return f"{round(value, 1 - exponent):g}"


def _cell_text(stat: CellStat | None, *, rich: bool) -> str:
    if stat is None or not stat.sufficient:
        return MISSING_CELL
    mean = format_sig2(stat.mean_delta)
    half = format_sig2(stat.ci_half_width)
    if rich and mean.startswith("-"):
        mean = "−" + mean[1:]
    return f"{mean} ± {half}"


def build_report(stats: Sequence[CellStat], format: str = "markdown") -> str:
    """Render cell stats as a table: one row per (attribute edit, concept),
    one column per demographic in the order AM, AF, BM, BF, IM, IF, WM, WF."""
    if format not in ("markdown", "csv"):
        raise DomainError(f"unknown report format: {format!r}")
    rich = format == "markdown"
    by_key: dict[tuple[str, str, str], CellStat] = {}
    row_order: list[tuple[str, str]] = []
    for stat in stats:
        key = (stat.attribute, stat.concept)
        if key not in row_order:
            row_order.append(key)
        by_key[(stat.attribute, stat.concept, stat.demographic)] = stat

    header = ["Attribute Edit", "Concept", *DEMOGRAPHIC_CODES]
    rows: list[list[str]] = []
    for attribute, concept in row_order:
        cells = [
            _cell_text(by_key.get((attribute, concept, code)), rich=rich)
            for code in DEMOGRAPHIC_CODES
        ]
        rows.append([attribute, concept, *cells])

    if format == "markdown":
        out = io.StringIO()
        out.write("| " + " | ".join(header) + " |\n")
        out.write("|" + "|".join(["---"] * len(header)) + "|\n")
        for row in rows:
            out.write("| " + " | ".join(row) + " |\n")
        return out.getvalue()
    out = io.StringIO()
    out.write(",".join(header) + "\n")
    for row in rows:
        out.write(",".join(row) + "\n")
    return out.getvalue()


def stats_to_json(stats: Sequence[CellStat]) -> list[dict[str, Any]]:
    return [
        {
            "attribute": s.attribute,
            "demographic": s.demographic,
            "concept": s.concept,
            "n": s.n,
            "mean-delta": s.mean_delta,
            "ci-half-width": s.ci_half_width,
        }
        for s in stats
    ]


def stats_from_json(items: Sequence[Mapping[str, Any]]) -> list[CellStat]:
    return [
        CellStat(
            attribute=item["attribute"],
            demographic=item["demographic"],
            concept=item["concept"],
            n=int(item["n"]),
            mean_delta=item["mean-delta"],
            ci_half_width=item["ci-half-width"],
        )
        for item in items
    ]
