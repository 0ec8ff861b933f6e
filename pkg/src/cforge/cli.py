"""Command-line entry point: one binary, resumable subcommands.

Every subcommand is idempotent against the run directory's manifest, so an
interrupted command converges to the uninterrupted result when re-run.
Exit codes: 0 success, 1 partial failures (with a failure report), 2
configuration or usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import random
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

from . import attrdetect, distortion, genplan, stats, surveys
from .backends import EditRequest, WireBackend, http_backend
from .config import ConfigError, EngineConfig, load_config
from .domain import (
    DEMOGRAPHIC_CODES,
    CellReport,
    DetectionReport,
    DomainError,
    FaceRecord,
    Identity,
    SurveyLabel,
)
from .filtering import filter_dataset, write_summary
from .manifest import DatasetManifest, ImageStore
from .mockworld import MockWorld, mock_backend
from .surveys import NEED_MORE_LABELS


@dataclass
class RunPaths:
    root: Path

    def __post_init__(self) -> None:
        self.root = Path(self.root)

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.jsonl"

    @property
    def images(self) -> Path:
        return self.root / "images"

    @property
    def mock_state(self) -> Path:
        return self.root / "mock_state.jsonl"

    @property
    def model(self) -> Path:
        return self.root / "distortion_model.json"

    @property
    def thresholds(self) -> Path:
        return self.root / "thresholds.json"

    @property
    def summary(self) -> Path:
        return self.root / "filter_summary.json"

    @property
    def calibration_root(self) -> Path:
        return self.root / "calibration"

    @property
    def survey_dir(self) -> Path:
        return self.root / "survey"

    @property
    def attribute_responses(self) -> Path:
        return self.survey_dir / "attribute_responses.jsonl"

    @property
    def efficacy_report(self) -> Path:
        return self.root / "efficacy_report.json"

    @property
    def probe_stats(self) -> Path:
        return self.root / "probe_stats.json"


@dataclass
class RunContext:
    config: EngineConfig
    paths: RunPaths
    manifest: DatasetManifest
    backend: WireBackend
    world: MockWorld | None = None
    jobs: int = 1
    manifest_factory: "ManifestFactory" = None  # type: ignore[assignment]

    @property
    def store(self) -> ImageStore:
        return ImageStore(self.paths.images)

    def registry(self) -> genplan.HyperparamRegistry:
        if self.config.hyperparams_path is not None:
            registry = genplan.load_registry(self.config.hyperparams_path)
        else:
            registry = genplan.default_registry(self.config.generation.attributes)
        registry.validate(self.config.generation.attributes)
        return registry

    def close(self) -> None:
        self.manifest.close()
        if self.world is not None:
            self.world.close()


ManifestFactory = Callable[..., DatasetManifest]


def open_context(
    run_dir: str | Path,
    config: EngineConfig,
    *,
    mock: bool = False,
    jobs: int = 1,
    strict: bool = True,
    manifest_factory: ManifestFactory = DatasetManifest,
) -> RunContext:
    paths = RunPaths(Path(run_dir))
    paths.root.mkdir(parents=True, exist_ok=True)
    if jobs > config.backend.max_in_flight:
        # --jobs is the requested parallelism; widen the endpoint bound to match
        import dataclasses

        config = dataclasses.replace(
            config, backend=dataclasses.replace(config.backend, max_in_flight=jobs)
        )
    manifest = manifest_factory(paths.manifest, strict=strict)
    world: MockWorld | None = None
    if mock:
        world = MockWorld(
            rng_seed=config.seed,
            edit_success_rate=config.mock.edit_success_rate,
            side_effect_rate=config.mock.side_effect_rate,
            distortion_rate=config.mock.distortion_rate,
            source_attribute_rate=config.mock.source_attribute_rate,
            embedding_dim=config.embedding_dim,
            state_path=str(paths.mock_state),
        )
        backend = mock_backend(world, endpoint=config.backend if config.backend.base_url else None)
    else:
        if not config.backend.base_url:
            raise ConfigError(
                "no backend URL configured; pass --backend-url, set CFORGE_BACKEND_URL, or use --mock"
            )
        backend = http_backend(
            config.backend.base_url,
            endpoint=config.backend,
            embedding_dim=config.embedding_dim,
        )
    return RunContext(
        config=config,
        paths=paths,
        manifest=manifest,
        backend=backend,
        world=world,
        jobs=jobs,
        manifest_factory=manifest_factory,
    )


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_plan(ctx: RunContext, out: str | None = None) -> int:
    cfg = ctx.config.generation
    state = ctx.manifest.state
    registry = ctx.registry()
    source_jobs = genplan.plan_sources(cfg)
    pending_sources = [j for j in source_jobs if j.key not in state.source_keys]
    pending_edits = len(genplan.plan_edits(state, cfg, registry))
    pending_edits += sum(len(cfg.attributes) for j in pending_sources)
    print(f"source-jobs: {len(pending_sources)}")
    print(f"edit-jobs: {pending_edits}")
    if out:
        plan = {
            "source-jobs": [
                {
                    "identity-id": j.identity.identity_id,
                    "variation-index": j.variation_index,
                    "prompt": j.prompt,
                    "seed": j.seed,
                }
                for j in pending_sources
            ],
            "edit-job-count": pending_edits,
        }
        Path(out).write_text(json.dumps(plan, indent=2) + "\n", encoding="utf-8")
    return 0


def _append_identities(ctx: RunContext, identities: Sequence[Identity]) -> int:
    state = ctx.manifest.state
    fresh = []
    for identity in identities:
        existing = state.identities.get(identity.identity_id)
        if existing is None or existing.identity_validated != identity.identity_validated:
            if existing is not None and existing.identity_validated:
                continue  # never silently un-validate
            fresh.append(identity)
    if fresh:
        ctx.manifest.append_many(fresh)
    return len(fresh)


def stage_generate(ctx: RunContext, *, assume_validated: bool | None = None) -> int:
    """Generate source faces for every planned identity and variation."""
    validated = assume_validated if assume_validated is not None else ctx.world is not None
    identities = genplan.plan_identities(ctx.config.generation, identity_validated=validated)
    _append_identities(ctx, identities)
    jobs = genplan.plan_sources(ctx.config.generation, identities)
    report = genplan.run_plan(jobs, ctx.backend, ctx.manifest, ctx.store, max_workers=ctx.jobs)
    print(f"sources: completed={report.completed} skipped={report.skipped} failed={len(report.failures)}")
    _print_failures(report.failures)
    return 0 if report.ok else 1


def stage_edit(ctx: RunContext) -> int:
    """Apply every configured attribute to every source face."""
    registry = ctx.registry()
    jobs = genplan.plan_edits(ctx.manifest.state, ctx.config.generation, registry)
    report = genplan.run_plan(jobs, ctx.backend, ctx.manifest, ctx.store, max_workers=ctx.jobs)
    print(f"edits: completed={report.completed} skipped={report.skipped} failed={len(report.failures)}")
    _print_failures(report.failures)
    return 0 if report.ok else 1


def _print_failures(failures: Sequence[tuple[str, str]], limit: int = 10) -> None:
    for key, error in failures[:limit]:
        print(f"  FAILED {key}: {error}", file=sys.stderr)
    if len(failures) > limit:
        print(f"  ... and {len(failures) - limit} more failures", file=sys.stderr)


def _prompt_profile(ctx: RunContext) -> attrdetect.PromptProfile:
    """Default profile, with the instruction template overridable via
    ``prompts/attributes.txt`` in the run directory."""
    template_path = ctx.paths.root / "prompts" / "attributes.txt"
    if template_path.exists():
        return attrdetect.PromptProfile(
            instruction_template=attrdetect.load_instruction_template(str(template_path))
        )
    return attrdetect.PromptProfile()


def stage_detect(ctx: RunContext, *, only_nondistorted: bool = False) -> int:
    """Run attribute and age detection for candidate pairs."""
    state = ctx.manifest.state
    profile = _prompt_profile(ctx)
    versions = {"attributes": "wire/1", "age": "wire/1"}
    detected = skipped = failed = 0
    for candidate in sorted(state.candidates(), key=lambda f: f.face_id):
        existing = state.detections.get(candidate.face_id)
        if existing is not None and existing.attributes is not None:
            skipped += 1
            continue
        if only_nondistorted and (existing is None or existing.distorted is not False):
            skipped += 1
            continue
        parent = state.faces[candidate.parent_face_id or ""]
        try:
            pair = attrdetect.detect_pair(parent, candidate, ctx.backend, profile)
        except DomainError as exc:
            failed += 1
            ctx.manifest.append(
                DetectionReport(candidate.face_id, None, None, None, {**versions, "error": str(exc)[:200]})
            )
            continue
        ctx.manifest.append_many(
            [
                DetectionReport(parent.face_id, pair.source, None, None, versions),
                DetectionReport(candidate.face_id, pair.transformed, None, None, versions),
            ]
        )
        detected += 1
    print(f"detect: pairs={detected} skipped={skipped} failed={failed}")
    return 0 if failed == 0 else 1


def stage_detect_single(ctx: RunContext, attribute: str) -> int:
    """Experimental per-attribute detection: one question per pair, answers
    written to a side report instead of manifest detections."""
    from cforge.domain import require_attribute

    require_attribute(attribute, non_age=True)
    state = ctx.manifest.state
    profile = _prompt_profile(ctx)
    rows = []
    failed = 0
    for candidate in sorted(state.candidates(), key=lambda f: f.face_id):
        if candidate.applied_attribute != attribute:
            continue
        parent = state.faces[candidate.parent_face_id or ""]
        try:
            result = ctx.backend.detect_attributes(
                parent.image_ref, candidate.image_ref, [attribute], profile
            )
        except DomainError as exc:
            failed += 1
            print(f"  {candidate.face_id}: {exc}", file=sys.stderr)
            continue
        rows.append(
            {
                "source-face-id": parent.face_id,
                "transformed-face-id": candidate.face_id,
                "attribute": attribute,
                "source": result.source[attribute],
                "transformed": result.transformed[attribute],
                "retries-used": result.retries_used,
            }
        )
    out = ctx.paths.root / f"single_attribute_{attribute}.json"
    out.write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    print(f"detect --single-attribute {attribute}: {len(rows)} pairs -> {out}")
    return 0 if failed == 0 else 1


def _calibration_context(ctx: RunContext) -> tuple[DatasetManifest, ImageStore]:
    root = ctx.paths.calibration_root
    root.mkdir(parents=True, exist_ok=True)
    factory = ctx.manifest_factory or DatasetManifest
    return factory(root / "manifest.jsonl", strict=ctx.manifest.strict), ImageStore(root / "images")


def _majority_distortion_labels(path: str, known: frozenset[str]) -> dict[str, str]:
    result = surveys.ingest_export(path, "distortion", known_faces=known)
    for line_no, message in result.problems:
        print(f"  labels:{line_no}: {message}", file=sys.stderr)
    labels: dict[str, str] = {}
    for face_id, label in surveys.aggregate_distortion_labels(result.responses).items():
        if label is not NEED_MORE_LABELS:
            labels[face_id] = label  # type: ignore[assignment]
    return labels


def stage_calibrate(ctx: RunContext, *, labels_csv: str | None = None) -> int:
    """Train the distortion classifier and calibrate per-cell thresholds.

    Training data follows the detector recipe: clean source variations of
    non-celebrity identities versus over-edited faces across all attributes.
    Threshold labels come from an ingested survey export (``--labels``),
    previously ingested manifest labels, or, under --mock, the latent truth.
    """
    if ctx.paths.model.exists() and ctx.paths.thresholds.exists():
        print("calibrate: model and thresholds already present; skipping")
        return 0
    cal = ctx.config.calibration
    registry = ctx.registry()
    cal_manifest, cal_store = _calibration_context(ctx)
    try:
        tcfg = ctx.config.training
        gen_cfg = genplan.training_generation_config(tcfg)
        identities = genplan.plan_training_identities(tcfg)
        fresh = [i for i in identities if i.identity_id not in cal_manifest.state.identities]
        if fresh:
            cal_manifest.append_many(fresh)
        source_jobs = genplan.plan_sources(gen_cfg, identities)
        src_report = genplan.run_plan(source_jobs, ctx.backend, cal_manifest, cal_store, max_workers=ctx.jobs)
        edit_jobs = genplan.plan_edits(
            cal_manifest.state,
            gen_cfg,
            registry,
            distortion_params=True,
            variation_limit=tcfg.distortion_variations,
        )
        edit_report = genplan.run_plan(edit_jobs, ctx.backend, cal_manifest, cal_store, max_workers=ctx.jobs)
        if src_report.failures or edit_report.failures:
            _print_failures(src_report.failures + edit_report.failures)
            return 1

        examples: list[tuple[Any, str]] = []
        cal_state = cal_manifest.state
        for face in sorted(cal_state.sources(), key=lambda f: f.face_id):
            if face.variation_index < tcfg.clean_variations:
                examples.append((ctx.backend.embed(face.image_ref), distortion.LABEL_CLEAN))
        for face in sorted(cal_state.candidates(), key=lambda f: f.face_id):
            examples.append((ctx.backend.embed(face.image_ref), distortion.LABEL_DISTORTED))
        model = distortion.train_svm(
            examples,
            reg_strength=cal.reg_strength,
            epochs=cal.epochs,
            seed=ctx.config.stage_seed("train-svm"),
            batch_size=cal.batch_size,
        )
        distortion.save_model(model, ctx.paths.model)
    finally:
        cal_manifest.close()

    labeled = _collect_calibration_labels(ctx, model, labels_csv)
    table = distortion.calibrate_thresholds(model, labeled, recall_target=cal.recall_target)
    distortion.save_thresholds(table, ctx.paths.thresholds)
    print(
        f"calibrate: trained on {len(labeled)} labeled scores; "
        f"{len(table.cells)} cell thresholds, recall target {table.recall_target}"
    )
    return 0


def _collect_calibration_labels(
    ctx: RunContext, model: distortion.LinearModel, labels_csv: str | None
) -> list[tuple[tuple[str, str], float, str]]:
    state = ctx.manifest.state
    candidates = sorted(state.candidates(), key=lambda f: f.face_id)
    if not candidates:
        raise ConfigError("calibrate needs transformed candidates in the manifest (run edit first)")

    face_labels: dict[str, str] = {}
    if labels_csv is not None:
        face_labels = _majority_distortion_labels(labels_csv, frozenset(state.faces))
    else:
        manifest_labels = {
            face_id: label.label
            for (survey, face_id), label in state.survey_labels.items()
            if survey == "distortion"
        }
        if manifest_labels:
            face_labels = manifest_labels
        elif ctx.world is not None:
            face_labels = _latent_labels(ctx, candidates)
        else:
            raise ConfigError("calibrate needs distortion labels: pass --labels or ingest a survey")

    labeled: list[tuple[tuple[str, str], float, str]] = []
    for candidate in candidates:
        label = face_labels.get(candidate.face_id)
        if label is None:
            continue
        cell = (candidate.applied_attribute or "", state.demographic_of_face(candidate.face_id))
        score = model.score(ctx.backend.embed(candidate.image_ref))
        mapped = distortion.LABEL_DISTORTED if label == surveys.LABEL_DISTORTED else distortion.LABEL_CLEAN
        labeled.append((cell, score, mapped))
    if not labeled:
        raise ConfigError("no calibration labels matched manifest candidates")
    return labeled


def _latent_labels(ctx: RunContext, candidates: Sequence[FaceRecord]) -> dict[str, str]:
    """Mock runs: the latent distorted flag stands in for the annotators."""
    assert ctx.world is not None
    per_cell = ctx.config.calibration.labels_per_cell
    state = ctx.manifest.state
    by_cell: dict[tuple[str, str], list[FaceRecord]] = {}
    for candidate in candidates:
        cell = (candidate.applied_attribute or "", state.demographic_of_face(candidate.face_id))
        by_cell.setdefault(cell, []).append(candidate)
    rng = random.Random(ctx.config.stage_seed("calibration-sample"))
    labels: dict[str, str] = {}
    for cell in sorted(by_cell):
        faces = sorted(by_cell[cell], key=lambda f: f.face_id)
        if per_cell and len(faces) > per_cell:
            chosen = rng.sample(faces, per_cell)
        else:
            chosen = faces
        for face in chosen:
            latent = ctx.world.latent(face.image_ref)
            labels[face.face_id] = surveys.LABEL_DISTORTED if latent.distorted else surveys.LABEL_NOT_DISTORTED
    return labels


def stage_filter(ctx: RunContext) -> int:
    """Classify distortion for every candidate, then apply the filter rules."""
    if not ctx.paths.model.exists() or not ctx.paths.thresholds.exists():
        raise ConfigError("filter needs distortion_model.json and thresholds.json (run calibrate first)")
    model = distortion.load_model(ctx.paths.model)
    table = distortion.load_thresholds(ctx.paths.thresholds)
    state = ctx.manifest.state
    classified = 0
    for candidate in sorted(state.candidates(), key=lambda f: f.face_id):
        existing = state.detections.get(candidate.face_id)
        if existing is not None and existing.distorted is not None:
            continue
        fragment = distortion.classify(
            model,
            table,
            ctx.backend.embed(candidate.image_ref),
            candidate.applied_attribute or "",
            state.demographic_of_face(candidate.face_id),
        )
        ctx.manifest.append(
            DetectionReport(
                candidate.face_id,
                existing.attributes if existing else None,
                fragment.distortion_score,
                fragment.distorted,
                {"distortion": model.trained_on[:12]},
            )
        )
        classified += 1

    outcome = filter_dataset(
        ctx.manifest.state, ctx.config.filter, include_unvalidated=ctx.config.include_unvalidated
    )
    fresh = []
    for verdict in outcome.verdicts:
        if ctx.manifest.state.verdicts.get(verdict.transformed_face_id) != verdict:
            fresh.append(verdict)
    if fresh:
        ctx.manifest.append_many(fresh)
    write_summary(outcome.summary, ctx.paths.summary)
    totals = outcome.summary["total"]
    print(
        "filter: candidates={candidates} accepted={accepted} rejected={rejected} "
        "distorted={distorted} unprocessed={unprocessed}".format(**totals)
    )
    print(f"filter: classified {classified} new candidates; summary -> {ctx.paths.summary}")
    return 0 if totals["unprocessed"] == 0 else 1


def stage_sample_for_survey(ctx: RunContext, out: str, per_cell: int = 5) -> int:
    rows = surveys.sample_for_survey(
        ctx.manifest.state, per_cell=per_cell, seed=ctx.config.stage_seed("survey-sample")
    )
    state = ctx.manifest.state
    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source_face_id", "transformed_face_id", "attribute", "demographic", "source_sex"])
        for source_id, transformed_id, attribute, code in rows:
            sex = state.identities[state.faces[source_id].identity_id].demographic.sex
            writer.writerow([source_id, transformed_id, attribute, code, sex])
    print(f"sample-for-survey: wrote {len(rows)} pairs -> {out}")
    return 0


def _source_sex_map(ctx: RunContext) -> dict[str, str]:
    state = ctx.manifest.state
    return {
        face_id: state.identities[face.identity_id].demographic.sex
        for face_id, face in state.faces.items()
        if face.kind == "source"
    }


def stage_ingest_survey(ctx: RunContext, path: str, schema: str) -> int:
    known = frozenset(ctx.manifest.state.faces)
    if schema == "distortion":
        result = surveys.ingest_export(path, "distortion", known_faces=known)
        labels = surveys.aggregate_distortion_labels(result.responses)
        resolved = 0
        pending = 0
        for face_id, label in labels.items():
            if label is NEED_MORE_LABELS:
                pending += 1
                continue
            if face_id not in known:
                continue
            n = sum(
                1 for r in result.responses if r.face_id == face_id and r.attention_pass
            )
            record = SurveyLabel(face_id, "distortion", str(label), n)
            existing = ctx.manifest.state.survey_labels.get(("distortion", face_id))
            if existing != record:
                ctx.manifest.append(record)
            resolved += 1
        print(f"ingest-survey: {len(result.responses)} responses, {resolved} labels, {pending} need more labels")
    else:
        result = surveys.ingest_export(path, "attribute", source_sex=_source_sex_map(ctx), known_faces=known)
        ctx.paths.survey_dir.mkdir(parents=True, exist_ok=True)
        seen: set[tuple[str, str, str, int]] = set()
        if ctx.paths.attribute_responses.exists():
            with open(ctx.paths.attribute_responses, "r", encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        entry = json.loads(line)
                        seen.add(
                            (
                                entry["respondent_id"],
                                entry["source_face_id"],
                                entry["transformed_face_id"],
                                entry["round"],
                            )
                        )
        added = 0
        with open(ctx.paths.attribute_responses, "a", encoding="utf-8") as fh:
            for r in result.responses:
                key = (r.respondent_id, r.source_face_id, r.transformed_face_id, r.round)
                if key in seen:
                    continue
                seen.add(key)
                fh.write(json.dumps(_attribute_response_to_json(r), sort_keys=True) + "\n")
                added += 1
        print(f"ingest-survey: {len(result.responses)} responses, {added} new -> {ctx.paths.attribute_responses}")
    for line_no, message in result.problems:
        print(f"  {path}:{line_no}: {message}", file=sys.stderr)
    return 0 if not result.problems else 1


def _attribute_response_to_json(r: surveys.AttributeResponse) -> dict[str, Any]:
    return {
        "respondent_id": r.respondent_id,
        "source_face_id": r.source_face_id,
        "transformed_face_id": r.transformed_face_id,
        "q1_source": dict(r.q1_source),
        "q1_transformed": dict(r.q1_transformed),
        "sex_source": r.sex_source,
        "sex_transformed": r.sex_transformed,
        "q2": r.q2,
        "q3": r.q3,
        "round": r.round,
        "attention_pass": r.attention_pass,
    }


def _attribute_response_from_json(entry: dict[str, Any]) -> surveys.AttributeResponse:
    return surveys.AttributeResponse(
        respondent_id=entry["respondent_id"],
        source_face_id=entry["source_face_id"],
        transformed_face_id=entry["transformed_face_id"],
        q1_source={a: bool(v) for a, v in entry["q1_source"].items()},
        q1_transformed={a: bool(v) for a, v in entry["q1_transformed"].items()},
        sex_source=entry["sex_source"],
        sex_transformed=entry["sex_transformed"],
        q2=entry["q2"],
        q3=entry["q3"],
        round=int(entry["round"]),
        attention_pass=bool(entry["attention_pass"]),
    )


def stage_efficacy(ctx: RunContext, *, distorted_ids: str | None = None) -> int:
    if not ctx.paths.attribute_responses.exists():
        raise ConfigError("no ingested attribute responses; run ingest-survey first")
    responses: list[surveys.AttributeResponse] = []
    with open(ctx.paths.attribute_responses, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                responses.append(_attribute_response_from_json(json.loads(line)))

    state = ctx.manifest.state
    distorted_set: set[str] = set()
    if distorted_ids is not None:
        distorted_set = {
            ln.strip() for ln in Path(distorted_ids).read_text(encoding="utf-8").splitlines() if ln.strip()
        }
    else:
        for (survey, face_id), label in state.survey_labels.items():
            if survey == "distortion" and label.label == surveys.LABEL_DISTORTED:
                distorted_set.add(face_id)

    grouped: dict[tuple[str, str], list[surveys.AttributeResponse]] = {}
    for r in responses:
        grouped.setdefault(r.pair_id, []).append(r)
    pairs = []
    unknown = 0
    for (source_id, transformed_id), rs in sorted(grouped.items()):
        face = state.faces.get(transformed_id)
        if face is None or face.applied_attribute is None:
            unknown += 1
            continue
        pairs.append(
            surveys.SurveyedPair(
                source_face_id=source_id,
                transformed_face_id=transformed_id,
                applied=face.applied_attribute,
                demographic=state.demographic_of_face(transformed_id),
                distorted=transformed_id in distorted_set,
                responses=tuple(rs),
            )
        )
    report = surveys.compute_efficacy(
        pairs,
        surveys.EfficacyConfig(ctx.config.filter, ctx.config.probe.exclusion_threshold),
    )
    restricted_sampled, restricted_validated, restricted_eff = report.restricted()
    print(
        f"efficacy: {report.validated}/{report.total_sampled} = {report.efficacy * 100:.2f}% "
        f"(distorted-removed={report.distorted_removed}, "
        f"attribute-validated={report.attribute_validated}, identity-removed={report.identity_removed})"
    )
    print(
        f"efficacy (excluding {len(report.excluded_cells)} cells below "
        f"{ctx.config.probe.exclusion_threshold:.0%} per-cell efficacy): "
        f"{restricted_validated}/{restricted_sampled} = {restricted_eff * 100:.2f}%"
    )
    body = {
        "total-sampled": report.total_sampled,
        "distorted-removed": report.distorted_removed,
        "attribute-validated": report.attribute_validated,
        "identity-removed": report.identity_removed,
        "validated": report.validated,
        "efficacy": report.efficacy,
        "attribute-validated-by-round": {
            str(k): v for k, v in report.attribute_validated_by_round.items()
        },
        "per-cell": {f"{a}/{c}": list(v) for (a, c), v in report.per_cell.items()},
        "excluded-cells": [f"{a}/{c}" for a, c in report.excluded_cells],
        "restricted": {
            "sampled": restricted_sampled,
            "validated": restricted_validated,
            "efficacy": restricted_eff,
        },
    }
    ctx.paths.efficacy_report.write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")
    cell_records = []
    for (attribute, code), (sampled, validated) in report.per_cell.items():
        record = CellReport(
            attribute=attribute,
            demographic=code,
            concept=None,
            n=sampled,
            efficacy=(validated / sampled) if sampled else None,
        )
        if ctx.manifest.state.cell_reports.get((attribute, code, None)) != record:
            cell_records.append(record)
    if cell_records:
        ctx.manifest.append_many(cell_records)
    if unknown:
        print(f"efficacy: skipped {unknown} pairs not present in the manifest", file=sys.stderr)
        return 1
    return 0


def _excluded_cells_from_report(ctx: RunContext) -> frozenset[tuple[str, str]]:
    if not ctx.paths.efficacy_report.exists():
        return frozenset()
    body = json.loads(ctx.paths.efficacy_report.read_text(encoding="utf-8"))
    out = set()
    for key in body.get("excluded-cells", []):
        attribute, code = key.split("/", 1)
        out.add((attribute, code))
    return frozenset(out)


def stage_probe(
    ctx: RunContext,
    probe_path: str | None = None,
    concepts: Sequence[str] = (),
    attributes: Sequence[str] = (),
) -> int:
    """Per-cell concept deltas over accepted pairs, with confidence intervals."""
    state = ctx.manifest.state
    accepted: dict[tuple[str, str], list[tuple[str, str]]] = {}
    for face_id, verdict in sorted(state.verdicts.items()):
        if not verdict.accepted:
            continue
        face = state.faces[face_id]
        cell = (face.applied_attribute or "", state.demographic_of_face(face_id))
        parent = state.faces[face.parent_face_id or ""]
        accepted.setdefault(cell, []).append((parent.image_ref, face.image_ref))

    if probe_path is not None:
        spec = stats.load_probe_spec(probe_path)
    else:
        if not concepts:
            raise ConfigError("probe needs probe.json or --concepts")
        attrs = tuple(attributes) if attributes else tuple(sorted({a for a, _ in accepted}))
        spec = stats.ProbeSpec(
            rows=tuple((a, c) for a in attrs for c in concepts),
            confidence_level=ctx.config.probe.confidence_level,
        )
    excluded = frozenset(spec.excluded_cells | _excluded_cells_from_report(ctx))

    cell_stats: list[stats.CellStat] = []
    dropped_total = 0
    for attribute, concept in spec.rows:
        for code in DEMOGRAPHIC_CODES:
            cell = (attribute, code)
            if cell in excluded:
                continue  # rendered as missing
            pairs = accepted.get(cell, [])
            deltas, dropped = stats.concept_deltas(pairs, concept, ctx.backend)
            dropped_total += dropped
            cell_stats.append(stats.make_cell_stat(attribute, code, concept, deltas, spec.confidence_level))

    ctx.paths.probe_stats.write_text(
        json.dumps(
            {"confidence-level": spec.confidence_level, "stats": stats.stats_to_json(cell_stats)},
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    markdown = stats.build_report(cell_stats, "markdown")
    (ctx.paths.root / "report.md").write_text(markdown, encoding="utf-8")
    (ctx.paths.root / "report.csv").write_text(stats.build_report(cell_stats, "csv"), encoding="utf-8")
    print(markdown, end="")
    cell_records = []
    for s in cell_stats:
        record = CellReport(
            attribute=s.attribute,
            demographic=s.demographic,
            concept=s.concept,
            n=s.n,
            mean_delta=s.mean_delta,
            ci_half_width=s.ci_half_width,
        )
        if state.cell_reports.get((s.attribute, s.demographic, s.concept)) != record:
            cell_records.append(record)
    if cell_records:
        ctx.manifest.append_many(cell_records)
    if dropped_total:
        print(f"probe: dropped {dropped_total} pairs due to backend errors", file=sys.stderr)
        return 1
    return 0


def stage_report(ctx: RunContext, fmt: str = "markdown") -> int:
    if not ctx.paths.probe_stats.exists():
        raise ConfigError("no probe_stats.json in the run directory; run probe first")
    body = json.loads(ctx.paths.probe_stats.read_text(encoding="utf-8"))
    cell_stats = stats.stats_from_json(body["stats"])
    print(stats.build_report(cell_stats, fmt), end="")
    return 0


def stage_tune(ctx: RunContext, attribute: str, scales: Sequence[float]) -> int:
    """Run a small edit-strength grid and write candidate registries for
    human selection."""
    registry = ctx.registry()
    jobs, candidates = genplan.tune_grid(
        ctx.manifest.state, attribute, scales, registry, seed=ctx.config.stage_seed("tune")
    )
    if not jobs:
        raise ConfigError("tune needs source faces in the manifest (run generate first)")
    tune_root = ctx.paths.root / "tune" / attribute
    tune_root.mkdir(parents=True, exist_ok=True)
    store = ImageStore(tune_root / "images")
    results = []
    failures = 0
    for job in jobs:
        try:
            ref = ctx.backend.edit(
                EditRequest(job.parent.image_ref, job.attribute, job.hyperparams, job.seed)
            )
            store.put(ctx.backend.fetch_image(ref))
            results.append(
                {
                    "parent-face-id": job.parent.face_id,
                    "attribute": job.attribute,
                    "hyperparams": dict(job.hyperparams),
                    "image-ref": ref,
                }
            )
        except DomainError as exc:
            failures += 1
            print(f"  tune job failed for {job.parent.face_id}: {exc}", file=sys.stderr)
    (tune_root / "grid.json").write_text(json.dumps(results, indent=2) + "\n", encoding="utf-8")
    for scale, candidate in candidates.items():
        genplan.save_registry(candidate, tune_root / f"hyperparams_candidate_{scale:g}.json")
    print(f"tune: {len(results)} edits across {len(candidates)} scales -> {tune_root}")
    return 0 if failures == 0 else 1


def stage_validate_identity(ctx: RunContext, checklist: str) -> int:
    """Set identity-validated flags from a human checklist file.

    Lines are either ``identity-id`` (validated) or ``identity-id,false``.
    """
    state = ctx.manifest.state
    unknown = 0
    updates: list[Identity] = []
    for raw in Path(checklist).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "," in line:
            identity_id, flag = (part.strip() for part in line.split(",", 1))
            validated = flag.lower() in ("true", "1", "yes")
        else:
            identity_id, validated = line, True
        identity = state.identities.get(identity_id)
        if identity is None:
            unknown += 1
            print(f"  unknown identity: {identity_id}", file=sys.stderr)
            continue
        if identity.identity_validated != validated:
            updates.append(
                Identity(
                    identity_id=identity.identity_id,
                    display_name=identity.display_name,
                    demographic=identity.demographic,
                    celebrity=identity.celebrity,
                    identity_validated=validated,
                )
            )
    if updates:
        ctx.manifest.append_many(updates)
    print(f"validate-identity: updated {len(updates)} identities")
    return 0 if unknown == 0 else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cforge",
        description="Plan, generate, filter, and probe counterfactual face datasets.",
    )
    parser.add_argument("--run", default="run/default", help="run directory (default: run/default)")
    parser.add_argument("--config", default=None, help="engine config JSON file")
    parser.add_argument("--mock", action="store_true", help="use the deterministic in-process backend")
    parser.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    parser.add_argument("--jobs", type=int, default=1, help="max concurrent backend requests")
    parser.add_argument("--backend-url", default=None, help="backend base URL (overrides config/env)")
    parser.add_argument(
        "--lenient-manifest", action="store_true", help="ignore unknown fields when reading the manifest"
    )

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="report pending source/edit job counts")
    p.add_argument("--out", default=None, help="also write the job plan as JSON")

    p = sub.add_parser("generate", help="generate source faces")
    p.add_argument(
        "--no-assume-validated",
        action="store_true",
        help="leave mock-run identities unvalidated (default validates them)",
    )

    sub.add_parser("edit", help="apply attribute edits to all source faces")

    p = sub.add_parser("detect", help="run attribute and age detection on candidate pairs")
    p.add_argument("--only-nondistorted", action="store_true", help="skip candidates not yet classified clean")
    p.add_argument(
        "--single-attribute",
        default=None,
        metavar="ATTR",
        help="query one attribute per pair and write a side report (experiment mode)",
    )

    p = sub.add_parser("calibrate", help="train the distortion classifier and calibrate thresholds")
    p.add_argument("--labels", default=None, help="distortion survey CSV for threshold labels")

    sub.add_parser("filter", help="classify distortion and apply the counterfactual rules")

    p = sub.add_parser("sample-for-survey", help="sample accepted pairs for annotation")
    p.add_argument("--out", required=True)
    p.add_argument("--per-cell", type=int, default=5)

    p = sub.add_parser("ingest-survey", help="ingest an annotation export")
    p.add_argument("path")
    p.add_argument("--schema", choices=["distortion", "attribute"], required=True)

    p = sub.add_parser("efficacy", help="compute pipeline efficacy from ingested responses")
    p.add_argument("--distorted-ids", default=None, help="file of face-ids removed as distorted")

    p = sub.add_parser("probe", help="concept-score deltas per cell with confidence intervals")
    p.add_argument("--spec", default=None, help="probe.json spec file")
    p.add_argument("--concepts", default=None, help="comma-separated concept list")
    p.add_argument("--attributes", default=None, help="comma-separated attribute list (with --concepts)")

    p = sub.add_parser("report", help="re-render the probe report")
    p.add_argument("--format", choices=["markdown", "csv"], default="markdown")

    p = sub.add_parser("tune", help="run an edit-strength grid for one attribute")
    p.add_argument("--attribute", required=True)
    p.add_argument("--scales", default="0.5,1.0,1.5", help="comma-separated strength multipliers")

    p = sub.add_parser("validate-identity", help="apply a human identity-validation checklist")
    p.add_argument("checklist")

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides: dict[str, Any] = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.backend_url is not None:
            overrides["backend_url"] = args.backend_url
        config = load_config(args.config, **overrides)
        ctx = open_context(
            args.run,
            config,
            mock=args.mock,
            jobs=max(1, args.jobs),
            strict=not args.lenient_manifest,
        )
    except (ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "plan":
            return stage_plan(ctx, out=args.out)
        if args.command == "generate":
            assume = None if not args.no_assume_validated else False
            return stage_generate(ctx, assume_validated=assume)
        if args.command == "edit":
            return stage_edit(ctx)
        if args.command == "detect":
            if args.single_attribute:
                return stage_detect_single(ctx, args.single_attribute)
            return stage_detect(ctx, only_nondistorted=args.only_nondistorted)
        if args.command == "calibrate":
            return stage_calibrate(ctx, labels_csv=args.labels)
        if args.command == "filter":
            return stage_filter(ctx)
        if args.command == "sample-for-survey":
            return stage_sample_for_survey(ctx, args.out, per_cell=args.per_cell)
        if args.command == "ingest-survey":
            return stage_ingest_survey(ctx, args.path, args.schema)
        if args.command == "efficacy":
            return stage_efficacy(ctx, distorted_ids=args.distorted_ids)
        if args.command == "probe":
            concepts = [c.strip() for c in (args.concepts or "").split(",") if c.strip()]
            attributes = [a.strip() for a in (args.attributes or "").split(",") if a.strip()]
            return stage_probe(ctx, probe_path=args.spec, concepts=concepts, attributes=attributes)
        if args.command == "report":
            return stage_report(ctx, fmt=args.format)
        if args.command == "tune":
            scales = [float(s) for s in args.scales.split(",") if s.strip()]
            return stage_tune(ctx, args.attribute, scales)
        if args.command == "validate-identity":
            return stage_validate_identity(ctx, args.checklist)
        parser.error(f"unknown command {args.command!r}")
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        ctx.close()


if __name__ == "__main__":
    sys.exit(main())
