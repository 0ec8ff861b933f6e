"""Candidate-generation planning and execution.

Planning is pure: the same config always yields the same job list, with
deterministic distinct seeds derived from (seed-base, identity, variation)
or (seed-base, parent, attribute). Execution is idempotent per job key, so
interrupted runs resume by re-planning against the manifest.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .backends import EditRequest
from .domain import (
    ATTRIBUTES,
    DEMOGRAPHIC_CODES,
    DomainError,
    FaceRecord,
    Identity,
    parse_demographic,
    require_attribute,
)
from .manifest import DatasetManifest, ImageStore, ManifestState

PROMPT_TEMPLATE = "A photo of the face of {name}"


class InsufficientNames(DomainError):
    pass


class MissingHyperparams(DomainError):
    def __init__(self, attribute: str):
        super().__init__(f"no hyperparameters registered for attribute {attribute!r}")
        self.attribute = attribute


class RegistryError(DomainError):
    pass


@dataclass(frozen=True)
class GenerationConfig:
    identities_per_demographic: int = 100
    variations_per_identity: int = 6
    attributes: tuple[str, ...] = ATTRIBUTES
    seed_base: int = 0
    name_lists: Mapping[str, Sequence[str]] | None = None  # demographic code -> names

    def __post_init__(self) -> None:
        for a in self.attributes:
            require_attribute(a)
        if self.identities_per_demographic < 1 or self.variations_per_identity < 1:
            raise DomainError("identity and variation counts must be positive")


def synthetic_names(code: str, count: int) -> list[str]:
    """Deterministic placeholder display names for hermetic runs."""
    parse_demographic(code)
    return [f"{code} Face {i:03d}" for i in range(count)]


def load_name_lists(directory: str | Path) -> dict[str, list[str]]:
    """Read per-demographic name files ``names/<code>.txt`` (one name per line)."""
    out: dict[str, list[str]] = {}
    root = Path(directory)
    for code in DEMOGRAPHIC_CODES:
        path = root / f"{code}.txt"
        if path.exists():
            out[code] = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    return out


def _names_for(config: GenerationConfig, code: str) -> list[str]:
    if config.name_lists is None:
        return synthetic_names(code, config.identities_per_demographic)
    names = list(config.name_lists.get(code, ()))
    if len(names) < config.identities_per_demographic:
        raise InsufficientNames(
            f"{code}: need {config.identities_per_demographic} names, have {len(names)}"
        )
    return names[: config.identities_per_demographic]


def _derive_seed(seed_base: int, *parts: Any) -> int:
    data = "\x1f".join([str(seed_base), *map(str, parts)]).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little") >> 1


@dataclass(frozen=True)
class SourceJob:
    identity: Identity
    variation_index: int
    prompt: str
    seed: int

    @property
    def key(self) -> tuple[str, int]:
        return (self.identity.identity_id, self.variation_index)


@dataclass(frozen=True)
class EditJob:
    parent: FaceRecord
    attribute: str
    hyperparams: Mapping[str, float]
    seed: int

    @property
    def key(self) -> tuple[str, str]:
        return (self.parent.face_id, self.attribute)


def plan_identities(
    config: GenerationConfig,
    *,
    id_prefix: str = "",
    celebrity: bool = True,
    identity_validated: bool = False,
) -> list[Identity]:
    identities = []
    for code in DEMOGRAPHIC_CODES:
        names = _names_for(config, code)
        demographic = parse_demographic(code)
        for i in range(config.identities_per_demographic):
            identities.append(
                Identity(
                    identity_id=f"{id_prefix}{code}-{i:03d}",
                    display_name=names[i],
                    demographic=demographic,
                    celebrity=celebrity,
                    identity_validated=identity_validated,
                )
            )
    return identities


def plan_sources(config: GenerationConfig, identities: Sequence[Identity] | None = None) -> list[SourceJob]:
    """One txt2img job per (identity, variation); seeds distinct and deterministic."""
    if identities is None:
        identities = plan_identities(config)
    jobs: list[SourceJob] = []
    used_seeds: set[int] = set()
    for identity in identities:
        prompt = PROMPT_TEMPLATE.format(name=identity.display_name)
        for variation in range(config.variations_per_identity):
            seed = _derive_seed(config.seed_base, "source", identity.identity_id, variation)
            while seed in used_seeds:  # hash collisions: bump deterministically
                seed += 1
            used_seeds.add(seed)
            jobs.append(SourceJob(identity, variation, prompt, seed))
    return jobs


@dataclass(frozen=True)
class HyperparamRegistry:
    """Per-attribute edit settings: `normal` for candidate generation and
    `distortion` (strictly larger magnitudes) for detector-training edits."""

    per_attribute: Mapping[str, Mapping[str, Mapping[str, float]]]

    def normal(self, attribute: str) -> dict[str, float]:
        entry = self.per_attribute.get(attribute, {})
        if "normal" not in entry:
            raise MissingHyperparams(attribute)
        return dict(entry["normal"])

    def distortion(self, attribute: str) -> dict[str, float]:
        entry = self.per_attribute.get(attribute, {})
        if "distortion" not in entry:
            raise MissingHyperparams(attribute)
        return dict(entry["distortion"])

    def validate(self, attributes: Iterable[str] = ATTRIBUTES) -> None:
        for attribute in attributes:
            normal = self.normal(attribute)
            entry = self.per_attribute.get(attribute, {})
            distortion = entry.get("distortion")
            if distortion is None:
                continue
            for key, value in distortion.items():
                if key in normal and abs(value) <= abs(normal[key]):
                    raise RegistryError(
                        f"{attribute}.distortion.{key} must have larger magnitude than normal"
                    )


# Placeholder strengths; real deployments tune these per attribute.
_DEFAULT_NORMAL = {"edit_strength": 5.0, "guidance": 7.0, "warmup": 10.0}
_DEFAULT_DISTORTION = {"edit_strength": 15.0, "guidance": 21.0, "warmup": 30.0}


def default_registry(attributes: Sequence[str] = ATTRIBUTES) -> HyperparamRegistry:
    return HyperparamRegistry(
        {
            a: {"normal": dict(_DEFAULT_NORMAL), "distortion": dict(_DEFAULT_DISTORTION)}
            for a in attributes
        }
    )


def load_registry(path: str | Path) -> HyperparamRegistry:
    body = json.loads(Path(path).read_text(encoding="utf-8"))
    registry = HyperparamRegistry(body)
    for attribute in body:
        require_attribute(attribute)
    return registry


def save_registry(registry: HyperparamRegistry, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps({a: dict(v) for a, v in registry.per_attribute.items()}, indent=2, sort_keys=True)
        + "\n",
        encoding="utf-8",
    )


def plan_edits(
    state: ManifestState,
    config: GenerationConfig,
    registry: HyperparamRegistry,
    *,
    distortion_params: bool = False,
    variation_limit: int | None = None,
) -> list[EditJob]:
    """One edit job per (source face, attribute), skipping completed pairs.

    ``distortion_params`` switches to the registry's over-edit settings (for
    detector-training runs); ``variation_limit`` restricts to the first k
    variations of each identity.
    """
    params_by_attribute = {
        attribute: (
            registry.distortion(attribute) if distortion_params else registry.normal(attribute)
        )
        for attribute in config.attributes
    }
    jobs: list[EditJob] = []
    sources = sorted(state.sources(), key=lambda f: f.face_id)
    for source in sources:
        if variation_limit is not None and source.variation_index >= variation_limit:
            continue
        for attribute in config.attributes:
            if (source.face_id, attribute) in state.edit_keys:
                continue  # already completed; resume skips it
            seed = _derive_seed(config.seed_base, "edit", source.face_id, attribute, distortion_params)
            jobs.append(EditJob(source, attribute, params_by_attribute[attribute], seed))
    return jobs


@dataclass
class RunReport:
    completed: int = 0
    skipped: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)  # (job key, error)

    @property
    def ok(self) -> bool:
        return not self.failures


def _source_face_id(job: SourceJob) -> str:
    return f"{job.identity.identity_id}-v{job.variation_index}"


def _edit_face_id(job: EditJob) -> str:
    return f"{job.parent.face_id}-{job.attribute}"


def run_plan(
    jobs: Sequence[SourceJob | EditJob],
    backend: Any,
    manifest: DatasetManifest,
    image_store: ImageStore,
    *,
    max_workers: int = 1,
) -> RunReport:
    """Execute jobs against the backend, appending one FaceRecord per success.

    Jobs already present in the manifest are skipped. A failing job is
    recorded and never aborts the batch. Appends are serialized by the
    manifest writer; jobs are independent, so execution order does not
    affect the final replayed state.
    """
    report = RunReport()
    report_lock = threading.Lock()

    def execute(job: SourceJob | EditJob) -> None:
        state = manifest.state
        if isinstance(job, SourceJob):
            if job.key in state.source_keys:
                with report_lock:
                    report.skipped += 1
                return
            ref = backend.txt2img(job.prompt, job.seed)
            data = backend.fetch_image(ref)
            stored = image_store.put(data)
            if stored != ref:
                raise DomainError(f"backend digest mismatch: {ref} vs {stored}")
            record = FaceRecord(
                face_id=_source_face_id(job),
                identity_id=job.identity.identity_id,
                variation_index=job.variation_index,
                kind="source",
                image_ref=ref,
                gen_params={"seed": job.seed, "prompt": job.prompt},
            )
        else:
            if job.key in state.edit_keys:
                with report_lock:
                    report.skipped += 1
                return
            ref = backend.edit(
                EditRequest(
                    parent_image_ref=job.parent.image_ref,
                    attribute=job.attribute,
                    hyperparams=job.hyperparams,
                    seed=job.seed,
                )
            )
            data = backend.fetch_image(ref)
            stored = image_store.put(data)
            if stored != ref:
                raise DomainError(f"backend digest mismatch: {ref} vs {stored}")
            record = FaceRecord(
                face_id=_edit_face_id(job),
                identity_id=job.parent.identity_id,
                variation_index=job.parent.variation_index,
                kind="transformed",
                image_ref=ref,
                gen_params={"seed": job.seed, "hyperparams": dict(job.hyperparams)},
                applied_attribute=job.attribute,
                parent_face_id=job.parent.face_id,
            )
        manifest.append(record)
        with report_lock:
            report.completed += 1

    def run_one(job: SourceJob | EditJob) -> None:
        try:
            execute(job)
        except Exception as exc:  # recorded, not raised: other jobs continue
            with report_lock:
                report.failures.append((str(job.key), f"{type(exc).__name__}: {exc}"))

    if max_workers <= 1:
        for job in jobs:
            run_one(job)
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as pool:
            list(pool.map(run_one, jobs))
    return report


@dataclass(frozen=True)
class TrainingPlanConfig:
    """Detector-training data recipe: non-celebrity identities, clean source
    variations, and over-edited faces across all attributes."""

    identities_per_demographic: int = 10
    clean_variations: int = 3
    distortion_variations: int = 3
    attributes: tuple[str, ...] = ATTRIBUTES
    seed_base: int = 0


def training_generation_config(cfg: TrainingPlanConfig) -> GenerationConfig:
    return GenerationConfig(
        identities_per_demographic=cfg.identities_per_demographic,
        variations_per_identity=max(cfg.clean_variations, cfg.distortion_variations),
        attributes=cfg.attributes,
        seed_base=_derive_seed(cfg.seed_base, "training"),
    )


def plan_training_identities(cfg: TrainingPlanConfig) -> list[Identity]:
    return plan_identities(
        training_generation_config(cfg),
        id_prefix="train-",
        celebrity=False,
        identity_validated=True,
    )


def tune_grid(
    state: ManifestState,
    attribute: str,
    scales: Sequence[float],
    registry: HyperparamRegistry,
    *,
    seed: int = 0,
) -> tuple[list[EditJob], dict[float, HyperparamRegistry]]:
    """Small per-attribute grid over edit strengths: one randomly selected
    source face per demographic, one job per scale. Returns the jobs plus a
    candidate registry per scale for human selection; no automatic objective
    is imposed."""
    require_attribute(attribute)
    base = registry.normal(attribute)
    import random

    rng = random.Random(seed)
    picks: list[FaceRecord] = []
    by_code: dict[str, list[FaceRecord]] = {}
    for face in sorted(state.sources(), key=lambda f: f.face_id):
        code = state.identities[face.identity_id].demographic.code
        by_code.setdefault(code, []).append(face)
    for code in DEMOGRAPHIC_CODES:
        faces = by_code.get(code)
        if faces:
            picks.append(rng.choice(faces))
    jobs: list[EditJob] = []
    candidates: dict[float, HyperparamRegistry] = {}
    for scale in scales:
        params = {k: v * scale for k, v in base.items()}
        entry = {a: dict(v) for a, v in registry.per_attribute.items()}
        entry[attribute] = {**entry.get(attribute, {}), "normal": params}
        candidates[scale] = HyperparamRegistry(entry)
        for face in picks:
            jobs.append(
                EditJob(
                    parent=face,
                    attribute=attribute,
                    hyperparams=params,
                    seed=_derive_seed(seed, "tune", face.face_id, attribute, scale),
                )
            )
    return jobs, candidates
