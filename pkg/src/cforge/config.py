"""Engine configuration: one JSON file, flag overrides, sane defaults.

All randomness flows from a single seed; stage-specific seeds are derived
from it with stable labels.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from .backends import BackendEndpoint, RetryPolicy
from .domain import ATTRIBUTES, DomainError, require_attribute
from .genplan import GenerationConfig, TrainingPlanConfig
from .filtering import FilterConfig
from .matrix import TransitionMatrix, default_matrix, load_matrix

ENV_BACKEND_URL = "CFORGE_BACKEND_URL"


class ConfigError(DomainError):
    pass


@dataclass(frozen=True)
class CalibrationSettings:
    recall_target: float = 0.97
    reg_strength: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    # Mock-label sampling per (attribute, demographic); 0 labels every
    # candidate (the latent oracle costs nothing). Set to 9 to mimic the
    # per-cell scale of a real annotation round.
    labels_per_cell: int = 0


@dataclass(frozen=True)
class ProbeSettings:
    confidence_level: float = 0.999
    exclusion_threshold: float = 0.5


@dataclass(frozen=True)
class MockSettings:
    edit_success_rate: float = 0.9
    side_effect_rate: float = 0.1
    distortion_rate: float = 0.1
    source_attribute_rate: float = 0.08


@dataclass(frozen=True)
class EngineConfig:
    seed: int = 0
    embedding_dim: int = 768
    backend: BackendEndpoint = field(default_factory=BackendEndpoint)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    training: TrainingPlanConfig = field(default_factory=TrainingPlanConfig)
    calibration: CalibrationSettings = field(default_factory=CalibrationSettings)
    filter: FilterConfig = field(default_factory=FilterConfig)
    probe: ProbeSettings = field(default_factory=ProbeSettings)
    mock: MockSettings = field(default_factory=MockSettings)
    hyperparams_path: str | None = None
    matrix_path: str | None = None
    names_dir: str | None = None
    include_unvalidated: bool = False

    def stage_seed(self, label: str) -> int:
        data = f"{self.seed}\x1f{label}".encode("utf-8")
        return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little") >> 1


def _get(section: Mapping[str, Any], key: str, default: Any) -> Any:
    return section.get(key, default)


def _require_file(path: str | None, what: str) -> None:
    if path is not None and not Path(path).exists():
        raise ConfigError(f"{what} does not exist: {path}")


def load_config(path: str | os.PathLike[str] | None = None, **overrides: Any) -> EngineConfig:
    """Build an EngineConfig from an optional JSON file plus overrides.

    Recognized overrides: seed, backend_url, mock (bool is handled by the
    CLI), jobs-independent settings are file-driven.
    """
    body: dict[str, Any] = {}
    if path is not None:
        try:
            body = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc

    backend_section = body.get("backend", {})
    retry_section = backend_section.get("retry", {})
    base_url = overrides.get("backend_url") or backend_section.get(
        "base-url", os.environ.get(ENV_BACKEND_URL, "")
    )
    backend = BackendEndpoint(
        base_url=base_url,
        timeout=float(_get(backend_section, "timeout", 60.0)),
        max_in_flight=int(_get(backend_section, "max-in-flight", 4)),
        retry=RetryPolicy(
            max_attempts=int(_get(retry_section, "max-attempts", 3)),
            backoff=tuple(float(x) for x in _get(retry_section, "backoff", (0.1, 0.3, 0.9))),
        ),
    )

    seed = int(overrides.get("seed", body.get("seed", 0)))

    gen_section = body.get("generation", {})
    attributes = tuple(_get(gen_section, "attributes", ATTRIBUTES))
    for a in attributes:
        require_attribute(a)
    names_dir = _get(gen_section, "names-dir", None)
    _require_file(names_dir, "names directory")
    name_lists = None
    if names_dir is not None:
        from .genplan import load_name_lists

        name_lists = load_name_lists(names_dir)
    generation = GenerationConfig(
        identities_per_demographic=int(_get(gen_section, "identities-per-demographic", 100)),
        variations_per_identity=int(_get(gen_section, "variations-per-identity", 6)),
        attributes=attributes,
        seed_base=seed,
        name_lists=name_lists,
    )

    training_section = body.get("training", {})
    training = TrainingPlanConfig(
        identities_per_demographic=int(_get(training_section, "identities-per-demographic", 10)),
        clean_variations=int(_get(training_section, "clean-variations", 3)),
        distortion_variations=int(_get(training_section, "distortion-variations", 3)),
        attributes=attributes,
        seed_base=seed,
    )

    cal_section = body.get("calibration", {})
    calibration = CalibrationSettings(
        recall_target=float(_get(cal_section, "recall-target", 0.97)),
        reg_strength=float(_get(cal_section, "reg-strength", 1e-3)),
        epochs=int(_get(cal_section, "epochs", 200)),
        batch_size=int(_get(cal_section, "batch-size", 64)),
        labels_per_cell=int(_get(cal_section, "labels-per-cell", 0)),
    )

    filter_section = body.get("filter", {})
    matrix_path = filter_section.get("matrix-path", body.get("matrix-path"))
    _require_file(matrix_path, "matrix override file")
    matrix: TransitionMatrix
    if matrix_path is not None:
        matrix = load_matrix(Path(matrix_path).read_text(encoding="utf-8"))
    else:
        matrix = default_matrix()
    filter_config = FilterConfig(
        age_drift_max=int(_get(filter_section, "age-drift-max", 10)),
        age_change_min=int(_get(filter_section, "age-change-min", 10)),
        age_floor=int(_get(filter_section, "age-floor", 18)),
        age_ceiling=int(_get(filter_section, "age-ceiling", 80)),
        matrix=matrix,
    )

    probe_section = body.get("probe", {})
    probe = ProbeSettings(
        confidence_level=float(_get(probe_section, "confidence-level", 0.999)),
        exclusion_threshold=float(_get(probe_section, "exclusion-threshold", 0.5)),
    )

    mock_section = body.get("mock", {})
    mock = MockSettings(
        edit_success_rate=float(_get(mock_section, "edit-success-rate", 0.9)),
        side_effect_rate=float(_get(mock_section, "side-effect-rate", 0.1)),
        distortion_rate=float(_get(mock_section, "distortion-rate", 0.1)),
        source_attribute_rate=float(_get(mock_section, "source-attribute-rate", 0.08)),
    )

    hyperparams_path = body.get("hyperparams-path")
    _require_file(hyperparams_path, "hyperparameter registry")

    return EngineConfig(
        seed=seed,
        embedding_dim=int(body.get("embedding-dim", 768)),
        backend=backend,
        generation=generation,
        training=training,
        calibration=calibration,
        filter=filter_config,
        probe=probe,
        mock=mock,
        hyperparams_path=hyperparams_path,
        matrix_path=matrix_path,
        names_dir=names_dir,
        include_unvalidated=bool(body.get("include-unvalidated", False)),
    )
