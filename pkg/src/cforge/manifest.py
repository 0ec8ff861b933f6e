"""Append-only JSONL dataset manifest with replayable state.

One self-describing record per line. A single writer appends; appends are
durable (flushed and fsynced) before returning. Readers replay committed
prefixes. A torn final line (partial write from a crash) is ignored on load
and truncated before the next append; a parse failure anywhere else is
corruption and raises.
"""

from __future__ import annotations

import json
import os
import threading
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator

from .domain import (
    CellReport,
    DetectionReport,
    DomainError,
    FaceRecord,
    FilterVerdict,
    Identity,
    Record,
    SurveyLabel,
    image_digest,
    record_from_json,
    record_to_json,
)


class ManifestError(DomainError):
    pass


class DanglingReference(ManifestError):
    pass


class DuplicateId(ManifestError):
    pass


class ManifestCorrupt(ManifestError):
    pass


class ManifestState:
    """Replayed view of a manifest: latest record per key plus integrity indexes."""

    def __init__(self) -> None:
        self.identities: dict[str, Identity] = {}
        self.faces: dict[str, FaceRecord] = {}
        self.detections: dict[str, DetectionReport] = {}
        self.verdicts: dict[str, FilterVerdict] = {}
        self.survey_labels: dict[tuple[str, str], SurveyLabel] = {}
        self.cell_reports: dict[tuple[str, str, str | None], CellReport] = {}
        self.source_keys: dict[tuple[str, int], str] = {}
        self.edit_keys: dict[tuple[str, str], str] = {}
        self.next_seq: int = 0

    def check(self, record: Record) -> None:
        """Raise unless `record` may be appended to this state."""
        if isinstance(record, Identity):
            # Re-emission updates flags (e.g. identity_validated); the core
            # fields must not silently change.
            prev = self.identities.get(record.identity_id)
            if prev is not None and (
                prev.display_name != record.display_name
                or prev.demographic != record.demographic
                or prev.celebrity != record.celebrity
            ):
                raise DuplicateId(f"identity re-emitted with different fields: {record.identity_id}")
        elif isinstance(record, FaceRecord):
            if record.face_id in self.faces:
                raise DuplicateId(f"face-id already present: {record.face_id}")
            if record.identity_id not in self.identities:
                raise DanglingReference(f"face references unknown identity: {record.identity_id}")
            if record.kind == "source":
                key = (record.identity_id, record.variation_index)
                if key in self.source_keys:
                    raise DuplicateId(f"duplicate source for identity/variation: {key}")
            else:
                parent = self.faces.get(record.parent_face_id or "")
                if parent is None:
                    raise DanglingReference(f"unknown parent face: {record.parent_face_id}")
                if parent.kind != "source":
                    raise ManifestError("parent of a transformed face must be a source face")
                if parent.identity_id != record.identity_id:
                    raise ManifestError("transformed face must share its parent's identity")
                ekey = (record.parent_face_id, record.applied_attribute)
                if ekey in self.edit_keys:
                    raise DuplicateId(f"duplicate (parent, attribute) edit: {ekey}")
        elif isinstance(record, DetectionReport):
            if record.face_id not in self.faces:
                raise DanglingReference(f"detection for unknown face: {record.face_id}")
        elif isinstance(record, FilterVerdict):
            if record.transformed_face_id not in self.faces:
                raise DanglingReference(f"verdict for unknown face: {record.transformed_face_id}")
        elif isinstance(record, SurveyLabel):
            if record.face_id not in self.faces:
                raise DanglingReference(f"survey label for unknown face: {record.face_id}")
        elif isinstance(record, CellReport):
            pass
        else:
            raise ManifestError(f"unsupported record type: {type(record).__name__}")

    def apply(self, record: Record) -> None:
        if isinstance(record, Identity):
            self.identities[record.identity_id] = record
        elif isinstance(record, FaceRecord):
            self.faces[record.face_id] = record
            if record.kind == "source":
                self.source_keys[(record.identity_id, record.variation_index)] = record.face_id
            else:
                self.edit_keys[(record.parent_face_id, record.applied_attribute)] = record.face_id
        elif isinstance(record, DetectionReport):
            prev = self.detections.get(record.face_id)
            if prev is not None:
                # Later stages may fill fields earlier stages left null.
                record = DetectionReport(
                    face_id=record.face_id,
                    attributes=record.attributes if record.attributes is not None else prev.attributes,
                    distortion_score=record.distortion_score
                    if record.distortion_score is not None
                    else prev.distortion_score,
                    distorted=record.distorted if record.distorted is not None else prev.distorted,
                    detector_versions={**prev.detector_versions, **record.detector_versions},
                )
            self.detections[record.face_id] = record
        elif isinstance(record, FilterVerdict):
            self.verdicts[record.transformed_face_id] = record
        elif isinstance(record, SurveyLabel):
            self.survey_labels[(record.survey, record.face_id)] = record
        elif isinstance(record, CellReport):
            self.cell_reports[(record.attribute, record.demographic, record.concept)] = record
        self.next_seq += 1

    # -- queries ------------------------------------------------------------

    def sources(self) -> list[FaceRecord]:
        return [f for f in self.faces.values() if f.kind == "source"]

    def candidates(self) -> list[FaceRecord]:
        return [f for f in self.faces.values() if f.kind == "transformed"]

    def demographic_of_face(self, face_id: str) -> str:
        face = self.faces[face_id]
        return self.identities[face.identity_id].demographic.code

    def snapshot(self) -> dict[str, Any]:
        """Canonical, sequence-free view of the state (for equivalence checks)."""

        def dump(records: Iterable[Record]) -> list[dict[str, Any]]:
            return sorted((record_to_json(r) for r in records), key=lambda d: json.dumps(d, sort_keys=True))

        return {
            "identities": dump(self.identities.values()),
            "faces": dump(self.faces.values()),
            "detections": dump(self.detections.values()),
            "verdicts": dump(self.verdicts.values()),
            "survey-labels": dump(self.survey_labels.values()),
            "cell-reports": dump(self.cell_reports.values()),
        }


class DatasetManifest:
    """Single-writer append-only record log, optionally backed by a file.

    With ``path=None`` the manifest lives in memory only (tests, dry runs).
    """

    def __init__(self, path: str | os.PathLike[str] | None = None, *, strict: bool = True):
        self.path = Path(path) if path is not None else None
        self.strict = strict
        self.state = ManifestState()
        self._records: list[Record] = []
        self._lock = threading.Lock()
        self._fh = None
        if self.path is not None:
            self._load_existing()
            self._fh = open(self.path, "ab")

    # -- loading ------------------------------------------------------------

    def _load_existing(self) -> None:
        assert self.path is not None
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            return
        good_end = 0
        with open(self.path, "rb") as fh:
            data = fh.read()
        lines = data.split(b"\n")
        # A trailing newline yields one empty final chunk; drop it.
        tail_complete = data.endswith(b"\n")
        chunks = lines[:-1] if tail_complete or lines[-1] == b"" else lines
        torn_tail = not tail_complete and lines[-1] != b""
        for i, raw in enumerate(chunks):
            is_last = i == len(chunks) - 1
            try:
                body = json.loads(raw.decode("utf-8"))
                record = record_from_json(body, strict=self.strict)
            except Exception as exc:
                if is_last and torn_tail:
                    break  # partial write from a crash; truncated below
                raise ManifestCorrupt(f"{self.path}:{i + 1}: {exc}") from exc
            self.state.check(record)
            self.state.apply(record)
            self._records.append(record)
            good_end += len(raw) + 1
        if good_end != len(data):
            with open(self.path, "r+b") as fh:
                fh.truncate(good_end)

    @classmethod
    def load(cls, path: str | os.PathLike[str], *, strict: bool = True) -> "DatasetManifest":
        return cls(path, strict=strict)

    # -- appending ----------------------------------------------------------

    def append(self, record: Record) -> int:
        """Append one record; durable before return. Returns its sequence number."""
        return self.append_many([record])[0]

    def append_many(self, records: list[Record]) -> list[int]:
        """Append a batch atomically enough for resume: one flush+fsync at the end."""
        with self._lock:
            staged: list[tuple[Record, bytes]] = []
            # Validate the whole batch against a trial state before writing.
            for record in records:
                self.state.check(record)
                self.state.apply(record)
                seq = self.state.next_seq - 1
                body = record_to_json(record)
                body["seq"] = seq
                staged.append((record, (json.dumps(body, sort_keys=False) + "\n").encode("utf-8")))
            seqs = [self.state.next_seq - len(records) + i for i in range(len(records))]
            for record, _ in staged:
                self._records.append(record)
            if self._fh is not None:
                for _, line in staged:
                    self._fh.write(line)
                self._fh.flush()
                os.fsync(self._fh.fileno())
            self._post_append(len(records))
            return seqs

    def _post_append(self, n: int) -> None:
        """Hook for fault-injection tests; no-op in production."""

    # -- reading ------------------------------------------------------------

    def records(self) -> list[Record]:
        return list(self._records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self._records)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "DatasetManifest":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def replay(records: Iterable[Record]) -> ManifestState:
    """Fold records into a state, enforcing the same integrity rules as append."""
    state = ManifestState()
    for record in records:
        state.check(record)
        state.apply(record)
    return state


class ImageStore:
    """Content-addressed blob store: ``<digest>.png`` under one directory."""

    def __init__(self, root: str | os.PathLike[str]):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path_for(self, ref: str) -> Path:
        return self.root / f"{ref}.png"

    def put(self, data: bytes) -> str:
        ref = image_digest(data)
        target = self.path_for(ref)
        if not target.exists():
            tmp = target.with_suffix(".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, target)
        return ref

    def get(self, ref: str) -> bytes:
        path = self.path_for(ref)
        if not path.exists():
            raise KeyError(f"image not in store: {ref}")
        return path.read_bytes()

    def has(self, ref: str) -> bool:
        return self.path_for(ref).exists()

    def verify(self, ref: str) -> bool:
        """True iff the stored bytes hash back to their name."""
        try:
            return image_digest(self.get(ref)) == ref
        except KeyError:
            return False
