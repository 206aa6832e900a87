"""Curation tooling: pair records that share an edit instruction into
exemplar/test quadruples, export a human review queue, and manage the
evaluation manifest.

Acceptance stays a human judgment. The tools here only remove clerical
friction: candidate generation is combinatorial (every ordered pair within
an instruction group), review happens on rendered contact sheets plus a
CSV, and accepted rows become versioned manifest entries.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from . import imaging

logger = logging.getLogger(__name__)

EDIT_TYPES = (
    "global_style",
    "background",
    "localized_style",
    "object_replacement",
    "motion",
    "object_insertion",
)

REVIEW_COLUMNS = ("id", "exemplar_src", "test_src", "decision", "edit_type", "notes")
MANIFEST_VERSION = 1


@dataclass
class SourceRecord:
    image: str
    edited_image: str
    instruction: str
    source_id: str

    def __post_init__(self):
        if not self.instruction:
            raise ValueError(f"record {self.source_id} has an empty instruction")


@dataclass
class CandidateQuadruple:
    id: str
    x: str
    x_edit: str
    y: str
    y_edit: str
    instruction: str
    exemplar_src: str
    test_src: str


@dataclass
class ManifestEntry:
    id: str
    x: str
    x_edit: str
    y: str
    y_edit: str
    edit_type: str
    review_status: str = "accepted"


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    version: int = MANIFEST_VERSION
    base_dir: Path | None = None  # set on load; resolves relative image paths

    @property
    def counts(self) -> dict[str, int]:
        c = {t: 0 for t in EDIT_TYPES}
        for e in self.entries:
            c[e.edit_type] = c.get(e.edit_type, 0) + 1
        return c

    @property
    def total(self) -> int:
        return len(self.entries)

    def save(self, path: str | Path) -> None:
        payload = {
            "version": self.version,
            "entries": [vars(e) for e in self.entries],
            "counts": self.counts,
            "total": self.total,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        payload = json.loads(path.read_text())
        entries = [ManifestEntry(**e) for e in payload["entries"]]
        return cls(entries=entries, version=payload["version"], base_dir=path.parent)

    def resolve(self, image_path: str) -> Path:
        p = Path(image_path)
        if not p.is_absolute() and self.base_dir is not None:
            return self.base_dir / p
        return p

    def content_hash(self) -> str:
        blob = json.dumps([vars(e) for e in self.entries], sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def normalize_instruction(text: str) -> str:
    """Exact-match key: lowercase with collapsed whitespace."""
    return " ".join(text.lower().split())


def _candidate_id(exemplar: SourceRecord, test: SourceRecord) -> str:
    blob = f"{exemplar.source_id}|{test.source_id}"
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


def pair_by_instruction(records: list[SourceRecord]) -> list[CandidateQuadruple]:
    """All ordered (exemplar, test) pairs among records sharing an instruction.

    A group of n records yields n*(n-1) candidates; ids are content-derived,
    so re-running with the same input is idempotent.
    """
    groups: dict[str, list[SourceRecord]] = defaultdict(list)
    for rec in records:
        groups[normalize_instruction(rec.instruction)].append(rec)
    candidates = []
    for key in sorted(groups):
        group = groups[key]
        if len(group) < 2:
            continue
        for exemplar in group:
            for test in group:
                if exemplar.source_id == test.source_id:
                    continue
                candidates.append(
                    CandidateQuadruple(
                        id=_candidate_id(exemplar, test),
                        x=exemplar.image,
                        x_edit=exemplar.edited_image,
                        y=test.image,
                        y_edit=test.edited_image,
                        instruction=key,
                        exemplar_src=exemplar.source_id,
                        test_src=test.source_id,
                    )
                )
    return candidates


def export_review_queue(candidates: list[CandidateQuadruple], out_dir: str | Path) -> Path:
    """Render one 2x2 contact sheet per candidate and an empty review CSV.

    Layout per sheet: exemplar pair on top (x | x_edit), test pair below
    (y | y_edit). The CSV's decision/edit_type/notes columns are left blank
    for the reviewer. A sidecar candidates.json carries the image paths so
    ingest needs only this directory.
    """
    out = Path(out_dir)
    sheets = out / "sheets"
    sheets.mkdir(parents=True, exist_ok=True)
    for cand in candidates:
        sheet = imaging.tile_2x2(
            imaging.load_work_image(cand.x),
            imaging.load_work_image(cand.x_edit),
            imaging.load_work_image(cand.y),
            imaging.load_work_image(cand.y_edit),
        )
        sheet.save(sheets / f"{cand.id}.png")
    with open(out / "review.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REVIEW_COLUMNS)
        for cand in candidates:
            writer.writerow([cand.id, cand.exemplar_src, cand.test_src, "", "", ""])
    (out / "candidates.json").write_text(
        json.dumps({c.id: vars(c) for c in candidates}, indent=2, sort_keys=True)
    )
    return out / "review.csv"


def ingest_review(
    csv_path: str | Path, candidates_path: str | Path | None = None
) -> tuple[Manifest, list[dict]]:
    """Filled review CSV -> manifest of accepted entries.

    Returns (manifest, skipped) where skipped reports rows dropped for an
    unknown edit type or a missing candidate record.
    """
    csv_path = Path(csv_path)
    if candidates_path is None:
        candidates_path = csv_path.parent / "candidates.json"
    candidates = json.loads(Path(candidates_path).read_text())
    manifest = Manifest()
    skipped: list[dict] = []
    with open(csv_path, newline="") as f:
        for row in csv.DictReader(f):
            decision = (row.get("decision") or "").strip().lower()
            if decision != "accept":
                continue
            cand = candidates.get(row["id"])
            if cand is None:
                skipped.append({"id": row["id"], "reason": "unknown candidate id"})
                logger.warning("review row %s has no candidate record; skipped", row["id"])
                continue
            edit_type = (row.get("edit_type") or "").strip()
            if edit_type not in EDIT_TYPES:
                skipped.append({"id": row["id"], "reason": f"unknown edit_type {edit_type!r}"})
                logger.warning("review row %s has unknown edit_type %r; skipped", row["id"], edit_type)
                continue
            manifest.entries.append(
                ManifestEntry(
                    id=row["id"],
                    x=cand["x"],
                    x_edit=cand["x_edit"],
                    y=cand["y"],
                    y_edit=cand["y_edit"],
                    edit_type=edit_type,
                )
            )
    return manifest, skipped


def load_source_records(path: str | Path) -> list[SourceRecord]:
    """Records file: JSON list of {image, edited_image, instruction, source_id}."""
    payload = json.loads(Path(path).read_text())
    return [SourceRecord(**r) for r in payload]
