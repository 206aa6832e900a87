import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from exedit.dataset import (
    EDIT_TYPES,
    Manifest,
    ManifestEntry,
    SourceRecord,
    export_review_queue,
    ingest_review,
    load_source_records,
    normalize_instruction,
    pair_by_instruction,
)


def _records(groups: dict[str, int], tmp_path=None) -> list[SourceRecord]:
    records = []
    idx = 0
    for instruction, count in groups.items():
        for _ in range(count):
            img = f"img_{idx}.png"
            edit = f"edit_{idx}.png"
            if tmp_path is not None:
                for name in (img, edit):
                    Image.fromarray(
                        np.full((32, 32, 3), (idx * 37) % 255, dtype=np.uint8)
                    ).save(tmp_path / name)
                img, edit = str(tmp_path / img), str(tmp_path / edit)
            records.append(
                SourceRecord(image=img, edited_image=edit, instruction=instruction, source_id=f"r{idx}")
            )
            idx += 1
    return records


class TestPairing:
    def test_two_records_give_two_ordered_pairs(self):
        cands = pair_by_instruction(_records({"make it red": 2}))
        assert len(cands) == 2

    def test_three_records_give_six(self):
        assert len(pair_by_instruction(_records({"make it red": 3}))) == 6

    def test_unique_instructions_give_nothing(self):
        assert pair_by_instruction(_records({"a": 1, "b": 1, "c": 1})) == []

    @given(st.lists(st.integers(min_value=1, max_value=6), min_size=1, max_size=5))
    def test_combinatorial_count(self, sizes):
        groups = {f"instr {i}": n for i, n in enumerate(sizes)}
        cands = pair_by_instruction(_records(groups))
        assert len(cands) == sum(n * (n - 1) for n in sizes)

    def test_matching_normalizes_case_and_whitespace(self):
        records = _records({"Make it  RED": 1}) + _records({"make it red": 1})
        records[1].source_id = "other"
        assert len(pair_by_instruction(records)) == 2

    def test_exemplar_and_test_roles_distinct(self):
        for cand in pair_by_instruction(_records({"i": 3})):
            assert cand.exemplar_src != cand.test_src

    def test_ids_stable_across_runs(self):
        a = pair_by_instruction(_records({"i": 3}))
        b = pair_by_instruction(_records({"i": 3}))
        assert [c.id for c in a] == [c.id for c in b]


class TestReviewQueue:
    def test_export_creates_sheet_and_row_per_candidate(self, tmp_path):
        cands = pair_by_instruction(_records({"paint it blue": 2}, tmp_path))
        csv_path = export_review_queue(cands, tmp_path / "review")
        rows = list(csv.DictReader(open(csv_path)))
        assert len(rows) == 2
        assert set(rows[0]) == {"id", "exemplar_src", "test_src", "decision", "edit_type", "notes"}
        sheets = list((tmp_path / "review" / "sheets").glob("*.png"))
        assert len(sheets) == 2

    def test_contact_sheet_geometry(self, tmp_path):
        cands = pair_by_instruction(_records({"x": 2}, tmp_path))
        export_review_queue(cands, tmp_path / "review")
        sheet = Image.open(tmp_path / "review" / "sheets" / f"{cands[0].id}.png")
        assert sheet.size == (1024, 1024)

    def test_reexport_is_idempotent(self, tmp_path):
        cands = pair_by_instruction(_records({"x": 2}, tmp_path))
        p1 = export_review_queue(cands, tmp_path / "review")
        first = p1.read_text()
        p2 = export_review_queue(cands, tmp_path / "review")
        assert p2.read_text() == first


class TestIngest:
    def _filled_review(self, tmp_path, decisions):
        cands = pair_by_instruction(_records({"instr": 3}, tmp_path))
        csv_path = export_review_queue(cands, tmp_path / "review")
        rows = list(csv.DictReader(open(csv_path)))
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=rows[0].keys())
            writer.writeheader()
            for row, (decision, edit_type) in zip(rows, decisions):
                row["decision"] = decision
                row["edit_type"] = edit_type
                writer.writerow(row)
        return csv_path

    def test_accepted_rows_become_entries(self, tmp_path):
        csv_path = self._filled_review(
            tmp_path,
            [("accept", "global_style"), ("accept", "motion"), ("reject", ""), ("", ""), ("", ""), ("", "")],
        )
        manifest, skipped = ingest_review(csv_path)
        assert manifest.total == 2
        assert skipped == []
        assert manifest.counts["global_style"] == 1 and manifest.counts["motion"] == 1

    def test_unknown_edit_type_skipped_and_reported(self, tmp_path):
        csv_path = self._filled_review(
            tmp_path, [("accept", "weird_type")] + [("", "")] * 5
        )
        manifest, skipped = ingest_review(csv_path)
        assert manifest.total == 0
        assert len(skipped) == 1 and "weird_type" in skipped[0]["reason"]

    def test_counts_sum_to_total(self, tmp_path):
        csv_path = self._filled_review(
            tmp_path,
            [("accept", "global_style"), ("accept", "global_style"), ("accept", "background")] + [("", "")] * 3,
        )
        manifest, _ = ingest_review(csv_path)
        assert sum(manifest.counts.values()) == manifest.total == 3
        assert set(manifest.counts) == set(EDIT_TYPES)


class TestManifest:
    def _manifest(self):
        m = Manifest()
        for i, et in enumerate(EDIT_TYPES):
            m.entries.append(
                ManifestEntry(id=f"e{i}", x="a.png", x_edit="b.png", y="c.png", y_edit="d.png", edit_type=et)
            )
        return m

    def test_round_trip_structural_equality(self, tmp_path):
        m = self._manifest()
        m.save(tmp_path / "m.json")
        back = Manifest.load(tmp_path / "m.json")
        assert back.version == m.version
        assert [vars(e) for e in back.entries] == [vars(e) for e in m.entries]
        assert back.counts == m.counts

    def test_counts_cover_full_taxonomy(self):
        m = self._manifest()
        assert list(m.counts) == list(EDIT_TYPES)
        assert all(v == 1 for v in m.counts.values())

    def test_saved_json_records_counts_and_total(self, tmp_path):
        m = self._manifest()
        m.save(tmp_path / "m.json")
        payload = json.loads((tmp_path / "m.json").read_text())
        assert payload["total"] == 6
        assert sum(payload["counts"].values()) == payload["total"]

    def test_relative_paths_resolve_against_manifest_dir(self, tmp_path):
        m = self._manifest()
        m.save(tmp_path / "m.json")
        back = Manifest.load(tmp_path / "m.json")
        assert back.resolve("a.png") == tmp_path / "a.png"

    def test_content_hash_tracks_entries(self, tmp_path):
        m = self._manifest()
        h1 = m.content_hash()
        m.entries.pop()
        assert m.content_hash() != h1


def test_load_source_records(tmp_path):
    payload = [
        {"image": "a.png", "edited_image": "b.png", "instruction": "tint it", "source_id": "s0"},
    ]
    path = tmp_path / "records.json"
    path.write_text(json.dumps(payload))
    records = load_source_records(path)
    assert records[0].instruction == "tint it"


def test_empty_instruction_rejected():
    with pytest.raises(ValueError):
        SourceRecord(image="a", edited_image="b", instruction="", source_id="s")


def test_normalize_instruction():
    assert normalize_instruction("  Make   IT red ") == "make it red"
