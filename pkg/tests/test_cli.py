import csv
import json

import numpy as np
import pytest
from PIL import Image

from exedit import imaging
from exedit.cli import main

from .conftest import natural_image, tinted


@pytest.fixture()
def triplet_paths(tmp_path):
    x = natural_image("chelsea")
    paths = {
        "x": tmp_path / "x.png",
        "xedit": tmp_path / "xedit.png",
        "y": tmp_path / "y.png",
    }
    x.save(paths["x"])
    tinted(x, (0.2, 0.0, -0.1)).save(paths["xedit"])
    natural_image("coffee").save(paths["y"])
    return paths


def _edit_argv(paths, out, extra=()):
    return [
        "edit",
        "--x", str(paths["x"]),
        "--xedit", str(paths["xedit"]),
        "--y", str(paths["y"]),
        "--out", str(out),
        "--stub",
        *extra,
    ]


class TestEditCommand:
    def test_happy_path_writes_bundle(self, triplet_paths, tmp_path, capsys):
        code = main(_edit_argv(triplet_paths, tmp_path / "out"))
        assert code == 0
        assert (tmp_path / "out" / "result.png").exists()
        assert (tmp_path / "out" / "provenance.json").exists()

    def test_missing_required_flag_exits_2(self, triplet_paths, tmp_path):
        argv = ["edit", "--x", str(triplet_paths["x"]), "--out", str(tmp_path / "o"), "--stub"]
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2

    def test_json_output_mode(self, triplet_paths, tmp_path, capsys):
        code = main(_edit_argv(triplet_paths, tmp_path / "out", ("--json",)))
        assert code == 0
        payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert "result_dir" in payload and "caption" in payload

    def test_dry_run_prints_plan_without_outputs(self, triplet_paths, tmp_path, capsys):
        code = main(_edit_argv(triplet_paths, tmp_path / "out", ("--dry-run",)))
        assert code == 0
        plan = json.loads(capsys.readouterr().out)
        assert plan["stages"][0] == "caption"
        assert plan["options"]["lambda"] == 0.65
        assert not (tmp_path / "out").exists()

    def test_seed_reproducibility(self, triplet_paths, tmp_path):
        main(_edit_argv(triplet_paths, tmp_path / "a", ("--seed", "5")))
        main(_edit_argv(triplet_paths, tmp_path / "b", ("--seed", "5")))
        a = np.asarray(Image.open(tmp_path / "a" / "result.png"))
        b = np.asarray(Image.open(tmp_path / "b" / "result.png"))
        assert np.array_equal(a, b)

    def test_config_file_merges_under_flags(self, triplet_paths, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"lambda": 0.3, "gen_steps": 9}))
        code = main(
            _edit_argv(triplet_paths, tmp_path / "out", ("--dry-run", "--config", str(cfg), "--lambda", "0.9"))
        )
        assert code == 0
        plan = json.loads(capsys.readouterr().out)
        assert plan["options"]["lambda"] == 0.9  # flag wins
        assert plan["options"]["gen_steps"] == 9  # config fills the rest

    def test_bad_edit_type_exits_2(self, triplet_paths, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(_edit_argv(triplet_paths, tmp_path / "o", ("--edit-type", "bogus")))
        assert exc.value.code == 2


class TestSweepCommand:
    def test_sweep_writes_ordered_images(self, triplet_paths, tmp_path):
        argv = ["sweep"] + _edit_argv(triplet_paths, tmp_path / "out")[1:] + ["--lambdas", "0,0.6,0.7,0.8"]
        assert main(argv) == 0
        images = sorted((tmp_path / "out").glob("result_lambda_*.png"))
        assert len(images) == 4


class TestAblateCommand:
    def test_four_bundles(self, triplet_paths, tmp_path):
        argv = ["ablate"] + _edit_argv(triplet_paths, tmp_path / "out")[1:]
        assert main(argv) == 0
        for flag in ("none", "no_injection", "no_caption", "no_image_delta"):
            assert (tmp_path / "out" / flag / "result.png").exists()


class TestEvalCommand:
    def test_eval_prints_summary(self, tmp_path, capsys, monkeypatch):
        from exedit.demo import build_demo_suite
        from exedit.pipeline import StubEngine, EditOptions, ExemplarTriplet

        suite_dir = tmp_path / "suite"
        manifest = build_demo_suite(suite_dir)
        stub = StubEngine()
        results = tmp_path / "results"
        for entry in manifest.entries[:3]:
            trip = ExemplarTriplet.from_paths(
                x=manifest.resolve(entry.x),
                x_edit=manifest.resolve(entry.x_edit),
                y=manifest.resolve(entry.y),
                edit_type=entry.edit_type,
                id=entry.id,
            )
            stub.edit(trip, EditOptions()).save_bundle(results / entry.id)
        manifest.entries = manifest.entries[:3]
        manifest.save(suite_dir / "m3.json")
        code = main(
            [
                "eval",
                "--manifest", str(suite_dir / "m3.json"),
                "--results", str(results),
                "--out", str(tmp_path / "report"),
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "lpips" in out and "s_visual" in out
        report = json.loads((tmp_path / "report" / "report.json").read_text())
        assert report["aggregates"]["num_rows"] == 3


class TestCurateCommands:
    def test_pair_then_ingest_round_trip(self, tmp_path, capsys):
        img = natural_image("chelsea")
        records = []
        for i in range(2):
            a, b = tmp_path / f"i{i}.png", tmp_path / f"e{i}.png"
            img.save(a)
            tinted(img, (0.1 * (i + 1), 0, 0)).save(b)
            records.append(
                {"image": str(a), "edited_image": str(b), "instruction": "warm it up", "source_id": f"r{i}"}
            )
        records_path = tmp_path / "records.json"
        records_path.write_text(json.dumps(records))
        review_dir = tmp_path / "review"
        assert main(["curate", "pair", "--records", str(records_path), "--out-dir", str(review_dir)]) == 0
        csv_path = review_dir / "review.csv"
        rows = list(csv.DictReader(open(csv_path)))
        assert len(rows) == 2
        for row in rows:
            row["decision"] = "accept"
            row["edit_type"] = "global_style"
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=rows[0].keys())
            writer.writeheader()
            writer.writerows(rows)
        manifest_path = tmp_path / "manifest.json"
        assert main(["curate", "ingest", "--csv", str(csv_path), "--out", str(manifest_path)]) == 0
        payload = json.loads(manifest_path.read_text())
        assert payload["total"] == 2


class TestInvertCommand:
    def test_invert_emits_cache_path(self, triplet_paths, tmp_path, capsys):
        code = main(
            [
                "invert",
                "--y", str(triplet_paths["y"]),
                "--steps", "4",
                "--cache-dir", str(tmp_path / "cache"),
                "--json",
            ]
        )
        assert code == 0
        payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert payload["cache_hit"] is False
        assert (tmp_path / "cache").exists()
        code = main(
            [
                "invert",
                "--y", str(triplet_paths["y"]),
                "--steps", "4",
                "--cache-dir", str(tmp_path / "cache"),
                "--json",
            ]
        )
        payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert payload["cache_hit"] is True
