"""Command-line interface: subcommand pipelines and reproducibility contracts."""

import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from gencap.cli import build_parser, main

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")


class TestParser:
    def test_requires_subcommand(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_rejects_unknown_method(self, tmp_path):
        with pytest.raises(SystemExit):
            build_parser().parse_args(
                ["infer", "--method", "magic", "--scenes", "x", "--out", "y"]
            )

    def test_seed_env_fallback(self, monkeypatch):
        monkeypatch.setenv("GENCAP_SEED", "41")
        args = build_parser().parse_args(["gen", "--out", "x.json"])
        assert args.seed == 41

    def test_explicit_seed_wins(self, monkeypatch):
        monkeypatch.setenv("GENCAP_SEED", "41")
        args = build_parser().parse_args(["gen", "--seed", "7", "--out", "x.json"])
        assert args.seed == 7


class TestPipeline:
    def test_gen_infer_eval_roundtrip(self, tmp_path, capsys):
        scenes = tmp_path / "scenes.json"
        pred = tmp_path / "pred.json"
        metrics = tmp_path / "metrics.csv"
        assert main(["gen", "--sigma", "0.0", "--draws", "12", "--seed", "3",
                     "--out", str(scenes)]) == 0
        assert main(["infer", "--method", "ransac", "--scenes", str(scenes),
                     "--out", str(pred)]) == 0
        assert main(["eval", "--pred", str(pred), "--truth", str(scenes),
                     "--out", str(metrics)]) == 0
        out = capsys.readouterr().out
        assert "sa:" in out and "scene_acc:" in out
        # noise-free minimal-basis inference is exact on every scene
        with open(metrics, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and r[0] == "aggregate"]
        agg = {r[1]: float(r[2]) for r in rows}
        assert agg["sa"] == 1.0
        assert agg["scene_acc"] == 1.0
        assert agg["vi"] == 0.0

    def test_infer_output_structure(self, tmp_path):
        scenes = tmp_path / "scenes.json"
        pred = tmp_path / "pred.json"
        main(["gen", "--draws", "6", "--seed", "5", "--out", str(scenes)])
        assert main(["infer", "--method", "gcm-ds", "--scenes", str(scenes),
                     "--restarts", "1", "--out", str(pred)]) == 0
        with open(pred) as fh:
            payload = json.load(fh)
        assert payload["method"] == "gcm-ds"
        rec = payload["scenes"][0]
        assert {"labels", "poses", "R", "mu", "Lambda", "elbo", "elbo_trace", "converged"} <= set(rec)
        assert len(rec["mu"][0]) == 4

    def test_eval_compare_identical_samples(self, tmp_path, capsys):
        scenes = tmp_path / "scenes.json"
        pred = tmp_path / "pred.json"
        main(["gen", "--draws", "6", "--seed", "2", "--out", str(scenes)])
        main(["infer", "--method", "ransac", "--scenes", str(scenes), "--out", str(pred)])
        assert main(["eval", "--pred", str(pred), "--truth", str(scenes),
                     "--compare", str(pred)]) == 0
        out = capsys.readouterr().out
        assert "identical samples" in out

    def test_eval_scene_count_mismatch(self, tmp_path):
        scenes = tmp_path / "scenes.json"
        short = tmp_path / "short.json"
        pred = tmp_path / "pred.json"
        main(["gen", "--draws", "8", "--seed", "2", "--out", str(scenes)])
        main(["gen", "--draws", "4", "--seed", "2", "--out", str(short)])
        main(["infer", "--method", "ransac", "--scenes", str(short), "--out", str(pred)])
        with pytest.raises(SystemExit):
            main(["eval", "--pred", str(pred), "--truth", str(scenes)])


class TestLearnCommand:
    def test_learn_writes_template_and_report(self, tmp_path, capsys):
        out = tmp_path / "learned.json"
        report = tmp_path / "report.csv"
        assert main(["learn", "--class", "triangle", "--sigma", "0.0", "--count", "16",
                     "--seed", "0", "--out", str(out), "--report", str(report)]) == 0
        assert "learned triangle" in capsys.readouterr().out
        with open(out) as fh:
            payload = json.load(fh)
        assert len(payload) == 1
        assert payload[0]["id"] == "learned-triangle"
        with open(report, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iteration", "beta", "step_smse"]
        assert len(rows) > 1

    def test_learn_unknown_class(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["learn", "--class", "hexagon", "--out", str(tmp_path / "x.json")])


class TestBenchCommand:
    def test_no_timing_output_is_byte_identical(self, tmp_path):
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        base = ["bench", "--methods", "ransac", "--sigmas", "0.0", "--draws", "8",
                "--seed", "1", "--no-timing"]
        assert main(base + ["--out", str(a)]) == 0
        assert main(base + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_bench_table_structure(self, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        assert main(["bench", "--methods", "ransac,gcm-ds", "--sigmas", "0.0",
                     "--draws", "6", "--restarts", "1", "--seed", "1",
                     "--no-timing", "--out", str(out)]) == 0
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["method", "sigma", "metric", "mean", "std", "n", "seconds"]
        assert len(rows) == 1 + 2 * 4  # two methods x four metrics
        table = capsys.readouterr().out
        assert "ransac" in table and "gcm-ds" in table

    def test_bench_rejects_unknown_method(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["bench", "--methods", "magic", "--out", str(tmp_path / "x.csv")])


class TestRenderCommand:
    def test_svg_is_well_formed(self, tmp_path):
        scenes = tmp_path / "scenes.json"
        pred = tmp_path / "pred.json"
        svg = tmp_path / "scene.svg"
        main(["gen", "--draws", "6", "--seed", "4", "--out", str(scenes)])
        main(["infer", "--method", "ransac", "--scenes", str(scenes), "--out", str(pred)])
        assert main(["render", "--scenes", str(scenes), "--pred", str(pred),
                     "--index", "0", "--out", str(svg)]) == 0
        root = ET.parse(svg).getroot()
        assert root.tag.endswith("svg")
        circles = [e for e in root.iter() if e.tag.endswith("circle")]
        assert circles

    def test_render_without_predictions(self, tmp_path):
        scenes = tmp_path / "scenes.json"
        svg = tmp_path / "plain.svg"
        main(["gen", "--draws", "4", "--seed", "4", "--out", str(scenes)])
        assert main(["render", "--scenes", str(scenes), "--out", str(svg)]) == 0
        ET.parse(svg)
