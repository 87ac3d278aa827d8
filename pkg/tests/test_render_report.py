import json
import os
import stat

import numpy as np
import pytest

from camaudit.audit import AuditReport, audit_pixel
from camaudit.experiments import FIXTURE_TAP
from camaudit.hsi import cube_from_bytes, prepare
from camaudit.model import load_weights, predict
from camaudit.render import LEGEND_HEIGHT, diverging_rgb, legend_strip, render_heatmap
from camaudit.report import (HIST_EDGES, SCHEMA, atomic_write, attribution_bytes, attribution_from_bytes,
                             build_document, deviation_histogram, dumps, emit_report, parse_report)
from camaudit.saliency import Attribution, RoI, seg_grad_cam_spatial
from conftest import FIXTURES


class TestColormap:
    def test_zero_is_white(self):
        assert np.all(diverging_rgb(np.zeros((3, 4))) == 255)

    def test_endpoints(self):
        rgb = diverging_rgb(np.array([[2.0, -2.0, 0.0, 1.0]]))
        assert rgb[0, 0].tolist() == [255, 0, 0]
        assert rgb[0, 1].tolist() == [0, 0, 255]
        assert rgb[0, 2].tolist() == [255, 255, 255]
        assert rgb[0, 3].tolist() == [255, 128, 128]

    def test_explicit_scale_clips(self):
        assert diverging_rgb(np.array([5.0]), scale=1.0).tolist() == [[255, 0, 0]]

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_raises(self, bad):
        with pytest.raises(FloatingPointError):
            diverging_rgb(np.array([[0.0, bad]]))

    def test_legend_ticks(self):
        strip = legend_strip(21, -1.0, 0.5, 1.0)
        assert strip.shape == (LEGEND_HEIGHT, 21, 3)
        dark = np.nonzero(np.all(strip[-1] == 0, axis=1))[0].tolist()
        assert dark == [0, 10, 15]


class TestRaster:
    def test_ppm_layout(self):
        blob = render_heatmap(np.array([[1.0, -1.0]]))
        assert blob == b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255])

    def test_ppm_legend_comment(self):
        blob = render_heatmap(np.array([[0.5, -1.0]]), legend=True)
        head = blob.split(b"\n")
        assert head[1] == b"# min -1.0 zero 0.0 max 0.5" and head[2] == f"2 {1 + LEGEND_HEIGHT}".encode()

    def test_png(self):
        pytest.importorskip("PIL")
        blob = render_heatmap(np.eye(4) - 0.5, fmt="png")
        assert blob[:8] == b"\x89PNG\r\n\x1a\n"

    def test_unknown_format(self):
        with pytest.raises(ValueError, match="format"):
            render_heatmap(np.zeros((2, 2)), fmt="gif")

    def test_golden_fixture_heatmap(self):
        model = load_weights((FIXTURES / "two_region_bf.camw").read_bytes())
        x = prepare(cube_from_bytes((FIXTURES / "two_region.hsic").read_bytes()), 25).cube
        roi = RoI.from_mask(0, predict(model, x) == 0)
        blob = render_heatmap(seg_grad_cam_spatial(model, x, FIXTURE_TAP, roi).class_map, legend=True)
        assert blob == (FIXTURES / "two_region_spatial.ppm").read_bytes()


def _report():
    roi = RoI(1, ((0, 0), (1, 1)))
    maps = np.zeros((2, 2, 2))
    maps[0, 0, 0], maps[1, 1, 1] = 2.0, 3.5
    logits = np.zeros((2, 2, 2))
    logits[0, 0, 1], logits[1, 1, 1] = 2.0, 3.0
    return audit_pixel(Attribution(maps.sum(axis=0), "seggradcam-spatial", "dec_penultimate", roi, False, maps),
                       logits, scene="s0")


class TestReport:
    def test_histogram_bins(self):
        assert len(HIST_EDGES) == 17 and HIST_EDGES[0] == 1e-9 and HIST_EDGES[-1] == 10.0
        counts = deviation_histogram(np.array([0.0, 1e-12, 5e-9, 0.5, -0.5, 1e3]))
        # bins are 0.625 decades wide
        assert counts[0] == 2 and counts[1] == 1 and counts[13] == 2 and counts[15] == 1 and sum(counts) == 6

    def test_empty_archive(self):
        doc = json.loads(dumps(build_document([])))
        assert doc["schema"] == SCHEMA and doc["records"] == []

    def test_record_round_trip(self):
        report = _report()
        text = dumps(build_document([report], {"seed": 0}, ["a", "b"]))
        doc, (back,) = parse_report(text)
        rec = doc["records"][0]
        assert rec["verdict"] == "non-conservative" and rec["class_name"] == "b" and rec["roi_size"] == 2
        assert rec["deviation"] == [0.0, 0.5] and rec["summary"]["fraction_within"] == 0.5
        assert back.verdict == report.verdict and back.pixels == report.pixels
        np.testing.assert_array_equal(back.relative, report.relative)
        assert dumps(build_document([back], {"seed": 0}, ["a", "b"])) == text

    def test_empty_roi_record(self):
        rec = build_document([AuditReport("gradcam", "head_1x1", 3, status="empty RoI")])["records"][0]
        assert rec["verdict"] == "empty RoI" and "deviation" not in rec and rec["roi_size"] == 0

    def test_rejects_unknown_schema(self):
        with pytest.raises(ValueError, match="schema"):
            parse_report('{"schema": "other/9", "records": []}')

    def test_emit_is_atomic_and_readable(self, tmp_path):
        path = tmp_path / "audit.json"
        emit_report([_report()], path)
        assert parse_report(path.read_text())[1][0].scene == "s0"
        assert [p.name for p in tmp_path.iterdir()] == ["audit.json"]
        mask = os.umask(0)
        os.umask(mask)
        assert stat.S_IMODE(path.stat().st_mode) == 0o666 & ~mask

    def test_failed_write_leaves_nothing(self, tmp_path):
        with pytest.raises(TypeError):
            atomic_write(tmp_path / "x.json", "not bytes")
        assert list(tmp_path.iterdir()) == []


class TestAttributionExport:
    def test_round_trip(self, rng):
        m = rng.normal(size=(3, 5))
        a = Attribution(m, "scorecam", "enc_early", RoI(2, ((0, 0), (1, 4))))
        out = attribution_from_bytes(attribution_bytes(a))
        assert (out["method"], out["tap"], out["class"], out["roi_size"]) == ("scorecam", "enc_early", 2, 2)
        np.testing.assert_array_equal(out["map"], m)

    def test_layout(self):
        blob = attribution_bytes(Attribution(np.array([[1.5]]), "g", "t", RoI.single(4, 0, 0)))
        assert blob == (b"CAMA\x01\x00\x01\x00\x00\x00\x01\x00\x00\x00\x04\x00\x01\x00\x00\x00"
                        b"\x01g\x01t" + np.array([1.5], "<f8").tobytes())

    def test_errors(self):
        blob = attribution_bytes(Attribution(np.zeros((2, 2)), "gradcam", "head_1x1", RoI.single(0, 0, 0)))
        with pytest.raises(ValueError, match="CAMA"):
            attribution_from_bytes(b"XXXX" + blob[4:])
        with pytest.raises(ValueError, match="version"):
            attribution_from_bytes(blob[:4] + b"\x07\x00" + blob[6:])
        for cut in (8, 25, len(blob) - 1):
            with pytest.raises(ValueError):
                attribution_from_bytes(blob[:cut])
