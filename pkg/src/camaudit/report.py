"""Audit archives (JSON) and the binary attribution export."""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from camaudit.audit import REL_FLOOR, AuditReport
from camaudit.saliency import Attribution

SCHEMA = "camaudit.audit/1"
HIST_EDGES = np.logspace(-9, 1, 17)


def deviation_histogram(deviation: np.ndarray) -> list[int]:
    """Counts of |deviation| over 16 log-spaced bins on [1e-9, 1e1]; out-of-range values go to the end bins."""
    mags = np.clip(np.abs(np.asarray(deviation, dtype=np.float64)), HIST_EDGES[0], HIST_EDGES[-1])
    idx = np.clip(np.searchsorted(HIST_EDGES, mags, side="right") - 1, 0, len(HIST_EDGES) - 2)
    return np.bincount(idx, minlength=len(HIST_EDGES) - 1).tolist()


def report_record(report: AuditReport, class_names=None) -> dict:
    rec = {
        "scene": report.scene,
        "class": report.class_index,
        "class_name": class_names[report.class_index] if class_names else None,
        "method": report.method,
        "tap": report.tap,
        "status": report.status,
        "tolerance": report.tolerance,
        "roi_size": report.roi_size,
        "verdict": report.verdict,
        "class_verdict": report.class_verdict,
        "logit_mass": report.logit_mass,
        "attribution_mass": report.attribution_mass,
        "class_deviation": report.class_deviation,
    }
    if report.status == "ok" and report.has_pixels:
        rec["summary"] = {
            "max_abs": report.max_abs,
            "mean_abs": report.mean_abs,
            "max_rel": report.max_rel,
            "fraction_within": report.fraction_within,
        }
        rec["histogram"] = deviation_histogram(report.deviation)
        rec["pixels"] = [[int(r), int(s)] for r, s in report.pixels]
        rec["logits"] = [float(v) for v in report.logits]
        rec["deviation"] = [float(v) for v in report.deviation]
    elif report.status == "ok":
        rec["pixels"] = [[int(r), int(s)] for r, s in report.pixels]
    return rec


def build_document(reports, metadata: dict | None = None, class_names=None) -> dict:
    return {
        "schema": SCHEMA,
        "run": dict(metadata or {}),
        "histogram_edges": [float(e) for e in HIST_EDGES],
        "records": [report_record(r, class_names) for r in reports],
    }


def dumps(document: dict) -> str:
    return json.dumps(document, indent=2, allow_nan=False) + "\n"


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_report(reports, path, metadata: dict | None = None, class_names=None) -> dict:
    """Write the audit archive atomically; returns the document written."""
    doc = build_document(reports, metadata, class_names)
    atomic_write(path, dumps(doc).encode("utf-8"))
    return doc


def parse_report(text: str) -> tuple[dict, list[AuditReport]]:
    doc = json.loads(text)
    if doc.get("schema") != SCHEMA:
        raise ValueError(f"unsupported report schema {doc.get('schema')!r}")
    reports = []
    for rec in doc["records"]:
        r = AuditReport(rec["method"], rec["tap"], rec["class"], rec["scene"], rec["tolerance"], rec["status"],
                        [tuple(p) for p in rec.get("pixels", [])], logit_mass=rec["logit_mass"],
                        attribution_mass=rec["attribution_mass"], class_deviation=rec["class_deviation"])
        if "deviation" in rec:
            r.logits = np.asarray(rec["logits"], dtype=np.float64)
            r.deviation = np.asarray(rec["deviation"], dtype=np.float64)
            r.relative = r.deviation / np.maximum(np.abs(r.logits), REL_FLOOR)
        reports.append(r)
    return doc, reports


# ---------------------------------------------------------------------------
# attribution export: "CAMA", u16 version, u32 rows, u32 cols, u16 class, u32 RoI size,
# u8-length method tag, u8-length tap name, then rows*cols little-endian float64

ATTR_MAGIC = b"CAMA"
ATTR_VERSION = 1


def attribution_bytes(attribution: Attribution) -> bytes:
    m = attribution.class_map
    method, tap = attribution.method.encode("utf-8"), attribution.tap.encode("utf-8")
    header = ATTR_MAGIC + struct.pack("<HIIHI", ATTR_VERSION, m.shape[0], m.shape[1],
                                      attribution.roi.class_index, len(attribution.roi))
    header += struct.pack("<B", len(method)) + method + struct.pack("<B", len(tap)) + tap
    return header + m.astype("<f8").tobytes()


def attribution_from_bytes(data: bytes) -> dict:
    if data[:4] != ATTR_MAGIC:
        raise ValueError("not a CAMA attribution stream")
    try:
        version, rows, cols, c, roi_size = struct.unpack_from("<HIIHI", data, 4)
        if version != ATTR_VERSION:
            raise ValueError(f"attribution version {version}, expected {ATTR_VERSION}")
        pos = 4 + struct.calcsize("<HIIHI")
        names = []
        for _ in range(2):
            n = data[pos]
            if len(data) < pos + 1 + n:
                raise IndexError
            names.append(data[pos + 1:pos + 1 + n].decode("utf-8"))
            pos += 1 + n
    except (struct.error, IndexError):
        raise ValueError("attribution stream truncated inside the header") from None
    method, tap = names
    if len(data) != pos + 8 * rows * cols:
        raise ValueError("attribution stream has the wrong payload size")
    values = np.frombuffer(data, "<f8", rows * cols, pos).reshape(rows, cols).copy()
    return {"method": method, "tap": tap, "class": c, "roi_size": roi_size, "map": values}
