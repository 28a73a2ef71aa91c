"""Write evaluation reports to disk: a JSON document plus histogram PNGs."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Union

from eggloc.evaluation import ComparisonReport, EvalReport, report_json
from eggloc.plotting import histogram_figure, overlay_figure, save_figure

REPORT_FILE = "report.json"
COMPARISON_FILE = "comparison.json"


def _write(path: Path, text: str) -> Path:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def _save(fig, path: Path) -> Path:
    try:
        return save_figure(fig, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def render_report(report: Union[EvalReport, ComparisonReport], out_dir: Union[str, Path]) -> list[Path]:
    """Write ``report`` into ``out_dir`` and return the paths written.

    An :class:`EvalReport` produces ``report.json`` and ``iou_histogram.png``.
    A :class:`ComparisonReport` produces ``comparison.json``, one histogram
    per detector (``iou_histogram_a.png``, ``iou_histogram_b.png``) and the
    overlay ``iou_comparison.png``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc

    if isinstance(report, EvalReport):
        d = report.distribution
        return [
            _write(out / REPORT_FILE, report_json(report)),
            _save(
                histogram_figure(d.bin_edges, d.counts, f"IoU distribution: {report.detector_name}"),
                out / "iou_histogram.png",
            ),
        ]

    if isinstance(report, ComparisonReport):
        a, b = report.report_a, report.report_b
        written = [_write(out / COMPARISON_FILE, report_json(report))]
        for tag, r in (("a", a), ("b", b)):
            d = r.distribution
            written.append(
                _save(
                    histogram_figure(d.bin_edges, d.counts, f"IoU distribution: {r.detector_name}"),
                    out / f"iou_histogram_{tag}.png",
                )
            )
        if a.distribution.bin_edges == b.distribution.bin_edges:
            fig = overlay_figure(
                a.distribution.bin_edges,
                a.distribution.counts,
                b.distribution.counts,
                (a.detector_name, b.detector_name),
            )
            written.append(_save(fig, out / "iou_comparison.png"))
        return written

    raise TypeError(f"cannot render {type(report).__name__}")


def read_report(path: Union[str, Path]) -> Union[EvalReport, ComparisonReport]:
    """Load a report written by :func:`render_report`."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if "report_a" in data:
        return ComparisonReport.from_dict(data)
    return EvalReport.from_dict(data)
