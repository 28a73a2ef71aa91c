"""Line-delimited predictions file shared by inference and evaluation.

One JSON object per predicted box::

    {"image_id": 17, "label": "Hookworm", "x_min": 12.0, "y_min": 40.5,
     "x_max": 96.0, "y_max": 120.0, "raw_text": "Hookworm<loc_...>..."}

Coordinates are original-image pixels. External detectors enter the system
by writing this same format.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Union

from eggloc.errors import SchemaError, ValidationError
from eggloc.geometry import BoundingBox

FIELDS = ("image_id", "label", "x_min", "y_min", "x_max", "y_max", "raw_text")


@dataclass(frozen=True)
class Prediction:
    image_id: Hashable
    label: str
    box: BoundingBox
    raw_text: str = ""

    def to_record(self) -> dict:
        x0, y0, x1, y1 = self.box.as_tuple()
        return {
            "image_id": self.image_id,
            "label": self.label,
            "x_min": x0,
            "y_min": y0,
            "x_max": x1,
            "y_max": y1,
            "raw_text": self.raw_text,
        }


def format_predictions(predictions: Iterable[Prediction]) -> str:
    return "".join(json.dumps(p.to_record(), ensure_ascii=False) + "\n" for p in predictions)


def write_predictions(path: Union[str, Path], predictions: Iterable[Prediction]) -> int:
    """Write predictions; returns the number of lines written."""
    text = format_predictions(predictions)
    Path(path).write_text(text, encoding="utf-8")
    return text.count("\n")


def parse_predictions(lines: Iterable[str], source: str = "<predictions>") -> list[Prediction]:
    out = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{source}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise SchemaError(f"{source}:{lineno}: expected an object")
        missing = [f for f in FIELDS[:6] if f not in rec]
        if missing:
            raise SchemaError(f"{source}:{lineno}: missing field(s) {missing}")
        try:
            box = BoundingBox(rec["x_min"], rec["y_min"], rec["x_max"], rec["y_max"])
        except ValidationError as exc:
            raise ValidationError(f"{source}:{lineno}: {exc}") from None
        out.append(Prediction(rec["image_id"], str(rec["label"]), box, str(rec.get("raw_text", ""))))
    return out


def read_predictions(path: Union[str, Path]) -> list[Prediction]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        return parse_predictions(fh, source=str(path))
