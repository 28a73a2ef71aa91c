"""Text-side encoding of detections for the grounding model.

Boxes travel as four quantized location tokens ``<loc_k>`` (``k`` in
``0..NUM_BINS-1``) after a free-text label, e.g.::

    Hookworm<loc_0><loc_0><loc_999><loc_999>

The token surface form is the wire contract with the model backend.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional, Sequence, Union

from eggloc.errors import DegenerateBoxError, ValidationError
from eggloc.geometry import BoundingBox

__all__ = [
    "DEFAULT_TASK_PROMPT",
    "NUM_BINS",
    "DetectionPrompt",
    "GroundedPhrase",
    "LocToken",
    "build_prompt",
    "decode_output",
    "decode_with_warnings",
    "encode_box",
    "encode_training_target",
]

NUM_BINS = 1000

# object-detection task tag understood by Florence-2 style backends
DEFAULT_TASK_PROMPT = "<OD>"

_LOC_RE = re.compile(r"<loc_(\d+)>")
# sequence markers some decoders leave in the generated text
_SPECIAL_RE = re.compile(r"</?s>|<pad>|<unk>")


@dataclass(frozen=True)
class LocToken:
    bin: int

    def __post_init__(self):
        if not isinstance(self.bin, int) or not 0 <= self.bin < NUM_BINS:
            raise ValidationError(f"location bin must be an integer in [0, {NUM_BINS - 1}], got {self.bin!r}")

    def __str__(self) -> str:
        return f"<loc_{self.bin}>"


@dataclass(frozen=True)
class GroundedPhrase:
    label: str
    box: BoundingBox

    def __post_init__(self):
        if not isinstance(self.label, str) or not self.label.strip():
            raise ValidationError(f"phrase label must be non-empty text, got {self.label!r}")
        if not isinstance(self.box, BoundingBox):
            raise ValidationError(f"phrase box must be a BoundingBox, got {type(self.box).__name__}")


@dataclass(frozen=True)
class DetectionPrompt:
    task_text: str

    def __post_init__(self):
        if not isinstance(self.task_text, str) or not self.task_text.strip():
            raise ValidationError("detection prompt must be a non-empty string")

    def __str__(self) -> str:
        return self.task_text


def build_prompt(prompt: Optional[str] = None) -> DetectionPrompt:
    """Instruction sent alongside every image. ``None`` selects the backend's detection tag."""
    return DetectionPrompt(DEFAULT_TASK_PROMPT if prompt is None else prompt)


def _quantize(c: float, d: int) -> int:
    # multiply before dividing and allow 1e-9 bin of slack so exact bin edges
    # such as 76.8 / 768 land on their own bin rather than one below
    return min(max(math.floor(c * NUM_BINS / d + 1e-9), 0), NUM_BINS - 1)


def _dequantize(k: int, d: int) -> float:
    return (k + 0.5) / NUM_BINS * d


def encode_box(box: BoundingBox, width: int, height: int) -> tuple[LocToken, LocToken, LocToken, LocToken]:
    """Quantize ``box`` against a ``width x height`` frame.

    Each coordinate maps to ``floor(c / d * 1000)`` clipped to ``[0, 999]``,
    in the order x_min, y_min, x_max, y_max.

    Raises:
        ValidationError: if the frame size is not positive or the box
            extends beyond it.
    """
    if width <= 0 or height <= 0:
        raise ValidationError(f"frame size must be positive, got {width}x{height}")
    if box.x_max > width or box.y_max > height:
        raise ValidationError(f"box {box.as_tuple()} exceeds the {width}x{height} frame")
    return (
        LocToken(_quantize(box.x_min, width)),
        LocToken(_quantize(box.y_min, height)),
        LocToken(_quantize(box.x_max, width)),
        LocToken(_quantize(box.y_max, height)),
    )


def encode_training_target(phrases: Sequence[GroundedPhrase], width: int = 768, height: int = 768) -> str:
    """Serialize phrases as ``label<loc_a><loc_b><loc_c><loc_d>`` concatenated in order."""
    parts = []
    for phrase in phrases:
        if "<" in phrase.label:
            raise ValidationError(f"label may not contain '<': {phrase.label!r}")
        tokens = encode_box(phrase.box, width, height)
        parts.append(phrase.label + "".join(str(t) for t in tokens))
    return "".join(parts)


def decode_with_warnings(
    text: Union[str, bytes, None], width: int, height: int
) -> tuple[list[GroundedPhrase], list[str]]:
    """Parse model output into grounded phrases, tolerating malformed text.

    A label followed by ``4k`` location tokens yields ``k`` phrases sharing
    that label. Bins dequantize at their centre, ``(k + 0.5) / 1000 * d``.
    Incomplete token groups, out-of-range bins, groups without a label and
    boxes with non-increasing corners are dropped and described in the
    returned warnings instead of raising.
    """
    if width <= 0 or height <= 0:
        raise ValidationError(f"frame size must be positive, got {width}x{height}")
    if text is None:
        return [], []
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    text = _SPECIAL_RE.sub("", str(text))

    phrases: list[GroundedPhrase] = []
    warnings: list[str] = []

    # walk the text as alternating label runs and runs of consecutive tokens
    segments: list[tuple[str, list[str]]] = []
    pos = 0
    label = ""
    tokens: list[str] = []
    for m in _LOC_RE.finditer(text):
        between = text[pos : m.start()]
        if between and tokens:
            segments.append((label, tokens))
            label, tokens = "", []
        label += between
        tokens.append(m.group(1))
        pos = m.end()
    if tokens:
        segments.append((label, tokens))
    trailing = text[pos:].strip()
    if trailing and segments:
        warnings.append(f"ignored trailing text without location tokens: {trailing[:40]!r}")

    for raw_label, toks in segments:
        name = raw_label.strip()
        n_full = len(toks) // 4
        if len(toks) % 4:
            warnings.append(
                f"dropped incomplete group of {len(toks) % 4} location token(s) after {name[:40]!r}"
            )
        if not name:
            if n_full:
                warnings.append(f"dropped {n_full} box(es) with no label")
            continue
        for g in range(n_full):
            group = toks[4 * g : 4 * g + 4]
            bins = [int(k) if len(k) <= 6 else NUM_BINS for k in group]
            if any(b >= NUM_BINS for b in bins):
                warnings.append(f"dropped box for {name[:40]!r}: bin out of range in {group}")
                continue
            x0, x1 = _dequantize(bins[0], width), _dequantize(bins[2], width)
            y0, y1 = _dequantize(bins[1], height), _dequantize(bins[3], height)
            try:
                box = BoundingBox(x0, y0, x1, y1)
            except DegenerateBoxError:
                warnings.append(f"dropped degenerate box for {name[:40]!r}: bins {bins}")
                continue
            phrases.append(GroundedPhrase(name, box))
    return phrases, warnings


def decode_output(text: Union[str, bytes, None], width: int, height: int) -> list[GroundedPhrase]:
    """Like :func:`decode_with_warnings` but returns only the phrases."""
    return decode_with_warnings(text, width, height)[0]
