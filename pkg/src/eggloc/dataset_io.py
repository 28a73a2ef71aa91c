"""COCO-style annotation ingestion and deterministic train/validation/test splits."""
from __future__ import annotations

import json
import math
import random
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Optional, Sequence, Union

from eggloc.errors import DegenerateBoxError, SchemaError, ValidationError
from eggloc.geometry import BoundingBox, clamp_to_image

__all__ = [
    "CATEGORIES",
    "PARTS",
    "CategoryLabel",
    "DatasetSplit",
    "GroundTruthAnnotation",
    "ImageRecord",
    "filter_by_split",
    "load_annotations",
    "normalize_category",
    "read_split_manifest",
    "save_annotations",
    "split_dataset",
    "write_split_manifest",
]

PathLike = Union[str, Path]
ImageId = Hashable

PARTS = ("train", "validation", "test")

# Physical egg sizes in the source dataset span roughly 15-100 micrometres.
# Descriptive only; nothing here depends on it.
EGG_SIZE_RANGE_UM = (15, 100)


@dataclass(frozen=True)
class CategoryLabel:
    name: str
    id: int


CATEGORIES: tuple[CategoryLabel, ...] = tuple(
    CategoryLabel(name, i)
    for i, name in enumerate(
        [
            "A. lumbricoides",
            "Capillaria philippinensis",
            "Enterobius vermicularis",
            "Fasciolopsis buski",
            "Hookworm",
            "Hymenolepis diminuta",
            "H. nana",
            "Opisthorchis viverrini",
            "Paragonimus spp.",
            "Taenia spp.",
            "T. trichiura",
        ]
    )
)


def _norm_key(name: str) -> str:
    return re.sub(r"\s+", " ", name).strip().casefold()


# Spellings used by the Chula-ParasiteEgg-11 release and common long forms.
_ALIASES = {
    "ascaris lumbricoides": "A. lumbricoides",
    "hookworm egg": "Hookworm",
    "hymenolepis nana": "H. nana",
    "opisthorchis viverrine": "Opisthorchis viverrini",
    "paragonimus spp": "Paragonimus spp.",
    "paragonimus": "Paragonimus spp.",
    "taenia spp": "Taenia spp.",
    "taenia spp. egg": "Taenia spp.",
    "taenia": "Taenia spp.",
    "trichuris trichiura": "T. trichiura",
}

_BY_KEY = {_norm_key(c.name): c for c in CATEGORIES}
_BY_KEY.update({alias: _BY_KEY[_norm_key(target)] for alias, target in _ALIASES.items()})


def normalize_category(name: str) -> CategoryLabel:
    """Map a category name (or known alias) onto one of the 11 canonical labels.

    Matching is case-insensitive and collapses runs of whitespace.

    Raises:
        SchemaError: if the name is not a canonical category or alias.
    """
    if not isinstance(name, str):
        raise SchemaError(f"category name must be a string, got {name!r}")
    try:
        return _BY_KEY[_norm_key(name)]
    except KeyError:
        raise SchemaError(f"unknown category name: {name!r}") from None


@dataclass(frozen=True)
class ImageRecord:
    image_id: ImageId
    file_path: str
    width: int
    height: int

    def __post_init__(self):
        if not (isinstance(self.width, int) and isinstance(self.height, int)):
            raise ValidationError(f"image {self.image_id!r}: width/height must be integers")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(
                f"image {self.image_id!r}: size must be positive, got {self.width}x{self.height}"
            )


@dataclass(frozen=True)
class GroundTruthAnnotation:
    image_id: ImageId
    category: CategoryLabel
    box: BoundingBox
    annotation_id: Optional[ImageId] = None


def _read_json(path: PathLike) -> dict:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"annotation file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top level must be an object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise SchemaError(f"{path}: missing list field {key!r}")
    return doc


def load_annotations(
    path: PathLike,
) -> tuple[list[ImageRecord], list[GroundTruthAnnotation], list[CategoryLabel]]:
    """Load a COCO detection document.

    ``bbox`` entries are ``[x, y, w, h]`` in pixels and become
    ``BoundingBox(x, y, x + w, y + h)``, clamped to their image.

    Returns:
        ``(images, annotations, categories)`` where ``categories`` holds the
        canonical labels the file declares, in file order.

    Raises:
        FileNotFoundError: missing file.
        SchemaError: malformed document, unknown category name, dangling
            image or category reference, duplicate image id.
        ValidationError: non-positive bbox width/height (all offending
            annotation ids are listed) or a box that lies outside its image.
    """
    doc = _read_json(path)

    images: list[ImageRecord] = []
    by_id: dict = {}
    for raw in doc["images"]:
        try:
            rec = ImageRecord(
                image_id=raw["id"],
                file_path=str(raw.get("file_name", raw.get("file_path", ""))),
                width=raw["width"],
                height=raw["height"],
            )
        except KeyError as exc:
            raise SchemaError(f"image entry missing field {exc.args[0]!r}: {raw!r}") from None
        except TypeError:
            raise SchemaError(f"image entry must be an object: {raw!r}") from None
        if rec.image_id in by_id:
            raise SchemaError(f"duplicate image id: {rec.image_id!r}")
        by_id[rec.image_id] = rec
        images.append(rec)

    categories: list[CategoryLabel] = []
    cat_by_file_id: dict = {}
    for raw in doc["categories"]:
        try:
            label = normalize_category(raw["name"])
            cat_by_file_id[raw["id"]] = label
        except (KeyError, TypeError):
            raise SchemaError(f"category entry needs 'id' and 'name': {raw!r}") from None
        if label not in categories:
            categories.append(label)

    bad_size = []
    annotations: list[GroundTruthAnnotation] = []
    for raw in doc["annotations"]:
        try:
            ann_id = raw.get("id")
            image_id = raw["image_id"]
            cat_id = raw["category_id"]
            x, y, w, h = (float(v) for v in raw["bbox"])
        except (KeyError, TypeError, ValueError):
            raise SchemaError(f"malformed annotation entry: {raw!r}") from None
        if w <= 0 or h <= 0:
            bad_size.append(ann_id)
            continue
        if image_id not in by_id:
            raise SchemaError(f"annotation {ann_id!r} references unknown image_id {image_id!r}")
        if cat_id not in cat_by_file_id:
            raise SchemaError(f"annotation {ann_id!r} references unknown category_id {cat_id!r}")
        img = by_id[image_id]
        try:
            box = clamp_to_image((x, y, x + w, y + h), img.width, img.height)
        except DegenerateBoxError:
            raise ValidationError(
                f"annotation {ann_id!r}: bbox {[x, y, w, h]} lies outside image {image_id!r}"
            ) from None
        annotations.append(GroundTruthAnnotation(image_id, cat_by_file_id[cat_id], box, ann_id))

    if bad_size:
        raise ValidationError(
            f"bbox width and height must be positive; offending annotation ids: {bad_size}"
        )
    return images, annotations, categories


def save_annotations(
    path: PathLike,
    images: Sequence[ImageRecord],
    annotations: Sequence[GroundTruthAnnotation],
    categories: Optional[Sequence[CategoryLabel]] = None,
) -> None:
    """Write structures back out as a COCO detection document (canonical category ids)."""
    if categories is None:
        seen = {a.category for a in annotations}
        categories = [c for c in CATEGORIES if c in seen]
    doc = {
        "images": [
            {"id": im.image_id, "file_name": im.file_path, "width": im.width, "height": im.height}
            for im in images
        ],
        "annotations": [
            {
                "id": a.annotation_id if a.annotation_id is not None else i + 1,
                "image_id": a.image_id,
                "category_id": a.category.id,
                "bbox": a.box.as_xywh(),
                "area": a.box.width * a.box.height,
                "iscrowd": 0,
            }
            for i, a in enumerate(annotations)
        ],
        "categories": [{"id": c.id, "name": c.name} for c in categories],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    validation: tuple
    test: tuple
    seed: Optional[int]
    ratios: tuple[float, float, float]

    def part(self, name: str) -> tuple:
        if name not in PARTS:
            raise ValidationError(f"unknown split part {name!r}; expected one of {PARTS}")
        return getattr(self, name)

    def assignments(self) -> dict:
        """``image_id -> part`` for every image in the split."""
        return {i: name for name in PARTS for i in self.part(name)}

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


def _check_ratios(ratios: Sequence[float]) -> tuple[float, float, float]:
    if len(ratios) != 3:
        raise ValidationError(f"ratios must have three entries, got {len(ratios)}")
    ratios = tuple(float(r) for r in ratios)
    if any(not r > 0 for r in ratios):
        raise ValidationError(f"ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got {ratios} (sum {sum(ratios)})")
    return ratios


def split_dataset(
    image_ids: Sequence[ImageId],
    seed: int,
    ratios: Sequence[float] = (0.6, 0.2, 0.2),
) -> DatasetSplit:
    """Shuffle ``image_ids`` with ``seed`` and cut them into three parts.

    Train and validation receive ``floor(n * r)`` ids; test takes the
    remainder so every id lands somewhere.
    """
    ratios = _check_ratios(ratios)
    ids = list(image_ids)
    if not ids:
        raise ValidationError("cannot split an empty id list")
    dupes = [i for i, c in Counter(ids).items() if c > 1]
    if dupes:
        raise ValidationError(f"duplicate image ids: {dupes[:10]}")

    n = len(ids)
    # the epsilon absorbs products like 0.7 * 10 == 6.999999999999999
    n_train = math.floor(n * ratios[0] + 1e-9)
    n_val = math.floor(n * ratios[1] + 1e-9)
    random.Random(seed).shuffle(ids)
    return DatasetSplit(
        train=tuple(ids[:n_train]),
        validation=tuple(ids[n_train : n_train + n_val]),
        test=tuple(ids[n_train + n_val :]),
        seed=seed,
        ratios=ratios,
    )


def filter_by_split(annotations: Iterable, split: DatasetSplit, part: str) -> list:
    """Annotations whose ``image_id`` belongs to ``part``, order preserved."""
    members = set(split.part(part))
    return [a for a in annotations if a.image_id in members]


def write_split_manifest(path: PathLike, split: DatasetSplit) -> None:
    """One JSON object per line: ``{"image_id": ..., "part": ...}``."""
    lines = [
        json.dumps({"image_id": image_id, "part": name})
        for name in PARTS
        for image_id in split.part(name)
    ]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_split_manifest(path: PathLike, seed: Optional[int] = None) -> DatasetSplit:
    """Inverse of :func:`write_split_manifest`; ratios are recovered from part sizes."""
    parts: dict[str, list] = {name: [] for name in PARTS}
    seen = set()
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                image_id, part = rec["image_id"], rec["part"]
            except (json.JSONDecodeError, KeyError, TypeError):
                raise SchemaError(f"{path}:{lineno}: expected {{image_id, part}} record") from None
            if part not in parts:
                raise SchemaError(f"{path}:{lineno}: unknown part {part!r}")
            if image_id in seen:
                raise SchemaError(f"{path}:{lineno}: image {image_id!r} listed twice")
            seen.add(image_id)
            parts[part].append(image_id)
    n = len(seen)
    if n == 0:
        raise SchemaError(f"{path}: split manifest is empty")
    return DatasetSplit(
        train=tuple(parts["train"]),
        validation=tuple(parts["validation"]),
        test=tuple(parts["test"]),
        seed=seed,
        ratios=tuple(len(parts[p]) / n for p in PARTS),
    )
