import json
import time
from contextlib import contextmanager

import numpy as np
import pytest
from PIL import Image

_ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    """Context manager that times one acceptance criterion and records PASS or FAIL."""

    @contextmanager
    def check(number, title, limit_s):
        start = time.perf_counter()
        try:
            yield
        except BaseException as exc:
            _ACCEPTANCE[number] = f"FAIL criterion {number}: {title} ({type(exc).__name__}: {exc})"
            raise
        elapsed = time.perf_counter() - start
        ok = elapsed < limit_s
        status = "PASS" if ok else "FAIL"
        _ACCEPTANCE[number] = f"{status} criterion {number}: {title} [{elapsed:.2f}s, limit {limit_s:g}s]"
        assert ok, f"criterion {number} took {elapsed:.2f}s, limit {limit_s}s"

    return check


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])


def write_coco(path, images, annotations, categories=None):
    """Write a minimal COCO document. ``images``: (id, file_name, w, h); ``annotations``: (id, image_id, cat_id, bbox)."""
    if categories is None:
        categories = [{"id": 1, "name": "Hookworm"}, {"id": 2, "name": "Ascaris lumbricoides"}]
    doc = {
        "images": [{"id": i, "file_name": f, "width": w, "height": h} for i, f, w, h in images],
        "annotations": [
            {"id": a, "image_id": im, "category_id": c, "bbox": list(b), "iscrowd": 0}
            for a, im, c, b in annotations
        ],
        "categories": categories,
    }
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def coco_file(tmp_path):
    return write_coco(
        tmp_path / "ann.json",
        images=[(1, "a.png", 100, 80), (2, "b.png", 64, 64)],
        annotations=[
            (10, 1, 1, [10, 10, 20, 30]),
            (11, 1, 2, [50, 20, 30, 40]),
            (12, 2, 1, [0, 0, 64, 64]),
        ],
    )


@pytest.fixture
def image_dir(tmp_path):
    """Three small RGB images: two 1280x720-shaped (scaled down 10x) and one square."""
    d = tmp_path / "images"
    d.mkdir()
    rng = np.random.default_rng(0)
    for name, (w, h) in {"img1": (128, 72), "img2": (128, 72), "img3": (64, 64)}.items():
        arr = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        Image.fromarray(arr).save(d / f"{name}.png")
    return d


@pytest.fixture
def stub_project(image_dir):
    """Annotations for ``image_dir`` plus scripted outputs for a tuned and a baseline detector.

    The tuned script re-encodes each ground-truth box; the baseline one
    returns a shifted box for img1, nothing for img2 and a stray box for img3.
    """
    from eggloc.geometry import BoundingBox
    from eggloc.loc_codec import GroundedPhrase, encode_training_target
    from eggloc.preprocess import compute_letterbox, project_box

    root = image_dir.parent
    gt = {1: ("img1.png", 128, 72, [(20, 10, 60, 40)]), 2: ("img2.png", 128, 72, [(0, 0, 30, 30), (70, 30, 120, 70)]),
          3: ("img3.png", 64, 64, [(8, 8, 40, 56)])}
    ann = write_coco(
        root / "ann.json",
        images=[(i, f, w, h) for i, (f, w, h, _) in gt.items()],
        annotations=[
            (10 * i + k, i, 1, [x0, y0, x1 - x0, y1 - y0])
            for i, (_, _, _, boxes) in gt.items()
            for k, (x0, y0, x1, y1) in enumerate(boxes)
        ],
    )

    def encode(image_id, boxes):
        _, w, h, _ = gt[image_id]
        t = compute_letterbox(w, h, 768)
        return encode_training_target([GroundedPhrase("Hookworm", project_box(BoundingBox(*b), t)) for b in boxes])

    tuned = {str(i): encode(i, boxes) for i, (_, _, _, boxes) in gt.items()}
    baseline = {"1": encode(1, [(30, 15, 70, 45)]), "2": "", "3": encode(3, [(50, 0, 64, 10)])}
    scripts = {}
    for name, script in (("tuned", tuned), ("baseline", baseline)):
        scripts[name] = root / f"{name}_script.json"
        scripts[name].write_text(json.dumps(script))
    return {"root": root, "images": image_dir, "annotations": ann, "scripts": scripts}
