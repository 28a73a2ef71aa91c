import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eggloc.dataset_io import CATEGORIES, GroundTruthAnnotation, ImageRecord
from eggloc.errors import BackendUnavailableError, CapabilityError, HarnessError, ValidationError
from eggloc.geometry import BoundingBox, clamp_to_image
from eggloc.loc_codec import build_prompt, decode_output
from eggloc.pipeline import (
    BackendContract,
    InferenceFailure,
    InferenceResult,
    StubBackend,
    TrainConfig,
    TrainLog,
    build_training_samples,
    crop_regions,
    get_backend,
    run_inference,
    run_training,
)
from eggloc.predictions import format_predictions
from eggloc.preprocess import PreprocessConfig

FULL = "Hookworm<loc_0><loc_0><loc_999><loc_999>"
HOOKWORM = CATEGORIES[4]


class GenerateOnly(BackendContract):
    name = "gen-only"
    generative = True

    def generate(self, image, prompt):
        return ""

    def save_adapter(self, path):
        pass

    def load_adapter(self, path):
        pass


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.learning_rate, cfg.per_device_batch) == (3, 5e-5, 1)
    assert (cfg.grad_accum_steps, cfg.adapter_rank, cfg.image_size) == (8, 8, 768)
    assert cfg.effective_batch == 8
    assert TrainConfig.from_json(cfg.to_json()) == cfg


@pytest.mark.parametrize(
    "kwargs",
    [{"epochs": 0}, {"learning_rate": 0.0}, {"grad_accum_steps": -1}, {"adapter_rank": 1.5}, {"per_device_batch": True}],
)
def test_train_config_validation(kwargs):
    with pytest.raises(ValidationError):
        TrainConfig(**kwargs)


def test_train_config_rejects_unknown_keys():
    with pytest.raises(ValidationError):
        TrainConfig.from_dict({"epochs": 3, "warmup": 10})


def test_stub_examples():
    stub = StubBackend(script={"img1": FULL}, losses=[3, 2, 1])
    assert stub.generate("img1", "<OD>") == FULL
    assert [stub.train_step([]) for _ in range(3)] == [3.0, 2.0, 1.0]
    with pytest.raises(HarnessError):
        stub.train_step([])
    with pytest.raises(HarnessError):
        stub.generate("img2", "<OD>")


def test_sixteen_samples_six_steps():
    stub = StubBackend()
    log = run_training(TrainConfig(), list(range(16)), [], stub)
    assert log.total_optimizer_steps == 6 == stub.optimizer_steps
    assert stub.train_calls == 48


def test_empty_training_set():
    with pytest.raises(ValidationError):
        run_training(TrainConfig(), [], [], StubBackend())


def test_non_trainable_backend():
    with pytest.raises(CapabilityError):
        run_training(TrainConfig(), [1], [], GenerateOnly())


def test_scripted_decreasing_losses():
    losses = list(range(48, 0, -1))
    log = run_training(TrainConfig(), list(range(16)), [], StubBackend(losses=losses))
    assert all(a > b for a, b in zip(log.losses, log.losses[1:]))
    # first window averages the first eight scripted losses
    assert log.steps[0].loss == pytest.approx(sum(losses[:8]) / 8)


def test_epoch_remainder_flushes():
    log = run_training(TrainConfig(epochs=2, grad_accum_steps=4), list(range(10)), [], StubBackend())
    assert [s.micro_batches for s in log.steps] == [4, 4, 2, 4, 4, 2]
    assert [s.epoch for s in log.steps] == [1, 1, 1, 2, 2, 2]


def test_data_order_seeded():
    def order(seed):
        stub = StubBackend()
        run_training(TrainConfig(seed=seed, epochs=2), list(range(20)), [], stub)
        return stub.seen_batches

    assert order(1) == order(1)
    assert order(1) != order(2)
    first, second = order(1)[:20], order(1)[20:]
    assert sorted(first) == sorted(second) and first != second


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 10), st.integers(1, 4), st.integers(1, 3))
def test_optimizer_step_count(n, accum, epochs, batch):
    cfg = TrainConfig(epochs=epochs, grad_accum_steps=accum, per_device_batch=batch)
    log = run_training(cfg, list(range(n)), [], StubBackend())
    assert log.total_optimizer_steps == epochs * math.ceil(n / (batch * accum))
    assert len(log.steps) == log.total_optimizer_steps


def test_train_log_round_trip():
    log = run_training(TrainConfig(epochs=1), list(range(9)), [], StubBackend(losses=[1.0] * 9))
    again = TrainLog.from_dict(json.loads(json.dumps(log.to_dict())))
    assert again == log


def test_training_targets_are_model_space():
    records = {"a": ImageRecord("a", "a.png", 1280, 720)}
    anns = [GroundTruthAnnotation("a", HOOKWORM, BoundingBox(0, 0, 1280, 720))]
    (sample,) = build_training_samples(["a"], anns, records, build_prompt(), PreprocessConfig())
    assert sample.prompt == "<OD>"
    assert sample.target_text == "Hookworm<loc_0><loc_218><loc_999><loc_781>"
    (generic,) = build_training_samples(["a"], anns, records, build_prompt(), PreprocessConfig(), label_mode="generic")
    assert generic.target_text.startswith("parasitic egg<loc_")


def test_training_sample_pixels_load_lazily():
    calls = []

    def loader(path):
        calls.append(path)
        return np.zeros((720, 1280, 3), dtype=np.uint8)

    records = {"a": ImageRecord("a", "a.png", 1280, 720)}
    (sample,) = build_training_samples(["a"], [], records, build_prompt(), PreprocessConfig(), loader)
    assert calls == []
    assert sample.image.canvas.shape == (768, 768, 3)
    assert sample.image.normalized.dtype == np.float32
    assert calls == ["a.png"]


def in_memory(arrays):
    def loader(key):
        if arrays[key] is None:
            raise OSError("cannot identify image file")
        return arrays[key]

    return loader


def test_inference_empty_output():
    arrays = {"x": np.zeros((720, 1280, 3), np.uint8)}
    (res,) = run_inference([("x", "x")], StubBackend({"x": ""}), loader=in_memory(arrays))
    assert isinstance(res, InferenceResult)
    assert res.phrases == [] and res.boxes_original == []


def test_inference_full_frame_unprojects():
    arrays = {"x": np.zeros((720, 1280, 3), np.uint8)}
    (res,) = run_inference([("x", "x")], StubBackend({"x": FULL}), loader=in_memory(arrays))
    ((label, box),) = res.boxes_original
    assert label == "Hookworm"
    # one model-space bin is 0.768 px, i.e. 1.28 px of the original frame
    assert box.as_tuple() == pytest.approx((0, 0, 1280, 720), abs=1.28)
    assert res.phrases == decode_output(FULL, 768, 768)


def test_inference_partial_failure():
    arrays = {"a": np.zeros((10, 10, 3), np.uint8), "b": None, "c": np.zeros((20, 10, 3), np.uint8)}
    script = {k: FULL for k in arrays}
    results = run_inference([(k, k) for k in "abc"], StubBackend(script), loader=in_memory(arrays))
    assert [r.image_id for r in results] == ["a", "b", "c"]
    assert [type(r) for r in results] == [InferenceResult, InferenceFailure, InferenceResult]


def test_inference_unscripted_image_is_per_image_failure():
    arrays = {"a": np.zeros((10, 10, 3), np.uint8)}
    (res,) = run_inference([("a", "a")], StubBackend({}), loader=in_memory(arrays))
    assert isinstance(res, InferenceFailure)


def test_inference_requires_generative_backend():
    class TrainOnly(StubBackend):
        generative = False

    with pytest.raises(CapabilityError):
        run_inference([], TrainOnly())


def test_box_in_padding_dropped_with_warning():
    arrays = {"x": np.zeros((720, 1280, 3), np.uint8)}
    text = FULL + "Hookworm<loc_0><loc_0><loc_999><loc_100>"
    (res,) = run_inference([("x", "x")], StubBackend({"x": text}), loader=in_memory(arrays))
    assert len(res.phrases) == len(res.boxes_original) == 1
    assert any("padding" in w for w in res.warnings)


def _random_case(seed, n=8):
    rng = np.random.default_rng(seed)
    arrays, script = {}, {}
    for i in range(n):
        w, h = (int(v) for v in rng.integers(8, 300, size=2))
        arrays[f"im{i}"] = np.zeros((h, w, 3), np.uint8)
        parts = []
        for _ in range(int(rng.integers(0, 4))):
            x0, y0 = (int(v) for v in rng.integers(0, 900, size=2))
            x1, y1 = x0 + int(rng.integers(1, 99)), y0 + int(rng.integers(1, 99))
            parts.append(f"egg<loc_{x0}><loc_{y0}><loc_{x1}><loc_{y1}>")
        script[f"im{i}"] = "".join(parts)
    return arrays, script


@pytest.mark.parametrize("jobs", [1, 4])
def test_inference_order_and_bounds(jobs):
    arrays, script = _random_case(3)
    items = [(k, k) for k in arrays]
    rng = np.random.default_rng(0)
    for _ in range(5):
        perm = [items[i] for i in rng.permutation(len(items))]
        results = run_inference(perm, StubBackend(script), loader=in_memory(arrays), jobs=jobs)
        assert [r.image_id for r in results] == [k for k, _ in perm]
        for r in results:
            h, w = arrays[r.image_id].shape[:2]
            for _, box in r.boxes_original:
                assert clamp_to_image(box, w, h) == box


def test_inference_deterministic_serialization():
    arrays, script = _random_case(11)
    items = [(k, k) for k in arrays]

    def run():
        results = run_inference(items, StubBackend(script), loader=in_memory(arrays), jobs=3)
        return format_predictions(p for r in results for p in r.predictions())

    assert run() == run()


def test_crop_examples():
    image = np.arange(40 * 30 * 3, dtype=np.uint8).reshape(30, 40, 3)
    (full,) = crop_regions(image, [BoundingBox(0, 0, 40, 30)])
    assert np.array_equal(full, image)
    (frac,) = crop_regions(image, [BoundingBox(10.2, 10.2, 20.8, 20.8)])
    assert frac.shape == (11, 11, 3)
    assert np.array_equal(frac, image[10:21, 10:21])
    assert crop_regions(image, []) == []


def test_crop_skips_box_outside_image(caplog):
    image = np.zeros((10, 10), np.uint8)
    crops = crop_regions(image, [BoundingBox(20, 20, 30, 30), BoundingBox(0, 0, 5, 5)])
    assert len(crops) == 1 and crops[0].shape == (5, 5)
    assert "skipping box 0" in caplog.text


def test_get_backend_unknown():
    with pytest.raises(BackendUnavailableError, match="stub"):
        get_backend("nope")


def test_florence_backend_without_weights(tmp_path, monkeypatch):
    pytest.importorskip("transformers")
    monkeypatch.setenv("EGGLOC_MODEL_DIR", str(tmp_path))
    monkeypatch.setenv("HF_HUB_OFFLINE", "1")
    with pytest.raises(BackendUnavailableError, match="EGGLOC_MODEL_DIR"):
        get_backend("florence2")
