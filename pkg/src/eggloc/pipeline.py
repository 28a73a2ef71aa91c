"""Fine-tuning and inference orchestration around a pluggable model backend.

The backend owns the network, optimizer and loss. This module owns data
order, gradient-accumulation bookkeeping, coordinate spaces and cropping.
"""
from __future__ import annotations

import abc
import hashlib
import json
import logging
import math
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Hashable, Mapping, Optional, Sequence, Union

import numpy as np

from eggloc.dataset_io import GroundTruthAnnotation, ImageRecord
from eggloc.errors import (
    BackendUnavailableError,
    CapabilityError,
    DegenerateBoxError,
    HarnessError,
    ValidationError,
)
from eggloc.geometry import BoundingBox, clamp_to_image
from eggloc.loc_codec import (
    DetectionPrompt,
    GroundedPhrase,
    build_prompt,
    decode_with_warnings,
    encode_training_target,
)
from eggloc.predictions import Prediction
from eggloc.preprocess import (
    LetterboxTransform,
    PreprocessConfig,
    letterbox_image,
    load_image,
    make_transform,
    normalize_pixels,
    project_box,
    unproject_box,
)

logger = logging.getLogger(__name__)

GENERIC_LABEL = "parasitic egg"


# --------------------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainConfig:
    """Fine-tuning hyperparameters. Defaults are the published experiment's values."""

    epochs: int = 3
    learning_rate: float = 5e-5
    per_device_batch: int = 1
    grad_accum_steps: int = 8
    adapter_rank: int = 8
    image_size: int = 768
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "per_device_batch", "grad_accum_steps", "adapter_rank", "image_size"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ValidationError(f"{name} must be an integer >= 1, got {v!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ValidationError(f"seed must be an integer, got {self.seed!r}")
        lr = self.learning_rate
        if isinstance(lr, bool) or not isinstance(lr, (int, float)) or not (lr > 0 and math.isfinite(lr)):
            raise ValidationError(f"learning_rate must be a positive number, got {lr!r}")
        object.__setattr__(self, "learning_rate", float(lr))

    @property
    def effective_batch(self) -> int:
        return self.per_device_batch * self.grad_accum_steps

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown TrainConfig key(s): {unknown}")
        return cls(**dict(data))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> TrainConfig:
        return cls.from_dict(json.loads(text))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


# --------------------------------------------------------------------------- backend contract


@dataclass
class ModelImage:
    """One preprocessed model input.

    ``canvas`` is the letterboxed uint8 image; pixels are decoded lazily
    through ``loader`` when the backend first asks for them.
    """

    image_id: Hashable
    transform: Optional[LetterboxTransform] = None
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    loader: Optional[Callable[[], np.ndarray]] = None
    _canvas: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def canvas(self) -> np.ndarray:
        if self._canvas is None:
            if self.loader is None:
                raise ValidationError(f"image {self.image_id!r} has no pixel source")
            raw = np.asarray(self.loader())
            t = self.transform or make_transform(raw.shape[1], raw.shape[0], self.preprocess)
            self.transform = t
            self._canvas = letterbox_image(raw, t, self.preprocess.pad_value)
        return self._canvas

    @property
    def normalized(self) -> np.ndarray:
        return normalize_pixels(self.canvas, self.preprocess)


@dataclass
class TrainingSample:
    image: ModelImage
    prompt: str
    target_text: str


class BackendContract(abc.ABC):
    """What the orchestrator needs from a model backend.

    Subclasses set the capability flags and implement the methods they
    support. ``generate`` must be deterministic for a fixed seed and state.
    """

    name: str = "abstract"
    trainable: bool = False
    generative: bool = False
    # whether generate() may be called from several threads at once
    concurrent_safe: bool = False

    @property
    def capabilities(self) -> dict:
        return {"trainable": self.trainable, "generative": self.generative}

    def begin_training(self, config: TrainConfig) -> None:
        """Called once before the first micro-batch."""

    def train_step(self, batch: Sequence[TrainingSample]) -> float:
        raise CapabilityError(f"backend {self.name!r} cannot train")

    def optimizer_step(self) -> None:
        raise CapabilityError(f"backend {self.name!r} cannot train")

    def generate(self, image: ModelImage, prompt: str) -> str:
        raise CapabilityError(f"backend {self.name!r} cannot generate")

    @abc.abstractmethod
    def save_adapter(self, path: Union[str, Path]) -> None: ...

    @abc.abstractmethod
    def load_adapter(self, path: Union[str, Path]) -> None: ...


class StubBackend(BackendContract):
    """Deterministic offline double.

    ``generate`` returns ``script[image_id]``; ``train_step`` returns the
    scripted ``losses`` in order (0.0 forever when ``losses`` is None).
    Anything unscripted raises :class:`HarnessError`.
    """

    name = "stub"
    trainable = True
    generative = True
    concurrent_safe = True

    def __init__(self, script: Optional[Mapping] = None, losses: Optional[Sequence[float]] = None):
        self.script = dict(script or {})
        self.losses = None if losses is None else [float(x) for x in losses]
        self.train_calls = 0
        self.optimizer_steps = 0
        self.seen_batches: list[list[Hashable]] = []

    def train_step(self, batch):
        if self.losses is None:
            loss = 0.0
        elif self.train_calls >= len(self.losses):
            raise HarnessError(f"loss script exhausted after {len(self.losses)} train_step calls")
        else:
            loss = self.losses[self.train_calls]
        self.train_calls += 1
        self.seen_batches.append([s.image.image_id for s in batch])
        return loss

    def optimizer_step(self):
        self.optimizer_steps += 1

    def generate(self, image, prompt):
        image_id = getattr(image, "image_id", image)
        try:
            return self.script[image_id]
        except KeyError:
            # JSON scripts key everything by string
            if str(image_id) in self.script:
                return self.script[str(image_id)]
            raise HarnessError(f"no scripted output for image {image_id!r}") from None

    def save_adapter(self, path):
        Path(path).write_text(
            json.dumps({"backend": self.name, "optimizer_steps": self.optimizer_steps}) + "\n"
        )

    def load_adapter(self, path):
        self.optimizer_steps = int(json.loads(Path(path).read_text())["optimizer_steps"])


def _florence(**options):
    from eggloc.florence import Florence2Backend

    return Florence2Backend(**options)


BACKENDS: dict[str, Callable[..., BackendContract]] = {
    "stub": StubBackend,
    "florence2": _florence,
}


def get_backend(name: str, **options) -> BackendContract:
    """Instantiate a registered backend by name.

    Raises:
        BackendUnavailableError: unknown name, or the backend's runtime is missing.
    """
    if name not in BACKENDS:
        raise BackendUnavailableError(
            f"unknown backend {name!r}; available: {', '.join(sorted(BACKENDS))}"
        )
    return BACKENDS[name](**options)


# --------------------------------------------------------------------------- training


@dataclass(frozen=True)
class StepRecord:
    epoch: int
    step: int
    loss: float
    micro_batches: int


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    total_optimizer_steps: int = 0
    n_train: int = 0
    config: Optional[TrainConfig] = None

    @property
    def losses(self) -> list[float]:
        return [s.loss for s in self.steps]

    def to_dict(self) -> dict:
        return {
            "config": None if self.config is None else self.config.to_dict(),
            "n_train": self.n_train,
            "total_optimizer_steps": self.total_optimizer_steps,
            "steps": [asdict(s) for s in self.steps],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> TrainLog:
        cfg = data.get("config")
        return cls(
            steps=[StepRecord(**s) for s in data["steps"]],
            total_optimizer_steps=int(data["total_optimizer_steps"]),
            n_train=int(data["n_train"]),
            config=None if cfg is None else TrainConfig.from_dict(cfg),
        )


def expected_optimizer_steps(n_train: int, config: TrainConfig) -> int:
    return config.epochs * math.ceil(n_train / config.effective_batch)


def _target_label(category_name: str, label_mode: str) -> str:
    if label_mode == "generic":
        return GENERIC_LABEL
    if label_mode == "category":
        return category_name
    raise ValidationError(f"label_mode must be 'category' or 'generic', got {label_mode!r}")


def build_training_samples(
    train_ids: Sequence[Hashable],
    annotations: Sequence[GroundTruthAnnotation],
    images: Optional[Mapping[Hashable, ImageRecord]],
    prompt: DetectionPrompt,
    preprocess: PreprocessConfig,
    image_loader: Callable = load_image,
    label_mode: str = "category",
) -> list[TrainingSample]:
    """Model-space target text and a lazy pixel source for every training image."""
    by_image: dict[Hashable, list[GroundTruthAnnotation]] = {}
    for ann in annotations:
        by_image.setdefault(ann.image_id, []).append(ann)

    size = preprocess.target_size
    samples = []
    for image_id in train_ids:
        anns = by_image.get(image_id, [])
        record = None if images is None else images.get(image_id)
        transform = None
        loader = None
        if record is not None:
            transform = make_transform(record.width, record.height, preprocess)
            loader = (lambda p=record.file_path: image_loader(p))
        elif anns:
            raise ValidationError(f"image {image_id!r} has annotations but no image record")
        phrases = [
            GroundedPhrase(_target_label(a.category.name, label_mode), project_box(a.box, transform))
            for a in anns
        ]
        samples.append(
            TrainingSample(
                image=ModelImage(image_id, transform, preprocess, loader),
                prompt=prompt.task_text,
                target_text=encode_training_target(phrases, size, size),
            )
        )
    return samples


def run_training(
    config: TrainConfig,
    train_ids: Sequence[Hashable],
    annotations: Sequence[GroundTruthAnnotation],
    backend: BackendContract,
    images: Optional[Mapping[Hashable, ImageRecord]] = None,
    *,
    prompt: Optional[DetectionPrompt] = None,
    preprocess: Optional[PreprocessConfig] = None,
    image_loader: Callable = load_image,
    label_mode: str = "category",
) -> TrainLog:
    """Run ``config.epochs`` passes over the training images.

    Micro-batches of ``per_device_batch`` samples go to ``backend.train_step``;
    every ``grad_accum_steps`` micro-batches, and once more at the end of an
    epoch for any remainder, ``backend.optimizer_step`` is called. Accumulation
    never crosses an epoch boundary. Sample order is reshuffled each epoch from
    ``config.seed``.

    Raises:
        CapabilityError: backend is not trainable.
        ValidationError: no training ids.
    """
    if not backend.trainable:
        raise CapabilityError(f"backend {backend.name!r} is not trainable")
    train_ids = list(train_ids)
    if not train_ids:
        raise ValidationError("training set is empty")
    preprocess = preprocess or PreprocessConfig(target_size=config.image_size)
    prompt = prompt or build_prompt()

    samples = build_training_samples(
        train_ids, annotations, images, prompt, preprocess, image_loader, label_mode
    )
    rng = random.Random(config.seed)
    log = TrainLog(n_train=len(samples), config=config)
    backend.begin_training(config)

    b, accum = config.per_device_batch, config.grad_accum_steps
    for epoch in range(1, config.epochs + 1):
        order = list(range(len(samples)))
        rng.shuffle(order)
        micro = [order[i : i + b] for i in range(0, len(order), b)]
        window: list[float] = []
        for k, idx in enumerate(micro, 1):
            window.append(float(backend.train_step([samples[i] for i in idx])))
            if len(window) == accum or k == len(micro):
                backend.optimizer_step()
                log.total_optimizer_steps += 1
                log.steps.append(
                    StepRecord(epoch, log.total_optimizer_steps, sum(window) / len(window), len(window))
                )
                logger.debug("epoch %d step %d loss %.6f", epoch, log.total_optimizer_steps, log.steps[-1].loss)
                window = []
    return log


# --------------------------------------------------------------------------- inference


@dataclass
class InferenceResult:
    image_id: Hashable
    raw_text: str
    phrases: list[GroundedPhrase]
    boxes_original: list[tuple[str, BoundingBox]]
    warnings: list[str] = field(default_factory=list)

    def predictions(self) -> list[Prediction]:
        return [Prediction(self.image_id, label, box, self.raw_text) for label, box in self.boxes_original]


@dataclass
class InferenceFailure:
    image_id: Hashable
    error: str


def _infer_one(image_id, source, backend, preprocess, prompt, loader, lock):
    try:
        pixels = np.asarray(loader(source))
        if pixels.ndim not in (2, 3) or pixels.size == 0:
            raise ValidationError(f"decoded image has unusable shape {pixels.shape}")
        t = make_transform(pixels.shape[1], pixels.shape[0], preprocess)
        canvas = letterbox_image(pixels, t, preprocess.pad_value)
    except Exception as exc:  # noqa: BLE001 - any decode failure is per-image
        return InferenceFailure(image_id, f"unreadable image {source!s}: {exc}")

    model_image = ModelImage(image_id, t, preprocess, _canvas=canvas)
    try:
        if lock is None:
            text = backend.generate(model_image, prompt.task_text)
        else:
            with lock:
                text = backend.generate(model_image, prompt.task_text)
    except (CapabilityError, BackendUnavailableError):
        raise
    except Exception as exc:  # noqa: BLE001
        return InferenceFailure(image_id, f"generation failed: {exc}")

    text = "" if text is None else str(text)
    phrases, warnings = decode_with_warnings(text, t.target_size, t.target_size)
    kept, originals = [], []
    for phrase in phrases:
        try:
            originals.append((phrase.label, unproject_box(phrase.box, t)))
        except DegenerateBoxError:
            warnings.append(f"dropped {phrase.label!r}: box lies entirely in the padding")
            continue
        kept.append(phrase)
    return InferenceResult(image_id, text, kept, originals, warnings)


def run_inference(
    images: Sequence[tuple[Hashable, Any]],
    backend: BackendContract,
    preprocess: Optional[PreprocessConfig] = None,
    prompt: Optional[DetectionPrompt] = None,
    *,
    loader: Callable[[Any], np.ndarray] = load_image,
    jobs: int = 1,
) -> list[Union[InferenceResult, InferenceFailure]]:
    """Letterbox, generate, decode and map back to original pixels, per image.

    ``images`` holds ``(image_id, source)`` pairs; ``loader(source)`` must
    return an HxW(xC) uint8 array. An image that cannot be decoded yields an
    :class:`InferenceFailure` in its slot and the batch carries on. Output
    order always matches input order.
    """
    if not backend.generative:
        raise CapabilityError(f"backend {backend.name!r} cannot generate")
    if jobs < 1:
        raise ValidationError(f"jobs must be >= 1, got {jobs}")
    preprocess = preprocess or PreprocessConfig()
    prompt = prompt or build_prompt()
    lock = None if backend.concurrent_safe else threading.Lock()

    def work(item):
        image_id, source = item
        return _infer_one(image_id, source, backend, preprocess, prompt, loader, lock)

    if jobs == 1:
        return [work(item) for item in images]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(work, images))


# --------------------------------------------------------------------------- cropping


def crop_regions(image: np.ndarray, boxes: Sequence[BoundingBox]) -> list[np.ndarray]:
    """Cut one sub-image per box.

    Boxes are clamped to the image and widened to whole pixels with
    ``floor`` on the min corner and ``ceil`` on the max corner. Boxes with
    nothing left inside the image are skipped with a logged warning.
    """
    image = np.asarray(image)
    if image.ndim < 2 or image.size == 0:
        raise ValidationError("cannot crop an empty image")
    h, w = image.shape[:2]
    crops = []
    for i, box in enumerate(boxes):
        try:
            c = clamp_to_image(box, w, h)
        except DegenerateBoxError:
            logger.warning("skipping box %d %s: outside the %dx%d image", i, tuple(box.as_tuple()), w, h)
            continue
        x0, y0 = math.floor(c.x_min), math.floor(c.y_min)
        x1, y1 = math.ceil(c.x_max), math.ceil(c.y_max)
        crops.append(image[y0:y1, x0:x1].copy())
    return crops
