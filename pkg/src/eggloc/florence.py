"""Florence-2 backend with a low-rank adapter.

Optional: needs ``torch``, ``transformers`` and ``peft`` (``pip install
eggloc[florence]``) plus the model weights. Weights are read from the
directory in ``EGGLOC_MODEL_DIR`` when set, otherwise fetched by hub id.
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Optional, Sequence, Union

from eggloc.errors import BackendUnavailableError, CapabilityError
from eggloc.pipeline import BackendContract, ModelImage, TrainConfig, TrainingSample

MODEL_DIR_ENV = "EGGLOC_MODEL_DIR"
DEFAULT_MODEL_ID = "microsoft/Florence-2-large"
# attention and MLP projections of the language model and the vision tower
DEFAULT_TARGET_MODULES = ("q_proj", "k_proj", "v_proj", "out_proj", "fc1", "fc2", "qkv", "proj")


class Florence2Backend(BackendContract):
    name = "florence2"
    trainable = True
    generative = True
    concurrent_safe = False

    def __init__(
        self,
        model_id: Optional[str] = None,
        device: Optional[str] = None,
        num_beams: int = 3,
        max_new_tokens: int = 1024,
        lora_alpha: int = 16,
        lora_dropout: float = 0.05,
        target_modules: Sequence[str] = DEFAULT_TARGET_MODULES,
        adapter_path: Optional[str] = None,
    ):
        try:
            import torch
            from transformers import AutoModelForCausalLM, AutoProcessor
        except ImportError as exc:
            raise BackendUnavailableError(
                f"backend 'florence2' needs torch and transformers ({exc.name} is missing); "
                "install with: pip install 'eggloc[florence]'"
            ) from None
        self._torch = torch
        self.model_id = model_id or os.environ.get(MODEL_DIR_ENV) or DEFAULT_MODEL_ID
        self.device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        self.num_beams = num_beams
        self.max_new_tokens = max_new_tokens
        self.lora_alpha = lora_alpha
        self.lora_dropout = lora_dropout
        self.target_modules = list(target_modules)
        try:
            self.processor = AutoProcessor.from_pretrained(self.model_id, trust_remote_code=True)
            self.model = AutoModelForCausalLM.from_pretrained(self.model_id, trust_remote_code=True)
        except (OSError, ValueError) as exc:
            raise BackendUnavailableError(
                f"backend 'florence2' cannot load weights from {self.model_id!r}: {exc}. "
                f"Point {MODEL_DIR_ENV} at a local copy of the model."
            ) from None
        self.model.to(self.device)
        self.optimizer = None
        self._accum = 1
        if adapter_path:
            self.load_adapter(adapter_path)

    def begin_training(self, config: TrainConfig) -> None:
        try:
            from peft import LoraConfig, get_peft_model
        except ImportError:
            raise BackendUnavailableError(
                "backend 'florence2' needs peft for adapter training; pip install 'eggloc[florence]'"
            ) from None
        self._torch.manual_seed(config.seed)
        lora = LoraConfig(
            r=config.adapter_rank,
            lora_alpha=self.lora_alpha,
            lora_dropout=self.lora_dropout,
            target_modules=self.target_modules,
            bias="none",
        )
        self.model = get_peft_model(self.model, lora)
        self.model.train()
        params = [p for p in self.model.parameters() if p.requires_grad]
        self.optimizer = self._torch.optim.AdamW(params, lr=config.learning_rate)
        self.optimizer.zero_grad()
        self._accum = config.grad_accum_steps

    def _inputs(self, images: Sequence[ModelImage], prompts: Sequence[str]):
        from PIL import Image

        pil = [Image.fromarray(im.canvas).convert("RGB") for im in images]
        inputs = self.processor(text=list(prompts), images=pil, return_tensors="pt", padding=True)
        return {k: v.to(self.device) for k, v in inputs.items()}

    def train_step(self, batch: Sequence[TrainingSample]) -> float:
        if self.optimizer is None:
            raise CapabilityError("begin_training() must run before train_step()")
        inputs = self._inputs([s.image for s in batch], [s.prompt for s in batch])
        tok = self.processor.tokenizer
        labels = tok(
            [s.target_text for s in batch], return_tensors="pt", padding=True, return_token_type_ids=False
        ).input_ids.to(self.device)
        labels[labels == tok.pad_token_id] = -100
        out = self.model(input_ids=inputs["input_ids"], pixel_values=inputs["pixel_values"], labels=labels)
        (out.loss / self._accum).backward()
        return float(out.loss.detach().cpu())

    def optimizer_step(self) -> None:
        self.optimizer.step()
        self.optimizer.zero_grad()

    def generate(self, image: ModelImage, prompt: str) -> str:
        self.model.eval()
        inputs = self._inputs([image], [prompt])
        with self._torch.no_grad():
            ids = self.model.generate(
                input_ids=inputs["input_ids"],
                pixel_values=inputs["pixel_values"],
                max_new_tokens=self.max_new_tokens,
                num_beams=self.num_beams,
                do_sample=False,
            )
        return self.processor.batch_decode(ids, skip_special_tokens=False)[0]

    def save_adapter(self, path: Union[str, Path]) -> None:
        self.model.save_pretrained(str(path))

    def load_adapter(self, path: Union[str, Path]) -> None:
        try:
            from peft import PeftModel
        except ImportError:
            raise BackendUnavailableError("loading an adapter needs peft; pip install 'eggloc[florence]'") from None
        self.model = PeftModel.from_pretrained(self.model, str(path)).to(self.device)
