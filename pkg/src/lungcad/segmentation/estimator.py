"""Trainable text-prompted segmenter with a scikit-learn style interface."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ..errors import ConfigError, DataError
from ..ingest import NodulePatch, SliceImage, extract_patch
from ..validation import check_binary, check_stacked_images
from .losses import bce_loss, combined_loss, dice_loss
from .model import (
    DEFAULT_PROMPT_SUITE,
    ImageEncoder,
    MaskDecoder,
    SegModelConfig,
    TextPromptEncoder,
    config_from_dict,
    config_to_dict,
    arrays_to_state,
    state_to_arrays,
    tokenize,
)

CHECKPOINT_FORMAT = "lungcad-seg-v1"


@dataclass(frozen=True)
class MaskPrediction:
    """Per-pixel nodule probabilities aligned to the input slice."""

    probs: np.ndarray

    def __post_init__(self):
        if self.probs.ndim != 2:
            raise ValueError(f"probability map must be 2-D, got shape {self.probs.shape}")
        if self.probs.min() < 0.0 or self.probs.max() > 1.0:
            raise ValueError("probabilities must lie in [0, 1]")

    def binarize(self, threshold: float = 0.5) -> np.ndarray:
        return self.probs >= threshold


def find_candidates(binary_mask: np.ndarray, min_size: int = 4):
    """8-connected components, small ones dropped; returns (bbox, component) pairs."""
    structure = np.ones((3, 3), dtype=int)
    labeled, n = ndimage.label(binary_mask, structure=structure)
    candidates = []
    for label in range(1, n + 1):
        component = labeled == label
        if component.sum() < min_size:
            continue
        ys, xs = np.nonzero(component)
        bbox = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        candidates.append((bbox, component))
    return candidates


class TextPromptSegmenter(BaseEstimator):
    """Segment nodules from CT slices given a text prompt.

    fit(X, y) prefix-tunes the text prompt encoder on (slice, mask) pairs
    while the image encoder and mask decoder stay frozen; each training
    sample is paired with a prompt drawn uniformly from the prompt suite.

    Parameters mirror the full-scale training recipe by default
    (learning rate 5e-5, batch size 16, 500 epochs, AdamW).
    """

    def __init__(
        self,
        config: SegModelConfig | None = None,
        prompts: tuple = DEFAULT_PROMPT_SUITE,
        learning_rate: float = 5e-5,
        batch_size: int = 16,
        epochs: int = 500,
        weight_decay: float = 0.01,
        seed: int = 0,
        bin_threshold: float = 0.5,
        min_component_size: int = 4,
        log_path=None,
    ):
        self.config = config
        self.prompts = prompts
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.seed = seed
        self.bin_threshold = bin_threshold
        self.min_component_size = min_component_size
        self.log_path = log_path

    # ------------------------------------------------------------------ setup

    def _validate_prompts(self):
        prompts = tuple(self.prompts)
        if not prompts:
            raise ConfigError("prompt suite must be non-empty")
        if len(set(prompts)) != len(prompts):
            raise ConfigError("prompt suite entries must be unique")
        return prompts

    def _build(self):
        config = self.config if self.config is not None else SegModelConfig.toy()
        torch.manual_seed(self.seed)
        self.image_encoder_ = ImageEncoder(config)
        self.prompt_encoder_ = TextPromptEncoder(config)
        self.mask_decoder_ = MaskDecoder(config)
        if config.freeze_image_encoder:
            self.image_encoder_.requires_grad_(False)
        if config.freeze_mask_decoder:
            self.mask_decoder_.requires_grad_(False)
        self.image_encoder_.eval()
        self.mask_decoder_.eval()
        self.config_ = config
        self.prompts_ = self._validate_prompts()
        self.prompt_tokens_ = {p: torch.tensor(tokenize(p), dtype=torch.long) for p in self.prompts_}
        self.epoch_ = 0
        self.loss_history_ = []

    def _check_fitted(self):
        if not hasattr(self, "prompt_encoder_"):
            raise NotFittedError("this segmenter has not been fitted or loaded yet")

    # ------------------------------------------------------------ core pieces

    def encode_image(self, pixels: np.ndarray) -> torch.Tensor:
        """Frozen, gradient-isolated token grid for one slice or a batch."""
        self._check_fitted()
        arr = check_stacked_images(pixels, "slices")
        with torch.no_grad():
            return self.image_encoder_(torch.as_tensor(arr, dtype=torch.float32))

    def encode_text(self, prompt: str, with_grad: bool = False) -> torch.Tensor:
        """Prompt feature sequence: trained prefix tokens plus encoded text."""
        self._check_fitted()
        ids = self.prompt_tokens_.get(prompt)
        if ids is None:
            ids = torch.tensor(tokenize(prompt), dtype=torch.long)
        if with_grad:
            return self.prompt_encoder_(ids)
        with torch.no_grad():
            return self.prompt_encoder_(ids)

    def decode(self, tokens: torch.Tensor, prompt_features: torch.Tensor, pixels) -> MaskPrediction:
        """Cross-attend prompt features over one embedded slice."""
        self._check_fitted()
        arr = check_stacked_images(pixels, "slices")
        with torch.no_grad():
            probs = self.mask_decoder_(
                tokens if tokens.ndim == 4 else tokens[None],
                prompt_features[None] if prompt_features.ndim == 2 else prompt_features,
                torch.as_tensor(arr, dtype=torch.float32),
            )
        return MaskPrediction(probs=probs[0].numpy().astype(np.float64))

    # ---------------------------------------------------------------- training

    def fit(self, X, y):
        """Prefix-tune the prompt encoder on (slice, mask) pairs."""
        slices = check_stacked_images(X, "X")
        masks = check_binary(np.asarray(y), "y")
        if masks.shape != slices.shape:
            raise ValueError(f"X shape {slices.shape} does not match y shape {masks.shape}")
        if len(slices) == 0:
            raise ValueError("training set is empty")
        self._build()
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")

        images = torch.as_tensor(slices, dtype=torch.float32)
        targets = torch.as_tensor(masks, dtype=torch.float32)
        with torch.no_grad():
            token_grids = torch.cat(
                [self.image_encoder_(images[i : i + 32]) for i in range(0, len(images), 32)]
            )

        self.optimizer_ = torch.optim.AdamW(
            self.prompt_encoder_.parameters(),
            lr=self.learning_rate,
            weight_decay=self.weight_decay,
        )
        rng = np.random.default_rng(self.seed)
        n = len(images)
        log_rows = []
        for epoch in range(self.epochs):
            # Every sample draws its prompt uniformly from the suite, then
            # batches are formed within each prompt group: prompt feature
            # sequences differ in length, so a batch decodes one prompt.
            order = rng.permutation(n)
            prompt_choice = rng.integers(0, len(self.prompts_), size=n)
            batches = []
            for pi in range(len(self.prompts_)):
                members = order[prompt_choice[order] == pi]
                for start in range(0, len(members), self.batch_size):
                    batches.append((pi, members[start : start + self.batch_size]))
            batches = [batches[i] for i in rng.permutation(len(batches))]
            epoch_bce = epoch_dice = 0.0
            for n_batches, (pi, idx) in enumerate(batches):
                feats = self.prompt_encoder_(self.prompt_tokens_[self.prompts_[pi]])
                probs = self.mask_decoder_(
                    token_grids[idx],
                    feats[None].expand(len(idx), -1, -1).contiguous(),
                    images[idx],
                )
                bce = bce_loss(probs, targets[idx])
                dice = torch.stack(
                    [dice_loss(p, g) for p, g in zip(probs, targets[idx])]
                ).mean()
                loss = bce + dice
                if not torch.isfinite(loss):
                    raise DataError(
                        f"non-finite loss at epoch {epoch}, batch {n_batches}: "
                        f"bce={float(bce.detach())}, dice={float(dice.detach())}"
                    )
                self.optimizer_.zero_grad(set_to_none=True)
                loss.backward()
                self.optimizer_.step()
                epoch_bce += float(bce.detach())
                epoch_dice += float(dice.detach())
            n_batches = len(batches)
            mean_bce = epoch_bce / n_batches
            mean_dice = epoch_dice / n_batches
            self.loss_history_.append(mean_bce + mean_dice)
            log_rows.append((epoch, mean_bce, mean_dice, mean_bce + mean_dice))
            self.epoch_ = epoch + 1
        if self.log_path is not None:
            with open(self.log_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["epoch", "bce", "dice", "total"])
                writer.writerows(log_rows)
        return self

    # --------------------------------------------------------------- inference

    def predict_proba(self, X, prompt: str = "nodule") -> np.ndarray:
        """Per-pixel nodule probabilities for a batch of slices."""
        self._check_fitted()
        slices = check_stacked_images(X, "X")
        images = torch.as_tensor(slices, dtype=torch.float32)
        feats = self.encode_text(prompt)
        out = []
        with torch.no_grad():
            for start in range(0, len(images), 32):
                chunk = images[start : start + 32]
                grids = self.image_encoder_(chunk)
                probs = self.mask_decoder_(grids, feats[None].expand(len(chunk), -1, -1), chunk)
                out.append(probs.numpy().astype(np.float64))
        return np.concatenate(out)

    def predict(self, X, prompt: str = "nodule") -> np.ndarray:
        return self.predict_proba(X, prompt=prompt) >= self.bin_threshold

    def score(self, X, y, prompt: str = "nodule") -> float:
        """Mean per-slice Dice coefficient of the binarized predictions."""
        preds = self.predict(X, prompt=prompt)
        masks = np.asarray(y).astype(bool)
        scores = []
        for p, g in zip(preds, masks):
            inter = np.logical_and(p, g).sum()
            denom = p.sum() + g.sum()
            scores.append(1.0 if denom == 0 else 2.0 * inter / denom)
        return float(np.mean(scores))

    def segment(
        self,
        slice_image,
        prompt: str = "nodule",
        bin_threshold: float | None = None,
        patch_size: int = 96,
    ) -> tuple[MaskPrediction, list, list]:
        """Segment one slice and cut a candidate patch per connected component.

        Returns the probability map, tight bounding boxes of the surviving
        8-connected components, and a resized patch per box. An empty mask
        yields empty candidate lists.
        """
        self._check_fitted()
        if isinstance(slice_image, SliceImage):
            pixels = slice_image.pixels
            meta = slice_image
        else:
            pixels = np.asarray(slice_image, dtype=np.float64)
            meta = SliceImage(pixels=pixels, slice_index=-1, scan_id="")
        threshold = self.bin_threshold if bin_threshold is None else bin_threshold
        probs = self.predict_proba(pixels[None], prompt=prompt)[0]
        prediction = MaskPrediction(probs=probs)
        boxes, patches = [], []
        for bbox, _component in find_candidates(prediction.binarize(threshold), self.min_component_size):
            boxes.append(bbox)
            patches.append(extract_patch(meta, bbox, out_size=patch_size))
        return prediction, boxes, patches

    # ------------------------------------------------------------- persistence

    def save(self, path) -> None:
        """Write a single-archive checkpoint: parameter arrays + JSON header."""
        self._check_fitted()
        header = {
            "format": CHECKPOINT_FORMAT,
            "config": config_to_dict(self.config_),
            "prompt_suite": list(self.prompts_),
            "seed": self.seed,
            "epoch": self.epoch_,
            "hyper": {
                "learning_rate": self.learning_rate,
                "batch_size": self.batch_size,
                "epochs": self.epochs,
                "weight_decay": self.weight_decay,
                "bin_threshold": self.bin_threshold,
                "min_component_size": self.min_component_size,
            },
        }
        arrays = {}
        arrays.update(state_to_arrays(self.image_encoder_, "image_encoder"))
        arrays.update(state_to_arrays(self.prompt_encoder_, "prompt_encoder"))
        arrays.update(state_to_arrays(self.mask_decoder_, "mask_decoder"))
        arrays["loss_history"] = np.asarray(self.loss_history_, dtype=np.float64)
        buffer = io.BytesIO()
        np.savez(buffer, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **arrays)
        Path(path).write_bytes(buffer.getvalue())

    @classmethod
    def load(cls, path, config: SegModelConfig | None = None) -> "TextPromptSegmenter":
        """Load a checkpoint; a mismatching expected config is rejected."""
        with np.load(path) as archive:
            header = json.loads(bytes(archive["header"]).decode())
            if header.get("format") != CHECKPOINT_FORMAT:
                raise ConfigError(f"not a segmenter checkpoint: format {header.get('format')!r}")
            stored = config_from_dict(header["config"])
            if config is not None and config != stored:
                raise ConfigError(
                    f"checkpoint config {stored} does not match requested config {config}"
                )
            hyper = header["hyper"]
            est = cls(
                config=stored,
                prompts=tuple(header["prompt_suite"]),
                learning_rate=hyper["learning_rate"],
                batch_size=hyper["batch_size"],
                epochs=hyper["epochs"],
                weight_decay=hyper["weight_decay"],
                seed=header["seed"],
                bin_threshold=hyper["bin_threshold"],
                min_component_size=hyper["min_component_size"],
            )
            est._build()
            arrays = {k: archive[k] for k in archive.files if k != "header"}
        est.image_encoder_.load_state_dict(arrays_to_state(arrays, "image_encoder"))
        est.prompt_encoder_.load_state_dict(arrays_to_state(arrays, "prompt_encoder"))
        est.mask_decoder_.load_state_dict(arrays_to_state(arrays, "mask_decoder"))
        est.loss_history_ = arrays["loss_history"].tolist()
        est.epoch_ = header["epoch"]
        return est
