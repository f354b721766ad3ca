"""Contrastive alignment trainer with a scikit-learn style interface."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from ..errors import ConfigError, DataError
from ..validation import check_stacked_images
from .losses import sce_loss
from .model import (
    AlignConfig,
    AlignedEncoders,
    FEATURE_RESCALE_OFFSET,
    FEATURE_RESCALE_SCALE,
    align_config_from_dict,
    align_config_to_dict,
    similarity_matrix,
)

CHECKPOINT_FORMAT = "lungcad-align-v1"


class PatchFeatureAligner(BaseEstimator, TransformerMixin):
    """Align nodule patch embeddings with radiomic feature embeddings.

    fit(X, F) trains the image trunk and both projection heads to maximize
    diagonal cosine similarity of matched (patch, feature-vector) pairs
    under the symmetric cross-entropy objective. transform(X) returns
    unit-norm joint embeddings for patches; project_features(F) does the
    same for radiomic vectors.
    """

    def __init__(
        self,
        config: AlignConfig | None = None,
        learning_rate: float = 5e-5,
        batch_size: int = 8,
        epochs: int = 500,
        weight_decay: float = 0.01,
        seed: int = 0,
        log_path=None,
    ):
        self.config = config
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.seed = seed
        self.log_path = log_path

    def _check_fitted(self):
        if not hasattr(self, "encoders_"):
            raise NotFittedError("this aligner has not been fitted or loaded yet")

    def _build(self):
        config = self.config if self.config is not None else AlignConfig.toy()
        torch.manual_seed(self.seed)
        self.encoders_ = AlignedEncoders(config)
        self.config_ = config
        self.epoch_ = 0
        self.loss_history_ = []

    def fit(self, X, F):
        """Train on matched pairs: X patches (n, p, p), F feature rows (n, 8)."""
        patches = check_stacked_images(X, "X")
        features = np.asarray(F, dtype=np.float64)
        if features.ndim != 2 or len(features) != len(patches):
            raise ValueError(
                f"feature matrix shape {features.shape} does not pair with {len(patches)} patches"
            )
        self._build()
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.batch_size > len(patches):
            raise ConfigError(
                f"batch_size {self.batch_size} exceeds the {len(patches)}-pair training set"
            )
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")

        images = torch.as_tensor(patches, dtype=torch.float32)
        feats = torch.as_tensor(features, dtype=torch.float32)
        config = self.config_
        self.optimizer_ = torch.optim.AdamW(
            self.encoders_.parameters(), lr=self.learning_rate, weight_decay=self.weight_decay
        )
        rng = np.random.default_rng(self.seed)
        n = len(images)
        log_rows = []
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            epoch_loss = 0.0
            n_batches = 0
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                if len(idx) < 2:
                    continue  # a 1-pair batch carries no contrastive signal
                img_emb = self.encoders_.encode_patches(images[idx])
                feat_emb = self.encoders_.project_features(feats[idx])
                sim = similarity_matrix(img_emb, feat_emb)
                loss = sce_loss(
                    sim,
                    temperature=config.temperature,
                    alpha=config.alpha,
                    beta=config.beta,
                )
                if not torch.isfinite(loss):
                    raise DataError(f"non-finite loss at epoch {epoch}, batch {n_batches}")
                self.optimizer_.zero_grad(set_to_none=True)
                loss.backward()
                self.optimizer_.step()
                epoch_loss += float(loss.detach())
                n_batches += 1
            mean_loss = epoch_loss / max(n_batches, 1)
            self.loss_history_.append(mean_loss)
            log_rows.append((epoch, mean_loss))
            self.epoch_ = epoch + 1
        if self.log_path is not None:
            with open(self.log_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["epoch", "sce"])
                writer.writerows(log_rows)
        return self

    def transform(self, X) -> np.ndarray:
        """Unit-norm joint embeddings for patches, shape (n, joint_dim)."""
        self._check_fitted()
        patches = check_stacked_images(X, "X")
        self.encoders_.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(patches), 64):
                chunk = torch.as_tensor(patches[start : start + 64], dtype=torch.float32)
                out.append(self.encoders_.encode_patches(chunk).numpy().astype(np.float64))
        return np.concatenate(out)

    def project_features(self, F) -> np.ndarray:
        """Unit-norm joint embeddings for radiomic vectors, shape (n, joint_dim)."""
        self._check_fitted()
        features = np.atleast_2d(np.asarray(F, dtype=np.float64))
        self.encoders_.eval()
        with torch.no_grad():
            emb = self.encoders_.project_features(torch.as_tensor(features, dtype=torch.float32))
        return emb.numpy().astype(np.float64)

    def save(self, path) -> None:
        self._check_fitted()
        header = {
            "format": CHECKPOINT_FORMAT,
            "config": align_config_to_dict(self.config_),
            "seed": self.seed,
            "epoch": self.epoch_,
            "feature_rescale": {"offset": FEATURE_RESCALE_OFFSET, "scale": FEATURE_RESCALE_SCALE},
            "hyper": {
                "learning_rate": self.learning_rate,
                "batch_size": self.batch_size,
                "epochs": self.epochs,
                "weight_decay": self.weight_decay,
            },
        }
        arrays = {
            f"encoders/{name}": tensor.detach().cpu().numpy()
            for name, tensor in self.encoders_.state_dict().items()
        }
        arrays["loss_history"] = np.asarray(self.loss_history_, dtype=np.float64)
        buffer = io.BytesIO()
        np.savez(buffer, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **arrays)
        Path(path).write_bytes(buffer.getvalue())

    @classmethod
    def load(cls, path, config: AlignConfig | None = None) -> "PatchFeatureAligner":
        with np.load(path) as archive:
            header = json.loads(bytes(archive["header"]).decode())
            if header.get("format") != CHECKPOINT_FORMAT:
                raise ConfigError(f"not an aligner checkpoint: format {header.get('format')!r}")
            stored = align_config_from_dict(header["config"])
            if config is not None and config != stored:
                raise ConfigError(
                    f"checkpoint config {stored} does not match requested config {config}"
                )
            hyper = header["hyper"]
            est = cls(
                config=stored,
                learning_rate=hyper["learning_rate"],
                batch_size=hyper["batch_size"],
                epochs=hyper["epochs"],
                weight_decay=hyper["weight_decay"],
                seed=header["seed"],
            )
            est._build()
            state = {
                key[len("encoders/"):]: torch.as_tensor(archive[key])
                for key in archive.files
                if key.startswith("encoders/")
            }
            est.loss_history_ = archive["loss_history"].tolist()
        est.encoders_.load_state_dict(state)
        est.epoch_ = header["epoch"]
        return est
