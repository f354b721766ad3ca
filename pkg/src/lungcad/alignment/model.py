"""Encoders and projection heads for patch/feature contrastive alignment."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from ..errors import ConfigError

FEATURE_RESCALE_OFFSET = 1.0
FEATURE_RESCALE_SCALE = 4.0


@dataclass(frozen=True)
class AlignConfig:
    """Architecture and loss settings for the alignment stage."""

    image_embed_dim: int = 64
    feature_input_dim: int = 8
    joint_dim: int = 128
    temperature: float = 0.07
    alpha: float = 1.0
    beta: float = 1.0
    backbone: str = "tiny"
    patch_size: int = 96

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ConfigError(
                f"alpha/beta must be non-negative with positive sum, got {self.alpha}, {self.beta}"
            )
        if self.backbone not in ("tiny", "resnet50"):
            raise ConfigError(f"backbone must be 'tiny' or 'resnet50', got {self.backbone!r}")

    @classmethod
    def toy(cls, **overrides) -> "AlignConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls) -> "AlignConfig":
        """Full-scale configuration: ResNet-50 trunk with 2048-d embeddings."""
        return cls(image_embed_dim=2048, backbone="resnet50")


class TinyPatchEncoder(nn.Module):
    """Small convolutional trunk for desk-scale patch encoding."""

    def __init__(self, embed_dim: int):
        super().__init__()
        chans = (8, 16, 32)
        layers = []
        prev = 1
        for ch in chans:
            layers += [
                nn.Conv2d(prev, ch, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(4, ch),
                nn.GELU(),
            ]
            prev = ch
        self.trunk = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(prev, embed_dim)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        x = self.trunk(patches[:, None, :, :])
        return self.head(self.pool(x).flatten(1))


def _build_backbone(config: AlignConfig) -> nn.Module:
    if config.backbone == "tiny":
        return TinyPatchEncoder(config.image_embed_dim)
    try:
        from torchvision.models import resnet50
    except ImportError as exc:
        raise ConfigError(
            "the resnet50 backbone requires torchvision (install the 'resnet' extra)"
        ) from exc
    net = resnet50(weights=None)
    net.fc = nn.Identity()
    if config.image_embed_dim != 2048:
        raise ConfigError("resnet50 backbone produces 2048-d embeddings")

    class _GrayResnet(nn.Module):
        def __init__(self, trunk):
            super().__init__()
            self.trunk = trunk

        def forward(self, patches):
            return self.trunk(patches[:, None, :, :].repeat(1, 3, 1, 1))

    return _GrayResnet(net)


class AlignedEncoders(nn.Module):
    """Image trunk plus the two projections into the shared joint space.

    Radiomic vectors arrive in [1, 5] and are affinely rescaled to [0, 1]
    before projection; both projections emit L2-normalized joint_dim
    vectors so dot products are cosine similarities.
    """

    def __init__(self, config: AlignConfig):
        super().__init__()
        self.config = config
        self.patch_encoder = _build_backbone(config)
        self.image_proj = nn.Linear(config.image_embed_dim, config.joint_dim)
        self.feature_proj = nn.Sequential(
            nn.Linear(config.feature_input_dim, 64),
            nn.GELU(),
            nn.Linear(64, config.joint_dim),
        )

    @staticmethod
    def _normalize(x: torch.Tensor) -> torch.Tensor:
        return x / x.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def encode_patches(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.ndim != 3 or patches.shape[-2:] != (self.config.patch_size,) * 2:
            raise ValueError(
                f"expected patches of shape (B, {self.config.patch_size}, "
                f"{self.config.patch_size}), got {tuple(patches.shape)}"
            )
        return self._normalize(self.image_proj(self.patch_encoder(patches)))

    def project_features(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 2 or features.shape[1] != self.config.feature_input_dim:
            raise ValueError(
                f"expected feature vectors of shape (B, {self.config.feature_input_dim}), "
                f"got {tuple(features.shape)}"
            )
        rescaled = (features - FEATURE_RESCALE_OFFSET) / FEATURE_RESCALE_SCALE
        return self._normalize(self.feature_proj(rescaled))


def similarity_matrix(image_embeddings: torch.Tensor, feature_embeddings: torch.Tensor) -> torch.Tensor:
    """Cosine similarity matrix; rows are images, columns are feature vectors."""
    img = torch.as_tensor(image_embeddings)
    feat = torch.as_tensor(feature_embeddings)
    if img.ndim != 2 or feat.ndim != 2 or img.shape[1] != feat.shape[1]:
        raise ValueError(
            f"embedding dims disagree: {tuple(img.shape)} vs {tuple(feat.shape)}"
        )
    return img @ feat.t()


def align_config_to_dict(config: AlignConfig) -> dict:
    return asdict(config)


def align_config_from_dict(d: dict) -> AlignConfig:
    return AlignConfig(**d)
